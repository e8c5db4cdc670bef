#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "incflow/autodiff.hpp"

using namespace incflow;
using namespace incflow::nn;

TEST(Autodiff, ProductRule) {
    Param x{"x", Matrix{{2.0}}}, y{"y", Matrix{{3.0}}};
    Tape t;
    t.backward(mul(t.param(x), t.param(y)));
    EXPECT_DOUBLE_EQ(x.grad[0], 3.0);
    EXPECT_DOUBLE_EQ(y.grad[0], 2.0);
}

TEST(Autodiff, ReluSubgradient) {
    Param x{"x", Matrix{{-1.0, 2.0, 0.0}}};
    Tape t;
    t.backward(sum(relu(t.param(x))));
    EXPECT_EQ(x.grad[0], 0.0);
    EXPECT_EQ(x.grad[1], 1.0);
    EXPECT_EQ(x.grad[2], 0.0);
}

TEST(Autodiff, ReusedVariableAccumulates) {
    Param x{"x", Matrix{{1.5}}};
    Tape t;
    Var v = t.param(x);
    t.backward(add(mul(v, v), v));
    EXPECT_DOUBLE_EQ(x.grad[0], 4.0);
}

TEST(Autodiff, Errors) {
    Tape t;
    Var a = t.constant(Matrix(2, 3));
    Var b = t.constant(Matrix(3, 2));
    EXPECT_THROW(add(a, b), std::invalid_argument);
    EXPECT_THROW(matmul(a, a), std::invalid_argument);
    EXPECT_THROW(t.backward(a), std::invalid_argument);
    Tape other;
    EXPECT_THROW(add(a, other.constant(Matrix(2, 3))), std::invalid_argument);
    EXPECT_THROW(slice_cols(a, 2, 2), std::invalid_argument);
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
    Param x{"x", Matrix{{1.0, 2.0}}};
    Tape t;
    Var c = t.constant(Matrix{{5.0, 7.0}});
    Var y = sum(mul(t.param(x), c));
    t.backward(y);
    EXPECT_DOUBLE_EQ(x.grad[0], 5.0);
    EXPECT_DOUBLE_EQ(x.grad[1], 7.0);
    EXPECT_FALSE(t.needs_grad(c.id));
}

class PrimitiveGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
    const auto cases = gradcheck::primitive_cases();
    const auto& c = cases.at(GetParam());
    EXPECT_LT(gradcheck::worst_over(c, 20, 1000 + GetParam()), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradients, ::testing::Range<std::size_t>(0, gradcheck::primitive_cases().size()),
                         [](const auto& info) { return gradcheck::primitive_cases()[info.param].name; });
