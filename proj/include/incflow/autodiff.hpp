#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "incflow/linalg.hpp"

namespace incflow::nn {

/// Trainable matrix with its gradient accumulator.
struct Param {
    std::string name;
    Matrix value;
    Matrix grad;

    Param() = default;
    Param(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}
    void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

namespace detail {

// c += a * b^T
inline void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i).data();
        double* cr = c.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* br = b.row(j).data();
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += ar[k] * br[k];
            cr[j] += s;
        }
    }
}

// c += a^T * b
inline void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) {
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ar = a.row(k).data();
        const double* br = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ar[i];
            if (aki == 0.0) continue;
            double* cr = c.row(i).data();
            for (std::size_t j = 0; j < b.cols(); ++j) cr[j] += aki * br[j];
        }
    }
}

}  // namespace detail

/// Records a computation and runs reverse-mode differentiation over it.
/// A tape is single-use: build, call backward once, discard.
class Tape {
   public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    struct Node {
        Matrix value;
        Matrix grad;
        Backward backward;
        Param* param = nullptr;
        bool needs_grad = false;
    };

    Tape() { nodes_.reserve(1024); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix m) {
        nodes_.push_back({std::move(m), {}, nullptr, nullptr, false});
        return {this, nodes_.size() - 1};
    }

    Var param(Param& p) {
        nodes_.push_back({p.value, {}, nullptr, &p, true});
        return {this, nodes_.size() - 1};
    }

    /// Adds an interior node. `inputs` decide whether it takes part in backward.
    Var push(Matrix value, std::initializer_list<Var> inputs, Backward bw) {
        bool needs = false;
        for (const Var& v : inputs) {
            if (v.tape != this) throw std::invalid_argument("autodiff: mixing variables from different tapes");
            needs = needs || nodes_[v.id].needs_grad;
        }
        nodes_.push_back({std::move(value), {}, needs ? std::move(bw) : nullptr, nullptr, needs});
        return {this, nodes_.size() - 1};
    }

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    /// Gradient buffer of node `id`, allocated on first use.
    Matrix& grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.size() != n.value.size() || n.grad.rows() != n.value.rows())
            n.grad = Matrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Back-propagates from a 1x1 root and accumulates into parameter grads.
    void backward(Var root) {
        if (root.tape != this) throw std::invalid_argument("backward: root belongs to another tape");
        const auto& r = nodes_[root.id].value;
        if (r.rows() != 1 || r.cols() != 1)
            throw std::invalid_argument("backward: root must be scalar, got " + shape_str(r));
        if (done_) throw std::logic_error("backward: tape already consumed");
        done_ = true;
        grad(root.id)[0] = 1.0;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, i);
            if (n.param) {
                auto& g = n.param->grad;
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
            }
        }
    }

   private:
    std::vector<Node> nodes_;
    bool done_ = false;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {

inline void same_shape(const char* op, const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape || !a.tape) throw std::invalid_argument("autodiff: variables on different tapes");
    return *a.tape;
}

template <class F, class G>
Var unary(Var a, F f, G dfdx) {
    Tape& t = *a.tape;
    const Matrix& x = a.value();
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return t.push(std::move(y), {a}, [a, dfdx](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const Matrix& x = t.value(a.id);
        const Matrix& y = t.value(self);
        const Matrix& gy = t.grad(self);
        Matrix& gx = t.grad(a.id);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dfdx(x[i], y[i]);
    });
}

inline void accumulate(Tape& t, std::size_t target, const Matrix& g, double scale = 1.0) {
    if (!t.needs_grad(target)) return;
    Matrix& gt = t.grad(target);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += scale * g[i];
}

}  // namespace detail

inline Var add(Var a, Var b) {
    Tape& t = detail::tape_of(a, b);
    detail::same_shape("add", a.value(), b.value());
    Matrix y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
    return t.push(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
        const Matrix& gy = t.grad(self);
        detail::accumulate(t, a.id, gy);
        detail::accumulate(t, b.id, gy);
    });
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::tape_of(a, b);
    detail::same_shape("sub", a.value(), b.value());
    Matrix y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
    return t.push(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
        const Matrix& gy = t.grad(self);
        detail::accumulate(t, a.id, gy);
        detail::accumulate(t, b.id, gy, -1.0);
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    Tape& t = detail::tape_of(a, b);
    detail::same_shape("mul", a.value(), b.value());
    Matrix y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
    return t.push(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
        const Matrix& gy = t.grad(self);
        if (t.needs_grad(a.id)) {
            Matrix& ga = t.grad(a.id);
            const Matrix& bv = t.value(b.id);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (t.needs_grad(b.id)) {
            Matrix& gb = t.grad(b.id);
            const Matrix& av = t.value(a.id);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
        }
    });
}

inline Var matmul(Var a, Var b) {
    Tape& t = detail::tape_of(a, b);
    Matrix y = incflow::matmul(a.value(), b.value());
    return t.push(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
        const Matrix& gy = t.grad(self);
        if (t.needs_grad(a.id)) detail::gemm_nt(gy, t.value(b.id), t.grad(a.id));
        if (t.needs_grad(b.id)) detail::gemm_tn(t.value(a.id), gy, t.grad(b.id));
    });
}

/// x (n x m) plus a 1 x m row broadcast over every row.
inline Var add_row(Var x, Var bias) {
    Tape& t = detail::tape_of(x, bias);
    const Matrix& xv = x.value();
    const Matrix& bv = bias.value();
    if (bv.rows() != 1 || bv.cols() != xv.cols())
        throw std::invalid_argument("add_row: bias " + shape_str(bv) + " does not fit " + shape_str(xv));
    Matrix y = xv;
    for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bv[c];
    return t.push(std::move(y), {x, bias}, [x, bias](Tape& t, std::size_t self) {
        const Matrix& gy = t.grad(self);
        detail::accumulate(t, x.id, gy);
        if (t.needs_grad(bias.id)) {
            Matrix& gb = t.grad(bias.id);
            for (std::size_t r = 0; r < gy.rows(); ++r)
                for (std::size_t c = 0; c < gy.cols(); ++c) gb[c] += gy(r, c);
        }
    });
}

inline Var scale(Var a, double s) {
    Matrix y = a.value();
    for (auto& v : y.data()) v *= s;
    return a.tape->push(std::move(y), {a}, [a, s](Tape& t, std::size_t self) {
        const Matrix& gy = t.grad(self);
        detail::accumulate(t, a.id, gy, s);
    });
}

inline Var one_minus(Var a) {
    return detail::unary(a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

inline Var sigmoid(Var a) {
    return detail::unary(
        a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// max(0, x); the subgradient at 0 is taken as 0.
inline Var relu(Var a) {
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var square(Var a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Sum of all entries, as a 1x1.
inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    Matrix y(1, 1, s);
    return a.tape->push(std::move(y), {a}, [a](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const double g = t.grad(self)[0];
        for (auto& v : t.grad(a.id).data()) v += g;
    });
}

inline Var mean(Var a) {
    if (a.value().size() == 0) throw std::invalid_argument("mean: empty input");
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Column means: n x m -> 1 x m.
inline Var mean_rows(Var a) {
    const Matrix& x = a.value();
    if (x.rows() == 0) throw std::invalid_argument("mean_rows: empty input");
    Matrix y(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) y[c] += x(r, c);
    const double inv = 1.0 / static_cast<double>(x.rows());
    for (auto& v : y.data()) v *= inv;
    return a.tape->push(std::move(y), {a}, [a, inv](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const Matrix& gy = t.grad(self);
        Matrix& gx = t.grad(a.id);
        for (std::size_t r = 0; r < gx.rows(); ++r)
            for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += gy[c] * inv;
    });
}

/// Elementwise maximum over equally shaped inputs; ties go to the first.
inline Var max_of(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("max_of: empty input");
    Tape& t = *xs.front().tape;
    const Matrix& first = xs.front().value();
    Matrix y = first;
    std::vector<std::size_t> arg(first.size(), 0);
    for (std::size_t k = 1; k < xs.size(); ++k) {
        detail::same_shape("max_of", first, xs[k].value());
        const Matrix& v = xs[k].value();
        for (std::size_t i = 0; i < y.size(); ++i)
            if (v[i] > y[i]) {
                y[i] = v[i];
                arg[i] = k;
            }
    }
    Var rep = xs.front();
    for (const Var& v : xs)
        if (t.needs_grad(v.id)) rep = v;
    return t.push(std::move(y), {rep}, [xs, arg](Tape& t, std::size_t self) {
        const Matrix& gy = t.grad(self);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            const Var& src = xs[arg[i]];
            if (t.needs_grad(src.id)) t.grad(src.id)[i] += gy[i];
        }
    });
}

/// Horizontal concatenation of inputs with equal row counts.
inline Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    Tape& t = *xs.front().tape;
    const std::size_t rows = xs.front().rows();
    std::size_t cols = 0;
    for (const Var& v : xs) {
        if (v.tape != &t) throw std::invalid_argument("concat_cols: variables on different tapes");
        if (v.rows() != rows) throw std::invalid_argument("concat_cols: row count mismatch");
        cols += v.cols();
    }
    Matrix y(rows, cols);
    std::size_t off = 0;
    for (const Var& v : xs) {
        const Matrix& m = v.value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < m.cols(); ++c) y(r, off + c) = m(r, c);
        off += m.cols();
    }
    // Any input that needs a gradient makes the result need one.
    Var rep = xs.front();
    for (const Var& v : xs)
        if (t.needs_grad(v.id)) rep = v;
    return t.push(std::move(y), {rep}, [xs](Tape& t, std::size_t self) {
        const Matrix& gy = t.grad(self);
        std::size_t off = 0;
        for (const Var& v : xs) {
            const std::size_t w = t.value(v.id).cols();
            if (t.needs_grad(v.id)) {
                Matrix& g = t.grad(v.id);
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < w; ++c) g(r, c) += gy(r, off + c);
            }
            off += w;
        }
    });
}

inline Var concat_cols(Var a, Var b) { return concat_cols(std::vector<Var>{a, b}); }

/// Rows [r0, r0 + n).
inline Var slice_rows(Var a, std::size_t r0, std::size_t n) {
    const Matrix& x = a.value();
    if (r0 + n > x.rows()) throw std::invalid_argument("slice_rows: range outside " + shape_str(x));
    Matrix y(n, x.cols());
    std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(r0 * x.cols()),
              x.data().begin() + static_cast<std::ptrdiff_t>((r0 + n) * x.cols()), y.data().begin());
    return a.tape->push(std::move(y), {a}, [a, r0](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const Matrix& gy = t.grad(self);
        Matrix& gx = t.grad(a.id);
        const std::size_t off = r0 * gx.cols();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[off + i] += gy[i];
    });
}

/// Columns [c0, c0 + n).
inline Var slice_cols(Var a, std::size_t c0, std::size_t n) {
    const Matrix& x = a.value();
    if (c0 + n > x.cols()) throw std::invalid_argument("slice_cols: range outside " + shape_str(x));
    Matrix y(x.rows(), n);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) y(r, c) = x(r, c0 + c);
    return a.tape->push(std::move(y), {a}, [a, c0](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const Matrix& gy = t.grad(self);
        Matrix& gx = t.grad(a.id);
        for (std::size_t r = 0; r < gy.rows(); ++r)
            for (std::size_t c = 0; c < gy.cols(); ++c) gx(r, c0 + c) += gy(r, c);
    });
}

/// Picks columns by index (repeats allowed).
inline Var gather_cols(Var a, std::vector<std::size_t> idx) {
    const Matrix& x = a.value();
    Matrix y(x.rows(), idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] >= x.cols()) throw std::invalid_argument("gather_cols: index outside " + shape_str(x));
        for (std::size_t r = 0; r < x.rows(); ++r) y(r, j) = x(r, idx[j]);
    }
    return a.tape->push(std::move(y), {a}, [a, idx = std::move(idx)](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const Matrix& gy = t.grad(self);
        Matrix& gx = t.grad(a.id);
        for (std::size_t j = 0; j < idx.size(); ++j)
            for (std::size_t r = 0; r < gy.rows(); ++r) gx(r, idx[j]) += gy(r, j);
    });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace incflow::nn
