#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "incflow/autodiff.hpp"
#include "incflow/errors.hpp"
#include "incflow/linalg.hpp"

namespace incflow::nn {

/// Glorot-uniform initialised parameter.
inline Param glorot(std::string name, std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-a, a);
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = u(rng);
    return {std::move(name), std::move(m)};
}

inline Param zeros(std::string name, std::size_t rows, std::size_t cols) { return {std::move(name), Matrix(rows, cols)}; }

inline void check_finite(const Matrix& m, const std::string& what) {
    for (double v : m.data())
        if (!std::isfinite(v)) throw NumericalError("non-finite value in " + what);
}

// ---------------------------------------------------------------- BiLSTM

struct LstmDirection {
    Param wx;  // F x 4d, gate blocks ordered i, f, o, g
    Param wh;  // d x 4d
    Param b;   // 1 x 4d
};

class BiLstm {
   public:
    BiLstm() = default;
    BiLstm(const std::string& prefix, std::size_t input_dim, std::size_t hidden, std::mt19937_64& rng)
        : input_(input_dim), hidden_(hidden) {
        if (input_dim == 0 || hidden == 0) throw ConfigError("bilstm: dimensions must be positive");
        for (auto* d : {&fwd_, &bwd_}) {
            const std::string p = prefix + (d == &fwd_ ? ".fwd" : ".bwd");
            d->wx = glorot(p + ".wx", input_dim, 4 * hidden, rng);
            d->wh = glorot(p + ".wh", hidden, 4 * hidden, rng);
            d->b = zeros(p + ".b", 1, 4 * hidden);
        }
    }

    std::size_t input_dim() const noexcept { return input_; }
    std::size_t hidden() const noexcept { return hidden_; }
    std::size_t output_dim() const noexcept { return 2 * hidden_; }
    LstmDirection& forward_dir() noexcept { return fwd_; }
    LstmDirection& backward_dir() noexcept { return bwd_; }

    /// Encodes a T x F sequence as [h_fwd(T) | h_bwd(1)], a 1 x 2d row.
    Var encode(Tape& t, Var seq) {
        if (seq.rows() == 0) throw std::invalid_argument("bilstm: empty sequence");
        if (seq.cols() != input_)
            throw std::invalid_argument("bilstm: expected " + std::to_string(input_) + " features, got " +
                                        std::to_string(seq.cols()));
        Var hf = run(t, seq, fwd_, false);
        Var hb = run(t, seq, bwd_, true);
        return concat_cols(hf, hb);
    }

    std::vector<Param*> params() { return {&fwd_.wx, &fwd_.wh, &fwd_.b, &bwd_.wx, &bwd_.wh, &bwd_.b}; }

   private:
    Var run(Tape& t, Var seq, LstmDirection& d, bool reverse) {
        const std::size_t T = seq.rows();
        const std::size_t H = hidden_;
        Var wh = t.param(d.wh);
        Var b = t.param(d.b);
        Var xw = add_row(matmul(seq, t.param(d.wx)), b);  // T x 4d, input part of every step at once
        Var h = t.constant(Matrix(1, H));
        Var c = t.constant(Matrix(1, H));
        for (std::size_t k = 0; k < T; ++k) {
            const std::size_t row = reverse ? T - 1 - k : k;
            Var z = add(slice_rows(xw, row, 1), matmul(h, wh));
            Var i = sigmoid(slice_cols(z, 0, H));
            Var f = sigmoid(slice_cols(z, H, H));
            Var o = sigmoid(slice_cols(z, 2 * H, H));
            Var g = tanh(slice_cols(z, 3 * H, H));
            c = add(mul(f, c), mul(i, g));
            h = mul(o, tanh(c));
        }
        return h;
    }

    std::size_t input_ = 0;
    std::size_t hidden_ = 0;
    LstmDirection fwd_;
    LstmDirection bwd_;
};

// ------------------------------------------------------ diffusion conv

/// theta[k] = {forward-hop weights, backward-hop weights}, each in x out.
using DiffusionTheta = std::vector<std::array<Var, 2>>;

/// sum_k (S_f^k X) theta[k][0] + (S_b^k X) theta[k][1].
inline Var diffusion_conv(Var x, Var sf, Var sb, const DiffusionTheta& theta) {
    if (theta.empty()) throw std::invalid_argument("diffusion_conv: K must be >= 1");
    if (sf.rows() != x.rows() || sf.cols() != x.rows() || sb.rows() != x.rows() || sb.cols() != x.rows())
        throw std::invalid_argument("diffusion_conv: supports do not match " + std::to_string(x.rows()) + " vertices");
    for (const auto& th : theta)
        for (const Var& v : th)
            if (v.rows() != x.cols())
                throw std::invalid_argument("diffusion_conv: theta rows " + std::to_string(v.rows()) + " != features " +
                                            std::to_string(x.cols()));
    Var out = add(matmul(x, theta[0][0]), matmul(x, theta[0][1]));
    Var pf = x;
    Var pb = x;
    for (std::size_t k = 1; k < theta.size(); ++k) {
        pf = matmul(sf, pf);
        pb = matmul(sb, pb);
        out = add(out, add(matmul(pf, theta[k][0]), matmul(pb, theta[k][1])));
    }
    return out;
}

struct DiffusionGate {
    std::vector<std::array<Param, 2>> theta;  // [K][2], (in + hidden) x hidden
    Param bias;                               // 1 x hidden

    DiffusionGate() = default;
    DiffusionGate(const std::string& name, int k, std::size_t in, std::size_t out, std::mt19937_64& rng) {
        for (int i = 0; i < k; ++i)
            theta.push_back({glorot(name + ".theta" + std::to_string(i) + "f", in, out, rng),
                             glorot(name + ".theta" + std::to_string(i) + "b", in, out, rng)});
        bias = zeros(name + ".bias", 1, out);
    }

    Var apply(Tape& t, Var z, Var sf, Var sb) {
        DiffusionTheta th;
        for (auto& pair : theta) th.push_back({t.param(pair[0]), t.param(pair[1])});
        return add_row(diffusion_conv(z, sf, sb, th), t.param(bias));
    }

    void collect(std::vector<Param*>& out) {
        for (auto& pair : theta) {
            out.push_back(&pair[0]);
            out.push_back(&pair[1]);
        }
        out.push_back(&bias);
    }
};

/// GRU cell whose dense maps are diffusion convolutions over the graph.
class DcgruCell {
   public:
    DcgruCell() = default;
    DcgruCell(const std::string& prefix, int k, std::size_t features, std::size_t hidden, std::mt19937_64& rng)
        : k_(k), features_(features), hidden_(hidden) {
        if (k < 1) throw ConfigError("dcgru: K must be >= 1");
        if (features == 0 || hidden == 0) throw ConfigError("dcgru: dimensions must be positive");
        reset_ = DiffusionGate(prefix + ".reset", k, features + hidden, hidden, rng);
        update_ = DiffusionGate(prefix + ".update", k, features + hidden, hidden, rng);
        cand_ = DiffusionGate(prefix + ".cand", k, features + hidden, hidden, rng);
    }

    int k() const noexcept { return k_; }
    std::size_t hidden() const noexcept { return hidden_; }
    DiffusionGate& reset_gate() noexcept { return reset_; }
    DiffusionGate& update_gate() noexcept { return update_; }
    DiffusionGate& candidate_gate() noexcept { return cand_; }

    /// One recurrent step: x is E x P, h_prev is E x d.
    Var step(Tape& t, Var h_prev, Var x, Var sf, Var sb) {
        if (x.cols() != features_ || h_prev.cols() != hidden_ || x.rows() != h_prev.rows())
            throw std::invalid_argument("dcgru: input " + shape_str(x.value()) + " / state " +
                                        shape_str(h_prev.value()) + " do not match the cell");
        Var xh = concat_cols(x, h_prev);
        Var r = sigmoid(reset_.apply(t, xh, sf, sb));
        check_finite(r.value(), "dcgru reset gate");
        Var u = sigmoid(update_.apply(t, xh, sf, sb));
        check_finite(u.value(), "dcgru update gate");
        Var c = tanh(cand_.apply(t, concat_cols(x, mul(r, h_prev)), sf, sb));
        check_finite(c.value(), "dcgru candidate");
        return add(mul(u, h_prev), mul(one_minus(u), c));
    }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        reset_.collect(out);
        update_.collect(out);
        cand_.collect(out);
        return out;
    }

   private:
    int k_ = 1;
    std::size_t features_ = 0;
    std::size_t hidden_ = 0;
    DiffusionGate reset_, update_, cand_;
};

// ------------------------------------------------------------ pooling

enum class Pooling { mean, last, max };

inline Pooling pooling_from(const std::string& s) {
    if (s == "mean") return Pooling::mean;
    if (s == "last") return Pooling::last;
    if (s == "max") return Pooling::max;
    throw ConfigError("unknown pooling '" + s + "'");
}

inline const char* to_string(Pooling p) {
    switch (p) {
        case Pooling::mean: return "mean";
        case Pooling::last: return "last";
        case Pooling::max: return "max";
    }
    return "?";
}

/// Collapses T_g states of shape E x d to one 1 x d vector: over time first,
/// then averaged over vertices.
inline Var pool_hidden(const std::vector<Var>& states, Pooling mode = Pooling::mean) {
    if (states.empty()) throw std::invalid_argument("pool_hidden: empty sequence");
    Var over_time = states.back();
    if (mode == Pooling::mean) {
        Var acc = states.front();
        for (std::size_t i = 1; i < states.size(); ++i) acc = add(acc, states[i]);
        over_time = states.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(states.size()));
    } else if (mode == Pooling::max) {
        over_time = max_of(states);
    }
    return mean_rows(over_time);
}

// ------------------------------------------------------ fusion + heads

class FusionHead {
   public:
    FusionHead() = default;
    FusionHead(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out, std::size_t steps,
               std::mt19937_64& rng)
        : in_(in), out_(out) {
        if (steps == 0) throw ConfigError("fusion: need at least one horizon");
        w1_ = glorot(prefix + ".w1", in, hidden, rng);
        c1_ = zeros(prefix + ".c1", 1, hidden);
        w2_ = glorot(prefix + ".w2", hidden, hidden, rng);
        c2_ = zeros(prefix + ".c2", 1, hidden);
        for (std::size_t s = 0; s < steps; ++s) {
            u_.push_back(glorot(prefix + ".u" + std::to_string(s), hidden, out, rng));
            d_.push_back(zeros(prefix + ".d" + std::to_string(s), 1, out));
        }
    }

    std::size_t steps() const noexcept { return u_.size(); }
    std::size_t output_dim() const noexcept { return out_; }

    /// p_s = U_s relu(W2 relu(W1 u + c1) + c2) + d_s for each step s.
    std::vector<Var> forward(Tape& t, Var enc, Var pooled) {
        Var u = concat_cols(enc, pooled);
        if (u.cols() != in_)
            throw std::invalid_argument("fusion: input width " + std::to_string(u.cols()) + " != " + std::to_string(in_));
        Var h = relu(add_row(matmul(u, t.param(w1_)), t.param(c1_)));
        h = relu(add_row(matmul(h, t.param(w2_)), t.param(c2_)));
        std::vector<Var> out;
        for (std::size_t s = 0; s < u_.size(); ++s) out.push_back(add_row(matmul(h, t.param(u_[s])), t.param(d_[s])));
        return out;
    }

    std::vector<Param*> params() {
        std::vector<Param*> out{&w1_, &c1_, &w2_, &c2_};
        for (std::size_t s = 0; s < u_.size(); ++s) {
            out.push_back(&u_[s]);
            out.push_back(&d_[s]);
        }
        return out;
    }

   private:
    std::size_t in_ = 0;
    std::size_t out_ = 0;
    Param w1_, c1_, w2_, c2_;
    std::vector<Param> u_, d_;
};

/// Head outputs are (low, high) pairs; enforce high >= low.
inline void monotonic_repair(std::vector<double>& pairs) {
    for (std::size_t i = 0; i + 1 < pairs.size(); i += 2) pairs[i + 1] = std::max(pairs[i], pairs[i + 1]);
}

// ------------------------------------------------------------- losses

/// mean over samples of beta*(high - low) + w*(max(0, low - z) + max(0, z - high)).
inline Var interval_loss(Var low, Var high, const Matrix& z, const Matrix& w, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("interval_loss: beta must be positive");
    if (low.value().size() == 0) throw std::invalid_argument("interval_loss: no samples");
    for (double v : w.data())
        if (v < 0.0) throw std::invalid_argument("interval_loss: negative weight");
    Tape& t = *low.tape;
    Var zv = t.constant(z);
    Var wv = t.constant(w);
    Var width = scale(sub(high, low), beta);
    Var miss = add(relu(sub(low, zv)), relu(sub(zv, high)));
    return mean(add(width, mul(miss, wv)));
}

/// Plain-number version of the same objective.
inline double interval_loss_value(const std::vector<double>& low, const std::vector<double>& high,
                                  const std::vector<double>& z, const std::vector<double>& w, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("interval_loss: beta must be positive");
    if (low.empty() || low.size() != high.size() || low.size() != z.size() || low.size() != w.size())
        throw std::invalid_argument("interval_loss: inputs must be non-empty and equally long");
    double s = 0.0;
    for (std::size_t i = 0; i < low.size(); ++i) {
        if (w[i] < 0.0) throw std::invalid_argument("interval_loss: negative weight");
        s += beta * (high[i] - low[i]) + (std::max(0.0, low[i] - z[i]) + std::max(0.0, z[i] - high[i])) * w[i];
    }
    return s / static_cast<double>(low.size());
}

/// Squared error of all six bounds against their truth, both bounds of a
/// dimension aiming at the same value. pred is 1 x 6 (xl, xh, yl, yh, tl, th).
inline Var event_bounds_loss(Var pred, const std::array<double, 3>& truth) {
    if (pred.cols() != 6 || pred.rows() != 1) throw std::invalid_argument("event loss: expected 1x6 bounds");
    Matrix target(1, 6);
    for (std::size_t d = 0; d < 3; ++d) target[2 * d] = target[2 * d + 1] = truth[d];
    return mean(square(sub(pred, pred.tape->constant(std::move(target)))));
}

}  // namespace incflow::nn
