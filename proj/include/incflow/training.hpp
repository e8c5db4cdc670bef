#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "incflow/autodiff.hpp"
#include "incflow/errors.hpp"
#include "incflow/model.hpp"
#include "incflow/stats.hpp"

namespace incflow::nn {

struct SgdConfig {
    std::size_t epochs = 30;
    double lr = 1e-2;
    double clip_norm = 5.0;
    std::size_t batch = 8;
    std::uint64_t seed = 0;
};

struct TrainResult {
    double initial_loss = 0.0;      // full pass before any update
    double final_loss = 0.0;        // full pass after the last epoch
    std::vector<double> epoch_loss; // mean batch loss per epoch
};

using SampleLoss = std::function<Var(Tape&, std::size_t)>;

/// Mean loss over samples without updating anything.
inline double mean_loss(std::size_t n, const SampleLoss& loss) {
    if (n == 0) throw DataError("training: no samples");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        Tape t;
        s += loss(t, i).value()[0];
    }
    return s / static_cast<double>(n);
}

/// Mini-batch SGD with global-norm clipping. The batch loss is the mean of
/// its sample losses. Sample order is reshuffled each epoch from `cfg.seed`.
inline TrainResult train_sgd(const std::vector<Param*>& params, std::size_t n, const SampleLoss& loss,
                             const SgdConfig& cfg) {
    if (n == 0) throw DataError("training: no samples");
    if (cfg.batch == 0 || !(cfg.lr > 0.0)) throw ConfigError("training: batch and learning rate must be positive");
    TrainResult out;
    out.initial_loss = mean_loss(n, loss);
    if (!std::isfinite(out.initial_loss)) throw NumericalError("training: initial loss is not finite");
    std::mt19937_64 rng(sub_seed(cfg.seed, "batching"));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch) {
            const std::size_t b1 = std::min(n, b0 + cfg.batch);
            for (Param* p : params) p->zero_grad();
            Tape t;
            std::vector<Var> terms;
            for (std::size_t i = b0; i < b1; ++i) terms.push_back(loss(t, order[i]));
            Var total = terms.front();
            for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
            total = scale(total, 1.0 / static_cast<double>(terms.size()));
            const double value = total.value()[0];
            if (!std::isfinite(value)) {
                std::ostringstream msg;
                msg << "training: non-finite loss at epoch " << epoch << ", batch starting at sample " << order[b0];
                throw NumericalError(msg.str());
            }
            t.backward(total);
            double norm2 = 0.0;
            for (Param* p : params)
                for (double g : p->grad.data()) norm2 += g * g;
            const double norm = std::sqrt(norm2);
            if (!std::isfinite(norm)) throw NumericalError("training: non-finite gradient at epoch " + std::to_string(epoch));
            const double k = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
            for (Param* p : params)
                for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= cfg.lr * k * p->grad[i];
            epoch_sum += value;
            ++batches;
        }
        out.epoch_loss.push_back(epoch_sum / static_cast<double>(batches));
    }
    out.final_loss = mean_loss(n, loss);
    return out;
}

/// FNV-1a over every parameter value, in order.
inline std::uint64_t parameter_hash(const std::vector<Param*>& params) {
    Fnv1a h;
    for (const Param* p : params) {
        h.update(p->name);
        for (double v : p->value.data()) h.update(v);
    }
    return h.digest();
}

struct ForecasterTraining {
    SgdConfig sgd;
    double beta = 0.05;
    double spike_weight = 5.0;
};

inline TrainResult train_forecaster(Forecaster& m, const FeatureTensor& z, const std::vector<std::size_t>& starts,
                                    const ForecasterTraining& cfg) {
    if (!z.standardized) throw DataError("training expects a standardized tensor");
    if (starts.empty())
        throw DataError("training: no complete windows; need at least lookback + horizon bins in the training split");
    return train_sgd(m.params(), starts.size(),
                     [&](Tape& t, std::size_t i) { return m.window_loss(t, z, starts[i], cfg.beta, cfg.spike_weight); },
                     cfg.sgd);
}

inline TrainResult train_localizer(Localizer& loc, const FeatureTensor& z, const std::vector<EventSample>& samples,
                                   const SgdConfig& cfg) {
    loc.fit_scaler(samples);
    return train_sgd(loc.params(), samples.size(),
                     [&](Tape& t, std::size_t i) { return loc.sample_loss(t, z, samples[i]); }, cfg);
}

}  // namespace incflow::nn
