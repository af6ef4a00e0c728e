#pragma once

// Optimization loop: AdamW over adapters and mixing coefficients only, linear
// warmup/decay schedule, per-example gradient accumulation, CSV metrics with
// the per-layer mixing ratios.

#include <iomanip>
#include <ostream>
#include <sstream>

#include "bimix/engine.hpp"

namespace bimix {

struct TrainConfig {
    double learning_rate = 1e-3;
    int update_steps = 100;
    double warmup_frac = 0.10;
    int micro_batch = 1;
    int accum_steps = 10;
    std::uint64_t seed = 42;
    int log_interval = 10;

    int effective_batch() const { return micro_batch * accum_steps; }

    void validate() const {
        if (learning_rate < 0 || update_steps < 1 || micro_batch < 1 || accum_steps < 1 || log_interval < 1) {
            throw ConfigError("train config: rates and counts must be positive");
        }
        if (warmup_frac < 0.0 || warmup_frac > 1.0) {
            throw ConfigError("train config: warmup_frac must be in [0,1]");
        }
    }
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Linear ramp from lr/warmup to the peak, then linear decay to zero at
// update_steps. lr(0) = peak/warmup_steps, lr(warmup_steps) = peak.
inline double lr_schedule(int step, const TrainConfig& cfg) {
    if (step < 0 || step >= cfg.update_steps) {
        throw std::out_of_range("lr_schedule: step " + std::to_string(step) + " outside [0," +
                                std::to_string(cfg.update_steps) + ")");
    }
    const int warmup = std::max(1, static_cast<int>(std::llround(cfg.warmup_frac * cfg.update_steps)));
    if (step < warmup) {
        return cfg.learning_rate * static_cast<double>(step + 1) / warmup;
    }
    return cfg.learning_rate * static_cast<double>(cfg.update_steps - step) / (cfg.update_steps - warmup);
}

template <typename S>
class AdamW {
public:
    AdamW(TunedModel<S>& model, AdamConfig cfg = {}) : cfg_(cfg) {
        model.visit_trainable([&](const std::string&, Tensor<S>& t) {
            slots_.push_back({t, std::vector<S>(t.numel(), S(0)), std::vector<S>(t.numel(), S(0))});
        });
    }

    int step_count() const { return t_; }

    // One update from the accumulated grads, scaled by grad_scale (the
    // 1/batch factor of example-level loss averaging).
    void step(double lr, double grad_scale) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (auto& slot : slots_) {
            auto& data = slot.param.data();
            const auto& grad = slot.param.grad();
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double g = static_cast<double>(grad[i]) * grad_scale;
                slot.m[i] = static_cast<S>(cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g);
                slot.v[i] = static_cast<S>(cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g);
                const double m_hat = slot.m[i] / bc1;
                const double v_hat = slot.v[i] / bc2;
                double update = lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
                update += lr * cfg_.weight_decay * data[i];
                data[i] = static_cast<S>(data[i] - update);
            }
        }
    }

private:
    struct Slot {
        Tensor<S> param;  // handle to the live parameter node
        std::vector<S> m, v;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    int t_ = 0;
};

// Accumulates grads for every example in the batch (caller zeroes first);
// returns the summed loss. Throws NumericError on a non-finite loss.
template <typename S>
double accumulate_gradients(TunedModel<S>& m, std::span<const TokenizedExample> batch) {
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto fwd = forward_for_training<S>(m, batch[i].prompt, batch[i].answer);
        const double loss = static_cast<double>(fwd.loss.item());
        if (!std::isfinite(loss)) {
            throw NumericError("non-finite loss on batch example " + std::to_string(i));
        }
        fwd.loss.backward();
        loss_sum += loss;
    }
    return loss_sum;
}

// Example-level averaging: accumulate per-example grads, one AdamW update of
// the trainables, grads zeroed afterwards. Returns the mean batch loss.
template <typename S>
double training_step(TunedModel<S>& m, std::span<const TokenizedExample> batch, AdamW<S>& opt, double lr) {
    if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
    m.zero_grads();
    const double loss_sum = accumulate_gradients(m, batch);
    opt.step(lr, 1.0 / static_cast<double>(batch.size()));
    m.zero_grads();
    return loss_sum / static_cast<double>(batch.size());
}

struct MetricsRow {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::vector<double> alpha_k, alpha_v;  // per layer; zeros without mixing
};

struct TrainResult {
    std::vector<MetricsRow> log;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

template <typename S>
std::pair<std::vector<double>, std::vector<double>> current_alphas(const TunedModel<S>& m) {
    const std::size_t L = static_cast<std::size_t>(m.config.n_layers);
    if (!m.mix) return {std::vector<double>(L, 0.0), std::vector<double>(L, 0.0)};
    NoGradGuard ng;
    Tensor<S> ak = mixing_alpha(m.mix->theta_k, m.mix->theta_init);
    Tensor<S> av = mixing_alpha(m.mix->theta_v, m.mix->theta_init);
    return {std::vector<double>(ak.data().begin(), ak.data().end()),
            std::vector<double>(av.data().begin(), av.data().end())};
}

inline std::string metrics_csv_header(int n_layers) {
    std::string h = "step,loss,lr";
    for (int l = 0; l < n_layers; ++l) h += ",alpha_k." + std::to_string(l);
    for (int l = 0; l < n_layers; ++l) h += ",alpha_v." + std::to_string(l);
    return h;
}

inline void write_metrics_row(std::ostream& os, const MetricsRow& row) {
    os << row.step << ',' << std::setprecision(10) << row.loss << ',' << row.lr;
    for (double a : row.alpha_k) os << ',' << a;
    for (double a : row.alpha_v) os << ',' << a;
    os << '\n';
}

// Deterministic given the seed: epoch-wise shuffling from one RNG stream, one
// optimizer step per update, metrics at each logging interval (first and last
// step always included).
template <typename S>
TrainResult run_training(TunedModel<S>& m, const std::vector<TokenizedExample>& dataset,
                         const TrainConfig& cfg, std::ostream* metrics_csv = nullptr) {
    cfg.validate();
    if (dataset.empty()) throw ConfigError("run_training: dataset is empty");

    AdamW<S> opt(m);
    std::mt19937 shuffle_rng(static_cast<std::uint32_t>(cfg.seed));
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::size_t cursor = 0;

    if (metrics_csv) *metrics_csv << metrics_csv_header(m.config.n_layers) << '\n';

    TrainResult result;
    const int batch = cfg.effective_batch();
    std::vector<TokenizedExample> current;
    current.reserve(batch);
    for (int step = 0; step < cfg.update_steps; ++step) {
        current.clear();
        std::vector<std::size_t> ids;
        for (int b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            ids.push_back(order[cursor]);
            current.push_back(dataset[order[cursor]]);
            ++cursor;
        }
        double loss;
        const double lr = lr_schedule(step, cfg);
        try {
            loss = training_step(m, current, opt, lr);
        } catch (const NumericError& e) {
            std::ostringstream msg;
            msg << e.what() << " (update step " << step << ", example ids:";
            for (std::size_t id : ids) msg << ' ' << id;
            msg << ')';
            throw NumericError(msg.str());
        }
        if (step == 0) result.initial_loss = loss;
        result.final_loss = loss;
        if (step % cfg.log_interval == 0 || step + 1 == cfg.update_steps) {
            auto [ak, av] = current_alphas(m);
            MetricsRow row{step, loss, lr, std::move(ak), std::move(av)};
            if (metrics_csv) write_metrics_row(*metrics_csv, row);
            result.log.push_back(std::move(row));
        }
    }
    return result;
}

}  // namespace bimix
