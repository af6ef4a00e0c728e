#pragma once

// The dual-pass mechanism: the prompt is encoded with a causal pass and
// (depending on the variant) a second pass under a different mask and adapter
// set; per-layer keys and values are blended with learnable coefficients and
// become the KV-cache that conditions strictly causal answer decoding.

#include <optional>
#include <thread>

#include "bimix/data.hpp"
#include "bimix/errors.hpp"
#include "bimix/forward.hpp"

namespace bimix {

enum class Variant { full, naive_bidir, no_mixing, only_causal, shared_weights, baseline };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::naive_bidir: return "naive_bidir";
        case Variant::no_mixing: return "no_mixing";
        case Variant::only_causal: return "only_causal";
        case Variant::shared_weights: return "shared_weights";
        case Variant::baseline: return "baseline";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "naive_bidir") return Variant::naive_bidir;
    if (s == "no_mixing") return Variant::no_mixing;
    if (s == "only_causal") return Variant::only_causal;
    if (s == "shared_weights") return Variant::shared_weights;
    if (s == "baseline") return Variant::baseline;
    throw ConfigError("unknown variant '" + s + "'");
}

// Which pieces a variant allocates.
inline bool variant_uses_second_set(Variant v) {
    return v == Variant::full || v == Variant::no_mixing || v == Variant::only_causal;
}
inline bool variant_has_mixing(Variant v) {
    return v == Variant::full || v == Variant::only_causal || v == Variant::shared_weights;
}
inline bool variant_has_two_passes(Variant v) { return variant_has_mixing(v); }

struct EngineConfig {
    Variant variant = Variant::full;
    MaskKind second_pass_mask = MaskKind::bidirectional;
    double theta_init = 0.01;
    bool concurrent_prefill = false;
    // Seed and end-of-sequence ids used by decoding; overridable for models
    // whose vocabulary is smaller than the byte tokenizer's.
    int sep_token = Tokenizer::sep_id;
    int eos_token = Tokenizer::eos_id;
};

// Effective mask of the prompt-encoding pass(es). Single-pass variants encode
// the prompt once under this mask; two-pass variants run causal + this.
inline MaskKind effective_second_mask(const EngineConfig& cfg) {
    switch (cfg.variant) {
        case Variant::baseline: return MaskKind::causal;
        case Variant::naive_bidir:
        case Variant::no_mixing: return MaskKind::bidirectional;
        case Variant::only_causal: return MaskKind::causal;
        default: return cfg.second_pass_mask;
    }
}

template <typename S>
struct Mixing {
    Tensor<S> theta_k, theta_v;  // one coefficient per layer
    S theta_init = S(0.01);

    static Mixing init(int n_layers, S theta_init) {
        if (theta_init <= S(0)) throw ConfigError("theta_init must be positive");
        Mixing m;
        m.theta_init = theta_init;
        m.theta_k = Tensor<S>::full({static_cast<std::size_t>(n_layers)}, theta_init, true);
        m.theta_v = Tensor<S>::full({static_cast<std::size_t>(n_layers)}, theta_init, true);
        return m;
    }

    template <typename F>
    void visit(F&& fn) {
        fn(std::string("mix.theta_k"), theta_k);
        fn(std::string("mix.theta_v"), theta_v);
    }
};

// alpha = |theta| / (theta_init + |theta|), the bidirectional-to-causal ratio.
template <typename S>
Tensor<S> mixing_alpha(const Tensor<S>& theta, S theta_init) {
    if (theta_init <= S(0)) throw ConfigError("theta_init must be positive");
    return mix_ratio(theta, theta_init);
}

// A base model plus everything the finetuning method adds. The base weights
// stay frozen; only adapters and mixing coefficients are trainable.
template <typename S>
struct TunedModel {
    ModelConfig config;
    EngineConfig engine;
    PeftConfig peft;
    std::uint64_t run_seed = 0;
    Weights<S> base;
    AdapterSet<S> causal;
    std::optional<AdapterSet<S>> bidir;
    std::optional<Mixing<S>> mix;

    static TunedModel create(const ModelConfig& config, const EngineConfig& engine, const PeftConfig& peft,
                             std::uint64_t seed) {
        config.validate();
        TunedModel m;
        m.config = config;
        m.engine = engine;
        m.peft = peft;
        m.run_seed = seed;
        m.base = Weights<S>::random_init(config, seed);
        m.causal = init_adapters<S>(config, peft, AdapterRole::causal, seed, m.base);
        if (variant_uses_second_set(engine.variant)) {
            m.bidir = init_adapters<S>(config, peft, AdapterRole::bidirectional, seed, m.base);
        }
        if (variant_has_mixing(engine.variant)) {
            m.mix = Mixing<S>::init(config.n_layers, static_cast<S>(engine.theta_init));
        }
        return m;
    }

    // The adapter set driving the second prompt pass (shared variants reuse
    // the causal set).
    const AdapterSet<S>* second_set() const {
        if (engine.variant == Variant::shared_weights) return &causal;
        if (bidir) return &*bidir;
        return nullptr;
    }

    template <typename F>
    void visit_trainable(F&& fn) {
        causal.visit(fn);
        if (bidir) bidir->visit(fn);
        if (mix) mix->visit(fn);
    }

    template <typename F>
    void visit_all(F&& fn) {
        base.visit(fn);
        visit_trainable(fn);
    }

    void zero_grads() {
        visit_trainable([](const std::string&, Tensor<S>& t) { t.zero_grad(); });
    }
};

namespace detail {

template <typename S>
void check_roles(const TunedModel<S>& m) {
    if (m.causal.role != AdapterRole::causal) {
        throw std::invalid_argument("prefill: causal adapter set has wrong role");
    }
    if (variant_uses_second_set(m.engine.variant)) {
        if (!m.bidir || m.bidir->role != AdapterRole::bidirectional) {
            throw std::invalid_argument("prefill: second adapter set missing or has wrong role");
        }
    }
    if (variant_has_mixing(m.engine.variant) && !m.mix) {
        throw std::invalid_argument("prefill: variant requires mixing coefficients");
    }
}

}  // namespace detail

// Encode the prompt into the per-layer KV-cache according to the variant.
// Mixing arithmetic is k_c*(1-alpha) + k_b*alpha per layer, alpha broadcast
// over tokens, heads and feature dims.
template <typename S>
KVCache<S> prefill(const TunedModel<S>& m, std::span<const int> prompt) {
    if (prompt.empty()) throw std::invalid_argument("prefill: empty prompt");
    detail::check_roles(m);
    const Variant v = m.engine.variant;

    if (!variant_has_two_passes(v)) {
        const AdapterSet<S>* set = (v == Variant::no_mixing) ? &*m.bidir : &m.causal;
        auto res = model_forward(m.config, m.base, set, prompt, effective_second_mask(m.engine), nullptr,
                                 /*want_logits=*/false);
        return {std::move(res.k_new), std::move(res.v_new)};
    }

    const AdapterSet<S>* second = m.second_set();
    const MaskKind mask2 = effective_second_mask(m.engine);
    ForwardResult<S> pass_c, pass_b;
    if (m.engine.concurrent_prefill) {
        const bool gm = grad_enabled();
        std::thread worker([&, gm] {
            detail::grad_mode = gm;
            pass_c = model_forward(m.config, m.base, &m.causal, prompt, MaskKind::causal, nullptr, false);
        });
        pass_b = model_forward(m.config, m.base, second, prompt, mask2, nullptr, false);
        worker.join();
    } else {
        pass_c = model_forward(m.config, m.base, &m.causal, prompt, MaskKind::causal, nullptr, false);
        pass_b = model_forward(m.config, m.base, second, prompt, mask2, nullptr, false);
    }

    Tensor<S> alpha_k = mixing_alpha(m.mix->theta_k, m.mix->theta_init);
    Tensor<S> alpha_v = mixing_alpha(m.mix->theta_v, m.mix->theta_init);
    KVCache<S> cache;
    cache.keys.reserve(m.config.n_layers);
    cache.values.reserve(m.config.n_layers);
    for (int l = 0; l < m.config.n_layers; ++l) {
        cache.keys.push_back(mix(pass_c.k_new[l], pass_b.k_new[l], select_scalar(alpha_k, l)));
        cache.values.push_back(mix(pass_c.v_new[l], pass_b.v_new[l], select_scalar(alpha_v, l)));
    }
    return cache;
}

// One causal step over the cache with the causal adapter set; the token's
// unmixed keys/values are appended.
template <typename S>
Tensor<S> decode_step(const TunedModel<S>& m, int token, KVCache<S>& cache) {
    if (cache.empty()) throw std::invalid_argument("decode_step: empty cache");
    const std::array<int, 1> one{token};
    auto res = model_forward(m.config, m.base, &m.causal, one, MaskKind::causal, &cache, true);
    for (int l = 0; l < m.config.n_layers; ++l) cache.append(l, res.k_new[l], res.v_new[l]);
    return res.logits;
}

// Greedy generation per the two-phase scheme: prefill once, seed decoding with
// the separator token, stop at EOS or after max_new tokens. The returned ids
// include the seed and the terminal EOS when produced.
template <typename S>
std::vector<int> generate(const TunedModel<S>& m, std::span<const int> prompt, int max_new) {
    if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
    NoGradGuard ng;
    KVCache<S> cache = prefill(m, prompt);
    std::vector<int> answer{m.engine.sep_token};
    int current = m.engine.sep_token;
    for (int i = 0; i < max_new; ++i) {
        Tensor<S> logits = decode_step(m, current, cache);
        current = static_cast<int>(argmax_row(logits, 0));
        answer.push_back(current);
        if (current == m.engine.eos_token) break;
    }
    return answer;
}

struct TrainingTargets {
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
};

// Position i of the answer predicts answer[i+1]; the trailing EOS predicts
// nothing. The seed token is input only and is never itself a target.
inline TrainingTargets training_targets(std::span<const int> answer) {
    const std::size_t n = answer.size();
    TrainingTargets tt;
    tt.targets.assign(n, 0);
    tt.mask.assign(n, 0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        tt.targets[i] = answer[i + 1];
        tt.mask[i] = 1;
    }
    return tt;
}

template <typename S>
struct TrainingForward {
    Tensor<S> logits;  // [answer length, V]
    Tensor<S> loss;
    std::size_t n_scored = 0;
};

// Prefill on the prompt (variant semantics apply), then one causal pass over
// the whole answer against the cache; loss is the mean NLL of the answer
// tokens (EOS included, seed excluded).
template <typename S>
TrainingForward<S> forward_for_training(const TunedModel<S>& m, std::span<const int> prompt,
                                        std::span<const int> answer) {
    if (answer.size() < 2) throw std::invalid_argument("training: answer needs at least seed + EOS");
    if (answer.front() != m.engine.sep_token) {
        throw std::invalid_argument("training: answer must begin with the seed token");
    }
    if (answer.back() != m.engine.eos_token) {
        throw std::invalid_argument("training: answer must end with EOS");
    }
    KVCache<S> cache = prefill(m, prompt);
    auto res = model_forward(m.config, m.base, &m.causal, answer, MaskKind::causal, &cache, true);
    TrainingTargets tt = training_targets(answer);
    Tensor<S> loss = cross_entropy_masked(res.logits, tt.targets, tt.mask);
    return {std::move(res.logits), std::move(loss), answer.size() - 1};
}

}  // namespace bimix
