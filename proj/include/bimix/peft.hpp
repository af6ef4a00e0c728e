#pragma once

// Parameter-efficient adapter families: low-rank deltas (with an optional
// magnitude decomposition) and learned activation scalings. Every linear layer
// of self-attention and the MLP is a target; base weights stay frozen. A model
// can carry two independent sets, one per prompt-encoding role.

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "bimix/model.hpp"

namespace bimix {

enum class PeftKind { lora, dora, ia3 };
enum class AdapterRole { causal, bidirectional };

inline const char* to_string(PeftKind kind) {
    switch (kind) {
        case PeftKind::lora: return "lora";
        case PeftKind::dora: return "dora";
        case PeftKind::ia3: return "ia3";
    }
    return "?";
}

inline PeftKind peft_kind_from_string(const std::string& s) {
    if (s == "lora") return PeftKind::lora;
    if (s == "dora") return PeftKind::dora;
    if (s == "ia3") return PeftKind::ia3;
    throw std::invalid_argument("unknown peft kind '" + s + "'");
}

inline const char* to_string(AdapterRole role) {
    return role == AdapterRole::causal ? "causal" : "bidirectional";
}

struct PeftConfig {
    PeftKind kind = PeftKind::lora;
    int rank = 8;
    double lora_alpha = 1.0;
};

enum class LinearTarget { q = 0, k, v, o, up, down };
inline constexpr std::array<const char*, 6> kLinearTargetNames{"q", "k", "v", "o", "up", "down"};

inline std::pair<std::size_t, std::size_t> target_dims(const ModelConfig& cfg, LinearTarget t) {
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto dm = static_cast<std::size_t>(cfg.d_mlp);
    switch (t) {
        case LinearTarget::up: return {d, dm};
        case LinearTarget::down: return {dm, d};
        default: return {d, d};
    }
}

template <typename S>
struct LowRankAdapter {
    Tensor<S> a;          // [rank, d_in]
    Tensor<S> b;          // [d_out, rank]
    Tensor<S> magnitude;  // [d_out], dora only
};

template <typename S>
struct LayerAdapters {
    std::array<LowRankAdapter<S>, 6> linear;  // indexed by LinearTarget
    Tensor<S> ia3_k, ia3_v, ia3_ff;           // ia3 only
};

template <typename S>
struct AdapterSet {
    AdapterRole role = AdapterRole::causal;
    PeftConfig config;
    std::vector<LayerAdapters<S>> layers;

    template <typename F>
    void visit(F&& fn) {
        const std::string prefix = std::string("peft.") + to_string(role) + ".";
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string lp = prefix + std::to_string(l) + ".";
            if (config.kind == PeftKind::ia3) {
                fn(lp + "k.scale", layers[l].ia3_k);
                fn(lp + "v.scale", layers[l].ia3_v);
                fn(lp + "ff.scale", layers[l].ia3_ff);
            } else {
                for (std::size_t t = 0; t < 6; ++t) {
                    const std::string tp = lp + kLinearTargetNames[t] + ".";
                    fn(tp + "A", layers[l].linear[t].a);
                    fn(tp + "B", layers[l].linear[t].b);
                    if (config.kind == PeftKind::dora) fn(tp + "m", layers[l].linear[t].magnitude);
                }
            }
        }
    }
};

template <typename S>
const Tensor<S>& base_weight(const Weights<S>& base, int layer, LinearTarget t) {
    const LayerWeights<S>& lw = base.layers[layer];
    switch (t) {
        case LinearTarget::q: return lw.w_q;
        case LinearTarget::k: return lw.w_k;
        case LinearTarget::v: return lw.w_v;
        case LinearTarget::o: return lw.w_o;
        case LinearTarget::up: return lw.w_up;
        case LinearTarget::down: return lw.w_down;
    }
    throw std::logic_error("base_weight: bad target");
}

// No-op initialization: low-rank B starts at zero, magnitudes start at the
// base column norms, activation scalings start at one. The two roles draw from
// separate seed streams.
template <typename S>
AdapterSet<S> init_adapters(const ModelConfig& cfg, const PeftConfig& peft, AdapterRole role,
                            std::uint64_t seed, const Weights<S>& base) {
    cfg.validate();
    if (peft.kind != PeftKind::ia3) {
        if (peft.rank < 1) throw std::invalid_argument("peft: rank must be >= 1");
        for (std::size_t t = 0; t < 6; ++t) {
            auto [d_in, d_out] = target_dims(cfg, static_cast<LinearTarget>(t));
            if (static_cast<std::size_t>(peft.rank) > std::min(d_in, d_out)) {
                throw std::invalid_argument("peft: rank " + std::to_string(peft.rank) +
                                            " exceeds min(d_in,d_out) for target " + kLinearTargetNames[t]);
            }
        }
    }

    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(role == AdapterRole::causal ? 0xC0 : 0xB1)};
    std::mt19937 rng(seq);

    AdapterSet<S> set;
    set.role = role;
    set.config = peft;
    set.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& la = set.layers[l];
        if (peft.kind == PeftKind::ia3) {
            la.ia3_k = Tensor<S>::full({static_cast<std::size_t>(cfg.d_model)}, S(1), true);
            la.ia3_v = Tensor<S>::full({static_cast<std::size_t>(cfg.d_model)}, S(1), true);
            la.ia3_ff = Tensor<S>::full({static_cast<std::size_t>(cfg.d_mlp)}, S(1), true);
            continue;
        }
        for (std::size_t t = 0; t < 6; ++t) {
            auto [d_in, d_out] = target_dims(cfg, static_cast<LinearTarget>(t));
            auto& ad = la.linear[t];
            ad.a = Tensor<S>::zeros({static_cast<std::size_t>(peft.rank), d_in}, true);
            const S bound = S(1) / std::sqrt(static_cast<S>(d_in));
            fill_uniform(ad.a, rng, -bound, bound);
            ad.b = Tensor<S>::zeros({d_out, static_cast<std::size_t>(peft.rank)}, true);
            if (peft.kind == PeftKind::dora) {
                const Tensor<S>& w = base_weight(base, l, static_cast<LinearTarget>(t));
                NoGradGuard ng;
                Tensor<S> norms = column_l2norm(w);
                ad.magnitude = Tensor<S>::from_data({d_out}, norms.data(), true);
            }
        }
    }
    return set;
}

// x W plus the adapter delta for this layer/target. Activation-scaling
// adapters do not modify the projection itself; their vectors are applied by
// the block at the designated activations.
template <typename S>
Tensor<S> adapted_linear(const Tensor<S>& x, const Tensor<S>& w, const AdapterSet<S>* set, int layer,
                         LinearTarget target) {
    if (!set || set->config.kind == PeftKind::ia3) return matmul(x, w);
    const auto& ad = set->layers[layer].linear[static_cast<std::size_t>(target)];
    const S s = static_cast<S>(set->config.lora_alpha) / static_cast<S>(set->config.rank);
    if (set->config.kind == PeftKind::lora) {
        Tensor<S> delta = scale(matmul(matmul(x, transpose(ad.a)), transpose(ad.b)), s);
        return add(matmul(x, w), delta);
    }
    // dora: magnitude times the column-normalized adapted weight
    Tensor<S> delta_w = scale(transpose(matmul(ad.b, ad.a)), s);
    Tensor<S> wd = add(w, delta_w);
    Tensor<S> col_scale = div(ad.magnitude, column_l2norm(wd));
    return matmul(x, mul_row_vector(wd, col_scale));
}

// Closed-form trainable parameter counts.
inline long long adapter_set_param_count(const ModelConfig& cfg, const PeftConfig& peft) {
    long long per_layer = 0;
    if (peft.kind == PeftKind::ia3) {
        per_layer = 2LL * cfg.d_model + cfg.d_mlp;
    } else {
        for (std::size_t t = 0; t < 6; ++t) {
            auto [d_in, d_out] = target_dims(cfg, static_cast<LinearTarget>(t));
            per_layer += static_cast<long long>(peft.rank) * static_cast<long long>(d_in + d_out);
            if (peft.kind == PeftKind::dora) per_layer += static_cast<long long>(d_out);
        }
    }
    return per_layer * cfg.n_layers;
}

inline long long trainable_param_count(const ModelConfig& cfg, const PeftConfig& peft, int n_sets,
                                       bool include_theta) {
    cfg.validate();
    long long count = static_cast<long long>(n_sets) * adapter_set_param_count(cfg, peft);
    if (include_theta) count += 2LL * cfg.n_layers;
    return count;
}

}  // namespace bimix
