#pragma once

// Transformer forward passes. A block is pre-norm residual:
//   x + Attn(norm(x)), then + MLP(norm(.))
// and returns the keys/values of the new positions (post-adapter, pre-mixing)
// so callers can cache or blend them.

#include <type_traits>

#include "bimix/peft.hpp"

namespace bimix {

template <typename S>
struct BlockResult {
    Tensor<S> x;
    Tensor<S> k_new, v_new;
};

template <typename S>
BlockResult<S> block_forward(const ModelConfig& cfg, const LayerWeights<S>& w,
                             const AdapterSet<std::type_identity_t<S>>* adapters,
                             int layer, const Tensor<S>& x, const Tensor<S>& mask, const Tensor<S>* cache_k,
                             const Tensor<S>* cache_v) {
    const bool ia3 = adapters && adapters->config.kind == PeftKind::ia3;

    Tensor<S> xn = rms_norm(x, w.attn_gain);
    Tensor<S> q = adapted_linear(xn, w.w_q, adapters, layer, LinearTarget::q);
    Tensor<S> k_new = adapted_linear(xn, w.w_k, adapters, layer, LinearTarget::k);
    Tensor<S> v_new = adapted_linear(xn, w.w_v, adapters, layer, LinearTarget::v);
    if (ia3) {
        k_new = mul_row_vector(k_new, adapters->layers[layer].ia3_k);
        v_new = mul_row_vector(v_new, adapters->layers[layer].ia3_v);
    }

    Tensor<S> k_all = cache_k ? concat_rows(*cache_k, k_new) : k_new;
    Tensor<S> v_all = cache_v ? concat_rows(*cache_v, v_new) : v_new;
    Tensor<S> attn = attention(q, k_all, v_all, cfg.n_heads, mask);
    Tensor<S> h = add(x, adapted_linear(attn, w.w_o, adapters, layer, LinearTarget::o));

    Tensor<S> hn = rms_norm(h, w.mlp_gain);
    Tensor<S> up = gelu(adapted_linear(hn, w.w_up, adapters, layer, LinearTarget::up));
    if (ia3) up = mul_row_vector(up, adapters->layers[layer].ia3_ff);
    Tensor<S> out = add(h, adapted_linear(up, w.w_down, adapters, layer, LinearTarget::down));

    return {std::move(out), std::move(k_new), std::move(v_new)};
}

template <typename S>
struct ForwardResult {
    Tensor<S> logits;                 // [t, V]; undefined when logits were not requested
    std::vector<Tensor<S>> k_new, v_new;  // per layer, the new positions only
};

// Embeddings + positions -> blocks -> final norm -> vocabulary projection.
// Positions are absolute: new tokens start at the cache length.
template <typename S>
ForwardResult<S> model_forward(const ModelConfig& cfg, const Weights<S>& w,
                               const AdapterSet<std::type_identity_t<S>>* adapters, std::span<const int> tokens,
                               MaskKind mask_kind, const KVCache<std::type_identity_t<S>>* cache,
                               bool want_logits = true) {
    const std::size_t t = tokens.size();
    if (t == 0) throw std::invalid_argument("model_forward: empty token sequence");
    const std::size_t t_cache = cache ? cache->tokens() : 0;
    if (t + t_cache > static_cast<std::size_t>(cfg.max_seq_len)) {
        throw std::length_error("model_forward: sequence of " + std::to_string(t + t_cache) +
                                " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    if (cache && !cache->empty() && cache->layer_count() != static_cast<std::size_t>(cfg.n_layers)) {
        throw std::invalid_argument("model_forward: cache has " + std::to_string(cache->layer_count()) +
                                    " layers, model has " + std::to_string(cfg.n_layers));
    }
    if (adapters && adapters->layers.size() != static_cast<std::size_t>(cfg.n_layers)) {
        throw std::invalid_argument("model_forward: adapter set layer count mismatch");
    }

    Tensor<S> x = add(embedding(w.tok_emb, tokens), slice_rows(w.pos_emb, t_cache, t));
    Tensor<S> mask = build_mask<S>(mask_kind, t, t_cache + t);

    ForwardResult<S> result;
    result.k_new.reserve(cfg.n_layers);
    result.v_new.reserve(cfg.n_layers);
    const bool use_cache = cache && !cache->empty();
    for (int l = 0; l < cfg.n_layers; ++l) {
        BlockResult<S> blk =
            block_forward(cfg, w.layers[l], adapters, l, x, mask, use_cache ? &cache->keys[l] : nullptr,
                          use_cache ? &cache->values[l] : nullptr);
        x = std::move(blk.x);
        result.k_new.push_back(std::move(blk.k_new));
        result.v_new.push_back(std::move(blk.v_new));
    }
    if (want_logits) {
        result.logits = matmul(rms_norm(x, w.final_gain), w.w_vocab);
    }
    return result;
}

}  // namespace bimix
