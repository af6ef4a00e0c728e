#pragma once

// Decoder-only transformer definition: configuration, frozen base weights,
// attention masks, the KV-cache, and per-head scaled dot-product attention.
// Blocks use pre-norm residuals with RMS normalization, a GELU MLP, learned
// absolute position embeddings, and no biases.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bimix/ops.hpp"
#include "bimix/tensor.hpp"

namespace bimix {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 128;
    int d_mlp = 512;
    int vocab_size = 512;
    int max_seq_len = 256;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_mlp < 1 || vocab_size < 1 || max_seq_len < 1) {
            throw std::invalid_argument("model config: all dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        }
    }
};

enum class MaskKind { causal, bidirectional, anticausal };

inline const char* to_string(MaskKind kind) {
    switch (kind) {
        case MaskKind::causal: return "causal";
        case MaskKind::bidirectional: return "bidirectional";
        case MaskKind::anticausal: return "anticausal";
    }
    return "?";
}

inline MaskKind mask_kind_from_string(const std::string& s) {
    if (s == "causal") return MaskKind::causal;
    if (s == "bidirectional") return MaskKind::bidirectional;
    if (s == "anticausal") return MaskKind::anticausal;
    throw std::invalid_argument("unknown attention mask kind '" + s + "'");
}

// Mask for n_query queries occupying the trailing positions of an n_ctx-token
// context. Causal opens j <= i, anti-causal opens j >= i (diagonal open, so no
// row is ever fully masked), bidirectional opens everything.
template <typename S>
Tensor<S> build_mask(MaskKind kind, std::size_t n_query, std::size_t n_ctx) {
    if (n_ctx < n_query) {
        throw std::invalid_argument("build_mask: n_ctx " + std::to_string(n_ctx) + " < n_query " +
                                    std::to_string(n_query));
    }
    const std::size_t offset = n_ctx - n_query;
    const S neg = mask_sentinel<S>();
    std::vector<S> m(n_query * n_ctx, S(0));
    if (kind != MaskKind::bidirectional) {
        for (std::size_t i = 0; i < n_query; ++i) {
            const std::size_t pos = i + offset;
            for (std::size_t j = 0; j < n_ctx; ++j) {
                const bool open = kind == MaskKind::causal ? j <= pos : j >= pos;
                if (!open) m[i * n_ctx + j] = neg;
            }
        }
    }
    return Tensor<S>::from_data({n_query, n_ctx}, std::move(m));
}

template <typename S>
struct LayerWeights {
    Tensor<S> attn_gain, w_q, w_k, w_v, w_o;
    Tensor<S> mlp_gain, w_up, w_down;
};

template <typename S>
struct Weights {
    Tensor<S> tok_emb;     // [V, d_model]
    Tensor<S> pos_emb;     // [max_seq_len, d_model]
    Tensor<S> final_gain;  // [d_model]
    Tensor<S> w_vocab;     // [d_model, V]
    std::vector<LayerWeights<S>> layers;

    static Weights random_init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        std::mt19937 rng(static_cast<std::uint32_t>(seed));
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto dm = static_cast<std::size_t>(cfg.d_mlp);
        const auto v = static_cast<std::size_t>(cfg.vocab_size);

        auto matrix = [&](std::size_t rows, std::size_t cols) {
            Tensor<S> t = Tensor<S>::zeros({rows, cols});
            fill_normal(t, rng, S(0), S(1) / std::sqrt(static_cast<S>(rows)));
            return t;
        };

        Weights w;
        w.tok_emb = Tensor<S>::zeros({v, d});
        fill_normal(w.tok_emb, rng, S(0), S(1));
        w.pos_emb = Tensor<S>::zeros({static_cast<std::size_t>(cfg.max_seq_len), d});
        fill_normal(w.pos_emb, rng, S(0), S(1));
        w.final_gain = Tensor<S>::full({d}, S(1));
        w.w_vocab = matrix(d, v);
        for (int l = 0; l < cfg.n_layers; ++l) {
            LayerWeights<S> lw;
            lw.attn_gain = Tensor<S>::full({d}, S(1));
            lw.w_q = matrix(d, d);
            lw.w_k = matrix(d, d);
            lw.w_v = matrix(d, d);
            lw.w_o = matrix(d, d);
            lw.mlp_gain = Tensor<S>::full({d}, S(1));
            lw.w_up = matrix(d, dm);
            lw.w_down = matrix(dm, d);
            w.layers.push_back(std::move(lw));
        }
        return w;
    }

    template <typename F>
    void visit(F&& fn) {
        fn(std::string("model.tok_emb"), tok_emb);
        fn(std::string("model.pos_emb"), pos_emb);
        fn(std::string("model.final_gain"), final_gain);
        fn(std::string("model.w_vocab"), w_vocab);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "model." + std::to_string(l) + ".";
            fn(p + "attn_gain", layers[l].attn_gain);
            fn(p + "w_q", layers[l].w_q);
            fn(p + "w_k", layers[l].w_k);
            fn(p + "w_v", layers[l].w_v);
            fn(p + "w_o", layers[l].w_o);
            fn(p + "mlp_gain", layers[l].mlp_gain);
            fn(p + "w_up", layers[l].w_up);
            fn(p + "w_down", layers[l].w_down);
        }
    }
};

// Per-layer keys and values, each [t, n_heads*head_dim]. Appending new rows is
// the only mutation; during training the tensors keep their tape history so
// gradients flow back through cached features.
template <typename S>
struct KVCache {
    std::vector<Tensor<S>> keys, values;

    bool empty() const { return keys.empty(); }

    std::size_t tokens() const { return keys.empty() ? 0 : keys[0].dim(0); }

    std::size_t layer_count() const { return keys.size(); }

    void append(std::size_t layer, const Tensor<S>& k_new, const Tensor<S>& v_new) {
        keys[layer] = concat_rows(keys[layer], k_new);
        values[layer] = concat_rows(values[layer], v_new);
    }
};

// Per-head softmax(Q K^T / sqrt(d_k) + M) V over flat [t, H*d_k] features.
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int n_heads,
                    const Tensor<S>& mask) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw std::invalid_argument("attention: Q/K/V must be rank-2 [tokens, heads*head_dim]");
    }
    if (k.shape() != v.shape() || q.dim(1) != k.dim(1)) {
        throw std::invalid_argument("attention: feature shapes disagree, Q " + shape_str(q.shape()) + " K " +
                                    shape_str(k.shape()) + " V " + shape_str(v.shape()));
    }
    const std::size_t d = q.dim(1);
    if (d % static_cast<std::size_t>(n_heads) != 0) {
        throw std::invalid_argument("attention: feature dim not divisible by head count");
    }
    const std::size_t dk = d / static_cast<std::size_t>(n_heads);
    const S inv_sqrt_dk = S(1) / std::sqrt(static_cast<S>(dk));

    std::vector<Tensor<S>> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        Tensor<S> qh = slice_cols(q, h * dk, dk);
        Tensor<S> kh = slice_cols(k, h * dk, dk);
        Tensor<S> vh = slice_cols(v, h * dk, dk);
        Tensor<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
        Tensor<S> probs = masked_softmax(scores, mask);
        heads.push_back(matmul(probs, vh));
    }
    return concat_cols(heads);
}

}  // namespace bimix
