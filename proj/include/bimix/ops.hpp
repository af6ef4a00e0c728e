#pragma once

// Differentiable tensor operations. Only the broadcast patterns this library
// actually uses are supported (scalar-tensor, per-row vector); everything else
// is a shape error. Backward closures accumulate into parent grads and never
// touch parents that do not require grad.

#include <cmath>
#include <numbers>
#include <span>

#include "bimix/tensor.hpp"

namespace bimix {

// Additive -inf stand-in for attention masks. Small enough to underflow the
// softmax exponent, large enough to never be produced by real scores.
template <typename S>
constexpr S mask_sentinel() {
    if constexpr (std::is_same_v<S, float>) {
        return -1e9f;
    } else {
        return -1e18;
    }
}

namespace detail {

template <typename S>
Tensor<S> make_op(Shape shape, std::vector<S> data, std::vector<Tensor<S>> parents,
                  std::function<void(Node<S>&)> backward) {
    auto node = std::make_shared<Node<S>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->seq = detail::node_seq.fetch_add(1, std::memory_order_relaxed);
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
    }
    if (needs_grad) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return Tensor<S>::wrap(std::move(node));
}

template <typename S>
void accumulate(Node<S>& parent, std::size_t idx, S value) {
    parent.ensure_grad();
    parent.grad[idx] += value;
}

inline void check_rank2(const Shape& s, const char* op) {
    if (s.size() != 2) throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " + shape_str(s));
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& o) {
        for (int side = 0; side < 2; ++side) {
            Node<S>& p = *o.parents[side];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
        }
    });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& o) {
        Node<S>& pa = *o.parents[0];
        Node<S>& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.data[i];
        }
    });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("div: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& o) {
        Node<S>& pa = *o.parents[0];
        Node<S>& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] / pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                pb.grad[i] -= o.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
            }
        }
    });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [c](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * c;
    });
}

namespace detail {

// C[m,n] += A[m,k] * B[k,n]; ikj order keeps the B walk contiguous.
template <typename S>
void matmul_accumulate(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for if (m * n * k > 16384) schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        S* crow = c + i * n;
        const S* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is [n,k].
template <typename S>
void matmul_nt_accumulate(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for if (m * n * k > 16384) schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const S* brow = b + j * k;
            S acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k,n] += A^T * G where A is [m,k], G is [m,n].
template <typename S>
void matmul_tn_accumulate(const S* a, const S* g, S* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for if (m * n * k > 16384) schedule(static)
    for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(k); ++p) {
        S* crow = c + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const S av = a[i * k + p];
            const S* grow = g + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

}  // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_rank2(a.shape(), "matmul");
    detail::check_rank2(b.shape(), "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(m * n, S(0));
    detail::matmul_accumulate(a.data().data(), b.data().data(), out.data(), m, k, n);
    return detail::make_op<S>({m, n}, std::move(out), {a, b}, [m, k, n](Node<S>& o) {
        Node<S>& pa = *o.parents[0];
        Node<S>& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();  // dA = dC * B^T
            detail::matmul_nt_accumulate(o.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();  // dB = A^T * dC
            detail::matmul_tn_accumulate(pa.data.data(), o.grad.data(), pb.grad.data(), m, k, n);
        }
    });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
    detail::check_rank2(a.shape(), "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<S> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return detail::make_op<S>({n, m}, std::move(out), {a}, [m, n](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += o.grad[j * m + i];
    });
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t start, std::size_t len) {
    detail::check_rank2(x.shape(), "slice_cols");
    const std::size_t t = x.dim(0), d = x.dim(1);
    if (start + len > d) throw std::invalid_argument("slice_cols: range out of bounds");
    std::vector<S> out(t * len);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < len; ++j) out[i * len + j] = x.data()[i * d + start + j];
    return detail::make_op<S>({t, len}, std::move(out), {x}, [start, len, d, t](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < len; ++j) p.grad[i * d + start + j] += o.grad[i * len + j];
    });
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t t = parts[0].dim(0);
    std::size_t d = 0;
    for (const auto& p : parts) {
        detail::check_rank2(p.shape(), "concat_cols");
        if (p.dim(0) != t) throw std::invalid_argument("concat_cols: row count mismatch");
        d += p.dim(1);
    }
    std::vector<S> out(t * d);
    std::size_t off = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        widths.push_back(w);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * d + off + j] = p.data()[i * w + j];
        off += w;
    }
    return detail::make_op<S>({t, d}, std::move(out), parts, [widths, t, d](Node<S>& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            Node<S>& p = *o.parents[k];
            const std::size_t w = widths[k];
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < w; ++j) p.grad[i * w + j] += o.grad[i * d + off + j];
            }
            off += w;
        }
    });
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, std::size_t start, std::size_t len) {
    detail::check_rank2(x.shape(), "slice_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (start + len > n) throw std::invalid_argument("slice_rows: range out of bounds");
    std::vector<S> out(x.data().begin() + start * d, x.data().begin() + (start + len) * d);
    return detail::make_op<S>({len, d}, std::move(out), {x}, [start, len, d](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < len * d; ++i) p.grad[start * d + i] += o.grad[i];
    });
}

template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_rank2(a.shape(), "concat_rows");
    detail::check_rank2(b.shape(), "concat_rows");
    if (a.dim(1) != b.dim(1)) {
        throw std::invalid_argument("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const std::size_t ta = a.dim(0), tb = b.dim(0), d = a.dim(1);
    std::vector<S> out;
    out.reserve((ta + tb) * d);
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    return detail::make_op<S>({ta + tb, d}, std::move(out), {a, b}, [ta, tb, d](Node<S>& o) {
        Node<S>& pa = *o.parents[0];
        Node<S>& pb = *o.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < ta * d; ++i) pa.grad[i] += o.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < tb * d; ++i) pb.grad[i] += o.grad[ta * d + i];
        }
    });
}

template <typename S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const int> ids) {
    detail::check_rank2(table.shape(), "embedding");
    const std::size_t v = table.dim(0), d = table.dim(1);
    std::vector<S> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw std::invalid_argument("embedding: token id " + std::to_string(id) + " out of range [0," +
                                        std::to_string(v) + ")");
        }
        std::copy_n(table.data().begin() + id * d, d, out.begin() + i * d);
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return detail::make_op<S>({ids.size(), d}, std::move(out), {table}, [saved, d](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            const std::size_t row = static_cast<std::size_t>(saved[i]) * d;
            for (std::size_t j = 0; j < d; ++j) p.grad[row + j] += o.grad[i * d + j];
        }
    });
}

// softmax(scores + mask) per row, stabilized by max subtraction over the open
// entries; masked entries come out exactly zero. The mask is data, not a
// differentiable input: entries are 0 (open) or the negative sentinel.
template <typename S>
Tensor<S> masked_softmax(const Tensor<S>& scores, const Tensor<S>& mask) {
    detail::check_rank2(scores.shape(), "masked_softmax");
    if (scores.shape() != mask.shape()) {
        throw std::invalid_argument("masked_softmax: scores " + shape_str(scores.shape()) + " vs mask " +
                                    shape_str(mask.shape()));
    }
    const std::size_t rows = scores.dim(0), cols = scores.dim(1);
    std::vector<S> out(rows * cols, S(0));
    for (std::size_t i = 0; i < rows; ++i) {
        const S* srow = scores.data().data() + i * cols;
        const S* mrow = mask.data().data() + i * cols;
        S maxv = -std::numeric_limits<S>::infinity();
        bool any_open = false;
        for (std::size_t j = 0; j < cols; ++j) {
            if (mrow[j] < S(0)) continue;
            any_open = true;
            maxv = std::max(maxv, srow[j]);
        }
        if (!any_open) {
            throw std::runtime_error("masked_softmax: fully masked row " + std::to_string(i));
        }
        S denom = 0;
        S* orow = out.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) {
            if (mrow[j] < S(0)) continue;
            orow[j] = std::exp(srow[j] - maxv);
            denom += orow[j];
        }
        for (std::size_t j = 0; j < cols; ++j) orow[j] /= denom;
        for (std::size_t j = 0; j < cols; ++j) {
            if (mrow[j] < S(0)) orow[j] = S(0);
        }
    }
    std::vector<S> saved = out;
    return detail::make_op<S>(scores.shape(), std::move(out), {scores, mask},
                              [saved, rows, cols](Node<S>& o) {
                                  Node<S>& p = *o.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (std::size_t i = 0; i < rows; ++i) {
                                      const S* prow = saved.data() + i * cols;
                                      const S* grow = o.grad.data() + i * cols;
                                      S dot = 0;
                                      for (std::size_t j = 0; j < cols; ++j) dot += grow[j] * prow[j];
                                      S* out_grad = p.grad.data() + i * cols;
                                      for (std::size_t j = 0; j < cols; ++j) {
                                          out_grad[j] += prow[j] * (grow[j] - dot);
                                      }
                                  }
                              });
}

template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gain, S eps = S(1e-6)) {
    detail::check_rank2(x.shape(), "rms_norm");
    const std::size_t t = x.dim(0), d = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != d) {
        throw std::invalid_argument("rms_norm: gain " + shape_str(gain.shape()) + " vs features " +
                                    std::to_string(d));
    }
    std::vector<S> out(t * d);
    std::vector<S> inv_rms(t);
    for (std::size_t i = 0; i < t; ++i) {
        const S* row = x.data().data() + i * d;
        S ms = 0;
        for (std::size_t j = 0; j < d; ++j) ms += row[j] * row[j];
        ms = ms / static_cast<S>(d) + eps;
        const S inv = S(1) / std::sqrt(ms);
        inv_rms[i] = inv;
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = row[j] * gain.data()[j] * inv;
    }
    return detail::make_op<S>(x.shape(), std::move(out), {x, gain}, [inv_rms, t, d](Node<S>& o) {
        Node<S>& px = *o.parents[0];
        Node<S>& pg = *o.parents[1];
        for (std::size_t i = 0; i < t; ++i) {
            const S* xrow = px.data.data() + i * d;
            const S* grow = o.grad.data() + i * d;
            const S inv = inv_rms[i];
            if (px.requires_grad) {
                px.ensure_grad();
                S dot = 0;  // sum_k g_k * gain_k * x_k
                for (std::size_t j = 0; j < d; ++j) dot += grow[j] * pg.data[j] * xrow[j];
                const S coef = dot * inv * inv * inv / static_cast<S>(d);
                S* xg = px.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) {
                    xg[j] += grow[j] * pg.data[j] * inv - xrow[j] * coef;
                }
            }
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (std::size_t j = 0; j < d; ++j) pg.grad[j] += grow[j] * xrow[j] * inv;
            }
        }
    });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    std::vector<S> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const S v = x.data()[i];
        out[i] = S(0.5) * v * (S(1) + std::erf(v * std::numbers::sqrt2_v<S> / S(2)));
    }
    return detail::make_op<S>(x.shape(), std::move(out), {x}, [](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        constexpr S inv_sqrt_2pi = S(0.3989422804014326779);
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const S v = p.data[i];
            const S cdf = S(0.5) * (S(1) + std::erf(v * std::numbers::sqrt2_v<S> / S(2)));
            const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
            p.grad[i] += o.grad[i] * (cdf + v * pdf);
        }
    });
}

// Mean negative log-likelihood over unmasked positions (mask entry nonzero =
// scored). Masked rows carry no loss and receive no gradient.
template <typename S>
Tensor<S> cross_entropy_masked(const Tensor<S>& logits, std::span<const int> targets,
                               std::span<const std::uint8_t> loss_mask) {
    detail::check_rank2(logits.shape(), "cross_entropy_masked");
    const std::size_t t = logits.dim(0), v = logits.dim(1);
    if (targets.size() != t || loss_mask.size() != t) {
        throw std::invalid_argument("cross_entropy_masked: expected " + std::to_string(t) +
                                    " targets and mask entries");
    }
    std::size_t n_scored = 0;
    S total = 0;
    for (std::size_t i = 0; i < t; ++i) {
        if (!loss_mask[i]) continue;
        const int tgt = targets[i];
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) {
            throw std::invalid_argument("cross_entropy_masked: target " + std::to_string(tgt) +
                                        " out of range [0," + std::to_string(v) + ")");
        }
        const S* row = logits.data().data() + i * v;
        S maxv = row[0];
        for (std::size_t j = 1; j < v; ++j) maxv = std::max(maxv, row[j]);
        S sum = 0;
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - maxv);
        total += maxv + std::log(sum) - row[tgt];
        ++n_scored;
    }
    if (n_scored == 0) throw std::runtime_error("cross_entropy_masked: every position is masked");
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(loss_mask.begin(), loss_mask.end());
    const S loss = total / static_cast<S>(n_scored);
    return detail::make_op<S>({1}, {loss}, {logits}, [tg, mk, t, v, n_scored](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const S g = o.grad[0] / static_cast<S>(n_scored);
        for (std::size_t i = 0; i < t; ++i) {
            if (!mk[i]) continue;
            const S* row = p.data.data() + i * v;
            S* grow = p.grad.data() + i * v;
            S maxv = row[0];
            for (std::size_t j = 1; j < v; ++j) maxv = std::max(maxv, row[j]);
            S sum = 0;
            for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - maxv);
            for (std::size_t j = 0; j < v; ++j) {
                const S softmax_j = std::exp(row[j] - maxv) / sum;
                grow[j] += g * (softmax_j - (static_cast<std::size_t>(tg[i]) == j ? S(1) : S(0)));
            }
        }
    });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    S total = 0;
    for (S v : x.data()) total += v;
    return detail::make_op<S>({1}, {total}, {x}, [](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += o.grad[0];
    });
}

// x[t,d] * v[d], v broadcast over rows.
template <typename S>
Tensor<S> mul_row_vector(const Tensor<S>& x, const Tensor<S>& v) {
    detail::check_rank2(x.shape(), "mul_row_vector");
    const std::size_t t = x.dim(0), d = x.dim(1);
    if (v.rank() != 1 || v.dim(0) != d) {
        throw std::invalid_argument("mul_row_vector: vector " + shape_str(v.shape()) + " vs features " +
                                    std::to_string(d));
    }
    std::vector<S> out(t * d);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.data()[i * d + j] * v.data()[j];
    return detail::make_op<S>(x.shape(), std::move(out), {x, v}, [t, d](Node<S>& o) {
        Node<S>& px = *o.parents[0];
        Node<S>& pv = *o.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < d; ++j) px.grad[i * d + j] += o.grad[i * d + j] * pv.data[j];
        }
        if (pv.requires_grad) {
            pv.ensure_grad();
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < d; ++j) pv.grad[j] += o.grad[i * d + j] * px.data[i * d + j];
        }
    });
}

// Euclidean norm of each column of W[m,n] -> [n].
template <typename S>
Tensor<S> column_l2norm(const Tensor<S>& w) {
    detail::check_rank2(w.shape(), "column_l2norm");
    const std::size_t m = w.dim(0), n = w.dim(1);
    std::vector<S> out(n, S(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += w.data()[i * n + j] * w.data()[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out[j] = std::sqrt(out[j]);
    std::vector<S> saved = out;
    return detail::make_op<S>({n}, std::move(out), {w}, [saved, m, n](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (saved[j] > S(0)) p.grad[i * n + j] += o.grad[j] * p.data[i * n + j] / saved[j];
            }
        }
    });
}

// a*(1-s) + b*s with s a 1-element tensor; the convex blend of Eq.-style
// feature mixing. ds accumulates sum(g * (b - a)).
template <typename S>
Tensor<S> mix(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& s) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mix: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    if (s.numel() != 1) throw std::invalid_argument("mix: coefficient must be a scalar tensor");
    const S alpha = s.data()[0];
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * (S(1) - alpha) + b.data()[i] * alpha;
    }
    return detail::make_op<S>(a.shape(), std::move(out), {a, b, s}, [alpha](Node<S>& o) {
        Node<S>& pa = *o.parents[0];
        Node<S>& pb = *o.parents[1];
        Node<S>& ps = *o.parents[2];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * (S(1) - alpha);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * alpha;
        }
        if (ps.requires_grad) {
            ps.ensure_grad();
            S acc = 0;
            for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * (pb.data[i] - pa.data[i]);
            ps.grad[0] += acc;
        }
    });
}

template <typename S>
Tensor<S> select_scalar(const Tensor<S>& v, std::size_t index) {
    if (index >= v.numel()) throw std::invalid_argument("select_scalar: index out of range");
    return detail::make_op<S>({1}, {v.data()[index]}, {v}, [index](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        p.grad[index] += o.grad[0];
    });
}

// alpha_i = |theta_i| / (c + |theta_i|); subgradient at theta = 0 is 0.
template <typename S>
Tensor<S> mix_ratio(const Tensor<S>& theta, S c) {
    if (c <= S(0)) throw std::invalid_argument("mix_ratio: theta_init must be positive");
    std::vector<S> out(theta.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const S a = std::abs(theta.data()[i]);
        out[i] = a / (c + a);
    }
    return detail::make_op<S>(theta.shape(), std::move(out), {theta}, [c](Node<S>& o) {
        Node<S>& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const S th = p.data[i];
            const S sn = th > S(0) ? S(1) : (th < S(0) ? S(-1) : S(0));
            const S denom = c + std::abs(th);
            p.grad[i] += o.grad[i] * sn * c / (denom * denom);
        }
    });
}

template <typename S>
std::size_t argmax_row(const Tensor<S>& x, std::size_t row) {
    detail::check_rank2(x.shape(), "argmax_row");
    const std::size_t cols = x.dim(1);
    const S* r = x.data().data() + row * cols;
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j) {
        if (r[j] > r[best]) best = j;
    }
    return best;
}

}  // namespace bimix
