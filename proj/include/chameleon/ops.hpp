#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "chameleon/tensor.hpp"

// Tape-recorded tensor operations. Row-wise ops treat every dimension but the
// last as rows; matmul-style ops require rank-2 operands.
namespace chameleon::ops {

inline constexpr Real kLayerNormEps = 1e-5;
inline constexpr Real kMaskedLogit = -1e9;

namespace kernel {

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
    for (std::size_t i = 0; i < m; ++i) {
        Real* crow = c + i * n;
        const Real* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == 0.0) continue;
            const Real* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x n] += a[k x m]^T * b[k x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const Real* arow = a + p * m;
        const Real* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const Real av = arow[i];
            if (av == 0.0) continue;
            Real* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline std::vector<Real> transpose(std::size_t rows, std::size_t cols, const Real* a) {
    std::vector<Real> t(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
    return t;
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
    const std::vector<Real> bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, bt.data(), c);
}

}  // namespace kernel

inline void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor out({m, n});
    kernel::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data().data());
    if (detail::needs_record({&a, &b})) {
        auto ai = a.impl(), bi = b.impl();
        detail::record(out, {&a, &b}, [ai, bi, m, k, n](std::span<const Real> g) {
            if (ai->requires_grad) kernel::gemm_nt(m, n, k, g.data(), bi->data.data(), detail::grad_buffer(*ai).data());
            if (bi->requires_grad) kernel::gemm_tn(k, m, n, ai->data.data(), g.data(), detail::grad_buffer(*bi).data());
        });
    }
    return out;
}

// a[m x k] * b[n x k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_nt: inner dims differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    Tensor out({m, n});
    kernel::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data().data());
    if (detail::needs_record({&a, &b})) {
        auto ai = a.impl(), bi = b.impl();
        detail::record(out, {&a, &b}, [ai, bi, m, k, n](std::span<const Real> g) {
            if (ai->requires_grad) kernel::gemm_nn(m, n, k, g.data(), bi->data.data(), detail::grad_buffer(*ai).data());
            if (bi->requires_grad) kernel::gemm_tn(n, m, k, g.data(), ai->data.data(), detail::grad_buffer(*bi).data());
        });
    }
    return out;
}

// x[..., in] * w[in x out] (+ bias[out]); leading dims of x are preserved.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
    require_rank2(w, "linear weight");
    const std::size_t in = w.dim(0), outd = w.dim(1), rows = x.rows();
    if (x.cols() != in) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    }
    if (bias && (bias->numel() != outd)) {
        throw DimensionError("linear: bias " + shape_str(bias->shape()) + " vs weight " + shape_str(w.shape()));
    }
    Shape out_shape = x.shape();
    out_shape.back() = outd;
    Tensor out(out_shape);
    Real* o = out.data().data();
    if (bias) {
        const Real* bp = bias->data().data();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < outd; ++j) o[i * outd + j] = bp[j];
    }
    kernel::gemm_nn(rows, in, outd, x.data().data(), w.data().data(), o);
    const bool bias_grad = bias && bias->requires_grad();
    if (detail::grad_mode() && (x.requires_grad() || w.requires_grad() || bias_grad)) {
        auto xi = x.impl(), wi = w.impl();
        auto bi = bias ? bias->impl() : nullptr;
        const Tensor& b_ref = bias ? *bias : w;
        detail::record(out, {&x, &w, &b_ref}, [xi, wi, bi, rows, in, outd](std::span<const Real> g) {
            if (xi->requires_grad) kernel::gemm_nt(rows, outd, in, g.data(), wi->data.data(), detail::grad_buffer(*xi).data());
            if (wi->requires_grad) kernel::gemm_tn(in, rows, outd, xi->data.data(), g.data(), detail::grad_buffer(*wi).data());
            if (bi && bi->requires_grad) {
                auto& bg = detail::grad_buffer(*bi);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < outd; ++j) bg[j] += g[i * outd + j];
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    auto o = out.data();
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[i];
    if (detail::needs_record({&a, &b})) {
        auto ai = a.impl(), bi = b.impl();
        detail::record(out, {&a, &b}, [ai, bi](std::span<const Real> g) {
            detail::accumulate_grad(*ai, g);
            detail::accumulate_grad(*bi, g);
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    auto o = out.data();
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * bd[i];
    if (detail::needs_record({&a, &b})) {
        auto ai = a.impl(), bi = b.impl();
        detail::record(out, {&a, &b}, [ai, bi](std::span<const Real> g) {
            if (ai->requires_grad) {
                auto& ga = detail::grad_buffer(*ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_buffer(*bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, Real s) {
    Tensor out(a.shape());
    auto o = out.data();
    auto ad = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * s;
    if (detail::needs_record({&a})) {
        auto ai = a.impl();
        detail::record(out, {&a}, [ai, s](std::span<const Real> g) {
            auto& ga = detail::grad_buffer(*ai);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    Real total = 0.0;
    for (Real v : a.data()) total += v;
    Tensor out = Tensor::scalar(total);
    if (detail::needs_record({&a})) {
        auto ai = a.impl();
        detail::record(out, {&a}, [ai](std::span<const Real> g) {
            auto& ga = detail::grad_buffer(*ai);
            for (Real& v : ga) v += g[0];
        });
    }
    return out;
}

// Column-wise mean over rows: [n x d] -> [d].
inline Tensor mean_rows(const Tensor& a) {
    const std::size_t n = a.rows(), d = a.cols();
    Tensor out({d});
    auto o = out.data();
    auto ad = a.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) o[j] += ad[i * d + j];
    for (Real& v : o) v /= static_cast<Real>(n);
    if (detail::needs_record({&a})) {
        auto ai = a.impl();
        detail::record(out, {&a}, [ai, n, d](std::span<const Real> g) {
            auto& ga = detail::grad_buffer(*ai);
            const Real inv = 1.0 / static_cast<Real>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += g[j] * inv;
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    auto o = out.data();
    auto ad = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] > 0.0 ? ad[i] : 0.0;
    if (detail::needs_record({&a})) {
        auto ai = a.impl();
        detail::record(out, {&a}, [ai](std::span<const Real> g) {
            auto& ga = detail::grad_buffer(*ai);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (ai->data[i] > 0.0) ga[i] += g[i];
        });
    }
    return out;
}

// Tanh approximation used by GPT-2.
inline Tensor gelu(const Tensor& a) {
    constexpr Real c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr Real k = 0.044715;
    Tensor out(a.shape());
    auto o = out.data();
    auto ad = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const Real x = ad[i];
        o[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
    }
    if (detail::needs_record({&a})) {
        auto ai = a.impl();
        detail::record(out, {&a}, [ai](std::span<const Real> g) {
            auto& ga = detail::grad_buffer(*ai);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const Real x = ai->data[i];
                const Real u = c * (x + k * x * x * x);
                const Real th = std::tanh(u);
                const Real du = c * (1.0 + 3.0 * k * x * x);
                ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
            }
        });
    }
    return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = kLayerNormEps) {
    const std::size_t n = x.rows(), d = x.cols();
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layer_norm: params " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
    }
    Tensor out(x.shape());
    std::vector<Real> xhat(n * d), inv_std(n);
    auto xd = x.data();
    auto o = out.data();
    auto gd = gain.data(), bd = bias.data();
    for (std::size_t i = 0; i < n; ++i) {
        const Real* row = xd.data() + i * d;
        Real mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<Real>(d);
        Real var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<Real>(d);
        const Real is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const Real h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            o[i * d + j] = h * gd[j] + bd[j];
        }
    }
    if (detail::needs_record({&x, &gain, &bias})) {
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl();
        detail::record(out, {&x, &gain, &bias},
                       [xi, gi, bi, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const Real> g) {
                           if (gi->requires_grad || bi->requires_grad) {
                               for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < d; ++j) {
                                       if (gi->requires_grad) detail::grad_buffer(*gi)[j] += g[i * d + j] * xhat[i * d + j];
                                       if (bi->requires_grad) detail::grad_buffer(*bi)[j] += g[i * d + j];
                                   }
                           }
                           if (!xi->requires_grad) return;
                           auto& gx = detail::grad_buffer(*xi);
                           std::vector<Real> dxhat(d);
                           for (std::size_t i = 0; i < n; ++i) {
                               Real mean_dx = 0.0, mean_dx_xhat = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   dxhat[j] = g[i * d + j] * gi->data[j];
                                   mean_dx += dxhat[j];
                                   mean_dx_xhat += dxhat[j] * xhat[i * d + j];
                               }
                               mean_dx /= static_cast<Real>(d);
                               mean_dx_xhat /= static_cast<Real>(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                   gx[i * d + j] += inv_std[i] * (dxhat[j] - mean_dx - xhat[i * d + j] * mean_dx_xhat);
                               }
                           }
                       });
    }
    return out;
}

// Row-wise softmax of a square [T x T] score matrix where entry (t, s) with
// s > t receives the additive mask constant before normalization.
inline Tensor causal_softmax(const Tensor& scores) {
    require_rank2(scores, "causal_softmax");
    const std::size_t t_len = scores.dim(0);
    if (scores.dim(1) != t_len) throw DimensionError("causal_softmax expects a square matrix, got " + shape_str(scores.shape()));
    Tensor out(scores.shape());
    auto sd = scores.data();
    auto o = out.data();
    for (std::size_t t = 0; t < t_len; ++t) {
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t s = 0; s < t_len; ++s) {
            const Real v = sd[t * t_len + s] + (s > t ? kMaskedLogit : 0.0);
            o[t * t_len + s] = v;
            mx = std::max(mx, v);
        }
        Real z = 0.0;
        for (std::size_t s = 0; s < t_len; ++s) {
            o[t * t_len + s] = std::exp(o[t * t_len + s] - mx);
            z += o[t * t_len + s];
        }
        for (std::size_t s = 0; s < t_len; ++s) o[t * t_len + s] /= z;
    }
    if (detail::needs_record({&scores})) {
        auto si = scores.impl();
        std::vector<Real> p(o.begin(), o.end());
        detail::record(out, {&scores}, [si, t_len, p = std::move(p)](std::span<const Real> g) {
            auto& gs = detail::grad_buffer(*si);
            for (std::size_t t = 0; t < t_len; ++t) {
                Real dot = 0.0;
                for (std::size_t s = 0; s < t_len; ++s) dot += g[t * t_len + s] * p[t * t_len + s];
                for (std::size_t s = 0; s < t_len; ++s) gs[t * t_len + s] += p[t * t_len + s] * (g[t * t_len + s] - dot);
            }
        });
    }
    return out;
}

// Row lookup: table[V x d], ids (n) -> [n x d].
inline Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
    require_rank2(table, "embedding");
    const std::size_t vocab = table.dim(0), d = table.dim(1), n = ids.size();
    if (n == 0) throw DimensionError("embedding: empty id list");
    Tensor out({n, d});
    auto td = table.data();
    auto o = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw VocabularyError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                                  std::to_string(vocab));
        }
        std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
    }
    if (detail::needs_record({&table})) {
        auto ti = table.impl();
        std::vector<std::int32_t> idv(ids.begin(), ids.end());
        detail::record(out, {&table}, [ti, d, idv = std::move(idv)](std::span<const Real> g) {
            auto& gt = detail::grad_buffer(*ti);
            for (std::size_t i = 0; i < idv.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
        });
    }
    return out;
}

// Inverted dropout. Identity when `train` is false or p == 0.
template <typename Rng>
Tensor dropout(const Tensor& a, Real p, bool train, Rng& rng) {
    if (!train || p <= 0.0) return a;
    if (p >= 1.0) throw DimensionError("dropout probability must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    const Real s = 1.0 / (1.0 - p);
    std::vector<Real> mask(a.numel());
    for (Real& m : mask) m = keep(rng) ? s : 0.0;
    Tensor out(a.shape());
    auto o = out.data();
    auto ad = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * mask[i];
    if (detail::needs_record({&a})) {
        auto ai = a.impl();
        detail::record(out, {&a}, [ai, mask = std::move(mask)](std::span<const Real> g) {
            auto& ga = detail::grad_buffer(*ai);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
        });
    }
    return out;
}

// Mean next-token cross-entropy over positions whose mask is true. Masked
// positions contribute nothing to the value or the gradient.
inline Tensor softmax_ce_loss(const Tensor& logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
    const std::size_t n = logits.rows(), vocab = logits.cols();
    if (targets.size() != n || mask.size() != n) {
        throw DimensionError("softmax_ce_loss: " + std::to_string(n) + " logit rows vs " +
                             std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) + " mask");
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
            throw VocabularyError("target id " + std::to_string(targets[i]) + " outside [0, " + std::to_string(vocab) + ")");
        }
        ++count;
    }
    if (count == 0) throw EmptyLossError("softmax_ce_loss: every position is masked");

    auto ld = logits.data();
    std::vector<Real> probs(detail::needs_record({&logits}) ? n * vocab : 0);
    Real total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const Real* row = ld.data() + i * vocab;
        Real mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        Real z = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
        const Real lse = mx + std::log(z);
        total += lse - row[static_cast<std::size_t>(targets[i])];
        if (!probs.empty())
            for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(row[j] - lse);
    }
    const Real inv = 1.0 / static_cast<Real>(count);
    Tensor out = Tensor::scalar(total * inv);
    if (detail::needs_record({&logits})) {
        auto li = logits.impl();
        std::vector<std::int32_t> tv(targets.begin(), targets.end());
        std::vector<std::uint8_t> mv(mask.begin(), mask.end());
        detail::record(out, {&logits}, [li, n, vocab, inv, tv = std::move(tv), mv = std::move(mv),
                                        probs = std::move(probs)](std::span<const Real> g) {
            auto& gl = detail::grad_buffer(*li);
            const Real s = g[0] * inv;
            for (std::size_t i = 0; i < n; ++i) {
                if (!mv[i]) continue;
                for (std::size_t j = 0; j < vocab; ++j) gl[i * vocab + j] += s * probs[i * vocab + j];
                gl[i * vocab + static_cast<std::size_t>(tv[i])] -= s;
            }
        });
    }
    return out;
}

// Multi-head causal self-attention over q, k, v of shape [batch*T x d].
// key_valid (batch*T) marks non-padding keys; invalid keys and future keys
// receive the additive mask constant before the softmax.
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                               std::size_t t_len, std::size_t heads, std::span<const std::uint8_t> key_valid) {
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const std::size_t d = q.cols();
    if (q.rows() != batch * t_len || key_valid.size() != batch * t_len || d % heads != 0) {
        throw DimensionError("causal_attention: inconsistent shapes " + shape_str(q.shape()));
    }
    const std::size_t dh = d / heads;
    const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dh));
    Tensor out(q.shape());
    std::vector<Real> probs(batch * heads * t_len * t_len, 0.0);
    auto qd = q.data(), kd = k.data(), vd = v.data();
    auto o = out.data();
    std::vector<Real> row(t_len);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            Real* p = probs.data() + (b * heads + h) * t_len * t_len;
            for (std::size_t t = 0; t < t_len; ++t) {
                const Real* qt = qd.data() + (b * t_len + t) * d + h * dh;
                Real mx = -std::numeric_limits<Real>::infinity();
                for (std::size_t s = 0; s < t_len; ++s) {
                    const Real* ks = kd.data() + (b * t_len + s) * d + h * dh;
                    Real dot = 0.0;
                    for (std::size_t j = 0; j < dh; ++j) dot += qt[j] * ks[j];
                    Real score = dot * inv_sqrt;
                    if (s > t || !key_valid[b * t_len + s]) score += kMaskedLogit;
                    row[s] = score;
                    mx = std::max(mx, score);
                }
                Real z = 0.0;
                for (std::size_t s = 0; s < t_len; ++s) {
                    row[s] = std::exp(row[s] - mx);
                    z += row[s];
                }
                Real* ot = o.data() + (b * t_len + t) * d + h * dh;
                for (std::size_t s = 0; s < t_len; ++s) {
                    const Real w = row[s] / z;
                    p[t * t_len + s] = w;
                    if (w == 0.0) continue;
                    const Real* vs = vd.data() + (b * t_len + s) * d + h * dh;
                    for (std::size_t j = 0; j < dh; ++j) ot[j] += w * vs[j];
                }
            }
        }
    }
    if (detail::needs_record({&q, &k, &v})) {
        auto qi = q.impl(), ki = k.impl(), vi = v.impl();
        detail::record(out, {&q, &k, &v}, [qi, ki, vi, batch, t_len, heads, d, dh, inv_sqrt,
                                           probs = std::move(probs)](std::span<const Real> g) {
            std::vector<Real> dq(qi->requires_grad ? batch * t_len * d : 0);
            std::vector<Real> dk(ki->requires_grad ? batch * t_len * d : 0);
            std::vector<Real> dv(vi->requires_grad ? batch * t_len * d : 0);
            std::vector<Real> dp(t_len);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const Real* p = probs.data() + (b * heads + h) * t_len * t_len;
                    for (std::size_t t = 0; t < t_len; ++t) {
                        const Real* gt = g.data() + (b * t_len + t) * d + h * dh;
                        Real dot = 0.0;
                        for (std::size_t s = 0; s < t_len; ++s) {
                            const Real w = p[t * t_len + s];
                            if (w == 0.0) {
                                dp[s] = 0.0;
                                continue;
                            }
                            const Real* vs = vi->data.data() + (b * t_len + s) * d + h * dh;
                            Real acc = 0.0;
                            for (std::size_t j = 0; j < dh; ++j) acc += gt[j] * vs[j];
                            dp[s] = acc;
                            dot += w * acc;
                            if (!dv.empty()) {
                                Real* dvs = dv.data() + (b * t_len + s) * d + h * dh;
                                for (std::size_t j = 0; j < dh; ++j) dvs[j] += w * gt[j];
                            }
                        }
                        const Real* qt = qi->data.data() + (b * t_len + t) * d + h * dh;
                        for (std::size_t s = 0; s < t_len; ++s) {
                            const Real w = p[t * t_len + s];
                            if (w == 0.0) continue;
                            const Real ds = w * (dp[s] - dot) * inv_sqrt;
                            const Real* ks = ki->data.data() + (b * t_len + s) * d + h * dh;
                            if (!dq.empty()) {
                                Real* dqt = dq.data() + (b * t_len + t) * d + h * dh;
                                for (std::size_t j = 0; j < dh; ++j) dqt[j] += ds * ks[j];
                            }
                            if (!dk.empty()) {
                                Real* dks = dk.data() + (b * t_len + s) * d + h * dh;
                                for (std::size_t j = 0; j < dh; ++j) dks[j] += ds * qt[j];
                            }
                        }
                    }
                }
            }
            if (!dq.empty()) detail::accumulate_grad(*qi, dq);
            if (!dk.empty()) detail::accumulate_grad(*ki, dk);
            if (!dv.empty()) detail::accumulate_grad(*vi, dv);
        });
    }
    return out;
}

}  // namespace chameleon::ops
