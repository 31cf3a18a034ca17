#pragma once

// Image-shaped differentiable kernels: convolution, pooling, resampling,
// spatial softmax, normalization and bilinear grid sampling.
//
// Layout is NCHW for feature maps. Sampling grids and flows are NHWC with the
// last axis holding (x, y) in normalized lattice coordinates: pixel index i on
// an axis of extent n sits at -1 + 2i/(n-1).

#include <Eigen/Core>

#include "monkeynet/tensor.hpp"

namespace monkeynet {

inline double lattice_coord(std::int64_t i, std::int64_t n) {
    return n > 1 ? -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_rank4(const Shape& s, const char* op) {
    require(s.size() == 4, op, ": expected rank-4 NCHW tensor, got ", shape_str(s));
}

/// dst (+)= op(a) * op(b) for row-major buffers; a is M x K, b is K x N
/// (each optionally stored transposed). Eigen routes vector-shaped and tiny
/// products to kernels whose summation order depends on pointer alignment,
/// which would make results vary with heap layout; those shapes take a plain
/// loop instead so every product is bit-reproducible.
template <typename T>
void matmul(const T* a, bool a_t, const T* b, bool b_t, T* dst, std::int64_t M, std::int64_t K, std::int64_t N,
            bool accumulate) {
    using Mat = RowMat<T>;
    if (M > 1 && N > 1 && M + N + K >= 20) {
        Eigen::Map<Mat> d(dst, M, N);
        auto run = [&](const auto& A, const auto& B) {
            if (accumulate) d.noalias() += A * B;
            else d.noalias() = A * B;
        };
        if (!a_t && !b_t) run(Eigen::Map<const Mat>(a, M, K), Eigen::Map<const Mat>(b, K, N));
        else if (!a_t) run(Eigen::Map<const Mat>(a, M, K), Eigen::Map<const Mat>(b, N, K).transpose());
        else if (!b_t) run(Eigen::Map<const Mat>(a, K, M).transpose(), Eigen::Map<const Mat>(b, K, N));
        else run(Eigen::Map<const Mat>(a, K, M).transpose(), Eigen::Map<const Mat>(b, N, K).transpose());
        return;
    }
    if (!accumulate) std::fill(dst, dst + M * N, T(0));
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t k = 0; k < K; ++k) {
            const T av = a_t ? a[k * M + i] : a[i * K + k];
            T* row = dst + i * N;
            if (b_t)
                for (std::int64_t j = 0; j < N; ++j) row[j] += av * b[j * K + k];
            else
                for (std::int64_t j = 0; j < N; ++j) row[j] += av * b[k * N + j];
        }
}

struct ConvGeometry {
    std::int64_t C, H, W, kh, kw, stride, pad, Ho, Wo;
    std::int64_t rows() const { return C * kh * kw; }
    std::int64_t cols() const { return Ho * Wo; }
};

/// Output columns [lo, hi) whose input column oj*stride - pad + kj is in range.
inline void valid_columns(const ConvGeometry& g, std::int64_t kj, std::int64_t& lo, std::int64_t& hi) {
    const std::int64_t off = kj - g.pad;
    lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
    hi = g.W - off <= 0 ? 0 : std::min(g.Wo, (g.W - off + g.stride - 1) / g.stride);
    lo = std::min(lo, hi);
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    for (std::int64_t c = 0; c < g.C; ++c)
        for (std::int64_t ki = 0; ki < g.kh; ++ki)
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
                std::int64_t lo, hi;
                valid_columns(g, kj, lo, hi);
                const std::int64_t off = kj - g.pad;
                for (std::int64_t oi = 0; oi < g.Ho; ++oi) {
                    const std::int64_t ii = oi * g.stride - g.pad + ki;
                    T* dst = row + oi * g.Wo;
                    if (ii < 0 || ii >= g.H) {
                        std::fill_n(dst, g.Wo, T(0));
                        continue;
                    }
                    const T* src = x + (c * g.H + ii) * g.W + off;
                    std::fill_n(dst, lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + lo, src + hi, dst + lo);
                    } else {
                        for (std::int64_t oj = lo; oj < hi; ++oj) dst[oj] = src[oj * g.stride];
                    }
                    std::fill(dst + hi, dst + g.Wo, T(0));
                }
            }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
    for (std::int64_t c = 0; c < g.C; ++c)
        for (std::int64_t ki = 0; ki < g.kh; ++ki)
            for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                const T* row = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
                std::int64_t lo, hi;
                valid_columns(g, kj, lo, hi);
                const std::int64_t off = kj - g.pad;
                for (std::int64_t oi = 0; oi < g.Ho; ++oi) {
                    const std::int64_t ii = oi * g.stride - g.pad + ki;
                    if (ii < 0 || ii >= g.H) continue;
                    const T* src = row + oi * g.Wo;
                    T* dst = x + (c * g.H + ii) * g.W + off;
                    for (std::int64_t oj = lo; oj < hi; ++oj) dst[oj * g.stride] += src[oj];
                }
            }
}

}  // namespace detail

/// 2-D cross-correlation. `bias` may be undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::int64_t stride = 1, std::int64_t pad = 0) {
    detail::require_rank4(x.shape(), "conv2d");
    detail::require(weight.ndim() == 4, "conv2d: weight must be [O,C,kh,kw], got ",
                    shape_str(weight.shape()));
    detail::require(weight.dim(1) == x.dim(1), "conv2d: input has ", x.dim(1),
                    " channels but weight expects ", weight.dim(1), " (input ",
                    shape_str(x.shape()), ", weight ", shape_str(weight.shape()), ")");
    detail::require(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad");
    const std::int64_t N = x.dim(0), O = weight.dim(0);
    detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), stride, pad, 0, 0};
    detail::require(g.H + 2 * pad >= g.kh && g.W + 2 * pad >= g.kw, "conv2d: kernel ",
                    g.kh, "x", g.kw, " does not fit padded input ", shape_str(x.shape()),
                    " with pad ", pad);
    const bool has_bias = bias.defined();
    if (has_bias)
        detail::require(bias.numel() == O, "conv2d: bias has ", bias.numel(), " entries, expected ", O);
    g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
    g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;

    std::vector<T> out(static_cast<std::size_t>(N * O * g.cols()));
    std::vector<T> col(static_cast<std::size_t>(g.rows() * g.cols()));
    const T* wd = weight.data().data();
    const T* xd = x.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        detail::im2col(xd + n * g.C * g.H * g.W, g, col.data());
        T* om = out.data() + n * O * g.cols();
        detail::matmul(wd, false, col.data(), false, om, O, g.rows(), g.cols(), false);
        if (has_bias)
            for (std::int64_t o = 0; o < O; ++o) {
                const T b = bias.data()[o];
                for (std::int64_t p = 0; p < g.cols(); ++p) om[o * g.cols() + p] += b;
            }
    }

    auto xn = x.node(), wn = weight.node();
    auto bn = has_bias ? bias.node() : nullptr;
    std::vector<std::shared_ptr<Node<T>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    return make_result<T>(
        Shape{N, O, g.Ho, g.Wo}, std::move(out), parents, [xn, wn, bn, g, N, O](Node<T>& self) {
            T* gx = detail::grad_of(xn);
            T* gw = detail::grad_of(wn);
            T* gb = bn ? detail::grad_of(bn) : nullptr;
            std::vector<T> col(static_cast<std::size_t>(g.rows() * g.cols()));
            const T* wd = wn->data.data();
            for (std::int64_t n = 0; n < N; ++n) {
                const T* go = self.grad.data() + n * O * g.cols();
                if (gb)
                    for (std::int64_t o = 0; o < O; ++o) {
                        T s = 0;
                        for (std::int64_t p = 0; p < g.cols(); ++p) s += go[o * g.cols() + p];
                        gb[o] += s;
                    }
                if (gw) {
                    detail::im2col(xn->data.data() + n * g.C * g.H * g.W, g, col.data());
                    detail::matmul(go, false, col.data(), true, gw, O, g.cols(), g.rows(), true);
                }
                if (gx) {
                    detail::matmul(wd, true, go, false, col.data(), g.rows(), O, g.cols(), false);
                    detail::col2im_add(col.data(), g, gx + n * g.C * g.H * g.W);
                }
            }
        });
}

/// k x k block means.
template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::int64_t k = 2) {
    detail::require_rank4(x.shape(), "avg_pool2d");
    detail::require(k >= 1 && x.dim(2) % k == 0 && x.dim(3) % k == 0, "avg_pool2d: spatial dims ",
                    x.dim(2), "x", x.dim(3), " not divisible by ", k);
    const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), Ho = H / k, Wo = W / k;
    const T inv = T(1) / static_cast<T>(k * k);
    std::vector<T> out(static_cast<std::size_t>(NC * Ho * Wo), T(0));
    const T* xd = x.data().data();
    for (std::int64_t p = 0; p < NC; ++p)
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j) out[(p * Ho + i / k) * Wo + j / k] += xd[(p * H + i) * W + j];
    for (auto& v : out) v *= inv;
    auto xn = x.node();
    return make_result<T>(Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {xn},
                          [xn, NC, H, W, Ho, Wo, k, inv](Node<T>& self) {
                              T* g = detail::grad_of(xn);
                              if (!g) return;
                              for (std::int64_t p = 0; p < NC; ++p)
                                  for (std::int64_t i = 0; i < H; ++i)
                                      for (std::int64_t j = 0; j < W; ++j)
                                          g[(p * H + i) * W + j] +=
                                              inv * self.grad[(p * Ho + i / k) * Wo + j / k];
                          });
}

/// Each pixel replicated factor x factor times.
template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, std::int64_t factor = 2) {
    detail::require_rank4(x.shape(), "upsample_nearest");
    detail::require(factor >= 1, "upsample_nearest: factor must be >= 1, got ", factor);
    const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Ho = H * factor, Wo = W * factor;
    std::vector<T> out(static_cast<std::size_t>(NC * Ho * Wo));
    const T* xd = x.data().data();
    for (std::int64_t p = 0; p < NC; ++p)
        for (std::int64_t i = 0; i < Ho; ++i)
            for (std::int64_t j = 0; j < Wo; ++j)
                out[(p * Ho + i) * Wo + j] = xd[(p * H + i / factor) * W + j / factor];
    auto xn = x.node();
    return make_result<T>(Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {xn},
                          [xn, NC, H, W, Ho, Wo, factor](Node<T>& self) {
                              T* g = detail::grad_of(xn);
                              if (!g) return;
                              for (std::int64_t p = 0; p < NC; ++p)
                                  for (std::int64_t i = 0; i < Ho; ++i)
                                      for (std::int64_t j = 0; j < Wo; ++j)
                                          g[(p * H + i / factor) * W + j / factor] +=
                                              self.grad[(p * Ho + i) * Wo + j];
                          });
}

/// Nearest-neighbour decimation: keeps pixel (i*factor, j*factor). Values are
/// picked, never rescaled.
template <typename T>
BasicTensor<T> downsample_nearest(const BasicTensor<T>& x, std::int64_t factor) {
    detail::require_rank4(x.shape(), "downsample_nearest");
    detail::require(factor >= 1 && x.dim(2) % factor == 0 && x.dim(3) % factor == 0,
                    "downsample_nearest: dims ", x.dim(2), "x", x.dim(3), " not divisible by ", factor);
    if (factor == 1) return x;
    const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Ho = H / factor, Wo = W / factor;
    std::vector<T> out(static_cast<std::size_t>(NC * Ho * Wo));
    const T* xd = x.data().data();
    for (std::int64_t p = 0; p < NC; ++p)
        for (std::int64_t i = 0; i < Ho; ++i)
            for (std::int64_t j = 0; j < Wo; ++j)
                out[(p * Ho + i) * Wo + j] = xd[(p * H + i * factor) * W + j * factor];
    auto xn = x.node();
    return make_result<T>(Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {xn},
                          [xn, NC, H, W, Ho, Wo, factor](Node<T>& self) {
                              T* g = detail::grad_of(xn);
                              if (!g) return;
                              for (std::int64_t p = 0; p < NC; ++p)
                                  for (std::int64_t i = 0; i < Ho; ++i)
                                      for (std::int64_t j = 0; j < Wo; ++j)
                                          g[(p * H + i * factor) * W + j * factor] +=
                                              self.grad[(p * Ho + i) * Wo + j];
                          });
}

/// Softmax over the H x W extent of every (n, k) slice, at the given temperature.
template <typename T>
BasicTensor<T> softmax_spatial(const BasicTensor<T>& x, T temperature) {
    detail::require_rank4(x.shape(), "softmax_spatial");
    detail::require(temperature > T(0), "softmax_spatial: temperature must be positive, got ",
                    temperature);
    const std::int64_t S = x.dim(0) * x.dim(1), P = x.dim(2) * x.dim(3);
    std::vector<T> out(x.data().size());
    const T* xd = x.data().data();
    for (std::int64_t s = 0; s < S; ++s) {
        const T* in = xd + s * P;
        T* o = out.data() + s * P;
        const T mx = *std::max_element(in, in + P);
        T z = T(0);
        for (std::int64_t p = 0; p < P; ++p) z += (o[p] = std::exp((in[p] - mx) / temperature));
        for (std::int64_t p = 0; p < P; ++p) o[p] /= z;
    }
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {xn}, [xn, S, P, temperature](Node<T>& self) {
        T* g = detail::grad_of(xn);
        if (!g) return;
        for (std::int64_t s = 0; s < S; ++s) {
            const T* y = self.data.data() + s * P;
            const T* gy = self.grad.data() + s * P;
            T dot = T(0);
            for (std::int64_t p = 0; p < P; ++p) dot += gy[p] * y[p];
            for (std::int64_t p = 0; p < P; ++p) g[s * P + p] += y[p] * (gy[p] - dot) / temperature;
        }
    });
}

/// Per-pixel softmax across the channel axis of an NCHW tensor.
template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& x) {
    detail::require_rank4(x.shape(), "softmax_channels");
    const std::int64_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    std::vector<T> out(x.data().size());
    const T* xd = x.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < P; ++p) {
            const T* in = xd + n * C * P + p;
            T* o = out.data() + n * C * P + p;
            T mx = in[0];
            for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, in[c * P]);
            T z = T(0);
            for (std::int64_t c = 0; c < C; ++c) z += (o[c * P] = std::exp(in[c * P] - mx));
            for (std::int64_t c = 0; c < C; ++c) o[c * P] /= z;
        }
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {xn}, [xn, N, C, P](Node<T>& self) {
        T* g = detail::grad_of(xn);
        if (!g) return;
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t p = 0; p < P; ++p) {
                const std::int64_t base = n * C * P + p;
                T dot = T(0);
                for (std::int64_t c = 0; c < C; ++c) dot += self.grad[base + c * P] * self.data[base + c * P];
                for (std::int64_t c = 0; c < C; ++c)
                    g[base + c * P] += self.data[base + c * P] * (self.grad[base + c * P] - dot);
            }
    });
}

enum class NormMode { Batch, Instance };

/// Per-channel statistics produced by a batch-mode normalization.
template <typename T>
struct NormStats {
    std::vector<T> mean;
    std::vector<T> var;  // biased
};

/// Zero-mean, unit-variance normalization. Batch mode pools each channel over
/// (N, H, W); instance mode pools over (H, W) per sample. No affine part.
template <typename T>
BasicTensor<T> norm_layer(const BasicTensor<T>& x, NormMode mode, T eps = T(1e-5),
                          NormStats<T>* stats = nullptr) {
    detail::require_rank4(x.shape(), "norm_layer");
    const std::int64_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    const bool batch = mode == NormMode::Batch;
    const std::int64_t groups = batch ? C : N * C;
    const std::int64_t m = batch ? N * P : P;
    std::vector<T> mu(groups, T(0)), inv_std(groups, T(0));
    const T* xd = x.data().data();
    auto for_group = [&](std::int64_t gi, auto&& fn) {
        if (batch) {
            for (std::int64_t n = 0; n < N; ++n) {
                const std::int64_t base = (n * C + gi) * P;
                for (std::int64_t p = 0; p < P; ++p) fn(base + p);
            }
        } else {
            const std::int64_t base = gi * P;
            for (std::int64_t p = 0; p < P; ++p) fn(base + p);
        }
    };
    std::vector<T> out(x.data().size());
    if (stats) {
        stats->mean.assign(C, T(0));
        stats->var.assign(C, T(0));
    }
    for (std::int64_t gi = 0; gi < groups; ++gi) {
        T s = T(0);
        for_group(gi, [&](std::int64_t i) { s += xd[i]; });
        const T mean_v = s / static_cast<T>(m);
        T v = T(0);
        for_group(gi, [&](std::int64_t i) {
            const T d = xd[i] - mean_v;
            v += d * d;
        });
        v /= static_cast<T>(m);
        mu[gi] = mean_v;
        inv_std[gi] = T(1) / std::sqrt(v + eps);
        for_group(gi, [&](std::int64_t i) { out[i] = (xd[i] - mean_v) * inv_std[gi]; });
        if (stats && batch) {
            stats->mean[gi] = mean_v;
            stats->var[gi] = v;
        }
    }
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), {xn},
                          [xn, batch, N, C, P, groups, m, inv_std](Node<T>& self) {
                              T* g = detail::grad_of(xn);
                              if (!g) return;
                              auto visit = [&](std::int64_t gi, auto&& fn) {
                                  if (batch) {
                                      for (std::int64_t n = 0; n < N; ++n) {
                                          const std::int64_t base = (n * C + gi) * P;
                                          for (std::int64_t p = 0; p < P; ++p) fn(base + p);
                                      }
                                  } else {
                                      for (std::int64_t p = 0; p < P; ++p) fn(gi * P + p);
                                  }
                              };
                              for (std::int64_t gi = 0; gi < groups; ++gi) {
                                  T sg = T(0), sgy = T(0);
                                  visit(gi, [&](std::int64_t i) {
                                      sg += self.grad[i];
                                      sgy += self.grad[i] * self.data[i];
                                  });
                                  sg /= static_cast<T>(m);
                                  sgy /= static_cast<T>(m);
                                  visit(gi, [&](std::int64_t i) {
                                      g[i] += inv_std[gi] * (self.grad[i] - sg - self.data[i] * sgy);
                                  });
                              }
                          });
}

/// y[n,c] = x[n,c] * scale[c] + shift[c]
template <typename T>
BasicTensor<T> channel_affine(const BasicTensor<T>& x, const BasicTensor<T>& scale_c,
                              const BasicTensor<T>& shift_c) {
    detail::require_rank4(x.shape(), "channel_affine");
    const std::int64_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    detail::require(scale_c.numel() == C && shift_c.numel() == C, "channel_affine: expected ", C,
                    " per-channel parameters");
    std::vector<T> out(x.data().size());
    const T* xd = x.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T a = scale_c.data()[c], b = shift_c.data()[c];
            const std::int64_t base = (n * C + c) * P;
            for (std::int64_t p = 0; p < P; ++p) out[base + p] = xd[base + p] * a + b;
        }
    auto xn = x.node(), sn = scale_c.node(), bn = shift_c.node();
    return make_result<T>(x.shape(), std::move(out), {xn, sn, bn}, [xn, sn, bn, N, C, P](Node<T>& self) {
        T* gx = detail::grad_of(xn);
        T* gs = detail::grad_of(sn);
        T* gb = detail::grad_of(bn);
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const std::int64_t base = (n * C + c) * P;
                for (std::int64_t p = 0; p < P; ++p) {
                    const T go = self.grad[base + p];
                    if (gx) gx[base + p] += go * sn->data[c];
                    if (gs) gs[c] += go * xn->data[base + p];
                    if (gb) gb[c] += go;
                }
            }
    });
}

/// Identity sampling grid of shape [N,H,W,2].
template <typename T>
BasicTensor<T> identity_grid(std::int64_t N, std::int64_t H, std::int64_t W) {
    std::vector<T> g(static_cast<std::size_t>(N * H * W * 2));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j) {
                const std::int64_t o = ((n * H + i) * W + j) * 2;
                g[o] = static_cast<T>(lattice_coord(j, W));
                g[o + 1] = static_cast<T>(lattice_coord(i, H));
            }
    return BasicTensor<T>(Shape{N, H, W, 2}, std::move(g));
}

/// Repeats a per-sample 2-vector [N,2] over an H x W lattice -> [N,H,W,2].
template <typename T>
BasicTensor<T> broadcast_vector(const BasicTensor<T>& v, std::int64_t H, std::int64_t W) {
    detail::require(v.ndim() == 2 && v.dim(1) == 2, "broadcast_vector: expected [N,2], got ",
                    shape_str(v.shape()));
    const std::int64_t N = v.dim(0), P = H * W;
    std::vector<T> out(static_cast<std::size_t>(N * P * 2));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < P; ++p) {
            out[(n * P + p) * 2] = v.data()[n * 2];
            out[(n * P + p) * 2 + 1] = v.data()[n * 2 + 1];
        }
    auto vn = v.node();
    return make_result<T>(Shape{N, H, W, 2}, std::move(out), {vn}, [vn, N, P](Node<T>& self) {
        T* g = detail::grad_of(vn);
        if (!g) return;
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t p = 0; p < P; ++p) {
                g[n * 2] += self.grad[(n * P + p) * 2];
                g[n * 2 + 1] += self.grad[(n * P + p) * 2 + 1];
            }
    });
}

/// Bilinear sampling of x [N,C,H,W] at grid [N,Ho,Wo,2]. Coordinates outside
/// [-1,1] are clamped to the border. Differentiable in both x and grid.
template <typename T>
BasicTensor<T> grid_sample_bilinear(const BasicTensor<T>& x, const BasicTensor<T>& grid) {
    detail::require_rank4(x.shape(), "grid_sample_bilinear");
    detail::require(grid.ndim() == 4 && grid.dim(3) == 2 && grid.dim(0) == x.dim(0),
                    "grid_sample_bilinear: grid must be [N,Ho,Wo,2] with N=", x.dim(0), ", got ",
                    shape_str(grid.shape()));
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Ho = grid.dim(1), Wo = grid.dim(2), Po = Ho * Wo;

    struct Tap {
        std::int64_t x0, x1, y0, y1;
        T wx, wy;
        bool clamped_x, clamped_y;
    };
    // Near-integer positions snap to the lattice so the identity grid is exact.
    auto axis_tap = [](T coord, std::int64_t n, std::int64_t& i0, std::int64_t& i1, T& w, bool& clamped) {
        T pos = (coord + T(1)) * T(0.5) * static_cast<T>(n - 1);
        clamped = false;
        if (pos <= T(0)) {
            clamped = pos < T(0);
            pos = T(0);
        } else if (pos >= static_cast<T>(n - 1)) {
            clamped = pos > static_cast<T>(n - 1);
            pos = static_cast<T>(n - 1);
        }
        T fl = std::floor(pos);
        T frac = pos - fl;
        constexpr T snap = T(1e-10);
        if (frac < snap) {
            frac = T(0);
        } else if (frac > T(1) - snap) {
            fl += T(1);
            frac = T(0);
        }
        i0 = static_cast<std::int64_t>(fl);
        i1 = std::min(i0 + 1, n - 1);
        w = frac;
    };
    std::vector<Tap> taps(static_cast<std::size_t>(N * Po));
    const T* gd = grid.data().data();
    for (std::int64_t q = 0; q < N * Po; ++q) {
        Tap& t = taps[q];
        axis_tap(gd[q * 2], W, t.x0, t.x1, t.wx, t.clamped_x);
        axis_tap(gd[q * 2 + 1], H, t.y0, t.y1, t.wy, t.clamped_y);
    }
    std::vector<T> out(static_cast<std::size_t>(N * C * Po));
    const T* xd = x.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* img = xd + (n * C + c) * H * W;
            T* o = out.data() + (n * C + c) * Po;
            for (std::int64_t p = 0; p < Po; ++p) {
                const Tap& t = taps[n * Po + p];
                const T top = img[t.y0 * W + t.x0] * (T(1) - t.wx) + img[t.y0 * W + t.x1] * t.wx;
                const T bot = img[t.y1 * W + t.x0] * (T(1) - t.wx) + img[t.y1 * W + t.x1] * t.wx;
                o[p] = top * (T(1) - t.wy) + bot * t.wy;
            }
        }
    auto xn = x.node(), gn = grid.node();
    return make_result<T>(
        Shape{N, C, Ho, Wo}, std::move(out), {xn, gn},
        [xn, gn, taps = std::move(taps), N, C, H, W, Po](Node<T>& self) {
            T* gx = detail::grad_of(xn);
            T* gg = detail::grad_of(gn);
            const T sx = T(0.5) * static_cast<T>(W - 1), sy = T(0.5) * static_cast<T>(H - 1);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* img = xn->data.data() + (n * C + c) * H * W;
                    const T* go = self.grad.data() + (n * C + c) * Po;
                    for (std::int64_t p = 0; p < Po; ++p) {
                        const Tap& t = taps[n * Po + p];
                        const T gv = go[p];
                        if (gx) {
                            T* gi = gx + (n * C + c) * H * W;
                            gi[t.y0 * W + t.x0] += gv * (T(1) - t.wx) * (T(1) - t.wy);
                            gi[t.y0 * W + t.x1] += gv * t.wx * (T(1) - t.wy);
                            gi[t.y1 * W + t.x0] += gv * (T(1) - t.wx) * t.wy;
                            gi[t.y1 * W + t.x1] += gv * t.wx * t.wy;
                        }
                        if (gg) {
                            const T v00 = img[t.y0 * W + t.x0], v01 = img[t.y0 * W + t.x1];
                            const T v10 = img[t.y1 * W + t.x0], v11 = img[t.y1 * W + t.x1];
                            const std::int64_t q = (n * Po + p) * 2;
                            if (!t.clamped_x)
                                gg[q] += gv * ((T(1) - t.wy) * (v01 - v00) + t.wy * (v11 - v10)) * sx;
                            if (!t.clamped_y)
                                gg[q + 1] += gv * ((T(1) - t.wx) * (v10 - v00) + t.wx * (v11 - v01)) * sy;
                        }
                    }
                }
        });
}

/// Backward warp: samples x at (identity + flow). flow is [N,Ho,Wo,2].
template <typename T>
BasicTensor<T> warp(const BasicTensor<T>& x, const BasicTensor<T>& flow) {
    detail::require(flow.ndim() == 4 && flow.dim(3) == 2, "warp: flow must be [N,H,W,2], got ",
                    shape_str(flow.shape()));
    auto grid = add(identity_grid<T>(flow.dim(0), flow.dim(1), flow.dim(2)), flow);
    return grid_sample_bilinear(x, grid);
}

}  // namespace monkeynet
