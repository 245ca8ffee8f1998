#include "kpt/ops.hpp"

#include <algorithm>
#include <cmath>
#if defined(__x86_64__)
#include <immintrin.h>
#endif
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace kpt::ops {

namespace {

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

Precision widest(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts) {
        if (t->precision() == Precision::f64) return Precision::f64;
    }
    return Precision::f32;
}

bool wants_grad(std::initializer_list<const Tensor*> ts) {
    if (!Tape::current().recording()) return false;
    return std::any_of(ts.begin(), ts.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void finish(Tensor& out) { out.round_to_precision(); }

void record(Tensor& out, std::vector<ImplPtr> inputs, std::function<void(const Impl&)> fn) {
    out.set_requires_grad(true);
    Tape::current().record(TapeNode{std::move(inputs), out.impl(), std::move(fn)});
}

std::vector<double>& gbuf(Impl& x) {
    if (x.grad.empty()) x.grad.assign(x.data.size(), 0.0);
    return x.grad;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_str(t.shape()));
    }
}

inline double dot(const double* x, const double* y, std::size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    for (; i < n; ++i) s0 += x[i] * y[i];
    return (s0 + s1) + (s2 + s3);
}

// C[r][j] += Σ_p A(r, p) · B[p][j] with A(r, p) = A[r*rs + p*ps]. Every output
// element sums over p in ascending order, so blocking does not change results.
template <std::size_t R, std::size_t W>
inline void gemm_tile(const double* A, std::size_t rs, std::size_t ps, const double* B, double* C,
                      std::size_t depth, std::size_t n) {
    double acc[R][W];
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < W; ++j) acc[r][j] = C[r * n + j];
    for (std::size_t p = 0; p < depth; ++p) {
        const double* b = B + p * n;
        for (std::size_t r = 0; r < R; ++r) {
            const double a = A[r * rs + p * ps];
            for (std::size_t j = 0; j < W; ++j) acc[r][j] += a * b[j];
        }
    }
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < W; ++j) C[r * n + j] = acc[r][j];
}

inline void gemm_edge(const double* A, std::size_t rs, std::size_t ps, const double* B, double* C,
                      std::size_t r_begin, std::size_t r_end, std::size_t j_begin, std::size_t depth,
                      std::size_t n) {
    for (std::size_t r = r_begin; r < r_end; ++r)
        for (std::size_t j = j_begin; j < n; ++j) {
            double c = C[r * n + j];
            for (std::size_t p = 0; p < depth; ++p) c += A[r * rs + p * ps] * B[p * n + j];
            C[r * n + j] = c;
        }
}

void gemm_strided_portable(const double* A, std::size_t rs, std::size_t ps, const double* B, double* C,
                           std::size_t rows, std::size_t depth, std::size_t n) {
    constexpr std::size_t R = 4, W = 8;
    std::size_t r0 = 0;
    for (; r0 + R <= rows; r0 += R) {
        std::size_t j0 = 0;
        for (; j0 + W <= n; j0 += W) gemm_tile<R, W>(A + r0 * rs, rs, ps, B + j0, C + r0 * n + j0, depth, n);
        gemm_edge(A, rs, ps, B, C, r0, r0 + R, j0, depth, n);
    }
    for (; r0 < rows; ++r0) {
        std::size_t j0 = 0;
        for (; j0 + W <= n; j0 += W) gemm_tile<1, W>(A + r0 * rs, rs, ps, B + j0, C + r0 * n + j0, depth, n);
        gemm_edge(A, rs, ps, B, C, r0, r0 + 1, j0, depth, n);
    }
}

#if defined(__x86_64__)
// Same loop order as the portable kernel, but with fused multiply-adds, so
// the last bits differ between the two paths. A process only ever uses one.
// R rows by V four-wide vectors; every element still accumulates in p order.
template <int R, int V>
__attribute__((target("avx2,fma"))) inline void fma_tile(const double* a, std::size_t rs, std::size_t ps,
                                                         const double* b, double* c, std::size_t depth,
                                                         std::size_t n) {
    __m256d acc[R][V];
    for (int r = 0; r < R; ++r)
        for (int v = 0; v < V; ++v) acc[r][v] = _mm256_loadu_pd(c + r * n + 4 * v);
    for (std::size_t p = 0; p < depth; ++p) {
        __m256d bv[V];
        for (int v = 0; v < V; ++v) bv[v] = _mm256_loadu_pd(b + p * n + 4 * v);
        for (int r = 0; r < R; ++r) {
            const __m256d ar = _mm256_broadcast_sd(a + r * rs + p * ps);
            for (int v = 0; v < V; ++v) acc[r][v] = _mm256_fmadd_pd(ar, bv[v], acc[r][v]);
        }
    }
    for (int r = 0; r < R; ++r)
        for (int v = 0; v < V; ++v) _mm256_storeu_pd(c + r * n + 4 * v, acc[r][v]);
}

// One band of R rows. Short bands take wider tiles so that enough independent
// accumulator chains hide the FMA latency.
template <int R>
__attribute__((target("avx2,fma"))) void fma_band(const double* A, std::size_t rs, std::size_t ps,
                                                  const double* B, double* C, std::size_t r0, std::size_t depth,
                                                  std::size_t n) {
    const double* a = A + r0 * rs;
    double* c = C + r0 * n;
    std::size_t j0 = 0;
    if constexpr (R <= 2)
        for (; j0 + 16 <= n; j0 += 16) fma_tile<R, 4>(a, rs, ps, B + j0, c + j0, depth, n);
    for (; j0 + 8 <= n; j0 += 8) fma_tile<R, 2>(a, rs, ps, B + j0, c + j0, depth, n);
    for (; j0 + 4 <= n; j0 += 4) fma_tile<R, 1>(a, rs, ps, B + j0, c + j0, depth, n);
    gemm_edge(A, rs, ps, B, C, r0, r0 + R, j0, depth, n);
}

__attribute__((target("avx2,fma"))) void gemm_strided_fma(const double* A, std::size_t rs, std::size_t ps,
                                                         const double* B, double* C, std::size_t rows,
                                                         std::size_t depth, std::size_t n) {
    std::size_t r0 = 0;
    for (; r0 + 4 <= rows; r0 += 4) fma_band<4>(A, rs, ps, B, C, r0, depth, n);
    switch (rows - r0) {
        case 3: fma_band<3>(A, rs, ps, B, C, r0, depth, n); break;
        case 2: fma_band<2>(A, rs, ps, B, C, r0, depth, n); break;
        case 1: fma_band<1>(A, rs, ps, B, C, r0, depth, n); break;
        default: break;
    }
}

bool cpu_has_fma() {
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}
#endif

void gemm_strided(const double* A, std::size_t rs, std::size_t ps, const double* B, double* C,
                  std::size_t rows, std::size_t depth, std::size_t n) {
#if defined(__x86_64__)
    static const bool fma = cpu_has_fma();
    if (fma) return gemm_strided_fma(A, rs, ps, B, C, rows, depth, n);
#endif
    gemm_strided_portable(A, rs, ps, B, C, rows, depth, n);
}

// C[m×n] += A[m×k] · B[k×n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
    gemm_strided(A, k, 1, B, C, m, k, n);
}

// C[m×n] += A[m×k] · B[n×k]ᵀ, via a transposed copy of B once there are
// enough rows to pay for it.
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
    if (m >= 4) {
        thread_local std::vector<double> bt;
        bt.resize(k * n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
        gemm_strided(A, k, 1, bt.data(), C, m, k, n);
        return;
    }
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) C[i * n + j] += dot(A + i * k, B + j * k, k);
    }
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
    gemm_strided(A, 1, k, B, C, k, m, n);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n}, widest({&a, &b}));
    gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
    finish(out);
    if (wants_grad({&a, &b})) {
        ImplPtr ai = a.impl(), bi = b.impl();
        record(out, {ai, bi}, [ai, bi, m, k, n](const Impl& o) {
            if (ai->requires_grad) gemm_nt(o.grad.data(), bi->data.data(), gbuf(*ai).data(), m, n, k);
            if (bi->requires_grad) gemm_tn(ai->data.data(), o.grad.data(), gbuf(*bi).data(), m, k, n);
        });
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + "ᵀ");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = Tensor::zeros({m, n}, widest({&a, &b}));
    gemm_nt(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
    finish(out);
    if (wants_grad({&a, &b})) {
        ImplPtr ai = a.impl(), bi = b.impl();
        record(out, {ai, bi}, [ai, bi, m, k, n](const Impl& o) {
            if (ai->requires_grad) gemm_nn(o.grad.data(), bi->data.data(), gbuf(*ai).data(), m, n, k);
            if (bi->requires_grad) gemm_tn(o.grad.data(), ai->data.data(), gbuf(*bi).data(), m, n, k);
        });
    }
    return out;
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
    enum class Bcast { none, row, scalar } mode;
    if (a.shape() == b.shape()) {
        mode = Bcast::none;
    } else if (b.numel() == 1 && b.rank() <= 1) {
        mode = Bcast::scalar;
    } else if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) {
        mode = Bcast::row;
    } else {
        throw ShapeError("elementwise: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t n = a.numel();
    const std::size_t width = mode == Bcast::row ? b.numel() : (mode == Bcast::scalar ? 1 : n);
    auto bidx = [mode, width](std::size_t i) {
        return mode == Bcast::none ? i : (mode == Bcast::row ? i % width : 0);
    };

    Tensor out = Tensor::zeros(a.shape(), widest({&a, &b}));
    auto od = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    if (kind == Elementwise::add) {
        for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] + bd[bidx(i)];
    } else {
        for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] * bd[bidx(i)];
    }
    finish(out);
    if (wants_grad({&a, &b})) {
        ImplPtr ai = a.impl(), bi = b.impl();
        record(out, {ai, bi}, [ai, bi, kind, n, bidx](const Impl& o) {
            const auto& g = o.grad;
            if (ai->requires_grad) {
                auto& ga = gbuf(*ai);
                if (kind == Elementwise::add) {
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                } else {
                    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bi->data[bidx(i)];
                }
            }
            if (bi->requires_grad) {
                auto& gb = gbuf(*bi);
                if (kind == Elementwise::add) {
                    for (std::size_t i = 0; i < n; ++i) gb[bidx(i)] += g[i];
                } else {
                    for (std::size_t i = 0; i < n; ++i) gb[bidx(i)] += g[i] * ai->data[i];
                }
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::add, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
    Tensor out = Tensor::zeros(a.shape(), a.precision());
    auto od = out.mutable_data();
    auto ad = a.data();
    for (std::size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] * factor;
    finish(out);
    if (wants_grad({&a})) {
        ImplPtr ai = a.impl();
        record(out, {ai}, [ai, factor](const Impl& o) {
            auto& ga = gbuf(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * factor;
        });
    }
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    const int rank = static_cast<int>(x.rank());
    const int ax = axis < 0 ? axis + rank : axis;
    if (rank == 0 || ax < 0 || ax >= rank) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
    }
    const auto& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= s[i];
    for (int i = ax + 1; i < rank; ++i) inner *= s[i];
    const std::size_t len = s[ax];

    Tensor out = Tensor::zeros(s, x.precision());
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
            double total = 0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xd[base + j * inner] - mx);
                od[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < len; ++j) od[base + j * inner] /= total;
        }
    }
    finish(out);
    if (wants_grad({&x})) {
        ImplPtr xi = x.impl();
        record(out, {xi}, [xi, outer, inner, len](const Impl& o) {
            auto& gx = gbuf(*xi);
            for (std::size_t a = 0; a < outer; ++a) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = a * len * inner + in;
                    double s = 0;
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t k = base + j * inner;
                        s += o.grad[k] * o.data[k];
                    }
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t k = base + j * inner;
                        gx[k] += o.data[k] * (o.grad[k] - s);
                    }
                }
            }
        });
    }
    return out;
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allowed) {
    require_rank(x, 2, "masked_softmax");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (allowed.size() != rows * cols) {
        throw ShapeError("masked_softmax: mask size " + std::to_string(allowed.size()) +
                         " does not match " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros(x.shape(), x.precision());
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * cols;
        const std::uint8_t* mr = allowed.data() + r * cols;
        double* orow = od.data() + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < cols; ++c) {
            if (!mr[c]) continue;
            any = true;
            // NaN must win so that it reaches the loss instead of vanishing
            if (std::isnan(xr[c]) || xr[c] > mx) mx = xr[c];
        }
        if (!any) {
            throw std::invalid_argument("masked_softmax: row " + std::to_string(r) +
                                        " has every position masked");
        }
        double total = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (mr[c]) {
                orow[c] = std::exp(xr[c] - mx);
                total += orow[c];
            }
        }
        for (std::size_t c = 0; c < cols; ++c) orow[c] /= total;
    }
    finish(out);
    if (wants_grad({&x})) {
        ImplPtr xi = x.impl();
        record(out, {xi}, [xi, rows, cols](const Impl& o) {
            auto& gx = gbuf(*xi);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = o.data.data() + r * cols;
                const double* g = o.grad.data() + r * cols;
                const double s = dot(g, y, cols);
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - s);
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape(), x.precision());
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        od[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
    }
    finish(out);
    if (wants_grad({&x})) {
        ImplPtr xi = x.impl();
        record(out, {xi}, [xi](const Impl& o) {
            auto& gx = gbuf(*xi);
            const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
            for (std::size_t i = 0; i < gx.size(); ++i) {
                const double v = xi->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                gx[i] += o.grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
    const std::size_t width = x.shape().back();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != width || bias.dim(0) != width) {
        throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match last dimension of " +
                         shape_str(x.shape()));
    }
    if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / width;

    Tensor out = Tensor::zeros(x.shape(), widest({&x, &gain, &bias}));
    auto xd = x.data();
    auto od = out.mutable_data();
    auto gd = gain.data();
    auto bd = bias.data();
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * width;
        double mu = 0;
        for (std::size_t c = 0; c < width; ++c) mu += xr[c];
        mu /= static_cast<double>(width);
        double var = 0;
        for (std::size_t c = 0; c < width; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t c = 0; c < width; ++c) {
            const double h = (xr[c] - mu) * inv;
            xhat[r * width + c] = h;
            od[r * width + c] = h * gd[c] + bd[c];
        }
    }
    finish(out);
    if (wants_grad({&x, &gain, &bias})) {
        ImplPtr xi = x.impl(), gi = gain.impl(), bi = bias.impl();
        record(out, {xi, gi, bi},
               [xi, gi, bi, rows, width, xhat = std::move(xhat),
                inv_std = std::move(inv_std)](const Impl& o) {
                   const double w = static_cast<double>(width);
                   std::vector<double> dh(width);
                   for (std::size_t r = 0; r < rows; ++r) {
                       const double* g = o.grad.data() + r * width;
                       const double* h = xhat.data() + r * width;
                       if (gi->requires_grad) {
                           auto& gg = gbuf(*gi);
                           for (std::size_t c = 0; c < width; ++c) gg[c] += g[c] * h[c];
                       }
                       if (bi->requires_grad) {
                           auto& gb = gbuf(*bi);
                           for (std::size_t c = 0; c < width; ++c) gb[c] += g[c];
                       }
                       if (xi->requires_grad) {
                           double mean_dh = 0, mean_dh_h = 0;
                           for (std::size_t c = 0; c < width; ++c) {
                               dh[c] = g[c] * gi->data[c];
                               mean_dh += dh[c];
                               mean_dh_h += dh[c] * h[c];
                           }
                           mean_dh /= w;
                           mean_dh_h /= w;
                           auto& gx = gbuf(*xi);
                           for (std::size_t c = 0; c < width; ++c) {
                               gx[r * width + c] += inv_std[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                           }
                       }
                   }
               });
    }
    return out;
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets, int ignore_id) {
    require_rank(logits, 2, "cross_entropy_logits");
    const std::size_t rows = logits.dim(0), classes = logits.dim(1);
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
    }
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets[r];
        if (t == ignore_id) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= classes) {
            throw std::out_of_range("cross_entropy_logits: target " + std::to_string(t) +
                                    " out of range [0," + std::to_string(classes) + ")");
        }
        ++count;
    }
    if (count == 0) throw std::invalid_argument("cross_entropy_logits: every target is ignored");

    auto ld = logits.data();
    std::vector<double> probs(rows * classes, 0.0);
    double total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] == ignore_id) continue;
        const double* z = ld.data() + r * classes;
        double mx = *std::max_element(z, z + classes);
        double s = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double e = std::exp(z[c] - mx);
            probs[r * classes + c] = e;
            s += e;
        }
        for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= s;
        total += (mx + std::log(s)) - z[targets[r]];
    }
    const double n = static_cast<double>(count);
    Tensor out = Tensor::scalar(total / n, logits.precision());
    if (wants_grad({&logits})) {
        ImplPtr li = logits.impl();
        std::vector<int> tgt(targets.begin(), targets.end());
        record(out, {li}, [li, tgt = std::move(tgt), probs = std::move(probs), rows, classes,
                           ignore_id, n](const Impl& o) {
            auto& gl = gbuf(*li);
            const double g = o.grad[0] / n;
            for (std::size_t r = 0; r < rows; ++r) {
                if (tgt[r] == ignore_id) continue;
                for (std::size_t c = 0; c < classes; ++c) {
                    gl[r * classes + c] += g * probs[r * classes + c];
                }
                gl[r * classes + static_cast<std::size_t>(tgt[r])] -= g;
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
    require_rank(table, 2, "gather_rows");
    if (ids.empty()) throw ShapeError("gather_rows: empty id list");
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw std::out_of_range("gather_rows: id " + std::to_string(id) +
                                    " out of range [0," + std::to_string(vocab) + ")");
        }
    }
    Tensor out = Tensor::zeros({ids.size(), width}, table.precision());
    auto td = table.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        std::copy_n(td.data() + static_cast<std::size_t>(ids[r]) * width, width, od.data() + r * width);
    }
    if (wants_grad({&table})) {
        ImplPtr ti = table.impl();
        std::vector<int> idv(ids.begin(), ids.end());
        record(out, {ti}, [ti, idv = std::move(idv), width](const Impl& o) {
            auto& gt = gbuf(*ti);
            for (std::size_t r = 0; r < idv.size(); ++r) {
                double* dst = gt.data() + static_cast<std::size_t>(idv[r]) * width;
                const double* src = o.grad.data() + r * width;
                for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    require_rank(x, 2, "slice_rows");
    if (count == 0 || start + count > x.dim(0)) {
        throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") outside " + shape_str(x.shape()));
    }
    const std::size_t width = x.dim(1);
    Tensor out = Tensor::zeros({count, width}, x.precision());
    auto xd = x.data();
    std::copy_n(xd.data() + start * width, count * width, out.mutable_data().data());
    if (wants_grad({&x})) {
        ImplPtr xi = x.impl();
        record(out, {xi}, [xi, start, width](const Impl& o) {
            auto& gx = gbuf(*xi);
            for (std::size_t i = 0; i < o.grad.size(); ++i) gx[start * width + i] += o.grad[i];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    require_rank(x, 2, "slice_cols");
    if (count == 0 || start + count > x.dim(1)) {
        throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") outside " + shape_str(x.shape()));
    }
    const std::size_t rows = x.dim(0), width = x.dim(1);
    Tensor out = Tensor::zeros({rows, count}, x.precision());
    auto xd = x.data();
    auto od = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(xd.data() + r * width + start, count, od.data() + r * count);
    }
    if (wants_grad({&x})) {
        ImplPtr xi = x.impl();
        record(out, {xi}, [xi, rows, width, start, count](const Impl& o) {
            auto& gx = gbuf(*xi);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < count; ++c) {
                    gx[r * width + start + c] += o.grad[r * count + c];
                }
            }
        });
    }
    return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t width = 0;
    Precision precision = Precision::f32;
    bool grad = false;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.dim(0) != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        width += p.dim(1);
        if (p.precision() == Precision::f64) precision = Precision::f64;
        grad = grad || p.requires_grad();
    }
    Tensor out = Tensor::zeros({rows, width}, precision);
    auto od = out.mutable_data();
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t w = p.dim(1);
        auto pd = p.data();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(pd.data() + r * w, w, od.data() + r * width + off);
        }
        off += w;
    }
    finish(out);
    if (grad && Tape::current().recording()) {
        std::vector<ImplPtr> ins;
        for (const auto& p : parts) ins.push_back(p.impl());
        record(out, ins, [ins, offsets, rows, width](const Impl& o) {
            for (std::size_t i = 0; i < ins.size(); ++i) {
                if (!ins[i]->requires_grad) continue;
                auto& gp = gbuf(*ins[i]);
                const std::size_t w = ins[i]->shape[1];
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < w; ++c) {
                        gp[r * w + c] += o.grad[r * width + offsets[i] + c];
                    }
                }
            }
        });
    }
    return out;
}

Tensor row(const Tensor& x, std::size_t i) {
    require_rank(x, 2, "row");
    if (i >= x.dim(0)) throw ShapeError("row: index " + std::to_string(i) + " outside " + shape_str(x.shape()));
    return reshape(slice_rows(x, i, 1), {x.dim(1)});
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor out = Tensor::from(std::move(shape), x.to_vector(), x.precision());
    if (wants_grad({&x})) {
        ImplPtr xi = x.impl();
        record(out, {xi}, [xi](const Impl& o) {
            auto& gx = gbuf(*xi);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double s = 0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s, x.precision());
    if (wants_grad({&x})) {
        ImplPtr xi = x.impl();
        record(out, {xi}, [xi](const Impl& o) {
            auto& gx = gbuf(*xi);
            for (auto& g : gx) g += o.grad[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor add_scalars(std::span<const Tensor> scalars) {
    if (scalars.empty()) throw ShapeError("add_scalars: no inputs");
    double s = 0;
    Precision precision = Precision::f32;
    bool grad = false;
    for (const auto& t : scalars) {
        s += t.item();
        if (t.precision() == Precision::f64) precision = Precision::f64;
        grad = grad || t.requires_grad();
    }
    Tensor out = Tensor::scalar(s, precision);
    if (grad && Tape::current().recording()) {
        std::vector<ImplPtr> ins;
        for (const auto& t : scalars) ins.push_back(t.impl());
        record(out, ins, [ins](const Impl& o) {
            for (const auto& in : ins) {
                if (in->requires_grad) gbuf(*in)[0] += o.grad[0];
            }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<double> mask(x.numel());
    const double kept_scale = 1.0 / (1.0 - p);
    for (auto& m : mask) m = keep(rng) ? kept_scale : 0.0;
    return mul(x, Tensor::from(x.shape(), std::move(mask), Precision::f64).cast(x.precision()));
}

}  // namespace kpt::ops
