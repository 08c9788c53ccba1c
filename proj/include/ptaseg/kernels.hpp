/*
 * Copyright 2026 The ptaseg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "gemm.hpp"
#include "tensor.hpp"

// Forward and backward numeric kernels over NCHW tensors. No autodiff
// bookkeeping lives here; see autodiff.hpp for the taped wrappers.

namespace ptaseg::kernels {

struct ConvParams {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
};

/// Validates a conv2d call and returns the output shape. Weight layout is
/// (Cout, Cin/groups, k, k).
inline Shape conv2d_output_shape(const Shape& in, const Shape& weight, const ConvParams& p)
{
    auto fail = [&](const std::string& why) {
        throw ShapeError("conv2d: " + why + " (input " + in.str() + ", weight " + weight.str() + ")");
    };
    if (p.stride < 1)
        fail("stride must be >= 1");
    if (p.groups < 1 || in.c % p.groups != 0 || weight.n % p.groups != 0)
        fail("channels not divisible by groups=" + std::to_string(p.groups));
    if (weight.c * p.groups != in.c)
        fail("weight input channels do not match");
    if (weight.h != weight.w)
        fail("kernel must be square");
    if (in.h + 2 * p.padding < weight.h || in.w + 2 * p.padding < weight.w)
        fail("kernel larger than padded input");
    return Shape{in.n, weight.n, (in.h + 2 * p.padding - weight.h) / p.stride + 1,
                 (in.w + 2 * p.padding - weight.w) / p.stride + 1};
}

namespace detail {

inline constexpr std::size_t kColBudget = std::size_t(1) << 23;

inline bool is_pointwise(const Shape& w, const ConvParams& p)
{ return w.h == 1 && p.stride == 1 && p.padding == 0; }

inline bool is_depthwise(const Shape& in, const Shape& w, const ConvParams& p)
{ return p.groups == in.c && w.n == in.c && w.c == 1; }

// Samples per im2col chunk: enough columns to fill the GEMM tile, bounded
// by the column-buffer budget.
inline std::size_t chunk_samples(std::size_t n, std::size_t k_rows, std::size_t plane)
{
    std::size_t want = std::max<std::size_t>(1, (256 + plane - 1) / plane);
    std::size_t cap = std::max<std::size_t>(1, kColBudget / std::max<std::size_t>(1, k_rows * plane));
    return std::min({n, want, cap});
}

// col[(ci,ky,kx)][(n,oy,ox)] for channels [c0, c0+cg) of samples [n0, n0+nn)
template <typename T>
void im2col(const Tensor<T>& x, std::size_t n0, std::size_t nn, std::size_t c0, std::size_t cg,
            std::size_t k, const ConvParams& p, const Shape& out, T* col)
{
    const Shape& in = x.shape();
    const std::size_t plane = out.plane();
    const std::size_t cols = nn * plane;
    for (std::size_t ci = 0; ci < cg; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = col + ((ci * k + ky) * k + kx) * cols;
                for (std::size_t s = 0; s < nn; ++s) {
                    const T* src = x.data() + x.offset(n0 + s, c0 + ci, 0, 0);
                    T* dst = row + s * plane;
                    for (std::size_t oy = 0; oy < out.h; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                                  static_cast<std::ptrdiff_t>(p.padding);
                        T* drow = dst + oy * out.w;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) {
                            std::fill(drow, drow + out.w, T(0));
                            continue;
                        }
                        const T* srow = src + static_cast<std::size_t>(iy) * in.w;
                        for (std::size_t ox = 0; ox < out.w; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                                      static_cast<std::ptrdiff_t>(p.padding);
                            drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) ? T(0) : srow[ix];
                        }
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, std::size_t n0, std::size_t nn, std::size_t c0, std::size_t cg,
                std::size_t k, const ConvParams& p, const Shape& out, Tensor<T>& gx)
{
    const Shape& in = gx.shape();
    const std::size_t plane = out.plane();
    const std::size_t cols = nn * plane;
    for (std::size_t ci = 0; ci < cg; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((ci * k + ky) * k + kx) * cols;
                for (std::size_t s = 0; s < nn; ++s) {
                    T* dst = gx.data() + gx.offset(n0 + s, c0 + ci, 0, 0);
                    const T* src = row + s * plane;
                    for (std::size_t oy = 0; oy < out.h; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                                  static_cast<std::ptrdiff_t>(p.padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h))
                            continue;
                        T* drow = dst + static_cast<std::size_t>(iy) * in.w;
                        const T* srow = src + oy * out.w;
                        for (std::size_t ox = 0; ox < out.w; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                                      static_cast<std::ptrdiff_t>(p.padding);
                            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(in.w))
                                drow[ix] += srow[ox];
                        }
                    }
                }
            }
}

// Gathers channels [c0, c0+cg) of samples [n0, n0+nn) into a (cg x nn*plane) matrix.
template <typename T>
void gather_rows(const Tensor<T>& t, std::size_t n0, std::size_t nn, std::size_t c0, std::size_t cg, T* dst)
{
    const std::size_t plane = t.shape().plane();
    for (std::size_t c = 0; c < cg; ++c)
        for (std::size_t s = 0; s < nn; ++s)
            std::copy_n(t.data() + t.offset(n0 + s, c0 + c, 0, 0), plane, dst + (c * nn + s) * plane);
}

template <typename T>
void scatter_rows(const T* src, std::size_t n0, std::size_t nn, std::size_t c0, std::size_t cg, Tensor<T>& t)
{
    const std::size_t plane = t.shape().plane();
    for (std::size_t c = 0; c < cg; ++c)
        for (std::size_t s = 0; s < nn; ++s)
            std::copy_n(src + (c * nn + s) * plane, plane, t.data() + t.offset(n0 + s, c0 + c, 0, 0));
}

template <typename T>
Tensor<T> depthwise_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvParams& p, const Shape& out)
{
    const Shape& in = x.shape();
    const std::size_t k = w.shape().h;
    Tensor<T> y(out);
    for (std::size_t n = 0; n < in.n; ++n)
        for (std::size_t c = 0; c < in.c; ++c) {
            const T* src = x.data() + x.offset(n, c, 0, 0);
            T* dst = y.data() + y.offset(n, c, 0, 0);
            const T* wk = w.data() + c * k * k;
            // taps outermost: every output sees the taps in (ky, kx) order
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const T wv = wk[ky * k + kx];
                    for (std::size_t oy = 0; oy < out.h; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                                  static_cast<std::ptrdiff_t>(p.padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h))
                            continue;
                        const T* srow = src + static_cast<std::size_t>(iy) * in.w;
                        T* drow = dst + oy * out.w;
                        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p.padding);
                        // valid ox range: 0 <= ox*stride + off < in.w
                        std::size_t lo = 0;
                        while (lo < out.w && static_cast<std::ptrdiff_t>(lo * p.stride) + off < 0)
                            ++lo;
                        std::size_t hi = out.w;
                        while (hi > lo &&
                               static_cast<std::ptrdiff_t>((hi - 1) * p.stride) + off >= static_cast<std::ptrdiff_t>(in.w))
                            --hi;
                        if (p.stride == 1) {
                            const T* s0 = srow + off;
                            for (std::size_t ox = lo; ox < hi; ++ox)
                                drow[ox] += wv * s0[ox];
                        } else {
                            for (std::size_t ox = lo; ox < hi; ++ox)
                                drow[ox] += wv * srow[static_cast<std::ptrdiff_t>(ox * p.stride) + off];
                        }
                    }
                }
        }
    return y;
}

template <typename T>
void depthwise_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, const ConvParams& p,
                        Tensor<T>* gx, Tensor<T>* gw)
{
    const Shape& in = x.shape();
    const Shape& out = gy.shape();
    const std::size_t k = w.shape().h;
    for (std::size_t n = 0; n < in.n; ++n)
        for (std::size_t c = 0; c < in.c; ++c) {
            const T* src = x.data() + x.offset(n, c, 0, 0);
            const T* g = gy.data() + gy.offset(n, c, 0, 0);
            T* dsrc = gx ? gx->data() + gx->offset(n, c, 0, 0) : nullptr;
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const T wv = w[c * k * k + ky * k + kx];
                    T acc = T(0);
                    for (std::size_t oy = 0; oy < out.h; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                                  static_cast<std::ptrdiff_t>(p.padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h))
                            continue;
                        for (std::size_t ox = 0; ox < out.w; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                                      static_cast<std::ptrdiff_t>(p.padding);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w))
                                continue;
                            const std::size_t si = static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix);
                            const T gv = g[oy * out.w + ox];
                            acc += gv * src[si];
                            if (dsrc)
                                dsrc[si] += gv * wv;
                        }
                    }
                    if (gw)
                        (*gw)[c * k * k + ky * k + kx] += acc;
                }
        }
}

} // namespace detail

/// Direct-sum 2-D convolution (cross-correlation) with optional bias.
///
/// Each output value is accumulated over (ci, ky, kx) in ascending order, so
/// results are bitwise identical to a naive nested-loop reference.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, const ConvParams& p)
{
    const Shape out = conv2d_output_shape(x.shape(), w.shape(), p);
    if (bias && bias->numel() != out.c)
        throw ShapeError("conv2d: bias " + bias->shape().str() + " does not match " + std::to_string(out.c) + " outputs");

    Tensor<T> y;
    if (detail::is_depthwise(x.shape(), w.shape(), p)) {
        y = detail::depthwise_forward(x, w, p, out);
    } else {
        y = Tensor<T>(out);
        const std::size_t k = w.shape().h;
        const std::size_t cig = x.shape().c / p.groups;
        const std::size_t cog = out.c / p.groups;
        const std::size_t krows = cig * k * k;
        const std::size_t plane = out.plane();
        const std::size_t chunk = detail::chunk_samples(out.n, krows, plane);
        const bool direct = detail::is_pointwise(w.shape(), p) && chunk == 1;
        std::vector<T> col(direct ? 0 : krows * chunk * plane);
        std::vector<T> res(chunk == 1 ? 0 : cog * chunk * plane);

        for (std::size_t g = 0; g < p.groups; ++g) {
            gemm::MatView<T> wv{w.data() + g * cog * krows, static_cast<std::ptrdiff_t>(krows), 1};
            for (std::size_t n0 = 0; n0 < out.n; n0 += chunk) {
                const std::size_t nn = std::min(chunk, out.n - n0);
                const std::size_t cols = nn * plane;
                const T* bsrc;
                if (direct) {
                    bsrc = x.data() + x.offset(n0, g * cig, 0, 0);
                } else {
                    detail::im2col(x, n0, nn, g * cig, cig, k, p, out, col.data());
                    bsrc = col.data();
                }
                gemm::MatView<T> bv{bsrc, static_cast<std::ptrdiff_t>(cols), 1};
                if (chunk == 1) {
                    gemm::multiply<T>(cog, cols, krows, wv, bv, y.data() + y.offset(n0, g * cog, 0, 0), cols, false);
                } else {
                    gemm::multiply<T>(cog, cols, krows, wv, bv, res.data(), cols, false);
                    detail::scatter_rows(res.data(), n0, nn, g * cog, cog, y);
                }
            }
        }
    }

    if (bias) {
        for (std::size_t n = 0; n < out.n; ++n)
            for (std::size_t c = 0; c < out.c; ++c) {
                T* dst = y.data() + y.offset(n, c, 0, 0);
                const T b = (*bias)[c];
                for (std::size_t i = 0; i < out.plane(); ++i)
                    dst[i] += b;
            }
    }
    return y;
}

/// Accumulates conv2d gradients into whichever of gx/gw/gb are non-null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, const ConvParams& p,
                     Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb)
{
    const Shape& out = gy.shape();
    if (gb) {
        for (std::size_t c = 0; c < out.c; ++c) {
            T acc = T(0);
            for (std::size_t n = 0; n < out.n; ++n) {
                const T* g = gy.data() + gy.offset(n, c, 0, 0);
                for (std::size_t i = 0; i < out.plane(); ++i)
                    acc += g[i];
            }
            (*gb)[c] += acc;
        }
    }
    if (!gx && !gw)
        return;
    if (detail::is_depthwise(x.shape(), w.shape(), p)) {
        detail::depthwise_backward(x, w, gy, p, gx, gw);
        return;
    }

    const std::size_t k = w.shape().h;
    const std::size_t cig = x.shape().c / p.groups;
    const std::size_t cog = out.c / p.groups;
    const std::size_t krows = cig * k * k;
    const std::size_t plane = out.plane();
    const std::size_t chunk = detail::chunk_samples(out.n, std::max(krows, cog), plane);
    std::vector<T> col(krows * chunk * plane);
    std::vector<T> gmat(cog * chunk * plane);

    for (std::size_t g = 0; g < p.groups; ++g) {
        for (std::size_t n0 = 0; n0 < out.n; n0 += chunk) {
            const std::size_t nn = std::min(chunk, out.n - n0);
            const std::size_t cols = nn * plane;
            detail::gather_rows(gy, n0, nn, g * cog, cog, gmat.data());
            gemm::MatView<T> gv{gmat.data(), static_cast<std::ptrdiff_t>(cols), 1};
            if (gw) {
                detail::im2col(x, n0, nn, g * cig, cig, k, p, out, col.data());
                // gw (cog x krows) += gy (cog x cols) * col^T (cols x krows)
                gemm::MatView<T> colT{col.data(), 1, static_cast<std::ptrdiff_t>(cols)};
                gemm::multiply<T>(cog, krows, cols, gv, colT, gw->data() + g * cog * krows, krows, true);
            }
            if (gx) {
                // dcol (krows x cols) = w^T (krows x cog) * gy (cog x cols)
                gemm::MatView<T> wT{w.data() + g * cog * krows, 1, static_cast<std::ptrdiff_t>(krows)};
                gemm::multiply<T>(krows, cols, cog, wT, gv, col.data(), cols, false);
                detail::col2im_add(col.data(), n0, nn, g * cig, cig, k, p, out, *gx);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormCache {
    std::vector<T> mean;
    std::vector<T> invstd;
    bool training = false;
};

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum, T eps,
                            BatchNormCache<T>* cache = nullptr)
{
    const Shape& s = x.shape();
    if (!(eps > T(0)))
        throw std::invalid_argument("batchnorm2d: eps must be positive");
    const Tensor<T>* stats[] = {&gamma, &beta, &running_mean, &running_var};
    for (const Tensor<T>* v : stats)
        if (v->numel() != s.c)
            throw ShapeError("batchnorm2d: per-channel vector " + v->shape().str() + " does not match input " + s.str());

    const std::size_t plane = s.plane();
    const std::size_t count = s.n * plane;
    std::vector<T> mean(s.c), invstd(s.c);
    for (std::size_t c = 0; c < s.c; ++c) {
        T m, v;
        if (training) {
            T acc = T(0);
            for (std::size_t n = 0; n < s.n; ++n) {
                const T* src = x.data() + x.offset(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i)
                    acc += src[i];
            }
            m = acc / static_cast<T>(count);
            T sq = T(0);
            for (std::size_t n = 0; n < s.n; ++n) {
                const T* src = x.data() + x.offset(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                    const T d = src[i] - m;
                    sq += d * d;
                }
            }
            v = sq / static_cast<T>(count);
            const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : v;
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
        } else {
            m = running_mean[c];
            v = running_var[c];
        }
        mean[c] = m;
        invstd[c] = T(1) / std::sqrt(v + eps);
    }

    Tensor<T> y(s);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T scale = gamma[c] * invstd[c];
            const T shift = beta[c] - mean[c] * scale;
            const T* src = x.data() + x.offset(n, c, 0, 0);
            T* dst = y.data() + y.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i)
                dst[i] = src[i] * scale + shift;
        }
    if (cache) {
        cache->mean = std::move(mean);
        cache->invstd = std::move(invstd);
        cache->training = training;
    }
    return y;
}

template <typename T>
void batchnorm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const BatchNormCache<T>& cache,
                        const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta)
{
    const Shape& s = x.shape();
    const std::size_t plane = s.plane();
    const T count = static_cast<T>(s.n * plane);
    for (std::size_t c = 0; c < s.c; ++c) {
        const T m = cache.mean[c];
        const T is = cache.invstd[c];
        T sum_g = T(0), sum_gx = T(0);
        for (std::size_t n = 0; n < s.n; ++n) {
            const T* g = gy.data() + gy.offset(n, c, 0, 0);
            const T* src = x.data() + x.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                sum_g += g[i];
                sum_gx += g[i] * ((src[i] - m) * is);
            }
        }
        if (gbeta)
            (*gbeta)[c] += sum_g;
        if (ggamma)
            (*ggamma)[c] += sum_gx;
        if (!gx)
            continue;
        const T scale = gamma[c] * is;
        for (std::size_t n = 0; n < s.n; ++n) {
            const T* g = gy.data() + gy.offset(n, c, 0, 0);
            const T* src = x.data() + x.offset(n, c, 0, 0);
            T* dst = gx->data() + gx->offset(n, c, 0, 0);
            if (cache.training) {
                for (std::size_t i = 0; i < plane; ++i) {
                    const T xhat = (src[i] - m) * is;
                    dst[i] += scale / count * (count * g[i] - sum_g - xhat * sum_gx);
                }
            } else {
                for (std::size_t i = 0; i < plane; ++i)
                    dst[i] += scale * g[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and layout kernels

template <typename T>
Tensor<T> relu6_forward(const Tensor<T>& x)
{
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i)
        y[i] = std::min(std::max(x[i], T(0)), T(6));
    return y;
}

template <typename T>
void relu6_backward(const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>& gx)
{
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (x[i] > T(0) && x[i] < T(6))
            gx[i] += gy[i];
}

namespace detail {

// Half-pixel-center source coordinate for 2x upsampling, clamped at the border.
struct LerpTap {
    std::size_t i0, i1;
    double frac;
};

inline LerpTap lerp_tap(std::size_t out_index, std::size_t in_size)
{
    double src = (static_cast<double>(out_index) + 0.5) * 0.5 - 0.5;
    if (src < 0.0)
        src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in_size - 1)
        i0 = in_size - 1;
    const std::size_t i1 = std::min(i0 + 1, in_size - 1);
    return {i0, i1, src - static_cast<double>(i0)};
}

} // namespace detail

/// Bilinear 2x upsampling with half-pixel centers (align_corners = false).
template <typename T>
Tensor<T> upsample2x_forward(const Tensor<T>& x)
{
    const Shape& s = x.shape();
    const Shape o{s.n, s.c, 2 * s.h, 2 * s.w};
    Tensor<T> y(o);
    std::vector<detail::LerpTap> ty(o.h), tx(o.w);
    for (std::size_t i = 0; i < o.h; ++i)
        ty[i] = detail::lerp_tap(i, s.h);
    for (std::size_t i = 0; i < o.w; ++i)
        tx[i] = detail::lerp_tap(i, s.w);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* src = x.data() + x.offset(n, c, 0, 0);
            T* dst = y.data() + y.offset(n, c, 0, 0);
            for (std::size_t oy = 0; oy < o.h; ++oy) {
                const T fy = static_cast<T>(ty[oy].frac);
                const T* r0 = src + ty[oy].i0 * s.w;
                const T* r1 = src + ty[oy].i1 * s.w;
                for (std::size_t ox = 0; ox < o.w; ++ox) {
                    const T fx = static_cast<T>(tx[ox].frac);
                    const T top = (T(1) - fx) * r0[tx[ox].i0] + fx * r0[tx[ox].i1];
                    const T bot = (T(1) - fx) * r1[tx[ox].i0] + fx * r1[tx[ox].i1];
                    dst[oy * o.w + ox] = (T(1) - fy) * top + fy * bot;
                }
            }
        }
    return y;
}

template <typename T>
void upsample2x_backward(const Tensor<T>& gy, Tensor<T>& gx)
{
    const Shape& s = gx.shape();
    const Shape& o = gy.shape();
    std::vector<detail::LerpTap> ty(o.h), tx(o.w);
    for (std::size_t i = 0; i < o.h; ++i)
        ty[i] = detail::lerp_tap(i, s.h);
    for (std::size_t i = 0; i < o.w; ++i)
        tx[i] = detail::lerp_tap(i, s.w);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* g = gy.data() + gy.offset(n, c, 0, 0);
            T* dst = gx.data() + gx.offset(n, c, 0, 0);
            for (std::size_t oy = 0; oy < o.h; ++oy) {
                const T fy = static_cast<T>(ty[oy].frac);
                T* r0 = dst + ty[oy].i0 * s.w;
                T* r1 = dst + ty[oy].i1 * s.w;
                for (std::size_t ox = 0; ox < o.w; ++ox) {
                    const T fx = static_cast<T>(tx[ox].frac);
                    const T v = g[oy * o.w + ox];
                    r0[tx[ox].i0] += (T(1) - fy) * (T(1) - fx) * v;
                    r0[tx[ox].i1] += (T(1) - fy) * fx * v;
                    r1[tx[ox].i0] += fy * (T(1) - fx) * v;
                    r1[tx[ox].i1] += fy * fx * v;
                }
            }
        }
}

template <typename T>
Tensor<T> concat_channels_forward(const Tensor<T>& a, const Tensor<T>& b)
{
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        throw ShapeError("concat_channels: incompatible shapes " + sa.str() + " and " + sb.str());
    Tensor<T> y(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::size_t plane = sa.plane();
    for (std::size_t n = 0; n < sa.n; ++n) {
        std::copy_n(a.data() + a.offset(n, 0, 0, 0), sa.c * plane, y.data() + y.offset(n, 0, 0, 0));
        std::copy_n(b.data() + b.offset(n, 0, 0, 0), sb.c * plane, y.data() + y.offset(n, sa.c, 0, 0));
    }
    return y;
}

template <typename T>
void concat_channels_backward(const Tensor<T>& gy, Tensor<T>* ga, Tensor<T>* gb, std::size_t ca)
{
    const Shape& s = gy.shape();
    const std::size_t plane = s.plane();
    for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = gy.data() + gy.offset(n, 0, 0, 0);
        if (ga) {
            T* d = ga->data() + ga->offset(n, 0, 0, 0);
            for (std::size_t i = 0; i < ca * plane; ++i)
                d[i] += src[i];
        }
        if (gb) {
            T* d = gb->data() + gb->offset(n, 0, 0, 0);
            const T* s2 = src + ca * plane;
            for (std::size_t i = 0; i < (s.c - ca) * plane; ++i)
                d[i] += s2[i];
        }
    }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op)
{
    if (!(a == b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i)
        y[i] = a[i] + b[i];
    return y;
}

template <typename T>
Tensor<T> mean2_forward(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "mean2");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i)
        y[i] = (a[i] + b[i]) * T(0.5);
    return y;
}

/// Softmax across the channel axis at every (n, h, w).
template <typename T>
Tensor<T> softmax_channels_forward(const Tensor<T>& x)
{
    const Shape& s = x.shape();
    const std::size_t plane = s.plane();
    Tensor<T> y(s);
    std::vector<T> mx(plane), sum(plane);
    for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = x.data() + x.offset(n, 0, 0, 0);
        T* dst = y.data() + y.offset(n, 0, 0, 0);
        std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                mx[i] = std::max(mx[i], src[c * plane + i]);
        std::fill(sum.begin(), sum.end(), T(0));
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const T e = std::exp(src[c * plane + i] - mx[i]);
                dst[c * plane + i] = e;
                sum[i] += e;
            }
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                dst[c * plane + i] /= sum[i];
    }
    return y;
}

template <typename T>
void softmax_channels_backward(const Tensor<T>& y, const Tensor<T>& gy, Tensor<T>& gx)
{
    const Shape& s = y.shape();
    const std::size_t plane = s.plane();
    std::vector<T> dot(plane);
    for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t base = y.offset(n, 0, 0, 0);
        std::fill(dot.begin(), dot.end(), T(0));
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                dot[i] += gy[base + c * plane + i] * y[base + c * plane + i];
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t j = base + c * plane + i;
                gx[j] += y[j] * (gy[j] - dot[i]);
            }
    }
}

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x)
{
    const Shape& s = x.shape();
    Tensor<T> y(Shape{s.n, s.c, 1, 1});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* src = x.data() + x.offset(n, c, 0, 0);
            T acc = T(0);
            for (std::size_t i = 0; i < s.plane(); ++i)
                acc += src[i];
            y.at(n, c, 0, 0) = acc / static_cast<T>(s.plane());
        }
    return y;
}

template <typename T>
void global_avg_pool_backward(const Tensor<T>& gy, Tensor<T>& gx)
{
    const Shape& s = gx.shape();
    const T inv = T(1) / static_cast<T>(s.plane());
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const T g = gy.at(n, c, 0, 0) * inv;
            T* dst = gx.data() + gx.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < s.plane(); ++i)
                dst[i] += g;
        }
}

} // namespace ptaseg::kernels
