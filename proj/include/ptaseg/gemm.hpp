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
#include <cstddef>
#include <cstring>
#include <vector>

// Blocked matrix product used by the convolution kernels.
//
// Every output element is accumulated as a strictly sequential sum over k in
// ascending order starting from zero (or from the existing C value). Blocking
// over k stores and reloads partial sums exactly, so the result is bitwise
// identical to the textbook triple loop. Build with -ffp-contract=off to keep
// it that way.

namespace ptaseg::gemm {

template <typename T>
struct MicroTile;

template <>
struct MicroTile<float> {
    typedef float Vec __attribute__((vector_size(64)));
    static constexpr std::size_t lanes = 16;
};

template <>
struct MicroTile<double> {
    typedef double Vec __attribute__((vector_size(64)));
    static constexpr std::size_t lanes = 8;
};

template <typename T>
inline constexpr std::size_t kRows = 8;
template <typename T>
inline constexpr std::size_t kCols = 2 * MicroTile<T>::lanes;
inline constexpr std::size_t kDepth = 256;
inline constexpr std::size_t kPanels = 8;

/// Strided read-only view of a matrix: element (r, c) at data[r*rs + c*cs].
template <typename T>
struct MatView {
    const T* data;
    std::ptrdiff_t rs;
    std::ptrdiff_t cs;

    const T& operator()(std::size_t r, std::size_t c) const
    { return data[static_cast<std::ptrdiff_t>(r) * rs + static_cast<std::ptrdiff_t>(c) * cs]; }
};

namespace detail {

// tile[MR][NR] += sum_k a[k][MR] * b[k][NR], k sequential
template <typename T>
inline void micro_kernel(std::size_t kc, const T* a, const T* b, T* tile)
{
    using V = typename MicroTile<T>::Vec;
    constexpr std::size_t L = MicroTile<T>::lanes;
    constexpr std::size_t MR = kRows<T>;

    V acc[MR][2];
    for (std::size_t r = 0; r < MR; ++r) {
        std::memcpy(&acc[r][0], tile + r * 2 * L, sizeof(V));
        std::memcpy(&acc[r][1], tile + r * 2 * L + L, sizeof(V));
    }
    for (std::size_t k = 0; k < kc; ++k) {
        V b0, b1;
        std::memcpy(&b0, b + k * 2 * L, sizeof(V));
        std::memcpy(&b1, b + k * 2 * L + L, sizeof(V));
        const T* ak = a + k * MR;
#pragma GCC unroll 8
        for (std::size_t r = 0; r < MR; ++r) {
            const T s = ak[r];
            acc[r][0] += b0 * s;
            acc[r][1] += b1 * s;
        }
    }
    for (std::size_t r = 0; r < MR; ++r) {
        std::memcpy(tile + r * 2 * L, &acc[r][0], sizeof(V));
        std::memcpy(tile + r * 2 * L + L, &acc[r][1], sizeof(V));
    }
}

} // namespace detail

/// C(i,j) = [C(i,j) if accumulate] + sum_k A(i,k) * B(k,j) for an M x N result
/// with row stride ldc.
template <typename T>
void multiply(std::size_t M, std::size_t N, std::size_t K, MatView<T> A, MatView<T> B, T* C,
              std::size_t ldc, bool accumulate)
{
    constexpr std::size_t MR = kRows<T>;
    constexpr std::size_t NR = kCols<T>;
    if (M == 0 || N == 0)
        return;
    if (K == 0) {
        if (!accumulate)
            for (std::size_t i = 0; i < M; ++i)
                std::fill(C + i * ldc, C + i * ldc + N, T(0));
        return;
    }

    const std::size_t m_tiles = (M + MR - 1) / MR;
    std::vector<T> apack(m_tiles * MR * kDepth);
    std::vector<T> bpack(kPanels * kDepth * NR);
    alignas(64) T tile[MR * NR];

    for (std::size_t k0 = 0; k0 < K; k0 += kDepth) {
        const std::size_t kc = std::min(kDepth, K - k0);
        const bool first = k0 == 0 && !accumulate;

        for (std::size_t t = 0; t < m_tiles; ++t) {
            T* dst = apack.data() + t * MR * kc;
            for (std::size_t k = 0; k < kc; ++k)
                for (std::size_t r = 0; r < MR; ++r) {
                    const std::size_t i = t * MR + r;
                    dst[k * MR + r] = i < M ? A(i, k0 + k) : T(0);
                }
        }

        for (std::size_t jc = 0; jc < N; jc += kPanels * NR) {
            const std::size_t panels = (std::min(kPanels * NR, N - jc) + NR - 1) / NR;
            for (std::size_t k = 0; k < kc; ++k) {
                for (std::size_t p = 0; p < panels; ++p) {
                    T* dst = bpack.data() + (p * kc + k) * NR;
                    const std::size_t jp = jc + p * NR;
                    const std::size_t nc = std::min(NR, N - jp);
                    std::size_t j = 0;
                    if (B.cs == 1) {
                        std::memcpy(dst, &B(k0 + k, jp), nc * sizeof(T));
                        j = nc;
                    } else {
                        for (; j < nc; ++j)
                            dst[j] = B(k0 + k, jp + j);
                    }
                    for (; j < NR; ++j)
                        dst[j] = T(0);
                }
            }

            for (std::size_t p = 0; p < panels; ++p) {
                const std::size_t j0 = jc + p * NR;
                const std::size_t nc = std::min(NR, N - j0);
                const T* bp = bpack.data() + p * kc * NR;
                for (std::size_t t = 0; t < m_tiles; ++t) {
                    const std::size_t i0 = t * MR;
                    const std::size_t mc = std::min(MR, M - i0);
                    for (std::size_t r = 0; r < MR; ++r) {
                        T* trow = tile + r * NR;
                        if (first || r >= mc) {
                            std::fill(trow, trow + NR, T(0));
                        } else {
                            std::memcpy(trow, C + (i0 + r) * ldc + j0, nc * sizeof(T));
                            std::fill(trow + nc, trow + NR, T(0));
                        }
                    }
                    detail::micro_kernel<T>(kc, apack.data() + t * MR * kc, bp, tile);
                    for (std::size_t r = 0; r < mc; ++r)
                        std::memcpy(C + (i0 + r) * ldc + j0, tile + r * NR, nc * sizeof(T));
                }
            }
        }
    }
}

} // namespace ptaseg::gemm
