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
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptaseg {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NCHW extents of a dense 4-D tensor.
struct Shape {
    std::size_t n = 1, c = 1, h = 1, w = 1;

    constexpr std::size_t numel() const { return n * c * h * w; }
    constexpr std::size_t plane() const { return h * w; }

    friend constexpr bool operator==(const Shape&, const Shape&) = default;

    std::string str() const
    {
        std::ostringstream os;
        os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
        return os.str();
    }
};

/// Dense row-major (N,C,H,W) array. Value semantics; copying copies the data.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
      : m_shape(validated(shape)), m_data(shape.numel(), fill)
    { }

    Tensor(Shape shape, std::vector<T> data)
      : m_shape(validated(shape)), m_data(std::move(data))
    {
        if (m_data.size() != m_shape.numel())
            throw ShapeError("tensor data length " + std::to_string(m_data.size()) +
                             " does not match shape " + m_shape.str());
    }

    static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

    const Shape& shape() const { return m_shape; }
    std::size_t numel() const { return m_data.size(); }
    bool empty() const { return m_data.empty(); }

    T* data() { return m_data.data(); }
    const T* data() const { return m_data.data(); }
    std::span<T> span() { return m_data; }
    std::span<const T> span() const { return m_data; }
    std::vector<T>& vec() { return m_data; }
    const std::vector<T>& vec() const { return m_data; }

    T& operator[](std::size_t i) { return m_data[i]; }
    const T& operator[](std::size_t i) const { return m_data[i]; }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const
    { return ((n * m_shape.c + c) * m_shape.h + h) * m_shape.w + w; }

    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
    { return m_data[offset(n, c, h, w)]; }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const
    { return m_data[offset(n, c, h, w)]; }

    T item() const
    {
        if (numel() != 1)
            throw ShapeError("item() on non-scalar tensor " + m_shape.str());
        return m_data[0];
    }

    void fill(T v) { std::fill(m_data.begin(), m_data.end(), v); }

    bool all_finite() const
    {
        return std::all_of(m_data.begin(), m_data.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const
    {
        std::vector<U> out(m_data.begin(), m_data.end());
        return Tensor<U>(m_shape, std::move(out));
    }

    Tensor reshaped(Shape s) const
    {
        if (s.numel() != numel())
            throw ShapeError("cannot reshape " + m_shape.str() + " to " + s.str());
        return Tensor(s, m_data);
    }

    friend bool operator==(const Tensor& a, const Tensor& b)
    { return a.m_shape == b.m_shape && a.m_data == b.m_data; }

private:
    static Shape validated(Shape s)
    {
        if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0)
            throw ShapeError("tensor extents must be positive, got " + s.str());
        return s;
    }

    Shape m_shape{};
    std::vector<T> m_data;
};

/// Throws NumericError when a forward result holds NaN or Inf.
template <typename T>
void require_finite(const Tensor<T>& t, const char* op)
{
    if (!t.all_finite())
        throw NumericError(std::string("non-finite value produced by ") + op);
}

/// FNV-1a over the raw bytes; used for parameter checksums.
inline std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t h = 1469598103934665603ULL)
{
    auto p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
std::uint64_t checksum(const Tensor<T>& t, std::uint64_t h = 1469598103934665603ULL)
{
    return fnv1a(t.data(), t.numel() * sizeof(T), h);
}

} // namespace ptaseg
