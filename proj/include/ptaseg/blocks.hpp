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

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

#include "autodiff.hpp"
#include "pta_config.hpp"
#include "random.hpp"

namespace ptaseg {

template <typename T>
using ParamVisitor = std::function<void(Var<T>&)>;
template <typename T>
using BufferVisitor = std::function<void(const std::string&, Tensor<T>&)>;

/// Conv weight drawn from N(0, 2 / fan_out), fan_out = Cout * k * k.
template <typename T>
Var<T> init_conv_weight(Rng& rng, std::size_t cout, std::size_t cin_per_group, std::size_t k, std::string name)
{
    Tensor<T> w(Shape{cout, cin_per_group, k, k});
    const double stddev = std::sqrt(2.0 / static_cast<double>(cout * k * k));
    for (T& v : w.span())
        v = static_cast<T>(rng.normal() * stddev);
    return Var<T>(std::move(w), true, std::move(name));
}

template <typename T>
class BatchNorm {
public:
    BatchNorm() = default;

    BatchNorm(std::size_t channels, const std::string& prefix)
      : m_gamma(Tensor<T>(Shape{1, channels, 1, 1}, T(1)), true, prefix + ".gamma"),
        m_beta(Tensor<T>(Shape{1, channels, 1, 1}, T(0)), true, prefix + ".beta"),
        m_running_mean(Shape{1, channels, 1, 1}, T(0)),
        m_running_var(Shape{1, channels, 1, 1}, T(1)),
        m_prefix(prefix)
    { }

    Var<T> forward(const Var<T>& x, bool training)
    { return batchnorm2d(x, m_gamma, m_beta, m_running_mean, m_running_var, training, m_momentum, m_eps); }

    void visit_parameters(const ParamVisitor<T>& fn)
    {
        fn(m_gamma);
        fn(m_beta);
    }

    void visit_buffers(const BufferVisitor<T>& fn)
    {
        fn(m_prefix + ".running_mean", m_running_mean);
        fn(m_prefix + ".running_var", m_running_var);
    }

    Var<T>& gamma() { return m_gamma; }
    Var<T>& beta() { return m_beta; }
    Tensor<T>& running_mean() { return m_running_mean; }
    Tensor<T>& running_var() { return m_running_var; }
    std::size_t channels() const { return m_running_mean.numel(); }

    /// Deep copy with freshly allocated parameter storage.
    BatchNorm detached() const
    {
        BatchNorm b = *this;
        b.m_gamma = Var<T>(m_gamma.value(), true, m_gamma.name());
        b.m_beta = Var<T>(m_beta.value(), true, m_beta.name());
        return b;
    }

private:
    Var<T> m_gamma, m_beta;
    Tensor<T> m_running_mean, m_running_var;
    std::string m_prefix;
    T m_momentum = T(0.1);
    T m_eps = T(1e-5);
};

/// Bias-free convolution followed by batch norm and optionally ReLU6.
template <typename T>
class ConvBn {
public:
    ConvBn() = default;

    ConvBn(Rng& rng, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
           std::size_t stride, std::size_t groups, bool activation)
      : m_weight(init_conv_weight<T>(rng, cout, cin / groups, k, prefix + ".conv.weight")),
        m_bn(cout, prefix + ".bn"),
        m_params{stride, k / 2, groups},
        m_activation(activation)
    {
        if (cin % groups != 0 || cout % groups != 0)
            throw std::invalid_argument(prefix + ": channels not divisible by groups");
    }

    Var<T> forward(const Var<T>& x, bool training)
    {
        Var<T> y = m_bn.forward(conv2d(x, m_weight, m_params), training);
        return m_activation ? relu6(y) : y;
    }

    void visit_parameters(const ParamVisitor<T>& fn)
    {
        fn(m_weight);
        m_bn.visit_parameters(fn);
    }

    void visit_buffers(const BufferVisitor<T>& fn) { m_bn.visit_buffers(fn); }

    Var<T>& weight() { return m_weight; }
    BatchNorm<T>& bn() { return m_bn; }
    std::size_t out_channels() const { return m_weight.shape().n; }

    ConvBn detached() const
    {
        ConvBn c = *this;
        c.m_weight = Var<T>(m_weight.value(), true, m_weight.name());
        c.m_bn = m_bn.detached();
        return c;
    }

private:
    Var<T> m_weight;
    BatchNorm<T> m_bn;
    kernels::ConvParams m_params;
    bool m_activation = true;
};

/// MobileNetV2 inverted residual: 1x1 expand, 3x3 depthwise, 1x1 linear
/// projection, with an identity skip when the block preserves shape.
template <typename T>
class InvertedResidual {
public:
    InvertedResidual() = default;

    InvertedResidual(Rng& rng, const std::string& prefix, std::size_t in_channels, std::size_t out_channels,
                     std::size_t stride, std::size_t expansion)
      : m_in(in_channels), m_out(out_channels), m_stride(stride), m_expansion(expansion)
    {
        if (stride != 1 && stride != 2)
            throw std::invalid_argument(prefix + ": inverted residual stride must be 1 or 2");
        if (expansion < 1)
            throw std::invalid_argument(prefix + ": expansion must be positive");
        const std::size_t hidden = in_channels * expansion;
        if (expansion != 1)
            m_expand = ConvBn<T>(rng, prefix + ".expand", in_channels, hidden, 1, 1, 1, true);
        m_depthwise = ConvBn<T>(rng, prefix + ".depthwise", hidden, hidden, 3, stride, hidden, true);
        m_project = ConvBn<T>(rng, prefix + ".project", hidden, out_channels, 1, 1, 1, false);
    }

    std::size_t in_channels() const { return m_in; }
    std::size_t out_channels() const { return m_out; }
    std::size_t stride() const { return m_stride; }
    std::size_t expansion() const { return m_expansion; }
    bool has_skip() const { return m_stride == 1 && m_in == m_out; }
    bool has_expand() const { return m_expand.has_value(); }

    Var<T> forward(const Var<T>& x, bool training)
    {
        if (x.shape().c != m_in)
            throw ShapeError("inverted residual expects " + std::to_string(m_in) + " input channels, got " +
                             x.shape().str());
        Var<T> h = m_expand ? m_expand->forward(x, training) : x;
        h = m_depthwise.forward(h, training);
        h = m_project.forward(h, training);
        return has_skip() ? add(x, h) : h;
    }

    void visit_parameters(const ParamVisitor<T>& fn)
    {
        if (m_expand)
            m_expand->visit_parameters(fn);
        m_depthwise.visit_parameters(fn);
        m_project.visit_parameters(fn);
    }

    void visit_buffers(const BufferVisitor<T>& fn)
    {
        if (m_expand)
            m_expand->visit_buffers(fn);
        m_depthwise.visit_buffers(fn);
        m_project.visit_buffers(fn);
    }

    std::size_t parameter_count()
    {
        std::size_t n = 0;
        visit_parameters([&](Var<T>& p) { n += p.numel(); });
        return n;
    }

    std::optional<ConvBn<T>>& expand() { return m_expand; }
    ConvBn<T>& depthwise() { return m_depthwise; }
    ConvBn<T>& project() { return m_project; }

    InvertedResidual detached() const
    {
        InvertedResidual b = *this;
        if (m_expand)
            b.m_expand = m_expand->detached();
        b.m_depthwise = m_depthwise.detached();
        b.m_project = m_project.detached();
        return b;
    }

private:
    std::size_t m_in = 0, m_out = 0, m_stride = 1, m_expansion = 1;
    std::optional<ConvBn<T>> m_expand;
    ConvBn<T> m_depthwise;
    ConvBn<T> m_project;
};

/// Post-train adaptive block: a Light branch (one inverted residual) and a
/// Heavy branch (two in sequence) over the same channel count at stride 1.
/// The active branch is chosen at runtime; Both averages the two outputs.
template <typename T>
class PtaBlock {
public:
    PtaBlock() = default;

    PtaBlock(Rng& rng, const std::string& prefix, std::size_t channels, std::size_t expansion = 6)
      : m_heavy{InvertedResidual<T>(rng, prefix + ".heavy.0", channels, channels, 1, expansion),
                InvertedResidual<T>(rng, prefix + ".heavy.1", channels, channels, 1, expansion)},
        m_light(rng, prefix + ".light", channels, channels, 1, expansion),
        m_prefix(prefix)
    { }

    PtaBlock(InvertedResidual<T> light, InvertedResidual<T> heavy0, InvertedResidual<T> heavy1,
             std::string prefix = {})
      : m_heavy{std::move(heavy0), std::move(heavy1)}, m_light(std::move(light)), m_prefix(std::move(prefix))
    {
        if (m_light.in_channels() != m_heavy[0].in_channels() || m_light.out_channels() != m_heavy[1].out_channels() ||
            m_heavy[0].out_channels() != m_heavy[1].in_channels())
            throw ShapeError("PTA block branches disagree on channel counts");
        for (const auto* b : {&m_light, &m_heavy[0], &m_heavy[1]})
            if (b->stride() != 1)
                throw ShapeError("PTA block branches must preserve spatial size (stride 1)");
    }

    Branch active() const { return m_active; }
    void set_active(Branch b) { m_active = b; }

    std::size_t channels() const { return m_light.in_channels(); }
    const std::string& prefix() const { return m_prefix; }

    Var<T> forward(const Var<T>& x, bool training)
    {
        switch (m_active) {
        case Branch::Light:
            return m_light.forward(x, training);
        case Branch::Heavy:
            return heavy_forward(x, training);
        case Branch::Both: {
            Var<T> l = m_light.forward(x, training);
            return mean2(l, heavy_forward(x, training));
        }
        }
        throw std::logic_error("invalid PTA branch");
    }

    InvertedResidual<T>& light() { return m_light; }
    std::array<InvertedResidual<T>, 2>& heavy() { return m_heavy; }
    const std::array<InvertedResidual<T>, 2>& heavy() const { return m_heavy; }

    void visit_parameters(const ParamVisitor<T>& fn)
    {
        m_heavy[0].visit_parameters(fn);
        m_heavy[1].visit_parameters(fn);
        m_light.visit_parameters(fn);
    }

    void visit_buffers(const BufferVisitor<T>& fn)
    {
        m_heavy[0].visit_buffers(fn);
        m_heavy[1].visit_buffers(fn);
        m_light.visit_buffers(fn);
    }

private:
    Var<T> heavy_forward(const Var<T>& x, bool training)
    { return m_heavy[1].forward(m_heavy[0].forward(x, training), training); }

    std::array<InvertedResidual<T>, 2> m_heavy;
    InvertedResidual<T> m_light;
    std::string m_prefix;
    Branch m_active = Branch::Heavy;
};

} // namespace ptaseg
