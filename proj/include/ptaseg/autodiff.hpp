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

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kernels.hpp"
#include "tensor.hpp"

namespace ptaseg {

// ---------------------------------------------------------------------------
// Variables

template <typename T>
struct VarNode {
    Tensor<T> value;
    Tensor<T> grad; // empty until something accumulates into it
    bool requires_grad = false;
    std::string name;
};

/// Shared handle to a value that may participate in a gradient tape.
/// Copies alias the same node; parameters are long-lived Vars with
/// requires_grad set.
template <typename T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> value, bool requires_grad = false, std::string name = {})
      : m_node(std::make_shared<VarNode<T>>())
    {
        m_node->value = std::move(value);
        m_node->requires_grad = requires_grad;
        m_node->name = std::move(name);
    }

    explicit operator bool() const { return static_cast<bool>(m_node); }

    const Tensor<T>& value() const { return m_node->value; }
    Tensor<T>& mutable_value() { return m_node->value; }
    const Shape& shape() const { return m_node->value.shape(); }
    std::size_t numel() const { return m_node->value.numel(); }
    bool requires_grad() const { return m_node->requires_grad; }
    const std::string& name() const { return m_node->name; }

    bool has_grad() const { return !m_node->grad.empty(); }

    /// Accumulated gradient, or zeros of the value's shape if none arrived.
    Tensor<T> grad() const
    { return has_grad() ? m_node->grad : Tensor<T>(m_node->value.shape()); }

    /// Gradient buffer, allocated as zeros on first use.
    Tensor<T>& grad_buffer() const
    {
        if (m_node->grad.empty())
            m_node->grad = Tensor<T>(m_node->value.shape());
        return m_node->grad;
    }

    void zero_grad() const { m_node->grad = Tensor<T>(); }

    VarNode<T>* node() const { return m_node.get(); }
    const std::shared_ptr<VarNode<T>>& shared() const { return m_node; }

private:
    std::shared_ptr<VarNode<T>> m_node;
};

// ---------------------------------------------------------------------------
// Execution observer

enum class OpKind { Conv, BatchNorm, Relu6, Upsample, Concat, Add, Mean2, Softmax, Pool, Reduce, Dice };

inline const char* op_name(OpKind k)
{
    switch (k) {
    case OpKind::Conv: return "conv2d";
    case OpKind::BatchNorm: return "batchnorm2d";
    case OpKind::Relu6: return "relu6";
    case OpKind::Upsample: return "upsample2x";
    case OpKind::Concat: return "concat";
    case OpKind::Add: return "add";
    case OpKind::Mean2: return "mean2";
    case OpKind::Softmax: return "softmax";
    case OpKind::Pool: return "avgpool";
    case OpKind::Reduce: return "reduce";
    case OpKind::Dice: return "dice";
    }
    return "?";
}

struct ParamUse {
    const void* id;
    std::string_view name;
    std::size_t numel;
};

struct OpEvent {
    OpKind kind;
    Shape input;
    Shape output;
    std::uint64_t mult_adds = 0;   // multiply-accumulates (convolutions)
    std::uint64_t elementwise = 0; // elementwise arithmetic (add, mean2)
    std::vector<ParamUse> params{};
};

/// Receives one event per forward operator executed on this thread while
/// installed. In shape-only mode operators skip arithmetic and return zeros
/// of the right shape.
class ExecutionObserver {
public:
    explicit ExecutionObserver(bool shape_only = false) : m_shape_only(shape_only) { }
    virtual ~ExecutionObserver() = default;

    bool shape_only() const { return m_shape_only; }
    virtual void on_op(const OpEvent& event) = 0;

private:
    bool m_shape_only;
};

namespace detail {
inline ExecutionObserver*& current_observer()
{
    thread_local ExecutionObserver* obs = nullptr;
    return obs;
}
} // namespace detail

class ObserverScope {
public:
    explicit ObserverScope(ExecutionObserver& obs) : m_prev(detail::current_observer())
    { detail::current_observer() = &obs; }
    ~ObserverScope() { detail::current_observer() = m_prev; }
    ObserverScope(const ObserverScope&) = delete;
    ObserverScope& operator=(const ObserverScope&) = delete;

private:
    ExecutionObserver* m_prev;
};

// ---------------------------------------------------------------------------
// Gradient tape

/// Ordered record of differentiable operations executed while the tape is
/// active. backward() replays them in exact reverse order. A tape supports a
/// single backward pass; call reset() before recording again.
template <typename T>
class GradTape {
public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    /// RAII activation: operators executed on this thread inside the scope
    /// are recorded.
    class Scope {
    public:
        explicit Scope(GradTape& tape) : m_prev(active())
        {
            if (tape.m_consumed)
                throw std::logic_error("GradTape: recording onto a consumed tape; call reset() first");
            active() = &tape;
        }
        ~Scope() { active() = m_prev; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        GradTape* m_prev;
    };

    static GradTape*& active()
    {
        thread_local GradTape* tape = nullptr;
        return tape;
    }

    void record(std::function<void()> backward_fn) { m_ops.push_back(std::move(backward_fn)); }

    std::size_t size() const { return m_ops.size(); }
    bool consumed() const { return m_consumed; }

    void backward(Var<T>& loss)
    {
        if (loss.numel() != 1)
            throw ShapeError("backward: loss must be a scalar, got " + loss.shape().str());
        if (m_consumed)
            throw std::logic_error("backward: tape already consumed; double backward is unsupported");
        m_consumed = true;
        if (!loss.requires_grad())
            return;
        loss.grad_buffer()[0] += T(1);
        for (auto it = m_ops.rbegin(); it != m_ops.rend(); ++it)
            (*it)();
        m_ops.clear();
    }

    void reset()
    {
        m_ops.clear();
        m_consumed = false;
    }

private:
    std::vector<std::function<void()>> m_ops;
    bool m_consumed = false;
};

// ---------------------------------------------------------------------------
// Differentiable operators

namespace detail {

template <typename T>
GradTape<T>* tape_for(std::initializer_list<const Var<T>*> inputs)
{
    GradTape<T>* tape = GradTape<T>::active();
    if (!tape)
        return nullptr;
    for (const Var<T>* v : inputs)
        if (v && *v && v->requires_grad())
            return tape;
    return nullptr;
}

template <typename T>
ParamUse param_use(const Var<T>& v)
{ return ParamUse{v.node(), v.name(), v.numel()}; }

inline bool notify(OpEvent event)
{
    ExecutionObserver* obs = current_observer();
    if (!obs)
        return false;
    obs->on_op(event);
    return obs->shape_only();
}

template <typename T>
Var<T> make_output(Tensor<T> value, GradTape<T>* tape)
{ return Var<T>(std::move(value), tape != nullptr); }

// Returns the grad buffer of v when it participates in differentiation.
template <typename T>
Tensor<T>* grad_target(const Var<T>& v)
{ return v.requires_grad() ? &v.grad_buffer() : nullptr; }

} // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, kernels::ConvParams p)
{
    const Shape out = kernels::conv2d_output_shape(x.shape(), weight.shape(), p);
    const Shape& ws = weight.shape();
    OpEvent ev{OpKind::Conv, x.shape(), out};
    ev.mult_adds = static_cast<std::uint64_t>(out.numel()) * ws.c * ws.h * ws.w;
    ev.params.push_back(detail::param_use(weight));
    if (bias)
        ev.params.push_back(detail::param_use(*bias));
    if (detail::notify(std::move(ev)))
        return Var<T>(Tensor<T>(out));

    GradTape<T>* tape = detail::tape_for<T>({&x, &weight, bias});
    Tensor<T> y = kernels::conv2d_forward(x.value(), weight.value(), bias ? &bias->value() : nullptr, p);
    require_finite(y, "conv2d");
    Var<T> result = detail::make_output(std::move(y), tape);
    if (tape) {
        Var<T> b = bias ? *bias : Var<T>();
        tape->record([x, weight, b, result, p]() {
            if (!result.has_grad())
                return;
            kernels::conv2d_backward(x.value(), weight.value(), result.grad_buffer(), p, detail::grad_target(x),
                                     detail::grad_target(weight), b ? detail::grad_target(b) : nullptr);
        });
    }
    return result;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, kernels::ConvParams p)
{ return conv2d<T>(x, weight, nullptr, p); }

template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                   Tensor<T>& running_var, bool training, T momentum, T eps)
{
    OpEvent ev{OpKind::BatchNorm, x.shape(), x.shape()};
    ev.params = {detail::param_use(gamma), detail::param_use(beta)};
    if (detail::notify(std::move(ev)))
        return Var<T>(Tensor<T>(x.shape()));

    GradTape<T>* tape = detail::tape_for<T>({&x, &gamma, &beta});
    auto cache = std::make_shared<kernels::BatchNormCache<T>>();
    Tensor<T> y = kernels::batchnorm_forward(x.value(), gamma.value(), beta.value(), running_mean, running_var,
                                             training, momentum, eps, tape ? cache.get() : nullptr);
    require_finite(y, "batchnorm2d");
    Var<T> result = detail::make_output(std::move(y), tape);
    if (tape) {
        tape->record([x, gamma, beta, result, cache]() {
            if (!result.has_grad())
                return;
            kernels::batchnorm_backward(x.value(), gamma.value(), *cache, result.grad_buffer(),
                                        detail::grad_target(x), detail::grad_target(gamma),
                                        detail::grad_target(beta));
        });
    }
    return result;
}

template <typename T>
Var<T> relu6(const Var<T>& x)
{
    if (detail::notify(OpEvent{OpKind::Relu6, x.shape(), x.shape()}))
        return Var<T>(Tensor<T>(x.shape()));
    GradTape<T>* tape = detail::tape_for<T>({&x});
    Var<T> result = detail::make_output(kernels::relu6_forward(x.value()), tape);
    if (tape) {
        tape->record([x, result]() {
            if (result.has_grad() && x.requires_grad())
                kernels::relu6_backward(x.value(), result.grad_buffer(), x.grad_buffer());
        });
    }
    return result;
}

template <typename T>
Var<T> upsample_bilinear2x(const Var<T>& x)
{
    const Shape& s = x.shape();
    const Shape out{s.n, s.c, 2 * s.h, 2 * s.w};
    if (detail::notify(OpEvent{OpKind::Upsample, s, out}))
        return Var<T>(Tensor<T>(out));
    GradTape<T>* tape = detail::tape_for<T>({&x});
    Var<T> result = detail::make_output(kernels::upsample2x_forward(x.value()), tape);
    if (tape) {
        tape->record([x, result]() {
            if (result.has_grad() && x.requires_grad())
                kernels::upsample2x_backward(result.grad_buffer(), x.grad_buffer());
        });
    }
    return result;
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b)
{
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        throw ShapeError("concat_channels: incompatible shapes " + sa.str() + " and " + sb.str());
    const Shape out{sa.n, sa.c + sb.c, sa.h, sa.w};
    if (detail::notify(OpEvent{OpKind::Concat, sa, out}))
        return Var<T>(Tensor<T>(out));
    GradTape<T>* tape = detail::tape_for<T>({&a, &b});
    Var<T> result = detail::make_output(kernels::concat_channels_forward(a.value(), b.value()), tape);
    if (tape) {
        const std::size_t ca = sa.c;
        tape->record([a, b, result, ca]() {
            if (result.has_grad())
                kernels::concat_channels_backward(result.grad_buffer(), detail::grad_target(a),
                                                  detail::grad_target(b), ca);
        });
    }
    return result;
}

namespace detail {

template <typename T>
Var<T> binary_elementwise(const Var<T>& a, const Var<T>& b, OpKind kind, T scale)
{
    kernels::require_same_shape(a.shape(), b.shape(), op_name(kind));
    OpEvent ev{kind, a.shape(), a.shape()};
    ev.elementwise = a.numel();
    if (notify(std::move(ev)))
        return Var<T>(Tensor<T>(a.shape()));
    GradTape<T>* tape = tape_for<T>({&a, &b});
    Tensor<T> y = kind == OpKind::Add ? kernels::add_forward(a.value(), b.value())
                                      : kernels::mean2_forward(a.value(), b.value());
    require_finite(y, op_name(kind));
    Var<T> result = make_output(std::move(y), tape);
    if (tape) {
        tape->record([a, b, result, scale]() {
            if (!result.has_grad())
                return;
            const Tensor<T>& g = result.grad_buffer();
            for (const Var<T>* v : {&a, &b}) {
                if (!v->requires_grad())
                    continue;
                Tensor<T>& dst = v->grad_buffer();
                for (std::size_t i = 0; i < dst.numel(); ++i)
                    dst[i] += g[i] * scale;
            }
        });
    }
    return result;
}

} // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{ return detail::binary_elementwise(a, b, OpKind::Add, T(1)); }

/// Elementwise arithmetic mean (a + b) / 2.
template <typename T>
Var<T> mean2(const Var<T>& a, const Var<T>& b)
{ return detail::binary_elementwise(a, b, OpKind::Mean2, T(0.5)); }

template <typename T>
Var<T> softmax_channels(const Var<T>& x)
{
    if (detail::notify(OpEvent{OpKind::Softmax, x.shape(), x.shape()}))
        return Var<T>(Tensor<T>(x.shape()));
    GradTape<T>* tape = detail::tape_for<T>({&x});
    Tensor<T> y = kernels::softmax_channels_forward(x.value());
    require_finite(y, "softmax_channels");
    Var<T> result = detail::make_output(std::move(y), tape);
    if (tape) {
        tape->record([x, result]() {
            if (result.has_grad() && x.requires_grad())
                kernels::softmax_channels_backward(result.value(), result.grad_buffer(), x.grad_buffer());
        });
    }
    return result;
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x)
{
    const Shape out{x.shape().n, x.shape().c, 1, 1};
    if (detail::notify(OpEvent{OpKind::Pool, x.shape(), out}))
        return Var<T>(Tensor<T>(out));
    GradTape<T>* tape = detail::tape_for<T>({&x});
    Var<T> result = detail::make_output(kernels::global_avg_pool_forward(x.value()), tape);
    if (tape) {
        tape->record([x, result]() {
            if (result.has_grad() && x.requires_grad())
                kernels::global_avg_pool_backward(result.grad_buffer(), x.grad_buffer());
        });
    }
    return result;
}

/// Scalar sum of all elements.
template <typename T>
Var<T> sum(const Var<T>& x)
{
    const Shape out{1, 1, 1, 1};
    if (detail::notify(OpEvent{OpKind::Reduce, x.shape(), out}))
        return Var<T>(Tensor<T>(out));
    GradTape<T>* tape = detail::tape_for<T>({&x});
    T acc = T(0);
    for (T v : x.value().span())
        acc += v;
    Var<T> result = detail::make_output(Tensor<T>::scalar(acc), tape);
    if (tape) {
        tape->record([x, result]() {
            if (!result.has_grad() || !x.requires_grad())
                return;
            const T g = result.grad_buffer()[0];
            for (T& d : x.grad_buffer().span())
                d += g;
        });
    }
    return result;
}

/// Scalar sum(x * weights) for a constant weight tensor of the same shape.
template <typename T>
Var<T> dot(const Var<T>& x, const Tensor<T>& weights)
{
    kernels::require_same_shape(x.shape(), weights.shape(), "dot");
    const Shape out{1, 1, 1, 1};
    if (detail::notify(OpEvent{OpKind::Reduce, x.shape(), out}))
        return Var<T>(Tensor<T>(out));
    GradTape<T>* tape = detail::tape_for<T>({&x});
    T acc = T(0);
    for (std::size_t i = 0; i < x.numel(); ++i)
        acc += x.value()[i] * weights[i];
    Var<T> result = detail::make_output(Tensor<T>::scalar(acc), tape);
    if (tape) {
        tape->record([x, weights, result]() {
            if (!result.has_grad() || !x.requires_grad())
                return;
            const T g = result.grad_buffer()[0];
            Tensor<T>& d = x.grad_buffer();
            for (std::size_t i = 0; i < d.numel(); ++i)
                d[i] += g * weights[i];
        });
    }
    return result;
}

} // namespace ptaseg
