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

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "data.hpp"
#include "model.hpp"
#include "pta_config.hpp"
#include "random.hpp"

namespace ptaseg {

// ---------------------------------------------------------------------------
// Dice score and loss

enum class DiceReduction {
    Micro, // sums run jointly over all classes and pixels of a sample
    Macro, // per-class dice, averaged over classes
};

struct DiceOptions {
    double eps = 1e-6;
    DiceReduction reduction = DiceReduction::Micro;
};

namespace detail {

// Numerator/denominator sums for every (sample, group) where a group is
// the whole sample (micro) or one class (macro).
struct DiceTerms {
    std::size_t samples = 0, groups = 0;
    std::vector<double> inter, pp, gg; // size samples * groups
};

template <typename T>
DiceTerms dice_terms(const Tensor<T>& p, const Tensor<T>& g, const DiceOptions& opt)
{
    if (!(p.shape() == g.shape()))
        throw ShapeError("dice: prediction " + p.shape().str() + " and target " + g.shape().str() + " differ");
    if (!(opt.eps > 0.0))
        throw std::invalid_argument("dice: eps must be positive");
    const Shape& s = p.shape();
    DiceTerms t;
    t.samples = s.n;
    t.groups = opt.reduction == DiceReduction::Micro ? 1 : s.c;
    t.inter.assign(t.samples * t.groups, 0.0);
    t.pp.assign(t.samples * t.groups, 0.0);
    t.gg.assign(t.samples * t.groups, 0.0);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t k = n * t.groups + (t.groups == 1 ? 0 : c);
            const std::size_t base = p.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const double pv = p[base + i], gv = g[base + i];
                t.inter[k] += pv * gv;
                t.pp[k] += pv * pv;
                t.gg[k] += gv * gv;
            }
        }
    return t;
}

inline double dice_ratio(const DiceTerms& t, std::size_t k, double eps)
{ return (2.0 * t.inter[k] + eps) / (t.pp[k] + t.gg[k] + eps); }

inline std::vector<double> per_sample_scores(const DiceTerms& t, double eps)
{
    std::vector<double> out(t.samples, 0.0);
    for (std::size_t n = 0; n < t.samples; ++n) {
        for (std::size_t j = 0; j < t.groups; ++j)
            out[n] += dice_ratio(t, n * t.groups + j, eps);
        out[n] /= static_cast<double>(t.groups);
    }
    return out;
}

} // namespace detail

/// Soft dice score (2 sum(p g) + eps) / (sum p^2 + sum g^2 + eps) per
/// sample, averaged over the batch. p and g are (N,C,H,W).
template <typename T>
std::vector<double> dice_scores(const Tensor<T>& p, const Tensor<T>& g, const DiceOptions& opt = {})
{ return detail::per_sample_scores(detail::dice_terms(p, g, opt), opt.eps); }

template <typename T>
double dice_score(const Tensor<T>& p, const Tensor<T>& g, const DiceOptions& opt = {})
{
    const auto s = dice_scores(p, g, opt);
    return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

template <typename T>
double dice_loss(const Tensor<T>& p, const Tensor<T>& g, const DiceOptions& opt = {})
{ return 1.0 - dice_score(p, g, opt); }

/// Differentiable batch-mean dice loss of probabilities against a one-hot
/// target.
template <typename T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& onehot, const DiceOptions& opt = {})
{
    const Shape out{1, 1, 1, 1};
    if (detail::notify(OpEvent{OpKind::Dice, probs.shape(), out}))
        return Var<T>(Tensor<T>(out));
    auto terms = std::make_shared<detail::DiceTerms>(detail::dice_terms(probs.value(), onehot, opt));
    const auto scores = detail::per_sample_scores(*terms, opt.eps);
    const double score = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
    const double loss = 1.0 - score;
    if (!std::isfinite(loss))
        throw NumericError("dice_loss: non-finite loss");

    GradTape<T>* tape = detail::tape_for<T>({&probs});
    Var<T> result(Tensor<T>::scalar(static_cast<T>(loss)), tape != nullptr);
    if (tape) {
        const double eps = opt.eps;
        tape->record([probs, onehot, terms, result, eps]() {
            if (!result.has_grad() || !probs.requires_grad())
                return;
            const Shape& s = probs.shape();
            const detail::DiceTerms& t = *terms;
            const double upstream = result.grad_buffer()[0];
            const double scale = -upstream / static_cast<double>(t.samples * t.groups);
            Tensor<T>& gp = probs.grad_buffer();
            const Tensor<T>& p = probs.value();
            for (std::size_t n = 0; n < s.n; ++n)
                for (std::size_t c = 0; c < s.c; ++c) {
                    const std::size_t k = n * t.groups + (t.groups == 1 ? 0 : c);
                    const double num = 2.0 * t.inter[k] + eps;
                    const double den = t.pp[k] + t.gg[k] + eps;
                    const double inv_den2 = 1.0 / (den * den);
                    const std::size_t base = p.offset(n, c, 0, 0);
                    for (std::size_t i = 0; i < s.plane(); ++i) {
                        const double d = (2.0 * onehot[base + i] * den - num * 2.0 * p[base + i]) * inv_den2;
                        gp[base + i] += static_cast<T>(scale * d);
                    }
                }
        });
    }
    return result;
}

/// One-hot (N, n_classes, H, W) encoding of label maps.
template <typename T = float>
Tensor<T> one_hot(const std::vector<const LabelMap*>& masks, std::size_t n_classes)
{
    if (masks.empty())
        throw std::invalid_argument("one_hot: no masks");
    const std::size_t h = masks[0]->height, w = masks[0]->width;
    Tensor<T> out(Shape{masks.size(), n_classes, h, w});
    for (std::size_t n = 0; n < masks.size(); ++n)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t cls = masks[n]->at(y, x);
                if (cls >= n_classes)
                    throw DataError("one_hot: class index " + std::to_string(cls) + " out of range");
                out.at(n, cls, y, x) = T(1);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    std::vector<std::uint64_t> steps; // per parameter
};

/// Bias-corrected Adam update of every parameter that holds a gradient.
/// Parameters that received no gradient since the last zero_grad (an
/// inactive PTA branch) are left untouched, moments included.
template <typename T>
void adam_step(std::span<Var<T>> params, AdamState<T>& state, const AdamOptions& opt)
{
    if (state.m.empty()) {
        for (const Var<T>& p : params) {
            state.m.emplace_back(p.shape());
            state.v.emplace_back(p.shape());
        }
        state.steps.assign(params.size(), 0);
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: state was built for a different parameter list");

    for (std::size_t i = 0; i < params.size(); ++i) {
        Var<T>& p = params[i];
        if (!p.has_grad())
            continue;
        if (!(state.m[i].shape() == p.shape()))
            throw ShapeError("adam_step: moment shape mismatch for " + p.name());
        const std::uint64_t t = ++state.steps[i];
        const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
        const Tensor<T>& g = p.grad_buffer();
        Tensor<T>& m = state.m[i];
        Tensor<T>& v = state.v[i];
        Tensor<T>& w = p.mutable_value();
        const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
        const T step = static_cast<T>(opt.lr / c1);
        const T inv_c2 = static_cast<T>(1.0 / c2);
        const T eps = static_cast<T>(opt.eps);
        for (std::size_t j = 0; j < w.numel(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            w[j] -= step * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
        }
    }
}

template <typename T>
void zero_grad(std::span<Var<T>> params)
{
    for (Var<T>& p : params)
        p.zero_grad();
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::size_t epochs = 600;
    std::size_t batch_size = 8;
    AdamOptions adam{};
    DiceOptions dice{};
    std::uint64_t seed = 0;
    std::size_t max_iterations = 0; // 0: run all epochs
    bool augment = true;
    AugmentOptions augmentation{};
    std::vector<PtaConfig> eval_configs = evaluation_configs();
    std::size_t eval_batch_size = 16;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    std::size_t iterations = 0; // cumulative
    double wall_seconds = 0.0;  // cumulative
    double train_loss = 0.0;    // mean over the epoch's batches
    std::vector<std::pair<PtaConfig, double>> val_dice;
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    std::vector<double> batch_losses;
    std::vector<PtaConfig> sampled_configs;
};

/// Mean per-sample dice of the model under cfg (eval-mode normalization).
template <typename T>
double evaluate(SegModel<T>& model, const std::vector<SegSample>& samples, const PtaConfig& cfg,
                std::size_t batch_size = 16, const DiceOptions& dice = {})
{
    if (samples.empty())
        throw std::invalid_argument("evaluate: no samples");
    model.apply_config(cfg);
    double total = 0.0;
    for (std::size_t i = 0; i < samples.size(); i += batch_size) {
        std::vector<const SegSample*> chunk;
        for (std::size_t j = i; j < std::min(samples.size(), i + batch_size); ++j)
            chunk.push_back(&samples[j]);
        Batch<T> b = make_batch<T>(chunk, model.spec().n_classes);
        Var<T> probs = softmax_channels(model.forward(Var<T>(std::move(b.images)), false));
        for (double s : dice_scores(probs.value(), b.onehot, dice))
            total += s;
    }
    return total / static_cast<double>(samples.size());
}

/// PTA-sampling training: for every mini-batch draw a configuration from the
/// strategy, apply it, and take one Adam step on the batch-mean dice loss.
/// Calls on_epoch after each epoch's validation pass.
template <typename T>
TrainResult train(SegModel<T>& model, const std::vector<SegSample>& train_set, const std::vector<SegSample>& val_set,
                  const TrainConfig& cfg, const SamplingStrategy& strategy,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {})
{
    if (train_set.empty())
        throw std::invalid_argument("train: training set is empty");
    if (cfg.batch_size == 0 || cfg.epochs == 0)
        throw std::invalid_argument("train: epochs and batch size must be positive");

    std::vector<Var<T>> params = model.parameters();
    AdamState<T> adam;
    Rng order_rng(Rng::derive(cfg.seed, 101));
    Rng config_rng(Rng::derive(cfg.seed, 202));
    const std::size_t n_classes = model.spec().n_classes;
    const auto start = std::chrono::steady_clock::now();

    TrainResult result;
    std::vector<std::size_t> order(train_set.size());
    std::size_t iteration = 0;
    bool done = false;
    for (std::size_t epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[order_rng.below(i)]);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            if (cfg.max_iterations && iteration >= cfg.max_iterations) {
                done = true;
                break;
            }
            std::vector<SegSample> augmented;
            std::vector<const SegSample*> batch;
            const std::size_t end = std::min(order.size(), b0 + cfg.batch_size);
            augmented.reserve(end - b0);
            for (std::size_t j = b0; j < end; ++j) {
                const SegSample& s = train_set[order[j]];
                if (cfg.augment) {
                    Rng aug_rng(Rng::derive(cfg.seed, epoch, order[j] + 1));
                    augmented.push_back(augment(s, aug_rng, cfg.augmentation));
                    batch.push_back(&augmented.back());
                } else {
                    batch.push_back(&s);
                }
            }
            Batch<T> data = make_batch<T>(batch, n_classes);

            const PtaConfig sampled = strategy.sample(config_rng);
            model.apply_config(sampled);
            result.sampled_configs.push_back(sampled);

            zero_grad<T>(params);
            GradTape<T> tape;
            Var<T> loss;
            {
                typename GradTape<T>::Scope scope(tape);
                Var<T> logits = model.forward(Var<T>(std::move(data.images)), true);
                loss = dice_loss(softmax_channels(logits), data.onehot, cfg.dice);
            }
            const double lv = static_cast<double>(loss.value()[0]);
            if (!std::isfinite(lv))
                throw NumericError("train: non-finite loss at iteration " + std::to_string(iteration + 1) +
                                   " (config " + sampled.str() + ")");
            tape.backward(loss);
            adam_step<T>(params, adam, cfg.adam);

            result.batch_losses.push_back(lv);
            loss_sum += lv;
            ++batches;
            ++iteration;
        }
        if (batches == 0)
            break;

        EpochMetrics m;
        m.epoch = epoch;
        m.iterations = iteration;
        m.train_loss = loss_sum / static_cast<double>(batches);
        if (!val_set.empty())
            for (const PtaConfig& c : cfg.eval_configs)
                m.val_dice.emplace_back(c, evaluate(model, val_set, c, cfg.eval_batch_size, cfg.dice));
        m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.epochs.push_back(m);
        if (on_epoch)
            on_epoch(m);
    }
    return result;
}

} // namespace ptaseg
