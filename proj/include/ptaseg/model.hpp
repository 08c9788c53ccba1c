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
#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "blocks.hpp"
#include "pta_config.hpp"
#include "random.hpp"

namespace ptaseg {

struct ModelSpec {
    std::size_t n_classes = 12;
    std::array<std::size_t, 5> decoder_widths{256, 128, 64, 32, 16};
    bool input_skip = true; // last decoder stage concatenates the input image
    std::uint64_t seed = 0;
};

/// Where an adaptive site sits in the encoder.
struct PtaSiteInfo {
    std::size_t block_index;
    std::size_t channels;
    std::size_t stride; // input-to-feature downsampling factor
};

/// MobileNetV2 (width 1.0) feature extractor. The trailing two blocks of the
/// 64-, 96- and 160-channel stages form the Heavy branches of three PTA
/// blocks; each PTA block adds a one-block Light branch.
template <typename T>
class Encoder {
public:
    using Block = std::variant<InvertedResidual<T>, PtaBlock<T>>;

    struct Step {
        Block block;
        bool emits_skip = false;
        std::size_t stride = 1;
    };

    struct Features {
        std::vector<Var<T>> skips; // strides 2, 4, 8, 16
        Var<T> deepest;            // stride 32
    };

    static constexpr std::size_t kOutChannels = 1280;
    static constexpr std::array<std::size_t, 4> kSkipChannels{16, 24, 32, 96};

    Encoder() = default;

    Encoder(Rng& rng, const std::string& prefix)
    {
        struct Stage {
            std::size_t t, c, n, s;
        };
        constexpr std::array<Stage, 7> stages{
            {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2}, {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}}};

        m_stem = ConvBn<T>(rng, prefix + ".stem", 3, 32, 3, 2, 1, true);
        std::size_t in = 32;
        std::size_t stride = 2;
        for (const Stage& st : stages) {
            const bool adaptive = st.c == 64 || st.c == 96 || st.c == 160;
            const std::size_t plain = adaptive ? st.n - 2 : st.n;
            for (std::size_t i = 0; i < plain; ++i) {
                const std::size_t s = i == 0 ? st.s : 1;
                stride *= s;
                m_steps.push_back(
                    Step{InvertedResidual<T>(rng, block_name(prefix), in, st.c, s, st.t), false, stride});
                in = st.c;
            }
            if (adaptive)
                m_steps.push_back(Step{PtaBlock<T>(rng, block_name(prefix), st.c, st.t), false, stride});
            if (st.c == 16 || st.c == 24 || st.c == 32 || st.c == 96)
                m_steps.back().emits_skip = true;
        }
        m_last = ConvBn<T>(rng, prefix + ".last", in, kOutChannels, 1, 1, 1, true);
    }

    Features forward(const Var<T>& x, bool training)
    {
        Features f;
        Var<T> h = m_stem.forward(x, training);
        for (Step& step : m_steps) {
            h = std::visit([&](auto& b) { return b.forward(h, training); }, step.block);
            if (step.emits_skip)
                f.skips.push_back(h);
        }
        f.deepest = m_last.forward(h, training);
        return f;
    }

    std::vector<PtaBlock<T>*> sites()
    {
        std::vector<PtaBlock<T>*> out;
        for (Step& s : m_steps)
            if (auto* p = std::get_if<PtaBlock<T>>(&s.block))
                out.push_back(p);
        return out;
    }

    std::vector<PtaSiteInfo> site_info() const
    {
        std::vector<PtaSiteInfo> out;
        for (std::size_t i = 0; i < m_steps.size(); ++i)
            if (auto* p = std::get_if<PtaBlock<T>>(&m_steps[i].block))
                out.push_back({i, p->channels(), m_steps[i].stride});
        return out;
    }

    /// Same network with every PTA block replaced by its two Heavy blocks.
    /// Parameters are shared with *this.
    Encoder without_pta() const
    {
        Encoder e;
        e.m_stem = m_stem;
        e.m_last = m_last;
        for (const Step& s : m_steps) {
            if (const auto* p = std::get_if<PtaBlock<T>>(&s.block)) {
                const auto& heavy = p->heavy();
                e.m_steps.push_back(Step{heavy[0], false, s.stride});
                e.m_steps.push_back(Step{heavy[1], s.emits_skip, s.stride});
            } else {
                e.m_steps.push_back(s);
            }
        }
        return e;
    }

    Encoder detached() const
    {
        Encoder e = *this;
        e.m_stem = m_stem.detached();
        e.m_last = m_last.detached();
        for (Step& s : e.m_steps) {
            if (auto* ir = std::get_if<InvertedResidual<T>>(&s.block)) {
                *ir = ir->detached();
            } else {
                auto& p = std::get<PtaBlock<T>>(s.block);
                const Branch active = p.active();
                p = PtaBlock<T>(p.light().detached(), p.heavy()[0].detached(), p.heavy()[1].detached(), p.prefix());
                p.set_active(active);
            }
        }
        return e;
    }

    void visit_parameters(const ParamVisitor<T>& fn)
    {
        m_stem.visit_parameters(fn);
        for (Step& s : m_steps)
            std::visit([&](auto& b) { b.visit_parameters(fn); }, s.block);
        m_last.visit_parameters(fn);
    }

    void visit_buffers(const BufferVisitor<T>& fn)
    {
        m_stem.visit_buffers(fn);
        for (Step& s : m_steps)
            std::visit([&](auto& b) { b.visit_buffers(fn); }, s.block);
        m_last.visit_buffers(fn);
    }

    std::vector<Step>& steps() { return m_steps; }

private:
    std::string block_name(const std::string& prefix) const
    { return prefix + ".blocks." + std::to_string(m_steps.size()); }

    ConvBn<T> m_stem;
    std::vector<Step> m_steps;
    ConvBn<T> m_last;
};

namespace detail {

template <typename T, typename Net>
void apply_sites(Net& net, const PtaConfig& cfg)
{
    auto sites = net.encoder().sites();
    if (sites.size() != PtaConfig::kSites)
        throw std::logic_error("apply_config: model has " + std::to_string(sites.size()) + " PTA sites, expected 3");
    for (std::size_t i = 0; i < sites.size(); ++i)
        sites[i]->set_active(cfg[i]);
}

template <typename T, typename Net>
PtaConfig read_sites(Net& net)
{
    auto sites = net.encoder().sites();
    if (sites.size() != PtaConfig::kSites)
        throw std::logic_error("model has no PTA sites");
    PtaConfig cfg;
    for (std::size_t i = 0; i < sites.size(); ++i)
        cfg.branches[i] = sites[i]->active();
    return cfg;
}

} // namespace detail

/// U-Net with a MobileNetV2+PTA encoder. Copying a SegModel aliases its
/// parameters; use detached() for an independent copy.
template <typename T>
class SegModel {
public:
    using value_type = T;

    struct DecoderStage {
        ConvBn<T> conv1, conv2;
        std::size_t skip_channels = 0;
    };

    SegModel() = default;

    explicit SegModel(const ModelSpec& spec) : m_spec(spec)
    {
        if (spec.n_classes < 2)
            throw std::invalid_argument("build_model: n_classes must be >= 2");
        Rng rng(spec.seed);
        m_encoder = Encoder<T>(rng, "encoder");

        std::array<std::size_t, 5> skips{Encoder<T>::kSkipChannels[3], Encoder<T>::kSkipChannels[2],
                                         Encoder<T>::kSkipChannels[1], Encoder<T>::kSkipChannels[0],
                                         spec.input_skip ? std::size_t(3) : std::size_t(0)};
        std::size_t in = Encoder<T>::kOutChannels;
        for (std::size_t i = 0; i < 5; ++i) {
            const std::string pfx = "decoder." + std::to_string(i);
            const std::size_t out = spec.decoder_widths[i];
            m_decoder.push_back(DecoderStage{ConvBn<T>(rng, pfx + ".conv1", in + skips[i], out, 3, 1, 1, true),
                                             ConvBn<T>(rng, pfx + ".conv2", out, out, 3, 1, 1, true), skips[i]});
            in = out;
        }
        m_head_weight = init_conv_weight<T>(rng, spec.n_classes, in, 1, "head.weight");
        m_head_bias = Var<T>(Tensor<T>(Shape{1, spec.n_classes, 1, 1}), true, "head.bias");
    }

    const ModelSpec& spec() const { return m_spec; }
    bool adaptive() const { return !const_cast<Encoder<T>&>(m_encoder).sites().empty(); }
    Encoder<T>& encoder() { return m_encoder; }
    std::vector<PtaSiteInfo> site_info() const { return m_encoder.site_info(); }

    void apply_config(const PtaConfig& cfg) { detail::apply_sites<T>(*this, cfg); }
    PtaConfig config() { return detail::read_sites<T>(*this); }

    /// Logits (N, n_classes, H, W). H and W must be multiples of 32.
    Var<T> forward(const Var<T>& x, bool training = false)
    {
        const Shape& s = x.shape();
        if (s.c != 3 || s.h % 32 != 0 || s.w % 32 != 0)
            throw ShapeError("SegModel expects (N,3,H,W) with H and W multiples of 32, got " + s.str());
        auto feats = m_encoder.forward(x, training);
        Var<T> d = feats.deepest;
        for (std::size_t i = 0; i < m_decoder.size(); ++i) {
            DecoderStage& st = m_decoder[i];
            d = upsample_bilinear2x(d);
            if (i < 4)
                d = concat_channels(d, feats.skips[3 - i]);
            else if (st.skip_channels)
                d = concat_channels(d, x);
            d = st.conv2.forward(st.conv1.forward(d, training), training);
        }
        return conv2d(d, m_head_weight, &m_head_bias, kernels::ConvParams{});
    }

    Var<T> forward(const Var<T>& x, const PtaConfig& cfg, bool training = false)
    {
        apply_config(cfg);
        return forward(x, training);
    }

    /// PTA-less network whose encoder runs the Heavy blocks directly.
    /// Parameters are shared with *this.
    SegModel without_pta() const
    {
        SegModel m = *this;
        m.m_encoder = m_encoder.without_pta();
        return m;
    }

    SegModel detached() const
    {
        SegModel m = *this;
        m.m_encoder = m_encoder.detached();
        for (DecoderStage& st : m.m_decoder) {
            st.conv1 = st.conv1.detached();
            st.conv2 = st.conv2.detached();
        }
        m.m_head_weight = Var<T>(m_head_weight.value(), true, m_head_weight.name());
        m.m_head_bias = Var<T>(m_head_bias.value(), true, m_head_bias.name());
        return m;
    }

    void visit_parameters(const ParamVisitor<T>& fn)
    {
        m_encoder.visit_parameters(fn);
        for (DecoderStage& st : m_decoder) {
            st.conv1.visit_parameters(fn);
            st.conv2.visit_parameters(fn);
        }
        fn(m_head_weight);
        fn(m_head_bias);
    }

    void visit_buffers(const BufferVisitor<T>& fn)
    {
        m_encoder.visit_buffers(fn);
        for (DecoderStage& st : m_decoder) {
            st.conv1.visit_buffers(fn);
            st.conv2.visit_buffers(fn);
        }
    }

    std::vector<Var<T>> parameters()
    {
        std::vector<Var<T>> out;
        visit_parameters([&](Var<T>& p) { out.push_back(p); });
        return out;
    }

    /// Total number of trainable scalars, all branches included.
    std::size_t parameter_count()
    {
        std::size_t n = 0;
        visit_parameters([&](Var<T>& p) { n += p.numel(); });
        return n;
    }

    /// FNV-1a over all parameter values in registry order.
    std::uint64_t parameter_checksum()
    {
        std::uint64_t h = 1469598103934665603ULL;
        visit_parameters([&](Var<T>& p) { h = checksum(p.value(), h); });
        return h;
    }

    std::uint64_t state_checksum()
    {
        std::uint64_t h = parameter_checksum();
        visit_buffers([&](const std::string&, Tensor<T>& b) { h = checksum(b, h); });
        return h;
    }

    std::vector<DecoderStage>& decoder() { return m_decoder; }

private:
    ModelSpec m_spec;
    Encoder<T> m_encoder;
    std::vector<DecoderStage> m_decoder;
    Var<T> m_head_weight, m_head_bias;
};

template <typename T = float>
SegModel<T> build_model(std::uint64_t seed, std::size_t n_classes = 12)
{
    ModelSpec spec;
    spec.seed = seed;
    spec.n_classes = n_classes;
    return SegModel<T>(spec);
}

template <typename T>
void apply_config(SegModel<T>& model, const PtaConfig& cfg)
{ model.apply_config(cfg); }

/// MobileNetV2(+PTA) image classifier: encoder, global pooling and a linear
/// layer. Used for the classification-vs-segmentation complexity comparison.
template <typename T>
class Classifier {
public:
    using value_type = T;

    explicit Classifier(std::size_t n_classes = 2, std::uint64_t seed = 0)
    {
        Rng rng(seed);
        m_encoder = Encoder<T>(rng, "encoder");
        m_fc_weight = init_conv_weight<T>(rng, n_classes, Encoder<T>::kOutChannels, 1, "classifier.weight");
        m_fc_bias = Var<T>(Tensor<T>(Shape{1, n_classes, 1, 1}), true, "classifier.bias");
    }

    Encoder<T>& encoder() { return m_encoder; }
    bool adaptive() const { return !const_cast<Encoder<T>&>(m_encoder).sites().empty(); }
    void apply_config(const PtaConfig& cfg) { detail::apply_sites<T>(*this, cfg); }
    PtaConfig config() { return detail::read_sites<T>(*this); }

    Var<T> forward(const Var<T>& x, bool training = false)
    {
        auto feats = m_encoder.forward(x, training);
        return conv2d(global_avg_pool(feats.deepest), m_fc_weight, &m_fc_bias, kernels::ConvParams{});
    }

    Classifier without_pta() const
    {
        Classifier c = *this;
        c.m_encoder = m_encoder.without_pta();
        return c;
    }

    void visit_parameters(const ParamVisitor<T>& fn)
    {
        m_encoder.visit_parameters(fn);
        fn(m_fc_weight);
        fn(m_fc_bias);
    }

private:
    Encoder<T> m_encoder;
    Var<T> m_fc_weight, m_fc_bias;
};

} // namespace ptaseg
