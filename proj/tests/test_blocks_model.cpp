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

#include <set>

#include <gtest/gtest.h>

#include "ptaseg/blocks.hpp"
#include "ptaseg/model.hpp"
#include "test_util.hpp"

using namespace ptaseg;
using ptaseg::testing::bitwise_equal;
using ptaseg::testing::random_tensor;

namespace {

/// Records the names of parameters touched by forward operators.
class ParamRecorder : public ExecutionObserver {
public:
    void on_op(const OpEvent& e) override
    {
        for (const ParamUse& p : e.params)
            names.insert(std::string(p.name));
    }
    std::size_t count_containing(const std::string& s) const
    {
        std::size_t n = 0;
        for (const auto& name : names)
            n += name.find(s) != std::string::npos;
        return n;
    }
    std::set<std::string> names;
};

template <typename T>
void copy_block(InvertedResidual<T>& dst, InvertedResidual<T>& src)
{
    std::vector<Var<T>> from;
    src.visit_parameters([&](Var<T>& p) { from.push_back(p); });
    std::size_t i = 0;
    dst.visit_parameters([&](Var<T>& p) { p.mutable_value() = from.at(i++).value(); });
    std::vector<Tensor<T>*> bufs;
    src.visit_buffers([&](const std::string&, Tensor<T>& b) { bufs.push_back(&b); });
    i = 0;
    dst.visit_buffers([&](const std::string&, Tensor<T>& b) { b = *bufs.at(i++); });
}

// Makes the block compute x + 0 by zeroing the projection's BN affine terms.
template <typename T>
void make_identity(InvertedResidual<T>& b)
{
    b.project().visit_parameters([](Var<T>& p) {
        if (p.name().ends_with(".bn.gamma") || p.name().ends_with(".bn.beta"))
            p.mutable_value() = Tensor<T>(p.shape());
    });
}

template <typename T>
void randomize_buffers(SegModel<T>& m, std::uint64_t seed)
{
    Rng rng(seed);
    m.visit_buffers([&](const std::string& name, Tensor<T>& b) {
        const bool var = name.ends_with("running_var");
        for (T& v : b.span())
            v = static_cast<T>(var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.2, 0.2));
    });
}

Tensor<float> random_image(std::size_t n, std::size_t side, std::uint64_t seed)
{
    Rng rng(seed);
    return random_tensor<float>(Shape{n, 3, side, side}, rng, 0.0, 1.0);
}

// ---------------------------------------------------------------------------

TEST(InvertedResidual, ZeroWeightsGivePureSkip)
{
    Rng rng(1);
    InvertedResidual<float> b(rng, "b", 8, 8, 1, 6);
    ASSERT_TRUE(b.has_skip());
    b.visit_parameters([](Var<float>& p) {
        if (p.name().ends_with(".conv.weight"))
            p.mutable_value() = Tensor<float>(p.shape());
    });
    Var<float> x(random_tensor<float>(Shape{1, 8, 6, 6}, rng));
    EXPECT_TRUE(bitwise_equal(b.forward(x, false).value(), x.value()));
}

TEST(InvertedResidual, StrideTwoHalvesSpatialSize)
{
    Rng rng(2);
    InvertedResidual<float> b(rng, "b", 32, 64, 2, 6);
    EXPECT_FALSE(b.has_skip());
    Var<float> x(random_tensor<float>(Shape{1, 32, 16, 16}, rng));
    EXPECT_EQ(b.forward(x, false).shape(), (Shape{1, 64, 8, 8}));
}

TEST(InvertedResidual, ChannelMismatchRejected)
{
    Rng rng(3);
    InvertedResidual<float> b(rng, "b", 8, 8, 1, 6);
    EXPECT_THROW(b.forward(Var<float>(Tensor<float>(Shape{1, 4, 6, 6})), false), ShapeError);
}

TEST(InvertedResidual, ParameterCountClosedForm)
{
    // expand 6c^2 + depthwise 54c + project 6c^2, BN affine 2*6c + 2*6c + 2c.
    for (std::size_t c : {8u, 64u, 96u, 160u}) {
        Rng rng(c);
        InvertedResidual<float> b(rng, "b", c, c, 1, 6);
        EXPECT_EQ(b.parameter_count(), 12 * c * c + 54 * c + 24 * c + 2 * c) << c;
    }
    Rng rng(4);
    EXPECT_EQ(InvertedResidual<float>(rng, "b", 64, 64, 1, 6).parameter_count(), 54272u);
}

TEST(InvertedResidual, ExpansionOneOmitsExpand)
{
    Rng rng(5);
    InvertedResidual<float> b(rng, "b", 32, 16, 1, 1);
    EXPECT_FALSE(b.has_expand());
    EXPECT_EQ(b.parameter_count(), 32u * 9 + 64 + 32u * 16 + 32);
}

TEST(PtaBlock, HeavyMatchesDirectComposition)
{
    Rng rng(6);
    PtaBlock<float> block(rng, "pta", 16);
    block.set_active(Branch::Heavy);
    Var<float> x(random_tensor<float>(Shape{2, 16, 5, 5}, rng));
    const auto direct = block.heavy()[1].forward(block.heavy()[0].forward(x, false), false).value();
    EXPECT_TRUE(bitwise_equal(block.forward(x, false).value(), direct));
}

TEST(PtaBlock, BothIsExactAverage)
{
    Rng rng(7);
    PtaBlock<float> block(rng, "pta", 16);
    block.set_active(Branch::Both);
    Var<float> x(random_tensor<float>(Shape{2, 16, 5, 5}, rng));
    const auto l = block.light().forward(x, false).value();
    const auto h = block.heavy()[1].forward(block.heavy()[0].forward(x, false), false).value();
    const auto y = block.forward(x, false).value();
    for (std::size_t i = 0; i < y.numel(); ++i)
        ASSERT_EQ(y[i], (l[i] + h[i]) / 2.0f);
}

TEST(PtaBlock, BothWithEqualBranchesIsIdentityOfMean)
{
    Rng rng(8);
    PtaBlock<float> block(rng, "pta", 16);
    copy_block(block.light(), block.heavy()[0]);
    make_identity(block.heavy()[1]);
    Var<float> x(random_tensor<float>(Shape{1, 16, 6, 6}, rng));
    block.set_active(Branch::Light);
    const auto y = block.forward(x, false).value();
    block.set_active(Branch::Heavy);
    ASSERT_TRUE(bitwise_equal(block.forward(x, false).value(), y));
    block.set_active(Branch::Both);
    EXPECT_TRUE(bitwise_equal(block.forward(x, false).value(), y));
}

TEST(PtaBlock, LightNeverTouchesHeavyParameters)
{
    Rng rng(9);
    PtaBlock<float> block(rng, "pta", 16);
    block.set_active(Branch::Light);
    ParamRecorder rec;
    {
        ObserverScope scope(rec);
        block.forward(Var<float>(random_tensor<float>(Shape{1, 16, 4, 4}, rng)), false);
    }
    EXPECT_EQ(rec.count_containing(".heavy."), 0u);
    EXPECT_GT(rec.count_containing(".light."), 0u);
}

TEST(PtaBlock, SwitchingKeepsParameters)
{
    Rng rng(10);
    PtaBlock<float> block(rng, "pta", 16);
    auto digest = [&] {
        std::uint64_t h = 0;
        block.visit_parameters([&](Var<float>& p) { h = checksum(p.value(), h); });
        return h;
    };
    const std::uint64_t before = digest();
    for (Branch b : {Branch::Light, Branch::Both, Branch::Heavy, Branch::Light})
        block.set_active(b);
    EXPECT_EQ(digest(), before);
}

TEST(PtaBlock, LightGradientLeavesHeavyAtZero)
{
    Rng rng(11);
    PtaBlock<float> block(rng, "pta", 8);
    block.set_active(Branch::Light);
    GradTape<float> tape;
    Var<float> loss;
    {
        GradTape<float>::Scope scope(tape);
        loss = sum(block.forward(Var<float>(random_tensor<float>(Shape{2, 8, 4, 4}, rng)), true));
    }
    tape.backward(loss);
    for (auto& h : block.heavy())
        h.visit_parameters([](Var<float>& p) {
            const Tensor<float> g = p.grad();
            for (float v : g.span())
                ASSERT_EQ(v, 0.0f) << p.name();
        });
    bool light_moved = false;
    block.light().visit_parameters([&](Var<float>& p) { light_moved = light_moved || p.has_grad(); });
    EXPECT_TRUE(light_moved);
}

TEST(PtaBlock, BranchesMustAgree)
{
    Rng rng(12);
    InvertedResidual<float> a(rng, "a", 8, 8, 1, 6), b(rng, "b", 8, 8, 1, 6), c(rng, "c", 16, 16, 1, 6),
        s(rng, "s", 8, 8, 2, 6);
    EXPECT_THROW(PtaBlock<float>(a, b, c), ShapeError);
    EXPECT_THROW(PtaBlock<float>(a, s, b), ShapeError);
    EXPECT_NO_THROW(PtaBlock<float>(a, b, b.detached()));
}

// ---------------------------------------------------------------------------

TEST(Model, SeedDeterminesParameters)
{
    auto a = build_model(7, 12), b = build_model(7, 12), c = build_model(8, 12);
    EXPECT_EQ(a.parameter_checksum(), b.parameter_checksum());
    EXPECT_NE(a.parameter_checksum(), c.parameter_checksum());
}

TEST(Model, RejectsTooFewClasses) { EXPECT_THROW(build_model(0, 1), std::invalid_argument); }

TEST(Model, FullResolutionBatchShape)
{
    auto m = build_model(0, 12);
    const auto y = m.forward(Var<float>(random_image(8, 256, 1)), false);
    EXPECT_EQ(y.shape(), (Shape{8, 12, 256, 256}));
    EXPECT_TRUE(y.value().all_finite());
}

TEST(Model, RejectsBadInputShape)
{
    auto m = build_model(0, 4);
    EXPECT_THROW(m.forward(Var<float>(Tensor<float>(Shape{1, 1, 64, 64}))), ShapeError);
    EXPECT_THROW(m.forward(Var<float>(Tensor<float>(Shape{1, 3, 48, 64}))), ShapeError);
}

TEST(Model, ParameterBudget)
{
    auto m = build_model(0, 12);
    auto plain = m.without_pta();
    EXPECT_EQ(plain.parameter_count(), 6629436u);
    EXPECT_NEAR(static_cast<double>(plain.parameter_count()), 6.63e6, 0.05 * 6.63e6);
}

TEST(Model, ThreeSitesAllInEncoder)
{
    auto m = build_model(0, 12);
    const auto sites = m.site_info();
    ASSERT_EQ(sites.size(), 3u);
    EXPECT_EQ(sites[0].channels, 64u);
    EXPECT_EQ(sites[1].channels, 96u);
    EXPECT_EQ(sites[2].channels, 160u);
    EXPECT_LT(sites[0].block_index, sites[1].block_index);
    EXPECT_LT(sites[1].block_index, sites[2].block_index);
    std::size_t pta_params = 0;
    m.visit_parameters([&](Var<float>& p) {
        if (p.name().find(".heavy.") != std::string::npos || p.name().find(".light.") != std::string::npos) {
            EXPECT_TRUE(p.name().starts_with("encoder.")) << p.name();
            ++pta_params;
        }
    });
    EXPECT_GT(pta_params, 0u);
}

TEST(Model, HeavyConfigEqualsPlainCloneBitwise)
{
    auto m = build_model(3, 12);
    randomize_buffers(m, 4);
    m.apply_config(parse_config("HHH"));
    auto plain = m.without_pta();
    EXPECT_FALSE(plain.adaptive());
    const Var<float> x(random_image(2, 64, 5));
    EXPECT_TRUE(bitwise_equal(m.forward(x, false).value(), plain.forward(x, false).value()));
    EXPECT_EQ(m.without_pta().parameter_count(), plain.parameter_count());
}

TEST(Model, BothWithEqualBranchesEqualsHeavy)
{
    auto m = build_model(5, 12);
    randomize_buffers(m, 6);
    for (PtaBlock<float>* site : m.encoder().sites()) {
        copy_block(site->light(), site->heavy()[0]);
        make_identity(site->heavy()[1]);
    }
    const Var<float> x(random_image(1, 64, 7));
    const auto hhh = m.forward(x, parse_config("HHH"), false).value();
    EXPECT_TRUE(bitwise_equal(m.forward(x, parse_config("BBB"), false).value(), hhh));
}

TEST(Model, SwitchingConfigsKeepsState)
{
    auto m = build_model(0, 4);
    const std::uint64_t before = m.state_checksum();
    const Var<float> x(random_image(1, 32, 8));
    for (const PtaConfig& c : evaluation_configs())
        m.forward(x, c, false);
    EXPECT_EQ(m.state_checksum(), before);
}

TEST(Model, ApplyReadBackAndIdempotence)
{
    auto m = build_model(0, 4);
    for (const PtaConfig& c : evaluation_configs()) {
        m.apply_config(c);
        EXPECT_EQ(m.config(), c);
        m.apply_config(c);
        EXPECT_EQ(m.config(), c);
    }
}

TEST(Model, LightConfigUsesNoHeavyParameters)
{
    auto m = build_model(0, 4);
    m.apply_config(parse_config("LLL"));
    ParamRecorder rec;
    {
        ObserverScope scope(rec);
        m.forward(Var<float>(random_image(1, 32, 9)), false);
    }
    EXPECT_EQ(rec.count_containing(".heavy."), 0u);
    // Per light block: three conv weights and three BN gamma/beta pairs.
    EXPECT_EQ(rec.count_containing(".light."), 3u * 9u);
}

} // namespace
