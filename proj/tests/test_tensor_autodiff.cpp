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

#include <gtest/gtest.h>

#include "ptaseg/autodiff.hpp"
#include "ptaseg/gemm.hpp"
#include "ptaseg/kernels.hpp"
#include "ptaseg/training.hpp"
#include "gradcheck_cases.hpp"
#include "test_util.hpp"

using namespace ptaseg;
using ptaseg::testing::bitwise_equal;
using ptaseg::testing::random_tensor;

namespace {

TEST(Tensor, ShapeAndLayout)
{
    Tensor<float> t(Shape{2, 3, 4, 5});
    EXPECT_EQ(t.numel(), 120u);
    EXPECT_EQ(t.offset(1, 2, 3, 4), 119u);
    EXPECT_THROW(Tensor<float>(Shape{1, 0, 2, 2}), ShapeError);
    EXPECT_THROW(t.reshaped(Shape{1, 1, 1, 7}), ShapeError);
    EXPECT_THROW(t.item(), ShapeError);
    EXPECT_EQ(Tensor<float>::scalar(2.5f).item(), 2.5f);
}

TEST(Tensor, NonFiniteIsAnError)
{
    Tensor<float> t(Shape{1, 1, 2, 2}, 1.0f);
    EXPECT_NO_THROW(require_finite(t, "test"));
    t[3] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(require_finite(t, "test"), NumericError);
}

TEST(Gemm, MatchesNaiveLoopBitwise)
{
    Rng rng(5);
    for (auto [m, n, k] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 13, 5}, {33, 70, 300}, {64, 9, 600}}) {
        auto a = random_tensor<double>(Shape{1, 1, m, k}, rng);
        auto b = random_tensor<double>(Shape{1, 1, k, n}, rng);
        std::vector<double> c(m * n, 0.0);
        gemm::multiply<double>(m, n, k, {a.data(), std::ptrdiff_t(k), 1}, {b.data(), std::ptrdiff_t(n), 1}, c.data(), n, false);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p)
                    acc += a[i * k + p] * b[p * n + j];
                ASSERT_EQ(acc, c[i * n + j]) << m << "x" << n << "x" << k;
            }
    }
}

TEST(Conv2d, ZeroInputGivesZeroOutput)
{
    Rng rng(1);
    Var<float> x(Tensor<float>(Shape{1, 3, 8, 8}));
    Var<float> w(random_tensor<float>(Shape{4, 3, 3, 3}, rng));
    const auto y = conv2d(x, w, {1, 1, 1}).value();
    for (float v : y.span())
        EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, ImpulseGivesFlippedKernel)
{
    Tensor<double> x(Shape{1, 1, 3, 3});
    x.at(0, 0, 1, 1) = 1.0;
    Rng rng(2);
    auto w = random_tensor<double>(Shape{1, 1, 3, 3}, rng);
    const auto y = conv2d(Var<double>(x), Var<double>(w), {1, 1, 1}).value();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_EQ(y.at(0, 0, i, j), w.at(0, 0, 2 - i, 2 - j));
    EXPECT_TRUE(bitwise_equal(y, ptaseg::testing::conv_reference(x, w, 1, 1, 1)));
}

TEST(Conv2d, DepthwiseOnesCountsWindow)
{
    Var<float> x(Tensor<float>(Shape{1, 2, 4, 4}, 1.0f));
    Var<float> w(Tensor<float>(Shape{2, 1, 3, 3}, 1.0f));
    const auto y = conv2d(x, w, {1, 1, 2}).value();
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 1; i < 3; ++i)
            for (std::size_t j = 1; j < 3; ++j)
                EXPECT_EQ(y.at(0, c, i, j), 9.0f);
    EXPECT_EQ(y.at(0, 0, 0, 0), 4.0f);
}

TEST(Conv2d, OutputShapeFormula)
{
    EXPECT_EQ(kernels::conv2d_output_shape(Shape{1, 4, 9, 7}, Shape{6, 4, 3, 3}, {2, 1, 1}), (Shape{1, 6, 5, 4}));
    EXPECT_EQ(kernels::conv2d_output_shape(Shape{1, 4, 8, 8}, Shape{4, 1, 3, 3}, {1, 0, 4}), (Shape{1, 4, 6, 6}));
}

TEST(Conv2d, MismatchNamesBothShapes)
{
    try {
        kernels::conv2d_output_shape(Shape{1, 5, 8, 8}, Shape{4, 3, 3, 3}, {1, 1, 1});
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(Shape{1, 5, 8, 8}.str()), std::string::npos) << msg;
        EXPECT_NE(msg.find(Shape{4, 3, 3, 3}.str()), std::string::npos) << msg;
    }
    EXPECT_THROW(kernels::conv2d_output_shape(Shape{1, 6, 8, 8}, Shape{4, 3, 3, 3}, {1, 1, 4}), ShapeError);
    EXPECT_THROW(kernels::conv2d_output_shape(Shape{1, 3, 8, 8}, Shape{4, 3, 3, 3}, {0, 1, 1}), ShapeError);
}

// 64-bit results must equal the naive loop bit for bit across every path
// (direct depthwise, pointwise, im2col) and a range of geometries.
TEST(Conv2d, MatchesSixLoopReferenceBitwise)
{
    Rng rng(11);
    struct Case {
        Shape x;
        std::size_t cout, k, stride, pad, groups;
    };
    const std::vector<Case> cases{
        {{2, 8, 16, 16}, 8, 3, 1, 1, 1},  {{2, 8, 16, 16}, 8, 3, 2, 1, 1},  {{2, 8, 16, 16}, 8, 3, 1, 1, 8},
        {{2, 8, 16, 16}, 8, 3, 2, 1, 8},  {{2, 8, 16, 16}, 16, 1, 1, 0, 1}, {{2, 8, 16, 16}, 4, 3, 1, 0, 2},
        {{1, 3, 15, 13}, 5, 3, 2, 1, 1},  {{2, 4, 7, 9}, 6, 5, 1, 2, 2},    {{2, 8, 16, 16}, 3, 1, 2, 0, 1},
        {{1, 1, 1, 1}, 2, 1, 1, 0, 1},
    };
    for (const Case& c : cases) {
        auto x = random_tensor<double>(c.x, rng);
        auto w = random_tensor<double>(Shape{c.cout, c.x.c / c.groups, c.k, c.k}, rng);
        const auto y = conv2d(Var<double>(x), Var<double>(w), {c.stride, c.pad, c.groups}).value();
        EXPECT_TRUE(bitwise_equal(y, ptaseg::testing::conv_reference(x, w, c.stride, c.pad, c.groups)))
            << c.x.str() << " k" << c.k << " s" << c.stride << " g" << c.groups;
    }
}

TEST(Conv2d, ForwardIsDeterministic)
{
    Rng rng(3);
    auto x = random_tensor<float>(Shape{2, 8, 16, 16}, rng);
    auto w = random_tensor<float>(Shape{8, 8, 3, 3}, rng);
    const auto a = conv2d(Var<float>(x), Var<float>(w), {1, 1, 1}).value();
    const auto b = conv2d(Var<float>(x), Var<float>(w), {1, 1, 1}).value();
    EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(BatchNorm, TrainingNormalizesUnitInput)
{
    // A channel with exactly mean 0 and variance 1 passes nearly unchanged.
    Tensor<double> x(Shape{1, 1, 2, 2});
    x[0] = 1.0, x[1] = -1.0, x[2] = 1.0, x[3] = -1.0;
    Tensor<double> gamma(Shape{1, 1, 1, 1}, 1.0), beta(Shape{1, 1, 1, 1}, 0.0);
    Tensor<double> rm(Shape{1, 1, 1, 1}, 0.0), rv(Shape{1, 1, 1, 1}, 1.0);
    const auto y = kernels::batchnorm_forward(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, EvalIsAffineInRunningStats)
{
    Rng rng(4);
    auto x = random_tensor<double>(Shape{2, 3, 4, 4}, rng);
    Tensor<double> gamma(Shape{1, 3, 1, 1}, 2.0), beta(Shape{1, 3, 1, 1}, 1.0);
    Tensor<double> rm(Shape{1, 3, 1, 1}, 0.0), rv(Shape{1, 3, 1, 1}, 1.0);
    const double eps = 1e-5;
    const auto y = kernels::batchnorm_forward(x, gamma, beta, rm, rv, false, 0.1, eps);
    for (std::size_t i = 0; i < x.numel(); ++i)
        EXPECT_NEAR(y[i], 2.0 * x[i] / std::sqrt(1.0 + eps) + 1.0, 1e-12);
    EXPECT_EQ(rm[0], 0.0);
    EXPECT_EQ(rv[0], 1.0);
}

TEST(BatchNorm, TrainingOutputStatistics)
{
    Rng rng(6);
    auto x = random_tensor<float>(Shape{1, 4, 16, 16}, rng, -3.0, 5.0);
    Tensor<float> gamma(Shape{1, 4, 1, 1}, 1.0f), beta(Shape{1, 4, 1, 1}, 0.0f);
    Tensor<float> rm(Shape{1, 4, 1, 1}, 0.0f), rv(Shape{1, 4, 1, 1}, 1.0f);
    const auto y = kernels::batchnorm_forward(x, gamma, beta, rm, rv, true, 0.1f, 1e-5f);
    for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < 256; ++i)
            mean += y.at(0, c, i / 16, i % 16);
        mean /= 256.0;
        for (std::size_t i = 0; i < 256; ++i)
            var += std::pow(y.at(0, c, i / 16, i % 16) - mean, 2);
        var /= 256.0;
        EXPECT_LE(std::abs(mean), 1e-5);
        EXPECT_NEAR(var, 1.0, 1e-3);
    }
    // Running statistics moved toward the batch statistics.
    EXPECT_NE(rm[0], 0.0f);
}

TEST(BatchNorm, RejectsNonPositiveEps)
{
    Tensor<float> x(Shape{1, 1, 2, 2}), g(Shape{1, 1, 1, 1}, 1.f), b(Shape{1, 1, 1, 1});
    Tensor<float> rm(Shape{1, 1, 1, 1}), rv(Shape{1, 1, 1, 1}, 1.f);
    EXPECT_THROW(kernels::batchnorm_forward(x, g, b, rm, rv, true, 0.1f, 0.0f), std::invalid_argument);
    EXPECT_THROW(kernels::batchnorm_forward(x, g, b, rm, rv, false, 0.1f, -1.0f), std::invalid_argument);
}

TEST(Relu6, Examples)
{
    Var<float> x(Tensor<float>(Shape{1, 1, 1, 3}, std::vector<float>{-1.0f, 3.5f, 100.0f}));
    const auto y = relu6(x).value();
    EXPECT_EQ(y[0], 0.0f);
    EXPECT_EQ(y[1], 3.5f);
    EXPECT_EQ(y[2], 6.0f);
}

TEST(Upsample, ConstantStaysConstant)
{
    Var<float> x(Tensor<float>(Shape{2, 3, 3, 5}, 1.25f));
    const auto y = upsample_bilinear2x(x).value();
    EXPECT_EQ(y.shape(), (Shape{2, 3, 6, 10}));
    for (float v : y.span())
        EXPECT_EQ(v, 1.25f);
}

TEST(Upsample, TwoSampleRowMatchesHalfPixelFormula)
{
    const double a = 2.0, b = 10.0;
    Var<double> x(Tensor<double>(Shape{1, 1, 1, 2}, std::vector<double>{a, b}));
    const auto y = upsample_bilinear2x(x).value();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
    // Output pixel j samples input coordinate (j + 0.5) / 2 - 0.5, clamped.
    for (std::size_t j = 0; j < 4; ++j) {
        const double src = std::clamp((j + 0.5) / 2.0 - 0.5, 0.0, 1.0);
        const double expect = a + (b - a) * src;
        EXPECT_DOUBLE_EQ(y.at(0, 0, 0, j), expect);
        EXPECT_DOUBLE_EQ(y.at(0, 0, 1, j), expect);
    }
}

TEST(Elementwise, Examples)
{
    Rng rng(8);
    Var<float> x(random_tensor<float>(Shape{1, 3, 4, 4}, rng));
    EXPECT_TRUE(bitwise_equal(mean2(x, x).value(), x.value()));

    const auto s = softmax_channels(Var<float>(Tensor<float>(Shape{1, 12, 3, 3}))).value();
    for (float v : s.span())
        EXPECT_FLOAT_EQ(v, 1.0f / 12.0f);

    Var<float> a(Tensor<float>(Shape{1, 3, 4, 4})), b(Tensor<float>(Shape{1, 5, 4, 4}));
    EXPECT_EQ(concat_channels(a, b).shape(), (Shape{1, 8, 4, 4}));
    EXPECT_THROW(concat_channels(a, Var<float>(Tensor<float>(Shape{1, 5, 4, 3}))), ShapeError);
    EXPECT_THROW(add(a, b), ShapeError);
    EXPECT_THROW(mean2(a, b), ShapeError);
}

TEST(Elementwise, SoftmaxSumsToOne)
{
    Rng rng(9);
    const auto s = softmax_channels(Var<float>(random_tensor<float>(Shape{2, 12, 5, 5}, rng, -20, 20))).value();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 25; ++i) {
            double total = 0.0;
            for (std::size_t c = 0; c < 12; ++c)
                total += s.at(n, c, i / 5, i % 5);
            EXPECT_NEAR(total, 1.0, 1e-6);
        }
}

TEST(Backward, SumGivesOnes)
{
    Rng rng(10);
    Var<float> x(random_tensor<float>(Shape{1, 2, 3, 3}, rng), true);
    GradTape<float> tape;
    Var<float> loss;
    {
        GradTape<float>::Scope scope(tape);
        loss = sum(x);
    }
    tape.backward(loss);
    const Tensor<float> g = x.grad();
    for (float v : g.span())
        EXPECT_EQ(v, 1.0f);
}

TEST(Backward, UnusedTensorsGetZeroGradient)
{
    Var<float> used(Tensor<float>(Shape{1, 1, 2, 2}, 1.f), true);
    Var<float> unused(Tensor<float>(Shape{1, 1, 2, 2}, 1.f), true);
    GradTape<float> tape;
    Var<float> loss;
    {
        GradTape<float>::Scope scope(tape);
        loss = sum(relu6(used));
    }
    tape.backward(loss);
    EXPECT_FALSE(unused.has_grad());
    const Tensor<float> g = unused.grad();
    for (float v : g.span())
        EXPECT_EQ(v, 0.0f);
    EXPECT_EQ(unused.grad().shape(), unused.shape());
}

TEST(Backward, RunsInReverseRecordingOrder)
{
    GradTape<float> tape;
    std::vector<int> order;
    for (int i = 0; i < 5; ++i)
        tape.record([&order, i] { order.push_back(i); });
    Var<float> loss(Tensor<float>::scalar(0.f), true);
    tape.backward(loss);
    EXPECT_EQ(order, (std::vector<int>{4, 3, 2, 1, 0}));
}

TEST(Backward, SecondBackwardIsAnError)
{
    Var<float> x(Tensor<float>(Shape{1, 1, 2, 2}, 1.f), true);
    GradTape<float> tape;
    Var<float> loss;
    {
        GradTape<float>::Scope scope(tape);
        loss = sum(x);
    }
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), std::logic_error);
    tape.reset();
    EXPECT_NO_THROW(GradTape<float>::Scope again(tape));
}

TEST(Backward, NonScalarLossRejected)
{
    Var<float> x(Tensor<float>(Shape{1, 1, 2, 2}, 1.f), true);
    GradTape<float> tape;
    Var<float> y;
    {
        GradTape<float>::Scope scope(tape);
        y = relu6(x);
    }
    EXPECT_THROW(tape.backward(y), ShapeError);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks, 10 random shapes per operator.

template <typename F>
void check_both_precisions(const char* op, F&& make_case)
{
    using namespace ptaseg::testing;
    run_gradcheck(op, make_case, [&](int trial, double ef, double ed) {
        if (std::getenv("PTASEG_PRINT_GRADCHECK"))
            std::printf("%s %d float %.3e double %.3e\n", op, trial, ef, ed);
        EXPECT_LT(ef, kFloatTol) << op << " trial " << trial << " (float)";
        EXPECT_LT(ed, kDoubleTol) << op << " trial " << trial << " (double)";
    });
}

TEST(GradCheck, Conv2d) { check_both_precisions("conv2d", ptaseg::testing::conv2d_case); }
TEST(GradCheck, DepthwiseConv2d) { check_both_precisions("depthwise", ptaseg::testing::depthwise_case); }
TEST(GradCheck, BatchNormTraining) { check_both_precisions("bn_train", ptaseg::testing::batchnorm_case<true>); }
TEST(GradCheck, BatchNormEval) { check_both_precisions("bn_eval", ptaseg::testing::batchnorm_case<false>); }
TEST(GradCheck, Relu6AwayFromKinks) { check_both_precisions("relu6", ptaseg::testing::relu6_case); }
TEST(GradCheck, Upsample) { check_both_precisions("upsample", ptaseg::testing::upsample_case); }
TEST(GradCheck, Concat) { check_both_precisions("concat", ptaseg::testing::concat_case); }
TEST(GradCheck, AddAndMean2) { check_both_precisions("add_mean2", ptaseg::testing::add_mean2_case); }
TEST(GradCheck, Softmax) { check_both_precisions("softmax", ptaseg::testing::softmax_case); }
TEST(GradCheck, GlobalAvgPoolAndSum) { check_both_precisions("pool_sum", ptaseg::testing::pool_sum_case); }
TEST(GradCheck, DiceLossMicro) { check_both_precisions("dice_micro", ptaseg::testing::dice_case<DiceReduction::Micro>); }
TEST(GradCheck, DiceLossMacro) { check_both_precisions("dice_macro", ptaseg::testing::dice_case<DiceReduction::Macro>); }

TEST(Observer, ShapeOnlyModeSkipsArithmetic)
{
    struct Count : ExecutionObserver {
        Count() : ExecutionObserver(true) { }
        void on_op(const OpEvent& e) override { macs += e.mult_adds; }
        std::uint64_t macs = 0;
    } obs;
    Var<float> x(Tensor<float>(Shape{1, 3, 16, 16}, 1.0f));
    Var<float> w(Tensor<float>(Shape{8, 3, 3, 3}, 1.0f));
    Tensor<float> y;
    {
        ObserverScope scope(obs);
        y = conv2d(x, w, {1, 1, 1}).value();
    }
    EXPECT_EQ(obs.macs, 55296u);
    EXPECT_EQ(y.shape(), (Shape{1, 8, 16, 16}));
    EXPECT_EQ(y[0], 0.0f);
}

} // namespace
