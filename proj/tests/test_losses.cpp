#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"

using namespace ekd;
using ekd::testing::random_tensor;
using ekd::testing::tiny_architecture;
using ekd::testing::values;

using TD = Tensor<double>;

namespace {

double entropy_row(const TD& p, std::size_t r, std::size_t C) {
    double h = 0;
    for (std::size_t c = 0; c < C; ++c) {
        const double v = p[r * C + c];
        if (v > 0) h -= v * std::log(v);
    }
    return h;
}

bool all_zero(const TD& t) {
    for (double g : t.grad())
        if (g != 0.0) return false;
    return true;
}

}  // namespace

TEST(Softmax, SoftenedClosedForm) {
    auto p = softened_softmax(TD({1, 2}, {2, 0}), 2.0);
    const double e = std::numbers::e;
    EXPECT_NEAR(p[0], e / (e + 1), 1e-12);
    EXPECT_NEAR(p[1], 1 / (e + 1), 1e-12);
    EXPECT_NEAR(p[0], 0.7311, 1e-4);
    EXPECT_THROW(softened_softmax(TD({1, 2}, {2, 0}), 0.0), ValueError);
}

TEST(Softmax, UnitTemperatureIsPlainSoftmax) {
    auto x = random_tensor({3, 5}, 1, false, -4, 4);
    EXPECT_EQ(values(softened_softmax(x, 1.0)), values(exp(log_softmax(x))));
}

TEST(Softmax, EntropyGrowsWithTemperatureTowardUniform) {
    auto x = random_tensor({20, 6}, 2, false, -5, 5);
    std::vector<double> prev(20, -1.0);
    for (double T : {1.0, 1.5, 2.0, 4.0, 10.0, 100.0, 1e6}) {
        auto p = softened_softmax(x, T);
        for (std::size_t r = 0; r < 20; ++r) {
            const double h = entropy_row(p, r, 6);
            EXPECT_GT(h, prev[r]);
            prev[r] = h;
        }
    }
    for (std::size_t r = 0; r < 20; ++r) EXPECT_NEAR(prev[r], std::log(6.0), 1e-9);
}

TEST(Softmax, RowsSumToOneAndArgmaxIsInvariant) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<double> v(8);
        for (auto& x : v) x = uniform(rng, -1e3, 1e3);
        TD logits({2, 4}, v);
        const double T = uniform(rng, 1.0, 50.0);
        auto p = softened_softmax(logits, T);
        for (std::size_t r = 0; r < 2; ++r) {
            double s = 0;
            std::size_t am = 0, ap = 0;
            for (std::size_t c = 0; c < 4; ++c) {
                s += p[r * 4 + c];
                if (v[r * 4 + c] > v[r * 4 + am]) am = c;
                if (p[r * 4 + c] > p[r * 4 + ap]) ap = c;
            }
            ASSERT_NEAR(s, 1.0, 1e-6);
            ASSERT_EQ(am, ap);
        }
    }
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
    std::vector<double> v(3 * 10, 0.0);
    std::vector<int> labels{1, 7, 0};
    for (std::size_t r = 0; r < 3; ++r) v[r * 10 + static_cast<std::size_t>(labels[r])] = 40.0;
    EXPECT_LT(cross_entropy(TD({3, 10}, v), labels).item(), 1e-10);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
    std::vector<int> labels{0, 3, 9, 5};
    EXPECT_NEAR(cross_entropy(TD::zeros({4, 10}), labels).item(), std::log(10.0), 1e-12);
    EXPECT_NEAR(cross_entropy_all<double>({TD::zeros({4, 10}), TD::full({4, 10}, 3.0)}, labels).item(),
                2 * std::log(10.0), 1e-12);
}

TEST(CrossEntropy, IdenticalStudentsScaleLinearly) {
    auto x = random_tensor({5, 4}, 4, false, -3, 3);
    std::vector<int> labels{0, 1, 2, 3, 0};
    const double single = cross_entropy(x, labels).item();
    for (std::size_t S = 1; S <= 5; ++S) {
        std::vector<double> per;
        auto total = cross_entropy_all(std::vector<TD>(S, x), labels, &per).item();
        EXPECT_NEAR(total, static_cast<double>(S) * single, 1e-12);
        EXPECT_EQ(per.size(), S);
    }
}

TEST(CrossEntropy, LabelOutOfRange) {
    std::vector<int> labels{0, 4};
    EXPECT_THROW(cross_entropy(TD::zeros({2, 4}), labels), ValueError);
    std::vector<int> negative{-1, 0};
    EXPECT_THROW(cross_entropy(TD::zeros({2, 4}), negative), ValueError);
}

TEST(Intermediate, ZeroWhenAdaptedMapMatches) {
    std::mt19937_64 rng(5);
    std::vector<std::array<AdaptationLayer<double>, kTapCount>> adapt(1);
    std::vector<std::array<TD, kTapCount>> taps(2);
    for (std::size_t t = 0; t < kTapCount; ++t) {
        adapt[0][t] = AdaptationLayer<double>::make(2, 2, rng);
        auto k = adapt[0][t].kernel.mutable_data();
        k[0] = 1, k[1] = 0, k[2] = 0, k[3] = 1;
        taps[0][t] = random_tensor({2, 2, 3, 3}, 10 + t);
        taps[1][t] = taps[0][t].clone();
    }
    EXPECT_EQ(intermediate_loss(taps, adapt).item(), 0.0);
}

TEST(Intermediate, UnitErrorPerTerm) {
    std::mt19937_64 rng(6);
    const std::size_t S = 4;
    std::vector<std::array<AdaptationLayer<double>, kTapCount>> adapt(S - 1);
    std::vector<std::array<TD, kTapCount>> taps(S);
    for (std::size_t t = 0; t < kTapCount; ++t) {
        taps[0][t] = TD::full({2, 5, 4 - t, 3}, 1.0);
        for (std::size_t l = 1; l < S; ++l) {
            adapt[l - 1][t] = AdaptationLayer<double>::make(l, 5, rng);
            for (auto& v : adapt[l - 1][t].kernel.mutable_data()) v = 0.0;
            taps[l][t] = random_tensor({2, l, 4 - t, 3}, 20 + l + t);
        }
    }
    EXPECT_DOUBLE_EQ(intermediate_loss(taps, adapt).item(), 3.0 * (S - 1));
}

TEST(Intermediate, ErrorsOnMissingTapOrSpatialMismatch) {
    std::mt19937_64 rng(7);
    std::vector<std::array<AdaptationLayer<double>, kTapCount>> adapt(1);
    std::vector<std::array<TD, kTapCount>> taps(2);
    for (std::size_t t = 0; t < kTapCount; ++t) {
        adapt[0][t] = AdaptationLayer<double>::make(2, 3, rng);
        taps[0][t] = TD::zeros({1, 3, 2, 2});
        taps[1][t] = TD::zeros({1, 2, 2, 2});
    }
    taps[1][1] = TD::zeros({1, 2, 3, 2});
    EXPECT_THROW(intermediate_loss(taps, adapt), ShapeError);
    taps[1][1] = TD();
    EXPECT_THROW(intermediate_loss(taps, adapt), ValueError);
    EXPECT_THROW(intermediate_loss(std::vector<std::array<TD, kTapCount>>(1), {}), ValueError);
}

TEST(Intermediate, PseudoTeacherReceivesNoGradient) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 3);
    std::mt19937_64 rng(8);
    detail::randomize(m.parameters(), rng);
    auto out = forward_ensemble(m, random_tensor({3, 1, 8, 8}, 9, false));
    backward(intermediate_loss(out.taps, m.adaptation));
    bool adapter_moved = false;
    for (const auto& p : m.parameters()) {
        if (p.name.rfind("student1.", 0) == 0) {
            EXPECT_TRUE(all_zero(p.tensor)) << p.name;
        }
        if (p.name.rfind("adapt", 0) == 0 && !all_zero(p.tensor)) adapter_moved = true;
    }
    EXPECT_TRUE(adapter_moved);
}

TEST(Kd, IdenticalStudentsGiveZero) {
    auto x = random_tensor({4, 5}, 10, false, -3, 3);
    auto teacher = mean_of<double>({x, x, x});
    EXPECT_EQ(kd_loss<double>({x, x, x}, teacher, 2.0).item(), 0.0);
}

TEST(Kd, ClosedFormKl) {
    // Distributions given directly as log-probabilities at T = 1, and as logits doubled at T = 2.
    TD teacher({1, 2}, {std::log(0.75), std::log(0.25)});
    TD student({1, 2}, {0.0, 0.0});
    const double expect = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
    EXPECT_NEAR(kd_loss<double>({student}, teacher, 1.0).item(), expect, 1e-12);
    EXPECT_NEAR(kd_loss<double>({student}, scale(teacher, 2.0), 2.0).item(), expect, 1e-12);
    EXPECT_NEAR(expect, 0.13081, 1e-5);
    // Batch mean: two identical rows give the same value.
    TD t2({2, 2}, {std::log(0.75), std::log(0.25), std::log(0.75), std::log(0.25)});
    EXPECT_NEAR(kd_loss<double>({TD::zeros({2, 2})}, t2, 1.0).item(), expect, 1e-12);
}

TEST(Kd, NonNegativeOnRandomLogits) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> a(6), b(6);
        for (auto& v : a) v = uniform(rng, -10, 10);
        for (auto& v : b) v = uniform(rng, -10, 10);
        ASSERT_GE(kd_loss<double>({TD({2, 3}, a)}, TD({2, 3}, b), uniform(rng, 1, 5)).item(), 0.0);
    }
}

TEST(Kd, DetachedTeacherGetsNoGradient) {
    auto s = random_tensor({3, 4}, 12), t = random_tensor({3, 4}, 13);
    backward(kd_loss<double>({s}, t, 2.0));
    EXPECT_FALSE(t.has_grad());
    EXPECT_FALSE(all_zero(s));
    s.zero_grad();
    backward(kd_loss<double>({s}, t, 2.0, true));
    EXPECT_FALSE(all_zero(t));
}

TEST(Kd, ShapeMismatch) {
    EXPECT_THROW(kd_loss<double>({TD::zeros({2, 3})}, TD::zeros({2, 4}), 2.0), ShapeError);
}

TEST(Combine, Arithmetic) {
    LossWeights w;
    EXPECT_NEAR(combine(1, 1, 1, w), 1.0, 1e-15);
    EXPECT_NEAR(combine(2, 0, 0, w), 1.4, 1e-15);
    EXPECT_EQ(w.temperature, 2.0);
}

TEST(Combine, IsLinearInEachComponent) {
    LossWeights w;
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 100; ++trial) {
        const double n = uniform(rng, 0, 5), i = uniform(rng, 0, 5), k = uniform(rng, 0, 5), d = uniform(rng, -1, 1);
        const double base = combine(n, i, k, w);
        EXPECT_NEAR(combine(n + d, i, k, w) - base, w.alpha * d, 1e-12);
        EXPECT_NEAR(combine(n, i + d, k, w) - base, w.beta * d, 1e-12);
        EXPECT_NEAR(combine(n, i, k + d, w) - base, w.gamma * d, 1e-12);
    }
}

TEST(Combine, RejectsInvalidWeights) {
    EXPECT_THROW(validate(LossWeights{0.5, 0.15, 0.15, 2.0}), ValueError);
    EXPECT_THROW(validate(LossWeights{1.2, -0.1, -0.1, 2.0}), ValueError);
    EXPECT_THROW(validate(LossWeights{0.7, 0.15, 0.15, 0.5}), ValueError);
    EXPECT_NO_THROW(validate(baseline_weights()));
}

TEST(Bundle, CombinedIsTheWeightedSum) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 15);
    auto out = forward_ensemble(m, random_tensor({4, 1, 8, 8}, 16, false));
    std::vector<int> labels{0, 1, 2, 0};
    auto b = compute_losses(m, out, labels, LossWeights{});
    EXPECT_TRUE(b.has_intermediate);
    EXPECT_TRUE(b.has_kd);
    EXPECT_NEAR(b.combined.item(), combine(b.normal.item(), b.intermediate.item(), b.kd.item(), LossWeights{}),
                1e-12);
    EXPECT_GE(b.normal.item(), 0.0);
    EXPECT_GE(b.intermediate.item(), 0.0);
    EXPECT_GE(b.kd.item(), 0.0);
    EXPECT_EQ(b.per_student_ce.size(), 3u);
}

TEST(Bundle, BaselineWeightsReduceToCrossEntropy) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 15);
    auto out = forward_ensemble(m, random_tensor({4, 1, 8, 8}, 16, false));
    std::vector<int> labels{0, 1, 2, 0};
    auto b = compute_losses(m, out, labels, baseline_weights());
    EXPECT_EQ(b.combined.item(), b.normal.item());
}

TEST(Bundle, SingleIndependentStudentHasOnlyCrossEntropy) {
    auto m = build_baseline<double>(tiny_architecture(), 1, 2);
    auto out = forward_ensemble(m, random_tensor({2, 1, 8, 8}, 3, false));
    std::vector<int> labels{1, 2};
    auto b = compute_losses(m, out, labels, baseline_weights());
    EXPECT_FALSE(b.has_intermediate);
    EXPECT_FALSE(b.has_kd);
    EXPECT_EQ(b.combined.item(), cross_entropy(out.logits[0], labels).item());
}
