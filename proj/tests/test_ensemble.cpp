#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace ekd;
using ekd::testing::random_tensor;
using ekd::testing::tiny_architecture;
using ekd::testing::values;

using TD = Tensor<double>;

namespace {

ArchitectureSpec chain_architecture(std::size_t classes = 10) {
    RunConfig c;
    c.input_shape = {3, 16, 16};
    c.block_text = {"conv:16:3:1", "res:16:3:1", "res:32:3:2", "res:64:3:2"};
    return architecture(c, classes);
}

std::vector<std::size_t> branch_widths(const EnsembleModel<double>& m, std::size_t i) {
    std::vector<std::size_t> w;
    for (const auto& b : m.students[i - 1].blocks) w.push_back(b.out_channels());
    return w;
}

}  // namespace

TEST(AssignChannels, FigureOneRatios) {
    EXPECT_EQ(assign_channels(96, 3, 1), 96u);
    EXPECT_EQ(assign_channels(96, 3, 2), 64u);
    EXPECT_EQ(assign_channels(96, 3, 3), 32u);
}

TEST(AssignChannels, FourStudentRatios) {
    const std::vector<std::size_t> expect{64, 48, 32, 16};
    for (std::size_t i = 1; i <= 4; ++i) EXPECT_EQ(assign_channels(64, 4, i), expect[i - 1]);
}

TEST(AssignChannels, FloorAndRounding) {
    EXPECT_EQ(assign_channels(1, 5, 5), 1u);
    EXPECT_EQ(assign_channels(3, 2, 2), 2u);   // 1.5 rounds away from zero
    EXPECT_EQ(assign_channels(5, 4, 3), 3u);   // 2.5
    EXPECT_EQ(assign_channels(10, 3, 3), 3u);  // 3.33
    EXPECT_THROW(assign_channels(4, 3, 0), ValueError);
    EXPECT_THROW(assign_channels(4, 3, 4), ValueError);
}

TEST(AssignChannels, RatioLaw) {
    for (std::size_t S = 1; S <= 8; ++S) {
        EXPECT_EQ(channel_ratio(S, 1), 1.0);
        for (std::size_t i = 1; i <= S; ++i) {
            EXPECT_DOUBLE_EQ(channel_ratio(S, i), static_cast<double>(S - i + 1) / static_cast<double>(S));
            for (std::size_t M : {1, 7, 16, 100}) {
                const double exact = static_cast<double>(M) * channel_ratio(S, i);
                const auto got = assign_channels(M, S, i);
                EXPECT_LE(std::abs(static_cast<double>(got) - std::max(1.0, exact)), 0.5 + 1e-12);
            }
            if (i > 1) {
                EXPECT_LT(channel_ratio(S, i), channel_ratio(S, i - 1));
            }
        }
    }
}

TEST(Ensemble, BranchChannelChains) {
    auto m = build_ensemble<double>(chain_architecture(), 3, 1);
    EXPECT_EQ(branch_widths(m, 1), (std::vector<std::size_t>{16, 32, 64}));
    EXPECT_EQ(branch_widths(m, 2), (std::vector<std::size_t>{11, 21, 43}));
    EXPECT_EQ(branch_widths(m, 3), (std::vector<std::size_t>{5, 11, 21}));
    EXPECT_EQ(m.bases.size(), 1u);
    EXPECT_EQ(m.bases[0].out_channels(), 16u);
    EXPECT_EQ(m.ratios, (std::vector<double>{1.0, 2.0 / 3.0, 1.0 / 3.0}));
}

TEST(Ensemble, TwoStudentsHalfWidth) {
    auto m = build_ensemble<double>(chain_architecture(), 2, 1);
    EXPECT_EQ(m.ratios[1], 0.5);
    EXPECT_EQ(branch_widths(m, 2), (std::vector<std::size_t>{8, 16, 32}));
}

TEST(Ensemble, AdaptationLayersOnlyForCompressedStudents) {
    auto m = build_ensemble<double>(chain_architecture(), 4, 1);
    ASSERT_EQ(m.adaptation.size(), 3u);
    for (std::size_t i = 2; i <= 4; ++i)
        for (std::size_t t = 0; t < kTapCount; ++t) {
            EXPECT_EQ(m.adapter(i, t).student_channels(), m.students[i - 1].blocks[t].out_channels());
            EXPECT_EQ(m.adapter(i, t).teacher_channels(), m.students[0].blocks[t].out_channels());
        }
    std::size_t adapt_params = 0;
    for (const auto& p : m.parameters())
        if (p.name.rfind("adapt", 0) == 0) {
            ++adapt_params;
            EXPECT_NE(p.name.rfind("adapt1", 0), 0u) << p.name;
        }
    EXPECT_EQ(adapt_params, 3u * kTapCount * 2u);
}

TEST(Ensemble, ParameterNamesArePrefixed) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 1);
    for (const auto& p : m.parameters()) {
        const bool ok = p.name.rfind("base.", 0) == 0 || p.name.rfind("student", 0) == 0 ||
                        p.name.rfind("adapt", 0) == 0;
        EXPECT_TRUE(ok) << p.name;
    }
}

TEST(Ensemble, RejectsBadConfigurations) {
    EXPECT_THROW(build_ensemble<double>(tiny_architecture(), 1, 1), ValueError);
    EXPECT_THROW(build_ensemble<double>(tiny_architecture(), 3, 1, {0.5, 0.5}), ValueError);
    EXPECT_THROW(build_ensemble<double>(tiny_architecture(), 2, 1, {0.7, 0.7}), ValueError);
    auto spec = tiny_architecture();
    spec.classifier.in_channels += 1;
    EXPECT_THROW(build_ensemble<double>(spec, 2, 1), ValueError);
}

TEST(Ensemble, QuadraticCompression) {
    RunConfig c;
    c.input_shape = {3, 32, 32};
    c.block_text = {"conv:16:3:1", "res:32:3:1:2", "res:64:3:2:2", "res:128:3:2:2"};
    const auto spec = architecture(c, 10);
    for (std::size_t S : {2, 3, 5}) {
        auto m = build_ensemble<float>(spec, S, 1);
        const double teacher = static_cast<double>(branch_param_count(m, 1));
        for (std::size_t i = 2; i <= S; ++i) {
            const double r = channel_ratio(S, i);
            const double rel = static_cast<double>(branch_param_count(m, i)) / teacher;
            EXPECT_GE(rel, r * r * 0.9) << "S=" << S << " i=" << i;
            EXPECT_LE(rel, r * r * 1.1) << "S=" << S << " i=" << i;
        }
    }
}

TEST(Ensemble, TeacherIsExactMeanOfStudents) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 4);
    std::mt19937_64 rng(5);
    detail::randomize(m.parameters(), rng);
    auto x = random_tensor({4, 1, 8, 8}, 6, false);
    auto out = forward_ensemble(m, x);
    ASSERT_EQ(out.logits.size(), 3u);
    for (std::size_t k = 0; k < out.teacher_logits.size(); ++k) {
        const double mean = (out.logits[0][k] + out.logits[1][k] + out.logits[2][k]) / 3.0;
        EXPECT_EQ(out.teacher_logits[k] - mean, 0.0);
    }
}

TEST(Ensemble, MeanOfTwoLogitRows) {
    auto t = mean_of<double>({TD({1, 2}, {1, 3}), TD({1, 2}, {3, 1})});
    EXPECT_EQ(values(t), (std::vector<double>{2, 2}));
}

TEST(Ensemble, IdenticalStudentsGiveTheirOwnLogits) {
    auto m = build_ensemble<double>(tiny_architecture(), 2, 7);
    m.students[1] = m.students[0].clone();
    auto out = forward_ensemble(m, random_tensor({3, 1, 8, 8}, 8, false));
    EXPECT_EQ(values(out.teacher_logits), values(out.logits[0]));
    EXPECT_EQ(values(out.logits[1]), values(out.logits[0]));
}

TEST(Ensemble, WeightedTeacher) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 4, {0.5, 0.3, 0.2});
    auto out = forward_ensemble(m, random_tensor({2, 1, 8, 8}, 9, false));
    for (std::size_t k = 0; k < out.teacher_logits.size(); ++k)
        EXPECT_NEAR(out.teacher_logits[k],
                    0.5 * out.logits[0][k] + 0.3 * out.logits[1][k] + 0.2 * out.logits[2][k], 1e-14);
}

TEST(Ensemble, BaseRunsOncePerBatch) {
    for (std::size_t S : {2, 5}) {
        auto m = build_ensemble<float>(tiny_architecture(), S, 1);
        m.bases[0].forward_calls = 0;
        forward_ensemble(m, Tensor<float>::zeros({2, 1, 8, 8}));
        EXPECT_EQ(m.bases[0].forward_calls, 1u);
        for (const auto& s : m.students) EXPECT_EQ(s.blocks[0].forward_calls, 1u);
    }
}

TEST(Ensemble, TapsAreBranchBlockOutputs) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 1);
    auto out = forward_ensemble(m, random_tensor({2, 1, 8, 8}, 3, false));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t t = 0; t < kTapCount; ++t)
            EXPECT_EQ(out.taps[i][t].dim(1), m.students[i].blocks[t].out_channels());
    EXPECT_EQ(out.taps[0][2].dim(2), 2u);
}

TEST(Ensemble, RejectsWrongInputShape) {
    auto m = build_ensemble<double>(tiny_architecture(), 2, 1);
    EXPECT_THROW(forward_ensemble(m, TD::zeros({2, 1, 9, 8})), ShapeError);
    EXPECT_THROW(forward_ensemble(m, TD::zeros({2, 2, 8, 8})), ShapeError);
}

TEST(Extraction, BitIdenticalToBranch) {
    auto m = build_ensemble<float>(tiny_architecture(), 4, 11);
    std::mt19937_64 rng(12);
    for (auto p : m.parameters())
        for (auto& v : p.tensor.mutable_data()) v = static_cast<float>(uniform(rng, -0.5, 0.5));
    Tensor<float> x({5, 1, 8, 8}, std::vector<float>(320));
    for (auto& v : x.mutable_data()) v = static_cast<float>(uniform(rng, -2, 2));
    auto out = forward_ensemble(m, x);
    for (std::size_t i = 1; i <= 4; ++i) {
        auto s = extract_student(m, i);
        EXPECT_EQ(values(s.forward(x)), values(out.logits[i - 1])) << "student " << i;
    }
}

TEST(Extraction, FirstStudentIsTheFullArchitecture) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 1);
    auto s = extract_student(m, 1);
    EXPECT_EQ(s.ratio, 1.0);
    for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(s.branch.blocks[b].spec, m.spec.blocks[b + 1]);
    EXPECT_THROW(extract_student(m, 0), ValueError);
    EXPECT_THROW(extract_student(m, 4), ValueError);
}

TEST(Extraction, CopyIsIndependentOfTheEnsemble) {
    auto m = build_ensemble<double>(tiny_architecture(), 2, 1);
    auto s = extract_student(m, 2);
    auto x = random_tensor({1, 1, 8, 8}, 2, false);
    const auto before = values(s.forward(x));
    for (auto p : m.parameters())
        for (auto& v : p.tensor.mutable_data()) v += 1.0;
    EXPECT_EQ(values(s.forward(x)), before);
}

TEST(Extraction, ExcludesAdaptationLayers) {
    auto m = build_ensemble<double>(tiny_architecture(), 3, 1);
    for (const auto& p : extract_student(m, 3).parameters()) EXPECT_EQ(p.name.find("adapt"), std::string::npos);
}

TEST(Baseline, MatchesEnsembleInitialization) {
    const auto spec = tiny_architecture();
    auto e = build_ensemble<double>(spec, 3, 21);
    auto b = build_baseline<double>(spec, 3, 21);
    EXPECT_FALSE(b.shared_base);
    EXPECT_TRUE(b.adaptation.empty());
    ASSERT_EQ(b.bases.size(), 3u);
    ParamRegistry<double> eb;
    e.bases[0].collect("base", eb);
    for (std::size_t i = 1; i <= 3; ++i) {
        ParamRegistry<double> bb, es, bs;
        b.bases[i - 1].collect("base", bb);
        for (std::size_t k = 0; k < eb.size(); ++k)
            EXPECT_EQ(values(bb.items()[k].tensor), values(eb.items()[k].tensor));
        e.students[i - 1].collect("s", es);
        b.students[i - 1].collect("s", bs);
        for (std::size_t k = 0; k < es.size(); ++k)
            EXPECT_EQ(values(bs.items()[k].tensor), values(es.items()[k].tensor));
    }
    // Private bases are separate tensors.
    EXPECT_FALSE(b.bases[0].layers.empty());
    ParamRegistry<double> b0, b1;
    b.bases[0].collect("x", b0);
    b.bases[1].collect("x", b1);
    EXPECT_FALSE(b0.items()[0].tensor.same(b1.items()[0].tensor));
}
