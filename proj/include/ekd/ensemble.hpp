#pragma once

// Expansion of one four-block architecture into a shared-base ensemble of
// progressively narrower student branches, plus standalone student extraction.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ekd/layers.hpp"

namespace ekd {

/// Tap locations per branch: outputs of blocks 2, 3 and 4.
inline constexpr std::size_t kTapCount = 3;

struct ArchitectureSpec {
    std::array<BlockSpec, 4> blocks;  // blocks[0] is the shared base
    LayerSpec classifier{LayerKind::Linear, 1, 1, 1, 1, 1};
    std::size_t num_classes = 2;
    std::array<std::size_t, 3> input_shape{1, 32, 32};  // channels, H, W

    bool operator==(const ArchitectureSpec&) const = default;
};

inline void validate(const ArchitectureSpec& spec) {
    std::size_t channels = spec.input_shape[0];
    std::size_t h = spec.input_shape[1], w = spec.input_shape[2];
    if (channels < 1 || h < 1 || w < 1) throw ValueError("architecture: input shape must be positive");
    for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
        const auto& block = spec.blocks[b];
        if (block.block_index != b + 1)
            throw ValueError("architecture: block " + std::to_string(b + 1) + " has index " +
                             std::to_string(block.block_index));
        validate(block);
        if (block.in_channels() != channels)
            throw ValueError("architecture: block " + std::to_string(b + 1) + " expects " +
                             std::to_string(block.in_channels()) + " input channels but receives " +
                             std::to_string(channels));
        channels = block.out_channels();
        h = output_extent(block, h);
        w = output_extent(block, w);
    }
    if (spec.classifier.kind != LayerKind::Linear) throw ValueError("architecture: classifier must be linear");
    if (spec.classifier.in_channels != channels)
        throw ValueError("architecture: classifier expects " + std::to_string(spec.classifier.in_channels) +
                         " inputs but block 4 produces " + std::to_string(channels));
    if (spec.num_classes < 2) throw ValueError("architecture: need at least 2 classes");
    if (spec.classifier.out_channels != spec.num_classes)
        throw ValueError("architecture: classifier width " + std::to_string(spec.classifier.out_channels) +
                         " differs from num_classes " + std::to_string(spec.num_classes));
}

/// Channel count of student `i` (1-based) for a layer with `M` channels in the
/// pseudo teacher: max(1, round(M * (S - i + 1) / S)), halves rounded away from zero.
inline std::size_t assign_channels(std::size_t M, std::size_t S, std::size_t i) {
    if (S < 1 || i < 1 || i > S) throw ValueError("assign_channels: student index out of range");
    const std::size_t num = M * (S - i + 1);
    std::size_t q = num / S;
    if (2 * (num % S) >= S) ++q;
    return q < 1 ? 1 : q;
}

inline double channel_ratio(std::size_t S, std::size_t i) {
    return static_cast<double>(S - i + 1) / static_cast<double>(S);
}

/// Block spec for student `i`: every output width passes through assign_channels,
/// input widths follow the (possibly unscaled) predecessor.
inline BlockSpec scale_block(const BlockSpec& block, std::size_t in_channels, std::size_t S, std::size_t i) {
    BlockSpec out = block;
    std::size_t prev = in_channels;
    for (auto& l : out.layers) {
        l.in_channels = prev;
        if (l.kind == LayerKind::Conv || l.kind == LayerKind::Residual)
            l.out_channels = assign_channels(l.out_channels, S, i);
        else
            l.out_channels = prev;
        prev = l.out_channels;
    }
    return out;
}

/// Branch block specs (blocks 2-4) of student i.
inline std::array<BlockSpec, 3> student_blocks(const ArchitectureSpec& spec, std::size_t S, std::size_t i) {
    std::array<BlockSpec, 3> out;
    std::size_t prev = spec.blocks[0].out_channels();
    for (std::size_t b = 0; b < 3; ++b) {
        out[b] = scale_block(spec.blocks[b + 1], prev, S, i);
        prev = out[b].out_channels();
    }
    return out;
}

/// Blocks 2-4 plus the classifier of one student.
template <typename T>
struct StudentBranch {
    std::array<Block<T>, 3> blocks;
    LinearLayer<T> head;

    /// Runs the branch from the base output; writes block outputs into `taps` when given.
    Tensor<T> forward(const Tensor<T>& base_out, std::array<Tensor<T>, kTapCount>* taps = nullptr) const {
        Tensor<T> h = base_out;
        for (std::size_t b = 0; b < 3; ++b) {
            h = forward_block(blocks[b], h);
            if (taps) (*taps)[b] = h;
        }
        return head.forward(h);
    }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        for (std::size_t b = 0; b < 3; ++b) blocks[b].collect(prefix + ".b" + std::to_string(b + 2), reg);
        head.collect(prefix + ".head", reg);
    }

    StudentBranch clone() const {
        return {{blocks[0].clone(), blocks[1].clone(), blocks[2].clone()}, head.clone()};
    }
};

template <typename T>
StudentBranch<T> build_branch(const ArchitectureSpec& spec, std::size_t S, std::size_t i, std::mt19937_64& rng) {
    auto specs = student_blocks(spec, S, i);
    StudentBranch<T> br{{build_block<T>(specs[0], rng), build_block<T>(specs[1], rng), build_block<T>(specs[2], rng)},
                        LinearLayer<T>::make(specs[2].out_channels(), spec.num_classes, rng)};
    return br;
}

/// Shared base + S branches + adaptation layers for students 2..S.
///
/// In the independent (baseline) layout every student owns a private copy of
/// the base and there are no adaptation layers.
template <typename T>
struct EnsembleModel {
    ArchitectureSpec spec;
    std::size_t S = 0;
    std::vector<double> ratios;
    bool shared_base = true;
    std::vector<Block<T>> bases;  // size 1 when shared, S otherwise
    std::vector<StudentBranch<T>> students;
    std::vector<std::array<AdaptationLayer<T>, kTapCount>> adaptation;  // [0] belongs to student 2
    std::vector<T> teacher_weights;                                       // empty = uniform mean

    const Block<T>& base_for(std::size_t i) const { return shared_base ? bases[0] : bases.at(i - 1); }

    const AdaptationLayer<T>& adapter(std::size_t student, std::size_t tap) const {
        return adaptation.at(student - 2).at(tap);
    }

    ParamRegistry<T> parameters() const {
        ParamRegistry<T> reg;
        if (shared_base) bases[0].collect("base", reg);
        for (std::size_t i = 1; i <= S; ++i) {
            const std::string p = "student" + std::to_string(i);
            if (!shared_base) bases[i - 1].collect(p + ".base", reg);
            students[i - 1].collect(p, reg);
        }
        for (std::size_t i = 2; i < 2 + adaptation.size(); ++i)
            for (std::size_t t = 0; t < kTapCount; ++t)
                adaptation[i - 2][t].collect("adapt" + std::to_string(i) + "." + std::to_string(t + 1), reg);
        return reg;
    }

    EnsembleModel clone() const {
        EnsembleModel m;
        m.spec = spec;
        m.S = S;
        m.ratios = ratios;
        m.shared_base = shared_base;
        for (const auto& b : bases) m.bases.push_back(b.clone());
        for (const auto& s : students) m.students.push_back(s.clone());
        for (const auto& a : adaptation)
            m.adaptation.push_back({a[0].clone(), a[1].clone(), a[2].clone()});
        m.teacher_weights = teacher_weights;
        return m;
    }
};

namespace detail {

template <typename T>
EnsembleModel<T> build_common(const ArchitectureSpec& spec, std::size_t S, std::uint64_t seed, bool shared) {
    validate(spec);
    std::mt19937_64 rng(seed);
    EnsembleModel<T> m;
    m.spec = spec;
    m.S = S;
    m.shared_base = shared;
    for (std::size_t i = 1; i <= S; ++i) m.ratios.push_back(channel_ratio(S, i));
    // Draw order (base, students 1..S, adaptation) keeps student initializations
    // identical between the shared and independent layouts.
    Block<T> base = build_block<T>(spec.blocks[0], rng);
    for (std::size_t i = 1; i <= S; ++i) m.students.push_back(build_branch<T>(spec, S, i, rng));
    if (shared) {
        m.bases.push_back(std::move(base));
        for (std::size_t i = 2; i <= S; ++i) {
            std::array<AdaptationLayer<T>, kTapCount> taps;
            for (std::size_t t = 0; t < kTapCount; ++t)
                taps[t] = AdaptationLayer<T>::make(m.students[i - 1].blocks[t].out_channels(),
                                                   m.students[0].blocks[t].out_channels(), rng);
            m.adaptation.push_back(std::move(taps));
        }
    } else {
        for (std::size_t i = 1; i <= S; ++i) m.bases.push_back(base.clone());
    }
    return m;
}

}  // namespace detail

/// Ensemble of S >= 2 students over a shared base, deterministically initialized from `seed`.
template <typename T>
EnsembleModel<T> build_ensemble(const ArchitectureSpec& spec, std::size_t S, std::uint64_t seed,
                                std::vector<T> teacher_weights = {}) {
    if (S < 2) throw ValueError("ensemble needs at least 2 students, got " + std::to_string(S));
    if (!teacher_weights.empty()) {
        if (teacher_weights.size() != S) throw ValueError("teacher weights: need one weight per student");
        double total = 0;
        for (T w : teacher_weights) {
            if (w < T{0}) throw ValueError("teacher weights must be non-negative");
            total += static_cast<double>(w);
        }
        if (std::abs(total - 1.0) > 1e-6) throw ValueError("teacher weights must sum to 1");
    }
    auto m = detail::build_common<T>(spec, S, seed, true);
    m.teacher_weights = std::move(teacher_weights);
    return m;
}

/// The same S students as build_ensemble(spec, S, seed), each with its own copy
/// of the base and no adaptation layers: S independent models with matched initialization.
template <typename T>
EnsembleModel<T> build_baseline(const ArchitectureSpec& spec, std::size_t S, std::uint64_t seed) {
    if (S < 1) throw ValueError("baseline needs at least 1 student");
    return detail::build_common<T>(spec, S, seed, false);
}

template <typename T>
struct EnsembleOutput {
    std::vector<Tensor<T>> logits;                          // per student, [N, C]
    Tensor<T> teacher_logits;                               // [N, C]
    std::vector<std::array<Tensor<T>, kTapCount>> taps;     // per student, block 2..4 outputs
};

template <typename T>
void check_input(const ArchitectureSpec& spec, const Tensor<T>& batch) {
    if (batch.rank() != 4 || batch.dim(1) != spec.input_shape[0] || batch.dim(2) != spec.input_shape[1] ||
        batch.dim(3) != spec.input_shape[2])
        throw ShapeError("input batch " + to_string(batch.shape()) + " does not match [N," +
                         std::to_string(spec.input_shape[0]) + "," + std::to_string(spec.input_shape[1]) + "," +
                         std::to_string(spec.input_shape[2]) + "]");
}

template <typename T>
EnsembleOutput<T> forward_ensemble(const EnsembleModel<T>& model, const Tensor<T>& batch) {
    check_input(model.spec, batch);
    EnsembleOutput<T> out;
    out.taps.resize(model.S);
    Tensor<T> shared;
    if (model.shared_base) shared = forward_block(model.bases[0], batch);
    for (std::size_t i = 1; i <= model.S; ++i) {
        const Tensor<T> h = model.shared_base ? shared : forward_block(model.bases[i - 1], batch);
        out.logits.push_back(model.students[i - 1].forward(h, &out.taps[i - 1]));
    }
    out.teacher_logits = model.teacher_weights.empty() ? mean_of(out.logits)
                                                       : weighted_sum(out.logits, model.teacher_weights);
    return out;
}

/// Self-contained single student: a private base plus one branch, no adaptation layers.
template <typename T>
struct StudentModel {
    ArchitectureSpec spec;
    std::size_t S = 1;
    std::size_t index = 1;
    double ratio = 1.0;
    Block<T> base;
    StudentBranch<T> branch;

    Tensor<T> forward(const Tensor<T>& batch) const {
        check_input(spec, batch);
        return branch.forward(forward_block(base, batch));
    }

    /// Logits plus the last-block feature map.
    Tensor<T> forward_features(const Tensor<T>& batch, Tensor<T>& last_map) const {
        check_input(spec, batch);
        std::array<Tensor<T>, kTapCount> taps;
        auto logits = branch.forward(forward_block(base, batch), &taps);
        last_map = taps[kTapCount - 1];
        return logits;
    }

    ParamRegistry<T> parameters() const {
        ParamRegistry<T> reg;
        base.collect("base", reg);
        branch.collect("student" + std::to_string(index), reg);
        return reg;
    }
};

template <typename T>
StudentModel<T> extract_student(const EnsembleModel<T>& model, std::size_t i) {
    if (i < 1 || i > model.S)
        throw ValueError("student index " + std::to_string(i) + " out of range [1," + std::to_string(model.S) + "]");
    return {model.spec, model.S, i, model.ratios[i - 1], model.base_for(i).clone(), model.students[i - 1].clone()};
}

/// Student i's architecture with arbitrary initial values, to be filled from a file.
template <typename T>
StudentModel<T> student_skeleton(const ArchitectureSpec& spec, std::size_t S, std::size_t i) {
    validate(spec);
    if (i < 1 || i > S) throw ValueError("student index out of range");
    std::mt19937_64 rng(0);
    StudentModel<T> m{spec, S, i, channel_ratio(S, i), build_block<T>(spec.blocks[0], rng),
                      build_branch<T>(spec, S, i, rng)};
    return m;
}

}  // namespace ekd
