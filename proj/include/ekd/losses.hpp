#pragma once

// Loss system for online ensemble distillation:
//   normal        sum over students of batch-mean cross-entropy
//   intermediate  sum over students 2..S and the three taps of the element-mean
//                 squared error between adapted student maps and the detached
//                 pseudo-teacher maps
//   kd            sum over students of batch-mean KL(teacher || student), both
//                 softened at temperature T, teacher detached
//   combined      alpha * normal + beta * intermediate + gamma * kd

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ekd/ensemble.hpp"

namespace ekd {

struct LossWeights {
    double alpha = 0.7;
    double beta = 0.15;
    double gamma = 0.15;
    double temperature = 2.0;
    bool kd_teacher_grad = false;  // let the KD gradient flow through the ensemble average
    bool kd_t2_scale = false;      // multiply the KD term by T^2

    bool operator==(const LossWeights&) const = default;
};

inline void validate(const LossWeights& w) {
    if (w.alpha < 0 || w.beta < 0 || w.gamma < 0)
        throw ValueError("loss weights must be non-negative");
    const double total = w.alpha + w.beta + w.gamma;
    if (std::abs(total - 1.0) > 1e-9)
        throw ValueError("loss weights sum to " + std::to_string(total) + ", expected 1");
    if (!(w.temperature >= 1.0)) throw ValueError("temperature must be >= 1");
}

/// Weights for the independent-training comparison arm: cross-entropy only.
inline LossWeights baseline_weights(double temperature = 2.0) {
    return {1.0, 0.0, 0.0, temperature, false, false};
}

template <typename T>
struct LossBundle {
    Tensor<T> normal;
    Tensor<T> intermediate;
    Tensor<T> kd;
    Tensor<T> combined;
    std::vector<T> per_student_ce;
    bool has_intermediate = false;
    bool has_kd = false;
};

/// Row-wise log of softmax(logits / T).
template <typename T>
Tensor<T> softened_log_softmax(const Tensor<T>& logits, double temperature) {
    if (!(temperature > 0)) throw ValueError("temperature must be positive");
    if (temperature == 1.0) return log_softmax(logits);
    return log_softmax(scale(logits, static_cast<T>(1.0 / temperature)));
}

/// softmax(logits / T), computed through the log-space path.
template <typename T>
Tensor<T> softened_softmax(const Tensor<T>& logits, double temperature) {
    return exp(softened_log_softmax(logits, temperature));
}

/// Batch-mean cross-entropy of one student.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    auto picked = gather_rows(log_softmax(logits), labels);
    return scale(mean(picked), T{-1});
}

/// Sum over students of batch-mean cross-entropy. Writes per-student values when asked.
template <typename T>
Tensor<T> cross_entropy_all(const std::vector<Tensor<T>>& logits, std::span<const int> labels,
                            std::vector<T>* per_student = nullptr) {
    if (logits.empty()) throw ValueError("cross_entropy_all: no students");
    std::vector<Tensor<T>> terms;
    for (const auto& l : logits) {
        terms.push_back(cross_entropy(l, labels));
        if (per_student) per_student->push_back(terms.back().item());
    }
    return terms.size() == 1 ? terms[0] : weighted_sum(terms, std::vector<T>(terms.size(), T{1}));
}

/// Element-mean squared error between a student map and a target map of equal shape.
template <typename T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target) {
    if (prediction.shape() != target.shape())
        throw ShapeError("mse: shapes " + to_string(prediction.shape()) + " and " + to_string(target.shape()) +
                         " differ");
    return mean(square(sub(prediction, target)));
}

/// Feature-map distillation from the pseudo teacher (student 1) into students 2..S.
/// The pseudo-teacher maps are detached, so only students and adapters get gradient.
template <typename T>
Tensor<T> intermediate_loss(const std::vector<std::array<Tensor<T>, kTapCount>>& taps,
                            const std::vector<std::array<AdaptationLayer<T>, kTapCount>>& adaptation) {
    if (taps.size() < 2) throw ValueError("intermediate_loss: need the pseudo teacher and at least one student");
    if (adaptation.size() != taps.size() - 1)
        throw ValueError("intermediate_loss: expected adaptation layers for " + std::to_string(taps.size() - 1) +
                         " students, got " + std::to_string(adaptation.size()));
    std::vector<Tensor<T>> terms;
    for (std::size_t b = 0; b < kTapCount; ++b) {
        const Tensor<T>& teacher_map = taps[0][b];
        if (teacher_map.rank() != 4) throw ValueError("intermediate_loss: missing pseudo-teacher tap");
        const Tensor<T> target = stop_gradient(teacher_map);
        for (std::size_t l = 1; l < taps.size(); ++l) {
            const Tensor<T>& student_map = taps[l][b];
            if (student_map.rank() != 4)
                throw ValueError("intermediate_loss: missing tap " + std::to_string(b + 1) + " of student " +
                                 std::to_string(l + 1));
            if (student_map.dim(0) != target.dim(0) || student_map.dim(2) != target.dim(2) ||
                student_map.dim(3) != target.dim(3))
                throw ShapeError("intermediate_loss: student " + std::to_string(l + 1) + " map " +
                                 to_string(student_map.shape()) + " is spatially incompatible with teacher map " +
                                 to_string(target.shape()));
            terms.push_back(mse(adapt_channels(adaptation[l - 1][b], student_map), target));
        }
    }
    return weighted_sum(terms, std::vector<T>(terms.size(), T{1}));
}

/// Sum over students of batch-mean KL(teacher || student) at temperature T.
template <typename T>
Tensor<T> kd_loss(const std::vector<Tensor<T>>& student_logits, const Tensor<T>& teacher_logits,
                  double temperature, bool teacher_grad = false) {
    if (student_logits.empty()) throw ValueError("kd_loss: no students");
    Tensor<T> teacher_log = softened_log_softmax(teacher_logits, temperature);
    if (!teacher_grad) teacher_log = stop_gradient(teacher_log);
    std::vector<Tensor<T>> terms;
    for (const auto& logits : student_logits) {
        if (logits.shape() != teacher_logits.shape())
            throw ShapeError("kd_loss: student logits " + to_string(logits.shape()) + " vs teacher " +
                             to_string(teacher_logits.shape()));
        const T batch = static_cast<T>(logits.dim(0));
        terms.push_back(scale(kl_div(teacher_log, softened_log_softmax(logits, temperature)), T{1} / batch));
    }
    return weighted_sum(terms, std::vector<T>(terms.size(), T{1}));
}

/// alpha * normal + beta * intermediate + gamma * kd on plain numbers.
inline double combine(double normal, double intermediate, double kd, const LossWeights& w) {
    validate(w);
    return w.alpha * normal + w.beta * intermediate + w.gamma * kd;
}

/// Assembles every loss term for one batch of ensemble outputs.
///
/// The intermediate term exists only for models with adaptation layers and the
/// KD term only when there is more than one student; absent terms are zero and
/// carry no graph.
template <typename T>
LossBundle<T> compute_losses(const EnsembleModel<T>& model, const EnsembleOutput<T>& out,
                             std::span<const int> labels, const LossWeights& w) {
    validate(w);
    LossBundle<T> bundle;
    bundle.normal = cross_entropy_all(out.logits, labels, &bundle.per_student_ce);

    std::vector<Tensor<T>> parts{bundle.normal};
    std::vector<T> weights{static_cast<T>(w.alpha)};

    bundle.has_intermediate = !model.adaptation.empty();
    if (bundle.has_intermediate) {
        bundle.intermediate = intermediate_loss(out.taps, model.adaptation);
        parts.push_back(bundle.intermediate);
        weights.push_back(static_cast<T>(w.beta));
    } else {
        bundle.intermediate = Tensor<T>::scalar(T{0});
    }

    bundle.has_kd = out.logits.size() > 1;
    if (bundle.has_kd) {
        bundle.kd = kd_loss(out.logits, out.teacher_logits, w.temperature, w.kd_teacher_grad);
        if (w.kd_t2_scale) bundle.kd = scale(bundle.kd, static_cast<T>(w.temperature * w.temperature));
        parts.push_back(bundle.kd);
        weights.push_back(static_cast<T>(w.gamma));
    } else {
        bundle.kd = Tensor<T>::scalar(T{0});
    }

    bundle.combined = weighted_sum(parts, weights);
    return bundle;
}

}  // namespace ekd
