#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ekd/ensemble.hpp"

namespace ekd {

/// Number of rows whose argmax (lowest index on ties) equals the label.
template <typename T>
std::size_t top1_correct(const Tensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw ShapeError("top1: logits " + to_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
    const std::size_t C = logits.dim(1);
    auto d = logits.data();
    std::size_t correct = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (d[r * C + c] > d[r * C + best]) best = c;
        if (static_cast<int>(best) == labels[r]) ++correct;
    }
    return correct;
}

/// Top-1 accuracy in percent.
template <typename T>
double top1_accuracy(const Tensor<T>& logits, std::span<const int> labels) {
    if (labels.empty()) return 0.0;
    return 100.0 * static_cast<double>(top1_correct(logits, labels)) / static_cast<double>(labels.size());
}

/// sum_i (i/S) * acc_i: more compressed (later) students weigh more. The weights
/// sum to (S+1)/2, so the result is not an average in the usual sense.
inline double weighted_student_average(std::span<const double> accuracies) {
    const double S = static_cast<double>(accuracies.size());
    double total = 0;
    for (std::size_t i = 0; i < accuracies.size(); ++i) total += static_cast<double>(i + 1) / S * accuracies[i];
    return total;
}

inline double mean_accuracy(std::span<const double> accuracies) {
    if (accuracies.empty()) return 0.0;
    double total = 0;
    for (double a : accuracies) total += a;
    return total / static_cast<double>(accuracies.size());
}

struct Metrics {
    std::vector<double> per_student_top1;
    double teacher_top1 = 0;
    double weighted_average = 0;
    double mean_accuracy = 0;
};

inline Metrics make_metrics(std::vector<double> per_student, double teacher) {
    Metrics m;
    m.weighted_average = weighted_student_average(per_student);
    m.mean_accuracy = mean_accuracy(per_student);
    m.per_student_top1 = std::move(per_student);
    m.teacher_top1 = teacher;
    return m;
}

struct SizeReport {
    std::vector<std::size_t> params;      // deployable parameters per student
    std::vector<double> relative_pct;     // vs. student 1
};

/// Deployable parameter count of each student (its base plus branch). Adaptation
/// layers are training-only and excluded.
template <typename T>
SizeReport size_report(const EnsembleModel<T>& model) {
    SizeReport r;
    for (std::size_t i = 1; i <= model.S; ++i) {
        ParamRegistry<T> reg;
        model.base_for(i).collect("base", reg);
        model.students[i - 1].collect("student", reg);
        r.params.push_back(reg.scalar_count());
    }
    for (auto p : r.params)
        r.relative_pct.push_back(100.0 * static_cast<double>(p) / static_cast<double>(r.params.front()));
    return r;
}

/// Parameter count of one student's branch alone (blocks 2-4 and classifier).
template <typename T>
std::size_t branch_param_count(const EnsembleModel<T>& model, std::size_t i) {
    ParamRegistry<T> reg;
    model.students.at(i - 1).collect("student", reg);
    return reg.scalar_count();
}

}  // namespace ekd
