#pragma once

// Joint optimization of an ensemble (or of the independent baseline models):
// SGD with (Nesterov) momentum under a piecewise-constant learning-rate schedule.

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ekd/data.hpp"
#include "ekd/losses.hpp"
#include "ekd/metrics.hpp"

namespace ekd {

enum class TrainMode { Ensemble, Baseline };

struct LrDrop {
    double fraction;    // of total epochs
    double multiplier;  // applied to base_lr from that point on

    bool operator==(const LrDrop&) const = default;
};

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    std::size_t eval_batch_size = 256;
    double base_lr = 0.1;
    double momentum = 0.9;
    bool nesterov = true;
    std::vector<LrDrop> lr_drops{{0.5, 0.1}, {0.75, 0.01}};
    LossWeights weights;
    std::uint64_t seed = 1;
    TrainMode mode = TrainMode::Ensemble;

    bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
    if (c.epochs < 1) throw ValueError("train: epochs must be >= 1");
    if (c.batch_size < 1 || c.eval_batch_size < 1) throw ValueError("train: batch size must be >= 1");
    if (!(c.base_lr > 0)) throw ValueError("train: learning rate must be positive");
    if (!(c.momentum >= 0 && c.momentum < 1)) throw ValueError("train: momentum must be in [0,1)");
    double prev_fraction = 0, prev_mult = 1;
    for (const auto& d : c.lr_drops) {
        if (!(d.fraction > prev_fraction && d.fraction < 1))
            throw ValueError("train: lr drop fractions must be strictly increasing within (0,1)");
        if (!(d.multiplier > 0 && d.multiplier <= prev_mult))
            throw ValueError("train: lr drop multipliers must be positive and non-increasing");
        prev_fraction = d.fraction;
        prev_mult = d.multiplier;
    }
    validate(c.weights);
}

/// Learning rate for a 0-based epoch: base_lr times the multiplier of the last
/// drop whose start (fraction * epochs) has been reached.
inline double lr_at(const TrainConfig& c, std::size_t epoch) {
    if (epoch >= c.epochs)
        throw ValueError("lr_at: epoch " + std::to_string(epoch) + " outside [0," + std::to_string(c.epochs) + ")");
    double mult = 1.0;
    for (const auto& d : c.lr_drops)
        if (static_cast<double>(epoch) >= d.fraction * static_cast<double>(c.epochs)) mult = d.multiplier;
    return c.base_lr * mult;
}

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0;
    double normal = 0;
    double intermediate = 0;
    double kd = 0;
    double combined = 0;
    std::vector<double> student_acc;  // test top-1, %
    double teacher_acc = 0;

    bool operator==(const EpochMetrics&) const = default;
};

template <typename T>
struct TrainingState {
    std::uint64_t step = 0;
    std::size_t epoch = 0;  // next epoch to run
    std::uint64_t seed = 0;
    std::vector<std::string> velocity_names;
    std::vector<std::vector<T>> velocity;  // parallel to the parameter registry
    std::vector<std::size_t> best_correct;  // per student, then the teacher
    std::size_t test_count = 0;
    std::vector<EpochMetrics> history;

    std::vector<double> best_student_acc() const {
        std::vector<double> out;
        for (std::size_t i = 0; i + 1 < best_correct.size(); ++i)
            out.push_back(test_count ? 100.0 * static_cast<double>(best_correct[i]) / static_cast<double>(test_count)
                                     : 0.0);
        return out;
    }
    double best_teacher_acc() const {
        return test_count && !best_correct.empty()
                   ? 100.0 * static_cast<double>(best_correct.back()) / static_cast<double>(test_count)
                   : 0.0;
    }
};

/// One momentum SGD update of every parameter:
///   v <- mu*v + g;  step = nesterov ? g + mu*v : v;  p <- p - lr*step.
/// Gradients are cleared afterwards. A non-finite result aborts before anything is written.
template <typename T>
void sgd_step(const ParamRegistry<T>& params, TrainingState<T>& state, double lr, double momentum, bool nesterov) {
    if (state.velocity.empty()) {
        for (const auto& p : params) {
            state.velocity_names.push_back(p.name);
            state.velocity.emplace_back(p.tensor.size(), T{0});
        }
    }
    if (state.velocity.size() != params.size())
        throw ShapeError("sgd_step: " + std::to_string(state.velocity.size()) + " velocity buffers for " +
                         std::to_string(params.size()) + " parameters");
    const T mu = static_cast<T>(momentum);
    const T rate = static_cast<T>(lr);
    std::vector<std::vector<T>> new_values(params.size()), new_velocity(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& p = params.items()[k];
        const auto& v = state.velocity[k];
        if (v.size() != p.tensor.size() || (p.tensor.has_grad() && p.tensor.grad().size() != v.size()))
            throw ShapeError("sgd_step: buffer size mismatch for parameter '" + p.name + "'");
        const std::vector<T> g = p.tensor.grad();
        auto data = p.tensor.data();
        auto& nv = new_velocity[k];
        auto& np = new_values[k];
        nv.resize(v.size());
        np.resize(v.size());
        for (std::size_t j = 0; j < v.size(); ++j) {
            nv[j] = mu * v[j] + g[j];
            const T update = nesterov ? g[j] + mu * nv[j] : nv[j];
            np[j] = data[j] - rate * update;
            if (!std::isfinite(np[j]))
                throw DivergenceError("non-finite update for parameter '" + p.name + "' at step " +
                                      std::to_string(state.step));
        }
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params.items()[k].tensor;
        std::copy(new_values[k].begin(), new_values[k].end(), p.mutable_data().begin());
        state.velocity[k] = std::move(new_velocity[k]);
        p.zero_grad();
    }
    ++state.step;
}

struct EvalResult {
    std::vector<std::size_t> student_correct;
    std::size_t teacher_correct = 0;
    std::size_t count = 0;

    double student_acc(std::size_t i) const {
        return count ? 100.0 * static_cast<double>(student_correct.at(i)) / static_cast<double>(count) : 0.0;
    }
    double teacher_acc() const {
        return count ? 100.0 * static_cast<double>(teacher_correct) / static_cast<double>(count) : 0.0;
    }
};

/// Top-1 of every student and of the ensemble teacher over one split, in order.
template <typename T>
EvalResult evaluate(const EnsembleModel<T>& model, const DatasetBundle& data, Split split, std::size_t batch_size) {
    NoGradGuard no_grad;
    EvalResult r;
    r.student_correct.assign(model.S, 0);
    BatchStream<T> stream(data, split, batch_size, 0, false);
    Batch<T> b;
    while (stream.next(b)) {
        auto out = forward_ensemble(model, b.images);
        for (std::size_t i = 0; i < model.S; ++i) r.student_correct[i] += top1_correct(out.logits[i], b.labels);
        r.teacher_correct += top1_correct(out.teacher_logits, b.labels);
        r.count += b.labels.size();
    }
    return r;
}

template <typename T>
double evaluate_student(const StudentModel<T>& model, const DatasetBundle& data, Split split, std::size_t batch_size) {
    NoGradGuard no_grad;
    BatchStream<T> stream(data, split, batch_size, 0, false);
    Batch<T> b;
    std::size_t correct = 0, count = 0;
    while (stream.next(b)) {
        correct += top1_correct(model.forward(b.images), b.labels);
        count += b.labels.size();
    }
    return count ? 100.0 * static_cast<double>(correct) / static_cast<double>(count) : 0.0;
}

struct StepLosses {
    double normal = 0, intermediate = 0, kd = 0, combined = 0;
};

template <typename T>
class Trainer {
public:
    using EpochCallback = std::function<void(const EpochMetrics&, const EnsembleModel<T>&, const TrainingState<T>&)>;

    Trainer(EnsembleModel<T>& model, const DatasetBundle& data, TrainConfig config)
        : model_(&model), data_(&data), config_(std::move(config)) {
        validate(config_);
        validate(data);
        if (data.num_classes != model.spec.num_classes)
            throw ValueError("dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                             std::to_string(model.spec.num_classes));
        if (config_.mode == TrainMode::Baseline) {
            if (model.shared_base) throw ValueError("baseline mode needs independently built students");
            weights_ = baseline_weights(config_.weights.temperature);
        } else {
            if (!model.shared_base) throw ValueError("ensemble mode needs a shared-base ensemble");
            weights_ = config_.weights;
        }
        state_.seed = config_.seed;
        state_.best_correct.assign(model.S + 1, 0);
    }

    /// Resumes from a restored state.
    Trainer(EnsembleModel<T>& model, const DatasetBundle& data, TrainConfig config, TrainingState<T> state)
        : Trainer(model, data, std::move(config)) {
        if (state.best_correct.size() != model.S + 1) throw ValueError("restored state has wrong student count");
        state_ = std::move(state);
    }

    const TrainingState<T>& state() const { return state_; }
    const LossWeights& weights() const { return weights_; }
    const TrainConfig& config() const { return config_; }

    /// Forward, loss, backward and one optimizer update on a single batch.
    StepLosses train_step(const Batch<T>& batch, double lr) {
        const auto params = model_->parameters();
        auto out = forward_ensemble(*model_, batch.images);
        auto losses = compute_losses(*model_, out, batch.labels, weights_);
        const double combined = static_cast<double>(losses.combined.item());
        if (!std::isfinite(combined)) {
            std::ostringstream os;
            os << "non-finite loss at epoch " << state_.epoch << " step " << state_.step
               << " (normal=" << losses.normal.item() << ", intermediate=" << losses.intermediate.item()
               << ", kd=" << losses.kd.item() << ")";
            throw DivergenceError(os.str());
        }
        backward(losses.combined);
        sgd_step(params, state_, lr, config_.momentum, config_.nesterov);
        return {static_cast<double>(losses.normal.item()), static_cast<double>(losses.intermediate.item()),
                static_cast<double>(losses.kd.item()), combined};
    }

    /// Trains epoch `state().epoch` and evaluates on the test split.
    EpochMetrics run_epoch() {
        if (state_.epoch >= config_.epochs) throw ValueError("training already finished");
        EpochMetrics m;
        m.epoch = state_.epoch;
        m.lr = lr_at(config_, state_.epoch);
        BatchStream<T> stream(*data_, Split::Train, config_.batch_size, epoch_seed(config_.seed, state_.epoch), true);
        Batch<T> batch;
        std::size_t batches = 0;
        while (stream.next(batch)) {
            auto s = train_step(batch, m.lr);
            m.normal += s.normal;
            m.intermediate += s.intermediate;
            m.kd += s.kd;
            m.combined += s.combined;
            ++batches;
        }
        const double nb = static_cast<double>(batches);
        m.normal /= nb;
        m.intermediate /= nb;
        m.kd /= nb;
        m.combined /= nb;

        auto eval = evaluate(*model_, *data_, Split::Test, config_.eval_batch_size);
        state_.test_count = eval.count;
        for (std::size_t i = 0; i < model_->S; ++i) {
            m.student_acc.push_back(eval.student_acc(i));
            state_.best_correct[i] = std::max(state_.best_correct[i], eval.student_correct[i]);
        }
        m.teacher_acc = eval.teacher_acc();
        state_.best_correct.back() = std::max(state_.best_correct.back(), eval.teacher_correct);
        state_.history.push_back(m);
        ++state_.epoch;
        return m;
    }

    /// Runs the remaining epochs, invoking `on_epoch` after each.
    void train(const EpochCallback& on_epoch = {}) {
        while (state_.epoch < config_.epochs) {
            auto m = run_epoch();
            if (on_epoch) on_epoch(m, *model_, state_);
        }
    }

private:
    EnsembleModel<T>* model_;
    const DatasetBundle* data_;
    TrainConfig config_;
    LossWeights weights_;
    TrainingState<T> state_;
};

}  // namespace ekd
