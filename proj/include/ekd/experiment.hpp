#pragma once

// Experiment orchestration: single training runs that write metrics and
// checkpoints, and paired ensemble-vs-baseline comparisons over several seeds.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ekd/checkpoint.hpp"
#include "ekd/config.hpp"
#include "ekd/data.hpp"
#include "ekd/metrics.hpp"
#include "ekd/trainer.hpp"

namespace ekd {

inline constexpr const char* kMetricsSchema = "# ekd-metrics v1";

inline DatasetBundle load_data(const RunConfig& c) {
    if (!c.data_path.empty()) return load_dataset(c.data_path);
    return synth_dataset(c.synth.classes, c.synth.per_class, c.synth.height, c.synth.width, c.synth.seed,
                         c.synth.test_per_class, c.synth.noise);
}

inline std::string metrics_header(std::size_t S) {
    std::string h = "epoch,lr,normal,intermediate,kd,combined";
    for (std::size_t i = 1; i <= S; ++i) h += ",student" + std::to_string(i) + "_acc";
    return h + ",teacher_acc";
}

inline std::string metrics_row(const EpochMetrics& m) {
    std::ostringstream os;
    os << std::setprecision(17) << m.epoch << ',' << m.lr << ',' << m.normal << ',' << m.intermediate << ','
       << m.kd << ',' << m.combined;
    for (double a : m.student_acc) os << ',' << a;
    os << ',' << m.teacher_acc;
    return os.str();
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& history, std::size_t S) {
    std::string out = std::string(kMetricsSchema) + '\n' + metrics_header(S) + '\n';
    for (const auto& m : history) out += metrics_row(m) + '\n';
    return out;
}

struct RunOptions {
    std::uint64_t seed = 1;
    TrainMode mode = TrainMode::Ensemble;
    std::string out_dir;      // empty: nothing written
    std::string resume_from;  // checkpoint to continue from
    std::function<void(const EpochMetrics&)> on_epoch;
    std::function<void(const std::string&)> warn;
};

struct RunResult {
    std::vector<double> best_student_acc;
    double best_teacher_acc = 0;
    std::vector<EpochMetrics> history;  // epochs run in this invocation
    TrainingState<float> state;
};

inline TrainConfig train_config_for(const RunConfig& c, const RunOptions& o) {
    TrainConfig t = c.train;
    t.seed = o.seed;
    t.mode = o.mode;
    return t;
}

/// Builds, optionally restores, and trains one model. The metrics CSV is
/// append-only: a resumed run adds rows to the existing file.
inline RunResult run_training(const RunConfig& c, const DatasetBundle& data, const RunOptions& o) {
    const auto spec = architecture(c, data.num_classes);
    const auto tc = train_config_for(c, o);
    RunConfig hashed = c;
    hashed.train.mode = o.mode;
    const auto hash = config_hash(hashed, o.seed);

    auto model = o.mode == TrainMode::Ensemble
                     ? build_ensemble<float>(spec, c.students, o.seed,
                                             std::vector<float>(c.teacher_weights.begin(), c.teacher_weights.end()))
                     : build_baseline<float>(spec, c.students, o.seed);
    TrainingState<float> restored;
    bool resumed = false;
    if (!o.resume_from.empty()) {
        RestoreInfo info;
        restored = restore_checkpoint(o.resume_from, model, &info);
        if (!info.has_state) throw ValueError("'" + o.resume_from + "' holds no training state");
        if (info.stored_hash != hash && o.warn)
            o.warn("checkpoint config hash " + hex(info.stored_hash) + " differs from current config " + hex(hash));
        resumed = true;
    }
    Trainer<float> trainer = resumed ? Trainer<float>(model, data, tc, restored) : Trainer<float>(model, data, tc);

    std::filesystem::path dir(o.out_dir);
    std::ofstream csv;
    if (!o.out_dir.empty()) {
        std::filesystem::create_directories(dir);
        const auto path = dir / "metrics.csv";
        const bool append = resumed && std::filesystem::exists(path);
        csv.open(path, append ? std::ios::app : std::ios::trunc);
        if (!csv) throw IoError("cannot open '" + path.string() + "' for writing");
        if (!append) csv << kMetricsSchema << '\n' << metrics_header(c.students) << '\n';
        csv.flush();
    }

    RunResult r;
    trainer.train([&](const EpochMetrics& m, const EnsembleModel<float>& mdl, const TrainingState<float>& st) {
        r.history.push_back(m);
        if (!o.out_dir.empty()) {
            csv << metrics_row(m) << '\n';
            csv.flush();
            save_checkpoint((dir / "last.ckpt").string(), mdl, &st, hash);
            if (m.teacher_acc >= st.best_teacher_acc())
                save_checkpoint((dir / "best.ckpt").string(), mdl, &st, hash);
        }
        if (o.on_epoch) o.on_epoch(m);
    });
    r.state = trainer.state();
    r.best_student_acc = r.state.best_student_acc();
    r.best_teacher_acc = r.state.best_teacher_acc();
    return r;
}

struct SeedOutcome {
    std::uint64_t seed = 0;
    std::vector<double> baseline;  // best per-student test accuracy
    std::vector<double> ensemble;
    double teacher = 0;
};

struct CompareReport {
    std::vector<SeedOutcome> runs;
    std::vector<double> baseline_mean;
    std::vector<double> ensemble_mean;
    double teacher_mean = 0;

    Metrics baseline_metrics() const { return make_metrics(baseline_mean, 0.0); }
    Metrics ensemble_metrics() const { return make_metrics(ensemble_mean, teacher_mean); }
};

/// Paired protocol: for every seed both arms start from identical student
/// initializations and see identical batch orders. Seeds may run on `jobs` threads.
inline CompareReport compare(const RunConfig& c, const DatasetBundle& data, const std::vector<std::uint64_t>& seeds,
                             std::size_t jobs = 1,
                             const std::function<void(const std::string&)>& progress = {}) {
    if (seeds.empty()) throw ValueError("compare: no seeds");
    if (c.students < 2) throw ValueError("compare: need at least 2 students");
    CompareReport report;
    report.runs.resize(seeds.size());
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            const std::size_t k = next++;
            if (k >= seeds.size()) return;
            try {
                SeedOutcome out;
                out.seed = seeds[k];
                RunOptions o;
                o.seed = seeds[k];
                o.mode = TrainMode::Baseline;
                out.baseline = run_training(c, data, o).best_student_acc;
                o.mode = TrainMode::Ensemble;
                auto e = run_training(c, data, o);
                out.ensemble = e.best_student_acc;
                out.teacher = e.best_teacher_acc;
                std::lock_guard lock(mu);
                report.runs[k] = std::move(out);
                if (progress) progress("seed " + std::to_string(seeds[k]) + " done");
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
                next = seeds.size();
                return;
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(jobs, seeds.size()));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    const double R = static_cast<double>(seeds.size());
    report.baseline_mean.assign(c.students, 0.0);
    report.ensemble_mean.assign(c.students, 0.0);
    for (const auto& run : report.runs) {
        for (std::size_t i = 0; i < c.students; ++i) {
            report.baseline_mean[i] += run.baseline[i] / R;
            report.ensemble_mean[i] += run.ensemble[i] / R;
        }
        report.teacher_mean += run.teacher / R;
    }
    return report;
}

inline std::string format_compare(const CompareReport& r, bool csv) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    const auto b = r.baseline_metrics(), e = r.ensemble_metrics();
    if (csv) {
        os << "row,baseline,ensemble\n";
        for (std::size_t i = 0; i < r.baseline_mean.size(); ++i)
            os << "student" << i + 1 << ',' << r.baseline_mean[i] << ',' << r.ensemble_mean[i] << '\n';
        os << "teacher,," << r.teacher_mean << '\n';
        os << "weighted_average," << b.weighted_average << ',' << e.weighted_average << '\n';
        os << "mean_accuracy," << b.mean_accuracy << ',' << e.mean_accuracy << '\n';
        return os.str();
    }
    os << "runs: " << r.runs.size() << " paired seeds\n";
    os << std::left << std::setw(18) << "" << std::right << std::setw(10) << "baseline" << std::setw(10) << "ensemble"
       << std::setw(8) << "delta" << '\n';
    for (std::size_t i = 0; i < r.baseline_mean.size(); ++i)
        os << std::left << std::setw(18) << ("student " + std::to_string(i + 1)) << std::right << std::setw(10)
           << r.baseline_mean[i] << std::setw(10) << r.ensemble_mean[i] << std::setw(8)
           << r.ensemble_mean[i] - r.baseline_mean[i] << '\n';
    os << std::left << std::setw(18) << "ensemble teacher" << std::right << std::setw(10) << "-" << std::setw(10)
       << r.teacher_mean << '\n';
    os << std::left << std::setw(18) << "weighted average" << std::right << std::setw(10) << b.weighted_average
       << std::setw(10) << e.weighted_average << '\n';
    os << std::left << std::setw(18) << "mean accuracy" << std::right << std::setw(10) << b.mean_accuracy
       << std::setw(10) << e.mean_accuracy << '\n';
    return os.str();
}

}  // namespace ekd
