// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   acceptance [--only N[,M...]] [--desk-config PATH] [--jobs J]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ekd/ekd.hpp"

using namespace ekd;
using TD = Tensor<double>;

namespace {

// Same content as samples/desk.cfg.
const char* kDeskConfig = R"(# Desk-scale comparison: 4-class 32x32 gratings, 4-block CNN, three students.
arch.input = 1x32x32
arch.block1 = conv:8:3:1 maxpool:2:2
arch.block2 = res:16:3:1
arch.block3 = res:24:3:2
arch.block4 = res:32:3:2
students = 3
data.synth.classes = 4
data.synth.per_class = 400
data.synth.test_per_class = 200
data.synth.height = 32
data.synth.width = 32
data.synth.seed = 7
train.epochs = 30
train.batch_size = 64
train.lr = 0.005
seeds = 1,2,3,4,5
)";

struct Outcome {
    bool passed = true;
    std::string detail;
};

class Check {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok) {
            out_.passed = false;
            if (!out_.detail.empty()) out_.detail += "; ";
            out_.detail += what;
        }
    }
    void note(const std::string& s) { notes_ += (notes_.empty() ? "" : ", ") + s; }
    Outcome result() const {
        Outcome o = out_;
        if (o.passed) o.detail = notes_;
        return o;
    }

private:
    Outcome out_;
    std::string notes_;
};

std::string fmt(double v, int prec = 6) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

Outcome gradient_oracle() {
    Check c;
    const auto start = std::chrono::steady_clock::now();
    OracleOptions o;
    o.step = 1e-5;
    o.tolerance = 1e-4;
    const auto reports = run_gradient_oracle(o);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    double worst = 0;
    bool combined_seen = false;
    for (const auto& r : reports) {
        c.expect(r.passed, r.label + " max rel error " + fmt(r.max_rel_error) + " at " + r.worst);
        worst = std::max(worst, r.max_rel_error);
        if (r.label.rfind("combined loss", 0) == 0) combined_seen = true;
    }
    const auto model = build_ensemble<double>(oracle_architecture(), 3, o.seed);
    const auto count = model.parameters().scalar_count();
    c.expect(combined_seen, "no combined-loss check ran");
    c.expect(count <= 2000, "oracle ensemble has " + std::to_string(count) + " parameters");
    c.expect(secs < 60, "took " + fmt(secs, 3) + " s");
    c.note(std::to_string(reports.size()) + " checks, worst rel error " + fmt(worst, 3) + ", " +
           std::to_string(count) + " params, " + fmt(secs, 3) + " s");
    return c.result();
}

Outcome gradient_scope() {
    Check c;
    const auto spec = oracle_architecture();
    auto model = build_ensemble<double>(spec, 3, 21);
    std::mt19937_64 rng(22);
    detail::randomize(model.parameters(), rng);
    const auto params = model.parameters();
    auto x = detail::random_tensor({4, 1, 8, 8}, rng, false);

    // Intermediate loss alone: nothing reaches the pseudo teacher's branch.
    {
        auto out = forward_ensemble(model, x);
        backward(intermediate_loss(out.taps, model.adaptation));
        std::size_t teacher_params = 0, nonzero = 0;
        bool adapters_moved = false;
        for (const auto& p : params) {
            const auto g = p.tensor.grad();
            const bool zero = std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; });
            if (p.name.rfind("student1.", 0) == 0) {
                ++teacher_params;
                if (!zero) ++nonzero;
            }
            if (p.name.rfind("adapt", 0) == 0 && !zero) adapters_moved = true;
        }
        c.expect(teacher_params > 0, "no pseudo-teacher parameters found");
        c.expect(nonzero == 0, std::to_string(nonzero) + " pseudo-teacher tensors received gradient");
        c.expect(adapters_moved, "adaptation layers received no gradient");
        c.note(std::to_string(teacher_params) + " pseudo-teacher tensors exactly zero");
        params.zero_grad();
    }

    // KD alone with a detached teacher: altering the teacher path leaves every gradient unchanged.
    auto kd_grads = [&](const std::function<TD(const TD&)>& teacher_path, TD* probe) {
        auto out = forward_ensemble(model, x);
        backward(kd_loss(out.logits, teacher_path(out.teacher_logits), 2.0, false));
        std::vector<std::vector<double>> g;
        for (const auto& p : params) g.push_back(p.tensor.grad());
        if (probe) g.push_back(probe->grad());
        params.zero_grad();
        return g;
    };
    const auto reference = kd_grads([](const TD& t) { return t; }, nullptr);
    const auto cut = kd_grads([](const TD& t) { return stop_gradient(t); }, nullptr);
    TD probe({1}, {3.0}, true);
    const auto probed = kd_grads(
        [&](const TD& t) { return add(t, mul(TD::zeros(t.shape()), probe)); }, &probe);
    c.expect(cut == reference, "gradients differ when the teacher path is cut");
    c.expect(std::vector<std::vector<double>>(probed.begin(), probed.end() - 1) == reference,
             "gradients differ when the teacher path is rerouted");
    const auto& pg = probed.back();
    c.expect(std::all_of(pg.begin(), pg.end(), [](double v) { return v == 0.0; }),
             "a parameter inside the teacher path received gradient");
    bool any_student = false;
    for (const auto& g : reference)
        if (std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; })) any_student = true;
    c.expect(any_student, "KD produced no gradient at all");
    c.note("KD gradients identical under cut and rerouted teacher paths");
    return c.result();
}

Outcome table_arithmetic() {
    Check c;
    struct Row {
        std::vector<double> acc;
        double printed;
    };
    const std::vector<Row> rows{
        {{69.58, 64.47, 63.21, 55.64, 39.57}, 161.71}, {{68.27, 65.36, 62.35, 57.54, 40.14}, 163.38},
        {{71.32, 69.58, 67.92, 62.69, 45.16}, 178.16}, {{72.11, 67.82, 65.55, 60.93, 43.19}, 172.81},
        {{71.25, 69.32, 67.29, 62.16, 47.23}, 179.31}, {{71.05, 70.21, 68.01, 62.61, 45.10}, 178.29},
        {{69.21, 66.56, 63.12, 58.85, 45.76}, 171.18}, {{68.57, 66.69, 64.34, 59.92, 47.26}, 174.19},
        {{68.72, 68.19, 65.94, 62.09, 44.88}, 175.14}, {{69.37, 68.39, 66.44, 62.17, 46.82}, 177.65},
        {{66.79, 64.92, 62.46, 57.78, 41.34}, 164.37}, {{67.97, 67.22, 65.37, 61.08, 46.69}, 175.26},
    };
    double worst = 0;
    for (const auto& r : rows) {
        const double got = weighted_student_average(r.acc);
        worst = std::max(worst, std::abs(got - r.printed));
        c.expect(std::abs(got - r.printed) <= 0.02, "row " + fmt(r.printed) + " gave " + fmt(got, 8));
    }
    c.note("12 cells, max deviation " + fmt(worst, 3));
    return c.result();
}

Outcome size_law() {
    Check c;
    RunConfig rc;
    rc.input_shape = {3, 32, 32};
    rc.block_text = {"conv:16:3:1", "res:16:3:1:3", "res:32:3:2:3", "res:64:3:2:3"};
    const auto model = build_ensemble<float>(architecture(rc, 10), 5, 1);
    const auto r = size_report(model);
    const std::vector<double> table{100.0, 62.95, 35.61, 15.50, 3.95};
    std::string got;
    for (std::size_t i = 0; i < 5; ++i) {
        c.expect(std::abs(r.relative_pct[i] - table[i]) <= 3.0,
                 "student " + std::to_string(i + 1) + ": " + fmt(r.relative_pct[i], 4) + "%");
        got += (i ? "/" : "") + fmt(r.relative_pct[i], 4);
    }
    c.note("relative sizes " + got);
    return c.result();
}

Outcome channel_ratios() {
    Check c;
    for (std::size_t M : {3, 6, 48, 96, 300}) {
        const std::vector<std::size_t> expect{M, 2 * M / 3, M / 3};
        for (std::size_t i = 1; i <= 3; ++i)
            c.expect(assign_channels(M, 3, i) == expect[i - 1], "S=3 M=" + std::to_string(M));
    }
    for (std::size_t C : {4, 16, 64, 128, 512}) {
        const std::vector<std::size_t> expect{C, 3 * C / 4, C / 2, C / 4};
        for (std::size_t i = 1; i <= 4; ++i)
            c.expect(assign_channels(C, 4, i) == expect[i - 1], "S=4 C=" + std::to_string(C));
    }
    c.note("96 -> 96/64/32, 64 -> 64/48/32/16");
    return c.result();
}

Outcome loss_closed_forms() {
    Check c;
    const auto p = softened_softmax(TD({1, 2}, {2.0, 0.0}), 2.0);
    c.expect(std::abs(p[0] - 0.7311) <= 1e-4 && std::abs(p[1] - 0.2689) <= 1e-4,
             "softened softmax " + fmt(p[0]) + ", " + fmt(p[1]));
    const double kl =
        kl_div(TD({1, 2}, {std::log(0.75), std::log(0.25)}), TD({1, 2}, {std::log(0.5), std::log(0.5)})).item();
    c.expect(std::abs(kl - 0.13081) <= 1e-5, "KL " + fmt(kl, 8));
    for (std::size_t C : {2, 10, 100}) {
        const std::vector<int> labels{0, static_cast<int>(C) - 1};
        const double ce = cross_entropy(TD::full({2, C}, 0.37), labels).item();
        c.expect(std::abs(ce - std::log(static_cast<double>(C))) <= 1e-9, "CE for C=" + std::to_string(C));
    }
    std::mt19937_64 rng(3);
    auto s = detail::random_tensor({5, 7}, rng, false);
    std::vector<TD> students{s, s.clone(), s.clone()};
    const double kd = kd_loss(students, mean_of(students), 2.0).item();
    c.expect(kd == 0.0, "identical-student KD " + fmt(kd, 17));
    c.note("p=(" + fmt(p[0], 5) + "," + fmt(p[1], 5) + "), KL=" + fmt(kl, 7) + ", KD=" + fmt(kd));
    return c.result();
}

Outcome extraction_fidelity() {
    Check c;
    RunConfig rc = parse_config(kDeskConfig);
    const auto spec = architecture(rc, 4);
    for (std::size_t S : {3, 5}) {
        auto model = build_ensemble<float>(spec, S, 31);
        std::mt19937_64 rng(32);
        for (auto p : model.parameters())
            for (auto& v : p.tensor.mutable_data()) v = static_cast<float>(uniform(rng, -0.3, 0.3));
        std::vector<float> xs(100 * 32 * 32);
        for (auto& v : xs) v = static_cast<float>(uniform(rng, -2, 2));
        const Tensor<float> x({100, 1, 32, 32}, xs);
        NoGradGuard no_grad;
        const auto out = forward_ensemble(model, x);
        for (std::size_t i = 1; i <= S; ++i) {
            const auto y = extract_student(model, i).forward(x);
            const bool same = std::equal(y.data().begin(), y.data().end(), out.logits[i - 1].data().begin()) &&
                              y.size() == out.logits[i - 1].size();
            c.expect(same, "S=" + std::to_string(S) + " student " + std::to_string(i) + " differs");
        }
    }
    c.note("S=3 and S=5, 100 inputs each, bit-identical logits");
    return c.result();
}

Outcome desk_effect(const std::string& config_text, std::size_t jobs) {
    Check c;
    const auto rc = parse_config(config_text);
    const auto data = synth_dataset(rc.synth.classes, rc.synth.per_class, rc.synth.height, rc.synth.width,
                                    rc.synth.seed, rc.synth.test_per_class, rc.synth.noise);
    const auto start = std::chrono::steady_clock::now();
    const auto report = compare(rc, data, rc.seeds, jobs, [&](const std::string& msg) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cout << "  [desk] " << msg << " (" << fmt(secs, 4) << " s)" << std::endl;
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::istringstream table(format_compare(report, false));
    for (std::string line; std::getline(table, line);) std::cout << "  " << line << '\n';

    const std::size_t S = rc.students;
    for (std::size_t i = S - 1; i <= S; ++i)
        c.expect(report.ensemble_mean[i - 1] >= report.baseline_mean[i - 1],
                 "student " + std::to_string(i) + " ensemble " + fmt(report.ensemble_mean[i - 1], 5) +
                     " < baseline " + fmt(report.baseline_mean[i - 1], 5));
    const double best = *std::max_element(report.ensemble_mean.begin(), report.ensemble_mean.end());
    c.expect(report.teacher_mean >= best - 0.5,
             "teacher " + fmt(report.teacher_mean, 5) + " below best student " + fmt(best, 5) + " - 0.5");
    c.note("students " + std::to_string(S - 1) + "," + std::to_string(S) + ": " +
           fmt(report.ensemble_mean[S - 2], 5) + " vs " + fmt(report.baseline_mean[S - 2], 5) + ", " +
           fmt(report.ensemble_mean[S - 1], 5) + " vs " + fmt(report.baseline_mean[S - 1], 5) + "; teacher " +
           fmt(report.teacher_mean, 5) + "; " + fmt(secs / 60, 3) + " min");
    return c.result();
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism_persistence() {
    Check c;
    const auto dir = std::filesystem::temp_directory_path() / "ekd_acceptance_c9";
    std::filesystem::remove_all(dir);
    RunConfig rc;
    rc.input_shape = {1, 8, 8};
    rc.block_text = {"conv:4:3:1", "res:6:3:2", "res:6:3:1", "res:8:3:2"};
    rc.students = 3;
    rc.synth = {3, 12, 6, 8, 8, 5};
    rc.train.epochs = 4;
    rc.train.batch_size = 8;
    rc.train.base_lr = 0.01;
    const auto data = synth_dataset(3, 12, 8, 8, 5, 6);

    RunOptions o;
    o.seed = 9;
    o.out_dir = (dir / "a").string();
    run_training(rc, data, o);
    o.out_dir = (dir / "b").string();
    run_training(rc, data, o);
    const auto csv = slurp(dir / "a" / "metrics.csv");
    c.expect(!csv.empty() && csv == slurp(dir / "b" / "metrics.csv"), "metrics CSV differs between identical runs");

    // Interrupt after two epochs, resume from the last checkpoint.
    RunOptions part = o;
    part.out_dir = (dir / "c").string();
    struct Stop {};
    part.on_epoch = [](const EpochMetrics& m) {
        if (m.epoch == 1) throw Stop{};
    };
    try {
        run_training(rc, data, part);
        c.expect(false, "interrupt did not happen");
    } catch (const Stop&) {
    }
    part.on_epoch = {};
    part.resume_from = (dir / "c" / "last.ckpt").string();
    run_training(rc, data, part);
    c.expect(slurp(dir / "c" / "metrics.csv") == csv, "resumed run diverged from the uninterrupted one");
    const auto full = load_checkpoint_file((dir / "a" / "last.ckpt").string());
    const auto resumed = load_checkpoint_file((dir / "c" / "last.ckpt").string());
    c.expect(full.params == resumed.params && full.optimizer == resumed.optimizer,
             "final checkpoints differ after resume");

    // One flipped payload byte.
    {
        std::ifstream in(dir / "a" / "last.ckpt", std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
        bytes[bytes.size() / 2] ^= 0x10;
        std::ofstream(dir / "bad.ckpt", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    bool rejected = false;
    try {
        load_checkpoint_file((dir / "bad.ckpt").string());
    } catch (const ChecksumError&) {
        rejected = true;
    }
    c.expect(rejected, "corrupted checkpoint was not rejected by checksum");
    c.note("CSV bit-identical, resume bit-identical, corruption rejected");
    std::filesystem::remove_all(dir);
    return c.result();
}

Outcome schedule_fidelity() {
    Check c;
    for (std::size_t epochs = 1; epochs <= 400; ++epochs) {
        TrainConfig t;
        t.epochs = epochs;
        for (std::size_t e = 0; e < epochs; ++e) {
            const double expect = 2 * e < epochs ? 0.1 : (4 * e < 3 * epochs ? 0.01 : 0.001);
            const double got = lr_at(t, e);
            if (std::abs(got - expect) > 1e-12 * expect) {
                c.expect(false, "epochs=" + std::to_string(epochs) + " epoch " + std::to_string(e) + ": " + fmt(got));
                return c.result();
            }
        }
    }
    TrainConfig t;
    t.epochs = 100;
    c.note("100 epochs: " + fmt(lr_at(t, 40)) + "/" + fmt(lr_at(t, 60)) + "/" + fmt(lr_at(t, 80)) +
           "; checked every epoch count 1..400");
    return c.result();
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    std::string desk_text = kDeskConfig;
    std::size_t jobs = 1;
    for (int a = 1; a < argc; ++a) {
        const std::string arg = argv[a];
        if (arg == "--only" && a + 1 < argc) {
            std::stringstream ss(argv[++a]);
            for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
        } else if (arg == "--desk-config" && a + 1 < argc) {
            desk_text = slurp(argv[++a]);
        } else if (arg == "--jobs" && a + 1 < argc) {
            jobs = std::stoul(argv[++a]);
        } else {
            std::cerr << "usage: acceptance [--only N[,M...]] [--desk-config PATH] [--jobs J]\n";
            return 1;
        }
    }

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient oracle", gradient_oracle},
        {"gradient scope", gradient_scope},
        {"weighted-average arithmetic", table_arithmetic},
        {"size law", size_law},
        {"channel ratios", channel_ratios},
        {"loss closed forms", loss_closed_forms},
        {"extraction fidelity", extraction_fidelity},
        {"desk-scale method effect", [&] { return desk_effect(desk_text, jobs); }},
        {"determinism and persistence", determinism_persistence},
        {"schedule fidelity", schedule_fidelity},
    };

    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k + 1);
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.passed) ++failed;
        std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[k].first
                  << "): " << o.detail << std::endl;
    }
    return failed ? 3 : 0;
}
