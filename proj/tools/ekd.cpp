// ekd: command-line front end for ensemble knowledge distillation runs.
//
// Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 check failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "ekd/ekd.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kValidation = 1;
constexpr int kRuntime = 2;
constexpr int kCheckFailed = 3;

ekd::RunConfig read_config(const std::string& path) {
    if (path.empty()) return ekd::parse_config("");
    std::ifstream in(path);
    if (!in) throw ekd::IoError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return ekd::parse_config(ss.str());
    } catch (const ekd::ConfigError& e) {
        throw ekd::ConfigError(0, path + ": " + e.what());
    }
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    for (const auto& t : ekd::detail::split(text, " ,"))
        seeds.push_back(ekd::detail::parse_number<std::uint64_t>(t, 0, "--seeds"));
    if (seeds.empty()) throw ekd::ValueError("--seeds: empty list");
    return seeds;
}

void print_epoch(const ekd::EpochMetrics& m) {
    std::cerr << "epoch " << std::setw(3) << m.epoch << "  lr " << m.lr << "  loss " << std::fixed
              << std::setprecision(4) << m.combined << "  acc";
    for (double a : m.student_acc) std::cerr << ' ' << std::setprecision(2) << a;
    std::cerr << "  teacher " << m.teacher_acc << std::defaultfloat << std::setprecision(6) << '\n';
}

int cmd_synth(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
    auto c = read_config(config_path);
    if (seed) c.synth.seed = *seed;
    auto d = ekd::synth_dataset(c.synth.classes, c.synth.per_class, c.synth.height, c.synth.width, c.synth.seed,
                                c.synth.test_per_class, c.synth.noise);
    ekd::save_dataset(d, out);
    std::cout << "wrote " << out << ": " << d.train_labels.size() << " train / " << d.test_labels.size()
              << " test images, " << d.num_classes << " classes, " << d.channels << 'x' << d.height << 'x'
              << d.width << '\n';
    return 0;
}

int cmd_train(const std::string& config_path, std::string out, std::optional<std::uint64_t> seed,
              const std::string& resume, const std::string& mode) {
    auto c = read_config(config_path);
    if (out.empty()) out = c.out_dir;
    ekd::RunOptions o;
    o.seed = seed ? *seed : c.seeds.front();
    o.mode = c.train.mode;
    if (mode == "baseline") o.mode = ekd::TrainMode::Baseline;
    else if (mode == "ensemble") o.mode = ekd::TrainMode::Ensemble;
    o.out_dir = out;
    o.resume_from = resume;
    o.on_epoch = print_epoch;
    o.warn = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    const auto data = ekd::load_data(c);
    const auto r = ekd::run_training(c, data, o);
    std::cout << "best student accuracies:";
    for (double a : r.best_student_acc) std::cout << ' ' << std::fixed << std::setprecision(2) << a;
    std::cout << "\nbest teacher accuracy: " << r.best_teacher_acc << "\nwrote " << (fs::path(out) / "metrics.csv").string()
              << ", last.ckpt, best.ckpt\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, const std::string& gradcam_dir,
             std::size_t gradcam_count) {
    auto c = read_config(config_path);
    const auto data = ekd::load_data(c);
    const auto spec = ekd::architecture(c, data.num_classes);
    const auto file = ekd::load_checkpoint_file(checkpoint);
    std::cout << std::fixed << std::setprecision(2);
    const std::size_t i = ekd::student_index_of(file);
    const bool extracted = i != 0 && file.optimizer.empty() &&
                           std::any_of(file.params.begin(), file.params.end(),
                                       [](const auto& a) { return a.name.rfind("base.", 0) == 0; });
    if (extracted) {
        // An extracted standalone student.
        auto student = ekd::load_student<float>(checkpoint, spec, c.students);
        const double acc = ekd::evaluate_student(student, data, ekd::Split::Test, c.train.eval_batch_size);
        std::cout << "student " << i << " test accuracy: " << acc << '\n';
        if (!gradcam_dir.empty()) {
            fs::create_directories(gradcam_dir);
            const std::size_t n = std::min<std::size_t>(gradcam_count, data.test_labels.size());
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t idx[] = {k};
                auto b = ekd::make_batch<float>(data, ekd::Split::Test, idx);
                auto map = ekd::grad_cam(student, b.images, static_cast<std::size_t>(b.labels[0]));
                const auto path = fs::path(gradcam_dir) / ("student" + std::to_string(i) + "_test" + std::to_string(k) + ".pgm");
                ekd::write_pgm(path.string(), map);
            }
            std::cout << "wrote " << n << " heat maps to " << gradcam_dir << '\n';
        }
        return 0;
    }
    const bool baseline = std::any_of(file.params.begin(), file.params.end(),
                                      [](const auto& a) { return a.name.find(".base.") != std::string::npos; });
    auto model = baseline ? ekd::build_baseline<float>(spec, c.students, 0) : ekd::build_ensemble<float>(spec, c.students, 0);
    ekd::apply_params(model.parameters(), file.params);
    const auto r = ekd::evaluate(model, data, ekd::Split::Test, c.train.eval_batch_size);
    for (std::size_t i = 0; i < model.S; ++i) std::cout << "student " << i + 1 << " test accuracy: " << r.student_acc(i) << '\n';
    std::cout << "ensemble teacher test accuracy: " << r.teacher_acc() << '\n';
    if (!gradcam_dir.empty()) {
        fs::create_directories(gradcam_dir);
        const std::size_t n = std::min<std::size_t>(gradcam_count, data.test_labels.size());
        for (std::size_t s = 1; s <= model.S; ++s) {
            auto student = ekd::extract_student(model, s);
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t idx[] = {k};
                auto b = ekd::make_batch<float>(data, ekd::Split::Test, idx);
                auto map = ekd::grad_cam(student, b.images, static_cast<std::size_t>(b.labels[0]));
                ekd::write_pgm((fs::path(gradcam_dir) / ("student" + std::to_string(s) + "_test" + std::to_string(k) + ".pgm")).string(), map);
            }
        }
        std::cout << "wrote " << n * model.S << " heat maps to " << gradcam_dir << '\n';
    }
    return 0;
}

int cmd_extract(const std::string& config_path, const std::string& checkpoint, std::size_t student,
                const std::string& out) {
    auto c = read_config(config_path);
    std::size_t classes = c.num_classes;
    if (!classes) classes = c.data_path.empty() ? c.synth.classes : ekd::load_dataset(c.data_path).num_classes;
    const auto spec = ekd::architecture(c, classes);
    auto model = ekd::build_ensemble<float>(spec, c.students, 0);
    ekd::RestoreInfo info;
    ekd::restore_checkpoint(checkpoint, model, &info);
    auto s = ekd::extract_student(model, student);
    ekd::save_student(out, s, info.stored_hash);
    std::cout << "wrote student " << student << " (" << s.parameters().scalar_count() << " parameters) to " << out << '\n';
    return 0;
}

int cmd_gradcheck(double step, double tolerance) {
    ekd::OracleOptions o;
    o.step = step;
    o.tolerance = tolerance;
    bool ok = true;
    for (const auto& r : ekd::run_gradient_oracle(o)) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(34) << r.label << std::right
                  << " max rel error " << std::scientific << std::setprecision(3) << r.max_rel_error << " over "
                  << r.coordinates << " coordinates (worst " << r.worst << ")\n";
        ok = ok && r.passed;
    }
    return ok ? 0 : kCheckFailed;
}

int cmd_compare(const std::string& config_path, const std::string& seeds_text, std::size_t jobs,
                const std::string& csv_path) {
    auto c = read_config(config_path);
    const auto seeds = seeds_text.empty() ? c.seeds : parse_seeds(seeds_text);
    const auto data = ekd::load_data(c);
    auto report = ekd::compare(c, data, seeds, jobs ? jobs : c.jobs, [](const std::string& m) { std::cerr << m << '\n'; });
    std::cout << ekd::format_compare(report, false);
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw ekd::IoError("cannot open '" + csv_path + "' for writing");
        out << ekd::format_compare(report, true);
    }
    return 0;
}

int cmd_size(const std::string& config_path, const std::string& csv_path) {
    auto c = read_config(config_path);
    const std::size_t classes = c.num_classes ? c.num_classes : c.synth.classes;
    const auto spec = ekd::architecture(c, classes);
    const auto model = ekd::build_ensemble<float>(spec, std::max<std::size_t>(c.students, 2), 0);
    auto report = ekd::size_report(model);
    std::ostringstream os;
    os << "student,params,relative_pct\n" << std::fixed << std::setprecision(2);
    for (std::size_t i = 0; i < c.students; ++i) os << i + 1 << ',' << report.params[i] << ',' << report.relative_pct[i] << '\n';
    std::cout << os.str();
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw ekd::IoError("cannot open '" + csv_path + "' for writing");
        out << os.str();
    }
    return 0;
}

int cmd_import(const std::vector<std::string>& train, const std::string& test, const std::string& out) {
    auto d = ekd::import_cifar10(train, test);
    ekd::save_dataset(d, out);
    std::cout << "wrote " << out << ": " << d.train_labels.size() << " train / " << d.test_labels.size() << " test\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Online ensemble knowledge distillation: train, extract and evaluate compressed students"};
    app.require_subcommand(1);

    std::string config, out, checkpoint, resume, seeds, csv, gradcam_dir, mode, test_file;
    std::vector<std::string> train_files;
    std::optional<std::uint64_t> seed;
    std::size_t student = 0, jobs = 0, gradcam_count = 4;
    double step = 1e-5, tolerance = 1e-4;

    auto* synth = app.add_subcommand("synth", "Generate the synthetic grating dataset as a DSB1 file");
    synth->add_option("--config", config, "Config file (data.synth.* keys)");
    synth->add_option("--out", out, "Output .dsb path")->required();
    synth->add_option("--seed", seed, "Override data.synth.seed");

    auto* train = app.add_subcommand("train", "Train an ensemble (or baseline) and write metrics and checkpoints");
    train->add_option("--config", config, "Config file");
    train->add_option("--out", out, "Output directory (default: out.dir)");
    train->add_option("--seed", seed, "Run seed (default: first of seeds)");
    train->add_option("--resume", resume, "Continue from a checkpoint written by a previous run");
    train->add_option("--mode", mode, "ensemble or baseline (default: train.mode)")
        ->check(CLI::IsMember({"ensemble", "baseline"}));

    auto* eval = app.add_subcommand("eval", "Test accuracy of an ensemble checkpoint or an extracted student");
    eval->add_option("--config", config, "Config file");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
    eval->add_option("--gradcam-dir", gradcam_dir, "Write Grad-CAM heat maps (PGM) for the first test images");
    eval->add_option("--gradcam-count", gradcam_count, "Number of test images for Grad-CAM");

    auto* extract = app.add_subcommand("extract", "Write one student as a standalone model");
    extract->add_option("--config", config, "Config file");
    extract->add_option("--checkpoint", checkpoint, "Ensemble checkpoint")->required();
    extract->add_option("--student", student, "Student index (1 = uncompressed)")->required()->check(CLI::PositiveNumber);
    extract->add_option("--out", out, "Output path")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "Run the finite-difference gradient oracle suite");
    gradcheck->add_option("--step", step, "Central-difference step");
    gradcheck->add_option("--tolerance", tolerance, "Maximum relative error");

    auto* compare = app.add_subcommand("compare", "Paired ensemble vs. baseline runs over several seeds");
    compare->add_option("--config", config, "Config file");
    compare->add_option("--seeds", seeds, "Comma-separated seeds (default: seeds key)");
    compare->add_option("--jobs", jobs, "Parallel seed runs (default: jobs key)");
    compare->add_option("--csv", csv, "Also write the table as CSV");

    auto* size = app.add_subcommand("size", "Deployable parameter count of every student");
    size->add_option("--config", config, "Config file");
    size->add_option("--csv", csv, "Also write the report as CSV");

    auto* import = app.add_subcommand("import-cifar", "Convert CIFAR-10 binary batches to DSB1");
    import->add_option("--train", train_files, "Training batch files")->required();
    import->add_option("--test", test_file, "Test batch file")->required();
    import->add_option("--out", out, "Output .dsb path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kValidation;
    }

    try {
        if (*synth) return cmd_synth(config, out, seed);
        if (*train) return cmd_train(config, out, seed, resume, mode);
        if (*eval) return cmd_eval(config, checkpoint, gradcam_dir, gradcam_count);
        if (*extract) return cmd_extract(config, checkpoint, student, out);
        if (*gradcheck) return cmd_gradcheck(step, tolerance);
        if (*compare) return cmd_compare(config, seeds, jobs, csv);
        if (*size) return cmd_size(config, csv);
        if (*import) return cmd_import(train_files, test_file, out);
    } catch (const ekd::ValueError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const ekd::ShapeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const ekd::FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return 0;
}
