#pragma once

// Run configuration: flat `key = value` lines, `#` comments, dotted keys.
//
// Block layers are written as space- or comma-separated tokens:
//   conv:<out>[:<kernel>[:<stride>]]
//   res:<out>[:<kernel>[:<stride>[:<repeat>]]]
//   maxpool[:<window>[:<stride>]]
//   gap
// Input channels are inferred from the chain.

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ekd/checkpoint.hpp"
#include "ekd/ensemble.hpp"
#include "ekd/losses.hpp"
#include "ekd/trainer.hpp"

namespace ekd {

struct SynthParams {
    std::size_t classes = 4;
    std::size_t per_class = 400;
    std::size_t test_per_class = 200;
    std::size_t height = 32;
    std::size_t width = 32;
    std::uint64_t seed = 7;
    double noise = 60.0;

    bool operator==(const SynthParams&) const = default;
};

struct RunConfig {
    // Architecture as written; num_classes == 0 means "take it from the dataset".
    std::array<std::string, 4> block_text{"conv:8:3:1 maxpool:2:2", "res:16:3:1", "res:24:3:2", "res:32:3:2"};
    std::array<std::size_t, 3> input_shape{1, 32, 32};
    std::size_t num_classes = 0;
    std::size_t students = 5;
    std::vector<double> teacher_weights;
    TrainConfig train;
    std::string data_path;
    SynthParams synth;
    std::string out_dir = "runs/default";
    std::vector<std::uint64_t> seeds{1};
    std::size_t jobs = 1;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, std::string_view seps) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (seps.find(c) != std::string_view::npos) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

template <typename U>
U parse_number(const std::string& text, std::size_t line, const std::string& key) {
    U value{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last)
        throw ConfigError(line, "'" + key + "': cannot parse '" + text + "' as a number");
    return value;
}

inline bool parse_bool(const std::string& text, std::size_t line, const std::string& key) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError(line, "'" + key + "': expected a boolean, got '" + text + "'");
}

}  // namespace detail

/// Parses the block grammar into layer specs, chaining channels from `in_channels`.
inline BlockSpec parse_block(const std::string& text, std::size_t block_index, std::size_t in_channels,
                             std::size_t line = 0) {
    BlockSpec b;
    b.block_index = block_index;
    std::size_t prev = in_channels;
    const std::string key = "arch.block" + std::to_string(block_index);
    for (const auto& tok : detail::split(text, " ,\t")) {
        auto f = detail::split(tok, ":");
        auto num = [&](std::size_t idx, std::size_t dflt) {
            return idx < f.size() ? detail::parse_number<std::size_t>(f[idx], line, key) : dflt;
        };
        LayerSpec l;
        l.in_channels = prev;
        if (f[0] == "conv" || f[0] == "res") {
            if (f.size() < 2) throw ConfigError(line, key + ": '" + tok + "' needs an output channel count");
            l.kind = f[0] == "conv" ? LayerKind::Conv : LayerKind::Residual;
            l.out_channels = num(1, 0);
            l.kernel = num(2, 3);
            l.stride = num(3, 1);
            l.repeat = l.kind == LayerKind::Residual ? num(4, 1) : 1;
            if (f.size() > (l.kind == LayerKind::Residual ? 5u : 4u))
                throw ConfigError(line, key + ": too many fields in '" + tok + "'");
        } else if (f[0] == "maxpool") {
            l.kind = LayerKind::MaxPool;
            l.out_channels = prev;
            l.kernel = num(1, 2);
            l.stride = num(2, 2);
            if (f.size() > 3) throw ConfigError(line, key + ": too many fields in '" + tok + "'");
        } else if (f[0] == "gap") {
            l.kind = LayerKind::GlobalAvgPool;
            l.out_channels = prev;
            if (f.size() > 1) throw ConfigError(line, key + ": 'gap' takes no fields");
        } else {
            throw ConfigError(line, key + ": unknown layer '" + f[0] + "'");
        }
        try {
            validate(l);
        } catch (const ValueError& e) {
            throw ConfigError(line, key + ": " + e.what());
        }
        prev = l.out_channels;
        b.layers.push_back(l);
    }
    if (b.layers.empty()) throw ConfigError(line, key + ": no layers");
    return b;
}

/// Architecture described by a config; `num_classes` overrides the config's value when non-zero.
inline ArchitectureSpec architecture(const RunConfig& c, std::size_t num_classes = 0) {
    ArchitectureSpec a;
    a.input_shape = c.input_shape;
    a.num_classes = num_classes ? num_classes : (c.num_classes ? c.num_classes : c.synth.classes);
    std::size_t prev = c.input_shape[0];
    for (std::size_t b = 0; b < 4; ++b) {
        a.blocks[b] = parse_block(c.block_text[b], b + 1, prev);
        prev = a.blocks[b].out_channels();
    }
    a.classifier = {LayerKind::Linear, prev, a.num_classes, 1, 1, 1};
    validate(a);
    return a;
}

inline std::string lr_drops_text(const std::vector<LrDrop>& drops) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < drops.size(); ++i) os << (i ? ", " : "") << drops[i].fraction << ':' << drops[i].multiplier;
    return os.str();
}

template <typename U>
std::string list_text(const std::vector<U>& v) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    return os.str();
}

inline RunConfig parse_config(const std::string& text) {
    RunConfig c;
    std::map<std::string, std::size_t> key_line;
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const auto hash = raw.find('#');
        const std::string body = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(line, "expected 'key = value', got '" + body + "'");
        const std::string key = detail::trim(body.substr(0, eq));
        const std::string val = detail::trim(body.substr(eq + 1));
        if (key_line.count(key)) throw ConfigError(line, "duplicate key '" + key + "'");
        key_line[key] = line;
        auto size = [&] { return detail::parse_number<std::size_t>(val, line, key); };
        auto real = [&] { return detail::parse_number<double>(val, line, key); };
        auto u64 = [&] { return detail::parse_number<std::uint64_t>(val, line, key); };
        auto flag = [&] { return detail::parse_bool(val, line, key); };

        if (key.rfind("arch.block", 0) == 0 && key.size() == 11 && key[10] >= '1' && key[10] <= '4') {
            c.block_text[static_cast<std::size_t>(key[10] - '1')] = val;
        } else if (key == "arch.input") {
            auto dims = detail::split(val, "x");
            if (dims.size() != 3) throw ConfigError(line, "arch.input: expected CxHxW");
            for (std::size_t i = 0; i < 3; ++i) c.input_shape[i] = detail::parse_number<std::size_t>(dims[i], line, key);
        } else if (key == "arch.num_classes") c.num_classes = size();
        else if (key == "students") c.students = size();
        else if (key == "ensemble.teacher_weights") {
            c.teacher_weights.clear();
            for (const auto& t : detail::split(val, " ,")) c.teacher_weights.push_back(detail::parse_number<double>(t, line, key));
        }
        else if (key == "loss.alpha") c.train.weights.alpha = real();
        else if (key == "loss.beta") c.train.weights.beta = real();
        else if (key == "loss.gamma") c.train.weights.gamma = real();
        else if (key == "loss.temperature") c.train.weights.temperature = real();
        else if (key == "loss.kd_teacher_grad") c.train.weights.kd_teacher_grad = flag();
        else if (key == "loss.kd_t2_scale") c.train.weights.kd_t2_scale = flag();
        else if (key == "train.epochs") c.train.epochs = size();
        else if (key == "train.batch_size") c.train.batch_size = size();
        else if (key == "train.eval_batch_size") c.train.eval_batch_size = size();
        else if (key == "train.lr") c.train.base_lr = real();
        else if (key == "train.momentum") c.train.momentum = real();
        else if (key == "train.nesterov") c.train.nesterov = flag();
        else if (key == "train.mode") {
            if (val == "ensemble") c.train.mode = TrainMode::Ensemble;
            else if (val == "baseline") c.train.mode = TrainMode::Baseline;
            else throw ConfigError(line, "train.mode: expected 'ensemble' or 'baseline'");
        } else if (key == "train.lr_drops") {
            c.train.lr_drops.clear();
            for (const auto& t : detail::split(val, " ,")) {
                auto parts = detail::split(t, ":");
                if (parts.size() != 2) throw ConfigError(line, "train.lr_drops: expected fraction:multiplier, got '" + t + "'");
                c.train.lr_drops.push_back({detail::parse_number<double>(parts[0], line, key),
                                            detail::parse_number<double>(parts[1], line, key)});
            }
        }
        else if (key == "data.path") c.data_path = val;
        else if (key == "data.synth.classes") c.synth.classes = size();
        else if (key == "data.synth.per_class") c.synth.per_class = size();
        else if (key == "data.synth.test_per_class") c.synth.test_per_class = size();
        else if (key == "data.synth.height") c.synth.height = size();
        else if (key == "data.synth.width") c.synth.width = size();
        else if (key == "data.synth.seed") c.synth.seed = u64();
        else if (key == "data.synth.noise") c.synth.noise = real();
        else if (key == "out.dir") c.out_dir = val;
        else if (key == "seeds") {
            c.seeds.clear();
            for (const auto& t : detail::split(val, " ,")) c.seeds.push_back(detail::parse_number<std::uint64_t>(t, line, key));
            if (c.seeds.empty()) throw ConfigError(line, "seeds: empty list");
        }
        else if (key == "jobs") c.jobs = std::max<std::size_t>(1, size());
        else throw ConfigError(line, "unknown key '" + key + "'");
    }

    auto line_of = [&](std::initializer_list<const char*> keys) {
        std::size_t l = 0;
        for (const char* k : keys)
            if (auto it = key_line.find(k); it != key_line.end()) l = std::max(l, it->second);
        return l;
    };
    try {
        validate(c.train.weights);
    } catch (const ValueError& e) {
        throw ConfigError(line_of({"loss.alpha", "loss.beta", "loss.gamma", "loss.temperature"}), e.what());
    }
    try {
        validate(c.train);
    } catch (const ValueError& e) {
        throw ConfigError(line_of({"train.epochs", "train.batch_size", "train.eval_batch_size", "train.lr",
                                   "train.momentum", "train.lr_drops"}),
                          e.what());
    }
    const bool baseline = c.train.mode == TrainMode::Baseline;
    if (c.students < (baseline ? 1u : 2u))
        throw ConfigError(line_of({"students", "train.mode"}), "students must be >= 2 for ensemble training");
    if (!c.teacher_weights.empty()) {
        double total = 0;
        for (double w : c.teacher_weights) total += w;
        if (c.teacher_weights.size() != c.students || std::abs(total - 1.0) > 1e-6 ||
            std::any_of(c.teacher_weights.begin(), c.teacher_weights.end(), [](double w) { return w < 0; }))
            throw ConfigError(line_of({"ensemble.teacher_weights"}),
                              "ensemble.teacher_weights: need one non-negative weight per student, summing to 1");
    }
    if (c.synth.classes < 2) throw ConfigError(line_of({"data.synth.classes"}), "data.synth.classes must be >= 2");
    if (!(c.synth.noise >= 0.0)) throw ConfigError(line_of({"data.synth.noise"}), "data.synth.noise must be >= 0");
    try {
        architecture(c);
    } catch (const ConfigError& e) {
        if (e.line() != 0) throw;
        std::size_t l = 0;
        for (std::size_t k = 1; k <= 4; ++k) {
            const std::string key = "arch.block" + std::to_string(k);
            if (std::string_view(e.what()).starts_with(key + ":")) l = line_of({key.c_str()});
        }
        throw ConfigError(l, e.what());
    } catch (const ValueError& e) {
        throw ConfigError(line_of({"arch.block1", "arch.block2", "arch.block3", "arch.block4", "arch.input",
                                   "arch.num_classes"}),
                          e.what());
    }
    return c;
}

/// Canonical `key = value` rendering of every setting that affects training results
/// (seed list, output directory and job count excluded).
inline std::string canonical_text(const RunConfig& c) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t b = 0; b < 4; ++b) os << "arch.block" << b + 1 << " = " << c.block_text[b] << '\n';
    os << "arch.input = " << c.input_shape[0] << 'x' << c.input_shape[1] << 'x' << c.input_shape[2] << '\n';
    os << "arch.num_classes = " << c.num_classes << '\n';
    os << "students = " << c.students << '\n';
    os << "ensemble.teacher_weights = " << list_text(c.teacher_weights) << '\n';
    const auto& w = c.train.weights;
    os << "loss.alpha = " << w.alpha << "\nloss.beta = " << w.beta << "\nloss.gamma = " << w.gamma
       << "\nloss.temperature = " << w.temperature << "\nloss.kd_teacher_grad = " << w.kd_teacher_grad
       << "\nloss.kd_t2_scale = " << w.kd_t2_scale << '\n';
    const auto& t = c.train;
    os << "train.epochs = " << t.epochs << "\ntrain.batch_size = " << t.batch_size
       << "\ntrain.eval_batch_size = " << t.eval_batch_size << "\ntrain.lr = " << t.base_lr
       << "\ntrain.momentum = " << t.momentum << "\ntrain.nesterov = " << t.nesterov
       << "\ntrain.lr_drops = " << lr_drops_text(t.lr_drops)
       << "\ntrain.mode = " << (t.mode == TrainMode::Ensemble ? "ensemble" : "baseline") << '\n';
    os << "data.path = " << c.data_path << '\n';
    const auto& s = c.synth;
    os << "data.synth.classes = " << s.classes << "\ndata.synth.per_class = " << s.per_class
       << "\ndata.synth.test_per_class = " << s.test_per_class << "\ndata.synth.height = " << s.height
       << "\ndata.synth.width = " << s.width << "\ndata.synth.seed = " << s.seed
       << "\ndata.synth.noise = " << s.noise << '\n';
    return os.str();
}

inline ConfigHash sha256(std::string_view text) {
    ConfigHash out{};
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
        throw Error("SHA-256 computation failed");
    return out;
}

/// Hash of the canonical config for a given run seed (the seed is part of what the run reproduces).
inline ConfigHash config_hash(const RunConfig& c, std::uint64_t seed) {
    return sha256(canonical_text(c) + "run.seed = " + std::to_string(seed) + '\n');
}

inline std::string hex(const ConfigHash& h) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (auto b : h) {
        s += digits[b >> 4];
        s += digits[b & 15];
    }
    return s;
}

}  // namespace ekd
