#pragma once

// KDC1 checkpoint container (little-endian):
//
//   "KDC1" | u32 version | u8[32] config hash
//   | u32 count | count x entry        parameter table
//   | u32 count | count x entry        optimizer-state table
//   | u64 FNV-1a checksum of every preceding byte
//
//   entry = u16 name length | UTF-8 name | u8 rank | u32 extents[rank] | f32 payload[prod(extents)]
//
// Optimizer entries are "velocity/<param>" buffers plus "state/*" scalars. 64-bit
// counters are split into four 16-bit limbs so every value is exact in f32.

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "ekd/detail/bytes.hpp"
#include "ekd/ensemble.hpp"
#include "ekd/trainer.hpp"

namespace ekd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using ConfigHash = std::array<std::uint8_t, 32>;

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};
class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> values;

    bool operator==(const NamedArray&) const = default;
};

struct CheckpointData {
    ConfigHash config_hash{};
    std::vector<NamedArray> params;
    std::vector<NamedArray> optimizer;

    const NamedArray* find_optimizer(const std::string& name) const {
        for (const auto& a : optimizer)
            if (a.name == name) return &a;
        return nullptr;
    }
};

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace detail {

inline void put_table(ByteWriter& w, const std::vector<NamedArray>& table) {
    w.put(static_cast<std::uint32_t>(table.size()));
    for (const auto& a : table) {
        if (a.name.size() > 0xffff) throw ValueError("checkpoint: name too long");
        if (a.shape.size() > 0xff) throw ValueError("checkpoint: rank too large");
        if (numel(a.shape) != a.values.size()) throw ShapeError("checkpoint: payload does not match shape of " + a.name);
        w.put(static_cast<std::uint16_t>(a.name.size()));
        w.put_string(a.name);
        w.put(static_cast<std::uint8_t>(a.shape.size()));
        for (auto e : a.shape) w.put(static_cast<std::uint32_t>(e));
        for (float v : a.values) w.put(v);
    }
}

inline std::vector<NamedArray> get_table(ByteReader<FormatError>& r) {
    const std::uint32_t count = r.get<std::uint32_t>();
    std::vector<NamedArray> table;
    for (std::uint32_t k = 0; k < count; ++k) {
        NamedArray a;
        a.name = r.get_string(r.get<std::uint16_t>());
        const std::uint8_t rank = r.get<std::uint8_t>();
        for (std::uint8_t d = 0; d < rank; ++d) a.shape.push_back(r.get<std::uint32_t>());
        const std::size_t n = numel(a.shape);
        if (n > r.remaining() / sizeof(float)) throw FormatError("checkpoint: truncated payload for " + a.name);
        a.values.resize(n);
        for (auto& v : a.values) v = r.get<float>();
        table.push_back(std::move(a));
    }
    return table;
}

inline std::vector<float> split_u64(std::uint64_t v) {
    return {static_cast<float>(v & 0xffff), static_cast<float>((v >> 16) & 0xffff),
            static_cast<float>((v >> 32) & 0xffff), static_cast<float>(v >> 48)};
}

inline std::uint64_t join_u64(const std::vector<float>& limbs) {
    if (limbs.size() != 4) throw FormatError("checkpoint: malformed 64-bit state value");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        const float f = limbs[i];
        if (!(f >= 0.0f && f <= 65535.0f) || f != static_cast<float>(static_cast<std::uint32_t>(f)))
            throw FormatError("checkpoint: malformed 64-bit state value");
        v |= static_cast<std::uint64_t>(f) << (16 * i);
    }
    return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& c) {
    detail::ByteWriter w;
    w.put_string("KDC1");
    w.put(kCheckpointVersion);
    w.put_bytes(c.config_hash);
    detail::put_table(w, c.params);
    detail::put_table(w, c.optimizer);
    w.put(fnv1a64(w.buffer()));
    return std::move(w.buffer());
}

/// Parses and verifies a checkpoint. The checksum is verified before any table
/// is interpreted, so a corrupted file never yields partial contents.
inline CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 4 + 32 + 4 + 4 + 8) throw FormatError("checkpoint: file truncated");
    if (std::string(bytes.begin(), bytes.begin() + 4) != "KDC1") throw FormatError("checkpoint: bad magic, expected KDC1");
    const auto body = bytes.first(bytes.size() - 8);
    detail::ByteReader<FormatError> tail(bytes.last(8));
    if (tail.get<std::uint64_t>() != fnv1a64(body)) throw ChecksumError("checkpoint: checksum mismatch (file corrupted or truncated)");
    detail::ByteReader<FormatError> r(body);
    r.get_bytes(4);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint: format version " + std::to_string(version) + ", expected " +
                           std::to_string(kCheckpointVersion));
    CheckpointData c;
    auto hash = r.get_bytes(32);
    std::copy(hash.begin(), hash.end(), c.config_hash.begin());
    c.params = detail::get_table(r);
    c.optimizer = detail::get_table(r);
    if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes before checksum");
    return c;
}

inline void save_checkpoint_file(const std::string& path, const CheckpointData& c) {
    detail::write_file(path, encode_checkpoint(c));
}

inline CheckpointData load_checkpoint_file(const std::string& path) {
    return decode_checkpoint(detail::read_file(path));
}

template <typename T>
std::vector<NamedArray> snapshot_params(const ParamRegistry<T>& params) {
    std::vector<NamedArray> out;
    for (const auto& p : params)
        out.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
    return out;
}

/// Copies stored values into `params` after checking that names and shapes match
/// exactly; nothing is written unless the whole table matches.
template <typename T>
void apply_params(const ParamRegistry<T>& params, const std::vector<NamedArray>& stored) {
    std::set<std::string> expected, seen;
    for (const auto& p : params) expected.insert(p.name);
    std::vector<const NamedArray*> matched(params.size(), nullptr);
    for (const auto& a : stored) {
        if (!seen.insert(a.name).second) throw FormatError("checkpoint: duplicate entry '" + a.name + "'");
        const auto* p = params.find(a.name);
        if (!p) throw ShapeError("checkpoint: parameter '" + a.name + "' does not exist in the current model");
        if (p->tensor.shape() != a.shape)
            throw ShapeError("checkpoint: parameter '" + a.name + "' has shape " + to_string(a.shape) +
                             ", model expects " + to_string(p->tensor.shape()));
        matched[static_cast<std::size_t>(p - params.items().data())] = &a;
    }
    for (std::size_t k = 0; k < params.size(); ++k)
        if (!matched[k]) throw ShapeError("checkpoint: missing parameter '" + params.items()[k].name + "'");
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto t = params.items()[k].tensor;
        auto dst = t.mutable_data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(matched[k]->values[j]);
        t.zero_grad();
    }
}

template <typename T>
CheckpointData make_checkpoint(const ParamRegistry<T>& params, const TrainingState<T>* state, const ConfigHash& hash) {
    CheckpointData c;
    c.config_hash = hash;
    c.params = snapshot_params(params);
    if (state) {
        if (!state->velocity.empty())
            for (std::size_t k = 0; k < state->velocity.size(); ++k)
                c.optimizer.push_back({"velocity/" + state->velocity_names[k], params.items().at(k).tensor.shape(),
                                       std::vector<float>(state->velocity[k].begin(), state->velocity[k].end())});
        c.optimizer.push_back({"state/step", {4}, detail::split_u64(state->step)});
        c.optimizer.push_back({"state/epoch", {4}, detail::split_u64(state->epoch)});
        c.optimizer.push_back({"state/seed", {4}, detail::split_u64(state->seed)});
        c.optimizer.push_back({"state/test_count", {4}, detail::split_u64(state->test_count)});
        std::vector<float> best;
        for (auto b : state->best_correct) {
            if (b >= (1u << 24)) throw ValueError("checkpoint: correct-count too large for exact storage");
            best.push_back(static_cast<float>(b));
        }
        c.optimizer.push_back({"state/best_correct", {best.size()}, best});
    }
    return c;
}

template <typename T>
TrainingState<T> state_from_checkpoint(const CheckpointData& c, const ParamRegistry<T>& params) {
    TrainingState<T> s;
    auto scalar = [&](const char* name) {
        const auto* a = c.find_optimizer(name);
        if (!a) throw FormatError(std::string("checkpoint: missing optimizer entry ") + name);
        return detail::join_u64(a->values);
    };
    s.step = scalar("state/step");
    s.epoch = static_cast<std::size_t>(scalar("state/epoch"));
    s.seed = scalar("state/seed");
    s.test_count = static_cast<std::size_t>(scalar("state/test_count"));
    const auto* best = c.find_optimizer("state/best_correct");
    if (!best) throw FormatError("checkpoint: missing optimizer entry state/best_correct");
    for (float b : best->values) s.best_correct.push_back(static_cast<std::size_t>(b));

    std::size_t velocity_entries = 0;
    for (const auto& a : c.optimizer)
        if (a.name.rfind("velocity/", 0) == 0) ++velocity_entries;
    if (velocity_entries == 0) return s;  // saved before the first update
    if (velocity_entries != params.size())
        throw ShapeError("checkpoint: " + std::to_string(velocity_entries) + " velocity buffers for " +
                         std::to_string(params.size()) + " parameters");
    for (const auto& p : params) {
        const auto* v = c.find_optimizer("velocity/" + p.name);
        if (!v) throw ShapeError("checkpoint: missing velocity for '" + p.name + "'");
        if (v->shape != p.tensor.shape())
            throw ShapeError("checkpoint: velocity for '" + p.name + "' has shape " + to_string(v->shape));
        s.velocity_names.push_back(p.name);
        s.velocity.emplace_back(v->values.begin(), v->values.end());
    }
    return s;
}

template <typename T>
void save_checkpoint(const std::string& path, const EnsembleModel<T>& model, const TrainingState<T>* state,
                     const ConfigHash& hash) {
    save_checkpoint_file(path, make_checkpoint(model.parameters(), state, hash));
}

struct RestoreInfo {
    ConfigHash stored_hash{};
    bool has_state = false;
};

/// Loads parameters (and training state, when present) into an already built model.
template <typename T>
TrainingState<T> restore_checkpoint(const std::string& path, EnsembleModel<T>& model, RestoreInfo* info = nullptr) {
    const auto c = load_checkpoint_file(path);
    const auto params = model.parameters();
    // Parse the state first so that a bad optimizer table leaves the model untouched.
    TrainingState<T> state;
    const bool has_state = c.find_optimizer("state/step") != nullptr;
    if (has_state) state = state_from_checkpoint(c, params);
    apply_params(params, c.params);
    if (info) *info = {c.config_hash, has_state};
    return state;
}

template <typename T>
void save_student(const std::string& path, const StudentModel<T>& student, const ConfigHash& hash) {
    save_checkpoint_file(path, make_checkpoint<T>(student.parameters(), nullptr, hash));
}

/// Student index encoded in an extracted file's parameter names ("student<i>.*"), 0 if none.
inline std::size_t student_index_of(const CheckpointData& c) {
    std::size_t found = 0;
    for (const auto& a : c.params) {
        if (a.name.rfind("student", 0) != 0) continue;
        const auto dot = a.name.find('.');
        const std::size_t i = std::stoul(a.name.substr(7, dot - 7));
        if (found && found != i) return 0;
        found = i;
    }
    return found;
}

template <typename T>
StudentModel<T> load_student(const std::string& path, const ArchitectureSpec& spec, std::size_t S) {
    const auto c = load_checkpoint_file(path);
    const std::size_t i = student_index_of(c);
    if (i == 0 || i > S) throw ShapeError("'" + path + "' is not an extracted student of a " + std::to_string(S) + "-student ensemble");
    auto m = student_skeleton<T>(spec, S, i);
    apply_params(m.parameters(), c.params);
    return m;
}

}  // namespace ekd
