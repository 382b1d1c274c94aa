#pragma once

// Image classification datasets: the DSB1 container, a synthetic texture
// generator, a CIFAR-10 binary importer and the seeded batch pipeline.
//
// DSB1 layout (little-endian):
//   "DSB1" | u32 num_classes | u32 ch | u32 H | u32 W | u32 N_train | u32 N_test
//   | train pixels u8[N_train*ch*H*W] | train labels u16[N_train]
//   | test pixels u8[N_test*ch*H*W]   | test labels u16[N_test]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ekd/detail/bytes.hpp"
#include "ekd/layers.hpp"
#include "ekd/tensor.hpp"

namespace ekd {

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};
class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};
class LabelRangeError : public FormatError {
public:
    using FormatError::FormatError;
};

enum class Split { Train, Test };

struct DatasetBundle {
    std::uint32_t num_classes = 0;
    std::uint32_t channels = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint8_t> train_pixels;
    std::vector<std::uint16_t> train_labels;
    std::vector<std::uint8_t> test_pixels;
    std::vector<std::uint16_t> test_labels;
    // Per-channel statistics of x/255 over the train split.
    std::vector<double> mean;
    std::vector<double> stddev;

    std::size_t image_size() const { return std::size_t{channels} * height * width; }
    std::size_t count(Split s) const { return s == Split::Train ? train_labels.size() : test_labels.size(); }
    const std::vector<std::uint8_t>& pixels(Split s) const { return s == Split::Train ? train_pixels : test_pixels; }
    const std::vector<std::uint16_t>& labels(Split s) const { return s == Split::Train ? train_labels : test_labels; }
};

/// Fills mean/stddev from the train split.
inline void compute_normalization(DatasetBundle& d) {
    const std::size_t area = std::size_t{d.height} * d.width;
    d.mean.assign(d.channels, 0.0);
    d.stddev.assign(d.channels, 1.0);
    const std::size_t n = d.train_labels.size();
    if (n == 0 || area == 0) return;
    for (std::size_t c = 0; c < d.channels; ++c) {
        double s = 0, s2 = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint8_t* p = d.train_pixels.data() + i * d.image_size() + c * area;
            for (std::size_t k = 0; k < area; ++k) {
                const double x = p[k] / 255.0;
                s += x;
                s2 += x * x;
            }
        }
        const double cnt = static_cast<double>(n * area);
        const double m = s / cnt;
        const double var = std::max(s2 / cnt - m * m, 0.0);
        d.mean[c] = m;
        d.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
}

/// Structural checks; an empty test split is an error because evaluation is impossible.
inline void validate(const DatasetBundle& d) {
    if (d.num_classes < 2) throw ValueError("dataset: need at least 2 classes");
    if (d.channels < 1 || d.height < 1 || d.width < 1) throw ValueError("dataset: image extents must be positive");
    if (d.train_labels.empty()) throw ValueError("dataset: empty train split");
    if (d.test_labels.empty()) throw ValueError("dataset: empty test split, evaluation impossible");
    for (Split s : {Split::Train, Split::Test}) {
        if (d.pixels(s).size() != d.count(s) * d.image_size())
            throw ValueError("dataset: pixel buffer size does not match label count");
        for (auto l : d.labels(s))
            if (l >= d.num_classes)
                throw LabelRangeError("dataset: label " + std::to_string(l) + " outside [0," +
                                      std::to_string(d.num_classes) + ")");
    }
}

inline std::vector<std::uint8_t> encode_dataset(const DatasetBundle& d) {
    validate(d);
    detail::ByteWriter w;
    w.put_string("DSB1");
    for (std::uint32_t v : {d.num_classes, d.channels, d.height, d.width,
                            static_cast<std::uint32_t>(d.train_labels.size()),
                            static_cast<std::uint32_t>(d.test_labels.size())})
        w.put(v);
    w.put_bytes(d.train_pixels);
    for (auto l : d.train_labels) w.put(l);
    w.put_bytes(d.test_pixels);
    for (auto l : d.test_labels) w.put(l);
    return std::move(w.buffer());
}

inline DatasetBundle decode_dataset(std::span<const std::uint8_t> bytes) {
    detail::ByteReader<TruncatedError> r(bytes);
    if (bytes.size() < 4 || r.get_string(4) != "DSB1") throw BadMagicError("dataset: bad magic, expected DSB1");
    DatasetBundle d;
    d.num_classes = r.get<std::uint32_t>();
    d.channels = r.get<std::uint32_t>();
    d.height = r.get<std::uint32_t>();
    d.width = r.get<std::uint32_t>();
    const std::size_t n_train = r.get<std::uint32_t>();
    const std::size_t n_test = r.get<std::uint32_t>();
    const std::size_t img = d.image_size();
    if (img == 0) throw ValueError("dataset: image extents must be positive");
    auto read_split = [&](std::size_t n, std::vector<std::uint8_t>& px, std::vector<std::uint16_t>& lb) {
        if (n > r.remaining() / img) throw TruncatedError("dataset: file truncated in pixel data");
        auto p = r.get_bytes(n * img);
        px.assign(p.begin(), p.end());
        lb.resize(n);
        for (auto& l : lb) l = r.get<std::uint16_t>();
    };
    read_split(n_train, d.train_pixels, d.train_labels);
    read_split(n_test, d.test_pixels, d.test_labels);
    if (r.remaining() != 0) throw FormatError("dataset: trailing bytes after test labels");
    validate(d);
    compute_normalization(d);
    return d;
}

inline void save_dataset(const DatasetBundle& d, const std::string& path) {
    detail::write_file(path, encode_dataset(d));
}

inline DatasetBundle load_dataset(const std::string& path) {
    return decode_dataset(detail::read_file(path));
}

namespace detail {

inline double gaussian(std::mt19937_64& rng) {
    // Box-Muller on the library's portable uniform draw.
    const double u1 = 1.0 - uniform(rng, 0.0, 1.0);
    const double u2 = uniform(rng, 0.0, 1.0);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace detail

/// Class-conditional oriented gratings plus seeded pixel noise, one channel.
/// Class k has orientation pi*k/classes, a class-specific frequency and phase;
/// each sample jitters those and its contrast. `noise` is the pixel noise
/// standard deviation on the 0..255 scale.
inline DatasetBundle synth_dataset(std::size_t classes, std::size_t per_class, std::size_t H, std::size_t W,
                                   std::uint64_t seed, std::size_t test_per_class = 0, double noise = 60.0) {
    if (classes < 2) throw ValueError("synth_dataset: need at least 2 classes");
    if (per_class < 1 || H < 1 || W < 1) throw ValueError("synth_dataset: sizes must be positive");
    if (!(noise >= 0.0)) throw ValueError("synth_dataset: noise must be >= 0");
    if (test_per_class == 0) test_per_class = std::max<std::size_t>(1, per_class / 2);
    DatasetBundle d;
    d.num_classes = static_cast<std::uint32_t>(classes);
    d.channels = 1;
    d.height = static_cast<std::uint32_t>(H);
    d.width = static_cast<std::uint32_t>(W);
    std::mt19937_64 rng(seed);
    const double pi = std::numbers::pi;

    auto generate = [&](std::size_t per, std::vector<std::uint8_t>& px, std::vector<std::uint16_t>& lb) {
        const std::size_t n = per * classes;
        px.resize(n * H * W);
        lb.resize(n);
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t cls = s % classes;  // interleaved classes
            lb[s] = static_cast<std::uint16_t>(cls);
            const double angle = pi * static_cast<double>(cls) / static_cast<double>(classes) +
                                 uniform(rng, -0.25, 0.25);
            const double cycles = 3.0 + 1.5 * static_cast<double>(cls % 2) + uniform(rng, -0.5, 0.5);
            const double phase = 2.0 * pi * static_cast<double>(cls) / static_cast<double>(classes) +
                                 uniform(rng, -pi / 3.0, pi / 3.0);
            const double contrast = uniform(rng, 0.4, 1.0);
            const double ca = std::cos(angle), sa = std::sin(angle);
            std::uint8_t* img = px.data() + s * H * W;
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const double u = static_cast<double>(x) / static_cast<double>(W) * ca +
                                     static_cast<double>(y) / static_cast<double>(H) * sa;
                    const double v = 128.0 + 70.0 * contrast * std::sin(2.0 * pi * cycles * u + phase) +
                                     noise * detail::gaussian(rng);
                    img[y * W + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                }
        }
    };
    generate(per_class, d.train_pixels, d.train_labels);
    generate(test_per_class, d.test_pixels, d.test_labels);
    compute_normalization(d);
    return d;
}

/// Converts CIFAR-10 binary batches (records of 1 label byte + 3072 pixel bytes)
/// into a bundle.
inline DatasetBundle import_cifar10(const std::vector<std::string>& train_files, const std::string& test_file) {
    DatasetBundle d;
    d.num_classes = 10;
    d.channels = 3;
    d.height = 32;
    d.width = 32;
    constexpr std::size_t record = 1 + 3072;
    auto read = [&](const std::string& path, std::vector<std::uint8_t>& px, std::vector<std::uint16_t>& lb) {
        auto bytes = detail::read_file(path);
        if (bytes.empty() || bytes.size() % record != 0)
            throw TruncatedError("cifar: '" + path + "' is not a whole number of 3073-byte records");
        for (std::size_t off = 0; off < bytes.size(); off += record) {
            if (bytes[off] > 9) throw LabelRangeError("cifar: label " + std::to_string(bytes[off]) + " in '" + path + "'");
            lb.push_back(bytes[off]);
            px.insert(px.end(), bytes.begin() + static_cast<long>(off + 1), bytes.begin() + static_cast<long>(off + record));
        }
    };
    for (const auto& f : train_files) read(f, d.train_pixels, d.train_labels);
    read(test_file, d.test_pixels, d.test_labels);
    validate(d);
    compute_normalization(d);
    return d;
}

// ---------------------------------------------------------------------------
// Batching

/// Unbiased draw in [0, bound) by rejection.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v;
    do v = rng(); while (v >= limit);
    return v % bound;
}

/// Sample order for one pass: identity, or a Fisher-Yates shuffle seeded by `seed`.
inline std::vector<std::size_t> sample_order(std::size_t n, std::uint64_t seed, bool shuffle) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!shuffle) return order;
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[bounded(rng, i)]);
    return order;
}

/// Seed for the shuffle of a given epoch, derived from the run seed.
inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (std::uint64_t{words[0]} << 32) | words[1];
}

template <typename T>
struct Batch {
    Tensor<T> images;  // [B, ch, H, W], normalized
    std::vector<int> labels;
    std::vector<std::size_t> indices;
};

/// Normalized tensor for the given samples of a split: (x/255 - mean) / std per channel.
template <typename T>
Batch<T> make_batch(const DatasetBundle& d, Split split, std::span<const std::size_t> indices) {
    const std::size_t img = d.image_size(), area = std::size_t{d.height} * d.width;
    std::vector<T> values(indices.size() * img);
    Batch<T> b;
    const auto& px = d.pixels(split);
    const auto& lb = d.labels(split);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        for (std::size_t c = 0; c < d.channels; ++c) {
            const double m = d.mean.empty() ? 0.0 : d.mean[c];
            const double s = d.stddev.empty() ? 1.0 : d.stddev[c];
            for (std::size_t p = 0; p < area; ++p)
                values[k * img + c * area + p] =
                    static_cast<T>((px[i * img + c * area + p] / 255.0 - m) / s);
        }
        b.labels.push_back(lb[i]);
        b.indices.push_back(i);
    }
    b.images = Tensor<T>({indices.size(), d.channels, d.height, d.width}, std::move(values));
    return b;
}

/// One pass over a split in batches; the final partial batch is included.
template <typename T>
class BatchStream {
public:
    BatchStream(const DatasetBundle& data, Split split, std::size_t batch_size, std::uint64_t seed, bool shuffle)
        : data_(&data), split_(split), batch_size_(batch_size),
          order_(sample_order(data.count(split), seed, shuffle)) {
        if (batch_size < 1) throw ValueError("batch size must be >= 1");
    }

    bool next(Batch<T>& out) {
        if (pos_ >= order_.size()) return false;
        const std::size_t n = std::min(batch_size_, order_.size() - pos_);
        out = make_batch<T>(*data_, split_, std::span<const std::size_t>(order_).subspan(pos_, n));
        pos_ += n;
        return true;
    }

    std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
    const std::vector<std::size_t>& order() const { return order_; }

private:
    const DatasetBundle* data_;
    Split split_;
    std::size_t batch_size_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

}  // namespace ekd
