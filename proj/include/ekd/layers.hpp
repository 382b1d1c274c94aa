#pragma once

// Layer and block building elements: convolution, plain (normalization-free)
// residual stacks, pooling, the linear classifier head and the 1x1 channel
// adaptation layer used for feature-map distillation.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ekd/conv.hpp"
#include "ekd/tensor.hpp"

namespace ekd {

enum class LayerKind { Conv, Residual, MaxPool, GlobalAvgPool, Linear };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Residual: return "residual-block";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::GlobalAvgPool: return "global-average-pool";
        case LayerKind::Linear: return "linear";
    }
    return "?";
}

/// Declarative layer description. For pooling layers the channel counts pass
/// through unchanged and `kernel` is the pooling window.
struct LayerSpec {
    LayerKind kind = LayerKind::Conv;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t repeat = 1;

    bool operator==(const LayerSpec&) const = default;
};

struct BlockSpec {
    std::vector<LayerSpec> layers;
    std::size_t block_index = 1;

    std::size_t in_channels() const { return layers.front().in_channels; }
    std::size_t out_channels() const { return layers.back().out_channels; }
    bool operator==(const BlockSpec&) const = default;
};

inline void validate(const LayerSpec& s) {
    const std::string what = std::string(layer_kind_name(s.kind)) + " layer: ";
    if (s.in_channels < 1 || s.out_channels < 1) throw ValueError(what + "channel counts must be >= 1");
    if (s.stride != 1 && s.stride != 2) throw ValueError(what + "stride must be 1 or 2");
    if (s.repeat < 1) throw ValueError(what + "repeat must be >= 1");
    switch (s.kind) {
        case LayerKind::Conv:
        case LayerKind::Residual:
            if (s.kernel < 1 || s.kernel % 2 == 0) throw ValueError(what + "kernel must be odd and >= 1");
            break;
        case LayerKind::MaxPool:
            if (s.kernel < 1) throw ValueError(what + "window must be >= 1");
            [[fallthrough]];
        case LayerKind::GlobalAvgPool:
            if (s.in_channels != s.out_channels) throw ValueError(what + "pooling cannot change channels");
            break;
        case LayerKind::Linear:
            break;
    }
}

inline void validate(const BlockSpec& b) {
    const std::string what = "block " + std::to_string(b.block_index) + ": ";
    if (b.layers.empty()) throw ValueError(what + "no layers");
    for (std::size_t i = 0; i < b.layers.size(); ++i) {
        validate(b.layers[i]);
        if (b.layers[i].kind == LayerKind::Linear)
            throw ValueError(what + "linear layers belong to the classifier, not to blocks");
        if (i > 0 && b.layers[i].in_channels != b.layers[i - 1].out_channels)
            throw ValueError(what + "layer " + std::to_string(i) + " expects " +
                             std::to_string(b.layers[i].in_channels) + " channels but its predecessor produces " +
                             std::to_string(b.layers[i - 1].out_channels));
    }
}

/// Spatial extent after a layer, for an input extent `extent`.
inline std::size_t output_extent(const LayerSpec& s, std::size_t extent) {
    switch (s.kind) {
        case LayerKind::Conv:
        case LayerKind::Residual:
            return (extent - 1) / s.stride + 1;  // odd kernel, "same" padding
        case LayerKind::MaxPool:
            if (s.kernel > extent) throw ShapeError("maxpool window larger than input extent");
            return (extent - s.kernel) / s.stride + 1;
        case LayerKind::GlobalAvgPool:
            return 1;
        case LayerKind::Linear:
            return extent;
    }
    return extent;
}

inline std::size_t output_extent(const BlockSpec& b, std::size_t extent) {
    for (const auto& l : b.layers) extent = output_extent(l, extent);
    return extent;
}

// ---------------------------------------------------------------------------
// Parameter registry

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

/// Ordered, uniquely named view of a model's trainable tensors.
template <typename T>
class ParamRegistry {
public:
    void add(std::string name, const Tensor<T>& t) {
        for (const auto& p : items_)
            if (p.name == name) throw ValueError("duplicate parameter name '" + name + "'");
        items_.push_back({std::move(name), t});
    }

    const std::vector<NamedParam<T>>& items() const { return items_; }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    std::size_t size() const { return items_.size(); }

    const NamedParam<T>* find(const std::string& name) const {
        for (const auto& p : items_)
            if (p.name == name) return &p;
        return nullptr;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : items_) n += p.tensor.size();
        return n;
    }

    void zero_grad() const {
        for (auto p : items_) p.tensor.zero_grad();
    }

private:
    std::vector<NamedParam<T>> items_;
};

// ---------------------------------------------------------------------------
// Initialization

/// Uniform double in [lo, hi) from the top 53 bits of a 64-bit draw, so values
/// are identical across standard-library implementations.
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

/// Fan-in uniform initialization U(-b, b) with b = sqrt(3*gain/fan_in); gain 2 is
/// He initialization for ReLU inputs, gain 1 keeps a linear map variance-preserving.
/// Draws are consumed even for gain 0, so the stream layout does not depend on it.
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 2.0) {
    const double bound = std::sqrt(3.0 * gain / static_cast<double>(fan_in));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(uniform(rng, -bound, bound));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Conv2dLayer {
    Tensor<T> kernel;  // [Cout, Cin, k, k]
    Tensor<T> bias;    // [Cout]
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool relu_after = false;

    std::size_t in_channels() const { return kernel.dim(1); }
    std::size_t out_channels() const { return kernel.dim(0); }

    Tensor<T> forward(const Tensor<T>& x) const {
        auto y = conv2d(x, kernel, bias, stride, padding);
        return relu_after ? relu(y) : y;
    }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        reg.add(prefix + ".kernel", kernel);
        reg.add(prefix + ".bias", bias);
    }

    Conv2dLayer clone() const {
        return {kernel.clone(), bias.clone(), stride, padding, relu_after};
    }

    static Conv2dLayer make(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                            bool relu_after, std::mt19937_64& rng, double gain = 2.0) {
        Conv2dLayer c;
        c.kernel = he_uniform<T>({cout, cin, k, k}, cin * k * k, rng, gain);
        c.bias = Tensor<T>::zeros({cout}, true);
        c.stride = stride;
        c.padding = (k - 1) / 2;
        c.relu_after = relu_after;
        return c;
    }
};

/// y = skip(x) + conv2(relu(conv1(x))); skip is the identity unless the unit
/// changes channels or stride, in which case it is a strided 1x1 projection.
/// conv2 starts at zero so an untrained unit is its skip path (no normalization
/// layers exist to stop activations doubling per unit).
template <typename T>
struct ResidualUnit {
    Conv2dLayer<T> conv1;
    Conv2dLayer<T> conv2;
    std::optional<Conv2dLayer<T>> projection;

    Tensor<T> forward(const Tensor<T>& x) const {
        auto h = conv2.forward(relu(conv1.forward(x)));
        return add(h, projection ? projection->forward(x) : x);
    }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        conv1.collect(prefix + ".conv1", reg);
        conv2.collect(prefix + ".conv2", reg);
        if (projection) projection->collect(prefix + ".proj", reg);
    }

    ResidualUnit clone() const {
        ResidualUnit u{conv1.clone(), conv2.clone(), std::nullopt};
        if (projection) u.projection = projection->clone();
        return u;
    }
};

template <typename T>
struct ResidualLayer {
    std::vector<ResidualUnit<T>> units;

    Tensor<T> forward(Tensor<T> x) const {
        for (const auto& u : units) x = u.forward(x);
        return x;
    }
    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        for (std::size_t i = 0; i < units.size(); ++i) units[i].collect(prefix + ".u" + std::to_string(i), reg);
    }
    ResidualLayer clone() const {
        ResidualLayer r;
        for (const auto& u : units) r.units.push_back(u.clone());
        return r;
    }
};

struct MaxPoolLayer {
    std::size_t window = 2;
    std::size_t stride = 2;
};

struct GlobalAvgPoolLayer {};

/// Fully connected classifier head. 4-d inputs are globally average pooled first.
template <typename T>
struct LinearLayer {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> flat = x;
        if (x.rank() == 4) {
            auto pooled = global_avg_pool2d(x);
            flat = reshape(pooled, {x.dim(0), x.dim(1)});
        }
        if (flat.rank() != 2 || flat.dim(1) != in_features())
            throw ShapeError("linear: expected [N," + std::to_string(in_features()) + "], got " +
                             to_string(flat.shape()));
        return add(matmul(flat, weight), bias);
    }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        reg.add(prefix + ".weight", weight);
        reg.add(prefix + ".bias", bias);
    }

    LinearLayer clone() const { return {weight.clone(), bias.clone()}; }

    static LinearLayer make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
        return {he_uniform<T>({in, out}, in, rng, 1.0), Tensor<T>::zeros({out}, true)};
    }
};

template <typename T>
using Layer = std::variant<Conv2dLayer<T>, ResidualLayer<T>, MaxPoolLayer, GlobalAvgPoolLayer>;

/// Materializes a block-level layer spec (not the classifier).
template <typename T>
Layer<T> build_layer(const LayerSpec& spec, std::mt19937_64& rng) {
    validate(spec);
    switch (spec.kind) {
        case LayerKind::Conv:
            return Conv2dLayer<T>::make(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, true, rng);
        case LayerKind::Residual: {
            ResidualLayer<T> r;
            for (std::size_t u = 0; u < spec.repeat; ++u) {
                const std::size_t cin = u == 0 ? spec.in_channels : spec.out_channels;
                const std::size_t stride = u == 0 ? spec.stride : 1;
                ResidualUnit<T> unit{
                    Conv2dLayer<T>::make(cin, spec.out_channels, spec.kernel, stride, false, rng),
                    Conv2dLayer<T>::make(spec.out_channels, spec.out_channels, spec.kernel, 1, false, rng, 0.0),
                    std::nullopt};
                if (cin != spec.out_channels || stride != 1)
                    unit.projection = Conv2dLayer<T>::make(cin, spec.out_channels, 1, stride, false, rng, 1.0);
                r.units.push_back(std::move(unit));
            }
            return r;
        }
        case LayerKind::MaxPool:
            return MaxPoolLayer{spec.kernel, spec.stride};
        case LayerKind::GlobalAvgPool:
            return GlobalAvgPoolLayer{};
        case LayerKind::Linear:
            break;
    }
    throw ValueError("linear layers are built as classifier heads");
}

template <typename T>
Tensor<T> forward_layer(const Layer<T>& layer, const Tensor<T>& x) {
    return std::visit(
        [&](const auto& l) -> Tensor<T> {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, MaxPoolLayer>) return max_pool2d(x, l.window, l.stride);
            else if constexpr (std::is_same_v<L, GlobalAvgPoolLayer>) return global_avg_pool2d(x);
            else return l.forward(x);
        },
        layer);
}

template <typename T>
Layer<T> clone_layer(const Layer<T>& layer) {
    return std::visit(
        [](const auto& l) -> Layer<T> {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, MaxPoolLayer> || std::is_same_v<L, GlobalAvgPoolLayer>) return l;
            else return l.clone();
        },
        layer);
}

template <typename T>
struct Block {
    BlockSpec spec;
    std::vector<Layer<T>> layers;
    /// Number of forward passes run through this block (instrumentation).
    mutable std::size_t forward_calls = 0;

    std::size_t in_channels() const { return spec.in_channels(); }
    std::size_t out_channels() const { return spec.out_channels(); }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            std::visit(
                [&](const auto& l) {
                    using L = std::decay_t<decltype(l)>;
                    if constexpr (!std::is_same_v<L, MaxPoolLayer> && !std::is_same_v<L, GlobalAvgPoolLayer>)
                        l.collect(prefix + ".l" + std::to_string(i), reg);
                },
                layers[i]);
    }

    Block clone() const {
        Block b{spec, {}, 0};
        for (const auto& l : layers) b.layers.push_back(clone_layer(l));
        return b;
    }
};

template <typename T>
Block<T> build_block(const BlockSpec& spec, std::mt19937_64& rng) {
    validate(spec);
    Block<T> b{spec, {}, 0};
    for (const auto& l : spec.layers) b.layers.push_back(build_layer<T>(l, rng));
    return b;
}

template <typename T>
Tensor<T> forward_block(const Block<T>& block, Tensor<T> x) {
    if (x.rank() != 4 || x.dim(1) != block.in_channels())
        throw ShapeError("block " + std::to_string(block.spec.block_index) + " expects " +
                         std::to_string(block.in_channels()) + " input channels, got input " +
                         to_string(x.shape()));
    ++block.forward_calls;
    for (const auto& l : block.layers) x = forward_layer(l, x);
    return x;
}

// ---------------------------------------------------------------------------
// Channel adaptation

/// 1x1 convolution mapping a student feature map's channels onto the pseudo
/// teacher's channel count. Spatial extents are preserved.
template <typename T>
struct AdaptationLayer {
    Tensor<T> kernel;  // [C_teacher, C_student, 1, 1]
    Tensor<T> bias;    // [C_teacher]

    std::size_t student_channels() const { return kernel.dim(1); }
    std::size_t teacher_channels() const { return kernel.dim(0); }

    void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
        reg.add(prefix + ".kernel", kernel);
        reg.add(prefix + ".bias", bias);
    }
    AdaptationLayer clone() const { return {kernel.clone(), bias.clone()}; }

    static AdaptationLayer make(std::size_t student_channels, std::size_t teacher_channels,
                                std::mt19937_64& rng) {
        return {he_uniform<T>({teacher_channels, student_channels, 1, 1}, student_channels, rng, 1.0),
                Tensor<T>::zeros({teacher_channels}, true)};
    }
};

template <typename T>
Tensor<T> adapt_channels(const AdaptationLayer<T>& layer, const Tensor<T>& student_map) {
    if (student_map.rank() != 4 || student_map.dim(1) != layer.student_channels())
        throw ShapeError("adaptation layer expects " + std::to_string(layer.student_channels()) +
                         " channels, got map " + to_string(student_map.shape()));
    return conv2d(student_map, layer.kernel, layer.bias, 1, 0);
}

}  // namespace ekd
