#pragma once

// Post-hoc analyses: Grad-CAM heat maps, PGM export and the central-difference
// gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ekd/ensemble.hpp"
#include "ekd/losses.hpp"

namespace ekd {

struct HeatMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // row-major, in [0, 1]

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// Grad-CAM from a recorded [1,K,H,W] feature map and the scalar score computed from it.
/// Runs backward of gradient_scale * score; channel weights are the spatial means of
/// d(score)/d(map); the map is relu(sum_k w_k * map_k) scaled so its maximum is 1.
template <typename T>
HeatMap grad_cam_from(Tensor<T> feature_map, const Tensor<T>& score, T gradient_scale = T{1}) {
    if (feature_map.rank() != 4 || feature_map.dim(0) != 1)
        throw ShapeError("grad_cam: expected a [1,K,H,W] feature map, got " + to_string(feature_map.shape()));
    if (!feature_map.requires_grad()) throw ValueError("grad_cam: feature map is not part of a recorded graph");
    feature_map.zero_grad();
    backward(scale(score, gradient_scale));
    const std::size_t K = feature_map.dim(1), H = feature_map.dim(2), W = feature_map.dim(3), area = H * W;
    const auto grad = feature_map.grad();
    auto a = feature_map.data();
    HeatMap map{H, W, std::vector<double>(area, 0.0)};
    for (std::size_t k = 0; k < K; ++k) {
        double w = 0;
        for (std::size_t p = 0; p < area; ++p) w += static_cast<double>(grad[k * area + p]);
        w /= static_cast<double>(area);
        for (std::size_t p = 0; p < area; ++p) map.values[p] += w * static_cast<double>(a[k * area + p]);
    }
    double mx = 0;
    for (auto& v : map.values) {
        v = std::max(v, 0.0);
        mx = std::max(mx, v);
    }
    if (mx > 0)
        for (auto& v : map.values) v /= mx;
    return map;
}

/// Grad-CAM of `class_index` over the last block of a standalone student.
template <typename T>
HeatMap grad_cam(const StudentModel<T>& model, const Tensor<T>& input, std::size_t class_index,
                 T gradient_scale = T{1}) {
    if (class_index >= model.spec.num_classes)
        throw ValueError("grad_cam: class " + std::to_string(class_index) + " outside [0," +
                         std::to_string(model.spec.num_classes) + ")");
    if (input.rank() != 4 || input.dim(0) != 1) throw ShapeError("grad_cam: expected a single-image batch");
    const auto params = model.parameters();
    Tensor<T> last_map;
    auto logits = model.forward_features(input, last_map);
    const int cls = static_cast<int>(class_index);
    auto score = sum(gather_rows(logits, std::span<const int>(&cls, 1)));
    auto map = grad_cam_from(last_map, score, gradient_scale);
    params.zero_grad();
    return map;
}

/// 8-bit binary portable graymap (P5).
inline void write_pgm(const std::string& path, const HeatMap& map) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "P5\n" << map.width << ' ' << map.height << "\n255\n";
    for (double v : map.values)
        out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    if (!out) throw IoError("write failure on '" + path + "'");
}

struct GradCheckReport {
    std::string label;
    double max_rel_error = 0;
    std::string worst;  // "<param>[<index>]"
    std::size_t coordinates = 0;
    double tolerance = 0;
    bool passed = true;
};

/// Compares the analytic gradient of `analytic` with central differences
/// (f(p+h) - f(p-h)) / 2h of `numeric` for every coordinate of `params` (or
/// `max_per_param` seeded samples of each). Relative error uses
/// max(|a|, |n|, 1e-8) as denominator.
///
/// Two functions are needed when the loss detaches part of its graph: `numeric`
/// must then hold the detached values fixed at the base point.
template <typename T>
GradCheckReport finite_difference_check(const std::function<Tensor<T>()>& analytic,
                                        const std::function<Tensor<T>()>& f, const std::vector<NamedParam<T>>& params,
                                        double step = 1e-5, double tolerance = 1e-4, std::size_t max_per_param = 0,
                                        std::uint64_t seed = 0, std::string label = {}) {
    GradCheckReport report;
    report.label = std::move(label);
    report.tolerance = tolerance;
    for (auto p : params) p.tensor.zero_grad();
    backward(analytic());
    std::vector<std::vector<T>> grads;
    for (const auto& p : params) grads.push_back(p.tensor.grad());
    for (auto p : params) p.tensor.zero_grad();

    std::mt19937_64 rng(seed);
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto t = params[k].tensor;
        std::vector<std::size_t> coords(t.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (max_per_param && coords.size() > max_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_per_param);
        }
        for (std::size_t j : coords) {
            auto data = t.mutable_data();
            const T original = data[j];
            data[j] = original + static_cast<T>(step);
            const double up = static_cast<double>(f().item());
            data[j] = original - static_cast<T>(step);
            const double down = static_cast<double>(f().item());
            data[j] = original;
            const double numeric = (up - down) / (2.0 * step);
            const double a = static_cast<double>(grads[k][j]);
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            ++report.coordinates;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = params[k].name + "[" + std::to_string(j) + "]";
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

template <typename T>
GradCheckReport finite_difference_check(const std::function<Tensor<T>()>& f, const std::vector<NamedParam<T>>& params,
                                        double step = 1e-5, double tolerance = 1e-4, std::size_t max_per_param = 0,
                                        std::uint64_t seed = 0, std::string label = {}) {
    return finite_difference_check<T>(f, f, params, step, tolerance, max_per_param, seed, std::move(label));
}

template <typename T>
std::vector<NamedParam<T>> as_named(const ParamRegistry<T>& reg) {
    return reg.items();
}

}  // namespace ekd
