#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ekd/ekd.hpp"

namespace ekd::testing {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true, double lo = -1.0,
                                    double hi = 1.0) {
    std::mt19937_64 rng(seed);
    return detail::random_tensor(std::move(shape), rng, requires_grad, lo, hi);
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
    return {t.data().begin(), t.data().end()};
}

/// Small 4-block spec on 8x8 single-channel inputs.
inline ArchitectureSpec tiny_architecture(std::size_t classes = 3) {
    RunConfig c;
    c.input_shape = {1, 8, 8};
    c.block_text = {"conv:4:3:1", "res:8:3:2", "res:8:3:1", "res:12:3:2"};
    return architecture(c, classes);
}

inline RunConfig tiny_config() {
    RunConfig c;
    c.input_shape = {1, 8, 8};
    c.block_text = {"conv:4:3:1", "res:6:3:2", "res:6:3:1", "res:8:3:2"};
    c.students = 3;
    c.synth = {3, 12, 6, 8, 8, 5};
    c.train.epochs = 3;
    c.train.batch_size = 8;
    c.train.base_lr = 0.01;
    return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("ekd_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace ekd::testing
