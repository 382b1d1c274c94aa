#pragma once

// Central-difference gradient checks of every layer type and of the full
// combined ensemble loss, in double precision.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ekd/analysis.hpp"
#include "ekd/config.hpp"
#include "ekd/ensemble.hpp"
#include "ekd/losses.hpp"

namespace ekd {

struct OracleOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 11;
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad, double lo = -1.0,
                                    double hi = 1.0) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = uniform(rng, lo, hi);
    return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

/// Overwrites every parameter with U(lo, hi) so zero-initialized kernels and
/// biases cannot hide a term.
inline void randomize(const ParamRegistry<double>& params, std::mt19937_64& rng, double lo = -0.5, double hi = 0.5) {
    for (auto p : params.items())
        for (auto& v : p.tensor.mutable_data()) v = uniform(rng, lo, hi);
}

}  // namespace detail

/// Tiny S=3 ensemble for the full-loss check (under 2k parameters).
inline ArchitectureSpec oracle_architecture() {
    RunConfig c;
    c.input_shape = {1, 8, 8};
    c.block_text = {"conv:3:3:1 maxpool:2:2", "res:4:3:1", "res:4:3:2", "res:5:3:2"};
    return architecture(c, 3);
}

/// Full combined loss of an ensemble, with the analytic side run through the
/// production path and the numeric side holding the detached pseudo-teacher
/// maps (and, unless teacher gradients are enabled, the teacher logits) fixed.
inline GradCheckReport check_combined_loss(EnsembleModel<double>& model, const Tensor<double>& input,
                                           const std::vector<int>& labels, const LossWeights& w,
                                           const OracleOptions& o, const std::string& label) {
    EnsembleOutput<double> frozen;
    {
        NoGradGuard no_grad;
        frozen = forward_ensemble(model, input);
    }
    auto analytic = [&] {
        auto out = forward_ensemble(model, input);
        return compute_losses(model, out, labels, w).combined;
    };
    auto numeric = [&] {
        auto out = forward_ensemble(model, input);
        out.taps[0] = frozen.taps[0];
        if (!w.kd_teacher_grad) out.teacher_logits = frozen.teacher_logits;
        return compute_losses(model, out, labels, w).combined;
    };
    return finite_difference_check<double>(analytic, numeric, model.parameters().items(), o.step, o.tolerance, 0,
                                           o.seed, label);
}

/// The oracle suite: one report per layer type, per loss term, and for the full
/// combined loss of a small ensemble (mean-teacher, weighted-teacher and
/// teacher-gradient variants).
inline std::vector<GradCheckReport> run_gradient_oracle(const OracleOptions& o = {}) {
    using TD = Tensor<double>;
    std::mt19937_64 rng(o.seed);
    std::vector<GradCheckReport> reports;
    auto check = [&](const std::string& label, const std::function<TD()>& f, std::vector<NamedParam<double>> params) {
        reports.push_back(finite_difference_check<double>(f, params, o.step, o.tolerance, 0, o.seed, label));
    };
    // A random linear functional of a layer output exercises every output coordinate.
    auto probe = [&](const TD& out, const TD& weights) { return sum(mul(out, weights)); };

    {
        auto layer = Conv2dLayer<double>::make(2, 3, 3, 1, true, rng);
        auto x = detail::random_tensor({2, 2, 5, 5}, rng, true);
        auto w = detail::random_tensor({2, 3, 5, 5}, rng, false);
        check("conv layer", [&] { return probe(layer.forward(x), w); },
              {{"input", x}, {"kernel", layer.kernel}, {"bias", layer.bias}});
    }
    {
        auto layer = Conv2dLayer<double>::make(2, 3, 3, 2, false, rng);
        auto x = detail::random_tensor({2, 2, 6, 6}, rng, true);
        auto w = detail::random_tensor({2, 3, 3, 3}, rng, false);
        check("strided conv layer", [&] { return probe(layer.forward(x), w); },
              {{"input", x}, {"kernel", layer.kernel}, {"bias", layer.bias}});
    }
    {
        LayerSpec spec{LayerKind::Residual, 2, 3, 3, 2, 2};
        auto layer = std::get<ResidualLayer<double>>(build_layer<double>(spec, rng));
        ParamRegistry<double> reg;
        layer.collect("res", reg);
        detail::randomize(reg, rng);
        auto x = detail::random_tensor({2, 2, 6, 6}, rng, true);
        auto w = detail::random_tensor({2, 3, 3, 3}, rng, false);
        auto params = reg.items();
        params.push_back({"input", x});
        check("residual layer", [&] { return probe(layer.forward(x), w); }, params);
    }
    {
        auto x = detail::random_tensor({2, 2, 6, 6}, rng, true);
        auto w = detail::random_tensor({2, 2, 3, 3}, rng, false);
        check("max pool", [&] { return probe(max_pool2d(x, 2, 2), w); }, {{"input", x}});
    }
    {
        auto x = detail::random_tensor({2, 3, 4, 4}, rng, true);
        auto w = detail::random_tensor({2, 3, 1, 1}, rng, false);
        check("global average pool", [&] { return probe(global_avg_pool2d(x), w); }, {{"input", x}});
    }
    {
        auto layer = LinearLayer<double>::make(3, 4, rng);
        auto x = detail::random_tensor({2, 3, 2, 2}, rng, true);
        auto w = detail::random_tensor({2, 4}, rng, false);
        check("linear classifier", [&] { return probe(layer.forward(x), w); },
              {{"input", x}, {"weight", layer.weight}, {"bias", layer.bias}});
    }
    {
        auto layer = AdaptationLayer<double>::make(2, 5, rng);
        auto x = detail::random_tensor({2, 2, 3, 3}, rng, true);
        auto w = detail::random_tensor({2, 5, 3, 3}, rng, false);
        check("adaptation layer", [&] { return probe(adapt_channels(layer, x), w); },
              {{"input", x}, {"kernel", layer.kernel}, {"bias", layer.bias}});
    }
    {
        auto a = detail::random_tensor({3, 4}, rng, true, -2, 2);
        auto b = detail::random_tensor({3, 4}, rng, true, -2, 2);
        const std::vector<int> labels{0, 3, 1};
        check("cross entropy", [&] { return cross_entropy(a, labels); }, {{"logits", a}});
        check("mse", [&] { return mse(a, b); }, {{"prediction", a}, {"target", b}});
        check("kd with teacher gradient", [&] { return kd_loss<double>({a}, b, 2.0, true); },
              {{"student", a}, {"teacher", b}});
    }

    const auto spec = oracle_architecture();
    auto input = detail::random_tensor({3, 1, 8, 8}, rng, false);
    const std::vector<int> labels{0, 2, 1};
    {
        auto model = build_ensemble<double>(spec, 3, o.seed);
        detail::randomize(model.parameters(), rng);
        reports.push_back(check_combined_loss(model, input, labels, LossWeights{}, o, "combined loss"));
        LossWeights w;
        w.kd_teacher_grad = true;
        w.kd_t2_scale = true;
        reports.push_back(check_combined_loss(model, input, labels, w, o, "combined loss, teacher gradient"));
    }
    {
        auto model = build_ensemble<double>(spec, 3, o.seed, {0.5, 0.3, 0.2});
        detail::randomize(model.parameters(), rng);
        reports.push_back(check_combined_loss(model, input, labels, LossWeights{}, o, "combined loss, weighted teacher"));
    }
    return reports;
}

}  // namespace ekd
