#pragma once

// Spatial operators over NCHW tensors: convolution and pooling.

#include <algorithm>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ekd/tensor.hpp"

namespace ekd {

struct Conv2dGeometry {
    std::size_t n, cin, h, w;
    std::size_t cout, kh, kw;
    std::size_t stride, padding;
    std::size_t ho, wo;

    std::size_t patch() const { return cin * kh * kw; }
    std::size_t out_area() const { return ho * wo; }
};

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t padding, const char* op) {
    const std::size_t padded = in + 2 * padding;
    if (stride < 1) throw ValueError(std::string(op) + ": stride must be >= 1");
    if (k == 0 || k > padded)
        throw ShapeError(std::string(op) + ": window " + std::to_string(k) +
                         " does not fit padded extent " + std::to_string(padded));
    return (padded - k) / stride + 1;
}

/// Writes the [patch, area] column block of one image into `col`, whose rows are `ld` apart.
/// `scratch` holds at least cin*(h+2p)*(w+2p) values when padding is non-zero.
template <typename T>
void im2col(const T* img, const Conv2dGeometry& g, T* col, std::size_t ld, T* scratch) {
    const std::size_t hp = g.h + 2 * g.padding, wp = g.w + 2 * g.padding;
    const T* src = img;
    if (g.padding) {
        std::fill(scratch, scratch + g.cin * hp * wp, T{0});
        for (std::size_t c = 0; c < g.cin; ++c)
            for (std::size_t y = 0; y < g.h; ++y)
                std::copy_n(img + (c * g.h + y) * g.w, g.w, scratch + (c * hp + y + g.padding) * wp + g.padding);
        src = scratch;
    }
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* dst = col + ((c * g.kh + ky) * g.kw + kx) * ld;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const T* row = src + (c * hp + oy * g.stride + ky) * wp + kx;
                    T* out = dst + oy * g.wo;
                    if (g.stride == 1) {
                        for (std::size_t ox = 0; ox < g.wo; ++ox) out[ox] = row[ox];
                    } else {
                        for (std::size_t ox = 0; ox < g.wo; ++ox) out[ox] = row[ox * g.stride];
                    }
                }
            }
}

/// Adds a [patch, area] column block (rows `ld` apart) back onto one image gradient.
template <typename T>
void col2im_add(const T* col, const Conv2dGeometry& g, T* img, std::size_t ld, T* scratch) {
    const std::size_t hp = g.h + 2 * g.padding, wp = g.w + 2 * g.padding;
    T* dst = img;
    if (g.padding) {
        std::fill(scratch, scratch + g.cin * hp * wp, T{0});
        dst = scratch;
    }
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* src = col + ((c * g.kh + ky) * g.kw + kx) * ld;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    T* row = dst + (c * hp + oy * g.stride + ky) * wp + kx;
                    const T* in = src + oy * g.wo;
                    if (g.stride == 1) {
                        for (std::size_t ox = 0; ox < g.wo; ++ox) row[ox] += in[ox];
                    } else {
                        for (std::size_t ox = 0; ox < g.wo; ++ox) row[ox * g.stride] += in[ox];
                    }
                }
            }
    if (g.padding)
        for (std::size_t c = 0; c < g.cin; ++c)
            for (std::size_t y = 0; y < g.h; ++y) {
                const T* row = scratch + (c * hp + y + g.padding) * wp + g.padding;
                T* out = img + (c * g.h + y) * g.w;
                for (std::size_t x = 0; x < g.w; ++x) out[x] += row[x];
            }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. input [N,Cin,H,W], kernel [Cout,Cin,kh,kw],
/// bias [Cout] -> [N,Cout,H',W'] with H' = (H + 2p - kh) / stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
    if (input.rank() != 4 || kernel.rank() != 4)
        throw ShapeError("conv2d: expected 4-d input and kernel, got " + to_string(input.shape()) +
                         " and " + to_string(kernel.shape()));
    if (kernel.dim(1) != input.dim(1))
        throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " expects " +
                         std::to_string(kernel.dim(1)) + " input channels, input " +
                         to_string(input.shape()) + " has " + std::to_string(input.dim(1)));
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
        throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match kernel " +
                         to_string(kernel.shape()));
    Conv2dGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                     kernel.dim(0), kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
    g.ho = detail::conv_out_extent(g.h, g.kh, stride, padding, "conv2d");
    g.wo = detail::conv_out_extent(g.w, g.kw, stride, padding, "conv2d");

    // Samples are processed in chunks whose [patch, chunk*area] column matrix
    // stays cache-sized; each chunk is one GEMM. Backward rebuilds the columns.
    const std::size_t patch = g.patch(), area = g.out_area();
    const std::size_t in_stride = g.cin * g.h * g.w, out_stride = g.cout * area;
    const std::size_t chunk = std::clamp<std::size_t>((std::size_t{1} << 17) / (patch * area), 1, g.n);
    // Scratch buffers are fully overwritten, so they skip zero-initialization.
    const std::size_t padded = g.padding ? g.cin * (g.h + 2 * padding) * (g.w + 2 * padding) : 0;
    std::unique_ptr<T[]> cols(new T[patch * chunk * area]);
    std::unique_ptr<T[]> scratch(new T[padded]);
    std::unique_ptr<T[]> y(new T[g.cout * chunk * area]);
    std::vector<T> out(g.n * out_stride);
    auto in = input.data();
    auto b = bias.data();
    for (std::size_t s0 = 0; s0 < g.n; s0 += chunk) {
        const std::size_t c = std::min(chunk, g.n - s0), ld = c * area;
        for (std::size_t s = 0; s < c; ++s)
            detail::im2col(in.data() + (s0 + s) * in_stride, g, cols.get() + s * area, ld, scratch.get());
        detail::gemm<T>(false, false, g.cout, ld, patch, kernel.data().data(), cols.get(), y.get(), false);
        for (std::size_t s = 0; s < c; ++s)
            for (std::size_t co = 0; co < g.cout; ++co) {
                const T* src = y.get() + co * ld + s * area;
                T* dst = out.data() + (s0 + s) * out_stride + co * area;
                for (std::size_t p = 0; p < area; ++p) dst[p] = src[p] + b[co];
            }
    }

    return detail::make_result<T>(Shape{g.n, g.cout, g.ho, g.wo}, std::move(out), OpKind::Conv2d,
                                  {input, kernel, bias},
        [g, chunk, input, kernel](std::span<const T> grad, GradSink<T>& sink) {
            const std::size_t patch = g.patch(), area = g.out_area();
            const std::size_t in_stride = g.cin * g.h * g.w, out_stride = g.cout * area;
            auto* gi = sink.grad_for(0);
            auto* gk = sink.grad_for(1);
            auto* gb = sink.grad_for(2);
            auto in = input.data();
            std::unique_ptr<T[]> cols(new T[patch * chunk * area]);
            std::unique_ptr<T[]> scratch(new T[g.padding ? g.cin * (g.h + 2 * g.padding) * (g.w + 2 * g.padding) : 0]);
            std::unique_ptr<T[]> gy(new T[g.cout * chunk * area]);
            std::unique_ptr<T[]> dcol(gi ? new T[patch * chunk * area] : nullptr);
            for (std::size_t s0 = 0; s0 < g.n; s0 += chunk) {
                const std::size_t c = std::min(chunk, g.n - s0), ld = c * area;
                for (std::size_t s = 0; s < c; ++s)
                    for (std::size_t co = 0; co < g.cout; ++co)
                        std::copy_n(grad.data() + (s0 + s) * out_stride + co * area, area, gy.get() + co * ld + s * area);
                if (gk) {
                    for (std::size_t s = 0; s < c; ++s)
                        detail::im2col(in.data() + (s0 + s) * in_stride, g, cols.get() + s * area, ld, scratch.get());
                    detail::gemm<T>(false, true, g.cout, patch, ld, gy.get(), cols.get(), gk->data(), true);
                }
                if (gb)
                    for (std::size_t co = 0; co < g.cout; ++co) {
                        T acc{0};
                        for (std::size_t p = 0; p < ld; ++p) acc += gy[co * ld + p];
                        (*gb)[co] += acc;
                    }
                if (gi) {
                    detail::gemm<T>(true, false, patch, ld, g.cout, kernel.data().data(), gy.get(), dcol.get(), false);
                    for (std::size_t s = 0; s < c; ++s)
                        detail::col2im_add(dcol.get() + s * area, g, gi->data() + (s0 + s) * in_stride, ld, scratch.get());
                }
            }
        });
}

/// Max pooling; ties resolve to the first maximum in row-major window order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t window, std::size_t stride) {
    if (input.rank() != 4) throw ShapeError("max_pool2d: expected 4-d input, got " + to_string(input.shape()));
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t Ho = detail::conv_out_extent(H, window, stride, 0, "max_pool2d");
    const std::size_t Wo = detail::conv_out_extent(W, window, stride, 0, "max_pool2d");
    auto in = input.data();
    std::vector<T> out(N * C * Ho * Wo);
    std::vector<std::size_t> arg(out.size());
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* plane = in.data() + nc * H * W;
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                std::size_t best = (oy * stride) * W + ox * stride;
                for (std::size_t ky = 0; ky < window; ++ky)
                    for (std::size_t kx = 0; kx < window; ++kx) {
                        const std::size_t idx = (oy * stride + ky) * W + ox * stride + kx;
                        if (plane[idx] > plane[best]) best = idx;
                    }
                const std::size_t o = (nc * Ho + oy) * Wo + ox;
                out[o] = plane[best];
                arg[o] = nc * H * W + best;
            }
    }
    return detail::make_result<T>(Shape{N, C, Ho, Wo}, std::move(out), OpKind::MaxPool2d, {input},
        [arg = std::move(arg)](std::span<const T> g, GradSink<T>& s) {
            if (auto* gi = s.grad_for(0))
                for (std::size_t o = 0; o < g.size(); ++o) (*gi)[arg[o]] += g[o];
        });
}

/// Mean over each H x W plane, giving [N,C,1,1].
template <typename T>
Tensor<T> global_avg_pool2d(const Tensor<T>& input) {
    if (input.rank() != 4)
        throw ShapeError("global_avg_pool2d: expected 4-d input, got " + to_string(input.shape()));
    const std::size_t N = input.dim(0), C = input.dim(1), area = input.dim(2) * input.dim(3);
    if (area == 0) throw ShapeError("global_avg_pool2d: empty spatial extent");
    auto in = input.data();
    std::vector<T> out(N * C);
    const T count = static_cast<T>(area);
    const T inv = T{1} / count;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        T acc{0};
        for (std::size_t p = 0; p < area; ++p) acc += in[nc * area + p];
        out[nc] = acc / count;
    }
    return detail::make_result<T>(Shape{N, C, 1, 1}, std::move(out), OpKind::GlobalAvgPool2d, {input},
        [area, inv](std::span<const T> g, GradSink<T>& s) {
            if (auto* gi = s.grad_for(0))
                for (std::size_t nc = 0; nc < g.size(); ++nc)
                    for (std::size_t p = 0; p < area; ++p) (*gi)[nc * area + p] += g[nc] * inv;
        });
}

}  // namespace ekd
