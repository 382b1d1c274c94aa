#pragma once

#include <Eigen/Core>

namespace ekd::detail {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
          const T* A, const T* B, T* C, bool accumulate) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    const auto m = static_cast<Eigen::Index>(M);
    const auto n = static_cast<Eigen::Index>(N);
    const auto k = static_cast<Eigen::Index>(K);
    Eigen::Map<Mat> c(C, m, n);
    // Stored shapes: A is [M,K] or [K,M]; B is [K,N] or [N,K].
    CMap a(A, trans_a ? k : m, trans_a ? m : k);
    CMap b(B, trans_b ? n : k, trans_b ? k : n);
    if (accumulate) {
        if (!trans_a && !trans_b) c.noalias() += a * b;
        else if (!trans_a && trans_b) c.noalias() += a * b.transpose();
        else if (trans_a && !trans_b) c.noalias() += a.transpose() * b;
        else c.noalias() += a.transpose() * b.transpose();
    } else {
        if (!trans_a && !trans_b) c.noalias() = a * b;
        else if (!trans_a && trans_b) c.noalias() = a * b.transpose();
        else if (trans_a && !trans_b) c.noalias() = a.transpose() * b;
        else c.noalias() = a.transpose() * b.transpose();
    }
}

}  // namespace ekd::detail
