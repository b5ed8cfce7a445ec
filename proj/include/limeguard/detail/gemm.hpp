#pragma once

// Row-major GEMM over double and Dual operands. Dual products are split into
// primal and tangent double products so every case runs through Eigen's
// blocked kernel.

#include <cstddef>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "limeguard/dual.hpp"

namespace limeguard::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C[m x n] (+)= op(A) * op(B); A is m x k (or k x m when trans_a), B is k x n
// (or n x k when trans_b).
inline void gemm_d(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                   const double* a, const double* b, double* c, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap cm(c, M, N);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) run(ConstMap(a, M, K), ConstMap(b, K, N));
  if (!trans_a && trans_b) run(ConstMap(a, M, K), ConstMap(b, N, K).transpose());
  if (trans_a && !trans_b) run(ConstMap(a, K, M).transpose(), ConstMap(b, K, N));
  if (trans_a && trans_b) run(ConstMap(a, K, M).transpose(), ConstMap(b, N, K).transpose());
}

inline void split(const Dual* x, std::size_t count, std::vector<double>& v, std::vector<double>& d) {
  v.resize(count);
  d.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    v[i] = x[i].v;
    d[i] = x[i].d;
  }
}

template <class TA, class TB, class TC>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const TA* a,
          const TB* b, TC* c, bool accumulate) {
  constexpr bool a_dual = std::is_same_v<TA, Dual>;
  constexpr bool b_dual = std::is_same_v<TB, Dual>;
  constexpr bool c_dual = std::is_same_v<TC, Dual>;
  static_assert(c_dual == (a_dual || b_dual), "output scalar must match operand promotion");
  if constexpr (!c_dual) {
    gemm_d(trans_a, trans_b, m, n, k, a, b, c, accumulate);
  } else {
    std::vector<double> av, ad, bv, bd;
    const double* ap;
    const double* bp;
    if constexpr (a_dual) {
      split(a, m * k, av, ad);
      ap = av.data();
    } else {
      ap = a;
    }
    if constexpr (b_dual) {
      split(b, k * n, bv, bd);
      bp = bv.data();
    } else {
      bp = b;
    }
    std::vector<double> cv(m * n, 0.0), cd(m * n, 0.0);
    gemm_d(trans_a, trans_b, m, n, k, ap, bp, cv.data(), false);
    if constexpr (a_dual) gemm_d(trans_a, trans_b, m, n, k, ad.data(), bp, cd.data(), true);
    if constexpr (b_dual) gemm_d(trans_a, trans_b, m, n, k, ap, bd.data(), cd.data(), true);
    for (std::size_t i = 0; i < m * n; ++i) {
      if (accumulate) {
        c[i].v += cv[i];
        c[i].d += cd[i];
      } else {
        c[i] = Dual(cv[i], cd[i]);
      }
    }
  }
}

}  // namespace limeguard::detail
