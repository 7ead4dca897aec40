#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "kpo/errors.hpp"

namespace kpo {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Vec4 = Eigen::Vector4d;
using Mat4 = Eigen::Matrix4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Row6 = Eigen::Matrix<double, 1, 6>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

template <typename Derived>
void symmetrize(Eigen::MatrixBase<Derived>& m) {
  m = (0.5 * (m + m.transpose())).eval();
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
double min_eigenvalue(const Eigen::MatrixBase<Derived>& m) {
  using Plain = typename Derived::PlainObject;
  Plain s = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Plain> es(s, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

/// Solves M C + C M^T + Q = 0 for C by vectorization,
/// (I (x) M + M (x) I) vec(C) = -vec(Q). Throws NumericError when the
/// Kronecker sum is singular (M has eigenvalues summing to zero).
template <int N>
Eigen::Matrix<double, N, N> solve_lyapunov(const Eigen::Matrix<double, N, N>& m,
                                           const Eigen::Matrix<double, N, N>& q) {
  constexpr int kDim = N * N;
  Eigen::Matrix<double, kDim, kDim> kron = Eigen::Matrix<double, kDim, kDim>::Zero();
  const auto eye = Eigen::Matrix<double, N, N>::Identity();
  // column-major vec: vec(M C) = (I (x) M) vec(C), vec(C M^T) = (M (x) I) vec(C)
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) {
      kron.template block<N, N>(i * N, j * N) += eye(i, j) * m;
      kron.template block<N, N>(i * N, j * N) += m(i, j) * eye;
    }
  }
  Eigen::Matrix<double, kDim, 1> rhs;
  for (int j = 0; j < N; ++j) {
    for (int i = 0; i < N; ++i) rhs(j * N + i) = -q(i, j);
  }
  Eigen::FullPivLU<Eigen::Matrix<double, kDim, kDim>> lu(kron);
  if (!lu.isInvertible() || std::abs(lu.determinant()) < 1e-300) {
    throw NumericError("Lyapunov system is singular (dynamics not strictly stable)");
  }
  const Eigen::Matrix<double, kDim, 1> sol = lu.solve(rhs);
  Eigen::Matrix<double, N, N> c;
  for (int j = 0; j < N; ++j) {
    for (int i = 0; i < N; ++i) c(i, j) = sol(j * N + i);
  }
  symmetrize(c);
  return c;
}

}  // namespace kpo
