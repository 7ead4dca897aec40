#pragma once

// Six-dimensional state model used by the filter:
//   x = (X, P, sigma_x, sigma_p, sigma_xp, omega)
//   dx = F(x) dt + G(x) dw,   dy = H x dt + dw
// omega is carried in the state and estimated; the remaining controls live in
// ModelContext.

#include <cmath>

#include "kpo/core_dynamics.hpp"
#include "kpo/linalg.hpp"

namespace kpo {

using FilterVector = Vec6;

namespace idx {
inline constexpr int X = 0;
inline constexpr int P = 1;
inline constexpr int SX = 2;
inline constexpr int SP = 3;
inline constexpr int SXP = 4;
inline constexpr int W = 5;
}  // namespace idx

struct ModelContext {
  double epsilon = 0.0;
  double kappa = 1.0;
  double eta = 1.0;
  double phi = 0.0;

  static ModelContext from(const OscillatorParams& p) { return {p.epsilon, p.kappa, p.eta, p.phi}; }

  void validate() const {
    if (!std::isfinite(epsilon) || !std::isfinite(phi)) throw ConfigError("model context must be finite");
    if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
  }

  OscillatorParams with_omega(double omega) const { return {omega, epsilon, kappa, eta, canonical_phase(phi)}; }
};

inline FilterVector pack_state(const GaussianState& g, double omega) {
  FilterVector x;
  x << g.r(0), g.r(1), g.sigma(0, 0), g.sigma(1, 1), g.sigma(0, 1), omega;
  return x;
}

inline GaussianState unpack_state(const FilterVector& x) {
  GaussianState g;
  g.r << x(idx::X), x(idx::P);
  g.sigma << x(idx::SX), x(idx::SXP), x(idx::SXP), x(idx::SP);
  return g;
}

namespace detail {
struct BackactionTerms {
  double c, s, s1, s2;
};
inline BackactionTerms backaction(const FilterVector& x, double phi) {
  const double c = std::cos(phi);
  const double s = std::sin(phi);
  return {c, s, c * (x(idx::SX) - 1.0) + s * x(idx::SXP), s * (x(idx::SP) - 1.0) + c * x(idx::SXP)};
}
}  // namespace detail

inline FilterVector drift_F(const FilterVector& x, const ModelContext& ctx) {
  const auto [c, s, s1, s2] = detail::backaction(x, ctx.phi);
  const double k = ctx.kappa;
  const double ek = ctx.eta * k;
  const double wm = x(idx::W) - ctx.epsilon;
  const double wp = x(idx::W) + ctx.epsilon;
  FilterVector f;
  f(0) = -0.5 * k * x(idx::X) + wm * x(idx::P);
  f(1) = -wp * x(idx::X) - 0.5 * k * x(idx::P);
  f(2) = 2.0 * wm * x(idx::SXP) - k * (x(idx::SX) - 1.0) - ek * s1 * s1;
  f(3) = -2.0 * wp * x(idx::SXP) - k * (x(idx::SP) - 1.0) - ek * s2 * s2;
  f(4) = -wp * x(idx::SX) + wm * x(idx::SP) - k * x(idx::SXP) - ek * s1 * s2;
  f(5) = 0.0;
  return f;
}

inline FilterVector diffusion_G(const FilterVector& x, const ModelContext& ctx) {
  const auto [c, s, s1, s2] = detail::backaction(x, ctx.phi);
  const double g = std::sqrt(0.5 * ctx.eta * ctx.kappa);
  FilterVector out = FilterVector::Zero();
  out(0) = g * s1;
  out(1) = g * s2;
  return out;
}

inline Row6 observation_H(const ModelContext& ctx) {
  const double h = std::sqrt(2.0 * ctx.kappa * ctx.eta);
  Row6 row = Row6::Zero();
  row(0) = h * std::cos(ctx.phi);
  row(1) = h * std::sin(ctx.phi);
  return row;
}

/// Closed-form Jacobian of drift_F.
inline Mat6 jacobian_F(const FilterVector& x, const ModelContext& ctx) {
  const auto [c, s, s1, s2] = detail::backaction(x, ctx.phi);
  const double k = ctx.kappa;
  const double ek = ctx.eta * k;
  const double wm = x(idx::W) - ctx.epsilon;
  const double wp = x(idx::W) + ctx.epsilon;
  Mat6 j = Mat6::Zero();
  j(0, 0) = -0.5 * k;
  j(0, 1) = wm;
  j(0, 5) = x(idx::P);
  j(1, 0) = -wp;
  j(1, 1) = -0.5 * k;
  j(1, 5) = -x(idx::X);
  j(2, 2) = -k - 2.0 * ek * c * s1;
  j(2, 4) = 2.0 * wm - 2.0 * ek * s * s1;
  j(2, 5) = 2.0 * x(idx::SXP);
  j(3, 3) = -k - 2.0 * ek * s * s2;
  j(3, 4) = -2.0 * wp - 2.0 * ek * c * s2;
  j(3, 5) = -2.0 * x(idx::SXP);
  j(4, 2) = -wp - ek * c * s2;
  j(4, 3) = wm - ek * s * s1;
  j(4, 4) = -k - ek * c * s1 - ek * s * s2;
  j(4, 5) = -x(idx::SX) + x(idx::SP);
  return j;
}

}  // namespace kpo
