#pragma once

// Gaussian-limit model of a monitored parametric oscillator under homodyne
// detection. Units: kappa = 1 unless stated otherwise, frequencies and drive
// amplitudes in units of kappa, times in units of 1/kappa.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

#include "kpo/errors.hpp"
#include "kpo/linalg.hpp"

namespace kpo {

/// Maps a homodyne phase onto [0, pi). The model only depends on phi through
/// period-pi functions (cos^2, sin^2, sin*cos).
inline double canonical_phase(double phi) {
  constexpr double pi = std::numbers::pi;
  double r = std::fmod(phi, pi);
  if (r < 0.0) r += pi;
  if (r >= pi) r = 0.0;
  return r;
}

struct OscillatorParams {
  double omega = 1.0;
  double epsilon = 0.0;
  double kappa = 1.0;
  double eta = 1.0;
  double phi = 0.0;

  /// Validating constructor; stores phi in canonical form.
  static OscillatorParams make(double omega, double epsilon, double eta, double phi,
                               double kappa = 1.0) {
    OscillatorParams p{omega, epsilon, kappa, eta, canonical_phase(phi)};
    p.validate();
    return p;
  }

  void validate() const {
    if (!std::isfinite(omega) || !std::isfinite(epsilon) || !std::isfinite(phi)) {
      throw ConfigError("oscillator parameters must be finite");
    }
    if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
  }

  /// omega == 0 is admitted but sits outside the positive-frequency regime
  /// where the continuous transition exists.
  bool zero_frequency() const { return omega == 0.0; }

  OscillatorParams with_phi(double new_phi) const {
    OscillatorParams p = *this;
    p.phi = canonical_phase(new_phi);
    return p;
  }
  OscillatorParams with_omega(double new_omega) const {
    OscillatorParams p = *this;
    p.omega = new_omega;
    return p;
  }
  OscillatorParams with_epsilon(double new_epsilon) const {
    OscillatorParams p = *this;
    p.epsilon = new_epsilon;
    return p;
  }
  OscillatorParams with_eta(double new_eta) const {
    OscillatorParams p = *this;
    p.eta = new_eta;
    return p;
  }
};

/// Conditional quadrature means r = (X, P) and symmetric covariance sigma.
struct GaussianState {
  Vec2 r = Vec2::Zero();
  Mat2 sigma = Mat2::Identity();

  static GaussianState vacuum() { return {}; }

  bool valid() const {
    return r.allFinite() && sigma.allFinite() && std::abs(sigma(0, 1) - sigma(1, 0)) <= 1e-12 &&
           min_eigenvalue(sigma) > 0.0;
  }
};

struct PriorInterval {
  double omega_l = 0.0;
  double omega_h = 1.0;

  static PriorInterval make(double lo, double hi) {
    PriorInterval p{lo, hi};
    p.validate();
    return p;
  }
  void validate() const {
    if (!(omega_l >= 0.0 && omega_h > omega_l && std::isfinite(omega_h))) {
      throw ConfigError("prior interval requires omega_h > omega_l >= 0");
    }
  }
  double midpoint() const { return 0.5 * (omega_l + omega_h); }
  bool contains(double w) const { return w > omega_l && w < omega_h; }
};

/// A = [[-k/2, w - e], [-w - e, -k/2]].
inline Mat2 drift_matrix(const OscillatorParams& p) {
  Mat2 a;
  a << -0.5 * p.kappa, p.omega - p.epsilon, -p.omega - p.epsilon, -0.5 * p.kappa;
  return a;
}

inline Vec2 homodyne_direction(double phi) { return Vec2(std::cos(phi), std::sin(phi)); }

/// B = v v^T with v = (cos phi, sin phi).
inline Mat2 measurement_matrix(double phi) {
  const Vec2 v = homodyne_direction(phi);
  return v * v.transpose();
}

/// d A / d omega.
inline Mat2 frequency_generator() {
  Mat2 j;
  j << 0.0, 1.0, -1.0, 0.0;
  return j;
}

/// Phase boundary of the continuous transition, sqrt(omega^2 + kappa^2/4).
inline double critical_amplitude(double omega, double kappa = 1.0) {
  return std::sqrt(omega * omega + 0.25 * kappa * kappa);
}

/// Largest real part among the eigenvalues of drift_matrix(p):
/// -kappa/2 + Re sqrt(eps^2 - omega^2).
inline double stability_margin(const OscillatorParams& p) {
  const double disc = p.epsilon * p.epsilon - p.omega * p.omega;
  return -0.5 * p.kappa + (disc > 0.0 ? std::sqrt(disc) : 0.0);
}

inline bool normal_phase(const OscillatorParams& p) { return stability_margin(p) < 0.0; }

/// Right-hand side of the conditional covariance flow
/// d sigma/dt = A sigma + sigma A^T + D - eta kappa (sigma - I) B (sigma - I).
inline Mat2 covariance_rhs(const OscillatorParams& p, const Mat2& sigma) {
  const Mat2 a = drift_matrix(p);
  const Mat2 b = measurement_matrix(p.phi);
  const Mat2 s1 = sigma - Mat2::Identity();
  return a * sigma + sigma * a.transpose() + p.kappa * Mat2::Identity() - p.eta * p.kappa * s1 * b * s1;
}

/// One classical 4th-order Runge-Kutta step of the covariance flow, symmetrized.
inline Mat2 advance_covariance(const OscillatorParams& p, const Mat2& sigma, double dt) {
  const Mat2 k1 = covariance_rhs(p, sigma);
  const Mat2 k2 = covariance_rhs(p, sigma + 0.5 * dt * k1);
  const Mat2 k3 = covariance_rhs(p, sigma + 0.5 * dt * k2);
  const Mat2 k4 = covariance_rhs(p, sigma + dt * k3);
  Mat2 next = sigma + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  symmetrize(next);
  return next;
}

/// Number of steps of size dt covering duration, rounded to nearest.
inline std::size_t step_count(double duration, double dt) {
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  if (!(duration >= 0.0)) throw ConfigError("duration must be nonnegative");
  return static_cast<std::size_t>(std::llround(duration / dt));
}

struct RelaxationOptions {
  double tol = 1e-12;
  double t_max = 200.0;
  double step = 0.01;
};

/// Stationary conditional covariance, found by relaxing the covariance flow
/// from sigma = I until max |d sigma/dt| < tol * max(1, max |sigma|). Throws NumericError if the
/// parameters are outside the normal phase or relaxation does not settle by
/// t_max (usually a sign of being close to the phase boundary).
inline Mat2 steady_covariance(const OscillatorParams& p, const RelaxationOptions& opt = {}) {
  if (!normal_phase(p)) {
    std::ostringstream os;
    os << "steady_covariance: parameters outside the normal phase (omega=" << p.omega
       << ", epsilon=" << p.epsilon << ")";
    throw NumericError(os.str());
  }
  Mat2 sigma = Mat2::Identity();
  const long max_steps = static_cast<long>(std::ceil(opt.t_max / opt.step));
  for (long n = 0; n <= max_steps; ++n) {
    const Mat2 rhs = covariance_rhs(p, sigma);
    if (!rhs.allFinite()) break;
    if (rhs.cwiseAbs().maxCoeff() < opt.tol * std::max(1.0, sigma.cwiseAbs().maxCoeff())) return sigma;
    sigma = advance_covariance(p, sigma, opt.step);
  }
  std::ostringstream os;
  os << "steady_covariance: no convergence by t_max=" << opt.t_max << " (omega=" << p.omega
     << ", epsilon=" << p.epsilon << ", stability margin " << stability_margin(p) << ")";
  throw NumericError(os.str());
}

}  // namespace kpo
