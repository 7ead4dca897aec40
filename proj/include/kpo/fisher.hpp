#pragma once

// Classical Fisher information about omega carried by the homodyne record.
//
// With the record held fixed, the frequency sensitivity s = d r / d omega obeys
//   ds = [J r + (A - eta kappa (sigma - I) B) s] dt + sqrt(eta kappa / 2) (d sigma/d omega) v dw,
// where dw is the innovation. The information accumulates as
//   F(t) = 2 eta kappa int_0^t E[s^T B s] dtau,
// and grows linearly at long times with rate k_F. Two routes are provided:
// a stationary Lyapunov solve on the joint linear SDE for (r, s), and a Monte
// Carlo estimate that integrates the SDE directly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <vector>

#include "kpo/core_dynamics.hpp"
#include "kpo/errors.hpp"
#include "kpo/golden.hpp"
#include "kpo/io.hpp"
#include "kpo/linalg.hpp"
#include "kpo/noise.hpp"
#include "kpo/parallel.hpp"

namespace kpo {

inline RelaxationOptions fisher_relaxation() {
  RelaxationOptions opt;
  opt.t_max = 5000.0;
  return opt;
}

/// d/dt (d sigma / d omega).
inline Mat2 sensitivity_rhs(const OscillatorParams& p, const Mat2& sigma, const Mat2& dsigma) {
  const Mat2 a = drift_matrix(p);
  const Mat2 j = frequency_generator();
  const Mat2 b = measurement_matrix(p.phi);
  const Mat2 s1 = sigma - Mat2::Identity();
  return j * sigma + sigma * j.transpose() + a * dsigma + dsigma * a.transpose() -
         p.eta * p.kappa * (dsigma * b * s1 + s1 * b * dsigma);
}

/// Stationary d sigma_ss / d omega, by relaxation of the linear sensitivity flow
/// with sigma frozen at its stationary value.
inline Mat2 sensitivity_steady(const OscillatorParams& p, const RelaxationOptions& opt = fisher_relaxation()) {
  const Mat2 sigma = steady_covariance(p, opt);
  Mat2 ds = Mat2::Zero();
  const long max_steps = static_cast<long>(std::ceil(opt.t_max / opt.step));
  const double h = opt.step;
  for (long n = 0; n <= max_steps; ++n) {
    const Mat2 k1 = sensitivity_rhs(p, sigma, ds);
    if (!k1.allFinite()) break;
    if (k1.cwiseAbs().maxCoeff() < opt.tol * std::max(1.0, ds.cwiseAbs().maxCoeff())) return ds;
    const Mat2 k2 = sensitivity_rhs(p, sigma, ds + 0.5 * h * k1);
    const Mat2 k3 = sensitivity_rhs(p, sigma, ds + 0.5 * h * k2);
    const Mat2 k4 = sensitivity_rhs(p, sigma, ds + h * k3);
    ds += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    symmetrize(ds);
  }
  std::ostringstream os;
  os << "sensitivity_steady: no convergence (omega=" << p.omega << ", epsilon=" << p.epsilon << ")";
  throw NumericError(os.str());
}

/// Joint stationary problem for (r, s): drift M, noise column N.
struct JointSensitivityModel {
  Mat4 drift;
  Vec4 noise;
  Mat2 sigma_ss;
  Mat2 dsigma_ss;
};

inline JointSensitivityModel joint_sensitivity_model(const OscillatorParams& p,
                                                     const RelaxationOptions& opt = fisher_relaxation()) {
  JointSensitivityModel m;
  m.sigma_ss = steady_covariance(p, opt);
  m.dsigma_ss = sensitivity_steady(p, opt);
  const Mat2 a = drift_matrix(p);
  const Mat2 b = measurement_matrix(p.phi);
  const Vec2 v = homodyne_direction(p.phi);
  const Mat2 s1 = m.sigma_ss - Mat2::Identity();
  const double ek = p.eta * p.kappa;
  m.drift.setZero();
  m.drift.block<2, 2>(0, 0) = a;
  m.drift.block<2, 2>(2, 0) = frequency_generator();
  m.drift.block<2, 2>(2, 2) = a - ek * s1 * b;
  const double g = std::sqrt(0.5 * ek);
  m.noise.head<2>() = g * s1 * v;
  m.noise.tail<2>() = g * m.dsigma_ss * v;
  return m;
}

/// Long-time growth rate k_F of the Fisher information (stationary Lyapunov route).
inline double growth_rate_kf(const OscillatorParams& p, const RelaxationOptions& opt = fisher_relaxation()) {
  p.validate();
  if (!normal_phase(p)) throw NumericError("growth_rate_kf: parameters outside the normal phase");
  if (p.eta == 0.0) return 0.0;
  const JointSensitivityModel m = joint_sensitivity_model(p, opt);
  const Mat4 c = solve_lyapunov<4>(m.drift, m.noise * m.noise.transpose());
  const Vec2 v = homodyne_direction(p.phi);
  return std::max(0.0, 2.0 * p.eta * p.kappa * v.dot(c.block<2, 2>(2, 2) * v));
}

struct McEstimate {
  double estimate = 0.0;
  double std_err = 0.0;
};

struct SensitivityMcOptions {
  double dt = 0.01;
  int workers = 0;  // 0: hardware concurrency
};

namespace detail {

/// Deterministic flow of (sigma, d sigma / d omega) from (I, 0), sampled at
/// every step of size dt.
struct CovarianceFlow {
  std::vector<Mat2> sigma;
  std::vector<Mat2> dsigma;
};

inline CovarianceFlow covariance_flow(const OscillatorParams& p, double dt, std::size_t steps) {
  CovarianceFlow f;
  f.sigma.reserve(steps + 1);
  f.dsigma.reserve(steps + 1);
  Mat2 s = Mat2::Identity();
  Mat2 ds = Mat2::Zero();
  f.sigma.push_back(s);
  f.dsigma.push_back(ds);
  for (std::size_t n = 0; n < steps; ++n) {
    const Mat2 k1 = covariance_rhs(p, s);
    const Mat2 l1 = sensitivity_rhs(p, s, ds);
    const Mat2 k2 = covariance_rhs(p, s + 0.5 * dt * k1);
    const Mat2 l2 = sensitivity_rhs(p, s + 0.5 * dt * k1, ds + 0.5 * dt * l1);
    const Mat2 k3 = covariance_rhs(p, s + 0.5 * dt * k2);
    const Mat2 l3 = sensitivity_rhs(p, s + 0.5 * dt * k2, ds + 0.5 * dt * l2);
    const Mat2 k4 = covariance_rhs(p, s + dt * k3);
    const Mat2 l4 = sensitivity_rhs(p, s + dt * k3, ds + dt * l3);
    s += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    ds += (dt / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
    symmetrize(s);
    symmetrize(ds);
    f.sigma.push_back(s);
    f.dsigma.push_back(ds);
  }
  return f;
}

/// Integrates (r, s) along one noise realization and calls sink(n, integrand)
/// after each step n = 1..steps with integrand = (v . s)^2 at the new state.
template <typename Sink>
void integrate_sensitivity(const OscillatorParams& p, const CovarianceFlow& flow, double dt, NoiseStream& noise,
                           Sink&& sink) {
  const Mat2 a = drift_matrix(p);
  const Mat2 j = frequency_generator();
  const Mat2 b = measurement_matrix(p.phi);
  const Vec2 v = homodyne_direction(p.phi);
  const double ek = p.eta * p.kappa;
  const double g = std::sqrt(0.5 * ek);
  Vec2 r = Vec2::Zero();
  Vec2 s = Vec2::Zero();
  const std::size_t steps = flow.sigma.size() - 1;
  for (std::size_t n = 0; n < steps; ++n) {
    const Mat2 s1 = flow.sigma[n] - Mat2::Identity();
    const double dw = noise.increment(dt);
    const Vec2 r_next = r + a * r * dt + g * s1 * v * dw;
    const Vec2 s_next = s + (j * r + (a - ek * s1 * b) * s) * dt + g * flow.dsigma[n] * v * dw;
    r = r_next;
    s = s_next;
    const double proj = v.dot(s);
    sink(n + 1, proj * proj);
  }
}

}  // namespace detail

/// Monte Carlo k_F: per trajectory, the time average of 2 eta kappa (v.s)^2
/// over the second half of [0, duration]; mean and standard error across
/// trajectories. Trajectory i uses NoiseStream(base_seed, i).
inline McEstimate growth_rate_kf_mc(const OscillatorParams& p, int n_traj, double duration, std::uint64_t base_seed,
                                    const SensitivityMcOptions& opt = {}) {
  p.validate();
  if (n_traj < 2) throw ConfigError("growth_rate_kf_mc needs at least 2 trajectories");
  if (p.eta == 0.0) return {0.0, 0.0};
  const std::size_t steps = step_count(duration, opt.dt);
  const std::size_t tail_start = steps / 2;
  const auto flow = detail::covariance_flow(p, opt.dt, steps);
  const double scale = 2.0 * p.eta * p.kappa;

  std::vector<double> per_traj(static_cast<std::size_t>(n_traj));
  parallel_for(static_cast<std::size_t>(n_traj), opt.workers, [&](std::size_t i) {
    NoiseStream noise(base_seed, i);
    double acc = 0.0;
    std::size_t count = 0;
    detail::integrate_sensitivity(p, flow, opt.dt, noise, [&](std::size_t n, double val) {
      if (n > tail_start) {
        acc += val;
        ++count;
      }
    });
    per_traj[i] = scale * acc / static_cast<double>(std::max<std::size_t>(count, 1));
  });

  double mean = 0.0;
  for (double x : per_traj) mean += x;
  mean /= n_traj;
  double var = 0.0;
  for (double x : per_traj) var += (x - mean) * (x - mean);
  var /= (n_traj - 1);
  return {mean, std::sqrt(var / n_traj)};
}

struct CfiCurve {
  std::vector<double> times;
  std::vector<double> values;
  std::vector<double> std_err;
};

/// Ensemble estimate of F(t) on an increasing time grid within [0, T].
inline CfiCurve cfi_time(const OscillatorParams& p, const std::vector<double>& t_grid, int n_traj,
                         std::uint64_t base_seed, const SensitivityMcOptions& opt = {}) {
  p.validate();
  if (t_grid.empty()) return {};
  if (!std::is_sorted(t_grid.begin(), t_grid.end()) || t_grid.front() < 0.0) {
    throw ConfigError("cfi_time grid must be nondecreasing and nonnegative");
  }
  if (n_traj < 2) throw ConfigError("cfi_time needs at least 2 trajectories");
  const std::size_t steps = step_count(t_grid.back(), opt.dt);
  std::vector<std::size_t> grid_steps;
  grid_steps.reserve(t_grid.size());
  for (double t : t_grid) grid_steps.push_back(std::min(steps, step_count(t, opt.dt)));

  CfiCurve curve;
  curve.times = t_grid;
  curve.values.assign(t_grid.size(), 0.0);
  curve.std_err.assign(t_grid.size(), 0.0);
  if (p.eta == 0.0) return curve;

  const auto flow = detail::covariance_flow(p, opt.dt, steps);
  const double scale = 2.0 * p.eta * p.kappa * opt.dt;
  std::vector<std::vector<double>> per_traj(static_cast<std::size_t>(n_traj), std::vector<double>(t_grid.size()));
  parallel_for(static_cast<std::size_t>(n_traj), opt.workers, [&](std::size_t i) {
    NoiseStream noise(base_seed, i);
    std::vector<double>& out = per_traj[i];
    std::size_t g = 0;
    double acc = 0.0;
    while (g < grid_steps.size() && grid_steps[g] == 0) out[g++] = 0.0;
    // left-point rule: the step ending at n contributes the integrand at n-1
    double prev = 0.0;
    detail::integrate_sensitivity(p, flow, opt.dt, noise, [&](std::size_t n, double val) {
      acc += scale * prev;
      prev = val;
      while (g < grid_steps.size() && grid_steps[g] == n) out[g++] = acc;
    });
  });

  const double nt = static_cast<double>(n_traj);
  for (std::size_t g = 0; g < t_grid.size(); ++g) {
    double mean = 0.0;
    for (const auto& tr : per_traj) mean += tr[g];
    mean /= nt;
    double var = 0.0;
    for (const auto& tr : per_traj) var += (tr[g] - mean) * (tr[g] - mean);
    var /= (nt - 1.0);
    curve.values[g] = mean;
    curve.std_err[g] = std::sqrt(var / nt);
  }
  return curve;
}

struct KfScan {
  std::vector<double> phases;
  std::vector<double> rates;
  double argmax_phase = 0.0;
};

/// k_F on a uniform grid of n_points phases covering [0, pi).
inline KfScan scan_growth_rate(const OscillatorParams& p, int n_points) {
  if (n_points < 1) throw ConfigError("scan needs at least one phase");
  KfScan scan;
  scan.phases.reserve(n_points);
  scan.rates.reserve(n_points);
  double best = -1.0;
  for (int i = 0; i < n_points; ++i) {
    const double phi = std::numbers::pi * i / n_points;
    const double k = growth_rate_kf(p.with_phi(phi));
    scan.phases.push_back(phi);
    scan.rates.push_back(k);
    if (k > best) {
      best = k;
      scan.argmax_phase = phi;
    }
  }
  return scan;
}

struct PhaseOptimum {
  double phi = 0.0;
  double k_f = 0.0;
  bool flat = false;
};

struct PhaseSearchOptions {
  int grid_points = 256;
  double tol = 1e-4;
  /// Start of the coarse scan window; any shift by a multiple of pi gives the
  /// same canonical answer.
  double window_start = 0.0;
};

/// argmax over phi of k_F: coarse scan, then golden-section refinement around
/// the best grid point. The result is the canonical representative in [0, pi).
inline PhaseOptimum optimal_phase(double omega, double epsilon, double eta, double kappa = 1.0,
                                  const PhaseSearchOptions& opt = {}) {
  const OscillatorParams base = OscillatorParams::make(omega, epsilon, eta, 0.0, kappa);
  if (!normal_phase(base)) throw NumericError("optimal_phase: drive at or beyond the critical amplitude");
  const double step = std::numbers::pi / opt.grid_points;
  double best = -1.0;
  double lo = std::numeric_limits<double>::max();
  double best_phi = 0.0;
  for (int i = 0; i < opt.grid_points; ++i) {
    const double phi = opt.window_start + step * i;
    const double k = growth_rate_kf(base.with_phi(phi));
    lo = std::min(lo, k);
    if (k > best) {
      best = k;
      best_phi = phi;
    }
  }
  if (best - lo < 1e-12) return {0.0, best, true};
  // with_phi canonicalizes, so the bracket may straddle the period boundary
  auto kf = [&](double phi) { return growth_rate_kf(base.with_phi(phi)); };
  const GoldenResult g = golden_section_maximize(kf, best_phi - step, best_phi + step, opt.tol);
  if (g.value >= best) return {canonical_phase(g.x), g.value, false};
  return {canonical_phase(best_phi), best, false};
}

inline void write_kf_scan_csv(std::ostream& os, const KfScan& scan, const PhaseOptimum* opt = nullptr,
                              const Provenance* prov = nullptr) {
  if (prov) prov->write(os);
  if (opt) {
    os << "# phi_opt=" << format_double(opt->phi) << " k_F_max=" << format_double(opt->k_f)
       << " flat=" << (opt->flat ? 1 : 0) << "\n";
  }
  os << "phi,k_F\n";
  for (std::size_t i = 0; i < scan.phases.size(); ++i) {
    os << format_double(scan.phases[i]) << ',' << format_double(scan.rates[i]) << '\n';
  }
}

}  // namespace kpo
