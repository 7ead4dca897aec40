#pragma once

// Iterative global sensing: run an ensemble at the current drive and phase,
// read off a frequency estimate from the fitted distribution, then move the
// drive halfway toward the critical amplitude implied by that estimate and
// re-optimize the phase.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kpo/ensemble.hpp"
#include "kpo/estimator.hpp"
#include "kpo/fisher.hpp"

namespace kpo {

/// Amplitude update rule: the midpoint, which lies strictly between its
/// arguments whenever they differ.
inline double update_amplitude(double eps_prev, double eps_target) { return 0.5 * (eps_prev + eps_target); }

struct Controls {
  double epsilon = 0.0;
  double phi = 0.0;
  /// Set when the midpoint rule would have reached the critical amplitude and
  /// epsilon was clamped below it.
  bool clamped = false;
  bool flat_phase = false;
};

inline Controls initial_controls(const PriorInterval& prior, double margin, double eta, double kappa = 1.0,
                                 const PhaseSearchOptions& search = {}) {
  prior.validate();
  if (!(margin > 0.0)) throw ConfigError("epsilon margin must be positive");
  const double eps_c = critical_amplitude(prior.omega_l, kappa);
  if (margin >= eps_c) {
    std::ostringstream os;
    os << "epsilon margin " << margin << " leaves no positive drive below eps_c(omega_l)=" << eps_c;
    throw ConfigError(os.str());
  }
  Controls c;
  c.epsilon = eps_c - margin;
  const PhaseOptimum opt = optimal_phase(prior.midpoint(), c.epsilon, eta, kappa, search);
  c.phi = opt.phi;
  c.flat_phase = opt.flat;
  return c;
}

inline Controls next_controls(double omega_est, double eps_prev, double eta, double margin, double kappa = 1.0,
                              const PhaseSearchOptions& search = {}) {
  if (!std::isfinite(omega_est)) throw NumericError("next_controls: non-finite frequency estimate");
  const double eps_c = critical_amplitude(omega_est, kappa);
  Controls c;
  c.epsilon = update_amplitude(eps_prev, eps_c);
  if (c.epsilon >= eps_c) {
    c.epsilon = std::max(0.0, eps_c - 0.5 * margin);
    c.clamped = true;
  }
  const PhaseOptimum opt = optimal_phase(omega_est, c.epsilon, eta, kappa, search);
  c.phi = opt.phi;
  c.flat_phase = opt.flat;
  return c;
}

enum class FilterInit { PriorMidpoint, CarryForward };

struct ProtocolConfig {
  PriorInterval prior{0.7, 2.3};
  double eta = 1.0;
  double kappa = 1.0;
  int n_traj = 200;
  int n_iterations = 3;
  double t_star = 300.0;
  /// Time at which the ensemble is fitted; defaults to t_star.
  std::optional<double> t_large;
  double epsilon_margin = 0.1;
  double dt = 0.02;
  /// Prior variance factor for the frequency entry of the filter covariance.
  double prior_variance = 1.0;
  double f_max = 1e5;
  RestartPolicy restart_policy = RestartPolicy::ResetToInit;
  int max_restarts = 100;
  FilterInit filter_init = FilterInit::PriorMidpoint;
  /// Spacing of the time grid on which the estimate curve is evaluated.
  double curve_spacing = 10.0;
  std::uint64_t base_seed = 1;
  int workers = 0;
  SnapshotFitOptions fit;
  PhaseSearchOptions phase_search;

  double estimation_time() const { return t_large.value_or(t_star); }

  void validate() const {
    prior.validate();
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
    if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
    if (n_traj < 10) throw ConfigError("n_traj must be at least 10 for histogram fitting");
    if (n_iterations < 0) throw ConfigError("n_iterations must be nonnegative");
    if (!(t_star > 0.0)) throw ConfigError("t_star must be positive");
    const double tl = estimation_time();
    if (!(tl > 0.0 && tl <= t_star)) throw ConfigError("t_large must lie in (0, t_star]");
    if (!(epsilon_margin > 0.0)) throw ConfigError("epsilon margin must be positive");
    if (!(dt > 0.0)) throw ConfigError("dt must be positive");
    if (!(prior_variance > 0.0)) throw ConfigError("prior variance must be positive");
    if (!(f_max > 0.0)) throw ConfigError("F_max must be positive");
    if (!(curve_spacing >= dt)) throw ConfigError("curve spacing must be at least dt");
  }

  /// Filter configuration for an iteration; carry-forward replaces the
  /// frequency guess by the previous iteration's estimate.
  EkfConfig filter_config(std::optional<double> previous_estimate) const {
    EkfConfig c = EkfConfig::from_prior(prior, prior_variance, dt, kappa);
    c.f_max = f_max;
    c.restart_policy = restart_policy;
    c.max_restarts = max_restarts;
    c.record_every = std::max(1, static_cast<int>(std::lround(curve_spacing / dt)));
    if (filter_init == FilterInit::CarryForward && previous_estimate) c.init_mean(idx::W) = *previous_estimate;
    return c;
  }

  /// Evaluation times of the estimate curve: multiples of curve_spacing up to
  /// t_large, with t_large itself always last.
  std::vector<double> curve_times() const {
    const double tl = estimation_time();
    const double spacing = dt * std::max(1.0, std::round(curve_spacing / dt));
    std::vector<double> out;
    for (int k = 1; k * spacing < tl - 0.5 * dt; ++k) out.push_back(k * spacing);
    out.push_back(tl);
    return out;
  }
};

struct IterationRecord {
  int index = 0;
  Controls controls;
  /// False when (omega_true, epsilon) lies outside the normal phase; such an
  /// iteration is not simulated and the protocol halts.
  bool normal_phase = true;
  bool failed = false;
  std::string failure;
  std::vector<double> curve_times;
  std::vector<double> curve_estimates;
  SkewNormalFit fit;  // at t_large
  double omega_est = 0.0;
  SampleSummary summary;
  std::vector<double> samples;  // ensemble at t_large, in trajectory order
  std::size_t restarts_threshold = 0;
  std::size_t restarts_nonfinite = 0;
};

struct ProtocolResult {
  std::vector<IterationRecord> iterations;
  bool halted = false;

  /// Only iterations that ran in the normal phase with a usable fit.
  std::size_t usable_iterations() const {
    std::size_t n = 0;
    for (const auto& it : iterations) {
      if (it.failed || !it.normal_phase) break;
      ++n;
    }
    return n;
  }
};

/// Stream offset isolating each iteration's noise from the others.
inline std::uint64_t iteration_stream_offset(int iteration) { return static_cast<std::uint64_t>(iteration) << 32; }

namespace detail {

inline bool fit_usable(const SkewNormalFit& fit) {
  return fit.converged && std::isfinite(fit.mode) && fit.shape.sigma > 0.0 && fit.shape.amplitude > 0.0;
}

/// Fits each snapshot of the estimate curve; the last grid point is t_large.
inline void fit_curve(IterationRecord& rec, const std::vector<EkfTrajectory>& ensemble, const ProtocolConfig& cfg) {
  rec.curve_times = cfg.curve_times();
  rec.curve_estimates.assign(rec.curve_times.size(), 0.0);
  for (std::size_t k = 0; k < rec.curve_times.size(); ++k) {
    const EnsembleSnapshot snap = snapshot(ensemble, rec.curve_times[k]);
    const bool last = k + 1 == rec.curve_times.size();
    try {
      const SkewNormalFit fit = estimate_from_snapshot(snap, cfg.fit);
      rec.curve_estimates[k] = fit.mode;
      if (last) {
        rec.fit = fit;
        rec.samples = snap.samples;
        rec.summary = summarize(snap.samples);
      }
    } catch (const std::exception& e) {
      rec.curve_estimates[k] = std::numeric_limits<double>::quiet_NaN();
      if (last) {
        rec.failed = true;
        rec.failure = e.what();
      }
    }
  }
}

}  // namespace detail

/// Runs one iteration at fixed controls. Returns the ensemble so callers can
/// serialize it.
inline std::vector<EkfTrajectory> run_iteration(IterationRecord& rec, const ProtocolConfig& cfg, double omega_true,
                                                std::optional<double> previous_estimate, std::uint64_t seed,
                                                int n_traj) {
  const OscillatorParams truth =
      OscillatorParams::make(omega_true, rec.controls.epsilon, cfg.eta, rec.controls.phi, cfg.kappa);
  if (!normal_phase(truth)) {
    rec.normal_phase = false;
    rec.failed = true;
    std::ostringstream os;
    os << "drive epsilon=" << rec.controls.epsilon << " is outside the normal phase at omega_true=" << omega_true;
    rec.failure = os.str();
    return {};
  }
  EnsembleOptions eo;
  eo.n_traj = n_traj;
  eo.duration = cfg.t_star;
  eo.base_seed = seed;
  eo.stream_offset = iteration_stream_offset(rec.index);
  eo.workers = cfg.workers;
  std::vector<EkfTrajectory> ensemble = run_ensemble(truth, cfg.filter_config(previous_estimate), eo);
  for (const auto& tr : ensemble) {
    rec.restarts_threshold += tr.count(RestartCause::Threshold);
    rec.restarts_nonfinite += tr.count(RestartCause::NonFinite);
  }
  detail::fit_curve(rec, ensemble, cfg);
  if (!rec.failed && !detail::fit_usable(rec.fit)) {
    rec.failed = true;
    rec.failure = "skew-normal fit at t_large did not converge";
  }
  if (!rec.failed) rec.omega_est = rec.fit.mode;
  return ensemble;
}

/// Optional per-iteration hook, e.g. for writing the ensemble to disk.
using IterationSink = std::function<void(const IterationRecord&, const std::vector<EkfTrajectory>&)>;

/// Runs the protocol. The result depends only on (config, omega_true); a fit
/// failure or a drive outside the normal phase halts it with partial results.
inline ProtocolResult run_protocol(const ProtocolConfig& cfg, double omega_true, const IterationSink& sink = {}) {
  cfg.validate();
  if (!std::isfinite(omega_true)) throw ConfigError("omega_true must be finite");
  ProtocolResult result;
  if (cfg.n_iterations == 0) return result;

  Controls controls = initial_controls(cfg.prior, cfg.epsilon_margin, cfg.eta, cfg.kappa, cfg.phase_search);
  std::optional<double> previous;
  for (int i = 0; i < cfg.n_iterations; ++i) {
    IterationRecord rec;
    rec.index = i;
    rec.controls = controls;
    const auto ensemble = run_iteration(rec, cfg, omega_true, previous, cfg.base_seed, cfg.n_traj);
    if (sink) sink(rec, ensemble);
    const bool stop = rec.failed;
    result.iterations.push_back(std::move(rec));
    if (stop) {
      result.halted = true;
      break;
    }
    const double est = result.iterations.back().omega_est;
    previous = est;
    if (i + 1 < cfg.n_iterations) {
      controls = next_controls(est, controls.epsilon, cfg.eta, cfg.epsilon_margin, cfg.kappa, cfg.phase_search);
    }
  }
  return result;
}

/// Seed for the r-th independent repetition of a protocol.
inline std::uint64_t repeat_seed(std::uint64_t base_seed, int repetition) {
  return base_seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(repetition);
}

inline std::vector<ProtocolResult> run_protocol_repeats(const ProtocolConfig& cfg, double omega_true, int repeats) {
  if (repeats < 0) throw ConfigError("repeat count must be nonnegative");
  std::vector<ProtocolResult> out;
  out.reserve(static_cast<std::size_t>(repeats));
  for (int r = 0; r < repeats; ++r) {
    ProtocolConfig c = cfg;
    c.base_seed = repeat_seed(cfg.base_seed, r);
    out.push_back(run_protocol(c, omega_true));
  }
  return out;
}

struct IterationStatistics {
  int index = 0;
  std::size_t runs = 0;  // runs that reached this iteration usably
  std::vector<double> times;
  EstimatorStatistics stats;
  std::vector<double> sigmas;  // fitted sigma at t_large per run
};

/// Pointwise mean, std and MSE of the estimate curves, per iteration, over
/// runs that reached that iteration in the normal phase with a usable fit.
inline std::vector<IterationStatistics> protocol_statistics(const std::vector<ProtocolResult>& runs,
                                                            double omega_true) {
  std::vector<IterationStatistics> out;
  for (int i = 0;; ++i) {
    std::vector<std::vector<double>> curves;
    IterationStatistics st;
    st.index = i;
    for (const auto& run : runs) {
      if (run.usable_iterations() <= static_cast<std::size_t>(i)) continue;
      const auto& rec = run.iterations[static_cast<std::size_t>(i)];
      if (st.times.empty()) st.times = rec.curve_times;
      curves.push_back(rec.curve_estimates);
      st.sigmas.push_back(rec.fit.shape.sigma);
    }
    if (curves.size() < 2) break;
    st.runs = curves.size();
    st.stats = estimator_statistics(curves, omega_true);
    out.push_back(std::move(st));
  }
  return out;
}

/// Bootstrap alternative to independent repetitions: runs the protocol once
/// with pool_size trajectories per iteration (the controls follow the pooled
/// fit), then for every iteration fits `resamples` ensembles of n_traj
/// trajectories drawn with replacement from the pool.
struct BootstrapResult {
  ProtocolResult pooled;
  std::vector<IterationStatistics> statistics;
};

inline BootstrapResult run_protocol_bootstrap(const ProtocolConfig& cfg, double omega_true, int pool_size,
                                              int resamples) {
  if (pool_size < cfg.n_traj) throw ConfigError("bootstrap pool must hold at least n_traj trajectories");
  if (resamples < 2) throw ConfigError("bootstrap needs at least two resamples");
  ProtocolConfig pooled_cfg = cfg;
  pooled_cfg.n_traj = pool_size;
  BootstrapResult out;
  std::vector<std::vector<std::vector<double>>> curves;  // [iteration][resample][time]
  auto sink = [&](const IterationRecord& rec, const std::vector<EkfTrajectory>& ensemble) {
    if (rec.failed) return;
    NoiseStream rng(cfg.base_seed, ~iteration_stream_offset(rec.index));
    std::vector<std::vector<double>> per_resample;
    for (int b = 0; b < resamples; ++b) {
      std::vector<EkfTrajectory> pick;
      pick.reserve(static_cast<std::size_t>(cfg.n_traj));
      for (int k = 0; k < cfg.n_traj; ++k) pick.push_back(ensemble[rng.index_below(ensemble.size())]);
      IterationRecord tmp;
      detail::fit_curve(tmp, pick, cfg);
      per_resample.push_back(tmp.curve_estimates);
    }
    curves.push_back(std::move(per_resample));
  };
  out.pooled = run_protocol(pooled_cfg, omega_true, sink);
  for (std::size_t i = 0; i < curves.size(); ++i) {
    IterationStatistics st;
    st.index = static_cast<int>(i);
    st.runs = curves[i].size();
    st.times = cfg.curve_times();
    st.stats = estimator_statistics(curves[i], omega_true);
    out.statistics.push_back(std::move(st));
  }
  return out;
}

}  // namespace kpo
