#pragma once

// Continuous-discrete extended Kalman filter for the six-dimensional state
// model. Each measurement bin is processed in two congruence-form steps
// (prediction, then measurement update) so that the covariance stays positive
// semidefinite. A Frobenius-norm threshold on the mean triggers a restart.

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "kpo/core_dynamics.hpp"
#include "kpo/errors.hpp"
#include "kpo/io.hpp"
#include "kpo/sde_sim.hpp"
#include "kpo/state_model.hpp"

namespace kpo {

/// Raised by predict/update when the filter produces non-finite values.
class FilterFailure : public NumericError {
 public:
  using NumericError::NumericError;
};

struct FilterState {
  FilterVector x = FilterVector::Zero();
  Mat6 sigma = Mat6::Zero();
  double t = 0.0;
};

enum class RestartPolicy { ResetToInit, ResetToLatestFrequency };

struct EkfConfig {
  double dt = 0.02;
  double f_max = 1e5;
  FilterVector init_mean = FilterVector::Zero();
  Vec6 init_cov_diag = Vec6::Zero();
  RestartPolicy restart_policy = RestartPolicy::ResetToInit;
  int max_restarts = 100;
  /// Store the omega estimate every this many steps (1 = every step).
  int record_every = 1;
  /// Store the full mean and covariance diagonal alongside omega.
  bool store_full_states = false;

  /// Vacuum moments, frequency guess at the prior midpoint, covariance
  /// diag(1e-3 x5, v kappa^2).
  static EkfConfig from_prior(const PriorInterval& prior, double v, double dt, double kappa = 1.0) {
    prior.validate();
    if (!(v > 0.0)) throw ConfigError("prior variance factor v must be positive");
    EkfConfig c;
    c.dt = dt;
    c.init_mean << 0.0, 0.0, 1.0, 1.0, 0.0, prior.midpoint();
    c.init_cov_diag << 1e-3, 1e-3, 1e-3, 1e-3, 1e-3, v * kappa * kappa;
    return c;
  }

  void validate() const {
    if (!(dt > 0.0)) throw ConfigError("filter dt must be positive");
    if (!(f_max > 0.0)) throw ConfigError("F_max must be positive");
    if ((init_cov_diag.array() < 0.0).any()) throw ConfigError("initial covariance entries must be >= 0");
    if (!init_mean.allFinite()) throw ConfigError("initial mean must be finite");
    if (max_restarts < 0) throw ConfigError("max_restarts must be >= 0");
    if (record_every < 1) throw ConfigError("record_every must be >= 1");
  }

  FilterState initial_state(double t = 0.0) const {
    FilterState s;
    s.x = init_mean;
    s.sigma = init_cov_diag.asDiagonal();
    s.t = t;
    return s;
  }
};

inline FilterState init_filter(const PriorInterval& prior, double v, const ModelContext& ctx) {
  return EkfConfig::from_prior(prior, v, 0.02, ctx.kappa).initial_state();
}

struct Prediction {
  FilterVector x_bar;
  Mat6 sigma_bar;
};

/// x_bar = x + F(x) dt;  Sigma_bar = T Sigma T^T with T = 1 + (F'(x) - G(x) H) dt.
inline Prediction predict(const FilterState& state, const ModelContext& ctx, double dt) {
  const Row6 h = observation_H(ctx);
  const Mat6 t = Mat6::Identity() + (jacobian_F(state.x, ctx) - diffusion_G(state.x, ctx) * h) * dt;
  Prediction out;
  out.x_bar = state.x + drift_F(state.x, ctx) * dt;
  out.sigma_bar.noalias() = t * state.sigma * t.transpose();
  symmetrize(out.sigma_bar);
  if (!out.x_bar.allFinite() || !out.sigma_bar.allFinite()) {
    throw FilterFailure("non-finite value in filter prediction");
  }
  return out;
}

/// Measurement update with gain K = Sigma_bar H^T + G(x_bar):
///   x = x_bar + K (dy - H x_bar dt)
///   Sigma = (1 - Sigma_bar H^T H dt) Sigma_bar (1 - ...)^T + Sigma_bar H^T H Sigma_bar dt.
inline FilterState update(const Prediction& pred, double delta_y, const ModelContext& ctx, double dt,
                          double t_next = 0.0) {
  const Row6 h = observation_H(ctx);
  const Vec6 sh = pred.sigma_bar * h.transpose();
  const FilterVector gain = sh + diffusion_G(pred.x_bar, ctx);
  FilterState out;
  out.t = t_next;
  out.x = pred.x_bar + gain * (delta_y - h.dot(pred.x_bar) * dt);
  const Mat6 l = Mat6::Identity() - sh * h * dt;
  out.sigma.noalias() = l * pred.sigma_bar * l.transpose();
  out.sigma.noalias() += sh * sh.transpose() * dt;
  symmetrize(out.sigma);
  if (!out.x.allFinite() || !out.sigma.allFinite()) {
    throw FilterFailure("non-finite value in filter update");
  }
  return out;
}

/// sqrt(X^2 + P^2 + sx^2 + sp^2 + sxp^2 + (omega/kappa)^2).
inline double frobenius_norm(const FilterVector& x, double kappa = 1.0) {
  return std::sqrt(x.head<5>().squaredNorm() + (x(idx::W) / kappa) * (x(idx::W) / kappa));
}

enum class RestartCause { Threshold, NonFinite };

struct RestartEvent {
  std::size_t step = 0;  // record index after which the restart happened
  double t = 0.0;
  RestartCause cause = RestartCause::Threshold;
};

struct EkfTrajectory {
  std::vector<double> times;
  std::vector<double> omega_estimates;
  std::vector<std::uint8_t> restart_flags;  // restart occurred within the stored interval
  std::vector<FilterVector> full_states;    // optional
  std::vector<Vec6> full_cov_diag;          // optional
  std::vector<RestartEvent> restarts;
  std::size_t record_every = 1;

  std::vector<double> restart_times() const {
    std::vector<double> out;
    out.reserve(restarts.size());
    for (const auto& r : restarts) out.push_back(r.t);
    return out;
  }
  std::size_t count(RestartCause c) const {
    std::size_t n = 0;
    for (const auto& r : restarts) n += (r.cause == c);
    return n;
  }
  double final_estimate() const { return omega_estimates.empty() ? 0.0 : omega_estimates.back(); }

  /// Estimate at the stored grid point nearest to t.
  double estimate_at(double t) const {
    if (times.empty()) throw ConfigError("empty filter trajectory");
    if (times.size() == 1) return omega_estimates.front();
    const double spacing = times[1] - times[0];
    const double pos = (t - times.front()) / spacing;
    long k = std::lround(pos);
    if (k < 0 || static_cast<std::size_t>(k) >= times.size()) {
      std::ostringstream os;
      os << "time " << t << " outside trajectory range [" << times.front() << ", " << times.back() << "]";
      throw ConfigError(os.str());
    }
    return omega_estimates[static_cast<std::size_t>(k)];
  }
};

/// Runs the filter over a photocurrent record, restarting whenever the mean's
/// Frobenius norm exceeds F_max or a step produces non-finite values.
inline EkfTrajectory run_ekf(const PhotocurrentRecord& record, const EkfConfig& config, const ModelContext& ctx) {
  config.validate();
  ctx.validate();
  if (std::abs(record.dt - config.dt) > 1e-12 * std::max(1.0, record.dt)) {
    throw ConfigError("record dt and filter dt differ");
  }
  const double dt = config.dt;
  const std::size_t n = record.size();
  const std::size_t every = static_cast<std::size_t>(config.record_every);

  EkfTrajectory out;
  out.record_every = every;
  const std::size_t stored = n / every + 1;
  out.times.reserve(stored);
  out.omega_estimates.reserve(stored);
  out.restart_flags.reserve(stored);

  FilterState state = config.initial_state();
  auto store = [&](bool restarted) {
    out.times.push_back(state.t);
    out.omega_estimates.push_back(state.x(idx::W));
    out.restart_flags.push_back(restarted ? 1 : 0);
    if (config.store_full_states) {
      out.full_states.push_back(state.x);
      out.full_cov_diag.push_back(state.sigma.diagonal());
    }
  };
  store(false);

  bool restart_pending = false;
  for (std::size_t k = 0; k < n; ++k) {
    const double t_next = static_cast<double>(k + 1) * dt;
    const double omega_before = state.x(idx::W);
    std::optional<RestartCause> cause;
    try {
      state = update(predict(state, ctx, dt), record.increments[k], ctx, dt, t_next);
      if (frobenius_norm(state.x, ctx.kappa) > config.f_max) cause = RestartCause::Threshold;
    } catch (const FilterFailure&) {
      cause = RestartCause::NonFinite;
    }
    if (cause) {
      out.restarts.push_back({k, t_next, *cause});
      if (out.restarts.size() > static_cast<std::size_t>(config.max_restarts)) {
        std::ostringstream os;
        os << "filter exceeded max_restarts=" << config.max_restarts << " at t=" << t_next;
        throw NumericError(os.str());
      }
      state = config.initial_state(t_next);
      if (config.restart_policy == RestartPolicy::ResetToLatestFrequency && std::isfinite(omega_before) &&
          std::abs(omega_before) <= config.f_max * ctx.kappa) {
        state.x(idx::W) = omega_before;
      }
      restart_pending = true;
    }
    if ((k + 1) % every == 0) {
      store(restart_pending);
      restart_pending = false;
    }
  }
  return out;
}

// --- serialization -----------------------------------------------------------

inline void write_ekf_csv(std::ostream& os, const EkfTrajectory& tr, const Provenance* prov = nullptr,
                          bool wide = false) {
  if (prov) prov->write(os);
  const bool full = wide && tr.full_states.size() == tr.times.size();
  os << "step,t,omega_est,restart_flag";
  if (full) {
    os << ",X,P,sigma_x,sigma_p,sigma_xp,omega,S11,S22,S33,S44,S55,S66";
  }
  os << '\n';
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    os << k * tr.record_every << ',' << format_double(tr.times[k]) << ',' << format_double(tr.omega_estimates[k])
       << ',' << static_cast<int>(tr.restart_flags[k]);
    if (full) {
      for (int i = 0; i < 6; ++i) os << ',' << format_double(tr.full_states[k](i));
      for (int i = 0; i < 6; ++i) os << ',' << format_double(tr.full_cov_diag[k](i));
    }
    os << '\n';
  }
}

inline void write_restart_log_csv(std::ostream& os, const EkfTrajectory& tr, const Provenance* prov = nullptr) {
  if (prov) prov->write(os);
  os << "step,t,cause\n";
  for (const auto& r : tr.restarts) {
    os << r.step << ',' << format_double(r.t) << ',' << (r.cause == RestartCause::Threshold ? "threshold" : "nonfinite")
       << '\n';
  }
}

}  // namespace kpo
