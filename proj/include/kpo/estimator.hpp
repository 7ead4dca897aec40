#pragma once

// Ensemble-level frequency estimation: histogram of filter estimates at a
// fixed time, skew-normal peak fit, and the mode of the fit as the point
// estimate. Also ensemble statistics across repeated estimation runs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "kpo/ekf.hpp"
#include "kpo/errors.hpp"
#include "kpo/golden.hpp"
#include "kpo/io.hpp"
#include "kpo/noise.hpp"

namespace kpo {

struct EnsembleSnapshot {
  double t = 0.0;
  std::vector<double> samples;
  std::size_t n_traj() const { return samples.size(); }
};

inline EnsembleSnapshot snapshot(std::span<const EkfTrajectory> trajectories, double t) {
  if (trajectories.empty()) throw ConfigError("snapshot of an empty ensemble");
  EnsembleSnapshot snap;
  snap.t = t;
  snap.samples.reserve(trajectories.size());
  for (const auto& tr : trajectories) snap.samples.push_back(tr.estimate_at(t));
  return snap;
}

/// Linear-interpolated empirical quantile (type 7) of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ConfigError("quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct SampleSummary {
  double mean = 0.0;
  double std = 0.0;  // population (1/n) standard deviation
  double median = 0.0;
  double iqr = 0.0;
  double skewness = 0.0;
  double shorth = 0.0;  // length of the shortest interval holding half the samples
  double min = 0.0;
  double max = 0.0;
};

inline SampleSummary summarize(std::span<const double> samples) {
  if (samples.empty()) throw ConfigError("summary of empty data");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  SampleSummary out;
  const double n = static_cast<double>(s.size());
  for (double x : s) out.mean += x;
  out.mean /= n;
  double m2 = 0.0, m3 = 0.0;
  for (double x : s) {
    const double d = x - out.mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  out.std = std::sqrt(m2);
  out.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  out.median = quantile_sorted(s, 0.5);
  out.iqr = quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
  out.min = s.front();
  out.max = s.back();
  const std::size_t half = (s.size() + 1) / 2;
  out.shorth = s.back() - s.front();
  for (std::size_t i = 0; i + half - 1 < s.size(); ++i) out.shorth = std::min(out.shorth, s[i + half - 1] - s[i]);
  return out;
}

/// FreedmanDiaconis: width 2 IQR n^(-1/3). ShortestHalf: the same formula
/// with the IQR replaced by the shortest-half length, which coincides with
/// the IQR for a normal sample but ignores a one-sided tail.
enum class BinningRule { FreedmanDiaconis, ShortestHalf, Scott, Uniform32 };

struct Histogram {
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;
  std::vector<double> density;
  bool degenerate = false;
  BinningRule rule_used = BinningRule::FreedmanDiaconis;
  SampleSummary summary;

  std::size_t bins() const { return counts.size(); }
  double center(std::size_t i) const { return 0.5 * (bin_edges[i] + bin_edges[i + 1]); }
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

struct HistogramOptions {
  BinningRule rule = BinningRule::ShortestHalf;
  /// Upper bound on the number of bins; a far outlier otherwise forces an
  /// unbounded bin count under width-based rules.
  std::size_t max_bins = 4096;
  /// Bin count for the uniform rule.
  std::size_t uniform_bins = 32;
  /// Add one empty bin of the same width beyond each extreme sample, so a
  /// peak sitting at the sample minimum or maximum still shows its edge.
  bool pad_edges = true;
};

/// Freedman-Diaconis bins by default; a zero IQR falls back to Scott's rule,
/// and a zero standard deviation to 32 uniform bins. All-identical samples
/// give one bin flagged degenerate.
inline Histogram make_histogram(const EnsembleSnapshot& snap, const HistogramOptions& opt = {}) {
  const auto& xs = snap.samples;
  if (xs.size() < 10) throw ConfigError("histogram needs at least 10 samples");
  for (double x : xs) {
    if (!std::isfinite(x)) throw ConfigError("histogram samples must be finite");
  }
  Histogram h;
  h.summary = summarize(xs);
  const double lo = h.summary.min;
  const double hi = h.summary.max;
  const double n = static_cast<double>(xs.size());
  if (hi == lo) {
    h.degenerate = true;
    h.bin_edges = {lo - 0.5, lo + 0.5};
    h.counts = {xs.size()};
    h.density = {1.0};
    return h;
  }
  const double range = hi - lo;
  double width = 0.0;
  BinningRule rule = opt.rule;
  if (rule == BinningRule::FreedmanDiaconis || rule == BinningRule::ShortestHalf) {
    const double spread = rule == BinningRule::ShortestHalf ? h.summary.shorth : h.summary.iqr;
    width = 2.0 * spread / std::cbrt(n);
    if (!(width > 0.0)) rule = BinningRule::Scott;
  }
  if (rule == BinningRule::Scott) {
    width = 3.49 * h.summary.std / std::cbrt(n);
    if (!(width > 0.0)) rule = BinningRule::Uniform32;
  }
  std::size_t nbins = opt.rule == BinningRule::Uniform32 ? opt.uniform_bins : 32;
  if (rule != BinningRule::Uniform32) {
    nbins = static_cast<std::size_t>(std::ceil(range / width));
  }
  nbins = std::clamp<std::size_t>(nbins, 1, opt.max_bins);
  h.rule_used = rule;
  width = range / static_cast<double>(nbins);

  const std::size_t pad = opt.pad_edges ? 1 : 0;
  const std::size_t inner = nbins;
  nbins += 2 * pad;
  const double start = lo - width * static_cast<double>(pad);
  h.bin_edges.resize(nbins + 1);
  for (std::size_t i = 0; i <= nbins; ++i) h.bin_edges[i] = start + width * static_cast<double>(i);
  h.bin_edges[pad] = lo;
  h.bin_edges[pad + inner] = hi;
  h.counts.assign(nbins, 0);
  for (double x : xs) {
    auto k = static_cast<std::size_t>((x - lo) / width);
    if (k >= inner) k = inner - 1;
    ++h.counts[k + pad];
  }
  h.density.resize(nbins);
  for (std::size_t i = 0; i < nbins; ++i) {
    h.density[i] = static_cast<double>(h.counts[i]) / (n * (h.bin_edges[i + 1] - h.bin_edges[i]));
  }
  return h;
}

/// A exp(-(w - mu)^2 / 2 sigma^2) [1 + erf(alpha (w - mu) / sigma)].
struct SkewNormal {
  double amplitude = 1.0;
  double mu = 0.0;
  double sigma = 1.0;
  double alpha = 0.0;

  double operator()(double w) const {
    const double z = (w - mu) / sigma;
    return amplitude * std::exp(-0.5 * z * z) * std::erfc(-alpha * z);
  }
};

struct SkewNormalFit {
  SkewNormal shape;
  double mode = 0.0;
  bool converged = false;
  double residual = 0.0;  // RMS density residual over bins
  int iterations = 0;
};

struct FitHint {
  std::optional<double> amplitude, mu, sigma, alpha;
};

struct FitOptions {
  int max_iterations = 500;
  double rel_step_tol = 1e-8;
  /// |alpha| is projected onto [0, alpha_max]; beyond this the shape is a
  /// half-normal to within bin resolution and alpha is otherwise unidentified.
  double alpha_max = 50.0;
};

inline double mode_of_fit(const SkewNormal& shape);

inline double mode_of_fit(const SkewNormalFit& fit) { return mode_of_fit(fit.shape); }

namespace detail {

struct LmOutcome {
  Eigen::Vector4d theta;
  double cost = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Levenberg-Marquardt on the skew-normal least-squares problem with
/// analytic derivatives; theta = (A, mu, sigma, alpha).
inline LmOutcome skew_normal_lm(const Eigen::VectorXd& xs, const Eigen::VectorXd& ys, Eigen::Vector4d theta,
                                const FitOptions& opt) {
  const Eigen::Index m = xs.size();
  constexpr double two_over_sqrt_pi = 2.0 / 1.7724538509055160273;
  auto residuals = [&](const Eigen::Vector4d& th, Eigen::VectorXd& r, Eigen::Matrix<double, Eigen::Dynamic, 4>* jac) {
    const double a = th(0), mu = th(1), sg = th(2), al = th(3);
    r.resize(m);
    if (jac) jac->resize(m, 4);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double z = (xs(i) - mu) / sg;
      const double g = std::exp(-0.5 * z * z);
      const double e = std::erfc(-al * z);
      r(i) = a * g * e - ys(i);
      if (jac) {
        const double q = two_over_sqrt_pi * std::exp(-al * al * z * z);
        const double df_dz = a * g * (-z * e + q * al);
        (*jac)(i, 0) = g * e;
        (*jac)(i, 1) = -df_dz / sg;
        (*jac)(i, 2) = -df_dz * z / sg;
        (*jac)(i, 3) = a * g * q * z;
      }
    }
  };

  theta(3) = std::clamp(theta(3), -opt.alpha_max, opt.alpha_max);
  Eigen::VectorXd r;
  Eigen::Matrix<double, Eigen::Dynamic, 4> jac;
  residuals(theta, r, &jac);
  LmOutcome out;
  out.cost = r.squaredNorm();
  double lambda = 1e-3;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    const Eigen::Matrix4d jtj = jac.transpose() * jac;
    const Eigen::Vector4d jtr = jac.transpose() * r;
    bool accepted = false;
    Eigen::Vector4d step = Eigen::Vector4d::Zero();
    for (int tries = 0; tries < 60 && !accepted; ++tries) {
      Eigen::Matrix4d lhs = jtj;
      for (int d = 0; d < 4; ++d) lhs(d, d) += lambda * std::max(jtj(d, d), 1e-12);
      Eigen::Vector4d rhs = -jtr;
      step = lhs.ldlt().solve(rhs);
      const bool at_bound = std::abs(theta(3)) >= opt.alpha_max;
      if (at_bound && std::abs(theta(3) + step(3)) > opt.alpha_max) {
        // alpha pinned at its bound: solve for the other three parameters only
        lhs.row(3).setZero();
        lhs.col(3).setZero();
        lhs(3, 3) = 1.0;
        rhs(3) = 0.0;
        step = lhs.ldlt().solve(rhs);
      }
      Eigen::Vector4d trial = theta + step;
      trial(3) = std::clamp(trial(3), -opt.alpha_max, opt.alpha_max);
      step = trial - theta;
      if (!step.allFinite() || !(trial(2) > 0.0) || !(trial(0) > 0.0)) {
        lambda *= 4.0;
        continue;
      }
      Eigen::VectorXd r_trial;
      residuals(trial, r_trial, nullptr);
      const double c_trial = r_trial.squaredNorm();
      if (std::isfinite(c_trial) && c_trial <= out.cost) {
        theta = trial;
        out.cost = c_trial;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
      } else {
        lambda *= 4.0;
      }
    }
    if (!accepted) break;
    residuals(theta, r, &jac);
    if (step.norm() <= opt.rel_step_tol * (theta.norm() + opt.rel_step_tol)) {
      out.converged = true;
      ++it;
      break;
    }
  }
  out.theta = theta;
  out.iterations = it;
  return out;
}

}  // namespace detail

/// Least-squares fit of the skew-normal shape to (bin center, density) pairs.
/// The default start is mu = median, sigma = IQR/1.349, alpha = sign of the
/// sample skewness, A = half the peak density. A second start sits at the
/// tallest bin with sigma = shorth/1.349 (a long tail inflates the IQR far
/// beyond the peak width), and a hint, if given, adds a third. The converged
/// outcome with the smallest residual wins.
inline SkewNormalFit fit_skew_normal(const Histogram& hist, const FitHint& hint = {}, const FitOptions& opt = {}) {
  if (hist.degenerate) throw ConfigError("cannot fit a degenerate histogram");
  const std::size_t m = hist.bins();
  Eigen::VectorXd xs(static_cast<Eigen::Index>(m)), ys(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    xs(static_cast<Eigen::Index>(i)) = hist.center(i);
    ys(static_cast<Eigen::Index>(i)) = hist.density[i];
  }
  const auto& s = hist.summary;
  Eigen::Index peak_bin = 0;
  const double peak = ys.maxCoeff(&peak_bin);
  const double fallback_sigma = s.std > 0.0 ? s.std : (hist.bin_edges.back() - hist.bin_edges.front());
  const double alpha0 = s.skewness > 0.0 ? 1.0 : (s.skewness < 0.0 ? -1.0 : 0.0);

  double sigma0 = s.iqr / 1.349;
  if (!(sigma0 > 0.0)) sigma0 = fallback_sigma;
  double robust_sigma = s.shorth / 1.349;
  if (!(robust_sigma > 0.0)) robust_sigma = fallback_sigma;
  std::vector<Eigen::Vector4d> starts;
  starts.emplace_back(0.5 * peak, s.median, sigma0, alpha0);
  starts.emplace_back(0.5 * peak, xs(peak_bin), robust_sigma, alpha0);
  if (hint.amplitude || hint.mu || hint.sigma || hint.alpha) {
    starts.emplace_back(hint.amplitude.value_or(0.5 * peak), hint.mu.value_or(s.median), hint.sigma.value_or(sigma0),
                        hint.alpha.value_or(alpha0));
  }

  std::optional<detail::LmOutcome> best;
  for (const auto& start : starts) {
    detail::LmOutcome o = detail::skew_normal_lm(xs, ys, start, opt);
    const bool better = !best || (o.converged && !best->converged) ||
                        (o.converged == best->converged && o.cost < best->cost);
    if (better) best = o;
  }
  SkewNormalFit fit;
  fit.converged = best->converged;
  fit.iterations = best->iterations;
  fit.shape = {best->theta(0), best->theta(1), best->theta(2), best->theta(3)};
  fit.residual = std::sqrt(best->cost / static_cast<double>(m));
  fit.mode = mode_of_fit(fit.shape);
  return fit;
}

/// Maximizer of the skew-normal shape: golden section on mu +/- 5 sigma.
/// The shape is log-concave, hence unimodal on that bracket.
inline double mode_of_fit(const SkewNormal& shape) {
  if (shape.alpha == 0.0) return shape.mu;
  auto logf = [&](double w) {
    const double z = (w - shape.mu) / shape.sigma;
    return -0.5 * z * z + std::log(std::erfc(-shape.alpha * z));
  };
  auto f = [&](double w) {
    const double v = logf(w);
    return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
  };
  return golden_section_maximize(f, shape.mu - 5.0 * shape.sigma, shape.mu + 5.0 * shape.sigma, 1e-6).x;
}

/// Fraction of samples strictly greater than omega_0.
inline double tail_fraction(const EnsembleSnapshot& snap, double omega_0) {
  if (snap.samples.empty()) return 0.0;
  std::size_t k = 0;
  for (double x : snap.samples) k += (x > omega_0);
  return static_cast<double>(k) / static_cast<double>(snap.samples.size());
}

struct EstimatorStatistics {
  std::vector<double> mean;
  std::vector<double> std;  // population standard deviation, so mse = std^2 + bias^2
  std::vector<double> mse;
};

/// Pointwise statistics across runs sharing a time grid.
inline EstimatorStatistics estimator_statistics(const std::vector<std::vector<double>>& runs, double omega_true) {
  if (runs.size() < 2) throw ConfigError("estimator statistics need at least 2 runs");
  const std::size_t len = runs.front().size();
  for (const auto& r : runs) {
    if (r.size() != len) throw ConfigError("runs must share a common time grid");
  }
  const double n = static_cast<double>(runs.size());
  EstimatorStatistics st;
  st.mean.assign(len, 0.0);
  st.std.assign(len, 0.0);
  st.mse.assign(len, 0.0);
  for (std::size_t k = 0; k < len; ++k) {
    // shifted by the first run so that identical runs give exactly zero spread
    const double shift = runs.front()[k];
    double mean = 0.0;
    for (const auto& r : runs) mean += r[k] - shift;
    mean = shift + mean / n;
    double var = 0.0, mse = 0.0;
    for (const auto& r : runs) {
      var += (r[k] - mean) * (r[k] - mean);
      mse += (r[k] - omega_true) * (r[k] - omega_true);
    }
    st.mean[k] = mean;
    st.std[k] = std::sqrt(var / n);
    st.mse[k] = mse / n;
  }
  return st;
}

struct SnapshotFitOptions {
  HistogramOptions histogram;
  FitOptions fit;
  /// Extra passes that re-bin with width = sigma / (bins_per_sigma_coeff * n^(1/3))
  /// (capped at 5 bins per sigma) and refit, so that a peak much narrower than
  /// the bulk spread is resolved when there are enough samples to do so.
  int refine_passes = 2;
  double bins_per_sigma_coeff = 0.4;
};

/// Full estimation chain for one snapshot: histogram, fit, mode. A refinement
/// pass that fails to converge leaves the previous converged fit in place.
inline SkewNormalFit estimate_from_snapshot(const EnsembleSnapshot& snap, const SnapshotFitOptions& opt = {},
                                            const FitHint& hint = {}) {
  Histogram h = make_histogram(snap, opt.histogram);
  SkewNormalFit fit = fit_skew_normal(h, hint, opt.fit);
  const double n = static_cast<double>(snap.samples.size());
  const double per_sigma = std::clamp(opt.bins_per_sigma_coeff * std::cbrt(n), 1.0, 5.0);
  for (int pass = 0; pass < opt.refine_passes && fit.converged; ++pass) {
    const double range = h.summary.max - h.summary.min;
    const double width = fit.shape.sigma / per_sigma;
    if (!(width > 0.0) || !std::isfinite(width)) break;
    const auto nbins = static_cast<std::size_t>(std::ceil(range / width));
    if (nbins <= h.bins() || nbins > opt.histogram.max_bins) break;
    HistogramOptions fixed = opt.histogram;
    fixed.rule = BinningRule::Uniform32;
    fixed.uniform_bins = nbins;
    Histogram finer = make_histogram(snap, fixed);
    const FitHint next{fit.shape.amplitude, fit.shape.mu, fit.shape.sigma, fit.shape.alpha};
    SkewNormalFit refined = fit_skew_normal(finer, next, opt.fit);
    if (!refined.converged) break;
    h = std::move(finer);
    fit = refined;
  }
  return fit;
}

/// Bootstrap replicate: n_traj samples drawn with replacement from a pool.
inline EnsembleSnapshot bootstrap_resample(const EnsembleSnapshot& pool, std::size_t n_traj, NoiseStream& rng) {
  if (pool.samples.empty()) throw ConfigError("bootstrap from an empty pool");
  EnsembleSnapshot out;
  out.t = pool.t;
  out.samples.reserve(n_traj);
  for (std::size_t i = 0; i < n_traj; ++i) out.samples.push_back(pool.samples[rng.index_below(pool.samples.size())]);
  return out;
}

// --- serialization -----------------------------------------------------------

struct FitRow {
  double t;
  SkewNormalFit fit;
};

inline void write_fits_csv(std::ostream& os, std::span<const FitRow> rows, const Provenance* prov = nullptr) {
  if (prov) prov->write(os);
  os << "t,mode,mu,sigma,alpha,residual\n";
  for (const auto& r : rows) {
    os << format_double(r.t) << ',' << format_double(r.fit.mode) << ',' << format_double(r.fit.shape.mu) << ','
       << format_double(r.fit.shape.sigma) << ',' << format_double(r.fit.shape.alpha) << ','
       << format_double(r.fit.residual) << '\n';
  }
}

inline void write_statistics_csv(std::ostream& os, std::span<const double> times, const EstimatorStatistics& st,
                                 const Provenance* prov = nullptr) {
  if (prov) prov->write(os);
  os << "t,mean,std,mse\n";
  for (std::size_t k = 0; k < times.size(); ++k) {
    os << format_double(times[k]) << ',' << format_double(st.mean[k]) << ',' << format_double(st.std[k]) << ','
       << format_double(st.mse[k]) << '\n';
  }
}

inline void write_histogram_csv(std::ostream& os, const Histogram& h, const Provenance* prov = nullptr) {
  if (prov) prov->write(os);
  os << "left,right,count,density\n";
  for (std::size_t i = 0; i < h.bins(); ++i) {
    os << format_double(h.bin_edges[i]) << ',' << format_double(h.bin_edges[i + 1]) << ',' << h.counts[i] << ','
       << format_double(h.density[i]) << '\n';
  }
}

}  // namespace kpo
