#pragma once

// Ground-truth conditional dynamics under continuous homodyne detection.
// Means follow Euler-Maruyama; the covariance obeys a deterministic ODE and is
// advanced with RK4 inside the same loop.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "kpo/core_dynamics.hpp"
#include "kpo/errors.hpp"
#include "kpo/io.hpp"
#include "kpo/noise.hpp"

namespace kpo {

struct PhotocurrentRecord {
  double dt = 0.02;
  std::vector<double> increments;
  OscillatorParams params_tag;

  std::size_t size() const { return increments.size(); }
  double duration() const { return dt * static_cast<double>(increments.size()); }
};

struct TruthTrajectory {
  std::vector<double> times;
  std::vector<GaussianState> states;
  bool restart_free = true;
};

struct TruthStep {
  GaussianState state;
  double delta_y = 0.0;
};

/// Advances the conditional state by dt given the Wiener increment dw and
/// returns the photocurrent increment generated over the step (evaluated at
/// the pre-step mean).
inline TruthStep step_truth(const GaussianState& state, const OscillatorParams& p, double dt, double dw) {
  const Vec2 v = homodyne_direction(p.phi);
  const Mat2 a = drift_matrix(p);
  const double gain = std::sqrt(0.5 * p.eta * p.kappa);
  TruthStep out;
  out.delta_y = std::sqrt(2.0 * p.kappa * p.eta) * v.dot(state.r) * dt + dw;
  out.state.r = state.r + a * state.r * dt + gain * (state.sigma - Mat2::Identity()) * v * dw;
  out.state.sigma = advance_covariance(p, state.sigma, dt);
  return out;
}

struct SimulationOptions {
  /// Internal substeps per recorded increment.
  int refinement = 1;
  /// Abort when any entry of r or sigma exceeds this in magnitude.
  double guard = 1e8;
  /// Keep every state (false: only the photocurrent is produced).
  bool store_states = true;
};

struct TruthRun {
  TruthTrajectory trajectory;
  PhotocurrentRecord record;
};

inline TruthRun simulate_truth(const OscillatorParams& p, const GaussianState& init, double dt, double duration,
                               NoiseStream& noise, const SimulationOptions& opt = {}) {
  p.validate();
  if (opt.refinement < 1) throw ConfigError("refinement must be >= 1");
  const std::size_t n = step_count(duration, dt);
  const double h = dt / opt.refinement;

  TruthRun run;
  run.record.dt = dt;
  run.record.params_tag = p;
  run.record.increments.reserve(n);
  if (opt.store_states) {
    run.trajectory.times.reserve(n + 1);
    run.trajectory.states.reserve(n + 1);
    run.trajectory.times.push_back(0.0);
    run.trajectory.states.push_back(init);
  }

  GaussianState state = init;
  for (std::size_t k = 0; k < n; ++k) {
    double dy = 0.0;
    for (int sub = 0; sub < opt.refinement; ++sub) {
      const TruthStep step = step_truth(state, p, h, noise.increment(h));
      state = step.state;
      dy += step.delta_y;
    }
    const double scale = std::max(state.r.cwiseAbs().maxCoeff(), state.sigma.cwiseAbs().maxCoeff());
    if (!std::isfinite(dy) || !std::isfinite(scale) || scale > opt.guard) {
      std::ostringstream os;
      os << "truth simulation diverged at step " << k << " (t=" << (k + 1) * dt << ", |state|=" << scale
         << "); stability margin " << stability_margin(p);
      throw NumericError(os.str());
    }
    run.record.increments.push_back(dy);
    if (opt.store_states) {
      run.trajectory.times.push_back(static_cast<double>(k + 1) * dt);
      run.trajectory.states.push_back(state);
    }
  }
  return run;
}

/// Vacuum-initialized photocurrent only; the common case for ensembles.
inline PhotocurrentRecord simulate_record(const OscillatorParams& p, double dt, double duration, NoiseStream& noise,
                                          int refinement = 1) {
  SimulationOptions opt;
  opt.refinement = refinement;
  opt.store_states = false;
  return simulate_truth(p, GaussianState::vacuum(), dt, duration, noise, opt).record;
}

// --- serialization -----------------------------------------------------------

inline void write_record_csv(std::ostream& os, const PhotocurrentRecord& rec, const Provenance* prov = nullptr) {
  if (prov) prov->write(os);
  const auto& p = rec.params_tag;
  os << "# dt=" << format_double(rec.dt) << " omega=" << format_double(p.omega)
     << " epsilon=" << format_double(p.epsilon) << " kappa=" << format_double(p.kappa)
     << " eta=" << format_double(p.eta) << " phi=" << format_double(p.phi) << "\n";
  os << "step,t,delta_y\n";
  for (std::size_t k = 0; k < rec.increments.size(); ++k) {
    os << k << ',' << format_double(static_cast<double>(k + 1) * rec.dt) << ','
       << format_double(rec.increments[k]) << '\n';
  }
}

/// Reads a record written by write_record_csv. The parameter line is required.
inline PhotocurrentRecord read_record_csv(std::istream& is) {
  PhotocurrentRecord rec;
  bool have_params = false;
  bool have_header = false;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# dt=", 0) == 0) {
        std::istringstream ls(line.substr(2));
        std::string tok;
        while (ls >> tok) {
          const auto eq = tok.find('=');
          if (eq == std::string::npos) continue;
          const std::string key = tok.substr(0, eq);
          const double val = parse_double(std::string_view(tok).substr(eq + 1));
          if (key == "dt") rec.dt = val;
          else if (key == "omega") rec.params_tag.omega = val;
          else if (key == "epsilon") rec.params_tag.epsilon = val;
          else if (key == "kappa") rec.params_tag.kappa = val;
          else if (key == "eta") rec.params_tag.eta = val;
          else if (key == "phi") rec.params_tag.phi = val;
        }
        have_params = true;
      }
      continue;
    }
    if (!have_header) {
      if (line != "step,t,delta_y") throw IoError("unexpected photocurrent CSV header: " + line);
      have_header = true;
      continue;
    }
    const auto fields = split_csv(line);
    if (fields.size() != 3) throw IoError("photocurrent CSV row must have 3 fields");
    rec.increments.push_back(parse_double(fields[2]));
  }
  if (!have_params || !have_header) throw IoError("photocurrent CSV missing parameter line or header");
  return rec;
}

namespace detail {
inline constexpr char kRecordMagic[8] = {'K', 'P', 'O', 'R', 'E', 'C', '0', '1'};

template <typename T>
void put_raw(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "binary records are little-endian");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated binary photocurrent record");
  return v;
}
}  // namespace detail

/// Binary layout (little-endian): 8-byte magic "KPOREC01", f64 dt, u64 N,
/// f64 omega, epsilon, kappa, eta, phi, then N f64 increments.
inline void write_record_binary(std::ostream& os, const PhotocurrentRecord& rec) {
  os.write(detail::kRecordMagic, sizeof(detail::kRecordMagic));
  detail::put_raw(os, rec.dt);
  detail::put_raw(os, static_cast<std::uint64_t>(rec.increments.size()));
  const auto& p = rec.params_tag;
  for (double v : {p.omega, p.epsilon, p.kappa, p.eta, p.phi}) detail::put_raw(os, v);
  os.write(reinterpret_cast<const char*>(rec.increments.data()),
           static_cast<std::streamsize>(rec.increments.size() * sizeof(double)));
  if (!os) throw IoError("failed writing binary photocurrent record");
}

inline PhotocurrentRecord read_record_binary(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kRecordMagic, sizeof(magic)) != 0) {
    throw IoError("not a binary photocurrent record");
  }
  PhotocurrentRecord rec;
  rec.dt = detail::get_raw<double>(is);
  const auto n = detail::get_raw<std::uint64_t>(is);
  rec.params_tag.omega = detail::get_raw<double>(is);
  rec.params_tag.epsilon = detail::get_raw<double>(is);
  rec.params_tag.kappa = detail::get_raw<double>(is);
  rec.params_tag.eta = detail::get_raw<double>(is);
  rec.params_tag.phi = detail::get_raw<double>(is);
  rec.increments.resize(n);
  is.read(reinterpret_cast<char*>(rec.increments.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw IoError("truncated binary photocurrent record");
  return rec;
}

inline void write_truth_csv(std::ostream& os, const TruthTrajectory& tr, const Provenance* prov = nullptr) {
  if (prov) prov->write(os);
  os << "step,t,X,P,sigma_x,sigma_p,sigma_xp\n";
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    const auto& s = tr.states[k];
    os << k << ',' << format_double(tr.times[k]) << ',' << format_double(s.r(0)) << ',' << format_double(s.r(1))
       << ',' << format_double(s.sigma(0, 0)) << ',' << format_double(s.sigma(1, 1)) << ','
       << format_double(s.sigma(0, 1)) << '\n';
  }
}

}  // namespace kpo
