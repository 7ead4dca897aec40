#pragma once

// JSON run configuration for the kpo-sense tool. Every section is optional
// and falls back to the defaults below; any key the schema does not know is
// a configuration error, reported with its full path.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpo/protocol.hpp"

namespace kpo::cli {

using nlohmann::json;

struct OscillatorSection {
  double omega = 1.0;
  double epsilon = 1.0;
  double eta = 1.0;
  double phi = 0.1072;
  double kappa = 1.0;
};

struct PriorSection {
  double omega_l = 0.7;
  double omega_h = 2.3;
  double variance = 1.0;
};

struct FilterSection {
  double dt = 0.02;
  double f_max = 1e5;
  RestartPolicy restart_policy = RestartPolicy::ResetToInit;
  int max_restarts = 100;
  int record_every = 1;
  bool full_states = false;
};

struct SimulationSection {
  double duration = 100.0;
  int refinement = 1;
  int trajectories = 1;
  bool binary_record = false;
};

struct EnsembleSection {
  int n_traj = 200;
  std::vector<double> times;  // empty: the simulation duration only
  double tail_threshold = 1.3;
};

struct CfiSection {
  int n_traj = 0;  // 0 disables the F(t) table
  double t_max = 100.0;
  double spacing = 10.0;
  double dt = 0.01;
};

struct ScanSection {
  int points = 256;
  CfiSection cfi;
};

struct BootstrapSection {
  int pool = 0;  // 0 disables bootstrapping
  int resamples = 50;
};

struct ProtocolSection {
  int n_traj = 200;
  int n_iterations = 3;
  double t_star = 300.0;
  std::optional<double> t_large;
  double epsilon_margin = 0.1;
  FilterInit filter_init = FilterInit::PriorMidpoint;
  double curve_spacing = 10.0;
  int repeats = 1;
  BootstrapSection bootstrap;
};

struct FitSection {
  BinningRule binning = BinningRule::ShortestHalf;
  int refine_passes = 2;
  double alpha_max = 50.0;
  std::string input;
};

struct StatsSection {
  std::string input;
  std::optional<double> omega_true;
};

struct RunConfig {
  OscillatorSection oscillator;
  PriorSection prior;
  FilterSection filter;
  SimulationSection simulation;
  EnsembleSection ensemble;
  ScanSection scan;
  ProtocolSection protocol;
  FitSection fit;
  StatsSection stats;
  std::uint64_t seed = 1;
  int workers = 0;

  OscillatorParams params() const {
    return OscillatorParams::make(oscillator.omega, oscillator.epsilon, oscillator.eta, oscillator.phi,
                                  oscillator.kappa);
  }
  PriorInterval prior_interval() const { return PriorInterval::make(prior.omega_l, prior.omega_h); }

  EkfConfig ekf_config() const {
    EkfConfig c = EkfConfig::from_prior(prior_interval(), prior.variance, filter.dt, oscillator.kappa);
    c.f_max = filter.f_max;
    c.restart_policy = filter.restart_policy;
    c.max_restarts = filter.max_restarts;
    c.record_every = filter.record_every;
    c.store_full_states = filter.full_states;
    c.validate();
    return c;
  }

  SnapshotFitOptions fit_options() const {
    SnapshotFitOptions o;
    o.histogram.rule = fit.binning;
    o.refine_passes = fit.refine_passes;
    o.fit.alpha_max = fit.alpha_max;
    return o;
  }

  ProtocolConfig protocol_config() const {
    ProtocolConfig c;
    c.prior = prior_interval();
    c.eta = oscillator.eta;
    c.kappa = oscillator.kappa;
    c.n_traj = protocol.n_traj;
    c.n_iterations = protocol.n_iterations;
    c.t_star = protocol.t_star;
    c.t_large = protocol.t_large;
    c.epsilon_margin = protocol.epsilon_margin;
    c.dt = filter.dt;
    c.prior_variance = prior.variance;
    c.f_max = filter.f_max;
    c.restart_policy = filter.restart_policy;
    c.max_restarts = filter.max_restarts;
    c.filter_init = protocol.filter_init;
    c.curve_spacing = protocol.curve_spacing;
    c.base_seed = seed;
    c.workers = workers;
    c.fit = fit_options();
    c.validate();
    return c;
  }

  /// Checks everything that does not depend on the subcommand, so a bad
  /// value fails before any computation starts.
  void validate() const {
    params();
    prior_interval();
    ekf_config();
    if (simulation.duration < 0.0) throw ConfigError("simulation.duration must be nonnegative");
    if (simulation.refinement < 1) throw ConfigError("simulation.refinement must be >= 1");
    if (simulation.trajectories < 1) throw ConfigError("simulation.trajectories must be >= 1");
    if (ensemble.n_traj < 10) throw ConfigError("ensemble.n_traj must be at least 10 for histogram fitting");
    for (double t : ensemble.times) {
      if (!(t >= 0.0 && t <= simulation.duration)) throw ConfigError("ensemble.times must lie in [0, duration]");
    }
    if (scan.points < 1) throw ConfigError("scan.points must be >= 1");
    if (scan.cfi.n_traj < 0) throw ConfigError("scan.cfi.n_traj must be >= 0");
    if (!(scan.cfi.t_max >= 0.0 && scan.cfi.spacing > 0.0 && scan.cfi.dt > 0.0)) {
      throw ConfigError("scan.cfi needs t_max >= 0, spacing > 0, dt > 0");
    }
    if (protocol.repeats < 0) throw ConfigError("protocol.repeats must be >= 0");
    if (protocol.bootstrap.pool < 0 || protocol.bootstrap.resamples < 2) {
      throw ConfigError("protocol.bootstrap needs pool >= 0 and resamples >= 2");
    }
    if (fit.refine_passes < 0 || !(fit.alpha_max > 0.0)) throw ConfigError("fit needs refine_passes >= 0, alpha_max > 0");
    if (workers < 0) throw ConfigError("workers must be >= 0");
    protocol_config();
  }
};

// --- enum spellings -----------------------------------------------------------

inline const char* to_string(RestartPolicy p) {
  return p == RestartPolicy::ResetToInit ? "reset_to_init" : "latest_frequency";
}
inline const char* to_string(FilterInit f) {
  return f == FilterInit::PriorMidpoint ? "prior_midpoint" : "carry_forward";
}
inline const char* to_string(BinningRule r) {
  switch (r) {
    case BinningRule::FreedmanDiaconis: return "freedman_diaconis";
    case BinningRule::ShortestHalf: return "shortest_half";
    case BinningRule::Scott: return "scott";
    case BinningRule::Uniform32: return "uniform";
  }
  return "?";
}

namespace detail {

/// Reads keys out of one JSON object and remembers which were consumed, so
/// leftovers can be reported as unknown.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    const json* v = take(key);
    if (!v) return;
    try {
      v->get_to(out);
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  void get(const char* key, std::optional<double>& out) {
    const json* v = take(key);
    if (!v || v->is_null()) return;
    double x = 0.0;
    try {
      v->get_to(x);
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
    out = x;
  }

  template <typename E>
  void get_enum(const char* key, E& out, std::initializer_list<E> values) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
    const auto s = v->get<std::string>();
    for (E e : values) {
      if (s == to_string(e)) {
        out = e;
        return;
      }
    }
    throw ConfigError(where(key) + " has unrecognized value '" + s + "'");
  }

  std::optional<Reader> child(const char* key) {
    const json* v = take(key);
    if (!v) return std::nullopt;
    return Reader(*v, where(key));
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown configuration key '" + where(k.c_str()) + "'");
    }
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const char* key = nullptr) const {
    std::string s = path_;
    if (key) s += (s.empty() ? "" : ".") + std::string(key);
    return s.empty() ? "<root>" : s;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_config(const json& root) {
  RunConfig c;
  detail::Reader r(root, "");
  if (auto s = r.child("oscillator")) {
    s->get("omega", c.oscillator.omega);
    s->get("epsilon", c.oscillator.epsilon);
    s->get("eta", c.oscillator.eta);
    s->get("phi", c.oscillator.phi);
    s->get("kappa", c.oscillator.kappa);
    s->finish();
  }
  if (auto s = r.child("prior")) {
    s->get("omega_l", c.prior.omega_l);
    s->get("omega_h", c.prior.omega_h);
    s->get("variance", c.prior.variance);
    s->finish();
  }
  if (auto s = r.child("filter")) {
    s->get("dt", c.filter.dt);
    s->get("f_max", c.filter.f_max);
    s->get_enum("restart_policy", c.filter.restart_policy,
                {RestartPolicy::ResetToInit, RestartPolicy::ResetToLatestFrequency});
    s->get("max_restarts", c.filter.max_restarts);
    s->get("record_every", c.filter.record_every);
    s->get("full_states", c.filter.full_states);
    s->finish();
  }
  if (auto s = r.child("simulation")) {
    s->get("duration", c.simulation.duration);
    s->get("refinement", c.simulation.refinement);
    s->get("trajectories", c.simulation.trajectories);
    s->get("binary_record", c.simulation.binary_record);
    s->finish();
  }
  if (auto s = r.child("ensemble")) {
    s->get("n_traj", c.ensemble.n_traj);
    s->get("times", c.ensemble.times);
    s->get("tail_threshold", c.ensemble.tail_threshold);
    s->finish();
  }
  if (auto s = r.child("scan")) {
    s->get("points", c.scan.points);
    if (auto f = s->child("cfi")) {
      f->get("n_traj", c.scan.cfi.n_traj);
      f->get("t_max", c.scan.cfi.t_max);
      f->get("spacing", c.scan.cfi.spacing);
      f->get("dt", c.scan.cfi.dt);
      f->finish();
    }
    s->finish();
  }
  if (auto s = r.child("protocol")) {
    s->get("n_traj", c.protocol.n_traj);
    s->get("n_iterations", c.protocol.n_iterations);
    s->get("t_star", c.protocol.t_star);
    s->get("t_large", c.protocol.t_large);
    s->get("epsilon_margin", c.protocol.epsilon_margin);
    s->get_enum("filter_init", c.protocol.filter_init, {FilterInit::PriorMidpoint, FilterInit::CarryForward});
    s->get("curve_spacing", c.protocol.curve_spacing);
    s->get("repeats", c.protocol.repeats);
    if (auto b = s->child("bootstrap")) {
      b->get("pool", c.protocol.bootstrap.pool);
      b->get("resamples", c.protocol.bootstrap.resamples);
      b->finish();
    }
    s->finish();
  }
  if (auto s = r.child("fit")) {
    s->get_enum("binning", c.fit.binning,
                {BinningRule::FreedmanDiaconis, BinningRule::ShortestHalf, BinningRule::Scott, BinningRule::Uniform32});
    s->get("refine_passes", c.fit.refine_passes);
    s->get("alpha_max", c.fit.alpha_max);
    s->get("input", c.fit.input);
    s->finish();
  }
  if (auto s = r.child("stats")) {
    s->get("input", c.stats.input);
    s->get("omega_true", c.stats.omega_true);
    s->finish();
  }
  r.get("seed", c.seed);
  r.get("workers", c.workers);
  r.finish();
  return c;
}

/// The effective configuration with every default filled in. The worker
/// count is left out because it never changes results.
inline json to_json(const RunConfig& c) {
  json j;
  j["oscillator"] = {{"omega", c.oscillator.omega},
                     {"epsilon", c.oscillator.epsilon},
                     {"eta", c.oscillator.eta},
                     {"phi", c.oscillator.phi},
                     {"kappa", c.oscillator.kappa}};
  j["prior"] = {{"omega_l", c.prior.omega_l}, {"omega_h", c.prior.omega_h}, {"variance", c.prior.variance}};
  j["filter"] = {{"dt", c.filter.dt},
                 {"f_max", c.filter.f_max},
                 {"restart_policy", to_string(c.filter.restart_policy)},
                 {"max_restarts", c.filter.max_restarts},
                 {"record_every", c.filter.record_every},
                 {"full_states", c.filter.full_states}};
  j["simulation"] = {{"duration", c.simulation.duration},
                     {"refinement", c.simulation.refinement},
                     {"trajectories", c.simulation.trajectories},
                     {"binary_record", c.simulation.binary_record}};
  j["ensemble"] = {
      {"n_traj", c.ensemble.n_traj}, {"times", c.ensemble.times}, {"tail_threshold", c.ensemble.tail_threshold}};
  j["scan"] = {{"points", c.scan.points},
               {"cfi",
                {{"n_traj", c.scan.cfi.n_traj},
                 {"t_max", c.scan.cfi.t_max},
                 {"spacing", c.scan.cfi.spacing},
                 {"dt", c.scan.cfi.dt}}}};
  j["protocol"] = {{"n_traj", c.protocol.n_traj},
                   {"n_iterations", c.protocol.n_iterations},
                   {"t_star", c.protocol.t_star},
                   {"t_large", c.protocol.t_large ? json(*c.protocol.t_large) : json(nullptr)},
                   {"epsilon_margin", c.protocol.epsilon_margin},
                   {"filter_init", to_string(c.protocol.filter_init)},
                   {"curve_spacing", c.protocol.curve_spacing},
                   {"repeats", c.protocol.repeats},
                   {"bootstrap", {{"pool", c.protocol.bootstrap.pool}, {"resamples", c.protocol.bootstrap.resamples}}}};
  j["fit"] = {{"binning", to_string(c.fit.binning)},
              {"refine_passes", c.fit.refine_passes},
              {"alpha_max", c.fit.alpha_max},
              {"input", c.fit.input}};
  j["stats"] = {{"input", c.stats.input},
                {"omega_true", c.stats.omega_true ? json(*c.stats.omega_true) : json(nullptr)}};
  j["seed"] = c.seed;
  return j;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

}  // namespace kpo::cli
