// kpo-sense: command-line front end for the KPO frequency-sensing pipeline.
// Each subcommand writes plain CSV (or one JSON document for the protocol)
// into the output directory; every file starts with a provenance block.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace kpo;
using kpo::cli::json;
using kpo::cli::RunConfig;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4 };

struct CommonFlags {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool deterministic = false;
  std::optional<int> points;  // kf-scan only
};

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Loaded configuration plus everything needed to stamp output files.
struct Context {
  RunConfig cfg;
  fs::path out;
  Provenance prov;
  std::string command;

  Provenance provenance(std::vector<std::string> extra = {}) const {
    Provenance p = prov;
    p.extra.insert(p.extra.begin(), "command: " + command);
    for (auto& e : extra) p.extra.push_back(std::move(e));
    return p;
  }

  std::ofstream open(const std::string& name, std::ios::openmode mode = std::ios::out) const {
    return open_output((out / name).string(), mode);
  }

  json provenance_json() const {
    json j{{"tool", "kpo-sense"}, {"version", std::string(kVersion)}, {"command", command},
           {"config_hash", prov.config_hash}, {"seed", prov.seed}};
    if (!prov.timestamp.empty()) j["generated"] = prov.timestamp;
    return j;
  }
};

Context load_context(const CommonFlags& flags, const std::string& command) {
  json root = json::object();
  if (!flags.config_path.empty()) {
    std::ifstream in = open_input(flags.config_path);
    try {
      root = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
  }
  Context ctx;
  ctx.cfg = cli::parse_config(root);
  if (flags.seed) ctx.cfg.seed = *flags.seed;
  if (flags.workers) ctx.cfg.workers = *flags.workers;
  if (flags.points) ctx.cfg.scan.points = *flags.points;
  ctx.cfg.validate();
  ctx.command = command;
  ctx.out = flags.out_dir;
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (ec || !fs::is_directory(ctx.out)) throw IoError("cannot create output directory " + flags.out_dir);
  ctx.prov.config_hash = cli::config_hash(ctx.cfg);
  ctx.prov.seed = ctx.cfg.seed;
  if (!flags.deterministic) ctx.prov.timestamp = utc_timestamp();
  return ctx;
}

std::string indexed(const std::string& stem, std::size_t i, const std::string& ext = ".csv") {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03zu", i);
  return stem + "_" + buf + ext;
}

/// Long-format table (t, traj, omega_est) of an ensemble at the given times.
void write_samples_csv(std::ostream& os, const std::vector<EnsembleSnapshot>& snaps, const Provenance& prov) {
  prov.write(os);
  os << "t,traj,omega_est\n";
  for (const auto& s : snaps) {
    for (std::size_t i = 0; i < s.samples.size(); ++i) {
      os << format_double(s.t) << ',' << i << ',' << format_double(s.samples[i]) << '\n';
    }
  }
}

/// Samples grouped by time, read back from a table with an omega_est column
/// and an optional t column.
std::vector<EnsembleSnapshot> read_samples_csv(const std::string& path) {
  std::ifstream in = open_input(path);
  std::string line;
  int t_col = -1, w_col = -1;
  std::size_t ncols = 0;
  std::map<double, EnsembleSnapshot> groups;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cols = split_csv(line);
    if (w_col < 0) {
      for (std::size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] == "t") t_col = static_cast<int>(i);
        if (cols[i] == "omega_est") w_col = static_cast<int>(i);
      }
      if (w_col < 0) throw IoError(path + ": no omega_est column in header");
      ncols = cols.size();
      continue;
    }
    if (cols.size() != ncols) throw IoError(path + ": ragged row '" + line + "'");
    const double t = t_col >= 0 ? parse_double(cols[static_cast<std::size_t>(t_col)]) : 0.0;
    auto& g = groups[t];
    g.t = t;
    g.samples.push_back(parse_double(cols[static_cast<std::size_t>(w_col)]));
  }
  if (w_col < 0) throw IoError(path + ": empty samples file");
  std::vector<EnsembleSnapshot> out;
  for (auto& [_, g] : groups) out.push_back(std::move(g));
  return out;
}

/// Wide table: t, then one estimate column per run.
void write_curves_csv(std::ostream& os, const std::vector<double>& times, const std::vector<std::string>& names,
                      const std::vector<std::vector<double>>& curves, const Provenance& prov) {
  prov.write(os);
  os << 't';
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t k = 0; k < times.size(); ++k) {
    os << format_double(times[k]);
    for (const auto& c : curves) os << ',' << format_double(c[k]);
    os << '\n';
  }
}

struct CurvesTable {
  std::vector<double> times;
  std::vector<std::vector<double>> runs;
};

CurvesTable read_curves_csv(const std::string& path) {
  std::ifstream in = open_input(path);
  std::string line;
  CurvesTable tab;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cols = split_csv(line);
    if (header) {
      if (cols.empty() || cols[0] != "t") throw IoError(path + ": first column must be t");
      tab.runs.resize(cols.size() - 1);
      header = false;
      continue;
    }
    if (cols.size() != tab.runs.size() + 1) throw IoError(path + ": ragged row '" + line + "'");
    tab.times.push_back(parse_double(cols[0]));
    for (std::size_t r = 0; r < tab.runs.size(); ++r) tab.runs[r].push_back(parse_double(cols[r + 1]));
  }
  if (header) throw IoError(path + ": empty curves file");
  return tab;
}

// --- subcommands --------------------------------------------------------------

int cmd_trajectory(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const OscillatorParams p = cfg.params();
  const EkfConfig ekf = cfg.ekf_config();
  const ModelContext mctx = ModelContext::from(p);
  SimulationOptions so;
  so.refinement = cfg.simulation.refinement;
  for (int k = 0; k < cfg.simulation.trajectories; ++k) {
    const auto i = static_cast<std::size_t>(k);
    NoiseStream noise(cfg.seed, i);
    const TruthRun run = simulate_truth(p, GaussianState::vacuum(), cfg.filter.dt, cfg.simulation.duration, noise, so);
    const EkfTrajectory tr = run_ekf(run.record, ekf, mctx);
    const Provenance prov = ctx.provenance({"trajectory: " + std::to_string(k)});
    {
      auto os = ctx.open(indexed("truth", i));
      write_truth_csv(os, run.trajectory, &prov);
    }
    {
      auto os = ctx.open(indexed("photocurrent", i));
      write_record_csv(os, run.record, &prov);
    }
    if (cfg.simulation.binary_record) {
      auto os = ctx.open(indexed("photocurrent", i, ".bin"), std::ios::out | std::ios::binary);
      write_record_binary(os, run.record);
    }
    {
      auto os = ctx.open(indexed("ekf", i));
      write_ekf_csv(os, tr, &prov, cfg.filter.full_states);
    }
    {
      auto os = ctx.open(indexed("restarts", i));
      write_restart_log_csv(os, tr, &prov);
    }
  }
  return kOk;
}

void emit_fits(const Context& ctx, const std::vector<EnsembleSnapshot>& snaps, bool with_tail) {
  const auto opt = ctx.cfg.fit_options();
  std::vector<FitRow> rows;
  std::vector<std::string> failures;
  for (std::size_t k = 0; k < snaps.size(); ++k) {
    const Histogram h = make_histogram(snaps[k], opt.histogram);
    {
      auto os = ctx.open(indexed("histogram", k));
      const Provenance prov = ctx.provenance({"t: " + format_double(snaps[k].t)});
      write_histogram_csv(os, h, &prov);
    }
    try {
      rows.push_back({snaps[k].t, estimate_from_snapshot(snaps[k], opt)});
    } catch (const ConfigError& e) {
      failures.push_back("t=" + format_double(snaps[k].t) + ": " + e.what());
    }
  }
  {
    auto os = ctx.open("fits.csv");
    const Provenance prov = ctx.provenance(failures);
    write_fits_csv(os, rows, &prov);
  }
  if (with_tail) {
    auto os = ctx.open("tail.csv");
    ctx.provenance().write(os);
    os << "t,threshold,fraction\n";
    for (const auto& s : snaps) {
      os << format_double(s.t) << ',' << format_double(ctx.cfg.ensemble.tail_threshold) << ','
         << format_double(tail_fraction(s, ctx.cfg.ensemble.tail_threshold)) << '\n';
    }
  }
}

int cmd_ensemble(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  EnsembleOptions eo;
  eo.n_traj = cfg.ensemble.n_traj;
  eo.duration = cfg.simulation.duration;
  eo.base_seed = cfg.seed;
  eo.refinement = cfg.simulation.refinement;
  eo.workers = cfg.workers;
  const auto ens = run_ensemble(cfg.params(), cfg.ekf_config(), eo);
  std::vector<double> times = cfg.ensemble.times;
  if (times.empty()) times.push_back(cfg.simulation.duration);
  std::vector<EnsembleSnapshot> snaps;
  for (double t : times) snaps.push_back(snapshot(ens, t));
  {
    auto os = ctx.open("samples.csv");
    write_samples_csv(os, snaps, ctx.provenance());
  }
  emit_fits(ctx, snaps, true);
  return kOk;
}

int cmd_kf_scan(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const OscillatorParams p = cfg.params();
  const KfScan scan = scan_growth_rate(p, cfg.scan.points);
  const PhaseOptimum opt = optimal_phase(p.omega, p.epsilon, p.eta, p.kappa);
  {
    auto os = ctx.open("kf_scan.csv");
    const Provenance prov = ctx.provenance();
    write_kf_scan_csv(os, scan, &opt, &prov);
  }
  if (cfg.scan.cfi.n_traj > 0) {
    std::vector<double> grid;
    for (int k = 0; k * cfg.scan.cfi.spacing <= cfg.scan.cfi.t_max + 1e-12; ++k) grid.push_back(k * cfg.scan.cfi.spacing);
    SensitivityMcOptions mo;
    mo.dt = cfg.scan.cfi.dt;
    mo.workers = cfg.workers;
    const CfiCurve curve = cfi_time(p, grid, cfg.scan.cfi.n_traj, cfg.seed, mo);
    auto os = ctx.open("cfi.csv");
    ctx.provenance({"phi: " + format_double(p.phi), "k_F: " + format_double(growth_rate_kf(p))}).write(os);
    os << "t,F,std_err\n";
    for (std::size_t k = 0; k < curve.times.size(); ++k) {
      os << format_double(curve.times[k]) << ',' << format_double(curve.values[k]) << ','
         << format_double(curve.std_err[k]) << '\n';
    }
  }
  return kOk;
}

int cmd_phi_opt(const Context& ctx) {
  const auto& o = ctx.cfg.oscillator;
  const PhaseOptimum opt = optimal_phase(o.omega, o.epsilon, o.eta, o.kappa);
  auto os = ctx.open("phi_opt.csv");
  ctx.provenance().write(os);
  os << "omega,epsilon,eta,kappa,phi_opt,k_F,flat\n";
  os << format_double(o.omega) << ',' << format_double(o.epsilon) << ',' << format_double(o.eta) << ','
     << format_double(o.kappa) << ',' << format_double(opt.phi) << ',' << format_double(opt.k_f) << ','
     << (opt.flat ? 1 : 0) << '\n';
  return kOk;
}

json iteration_json(const IterationRecord& rec) {
  json j{{"index", rec.index},
         {"epsilon", rec.controls.epsilon},
         {"phi", rec.controls.phi},
         {"clamped", rec.controls.clamped},
         {"flat_phase", rec.controls.flat_phase},
         {"normal_phase", rec.normal_phase},
         {"failed", rec.failed}};
  if (rec.failed) j["failure"] = rec.failure;
  if (!rec.failed) {
    j["omega_est"] = rec.omega_est;
    j["fit"] = {{"mode", rec.fit.mode},
                {"amplitude", rec.fit.shape.amplitude},
                {"mu", rec.fit.shape.mu},
                {"sigma", rec.fit.shape.sigma},
                {"alpha", rec.fit.shape.alpha},
                {"converged", rec.fit.converged},
                {"residual", rec.fit.residual}};
    j["summary"] = {{"mean", rec.summary.mean},   {"std", rec.summary.std}, {"median", rec.summary.median},
                    {"iqr", rec.summary.iqr},     {"min", rec.summary.min}, {"max", rec.summary.max},
                    {"skewness", rec.summary.skewness}};
  }
  j["restarts"] = {{"threshold", rec.restarts_threshold}, {"nonfinite", rec.restarts_nonfinite}};
  // JSON has no NaN; failed curve points become null
  json est = json::array();
  for (double x : rec.curve_estimates) est.push_back(std::isfinite(x) ? json(x) : json(nullptr));
  j["curve"] = {{"t", rec.curve_times}, {"omega_est", est}};
  return j;
}

void write_statistics(const Context& ctx, const std::vector<IterationStatistics>& stats, const std::string& stem) {
  for (const auto& st : stats) {
    auto os = ctx.open(indexed(stem, static_cast<std::size_t>(st.index)));
    const Provenance prov =
        ctx.provenance({"iteration: " + std::to_string(st.index), "runs: " + std::to_string(st.runs)});
    write_statistics_csv(os, st.times, st.stats, &prov);
  }
}

int cmd_protocol(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const ProtocolConfig pc = cfg.protocol_config();
  const double omega_true = cfg.oscillator.omega;
  json doc{{"provenance", ctx.provenance_json()}, {"config", cli::to_json(cfg)}, {"omega_true", omega_true}};

  auto write_doc = [&] {
    auto os = ctx.open("protocol.json");
    os << doc.dump(2) << '\n';
  };
  if (cfg.protocol.repeats == 0) {
    write_doc();
    return kOk;
  }

  std::vector<std::string> failures;
  auto note_failures = [&](const ProtocolResult& res, int run) {
    for (const auto& rec : res.iterations) {
      if (rec.failed) {
        failures.push_back("run " + std::to_string(run) + " iteration " + std::to_string(rec.index) + ": " +
                           rec.failure);
      }
    }
  };
  auto ensemble_sink = [&](int run) {
    return [&ctx, run](const IterationRecord& rec, const std::vector<EkfTrajectory>& ens) {
      if (ens.empty()) return;
      std::vector<EnsembleSnapshot> snaps;
      for (double t : rec.curve_times) snaps.push_back(snapshot(ens, t));
      auto os = ctx.open("ensemble_r" + std::to_string(run) + "_i" + std::to_string(rec.index) + ".csv");
      write_samples_csv(os, snaps,
                        ctx.provenance({"run: " + std::to_string(run), "iteration: " + std::to_string(rec.index),
                                        "epsilon: " + format_double(rec.controls.epsilon),
                                        "phi: " + format_double(rec.controls.phi)}));
    };
  };

  if (cfg.protocol.bootstrap.pool > 0) {
    const BootstrapResult b =
        run_protocol_bootstrap(pc, omega_true, cfg.protocol.bootstrap.pool, cfg.protocol.bootstrap.resamples);
    json it = json::array();
    for (const auto& rec : b.pooled.iterations) it.push_back(iteration_json(rec));
    doc["bootstrap"] = {{"pool", cfg.protocol.bootstrap.pool},
                        {"resamples", cfg.protocol.bootstrap.resamples},
                        {"halted", b.pooled.halted},
                        {"iterations", it}};
    note_failures(b.pooled, 0);
    write_statistics(ctx, b.statistics, "statistics_bootstrap");
  } else {
    std::vector<ProtocolResult> runs;
    json jruns = json::array();
    for (int r = 0; r < cfg.protocol.repeats; ++r) {
      ProtocolConfig c = pc;
      c.base_seed = repeat_seed(pc.base_seed, r);
      runs.push_back(run_protocol(c, omega_true, ensemble_sink(r)));
      json it = json::array();
      for (const auto& rec : runs.back().iterations) it.push_back(iteration_json(rec));
      jruns.push_back({{"run", r}, {"seed", c.base_seed}, {"halted", runs.back().halted}, {"iterations", it}});
      note_failures(runs.back(), r);
    }
    doc["runs"] = jruns;
    // per-iteration curves of every run that reached the iteration usably
    for (int i = 0; i < pc.n_iterations; ++i) {
      std::vector<std::string> names;
      std::vector<std::vector<double>> curves;
      std::vector<double> times;
      for (std::size_t r = 0; r < runs.size(); ++r) {
        if (runs[r].usable_iterations() <= static_cast<std::size_t>(i)) continue;
        const auto& rec = runs[r].iterations[static_cast<std::size_t>(i)];
        times = rec.curve_times;
        names.push_back("run" + std::to_string(r));
        curves.push_back(rec.curve_estimates);
      }
      if (curves.empty()) break;
      auto os = ctx.open(indexed("curves", static_cast<std::size_t>(i)));
      write_curves_csv(os, times, names, curves, ctx.provenance({"iteration: " + std::to_string(i)}));
    }
    if (runs.size() >= 2) write_statistics(ctx, protocol_statistics(runs, omega_true), "statistics");
  }
  write_doc();
  if (!failures.empty()) {
    auto os = ctx.open("FAILED");
    ctx.provenance().write(os);
    for (const auto& f : failures) os << f << '\n';
    std::cerr << "kpo-sense: " << failures.size() << " protocol iteration(s) failed; see FAILED\n";
  }
  return kOk;
}

int cmd_stats(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  if (cfg.stats.input.empty()) throw ConfigError("stats.input must name a curves CSV");
  const CurvesTable tab = read_curves_csv(cfg.stats.input);
  const double omega_true = cfg.stats.omega_true.value_or(cfg.oscillator.omega);
  const EstimatorStatistics st = estimator_statistics(tab.runs, omega_true);
  auto os = ctx.open("statistics.csv");
  const Provenance prov =
      ctx.provenance({"input: " + cfg.stats.input, "runs: " + std::to_string(tab.runs.size())});
  write_statistics_csv(os, tab.times, st, &prov);
  return kOk;
}

int cmd_fit(const Context& ctx) {
  if (ctx.cfg.fit.input.empty()) throw ConfigError("fit.input must name a samples CSV");
  emit_fits(ctx, read_samples_csv(ctx.cfg.fit.input), false);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency estimation with a parametrically driven oscillator under homodyne detection"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  CommonFlags flags;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Context&);
  };
  const Command commands[] = {
      {"trajectory", "simulate truth, photocurrent and one filter run per trajectory", cmd_trajectory},
      {"ensemble", "filter an ensemble and fit the estimate distribution", cmd_ensemble},
      {"kf-scan", "long-time Fisher growth rate over the homodyne phase", cmd_kf_scan},
      {"phi-opt", "optimal homodyne phase for the configured oscillator", cmd_phi_opt},
      {"protocol", "iterative sensing protocol, optionally repeated", cmd_protocol},
      {"stats", "mean, std and MSE of estimate curves", cmd_stats},
      {"fit", "skew-normal fits of a samples table", cmd_fit},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", flags.config_path, "JSON configuration file");
    sub->add_option("--out", flags.out_dir, "output directory (created if missing)");
    sub->add_option("--seed", flags.seed, "base seed, overrides the config");
    sub->add_option("--workers", flags.workers, "parallel trajectory pipelines (0: all cores)");
    sub->add_flag("--deterministic", flags.deterministic, "omit timestamps from output headers");
    if (std::string(c.name) == "kf-scan") sub->add_option("--points", flags.points, "phase grid resolution");
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  for (const auto& [sub, cmd] : subs) {
    if (!sub->parsed()) continue;
    try {
      const Context ctx = load_context(flags, cmd->name);
      return cmd->run(ctx);
    } catch (const ConfigError& e) {
      std::cerr << "kpo-sense: configuration error: " << e.what() << '\n';
      return kConfig;
    } catch (const IoError& e) {
      std::cerr << "kpo-sense: I/O error: " << e.what() << '\n';
      return kIo;
    } catch (const NumericError& e) {
      std::cerr << "kpo-sense: numeric failure: " << e.what() << '\n';
      return kNumeric;
    } catch (const std::exception& e) {
      std::cerr << "kpo-sense: " << e.what() << '\n';
      return kNumeric;
    }
  }
  return kOk;
}
