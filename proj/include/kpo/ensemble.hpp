#pragma once

// Trajectory pipelines: for each stream index, synthesize a photocurrent from
// the truth model and run the filter on it. Streams are independent and the
// output is indexed by stream, so results do not depend on the worker count.

#include <cstdint>
#include <vector>

#include "kpo/ekf.hpp"
#include "kpo/parallel.hpp"
#include "kpo/sde_sim.hpp"

namespace kpo {

struct EnsembleOptions {
  int n_traj = 200;
  double duration = 100.0;
  std::uint64_t base_seed = 1;
  /// Offset added to the trajectory index when forming the stream index.
  std::uint64_t stream_offset = 0;
  int refinement = 1;
  int workers = 0;
};

inline std::vector<EkfTrajectory> run_ensemble(const OscillatorParams& truth, const EkfConfig& config,
                                               const EnsembleOptions& opt) {
  if (opt.n_traj < 0) throw ConfigError("n_traj must be nonnegative");
  config.validate();
  const ModelContext ctx = ModelContext::from(truth);
  std::vector<EkfTrajectory> out(static_cast<std::size_t>(opt.n_traj));
  parallel_for(out.size(), opt.workers, [&](std::size_t i) {
    NoiseStream noise(opt.base_seed, opt.stream_offset + i);
    const PhotocurrentRecord rec = simulate_record(truth, config.dt, opt.duration, noise, opt.refinement);
    out[i] = run_ekf(rec, config, ctx);
  });
  return out;
}

}  // namespace kpo
