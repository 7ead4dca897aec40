// One filter run on a simulated photocurrent: omega=1 at eps=1, phi=0.1072,
// perfect detection, starting from the prior midpoint of [0.7, 2.3].
// Prints the estimate every 10 time units and lists filter restarts.
//
//   example_fig1_single_trajectory [seed] [duration]

#include <cstdio>
#include <cstdlib>

#include "kpo/ekf.hpp"
#include "kpo/sde_sim.hpp"

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
  const double duration = argc > 2 ? std::atof(argv[2]) : 300.0;

  const auto truth = kpo::OscillatorParams::make(1.0, 1.0, 1.0, 0.1072);
  const auto prior = kpo::PriorInterval::make(0.7, 2.3);
  kpo::EkfConfig cfg = kpo::EkfConfig::from_prior(prior, 1.0, 0.02);
  cfg.record_every = 500;  // every 10 time units

  kpo::NoiseStream noise(seed, 0);
  const auto record = kpo::simulate_record(truth, cfg.dt, duration, noise);
  const auto tr = kpo::run_ekf(record, cfg, kpo::ModelContext::from(truth));

  std::printf("%8s %12s\n", "t", "omega_est");
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    std::printf("%8.1f %12.6f%s\n", tr.times[k], tr.omega_estimates[k], tr.restart_flags[k] ? "  (restarted)" : "");
  }
  std::printf("%zu restart(s)", tr.restarts.size());
  for (const auto& r : tr.restarts) std::printf(" t=%.2f", r.t);
  std::printf("\n");
  return 0;
}
