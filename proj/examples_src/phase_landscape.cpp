// Long-time Fisher information rate over the homodyne phase at a chosen
// operating point, plus the refined optimum.
//
//   example_phase_landscape [omega] [epsilon] [eta]

#include <cstdio>
#include <cstdlib>

#include "kpo/fisher.hpp"

int main(int argc, char** argv) {
  const double omega = argc > 1 ? std::atof(argv[1]) : 1.0;
  const double epsilon = argc > 2 ? std::atof(argv[2]) : 1.0;
  const double eta = argc > 3 ? std::atof(argv[3]) : 1.0;
  try {
    const auto p = kpo::OscillatorParams::make(omega, epsilon, eta, 0.0);
    const auto scan = kpo::scan_growth_rate(p, 32);
    double peak = 0.0;
    for (double r : scan.rates) peak = std::max(peak, r);
    for (std::size_t i = 0; i < scan.phases.size(); ++i) {
      const int bar = peak > 0 ? static_cast<int>(50.0 * scan.rates[i] / peak) : 0;
      std::printf("%6.3f %10.4g %.*s\n", scan.phases[i], scan.rates[i], bar,
                  "##################################################");
    }
    const auto opt = kpo::optimal_phase(omega, epsilon, eta);
    if (opt.flat) {
      std::printf("flat landscape (no information at this operating point)\n");
    } else {
      std::printf("phi_opt = %.4f, k_F = %.6g\n", opt.phi, opt.k_f);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
  return 0;
}
