#pragma once

#include <cmath>
#include <functional>

namespace kpo {

struct GoldenResult {
  double x = 0.0;
  double value = 0.0;
  int iterations = 0;
};

/// Golden-section maximization of a unimodal f on [a, b], stopping when the
/// bracket is narrower than tol.
template <typename F>
GoldenResult golden_section_maximize(F&& f, double a, double b, double tol, int max_iter = 200) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c);
  double fd = f(d);
  int it = 0;
  while (std::abs(b - a) > tol && it < max_iter) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
    ++it;
  }
  GoldenResult r;
  r.x = 0.5 * (a + b);
  r.value = f(r.x);
  r.iterations = it;
  if (fc > r.value) r = {c, fc, it};
  if (fd > r.value) r = {d, fd, it};
  return r;
}

}  // namespace kpo
