#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "kpo/linalg.hpp"
#include "kpo/sde_sim.hpp"

namespace {

using kpo::GaussianState;
using kpo::Mat2;
using kpo::NoiseStream;
using kpo::OscillatorParams;

TEST(StepTruth, VacuumHasNoSignalAndNoDiffusion) {
  const auto p = OscillatorParams::make(1.3, 0.4, 1, 0.9);
  const auto out = kpo::step_truth(GaussianState::vacuum(), p, 0.02, 0.37);
  EXPECT_EQ(out.state.r, kpo::Vec2::Zero());
  EXPECT_DOUBLE_EQ(out.delta_y, 0.37);
}

TEST(StepTruth, DriveCouplesQuadraturesAtFirstOrder) {
  const auto p = OscillatorParams::make(1, 1, 1, 0);
  const auto out = kpo::step_truth(GaussianState::vacuum(), p, 0.01, 0.0);
  EXPECT_NEAR(out.state.sigma(0, 1), -0.02, 1e-4);
  EXPECT_NEAR(out.state.sigma(0, 0), 1.0, 1e-3);
  EXPECT_NEAR(out.state.sigma(1, 1), 1.0, 1e-3);
  EXPECT_EQ(out.state.sigma(0, 1), out.state.sigma(1, 0));
}

TEST(StepTruth, UnmonitoredCovarianceFollowsLyapunovFlow) {
  const auto p = OscillatorParams::make(1, 0.8, 0, 0.3);
  GaussianState s;
  s.sigma << 1.4, 0.2, 0.2, 0.9;
  s.r << 0.3, -0.1;
  const auto out = kpo::step_truth(s, p, 0.02, 0.5);
  // eta = 0: the Riccati flow is linear, dsigma/dt = A sigma + sigma A^T + I,
  // so an RK4 step of it matches a fine Euler integration to O(dt^4).
  const Mat2 a = kpo::drift_matrix(p);
  Mat2 fine = s.sigma;
  for (int i = 0; i < 20000; ++i) fine += (a * fine + fine * a.transpose() + Mat2::Identity()) * (0.02 / 20000);
  EXPECT_LT((out.state.sigma - fine).cwiseAbs().maxCoeff(), 1e-7);
  // and the noise does not enter the mean
  EXPECT_LT((out.state.r - (s.r + a * s.r * 0.02)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SimulateTruth, StepCountFromDuration) {
  NoiseStream noise(1, 0);
  const auto run = kpo::simulate_truth(OscillatorParams::make(1, 1, 1, 0.1072), GaussianState::vacuum(), 0.02, 100.0,
                                       noise);
  EXPECT_EQ(run.record.size(), 5000u);
  EXPECT_EQ(run.trajectory.states.size(), 5001u);
  EXPECT_NEAR(run.record.duration(), 100.0, 1e-9);
  EXPECT_TRUE(run.trajectory.restart_free);
}

TEST(SimulateTruth, SameStreamGivesIdenticalRecord) {
  const auto p = OscillatorParams::make(1, 1, 1, 0.1072);
  NoiseStream a(42, 7), b(42, 7), c(42, 8);
  const auto ra = kpo::simulate_record(p, 0.02, 50.0, a);
  const auto rb = kpo::simulate_record(p, 0.02, 50.0, b);
  const auto rc = kpo::simulate_record(p, 0.02, 50.0, c);
  EXPECT_EQ(ra.increments, rb.increments);
  EXPECT_NE(ra.increments, rc.increments);
}

TEST(SimulateTruth, PhotocurrentHasZeroMean) {
  const auto p = OscillatorParams::make(1, 1, 1, 0.1072);
  const int n = 200;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    NoiseStream noise(99, static_cast<std::uint64_t>(i));
    const auto rec = kpo::simulate_record(p, 0.02, 100.0, noise);
    double m = 0.0;
    for (double dy : rec.increments) m += dy;
    m /= static_cast<double>(rec.size());
    sum += m;
    sum2 += m * m;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / (n - 1));
  EXPECT_LT(std::abs(mean), 3.0 * se);
}

TEST(SimulateTruth, UnmonitoredRecordIsWhiteNoise) {
  const auto p = OscillatorParams::make(1, 0.9, 0, 0.3);
  NoiseStream noise(5, 0);
  const auto rec = kpo::simulate_record(p, 0.02, 2000.0, noise);
  const double n = static_cast<double>(rec.size());
  double s2 = 0.0, s4 = 0.0;
  for (double dy : rec.increments) {
    const double z2 = dy * dy / rec.dt;
    s2 += z2;
    s4 += z2 * z2;
  }
  const double var = s2 / n;
  const double se = std::sqrt((s4 / n - var * var) / n);
  EXPECT_LT(std::abs(var - 1.0), 3.0 * se);
}

TEST(SimulateTruth, CovariancePositiveAlongLongRun) {
  const auto p = OscillatorParams::make(0.95, 1.05, 1, 2.0);
  NoiseStream noise(3, 0);
  const auto run = kpo::simulate_truth(p, GaussianState::vacuum(), 0.02, 2000.0, noise);
  ASSERT_EQ(run.trajectory.states.size(), 100001u);
  double worst = 1e300;
  for (const auto& s : run.trajectory.states) worst = std::min(worst, kpo::min_eigenvalue(s.sigma));
  EXPECT_GT(worst, 0.0);
}

TEST(SimulateTruth, CovarianceSettlesOnSteadyState) {
  const auto p = OscillatorParams::make(1, 1, 1, 0.1072);
  NoiseStream noise(3, 1);
  const auto run = kpo::simulate_truth(p, GaussianState::vacuum(), 0.02, 400.0, noise);
  const auto& st = run.trajectory.states;
  Mat2 avg = Mat2::Zero();
  const std::size_t half = st.size() / 2;
  for (std::size_t k = half; k < st.size(); ++k) avg += st[k].sigma;
  avg /= static_cast<double>(st.size() - half);
  EXPECT_LT((avg - kpo::steady_covariance(p)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SimulateTruth, StationaryMeanSpreadMatchesLinearSde) {
  // Once sigma has settled, r obeys dr = A r dt + g (sigma_ss - I) v dw, whose
  // stationary covariance C solves A C + C A^T + g^2 u u^T = 0.
  const auto p = OscillatorParams::make(1, 0.9, 1, 0.5);
  const Mat2 sss = kpo::steady_covariance(p);
  const kpo::Vec2 u = std::sqrt(0.5 * p.eta * p.kappa) * (sss - Mat2::Identity()) * kpo::homodyne_direction(p.phi);
  const Mat2 c = kpo::solve_lyapunov<2>(kpo::drift_matrix(p), u * u.transpose());

  const int n = 2000;
  const double dt = 0.005, t_end = 30.0;
  Mat2 m2 = Mat2::Zero();
  for (int i = 0; i < n; ++i) {
    NoiseStream noise(17, static_cast<std::uint64_t>(i));
    GaussianState s = GaussianState::vacuum();
    const auto steps = kpo::step_count(t_end, dt);
    for (std::size_t k = 0; k < steps; ++k) s = kpo::step_truth(s, p, dt, noise.increment(dt)).state;
    m2 += s.r * s.r.transpose();
  }
  m2 /= n;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const double se = std::sqrt((c(a, a) * c(b, b) + c(a, b) * c(a, b)) / n);
      EXPECT_LT(std::abs(m2(a, b) - c(a, b)), 3.0 * se) << a << "," << b;
    }
  }
}

TEST(SimulateTruth, DivergenceReportsStep) {
  const auto p = OscillatorParams::make(1, 1.5, 1, 0.0);
  NoiseStream noise(1, 0);
  kpo::SimulationOptions opt;
  opt.guard = 1e3;
  try {
    kpo::simulate_truth(p, GaussianState::vacuum(), 0.02, 500.0, noise, opt);
    FAIL() << "expected divergence";
  } catch (const kpo::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(SimulateTruth, RefinementAggregatesIncrements) {
  const auto p = OscillatorParams::make(1, 0.5, 1, 0.2);
  NoiseStream a(8, 0);
  const auto rec = kpo::simulate_record(p, 0.02, 10.0, a, 4);
  EXPECT_EQ(rec.size(), 500u);
  EXPECT_DOUBLE_EQ(rec.dt, 0.02);
  // with eta = 0 and refinement, each record increment is the sum of four
  // substep Wiener increments drawn in order
  const auto q = OscillatorParams::make(1, 0.5, 0, 0.2);
  NoiseStream b(8, 1), c(8, 1);
  const auto rq = kpo::simulate_record(q, 0.02, 1.0, b, 4);
  for (std::size_t k = 0; k < rq.size(); ++k) {
    double sum = 0.0;
    for (int j = 0; j < 4; ++j) sum += c.increment(0.005);
    EXPECT_NEAR(rq.increments[k], sum, 1e-15);
  }
}

TEST(RecordIo, BinaryRoundTripIsBitExact) {
  const auto p = OscillatorParams::make(1, 1, 0.2, 1.7353);
  NoiseStream noise(21, 3);
  const auto rec = kpo::simulate_record(p, 0.02, 20.0, noise);
  std::stringstream buf;
  kpo::write_record_binary(buf, rec);
  const auto back = kpo::read_record_binary(buf);
  EXPECT_EQ(back.dt, rec.dt);
  EXPECT_EQ(back.increments, rec.increments);
  EXPECT_EQ(back.params_tag.omega, p.omega);
  EXPECT_EQ(back.params_tag.phi, p.phi);
  EXPECT_EQ(back.params_tag.eta, p.eta);
}

TEST(RecordIo, CsvRoundTripIsExact) {
  const auto p = OscillatorParams::make(1, 1, 1, 0.1072);
  NoiseStream noise(21, 4);
  const auto rec = kpo::simulate_record(p, 0.02, 5.0, noise);
  std::stringstream buf;
  kpo::Provenance prov;
  prov.seed = 21;
  kpo::write_record_csv(buf, rec, &prov);
  const auto back = kpo::read_record_csv(buf);
  EXPECT_EQ(back.increments, rec.increments);
  EXPECT_EQ(back.dt, rec.dt);
  EXPECT_EQ(back.params_tag.epsilon, p.epsilon);
}

TEST(RecordIo, RejectsGarbage) {
  std::stringstream bad("not a record");
  EXPECT_THROW(kpo::read_record_binary(bad), kpo::IoError);
  std::stringstream truncated;
  truncated.write("KPOREC01", 8);
  EXPECT_THROW(kpo::read_record_binary(truncated), kpo::IoError);
  std::stringstream csv("step,t,delta_y\n0,0.02,1\n");
  EXPECT_THROW(kpo::read_record_csv(csv), kpo::IoError);
}

}  // namespace
