#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "kpo/core_dynamics.hpp"
#include "kpo/state_model.hpp"

namespace {

using kpo::FilterVector;
using kpo::Mat2;
using kpo::Mat6;
using kpo::ModelContext;

FilterVector vacuum(double omega) {
  FilterVector x;
  x << 0, 0, 1, 1, 0, omega;
  return x;
}

struct RandomPoints {
  std::mt19937_64 rng;
  explicit RandomPoints(std::uint64_t seed) : rng(seed) {}

  FilterVector state() {
    std::uniform_real_distribution<double> u(-2, 2), pos(0.2, 3);
    FilterVector x;
    x << u(rng), u(rng), pos(rng), pos(rng), 0.5 * u(rng), pos(rng);
    return x;
  }
  ModelContext context() {
    std::uniform_real_distribution<double> e(0, 1.5), eta(0, 1), phi(0, std::numbers::pi);
    return {e(rng), 1.0, eta(rng), phi(rng)};
  }
};

TEST(DriftF, VacuumReducesToDriveTerm) {
  const ModelContext ctx{0.8, 1.0, 0.6, 1.1};
  const FilterVector f = kpo::drift_F(vacuum(1.3), ctx);
  FilterVector expected;
  expected << 0, 0, 0, 0, -2 * 0.8, 0;
  EXPECT_LT((f - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(DriftF, LinearPartForDisplacedQuadrature) {
  const double omega = 1.7;
  FilterVector x = vacuum(omega);
  x(kpo::idx::X) = 1.0;
  const FilterVector f = kpo::drift_F(x, {1.0, 1.0, 1.0, 0.3});
  EXPECT_DOUBLE_EQ(f(0), -0.5);
  EXPECT_DOUBLE_EQ(f(1), -(omega + 1.0));
}

TEST(DriftF, FrequencyIsStatic) {
  RandomPoints gen(1);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(kpo::drift_F(gen.state(), gen.context())(5), 0.0);
}

TEST(DriftF, AgreesWithMomentEquations) {
  RandomPoints gen(2);
  for (int i = 0; i < 1000; ++i) {
    const FilterVector x = gen.state();
    const ModelContext ctx = gen.context();
    const auto p = ctx.with_omega(x(kpo::idx::W));
    const kpo::GaussianState g = kpo::unpack_state(x);
    const FilterVector f = kpo::drift_F(x, ctx);
    const kpo::Vec2 ar = kpo::drift_matrix(p) * g.r;
    const Mat2 rhs = kpo::covariance_rhs(p, g.sigma);
    const double scale = 1.0 + rhs.cwiseAbs().maxCoeff();
    EXPECT_NEAR(f(0), ar(0), 1e-12 * (1 + std::abs(ar(0))));
    EXPECT_NEAR(f(1), ar(1), 1e-12 * (1 + std::abs(ar(1))));
    EXPECT_NEAR(f(2), rhs(0, 0), 1e-12 * scale);
    EXPECT_NEAR(f(3), rhs(1, 1), 1e-12 * scale);
    EXPECT_NEAR(f(4), rhs(0, 1), 1e-12 * scale);
  }
}

TEST(DiffusionG, VanishesAtVacuumAndWithoutDetection) {
  EXPECT_EQ(kpo::diffusion_G(vacuum(1), {1, 1, 1, 0.4}), FilterVector::Zero());
  RandomPoints gen(3);
  for (int i = 0; i < 100; ++i) {
    ModelContext ctx = gen.context();
    ctx.eta = 0.0;
    EXPECT_EQ(kpo::diffusion_G(gen.state(), ctx), FilterVector::Zero());
  }
}

TEST(DiffusionG, SqueezedXQuadrature) {
  FilterVector x;
  x << 0.1, 0.2, 2, 1, 0, 1;
  const FilterVector g = kpo::diffusion_G(x, {0.5, 1, 1, 0});
  EXPECT_NEAR(g(0), std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(g(0), 0.7071, 1e-4);
  EXPECT_DOUBLE_EQ(g(1), 0.0);
  EXPECT_EQ(g.tail<4>(), Eigen::Vector4d::Zero());
}

TEST(ObservationH, Values) {
  const kpo::Row6 h = kpo::observation_H({0, 1, 1, 0});
  EXPECT_NEAR(h(0), 1.4142, 1e-4);
  EXPECT_EQ(h.tail<5>(), kpo::Row6::Zero().tail<5>());
  EXPECT_EQ(kpo::observation_H({0, 1, 0, 0.7}), kpo::Row6::Zero());
}

TEST(ObservationH, ProjectsOntoMeasuredQuadrature) {
  RandomPoints gen(4);
  for (int i = 0; i < 100; ++i) {
    const FilterVector x = gen.state();
    const ModelContext ctx = gen.context();
    const double expected = std::sqrt(2 * ctx.kappa * ctx.eta) *
                            (x(0) * std::cos(ctx.phi) + x(1) * std::sin(ctx.phi));
    EXPECT_NEAR(kpo::observation_H(ctx).dot(x), expected, 1e-14);
  }
}

// Central differences of drift_F, column by column.
Mat6 numeric_jacobian(const FilterVector& x, const ModelContext& ctx, double h = 1e-6) {
  Mat6 j;
  for (int c = 0; c < 6; ++c) {
    FilterVector xp = x, xm = x;
    xp(c) += h;
    xm(c) -= h;
    j.col(c) = (kpo::drift_F(xp, ctx) - kpo::drift_F(xm, ctx)) / (2 * h);
  }
  return j;
}

TEST(JacobianF, MatchesFiniteDifferences) {
  RandomPoints gen(5);
  for (int i = 0; i < 100; ++i) {
    const FilterVector x = gen.state();
    const ModelContext ctx = gen.context();
    const Mat6 exact = kpo::jacobian_F(x, ctx);
    const Mat6 fd = numeric_jacobian(x, ctx);
    for (int r = 0; r < 6; ++r) {
      for (int c = 0; c < 6; ++c) {
        EXPECT_LE(std::abs(exact(r, c) - fd(r, c)), 1e-5 * std::max(1.0, std::abs(exact(r, c))))
            << "entry (" << r << "," << c << ")";
      }
    }
  }
}

TEST(JacobianF, Structure) {
  RandomPoints gen(6);
  for (int i = 0; i < 100; ++i) {
    const FilterVector x = gen.state();
    const Mat6 j = kpo::jacobian_F(x, gen.context());
    EXPECT_EQ(j.row(5), kpo::Row6::Zero());
    EXPECT_EQ(j(2, 0), 0.0);
    EXPECT_EQ(j(2, 1), 0.0);
    EXPECT_EQ(j(3, 0), 0.0);
    EXPECT_EQ(j(3, 1), 0.0);
    EXPECT_EQ(j(0, 5), x(1));
    EXPECT_EQ(j(1, 5), -x(0));
  }
}

TEST(JacobianF, VacuumEntries) {
  const Mat6 j = kpo::jacobian_F(vacuum(1.2), {0.9, 1, 1, 0});
  EXPECT_DOUBLE_EQ(j(2, 2), -1.0);
  EXPECT_DOUBLE_EQ(j(4, 5), 0.0);
}

TEST(StateModel, FrozenCovarianceGivesLinearMeanSde) {
  const auto p = kpo::OscillatorParams::make(1, 1, 0.7, 0.1072);
  const Mat2 sss = kpo::steady_covariance(p);
  const ModelContext ctx = ModelContext::from(p);
  const kpo::Vec2 noise_col =
      std::sqrt(0.5 * p.eta * p.kappa) * (sss - Mat2::Identity()) * kpo::homodyne_direction(p.phi);
  RandomPoints gen(7);
  for (int i = 0; i < 50; ++i) {
    kpo::GaussianState g;
    g.r = gen.state().head<2>();
    g.sigma = sss;
    const FilterVector x = kpo::pack_state(g, p.omega);
    EXPECT_LT((kpo::drift_F(x, ctx).head<2>() - kpo::drift_matrix(p) * g.r).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((kpo::diffusion_G(x, ctx).head<2>() - noise_col).cwiseAbs().maxCoeff(), 1e-14);
    // and sigma sits at a stationary point of the covariance rows
    EXPECT_LT(kpo::drift_F(x, ctx).segment<3>(2).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(StateModel, PackUnpackRoundTrip) {
  kpo::GaussianState g;
  g.r << 0.3, -1.2;
  g.sigma << 2.0, 0.4, 0.4, 0.7;
  const FilterVector x = kpo::pack_state(g, 1.1);
  const auto back = kpo::unpack_state(x);
  EXPECT_EQ(back.r, g.r);
  EXPECT_EQ(back.sigma, g.sigma);
  EXPECT_EQ(x(kpo::idx::W), 1.1);
}

}  // namespace
