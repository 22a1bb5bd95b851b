#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "miat/training.hpp"

using namespace miat;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

GaussianTrajectory make_gaussian(std::initializer_list<std::array<double, 4>> rows) {
  GaussianTrajectory g;
  for (const auto& r : rows) {
    g.mu_x.push_back(r[0]);
    g.mu_y.push_back(r[1]);
    g.sigma_x.push_back(r[2]);
    g.sigma_y.push_back(r[3]);
  }
  return g;
}

// Density of a diagonal bivariate normal written out directly. Long double
// keeps far tails from underflowing.
long double density(double x, double y, double mx, double my, double sx, double sy) {
  const long double zx = (x - mx) / static_cast<long double>(sx), zy = (y - my) / static_cast<long double>(sy);
  return std::exp(-0.5L * (zx * zx + zy * zy)) / (2.0L * 3.14159265358979323846L * sx * sy);
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.ffn_dim = 32;
  c.mlp_hidden = 16;
  c.history_len = 6;
  c.future_len = 5;
  return c;
}

}  // namespace

TEST(Mse, Examples) {
  const std::vector<double> truth{1, 2, 3, 4};
  EXPECT_EQ(mse_loss(truth, truth), 0.0);
  EXPECT_DOUBLE_EQ(mse_loss(std::vector<double>{3, 4}, std::vector<double>{0, 0}), 25.0);
  EXPECT_DOUBLE_EQ(mse_loss(std::vector<double>{4, 6, 3, 4}, truth), 12.5);
}

TEST(Mse, LengthMismatchRejected) {
  EXPECT_THROW(mse_loss(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3, 4}), ValidationError);
  EXPECT_THROW(mse_loss(std::vector<double>{}, std::vector<double>{}), ValidationError);
  const auto g = make_gaussian({{0, 0, 1, 1}});
  EXPECT_THROW(mse_loss(g, std::vector<float>{0, 0, 0, 0}), ValidationError);
}

TEST(Nll, ClosedFormExamples) {
  const std::vector<float> truth{0, 0};
  EXPECT_NEAR(nll_loss(make_gaussian({{0, 0, 1, 1}}), truth), kLog2Pi, 1e-6);
  EXPECT_NEAR(nll_loss(make_gaussian({{1, 0, 1, 1}}), truth), kLog2Pi + 0.5, 1e-6);
  EXPECT_NEAR(nll_loss(make_gaussian({{0, 0, 2, 2}}), truth) - nll_loss(make_gaussian({{0, 0, 1, 1}}), truth),
              std::log(4.0), 1e-6);
}

TEST(Nll, MatchesDensityOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> pos(-20, 20), sig(0.05, 5);
  for (int i = 0; i < 1000; ++i) {
    const double mx = pos(rng), my = pos(rng), sx = sig(rng), sy = sig(rng);
    const float tx = static_cast<float>(mx + sig(rng) - 2.5), ty = static_cast<float>(my + sig(rng) - 2.5);
    const double want = static_cast<double>(-std::log(density(tx, ty, mx, my, sx, sy)));
    EXPECT_NEAR(nll_loss(make_gaussian({{mx, my, sx, sy}}), std::vector<float>{tx, ty}), want, 1e-6);
  }
}

TEST(Nll, AveragesOverSteps) {
  const auto g = make_gaussian({{0, 0, 1, 1}, {1, 0, 1, 1}});
  EXPECT_NEAR(nll_loss(g, std::vector<float>{0, 0, 0, 0}), kLog2Pi + 0.25, 1e-12);
}

TEST(Nll, MinimisedAtTheTruth) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pos(-5, 5), sig(0.1, 3);
  for (int i = 0; i < 200; ++i) {
    const float tx = static_cast<float>(pos(rng)), ty = static_cast<float>(pos(rng));
    const double sx = sig(rng), sy = sig(rng);
    const std::vector<float> truth{tx, ty};
    const double at = nll_loss(make_gaussian({{tx, ty, sx, sy}}), truth);
    for (double h : {1e-3, -1e-3}) {
      EXPECT_GT(nll_loss(make_gaussian({{tx + h, ty, sx, sy}}), truth), at);
      EXPECT_GT(nll_loss(make_gaussian({{tx, ty + h, sx, sy}}), truth), at);
    }
  }
}

TEST(Nll, NonPositiveSigmaRejected) {
  EXPECT_THROW(nll_loss(make_gaussian({{0, 0, 0, 1}}), std::vector<float>{0, 0}), ValidationError);
  EXPECT_THROW(nll_loss(make_gaussian({{0, 0, 1, -1}}), std::vector<float>{0, 0}), ValidationError);
}

TEST(ManeuverCe, Examples) {
  const ManeuverLabel label{Lateral::ChangeLeft, Longitudinal::Decelerate};
  ManeuverDistribution one_hot;
  one_hot.p_lateral = {0, 1, 0};
  one_hot.p_longitudinal = {0, 1, 0};
  ASSERT_EQ(static_cast<int>(label.lateral), 1);
  ASSERT_EQ(static_cast<int>(label.longitudinal), 1);
  EXPECT_EQ(maneuver_ce(one_hot, label), 0.0);
  EXPECT_NEAR(maneuver_ce(ManeuverDistribution{}, label), 2 * std::log(3.0), 1e-12);
  ManeuverDistribution half;
  half.p_lateral = {0.25, 0.5, 0.25};
  half.p_longitudinal = {0.5, 0.5, 0};
  EXPECT_NEAR(maneuver_ce(half, label), 2 * std::log(2.0), 1e-12);
}

TEST(ManeuverCe, ClampedAndNonNegative) {
  ManeuverDistribution wrong;
  wrong.p_lateral = {1, 0, 0};
  wrong.p_longitudinal = {1, 0, 0};
  const ManeuverLabel label{Lateral::ChangeRight, Longitudinal::Constant};
  EXPECT_NEAR(maneuver_ce(wrong, label), -2 * std::log(1e-12), 1e-9);
  std::mt19937_64 rng(3);
  std::gamma_distribution<double> g(1.0);
  for (int i = 0; i < 500; ++i) {
    ManeuverDistribution d;
    double a = 0, b = 0;
    for (int k = 0; k < 3; ++k) {
      d.p_lateral[k] = g(rng);
      d.p_longitudinal[k] = g(rng);
      a += d.p_lateral[k];
      b += d.p_longitudinal[k];
    }
    for (int k = 0; k < 3; ++k) {
      d.p_lateral[k] /= a;
      d.p_longitudinal[k] /= b;
    }
    EXPECT_GT(maneuver_ce(d, mode_label(i % kModes)), 0.0);
  }
}

TEST(CombinedLoss, Examples) {
  LossConfig c;
  c.lambda = 200;
  EXPECT_DOUBLE_EQ(combined_loss(1.0, 0.5, c), 101.0);
  c.lambda = 1;
  EXPECT_DOUBLE_EQ(combined_loss(1.0, 0.5, c), 1.5);
  for (double l : {0.0, 3.0, 1e6}) {
    c.lambda = l;
    EXPECT_EQ(combined_loss(2.75, 0.0, c), 2.75);
  }
}

TEST(LossConfig, Validation) {
  LossConfig c;
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ValidationError);
  c.lambda = std::nan("");
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.warmup_epochs = -1;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_EQ(LossConfig::from_json(LossConfig{}.to_json()).lambda, 1.0);
}

TEST(Schedule, WarmupIsExclusive) {
  PredictionOutput out;
  for (auto& g : out.modes) g = make_gaussian({{0, 0, 2, 2}});
  const ManeuverLabel label{Lateral::LaneKeep, Longitudinal::Accelerate};
  out.modes[static_cast<std::size_t>(mode_index(label))] = make_gaussian({{1, 0, 1, 1}});
  const std::vector<float> truth{0, 0};
  LossConfig c;
  c.warmup_epochs = 5;
  EXPECT_DOUBLE_EQ(trajectory_loss_for_epoch(0, c, out, truth, label), 1.0);
  EXPECT_DOUBLE_EQ(trajectory_loss_for_epoch(4, c, out, truth, label), 1.0);
  EXPECT_NEAR(trajectory_loss_for_epoch(5, c, out, truth, label), kLog2Pi + 0.5, 1e-12);
  c.warmup_epochs = 0;
  EXPECT_NEAR(trajectory_loss_for_epoch(0, c, out, truth, label), kLog2Pi + 0.5, 1e-12);
  EXPECT_THROW(trajectory_loss_for_epoch(-1, c, out, truth, label), ValidationError);
}

TEST(TapeLosses, MatchValueFunctions) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3, 3), s(0.2, 2);
  ad::Tape<double> tape;
  Matrix<double> mu(4, 2), sg(4, 2), truth(4, 2);
  GaussianTrajectory g;
  std::vector<float> tr;
  for (int r = 0; r < 4; ++r) {
    mu.row(r) << u(rng), u(rng);
    sg.row(r) << s(rng), s(rng);
    truth.row(r) << static_cast<float>(u(rng)), static_cast<float>(u(rng));
    g.mu_x.push_back(mu(r, 0));
    g.mu_y.push_back(mu(r, 1));
    g.sigma_x.push_back(sg(r, 0));
    g.sigma_y.push_back(sg(r, 1));
    tr.push_back(static_cast<float>(truth(r, 0)));
    tr.push_back(static_cast<float>(truth(r, 1)));
  }
  auto m = tape.constant(mu);
  auto sv = tape.constant(sg);
  EXPECT_NEAR(ad::nll_op(m, sv, truth).value()(0, 0), nll_loss(g, tr), 1e-12);
  EXPECT_NEAR(ad::mse_op(m, truth).value()(0, 0), mse_loss(g, tr), 1e-12);
  Matrix<double> p(1, 3);
  p << 0.2, 0.5, 0.3;
  EXPECT_NEAR(ad::nll_class_op(tape.constant(p), 1).value()(0, 0), -std::log(0.5), 1e-15);
}

TEST(Decomposition, CombinedGradientIsTheWeightedSum) {
  const auto c = small_config();
  const auto p = init_parameters<double>(c, 3);
  const auto s = gradient_check_sample(c, 5);
  for (double lambda : {0.0, 1.0, 50.0, 200.0}) {
    for (bool nll : {false, true}) {
      const auto r = loss_decomposition_check(p, c, s, lambda, nll);
      EXPECT_LT(r.max_error, 1e-10) << "lambda " << lambda << " worst " << r.worst_parameter;
      EXPECT_LT(r.lambda_derivative_error, 1e-10);
    }
  }
}

TEST(Decomposition, ManeuverTermIdenticalAcrossPhases) {
  const auto c = small_config();
  const auto p = init_parameters<double>(c, 3);
  const auto s = gradient_check_sample(c, 6);
  const auto mse = sample_loss(p, c, s, false, {1.0, 1.0});
  const auto nll = sample_loss(p, c, s, true, {1.0, 1.0});
  EXPECT_EQ(mse.maneuver, nll.maneuver);
  EXPECT_NE(mse.trajectory, nll.trajectory);
  // The tape loss equals the value-level loss on the ground-truth mode.
  const auto out = forward(s, p, c);
  LossConfig lc;
  lc.warmup_epochs = 1;
  EXPECT_NEAR(mse.trajectory, trajectory_loss_for_epoch(0, lc, out, s.future, s.label), 1e-9);
  EXPECT_NEAR(nll.trajectory, trajectory_loss_for_epoch(1, lc, out, s.future, s.label), 1e-9);
  EXPECT_NEAR(nll.maneuver, maneuver_ce(out.maneuvers, s.label), 1e-9);
}
