#pragma once

// Loss terms. Value-level functions work on plain trajectories; the *_op
// variants record the same formulas on an autodiff tape.

#include <cmath>
#include <numbers>
#include <span>

#include <json.hpp>

#include "miat/autodiff.hpp"
#include "miat/types.hpp"

namespace miat {

struct LossConfig {
  double lambda = 1.0;    // maneuver-loss weight
  int warmup_epochs = 5;  // epochs trained with MSE before switching to NLL

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("loss config: lambda must be >= 0");
    if (warmup_epochs < 0) throw ValidationError("loss config: warmup_epochs must be >= 0");
  }

  bool use_nll(int epoch) const { return epoch >= warmup_epochs; }

  nlohmann::json to_json() const { return {{"lambda", lambda}, {"warmup_epochs", warmup_epochs}}; }
  static LossConfig from_json(const nlohmann::json& j) {
    LossConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    return c;
  }
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean over steps of the squared Euclidean error. Spans hold F x 2 rows.
inline double mse_loss(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.size() % 2 != 0 || pred.empty()) {
    throw ValidationError("mse_loss: prediction and truth lengths differ");
  }
  double sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return sum / static_cast<double>(pred.size() / 2);
}

inline double mse_loss(const GaussianTrajectory& g, std::span<const float> truth) {
  std::vector<double> p, t(truth.begin(), truth.end());
  for (std::size_t k = 0; k < g.size(); ++k) {
    p.push_back(g.mu_x[k]);
    p.push_back(g.mu_y[k]);
  }
  return mse_loss(p, t);
}

/// Mean negative log-likelihood under independent per-axis Gaussians.
inline double nll_loss(const GaussianTrajectory& g, std::span<const float> truth) {
  if (truth.size() != 2 * g.size() || g.size() == 0) throw ValidationError("nll_loss: prediction and truth lengths differ");
  double sum = 0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double sx = g.sigma_x[k], sy = g.sigma_y[k];
    if (!(sx > 0) || !(sy > 0)) throw ValidationError("nll_loss: sigma must be positive");
    const double dx = (truth[2 * k] - g.mu_x[k]) / sx;
    const double dy = (truth[2 * k + 1] - g.mu_y[k]) / sy;
    sum += std::log(2 * std::numbers::pi * sx * sy) + 0.5 * (dx * dx + dy * dy);
  }
  return sum / static_cast<double>(g.size());
}

inline double maneuver_ce(const ManeuverDistribution& d, const ManeuverLabel& label) {
  const double pl = std::max(d.p_lateral[static_cast<int>(label.lateral)], kProbabilityFloor);
  const double po = std::max(d.p_longitudinal[static_cast<int>(label.longitudinal)], kProbabilityFloor);
  return -std::log(pl) - std::log(po);
}

inline double combined_loss(double l_traj, double l_man, const LossConfig& cfg) { return l_traj + cfg.lambda * l_man; }

/// MSE during warmup, NLL afterwards; always on the ground-truth mode.
inline double trajectory_loss_for_epoch(int epoch, const LossConfig& cfg, const PredictionOutput& out,
                                        std::span<const float> truth, const ManeuverLabel& label) {
  if (epoch < 0) throw ValidationError("epoch must be >= 0");
  const auto& g = out.modes[static_cast<std::size_t>(mode_index(label))];
  return cfg.use_nll(epoch) ? nll_loss(g, truth) : mse_loss(g, truth);
}

// ---------------------------------------------------------------------------
// Tape versions

namespace ad {

/// Mean squared Euclidean error of an F x 2 mean against a constant target.
template <class S>
Var<S> mse_op(const Var<S>& mean, const Matrix<S>& truth) {
  detail::require(mean.rows() == truth.rows() && mean.cols() == 2 && truth.cols() == 2, "mse_op: shape mismatch");
  const S n = static_cast<S>(truth.rows());
  Matrix<S> diff = mean.value() - truth;
  Matrix<S> out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return mean.tape()->record(std::move(out), {mean}, [mean, n, diff = std::move(diff)](Tape<S>& tp) {
    tp.grad(mean) += (S(2) * tp.upstream()(0, 0) / n) * diff;
  });
}

/// Mean Gaussian negative log-likelihood with per-axis sigma.
template <class S>
Var<S> nll_op(const Var<S>& mean, const Var<S>& sigma, const Matrix<S>& truth) {
  detail::require(mean.rows() == truth.rows() && mean.cols() == 2 && truth.cols() == 2 &&
                      sigma.rows() == mean.rows() && sigma.cols() == 2,
                  "nll_op: shape mismatch");
  const S n = static_cast<S>(truth.rows());
  const auto& mu = mean.value();
  const auto& sg = sigma.value();
  S sum = 0;
  for (Eigen::Index r = 0; r < mu.rows(); ++r) {
    const S dx = (truth(r, 0) - mu(r, 0)) / sg(r, 0);
    const S dy = (truth(r, 1) - mu(r, 1)) / sg(r, 1);
    sum += std::log(S(2) * std::numbers::pi_v<S> * sg(r, 0) * sg(r, 1)) + S(0.5) * (dx * dx + dy * dy);
  }
  Matrix<S> out(1, 1);
  out(0, 0) = sum / n;
  return mean.tape()->record(std::move(out), {mean, sigma}, [mean, sigma, truth, n](Tape<S>& tp) {
    const S g = tp.upstream()(0, 0) / n;
    const auto& mu = mean.value();
    const auto& sg = sigma.value();
    const Matrix<S> d = truth - mu;
    if (tp.requires_grad(mean)) {
      tp.grad(mean).array() -= g * d.array() / sg.array().square();
    }
    if (tp.requires_grad(sigma)) {
      tp.grad(sigma).array() += g * (S(1) / sg.array() - d.array().square() / sg.array().cube());
    }
  });
}

/// -log(max(p[index], floor)) for a 1 x k probability row.
template <class S>
Var<S> nll_class_op(const Var<S>& probs, int index) {
  detail::require(probs.rows() == 1 && index >= 0 && index < probs.cols(), "nll_class_op: bad index");
  const S p = probs.value()(0, index);
  const S floor = static_cast<S>(kProbabilityFloor);
  Matrix<S> out(1, 1);
  out(0, 0) = -std::log(std::max(p, floor));
  return probs.tape()->record(std::move(out), {probs}, [probs, index, p, floor](Tape<S>& tp) {
    if (p > floor) tp.grad(probs)(0, index) -= tp.upstream()(0, 0) / p;
  });
}

}  // namespace ad

}  // namespace miat
