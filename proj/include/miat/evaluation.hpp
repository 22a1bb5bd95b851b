#pragma once

// Mode selection, per-horizon RMSE and maneuver accuracy over a sample set.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "miat/model.hpp"
#include "miat/parallel.hpp"
#include "miat/types.hpp"

namespace miat {

inline constexpr int kHorizons = 5;
inline constexpr std::array<int, kHorizons> kHorizonSeconds{1, 2, 3, 4, 5};
inline constexpr double kStepsPerSecond = 5.0;

/// Published NGSIM numbers in meters, printed next to local results.
inline constexpr std::array<double, kHorizons> kReferenceMiat200{0.44, 0.98, 1.58, 2.31, 3.26};
inline constexpr std::array<double, kHorizons> kReferenceVanilla{0.61, 1.31, 2.17, 3.23, 4.57};
/// Relative improvement of lambda = 200 over lambda = 1 at 3, 4 and 5 s.
inline constexpr std::array<double, 3> kReferenceDelta200{4.2, 8.3, 9.6};

/// Step index (1-based) of a horizon in seconds.
inline int horizon_step(int seconds) { return static_cast<int>(std::lround(seconds * kStepsPerSecond)); }

/// Mode with the highest joint probability p_lat[i] * p_lon[j]; the first
/// index wins ties.
inline int select_mode_index(const ManeuverDistribution& d) {
  int best = 0;
  double best_p = -1;
  for (int m = 0; m < kModes; ++m) {
    const auto l = mode_label(m);
    const double p = d.p_lateral[static_cast<int>(l.lateral)] * d.p_longitudinal[static_cast<int>(l.longitudinal)];
    if (p > best_p) {
      best_p = p;
      best = m;
    }
  }
  return best;
}

inline std::pair<int, const GaussianTrajectory*> select_mode(const PredictionOutput& out) {
  const int m = select_mode_index(out.maneuvers);
  return {m, &out.modes[static_cast<std::size_t>(m)]};
}

/// Root mean squared Euclidean error at 1-based step k across N samples.
/// `pred` and `truth` are N x F x 2, row-major.
inline double rmse_at_horizon(std::span<const double> pred, std::span<const double> truth, int F, int k) {
  if (pred.size() != truth.size()) throw ValidationError("rmse_at_horizon: prediction and truth sizes differ");
  if (F < 1 || pred.size() % (2 * static_cast<std::size_t>(F)) != 0) {
    throw ValidationError("rmse_at_horizon: size is not a multiple of F x 2");
  }
  if (pred.empty()) throw ValidationError("rmse_at_horizon: no samples");
  if (k < 1 || k > F) throw ValidationError("rmse_at_horizon: step out of range");
  const std::size_t n = pred.size() / (2 * static_cast<std::size_t>(F));
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t o = (i * static_cast<std::size_t>(F) + static_cast<std::size_t>(k - 1)) * 2;
    const double dx = pred[o] - truth[o];
    const double dy = pred[o + 1] - truth[o + 1];
    sum += dx * dx + dy * dy;
  }
  return std::sqrt(sum / static_cast<double>(n));
}

/// Variant that sums squared errors over steps 1..k inside the root.
inline double rmse_cumulative(std::span<const double> pred, std::span<const double> truth, int F, int k) {
  rmse_at_horizon(pred, truth, F, k);  // argument checks
  const std::size_t n = pred.size() / (2 * static_cast<std::size_t>(F));
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (int s = 0; s < k; ++s) {
      const std::size_t o = (i * static_cast<std::size_t>(F) + static_cast<std::size_t>(s)) * 2;
      const double dx = pred[o] - truth[o];
      const double dy = pred[o + 1] - truth[o + 1];
      sum += dx * dx + dy * dy;
    }
  }
  return std::sqrt(sum / static_cast<double>(n));
}

struct EvalOptions {
  int threads = 1;
  bool cumulative = false;
};

struct EvalResult {
  std::size_t samples = 0;
  std::array<double, kHorizons> rmse{};
  bool has_maneuvers = false;
  double accuracy_lateral = std::numeric_limits<double>::quiet_NaN();
  double accuracy_longitudinal = std::numeric_limits<double>::quiet_NaN();
  double accuracy_joint = std::numeric_limits<double>::quiet_NaN();
  bool cumulative = false;
};

/// Scores already-selected mean trajectories (N x F x 2) against the truths.
inline std::array<double, kHorizons> horizon_rmse(std::span<const double> pred, std::span<const double> truth, int F,
                                                  bool cumulative = false) {
  std::array<double, kHorizons> out{};
  for (int h = 0; h < kHorizons; ++h) {
    const int k = horizon_step(kHorizonSeconds[static_cast<std::size_t>(h)]);
    if (k > F) {
      out[static_cast<std::size_t>(h)] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    out[static_cast<std::size_t>(h)] = cumulative ? rmse_cumulative(pred, truth, F, k) : rmse_at_horizon(pred, truth, F, k);
  }
  return out;
}

/// Any per-sample predictor: fills an F x 2 mean and optionally a
/// maneuver distribution.
struct Prediction {
  std::vector<double> mean;  // F x 2
  std::optional<ManeuverDistribution> maneuvers;
};

template <class Predictor>
EvalResult evaluate_with(const std::vector<TrajectorySample>& samples, Predictor&& predict,
                         const EvalOptions& opt = {}) {
  if (samples.empty()) throw ValidationError("evaluate: empty sample set");
  const int F = samples.front().future_len;
  std::vector<Prediction> preds(samples.size());
  parallel_for(samples.size(), opt.threads, [&](std::size_t i) { preds[i] = predict(samples[i]); });
  std::vector<double> pred_flat, truth_flat;
  pred_flat.reserve(samples.size() * 2 * static_cast<std::size_t>(F));
  truth_flat.reserve(pred_flat.capacity());
  std::size_t lat_ok = 0, lon_ok = 0, joint_ok = 0, with_man = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.future_len != F || preds[i].mean.size() != 2 * static_cast<std::size_t>(F)) {
      throw ValidationError("evaluate: inconsistent future length");
    }
    pred_flat.insert(pred_flat.end(), preds[i].mean.begin(), preds[i].mean.end());
    truth_flat.insert(truth_flat.end(), s.future.begin(), s.future.end());
    if (preds[i].maneuvers) {
      ++with_man;
      const auto& d = *preds[i].maneuvers;
      const auto chosen = mode_label(select_mode_index(d));
      const bool la = chosen.lateral == s.label.lateral;
      const bool lo = chosen.longitudinal == s.label.longitudinal;
      lat_ok += la;
      lon_ok += lo;
      joint_ok += la && lo;
    }
  }
  EvalResult r;
  r.samples = samples.size();
  r.cumulative = opt.cumulative;
  r.rmse = horizon_rmse(pred_flat, truth_flat, F, opt.cumulative);
  if (with_man == samples.size()) {
    const double n = static_cast<double>(samples.size());
    r.has_maneuvers = true;
    r.accuracy_lateral = static_cast<double>(lat_ok) / n;
    r.accuracy_longitudinal = static_cast<double>(lon_ok) / n;
    r.accuracy_joint = static_cast<double>(joint_ok) / n;
  }
  return r;
}

/// Selected-mode prediction of a MIAT model or the single vanilla decode.
template <class S>
Prediction predict(const TrajectorySample& s, const ModelParameters<S>& params, const ModelConfig& cfg) {
  Prediction p;
  const GaussianTrajectory* g = nullptr;
  PredictionOutput out;
  GaussianTrajectory single;
  if (params.variant == ModelVariant::Miat) {
    out = forward(s, params, cfg);
    g = select_mode(out).second;
    p.maneuvers = out.maneuvers;
  } else {
    single = vanilla_forward(s, params, cfg);
    g = &single;
  }
  p.mean.resize(2 * g->size());
  for (std::size_t k = 0; k < g->size(); ++k) {
    p.mean[2 * k] = g->mu_x[k];
    p.mean[2 * k + 1] = g->mu_y[k];
  }
  return p;
}

template <class S>
EvalResult evaluate(const ModelParameters<S>& params, const std::vector<TrajectorySample>& samples,
                    const ModelConfig& cfg, const EvalOptions& opt = {}) {
  return evaluate_with(samples, [&](const TrajectorySample& s) { return predict(s, params, cfg); }, opt);
}

// ---------------------------------------------------------------------------
// Reports

/// Shortest decimal that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

inline nlohmann::json json_number(double v) {
  if (std::isnan(v) || std::isinf(v)) return nullptr;
  return v;
}

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json rmse = nlohmann::json::object();
  for (int h = 0; h < kHorizons; ++h) {
    rmse[std::to_string(kHorizonSeconds[static_cast<std::size_t>(h)]) + "s"] = json_number(r.rmse[static_cast<std::size_t>(h)]);
  }
  return {{"samples", r.samples},
          {"rmse_m", rmse},
          {"rmse_convention", r.cumulative ? "cumulative over steps 1..k" : "per-horizon"},
          {"maneuver_accuracy",
           {{"lateral", json_number(r.accuracy_lateral)},
            {"longitudinal", json_number(r.accuracy_longitudinal)},
            {"joint", json_number(r.accuracy_joint)}}}};
}

inline nlohmann::json reference_rows() {
  return {{"note", "published NGSIM results, not reproducible at desk scale; shown for comparison only"},
          {"miat_lambda200_rmse_m", kReferenceMiat200},
          {"vanilla_transformer_rmse_m", kReferenceVanilla},
          {"lambda200_vs_lambda1_improvement_pct_3s_4s_5s", kReferenceDelta200}};
}

inline std::string report_header(bool cumulative) {
  std::string s =
      "# RMSE convention: ";
  s += cumulative ? "cumulative (errors of steps 1..k summed inside one root)\n"
                  : "per-horizon (error at step k only); the cumulative form is available with eval.cumulative\n";
  s += "# Mode selection: argmax of p_lateral * p_longitudinal (no ground-truth label at test time)\n";
  return s;
}

inline std::string format_row(const std::string& name, const std::array<double, kHorizons>& v, int width = 18) {
  char buf[64];
  std::string line = name;
  if (static_cast<int>(line.size()) < width) line.resize(static_cast<std::size_t>(width), ' ');
  for (double x : v) {
    std::snprintf(buf, sizeof buf, "%8.3f", x);
    line += buf;
  }
  return line + "\n";
}

inline std::string text_report(const EvalResult& r, const std::string& name = "model") {
  std::ostringstream os;
  os << report_header(r.cumulative);
  os << format_row("RMSE (m)", {1, 2, 3, 4, 5}).replace(18, std::string::npos, "      1s      2s      3s      4s      5s\n");
  os << format_row(name, r.rmse);
  os << format_row("ref MIAT-200x", kReferenceMiat200);
  os << format_row("ref Vanilla TF", kReferenceVanilla);
  char buf[160];
  std::snprintf(buf, sizeof buf, "maneuver accuracy: lateral %s, longitudinal %s, joint %s (n = %zu)\n",
                format_double(r.accuracy_lateral).c_str(), format_double(r.accuracy_longitudinal).c_str(),
                format_double(r.accuracy_joint).c_str(), r.samples);
  os << buf;
  return os.str();
}

}  // namespace miat
