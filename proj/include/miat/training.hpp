#pragma once

// Optimization loop, per-sample loss graphs and the finite-difference
// gradient checker.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <type_traits>
#include <string>
#include <vector>

#include <json.hpp>

#include "miat/checkpoint.hpp"
#include "miat/evaluation.hpp"
#include "miat/model.hpp"
#include "miat/ngsim.hpp"
#include "miat/objectives.hpp"
#include "miat/parallel.hpp"
#include "miat/synthetic.hpp"

namespace miat {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 128;
  int epochs = 20;
  std::uint64_t seed = 1;
  double clip_norm = 10.0;  // global gradient norm; 0 disables
  std::string lr_schedule = "constant";  // or "cosine" (per-epoch decay to zero)
  int threads = 1;

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ValidationError("train config: " + what);
    };
    need(learning_rate > 0, "learning_rate must be > 0");
    need(batch_size >= 1, "batch_size must be >= 1");
    need(epochs >= 0, "epochs must be >= 0");
    need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must be in [0, 1)");
    need(epsilon > 0, "epsilon must be > 0");
    need(clip_norm >= 0, "clip_norm must be >= 0");
    need(lr_schedule == "constant" || lr_schedule == "cosine", "lr_schedule must be constant or cosine");
  }

  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate}, {"beta1", beta1},       {"beta2", beta2},
            {"epsilon", epsilon},             {"batch_size", batch_size}, {"epochs", epochs},
            {"seed", seed},                   {"clip_norm", clip_norm}, {"threads", threads},
            {"lr_schedule", lr_schedule}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.threads = j.value("threads", c.threads);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Per-sample loss

template <class S = double>
struct LossTerms {
  S total = 0;
  S trajectory = 0;
  S maneuver = 0;  // NaN for the vanilla variant
};

/// Weights of the two loss terms in the differentiated objective. A zero
/// weight drops the term from the graph entirely.
struct TermWeights {
  double trajectory = 1;
  double maneuver = 1;
};

/// Builds the training graph for one sample (decoding only the ground-truth
/// mode), returns the loss terms and, when `grads` is given, accumulates
/// `grad_scale` times the gradient of the weighted objective into it.
template <class S>
LossTerms<S> sample_loss(const ModelParameters<S>& params, const ModelConfig& cfg, const TrajectorySample& s, bool nll,
                      TermWeights w, std::type_identity_t<ModelParameters<S>>* grads = nullptr,
                      std::type_identity_t<S> grad_scale = S(1),
                      Dropout* dropout = nullptr, std::uint64_t* branches = nullptr) {
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg, grads, dropout);
  auto encoded = encode_scene_graph(g, s);
  std::optional<ad::Var<S>> man;
  ad::Var<S> query;
  if (params.variant == ModelVariant::Miat) {
    auto intent = intention_graph(g, ad::slice_rows(encoded, encoded.rows() - 1, 1));
    man = ad::add(ad::nll_class_op(intent.lateral, static_cast<int>(s.label.lateral)),
                  ad::nll_class_op(intent.longitudinal, static_cast<int>(s.label.longitudinal)));
    query = g.linear(params.mode_embed, g.constant(mode_one_hot<S>({mode_index(s.label)})));
  } else {
    query = g.leaf(params.base_query);
  }
  auto head = sample_head_graph(g, fuse_decode_graph(g, encoded, query), s, 1);
  Matrix<S> truth(s.future_len, 2);
  for (int k = 0; k < s.future_len; ++k) {
    truth(k, 0) = static_cast<S>(s.future_x(k));
    truth(k, 1) = static_cast<S>(s.future_y(k));
  }
  auto traj = nll ? ad::nll_op(head.mean, head.sigma, truth) : ad::mse_op(head.mean, truth);

  LossTerms<S> out;
  out.trajectory = traj.value()(0, 0);
  out.maneuver = man ? man->value()(0, 0) : std::numeric_limits<S>::quiet_NaN();
  out.total = static_cast<S>(w.trajectory) * out.trajectory + (man ? static_cast<S>(w.maneuver) * out.maneuver : S(0));
  if (branches) *branches = tape.branch_signature();
  if (grads) {
    std::optional<ad::Var<S>> objective;
    if (w.trajectory != 0) objective = ad::scale(traj, static_cast<S>(w.trajectory));
    if (man && w.maneuver != 0) {
      objective = objective ? ad::add_scaled(*objective, *man, static_cast<S>(w.maneuver))
                            : ad::scale(*man, static_cast<S>(w.maneuver));
    }
    if (objective) tape.backward(*objective, grad_scale);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

template <class S>
OptimizerState<S> make_optimizer_state(const ModelParameters<S>& params) {
  OptimizerState<S> st;
  st.m = params.zeros_like();
  st.v = params.zeros_like();
  return st;
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
template <class S>
double clip_global_norm(ModelParameters<S>& grads, double max_norm) {
  double sq = 0;
  for (const auto& e : grads.entries()) {
    for (Eigen::Index i = 0; i < e.tensor->size(); ++i) {
      const double v = static_cast<double>(e.tensor->data()[i]);
      sq += v * v;
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S f = static_cast<S>(max_norm / norm);
    for (auto& e : grads.entries()) *e.tensor *= f;
  }
  return norm;
}

template <class S>
void adam_step(ModelParameters<S>& params, const ModelParameters<S>& grads, OptimizerState<S>& st,
               const TrainConfig& tc, double lr_factor = 1.0) {
  st.step += 1;
  const double t = static_cast<double>(st.step);
  const S b1 = static_cast<S>(tc.beta1), b2 = static_cast<S>(tc.beta2);
  const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(tc.beta1, t)));
  const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(tc.beta2, t)));
  const S lr = static_cast<S>(tc.learning_rate * lr_factor), eps = static_cast<S>(tc.epsilon);
  auto p = params.entries();
  auto g = grads.entries();
  auto m = st.m.entries();
  auto v = st.v.entries();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& pm = *p[i].tensor;
    const auto& gm = *g[i].tensor;
    auto& mm = *m[i].tensor;
    auto& vm = *v[i].tensor;
    for (Eigen::Index j = 0; j < pm.size(); ++j) {
      const S gj = gm.data()[j];
      S& mj = mm.data()[j];
      S& vj = vm.data()[j];
      mj = b1 * mj + (S(1) - b1) * gj;
      vj = b2 * vj + (S(1) - b2) * gj * gj;
      pm.data()[j] -= lr * (mj * c1) / (std::sqrt(vj * c2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricRow {
  int epoch = 0;
  std::string phase;  // "mse" or "nll"
  double train_loss = 0;
  std::array<double, kHorizons> val_rmse{};
  double man_acc_lat = std::numeric_limits<double>::quiet_NaN();
  double man_acc_lon = std::numeric_limits<double>::quiet_NaN();
};

inline std::string metrics_csv_header() {
  return "epoch,phase,train_loss,val_rmse_1s,val_rmse_2s,val_rmse_3s,val_rmse_4s,val_rmse_5s,man_acc_lat,man_acc_lon\n";
}

inline std::string metrics_csv_row(const MetricRow& r) {
  std::string s = std::to_string(r.epoch) + "," + r.phase + "," + format_double(r.train_loss);
  for (double v : r.val_rmse) s += "," + format_double(v);
  s += "," + format_double(r.man_acc_lat) + "," + format_double(r.man_acc_lon) + "\n";
  return s;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string s = metrics_csv_header();
  for (const auto& r : rows) s += metrics_csv_row(r);
  return s;
}

/// Samples handled per gradient buffer. Chunk boundaries depend only on the
/// batch, so the summation order (and the result) is independent of the
/// number of threads.
inline constexpr std::size_t kGradientChunk = 8;

template <class S>
struct TrainOptions {
  std::filesystem::path checkpoint_path;  // best-validation checkpoint, written on improvement
  std::filesystem::path state_path;       // resumable state, written after every epoch
  std::filesystem::path metrics_path;     // metrics CSV, rewritten after every epoch
  nlohmann::json metadata = nlohmann::json::object();
  const Checkpoint<S>* resume = nullptr;       // state checkpoint to continue from
  std::optional<ModelParameters<S>> resume_best;
  int stop_after_epochs = -1;  // run at most this many epochs in this call
  std::function<void(const MetricRow&)> on_epoch;
  int val_threads = 0;  // 0 -> train threads
};

template <class S>
struct TrainResult {
  ModelParameters<S> params;       // after the last completed epoch
  ModelParameters<S> best_params;  // best validation RMSE@5s
  int best_epoch = -1;
  double best_metric = std::numeric_limits<double>::infinity();
  std::vector<MetricRow> log;
  bool diverged = false;
  std::string diagnostic;
  OptimizerState<S> optimizer;
};

/// Learning-rate multiplier for an epoch.
inline double lr_factor(const TrainConfig& tc, int epoch) {
  if (tc.lr_schedule != "cosine" || tc.epochs <= 0) return 1.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / tc.epochs));
}

inline std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return synth::mix_seed(seed ^ 0x5ee6a11d5ull, static_cast<std::uint64_t>(epoch));
}

/// Trains on split.train with per-epoch validation on split.validation (if
/// non-empty; otherwise the latest epoch counts as best).
template <class S>
TrainResult<S> train(const ngsim::DatasetSplit& split, const ModelConfig& mc, const TrainConfig& tc,
                     const LossConfig& lc, TrainOptions<S> opt = {}) {
  mc.validate();
  tc.validate();
  lc.validate();
  if (split.train.empty()) throw ValidationError("train: training set is empty");
  for (const auto& s : split.train) {
    if (s.history_len != mc.history_len || s.future_len != mc.future_len || s.input_dim != mc.input_dim) {
      throw ValidationError("train: dataset dimensions (T, F, D_in) do not match the model config");
    }
  }

  TrainResult<S> res;
  int start_epoch = 0;
  if (opt.resume) {
    if (opt.resume->model.hash() != mc.hash()) throw ValidationError("resume state was written for another model config");
    if (!opt.resume->state) throw ValidationError("resume checkpoint carries no optimizer state");
    res.params = opt.resume->params;
    res.optimizer = *opt.resume->state;
    start_epoch = res.optimizer.next_epoch;
    res.best_metric = res.optimizer.best_metric;
    res.best_epoch = res.optimizer.best_epoch;
    res.best_params = opt.resume_best ? *opt.resume_best : res.params;
  } else {
    res.params = init_parameters<S>(mc, tc.seed);
    res.optimizer = make_optimizer_state(res.params);
    res.best_params = res.params;
  }

  const std::size_t n = split.train.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(tc.batch_size), n);
  const std::size_t max_chunks = (batch + kGradientChunk - 1) / kGradientChunk;
  std::vector<ModelParameters<S>> chunk_grads(max_chunks, res.params.zeros_like());
  ModelParameters<S> grads = res.params.zeros_like();
  std::vector<double> sample_losses(n);
  EvalOptions eval_opt;
  eval_opt.threads = opt.val_threads > 0 ? opt.val_threads : tc.threads;

  auto write_metrics = [&] {
    if (!opt.metrics_path.empty()) {
      const auto text = metrics_csv(res.log);
      io::write_file(opt.metrics_path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    }
  };

  int ran = 0;
  for (int epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    if (opt.stop_after_epochs >= 0 && ran >= opt.stop_after_epochs) break;
    ++ran;
    const bool nll = lc.use_nll(epoch);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(epoch_seed(tc.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const ModelParameters<S> last_good = res.params;
    const auto last_state = res.optimizer;
    bool bad = false;
    for (std::size_t b0 = 0; b0 < n && !bad; b0 += batch) {
      const std::size_t bn = std::min(batch, n - b0);
      const std::size_t chunks = (bn + kGradientChunk - 1) / kGradientChunk;
      const S scale = S(1) / static_cast<S>(bn);
      parallel_for(chunks, tc.threads, [&](std::size_t c) {
        auto& cg = chunk_grads[c];
        cg.set_zero();
        const std::size_t lo = c * kGradientChunk, hi = std::min(bn, lo + kGradientChunk);
        for (std::size_t j = lo; j < hi; ++j) {
          const std::size_t idx = order[b0 + j];
          Dropout drop{mc.dropout, std::mt19937_64(synth::mix_seed(epoch_seed(tc.seed, epoch), b0 + j))};
          const auto terms = sample_loss(res.params, mc, split.train[idx], nll, {1.0, lc.lambda}, &cg, scale,
                                         mc.dropout > 0 ? &drop : nullptr);
          sample_losses[b0 + j] = terms.total;
        }
      });
      grads.set_zero();
      auto ge = grads.entries();
      for (std::size_t c = 0; c < chunks; ++c) {
        auto ce = chunk_grads[c].entries();
        for (std::size_t i = 0; i < ge.size(); ++i) *ge[i].tensor += *ce[i].tensor;
      }
      for (std::size_t j = 0; j < bn; ++j) bad = bad || !std::isfinite(sample_losses[b0 + j]);
      if (bad) break;
      const double norm = clip_global_norm(grads, tc.clip_norm);
      if (!std::isfinite(norm)) {
        bad = true;
        break;
      }
      adam_step(res.params, grads, res.optimizer, tc, lr_factor(tc, epoch));
    }
    if (bad || !all_finite(res.params)) {
      res.params = last_good;
      res.optimizer = last_state;
      res.diverged = true;
      res.diagnostic = "training diverged in epoch " + std::to_string(epoch) + " (" + (nll ? "nll" : "mse") +
                       " phase): non-finite loss or gradient; parameters restored to the end of epoch " +
                       std::to_string(epoch - 1) + "; try a lower learning rate or clip norm";
      break;
    }

    MetricRow row;
    row.epoch = epoch;
    row.phase = nll ? "nll" : "mse";
    double sum = 0;
    for (double v : sample_losses) sum += v;
    row.train_loss = sum / static_cast<double>(n);
    double metric = 0;
    if (!split.validation.empty()) {
      const auto ev = evaluate(res.params, split.validation, mc, eval_opt);
      row.val_rmse = ev.rmse;
      row.man_acc_lat = ev.accuracy_lateral;
      row.man_acc_lon = ev.accuracy_longitudinal;
      metric = ev.rmse[kHorizons - 1];
    } else {
      row.val_rmse.fill(std::numeric_limits<double>::quiet_NaN());
      metric = -static_cast<double>(epoch);  // latest wins
    }
    res.log.push_back(row);
    if (opt.on_epoch) opt.on_epoch(row);

    if (metric < res.best_metric || res.best_epoch < 0) {
      res.best_metric = metric;
      res.best_epoch = epoch;
      res.best_params = res.params;
      if (!opt.checkpoint_path.empty()) {
        auto meta = opt.metadata;
        meta["epoch"] = epoch;
        meta["val_rmse_5s"] = json_number(row.val_rmse[kHorizons - 1]);
        save_checkpoint(opt.checkpoint_path, res.best_params, mc, meta);
      }
    }
    res.optimizer.next_epoch = epoch + 1;
    res.optimizer.best_metric = res.best_metric;
    res.optimizer.best_epoch = res.best_epoch;
    if (!opt.state_path.empty()) save_checkpoint(opt.state_path, res.params, mc, opt.metadata, &res.optimizer);
    write_metrics();
  }
  write_metrics();
  return res;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckOptions {
  int n_params = 240;
  double fd_step = 1e-4;
  std::uint64_t seed = 7;
  bool nll = true;
  int max_redraws = 20;  // per probe that straddles an activation kink
  /// Applied to the analytic gradient before comparison (checker self-test).
  std::function<void(ModelParameters<double>&)> corrupt;
};

struct GradCheckResult {
  double max_error = 0;
  std::string worst_parameter;
  double worst_analytic = 0, worst_numeric = 0;
  int checked = 0;
  int kink_redraws = 0;
  std::vector<std::string> groups;          // all parameter groups
  std::set<std::string> covered_groups;     // groups with at least one probe
  double seconds = 0;
};

/// |a - n| / max(|a|, |n|); below `floor` in both, the absolute difference.
inline double gradient_error(double analytic, double numeric, double floor = 1e-8) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double diff = std::abs(analytic - numeric);
  return scale < floor ? diff : diff / scale;
}

namespace detail {

template <class T, class S>
ModelParameters<T> cast_parameters(const ModelParameters<S>& p) {
  ModelParameters<T> out;
  out.variant = p.variant;
  auto pe = p.entries();
  // Same structure: build from zeros of the right shapes, then copy values.
  out.motion.layers.resize(p.motion.layers.size());
  if (p.ego_motion) out.ego_motion.emplace().layers.resize(p.ego_motion->layers.size());
  out.decoder.resize(p.decoder.size());
  auto oe = out.entries();
  for (std::size_t i = 0; i < pe.size(); ++i) *oe[i].tensor = pe[i].tensor->template cast<T>();
  return out;
}

}  // namespace detail

/// Compares the analytic gradient of the training objective (ground-truth
/// mode, lambda from `lc`) with a five-point central difference on a random
/// subset of parameters that touches every group. Probes whose perturbation
/// flips any ReLU/LeakyReLU branch are redrawn. The analytic gradient is
/// computed in double; the difference quotients are evaluated in long double
/// so that their rounding noise stays well below the tolerance even when
/// the loss is large.
inline GradCheckResult gradient_check(const ModelParameters<double>& params, const ModelConfig& cfg,
                                      const TrajectorySample& sample, const LossConfig& lc,
                                      const GradCheckOptions& opt = {}) {
  using Ref = long double;
  const auto t0 = std::chrono::steady_clock::now();
  const TermWeights w{1.0, lc.lambda};
  ModelParameters<double> analytic = params.zeros_like();
  sample_loss(params, cfg, sample, opt.nll, w, &analytic, 1.0);
  if (opt.corrupt) opt.corrupt(analytic);

  ModelParameters<Ref> work = detail::cast_parameters<Ref>(params);
  std::uint64_t base_branches = 0;
  sample_loss(work, cfg, sample, opt.nll, w, nullptr, Ref(1), nullptr, &base_branches);

  auto pe = work.entries();
  auto ae = analytic.entries();
  std::map<std::string, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < pe.size(); ++i) by_group[pe[i].group].push_back(i);

  GradCheckResult res;
  for (const auto& [g, _] : by_group) res.groups.push_back(g);
  std::mt19937_64 rng(opt.seed);
  auto pick = [&](const std::vector<std::size_t>& tensors) {
    std::size_t total = 0;
    for (auto t : tensors) total += static_cast<std::size_t>(pe[t].tensor->size());
    std::size_t r = static_cast<std::size_t>(rng() % total);
    for (auto t : tensors) {
      const auto sz = static_cast<std::size_t>(pe[t].tensor->size());
      if (r < sz) return std::pair{t, r};
      r -= sz;
    }
    return std::pair{tensors.back(), std::size_t{0}};
  };
  std::vector<std::size_t> all(pe.size());
  std::iota(all.begin(), all.end(), std::size_t{0});

  auto probe = [&](std::size_t t, std::size_t j) -> std::optional<double> {
    Ref& x = pe[t].tensor->data()[j];
    const Ref x0 = x;
    const Ref h = static_cast<Ref>(opt.fd_step);
    Ref f[4];
    const Ref offsets[4] = {-2 * h, -h, h, 2 * h};
    for (int k = 0; k < 4; ++k) {
      x = x0 + offsets[k];
      std::uint64_t br = 0;
      f[k] = sample_loss(work, cfg, sample, opt.nll, w, nullptr, Ref(1), nullptr, &br).total;
      if (br != base_branches) {
        x = x0;
        return std::nullopt;
      }
    }
    x = x0;
    return static_cast<double>((f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h));
  };

  std::vector<std::vector<std::size_t>> plan;
  for (const auto& [g, tensors] : by_group) plan.push_back(tensors);
  const int target = std::max<int>(opt.n_params, static_cast<int>(plan.size()));
  for (int k = 0; k < target; ++k) {
    const auto& pool = k < static_cast<int>(plan.size()) ? plan[static_cast<std::size_t>(k)] : all;
    for (int attempt = 0; attempt <= opt.max_redraws; ++attempt) {
      const auto [t, j] = pick(pool);
      const auto numeric = probe(t, j);
      if (!numeric) {
        ++res.kink_redraws;
        continue;
      }
      const double a = ae[t].tensor->data()[j];
      const double err = gradient_error(a, *numeric);
      ++res.checked;
      res.covered_groups.insert(pe[t].group);
      if (err >= res.max_error) {
        res.max_error = err;
        res.worst_parameter = pe[t].name + "[" + std::to_string(j) + "]";
        res.worst_analytic = a;
        res.worst_numeric = *numeric;
      }
      break;
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

struct DecompositionResult {
  double max_error = 0;
  std::string worst_parameter;
  double lambda_derivative_error = 0;  // |dL/dlambda - l_man|
};

/// Compares the gradient of L_traj + lambda L_man with the separately
/// computed parts. Errors are relative to the larger of the two sides,
/// floored at 1 so entries that are zero up to rounding do not blow up.
inline DecompositionResult loss_decomposition_check(const ModelParameters<double>& params, const ModelConfig& cfg,
                                                    const TrajectorySample& sample, double lambda, bool nll = true) {
  if (params.variant != ModelVariant::Miat) throw ValidationError("decomposition check needs the MIAT variant");
  auto combined = params.zeros_like();
  auto traj = params.zeros_like();
  auto man = params.zeros_like();
  const auto full = sample_loss(params, cfg, sample, nll, {1.0, lambda}, &combined);
  const auto t = sample_loss(params, cfg, sample, nll, {1.0, 0.0}, &traj);
  sample_loss(params, cfg, sample, nll, {0.0, 1.0}, &man);
  DecompositionResult res;
  auto ce = combined.entries();
  auto te = traj.entries();
  auto me = man.entries();
  for (std::size_t i = 0; i < ce.size(); ++i) {
    for (Eigen::Index j = 0; j < ce[i].tensor->size(); ++j) {
      const double c = ce[i].tensor->data()[j];
      const double sum = te[i].tensor->data()[j] + lambda * me[i].tensor->data()[j];
      const double err = std::abs(c - sum) / std::max({1.0, std::abs(c), std::abs(sum)});
      if (err > res.max_error || res.worst_parameter.empty()) {
        res.max_error = std::max(res.max_error, err);
        res.worst_parameter = ce[i].name + "[" + std::to_string(j) + "]";
      }
    }
  }
  // L is linear in lambda, so a unit step in lambda changes L by l_man.
  const auto shifted = sample_loss(params, cfg, sample, nll, {1.0, lambda + 1.0});
  res.lambda_derivative_error = std::abs((shifted.total - full.total) - t.maneuver);
  return res;
}

/// Default fixture for gradient checks: one synthetic sample with neighbours
/// in the grid, sized to the model config.
inline TrajectorySample gradient_check_sample(const ModelConfig& cfg, std::uint64_t seed = 11) {
  synth::EpisodeOptions eo;
  eo.samples.history_len = cfg.history_len;
  eo.samples.future_len = cfg.future_len;
  eo.samples.include_kinematics = cfg.input_dim == 4;
  if (cfg.input_dim != 2 && cfg.input_dim != 4) throw ValidationError("gradient check fixture supports input_dim 2 or 4");
  for (std::uint64_t attempt = 0;; ++attempt) {
    auto ep = synth::generate_episode(synth::mix_seed(seed, attempt), mode_label(static_cast<int>((seed + attempt) % kModes)),
                                      6, 0.05, eo);
    const std::int64_t ego = ep.ego_id;
    auto samples = ngsim::build_samples(ep.records, eo.samples, std::span(&ego, 1));
    for (auto& s : samples) {
      int occupied = 0;
      for (int c = 0; c < GridSpec::kCells; ++c) occupied += s.occupied(c, s.history_len - 1);
      if (occupied >= 2) return s;
    }
    if (attempt > 100) throw std::runtime_error("could not build a gradient-check sample with neighbours");
  }
}

}  // namespace miat
