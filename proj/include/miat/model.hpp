#pragma once

// The maneuver-intention-aware transformer and its vanilla encoder-decoder
// baseline.
//
//   motion encoder   e = LeakyReLU(x W_e), z = e W_p + PE, one or more
//                    post-norm transformer encoder layers per agent sequence
//   social attention per step, the ego row queries the occupied grid cells;
//                    LayerNorm(h + GLU(alpha V))
//   temporal         multi-head self attention across the T social rows,
//                    LayerNorm(H + GLU(beta V))
//   intention heads  r = LeakyReLU(h_T W_r), softmax(r W_la), softmax(r W_lo)
//   fusion/decoder   a one-hot maneuver mode is embedded and queries the
//                    encoded rows; the fused vector is tiled over F steps,
//                    position encoded and passed through a transformer layer
//   gaussian head    two-layer MLP -> (mu_x, mu_y, sigma_x, sigma_y)
//
// Everything is templated on the scalar so the same graph trains in float
// and is gradient-checked in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "miat/autodiff.hpp"
#include "miat/binary_io.hpp"
#include "miat/types.hpp"

namespace miat {

enum class ModelVariant { Miat, Vanilla };

inline std::string to_string(ModelVariant v) { return v == ModelVariant::Miat ? "miat" : "vanilla"; }

inline ModelVariant variant_from_string(const std::string& s) {
  if (s == "miat") return ModelVariant::Miat;
  if (s == "vanilla") return ModelVariant::Vanilla;
  throw ValidationError("unknown model variant '" + s + "' (expected miat or vanilla)");
}

struct ModelConfig {
  ModelVariant variant = ModelVariant::Miat;
  int d_model = 64;
  int n_heads = 8;
  int n_encoder_layers = 1;
  int n_decoder_layers = 1;
  int ffn_dim = 128;
  int mlp_hidden = 64;
  int history_len = 16;
  int future_len = 25;
  int input_dim = 2;
  GridSpec grid;
  double leaky_slope = 0.1;
  double dropout = 0.0;
  double input_scale = 10.0;     // meters per model unit on the input side
  double position_scale = 10.0;  // meters per model unit of predicted means
  bool separate_ego_encoder = false;
  bool cumulative_means = true;  // head emits per-step displacements
  bool velocity_anchor = true;   // means are offsets from constant-velocity extrapolation
  int anchor_window = 5;         // history steps in the least-squares velocity fit

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ValidationError("model config: " + what);
    };
    need(d_model >= 1 && n_heads >= 1 && n_encoder_layers >= 1 && n_decoder_layers >= 1 && ffn_dim >= 1 &&
             mlp_hidden >= 1 && history_len >= 1 && future_len >= 1 && input_dim >= 1,
         "all dimensions must be >= 1");
    need(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
    need(position_scale > 0.0 && input_scale > 0.0, "input_scale and position_scale must be > 0");
    need(leaky_slope >= 0.0, "leaky_slope must be >= 0");
    need(anchor_window >= 2, "anchor_window must be >= 2");
    need(grid.cell_length > 0.0, "grid.cell_length must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"variant", to_string(variant)},
            {"d_model", d_model},
            {"n_heads", n_heads},
            {"n_encoder_layers", n_encoder_layers},
            {"n_decoder_layers", n_decoder_layers},
            {"ffn_dim", ffn_dim},
            {"mlp_hidden", mlp_hidden},
            {"history_len", history_len},
            {"future_len", future_len},
            {"input_dim", input_dim},
            {"cell_length", grid.cell_length},
            {"leaky_slope", leaky_slope},
            {"dropout", dropout},
            {"input_scale", input_scale},
            {"position_scale", position_scale},
            {"separate_ego_encoder", separate_ego_encoder},
            {"cumulative_means", cumulative_means},
            {"velocity_anchor", velocity_anchor},
            {"anchor_window", anchor_window}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.variant = variant_from_string(j.value("variant", to_string(c.variant)));
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_encoder_layers = j.value("n_encoder_layers", c.n_encoder_layers);
    c.n_decoder_layers = j.value("n_decoder_layers", c.n_decoder_layers);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.history_len = j.value("history_len", c.history_len);
    c.future_len = j.value("future_len", c.future_len);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.grid.cell_length = j.value("cell_length", c.grid.cell_length);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.dropout = j.value("dropout", c.dropout);
    c.input_scale = j.value("input_scale", c.input_scale);
    c.position_scale = j.value("position_scale", c.position_scale);
    c.separate_ego_encoder = j.value("separate_ego_encoder", c.separate_ego_encoder);
    c.cumulative_means = j.value("cumulative_means", c.cumulative_means);
    c.velocity_anchor = j.value("velocity_anchor", c.velocity_anchor);
    c.anchor_window = j.value("anchor_window", c.anchor_window);
    return c;
  }

  /// Stable hash of the canonical JSON form; embedded in checkpoints.
  std::uint64_t hash() const { return io::fnv1a(to_json().dump()); }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameters

template <class S>
using Matrix = ad::Matrix<S>;

template <class S>
struct LinearParams {
  Matrix<S> weight;  // in x out
  Matrix<S> bias;    // 1 x out
};

template <class S>
struct NormParams {
  Matrix<S> gain;
  Matrix<S> bias;
};

template <class S>
struct EncoderLayerParams {
  LinearParams<S> query, key, value, output;
  NormParams<S> attention_norm;
  LinearParams<S> ffn_in, ffn_out;
  NormParams<S> ffn_norm;
};

template <class S>
struct MotionEncoderParams {
  LinearParams<S> embed;    // W_e
  LinearParams<S> project;  // W_p
  std::vector<EncoderLayerParams<S>> layers;
};

template <class T>
struct ParamEntry {
  std::string name;
  std::string group;
  T* tensor;
};

template <class S>
struct ModelParameters {
  ModelVariant variant = ModelVariant::Miat;

  MotionEncoderParams<S> motion;  // shared by neighbours (and the ego unless separate)
  std::optional<MotionEncoderParams<S>> ego_motion;

  LinearParams<S> social_query, social_key, social_value, social_gate;  // W_q, W_k, W_v, GLU
  NormParams<S> social_norm;
  LinearParams<S> temporal_query, temporal_key, temporal_value, temporal_gate;  // W_qt, W_kt, W_vt, GLU
  NormParams<S> temporal_norm;

  LinearParams<S> maneuver_state;     // W_r
  LinearParams<S> lateral_head;       // W_la
  LinearParams<S> longitudinal_head;  // W_lo
  LinearParams<S> mode_embed;         // one-hot maneuver (6) -> d

  Matrix<S> base_query;  // vanilla only: learned unconditioned query

  LinearParams<S> fusion_query, fusion_key, fusion_value;
  NormParams<S> fusion_norm;
  std::vector<EncoderLayerParams<S>> decoder;
  LinearParams<S> head_hidden, head_out;

  /// Every tensor in a fixed order with a dotted name and a group label.
  std::vector<ParamEntry<Matrix<S>>> entries() { return collect<Matrix<S>>(*this); }
  std::vector<ParamEntry<const Matrix<S>>> entries() const { return collect<const Matrix<S>>(*this); }

  /// Same structure, all zeros (gradient buffers, optimizer moments).
  ModelParameters zeros_like() const {
    ModelParameters z = *this;
    for (auto& e : z.entries()) e.tensor->setZero();
    return z;
  }

  void set_zero() {
    for (auto& e : entries()) e.tensor->setZero();
  }

  bool operator==(const ModelParameters& other) const {
    auto a = entries();
    auto b = other.entries();
    if (a.size() != b.size() || variant != other.variant) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].name != b[i].name || a[i].tensor->rows() != b[i].tensor->rows() ||
          a[i].tensor->cols() != b[i].tensor->cols() || *a[i].tensor != *b[i].tensor) {
        return false;
      }
    }
    return true;
  }

 private:
  template <class T, class Self>
  static std::vector<ParamEntry<T>> collect(Self& self) {
    std::vector<ParamEntry<T>> out;
    auto lin = [&](const std::string& name, const std::string& group, auto& l) {
      out.push_back({name + ".weight", group, &l.weight});
      out.push_back({name + ".bias", group, &l.bias});
    };
    auto norm = [&](const std::string& name, const std::string& group, auto& n) {
      out.push_back({name + ".gain", group, &n.gain});
      out.push_back({name + ".bias", group, &n.bias});
    };
    auto layer = [&](const std::string& name, const std::string& group, auto& l) {
      lin(name + ".query", group, l.query);
      lin(name + ".key", group, l.key);
      lin(name + ".value", group, l.value);
      lin(name + ".output", group, l.output);
      norm(name + ".attention_norm", group, l.attention_norm);
      lin(name + ".ffn_in", group, l.ffn_in);
      lin(name + ".ffn_out", group, l.ffn_out);
      norm(name + ".ffn_norm", group, l.ffn_norm);
    };
    auto motion = [&](const std::string& prefix, auto& m) {
      lin(prefix + ".embed", prefix + ".embed", m.embed);
      lin(prefix + ".project", prefix + ".project", m.project);
      for (std::size_t i = 0; i < m.layers.size(); ++i) {
        layer(prefix + ".layer" + std::to_string(i), prefix + ".encoder", m.layers[i]);
      }
    };
    motion("motion", self.motion);
    if (self.ego_motion) motion("ego_motion", *self.ego_motion);
    lin("social.query", "social.query", self.social_query);
    lin("social.key", "social.key", self.social_key);
    lin("social.value", "social.value", self.social_value);
    lin("social.gate", "social.gate", self.social_gate);
    norm("social.norm", "social.gate", self.social_norm);
    lin("temporal.query", "temporal.query", self.temporal_query);
    lin("temporal.key", "temporal.key", self.temporal_key);
    lin("temporal.value", "temporal.value", self.temporal_value);
    lin("temporal.gate", "temporal.gate", self.temporal_gate);
    norm("temporal.norm", "temporal.gate", self.temporal_norm);
    if (self.variant == ModelVariant::Miat) {
      lin("intention.state", "intention.state", self.maneuver_state);
      lin("intention.lateral", "intention.lateral", self.lateral_head);
      lin("intention.longitudinal", "intention.longitudinal", self.longitudinal_head);
      lin("fusion.mode_embed", "fusion.mode_embed", self.mode_embed);
    } else {
      out.push_back({"fusion.base_query", "fusion.base_query", &self.base_query});
    }
    lin("fusion.query", "fusion.attention", self.fusion_query);
    lin("fusion.key", "fusion.attention", self.fusion_key);
    lin("fusion.value", "fusion.attention", self.fusion_value);
    norm("fusion.norm", "fusion.attention", self.fusion_norm);
    for (std::size_t i = 0; i < self.decoder.size(); ++i) {
      layer("decoder.layer" + std::to_string(i), "decoder", self.decoder[i]);
    }
    lin("head.hidden", "head", self.head_hidden);
    lin("head.out", "head", self.head_out);
    return out;
  }
};

template <class S>
std::size_t count_parameters(const ModelParameters<S>& p) {
  std::size_t n = 0;
  for (const auto& e : p.entries()) n += static_cast<std::size_t>(e.tensor->size());
  return n;
}

namespace detail {

/// Uniform in [-bound, bound] from raw 64-bit draws.
template <class S>
void fill_uniform(Matrix<S>& m, double bound, std::mt19937_64& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m.data()[i] = static_cast<S>((2.0 * u - 1.0) * bound);
  }
}

template <class S>
LinearParams<S> make_linear(int in, int out, std::mt19937_64& rng) {
  LinearParams<S> l;
  l.weight.resize(in, out);
  l.bias.resize(1, out);
  const double bound = std::sqrt(1.0 / in);
  fill_uniform(l.weight, bound, rng);
  fill_uniform(l.bias, bound, rng);
  return l;
}

template <class S>
NormParams<S> make_norm(int d) {
  return {Matrix<S>::Ones(1, d), Matrix<S>::Zero(1, d)};
}

template <class S>
EncoderLayerParams<S> make_layer(const ModelConfig& c, std::mt19937_64& rng) {
  EncoderLayerParams<S> l;
  l.query = make_linear<S>(c.d_model, c.d_model, rng);
  l.key = make_linear<S>(c.d_model, c.d_model, rng);
  l.value = make_linear<S>(c.d_model, c.d_model, rng);
  l.output = make_linear<S>(c.d_model, c.d_model, rng);
  l.attention_norm = make_norm<S>(c.d_model);
  l.ffn_in = make_linear<S>(c.d_model, c.ffn_dim, rng);
  l.ffn_out = make_linear<S>(c.ffn_dim, c.d_model, rng);
  l.ffn_norm = make_norm<S>(c.d_model);
  return l;
}

template <class S>
MotionEncoderParams<S> make_motion(const ModelConfig& c, std::mt19937_64& rng) {
  MotionEncoderParams<S> m;
  m.embed = make_linear<S>(c.input_dim, c.d_model, rng);
  m.project = make_linear<S>(c.d_model, c.d_model, rng);
  for (int i = 0; i < c.n_encoder_layers; ++i) m.layers.push_back(make_layer<S>(c, rng));
  return m;
}

}  // namespace detail

/// Uniform +/- sqrt(1/fan_in) for every linear map; layer norms start at
/// gain 1, bias 0.
template <class S>
ModelParameters<S> init_parameters(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  const int d = c.d_model;
  ModelParameters<S> p;
  p.variant = c.variant;
  p.motion = detail::make_motion<S>(c, rng);
  if (c.separate_ego_encoder) p.ego_motion = detail::make_motion<S>(c, rng);
  p.social_query = detail::make_linear<S>(d, d, rng);
  p.social_key = detail::make_linear<S>(d, d, rng);
  p.social_value = detail::make_linear<S>(d, d, rng);
  p.social_gate = detail::make_linear<S>(d, 2 * d, rng);
  p.social_norm = detail::make_norm<S>(d);
  p.temporal_query = detail::make_linear<S>(d, d, rng);
  p.temporal_key = detail::make_linear<S>(d, d, rng);
  p.temporal_value = detail::make_linear<S>(d, d, rng);
  p.temporal_gate = detail::make_linear<S>(d, 2 * d, rng);
  p.temporal_norm = detail::make_norm<S>(d);
  if (c.variant == ModelVariant::Miat) {
    p.maneuver_state = detail::make_linear<S>(d, d, rng);
    p.lateral_head = detail::make_linear<S>(d, kLateralClasses, rng);
    p.longitudinal_head = detail::make_linear<S>(d, kLongitudinalClasses, rng);
    p.mode_embed = detail::make_linear<S>(kLateralClasses + kLongitudinalClasses, d, rng);
  } else {
    p.base_query.resize(1, d);
    detail::fill_uniform(p.base_query, std::sqrt(1.0 / d), rng);
  }
  p.fusion_query = detail::make_linear<S>(d, d, rng);
  p.fusion_key = detail::make_linear<S>(d, d, rng);
  p.fusion_value = detail::make_linear<S>(d, d, rng);
  p.fusion_norm = detail::make_norm<S>(d);
  for (int i = 0; i < c.n_decoder_layers; ++i) p.decoder.push_back(detail::make_layer<S>(c, rng));
  p.head_hidden = detail::make_linear<S>(d, c.mlp_hidden, rng);
  p.head_out = detail::make_linear<S>(c.mlp_hidden, 4, rng);
  return p;
}

/// Checks tensor shapes against a config; throws ValidationError.
template <class S>
void check_shapes(const ModelParameters<S>& p, const ModelConfig& c) {
  auto ref = init_parameters<S>(c, 0);
  auto a = p.entries();
  auto b = ref.entries();
  if (p.variant != c.variant || a.size() != b.size()) {
    throw ValidationError("parameters do not match model config (variant or layer count)");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor->rows() != b[i].tensor->rows() ||
        a[i].tensor->cols() != b[i].tensor->cols()) {
      throw ValidationError("parameter " + b[i].name + " has the wrong shape");
    }
  }
}

template <class S>
bool all_finite(const ModelParameters<S>& p) {
  for (const auto& e : p.entries()) {
    if (!e.tensor->allFinite()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Graph construction

/// Sinusoidal positional encoding, rows x d.
template <class S>
Matrix<S> positional_encoding(int rows, int d) {
  Matrix<S> pe(rows, d);
  for (int t = 0; t < rows; ++t) {
    for (int i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
      pe(t, i) = static_cast<S>(i % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq));
    }
  }
  return pe;
}

/// Bernoulli dropout on the training path.
struct Dropout {
  double rate = 0.0;
  std::mt19937_64 rng;
};

/// Attention weights captured during a forward pass, for tests and dumps.
template <class S>
struct ForwardTrace {
  std::vector<ad::AttentionProbe<S>> encoder;  // one per motion layer
  ad::AttentionProbe<S> social;
  ad::AttentionProbe<S> temporal;
  ad::AttentionProbe<S> fusion;
  std::vector<ad::AttentionProbe<S>> decoder;
};

/// Binds parameters to tape leaves, routing gradients into `grads` when given.
template <class S>
class Graph {
 public:
  Graph(ad::Tape<S>& tape, const ModelParameters<S>& params, const ModelConfig& cfg,
        ModelParameters<S>* grads = nullptr, Dropout* dropout = nullptr, bool check_softmax = false)
      : tape_(tape), params_(params), cfg_(cfg), dropout_(dropout), check_softmax_(check_softmax) {
    if (grads) {
      auto pe = params.entries();
      auto ge = grads->entries();
      if (pe.size() != ge.size()) throw ValidationError("gradient buffer does not match parameters");
      for (std::size_t i = 0; i < pe.size(); ++i) sinks_.emplace(pe[i].tensor, ge[i].tensor);
    }
  }

  ad::Tape<S>& tape() { return tape_; }
  const ModelParameters<S>& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

  ad::Var<S> leaf(const Matrix<S>& m) {
    if (auto it = bound_.find(&m); it != bound_.end()) return it->second;
    Matrix<S>* sink = nullptr;
    if (auto it = sinks_.find(&m); it != sinks_.end()) sink = it->second;
    auto v = tape_.parameter(m, sink);
    bound_.emplace(&m, v);
    return v;
  }

  ad::Var<S> constant(Matrix<S> m) { return tape_.constant(std::move(m)); }

  ad::Var<S> linear(const LinearParams<S>& l, const ad::Var<S>& x) {
    return ad::linear(x, leaf(l.weight), leaf(l.bias));
  }

  ad::Var<S> norm(const NormParams<S>& n, const ad::Var<S>& x) {
    return ad::layer_norm(x, leaf(n.gain), leaf(n.bias));
  }

  ad::Var<S> attention(const ad::Var<S>& q, const ad::Var<S>& k, const ad::Var<S>& v, int heads,
                       const ad::AttentionPattern& pattern, ad::AttentionProbe<S>* probe) {
    ad::AttentionProbe<S> local;
    if (check_softmax_ && !probe) probe = &local;
    auto out = ad::attention(q, k, v, heads, pattern, probe);
    if (check_softmax_) {
      for (const auto& row : probe->weights) {
        if (row.empty()) continue;
        double sum = 0;
        for (S w : row) sum += static_cast<double>(w);
        if (std::abs(sum - 1.0) > 1e-6) throw std::logic_error("attention row does not sum to 1");
      }
    }
    return out;
  }

  ad::Var<S> softmax(const ad::Var<S>& logits) {
    auto p = ad::softmax_rows(logits);
    if (check_softmax_) {
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        if (std::abs(static_cast<double>(p.value().row(r).sum()) - 1.0) > 1e-6) {
          throw std::logic_error("softmax row does not sum to 1");
        }
      }
    }
    return p;
  }

  ad::Var<S> maybe_dropout(const ad::Var<S>& x) {
    if (!dropout_ || dropout_->rate <= 0.0) return x;
    const double keep = 1.0 - dropout_->rate;
    Matrix<S> mask(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      const double u = static_cast<double>(dropout_->rng() >> 11) * 0x1.0p-53;
      mask.data()[i] = u < keep ? static_cast<S>(1.0 / keep) : S(0);
    }
    return ad::hadamard_constant(x, mask);
  }

  /// Post-norm transformer encoder layer over the rows selected by `pattern`.
  ad::Var<S> encoder_layer(const EncoderLayerParams<S>& l, const ad::Var<S>& x, const ad::AttentionPattern& pattern,
                           ad::AttentionProbe<S>* probe) {
    auto q = linear(l.query, x);
    auto k = linear(l.key, x);
    auto v = linear(l.value, x);
    auto a = maybe_dropout(linear(l.output, attention(q, k, v, cfg_.n_heads, pattern, probe)));
    auto h = norm(l.attention_norm, ad::add(x, a));
    auto f = maybe_dropout(linear(l.ffn_out, ad::relu(linear(l.ffn_in, h))));
    return norm(l.ffn_norm, ad::add(h, f));
  }

 private:
  ad::Tape<S>& tape_;
  const ModelParameters<S>& params_;
  const ModelConfig& cfg_;
  Dropout* dropout_;
  bool check_softmax_;
  std::unordered_map<const Matrix<S>*, Matrix<S>*> sinks_;
  std::unordered_map<const Matrix<S>*, ad::Var<S>> bound_;
};

/// Motion encoder over `n_agents` stacked sequences of T rows each.
/// `x` holds raw features in meters; scaling happens here.
template <class S>
ad::Var<S> encode_motion_graph(Graph<S>& g, const MotionEncoderParams<S>& m, const Matrix<S>& x, int n_agents,
                               std::vector<ad::AttentionProbe<S>>* probes = nullptr) {
  const auto& c = g.config();
  const int T = c.history_len;
  if (x.rows() != static_cast<Eigen::Index>(n_agents) * T || x.cols() != c.input_dim) {
    throw ad::ShapeError("encode_motion: history must be T x input_dim per agent");
  }
  auto input = g.constant(x / static_cast<S>(c.input_scale));
  auto e = ad::leaky_relu(g.linear(m.embed, input), static_cast<S>(c.leaky_slope));
  auto z = g.linear(m.project, e);
  const Matrix<S> pe = positional_encoding<S>(T, c.d_model);
  Matrix<S> tiled(z.rows(), z.cols());
  for (int a = 0; a < n_agents; ++a) tiled.middleRows(static_cast<Eigen::Index>(a) * T, T) = pe;
  auto h = ad::add_constant(z, tiled);
  const auto pattern = ad::AttentionPattern::blocks(static_cast<std::size_t>(n_agents), static_cast<std::size_t>(T));
  if (probes) probes->assign(m.layers.size(), {});
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    h = g.encoder_layer(m.layers[i], h, pattern, probes ? &(*probes)[i] : nullptr);
  }
  return h;
}

/// LayerNorm(h + GLU(alpha V)) where row t of `query_rows` attends to the
/// key rows listed for step t. Steps without keys get a zero social vector.
template <class S>
ad::Var<S> social_attention_graph(Graph<S>& g, const ad::Var<S>& ego, const std::optional<ad::Var<S>>& neighbors,
                                  const ad::AttentionPattern& pattern, ad::AttentionProbe<S>* probe = nullptr) {
  const auto& p = g.params();
  ad::Var<S> social;
  if (neighbors && !pattern.keys.empty()) {
    auto q = g.linear(p.social_query, ego);
    auto k = g.linear(p.social_key, *neighbors);
    auto v = g.linear(p.social_value, *neighbors);
    social = g.attention(q, k, v, 1, pattern, probe);
  } else {
    social = g.constant(Matrix<S>::Zero(ego.rows(), ego.cols()));
  }
  auto gated = ad::glu(g.linear(p.social_gate, social));
  return g.norm(p.social_norm, ad::add(ego, gated));
}

template <class S>
ad::Var<S> temporal_graph(Graph<S>& g, const ad::Var<S>& h, ad::AttentionProbe<S>* probe = nullptr) {
  const auto& p = g.params();
  const auto T = static_cast<std::size_t>(h.rows());
  auto q = g.linear(p.temporal_query, h);
  auto k = g.linear(p.temporal_key, h);
  auto v = g.linear(p.temporal_value, h);
  auto att = g.attention(q, k, v, g.config().n_heads, ad::AttentionPattern::dense(T, T), probe);
  auto gated = ad::glu(g.linear(p.temporal_gate, att));
  return g.norm(p.temporal_norm, ad::add(h, gated));
}

template <class S>
struct IntentionGraph {
  ad::Var<S> state;         // r, 1 x d
  ad::Var<S> lateral;       // P(la), 1 x 3
  ad::Var<S> longitudinal;  // P(lo), 1 x 3
};

template <class S>
IntentionGraph<S> intention_graph(Graph<S>& g, const ad::Var<S>& h_last) {
  const auto& p = g.params();
  if (p.variant != ModelVariant::Miat) throw ValidationError("intention heads exist only in the MIAT variant");
  IntentionGraph<S> out;
  out.state = ad::leaky_relu(g.linear(p.maneuver_state, h_last), static_cast<S>(g.config().leaky_slope));
  out.lateral = g.softmax(g.linear(p.lateral_head, out.state));
  out.longitudinal = g.softmax(g.linear(p.longitudinal_head, out.state));
  return out;
}

/// One-hot rows [lateral(3) | longitudinal(3)] for the requested modes.
template <class S>
Matrix<S> mode_one_hot(const std::vector<int>& modes) {
  Matrix<S> m = Matrix<S>::Zero(static_cast<Eigen::Index>(modes.size()), kLateralClasses + kLongitudinalClasses);
  for (std::size_t i = 0; i < modes.size(); ++i) {
    const auto label = mode_label(modes[i]);
    m(static_cast<Eigen::Index>(i), static_cast<int>(label.lateral)) = S(1);
    m(static_cast<Eigen::Index>(i), kLateralClasses + static_cast<int>(label.longitudinal)) = S(1);
  }
  return m;
}

/// Soft attention of each condition query over the encoded rows followed by
/// the non-autoregressive decoder. Returns (n_queries * F) x d hidden rows.
template <class S>
ad::Var<S> fuse_decode_graph(Graph<S>& g, const ad::Var<S>& encoded, const ad::Var<S>& queries,
                             ForwardTrace<S>* trace = nullptr) {
  const auto& p = g.params();
  const auto& c = g.config();
  const auto n = static_cast<std::size_t>(queries.rows());
  const int F = c.future_len;
  auto q = g.linear(p.fusion_query, queries);
  auto k = g.linear(p.fusion_key, encoded);
  auto v = g.linear(p.fusion_value, encoded);
  auto att = g.attention(q, k, v, 1, ad::AttentionPattern::dense(n, static_cast<std::size_t>(encoded.rows())),
                         trace ? &trace->fusion : nullptr);
  auto fused = g.norm(p.fusion_norm, ad::add(queries, att));
  auto h = ad::repeat_rows(fused, F);
  const Matrix<S> pe = positional_encoding<S>(F, c.d_model);
  Matrix<S> tiled(h.rows(), h.cols());
  for (std::size_t b = 0; b < n; ++b) tiled.middleRows(static_cast<Eigen::Index>(b) * F, F) = pe;
  h = ad::add_constant(h, tiled);
  const auto pattern = ad::AttentionPattern::blocks(n, static_cast<std::size_t>(F));
  if (trace) trace->decoder.assign(p.decoder.size(), {});
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    h = g.encoder_layer(p.decoder[i], h, pattern, trace ? &trace->decoder[i] : nullptr);
  }
  return h;
}

template <class S>
struct GaussianGraph {
  ad::Var<S> mean;   // rows x 2, meters
  ad::Var<S> sigma;  // rows x 2, meters, > 0
};

inline constexpr double kSigmaFloor = 1e-4;

/// Constant-velocity extrapolation from the anchor position, F x 2 meters,
/// tiled `repeats` times.
template <class S>
Matrix<S> velocity_extrapolation(const TrajectorySample& s, int window, int repeats = 1) {
  const int F = s.future_len;
  Matrix<S> out(static_cast<Eigen::Index>(repeats) * F, 2);
  // Least-squares slope over the last `window` history steps.
  const int n = std::min(window, s.history_len);
  double vx = 0, vy = 0;
  if (n >= 2) {
    const double t_mean = (n - 1) / 2.0;
    double sxx = 0;
    for (int i = 0; i < n; ++i) {
      const int t = s.history_len - n + i;
      const double dt = i - t_mean;
      vx += dt * s.ego(t, 0);
      vy += dt * s.ego(t, 1);
      sxx += dt * dt;
    }
    vx /= sxx;
    vy /= sxx;
  }
  for (int r = 0; r < repeats; ++r) {
    for (int k = 0; k < F; ++k) {
      out(r * F + k, 0) = static_cast<S>(vx * (k + 1));
      out(r * F + k, 1) = static_cast<S>(vy * (k + 1));
    }
  }
  return out;
}

/// `anchor` (rows x 2, meters) is added to the means when given.
template <class S>
GaussianGraph<S> gaussian_head_graph(Graph<S>& g, const ad::Var<S>& h, const Matrix<S>* anchor = nullptr) {
  const auto& p = g.params();
  const auto& c = g.config();
  auto hidden = ad::leaky_relu(g.linear(p.head_hidden, h), static_cast<S>(c.leaky_slope));
  auto raw = g.linear(p.head_out, hidden);
  auto mean = ad::slice_cols(raw, 0, 2);
  if (c.cumulative_means) mean = ad::cumsum_rows(mean, c.future_len);
  mean = ad::scale(mean, static_cast<S>(c.position_scale));
  if (anchor) mean = ad::add_constant(mean, *anchor);
  return {mean, ad::softplus_floor(ad::slice_cols(raw, 2, 2), static_cast<S>(kSigmaFloor))};
}

/// Head over a decoded block of `repeats` trajectories of one sample.
template <class S>
GaussianGraph<S> sample_head_graph(Graph<S>& g, const ad::Var<S>& h, const TrajectorySample& s, int repeats) {
  if (!g.config().velocity_anchor) return gaussian_head_graph(g, h);
  const auto anchor = velocity_extrapolation<S>(s, g.config().anchor_window, repeats);
  return gaussian_head_graph(g, h, &anchor);
}

/// Shared encoder stack: motion encoding, social attention and temporal
/// dependency for one sample. Returns the T x d spatio-temporal encoding.
template <class S>
ad::Var<S> encode_scene_graph(Graph<S>& g, const TrajectorySample& s, ForwardTrace<S>* trace = nullptr) {
  const auto& c = g.config();
  const auto& p = g.params();
  const int T = c.history_len;
  const int D = c.input_dim;
  if (s.history_len != T || s.input_dim != D || s.future_len != c.future_len) {
    throw ad::ShapeError("sample dimensions (T, F, D_in) do not match the model config");
  }
  std::vector<int> cells;
  for (int cell = 0; cell < GridSpec::kCells; ++cell) {
    for (int t = 0; t < T; ++t) {
      if (s.occupied(cell, t)) {
        cells.push_back(cell);
        break;
      }
    }
  }
  const int n_cells = static_cast<int>(cells.size());
  const bool separate = p.ego_motion.has_value();

  Matrix<S> x((separate ? 0 : T) + n_cells * T, D);
  int row = 0;
  if (!separate) {
    for (int t = 0; t < T; ++t, ++row) {
      for (int k = 0; k < D; ++k) x(row, k) = static_cast<S>(s.ego(t, k));
    }
  }
  for (int cell : cells) {
    for (int t = 0; t < T; ++t, ++row) {
      for (int k = 0; k < D; ++k) x(row, k) = static_cast<S>(s.neighbor(cell, t, k));
    }
  }

  ad::Var<S> ego;
  std::optional<ad::Var<S>> neighbors;
  auto* probes = trace ? &trace->encoder : nullptr;
  if (separate) {
    Matrix<S> xe(T, D);
    for (int t = 0; t < T; ++t) {
      for (int k = 0; k < D; ++k) xe(t, k) = static_cast<S>(s.ego(t, k));
    }
    ego = encode_motion_graph(g, *p.ego_motion, xe, 1, probes);
    if (n_cells > 0) neighbors = encode_motion_graph(g, p.motion, x, n_cells);
  } else {
    auto all = encode_motion_graph(g, p.motion, x, 1 + n_cells, probes);
    ego = ad::slice_rows(all, 0, T);
    if (n_cells > 0) neighbors = ad::slice_rows(all, T, static_cast<Eigen::Index>(n_cells) * T);
  }

  ad::AttentionPattern pattern;
  std::vector<std::uint32_t> keys;
  for (int t = 0; t < T; ++t) {
    keys.clear();
    for (int i = 0; i < n_cells; ++i) {
      if (s.occupied(cells[static_cast<std::size_t>(i)], t)) keys.push_back(static_cast<std::uint32_t>(i * T + t));
    }
    pattern.add_query(keys);
  }
  auto social = social_attention_graph(g, ego, neighbors, pattern, trace ? &trace->social : nullptr);
  return temporal_graph(g, social, trace ? &trace->temporal : nullptr);
}

// ---------------------------------------------------------------------------
// Value-level operations

namespace detail {

template <class S>
GaussianTrajectory to_gaussian(const Matrix<S>& mean, const Matrix<S>& sigma, Eigen::Index begin, int F) {
  GaussianTrajectory g;
  g.resize(static_cast<std::size_t>(F));
  for (int t = 0; t < F; ++t) {
    g.mu_x[t] = static_cast<double>(mean(begin + t, 0));
    g.mu_y[t] = static_cast<double>(mean(begin + t, 1));
    g.sigma_x[t] = static_cast<double>(sigma(begin + t, 0));
    g.sigma_y[t] = static_cast<double>(sigma(begin + t, 1));
  }
  return g;
}

template <class S>
ManeuverDistribution to_distribution(const Matrix<S>& lat, const Matrix<S>& lon) {
  ManeuverDistribution d;
  for (int i = 0; i < 3; ++i) {
    d.p_lateral[i] = static_cast<double>(lat(0, i));
    d.p_longitudinal[i] = static_cast<double>(lon(0, i));
  }
  return d;
}

}  // namespace detail

/// Motion encoder on one T x D_in history (ego encoder when separate).
template <class S>
Matrix<S> encode_motion(const Matrix<S>& history, const ModelParameters<S>& params, const ModelConfig& cfg) {
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg);
  const auto& m = params.ego_motion ? *params.ego_motion : params.motion;
  return encode_motion_graph(g, m, history, 1).value();
}

/// Social attention for one step: `ego` is 1 x d, `grid` is 39 x d, `mask`
/// marks occupied cells.
template <class S>
Matrix<S> social_attention(const Matrix<S>& ego, const Matrix<S>& grid, const std::vector<bool>& mask,
                           const ModelParameters<S>& params, const ModelConfig& cfg,
                           ad::AttentionProbe<S>* probe = nullptr) {
  if (ego.rows() != 1 || grid.rows() != GridSpec::kCells || mask.size() != GridSpec::kCells) {
    throw ad::ShapeError("social_attention: expects a 1 x d ego row, 39 x d grid and 39 mask entries");
  }
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg);
  ad::AttentionPattern pattern;
  std::vector<std::uint32_t> keys;
  for (std::uint32_t c = 0; c < GridSpec::kCells; ++c) {
    if (mask[c]) keys.push_back(c);
  }
  pattern.add_query(keys);
  return social_attention_graph(g, g.constant(ego), std::optional(g.constant(grid)), pattern, probe).value();
}

template <class S>
Matrix<S> temporal_dependency(const Matrix<S>& h, const ModelParameters<S>& params, const ModelConfig& cfg,
                              ad::AttentionProbe<S>* probe = nullptr) {
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg);
  return temporal_graph(g, g.constant(h), probe).value();
}

template <class S>
std::pair<Matrix<S>, ManeuverDistribution> intention_heads(const Matrix<S>& h_last, const ModelParameters<S>& params,
                                                          const ModelConfig& cfg) {
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg);
  auto out = intention_graph(g, g.constant(h_last));
  return {out.state.value(), detail::to_distribution(out.lateral.value(), out.longitudinal.value())};
}

/// F x d decoder rows for one maneuver mode.
template <class S>
Matrix<S> fuse_and_decode(const Matrix<S>& encoded, int mode, const ModelParameters<S>& params,
                          const ModelConfig& cfg, ForwardTrace<S>* trace = nullptr) {
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg);
  auto queries = g.linear(params.mode_embed, g.constant(mode_one_hot<S>({mode})));
  return fuse_decode_graph(g, g.constant(encoded), queries, trace).value();
}

template <class S>
GaussianTrajectory gaussian_head(const Matrix<S>& h, const ModelParameters<S>& params, const ModelConfig& cfg) {
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg);
  auto out = gaussian_head_graph(g, g.constant(h));
  return detail::to_gaussian(out.mean.value(), out.sigma.value(), 0, static_cast<int>(h.rows()));
}

/// Full MIAT forward pass: nine maneuver-conditioned trajectories plus the
/// maneuver distribution.
template <class S>
PredictionOutput forward(const TrajectorySample& sample, const ModelParameters<S>& params, const ModelConfig& cfg,
                         ForwardTrace<S>* trace = nullptr, bool check_softmax = false) {
  if (params.variant != ModelVariant::Miat) throw ValidationError("forward() needs MIAT parameters");
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg, nullptr, nullptr, check_softmax);
  auto encoded = encode_scene_graph(g, sample, trace);
  auto intent = intention_graph(g, ad::slice_rows(encoded, encoded.rows() - 1, 1));
  std::vector<int> modes(kModes);
  for (int m = 0; m < kModes; ++m) modes[m] = m;
  auto queries = g.linear(params.mode_embed, g.constant(mode_one_hot<S>(modes)));
  auto head = sample_head_graph(g, fuse_decode_graph(g, encoded, queries, trace), sample, kModes);
  PredictionOutput out;
  for (int m = 0; m < kModes; ++m) {
    out.modes[m] = detail::to_gaussian(head.mean.value(), head.sigma.value(),
                                       static_cast<Eigen::Index>(m) * cfg.future_len, cfg.future_len);
  }
  out.maneuvers = detail::to_distribution(intent.lateral.value(), intent.longitudinal.value());
  return out;
}

/// Baseline: same encoder stack, a single unconditioned decode.
template <class S>
GaussianTrajectory vanilla_forward(const TrajectorySample& sample, const ModelParameters<S>& params,
                                   const ModelConfig& cfg, ForwardTrace<S>* trace = nullptr) {
  if (params.variant != ModelVariant::Vanilla) throw ValidationError("vanilla_forward() needs vanilla parameters");
  ad::Tape<S> tape;
  Graph<S> g(tape, params, cfg);
  auto encoded = encode_scene_graph(g, sample, trace);
  auto head = sample_head_graph(g, fuse_decode_graph(g, encoded, g.leaf(params.base_query), trace), sample, 1);
  return detail::to_gaussian(head.mean.value(), head.sigma.value(), 0, cfg.future_len);
}

}  // namespace miat
