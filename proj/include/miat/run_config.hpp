#pragma once

// Declarative run configuration: JSON defaults, file merging, dotted-key
// overrides and conversion into the per-module config structs.

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "miat/ablation.hpp"
#include "miat/ngsim.hpp"
#include "miat/synthetic.hpp"
#include "miat/training.hpp"

namespace miat::cfg {

using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline json default_config() {
  const ModelConfig m;
  const TrainConfig t;
  const LossConfig l;
  const ngsim::SampleConfig s;
  const GradCheckOptions gc;
  json model = m.to_json();
  // Sequence and input sizes follow the dataset.
  model.erase("history_len");
  model.erase("future_len");
  model.erase("input_dim");
  model.erase("cell_length");
  json train = t.to_json();
  train.erase("seed");
  train.erase("threads");
  return {
      {"seed", 1},
      {"threads", 1},
      {"out_dir", "out"},
      {"dataset", ""},
      {"checkpoint", ""},
      {"input", ""},
      {"resume", ""},
      {"data",
       {{"history_len", s.history_len},
        {"future_len", s.future_len},
        {"downsample", s.downsample},
        {"stride", s.stride},
        {"label_window", s.label_window},
        {"lon_eps", s.lon_eps},
        {"include_kinematics", s.include_kinematics},
        {"cell_length", s.grid.cell_length},
        {"fractions", {0.7, 0.1, 0.2}}}},
      {"synth", {{"n_per_class", 10}, {"n_neighbors", 2}, {"noise_sigma", 0.0}, {"maneuver_lead", 18}}},
      {"model", model},
      {"loss", l.to_json()},
      {"train", train},
      {"eval", {{"split", "test"}, {"cumulative", false}}},
      {"ablate", {{"lambdas", {1.0, 10.0, 50.0, 80.0, 100.0, 200.0}}, {"include_vanilla", true}}},
      {"gradcheck",
       {{"n_params", gc.n_params},
        {"fd_step", gc.fd_step},
        {"probe_seed", gc.seed},
        {"sample_seed", 11},
        {"nll", gc.nll},
        {"tolerance", 1e-4}}},
      {"dump", {{"split", "test"}, {"max_samples", 20}}}};
}

/// Dotted paths of every leaf, in document order.
inline std::vector<std::string> leaf_keys(const json& j, const std::string& prefix = "") {
  std::vector<std::string> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      auto sub = leaf_keys(*it, key);
      out.insert(out.end(), sub.begin(), sub.end());
    } else {
      out.push_back(key);
    }
  }
  return out;
}

inline json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return json::json_pointer(p);
}

inline bool has_leaf(const json& cfg, const std::string& key) {
  const auto ptr = pointer(key);
  return cfg.contains(ptr) && !cfg.at(ptr).is_object();
}

/// Parses `text` as a value of the same kind as `like`.
inline json parse_like(const json& like, const std::string& key, const std::string& text) {
  auto bad = [&] { return ValidationError("invalid value for " + key + ": '" + text + "'"); };
  try {
    if (like.is_string()) return text;
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw bad();
    }
    if (like.is_array()) {
      if (!text.empty() && text.front() == '[') return json::parse(text);
      json arr = json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) arr.push_back(std::stod(item));
      return arr;
    }
    std::size_t used = 0;
    if (like.is_number_integer() || like.is_number_unsigned()) {
      const long long v = std::stoll(text, &used);
      if (used != text.size()) throw bad();
      return v;
    }
    const double v = std::stod(text, &used);
    if (used != text.size()) throw bad();
    return v;
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception&) {
    throw bad();
  }
}

inline void set_value(json& cfg, const std::string& key, const std::string& text) {
  if (!has_leaf(cfg, key)) throw UsageError("unknown config key: " + key);
  const auto ptr = pointer(key);
  cfg[ptr] = parse_like(cfg.at(ptr), key, text);
}

/// Overlays `file` on `base`; keys absent from `base` are rejected.
inline void merge(json& base, const json& file, const std::string& prefix = "") {
  if (!file.is_object()) throw ValidationError("config" + (prefix.empty() ? "" : " section " + prefix) + " must be an object");
  for (auto it = file.begin(); it != file.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (key == "command") continue;  // written by the echo
    if (!base.contains(it.key())) throw ValidationError("unknown config key: " + key);
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge(slot, *it, key);
    } else {
      const bool same = (slot.is_number() && it->is_number()) || slot.type() == it->type();
      if (!same) throw ValidationError("wrong type for config key: " + key);
      slot = *it;
    }
  }
}

// ---------------------------------------------------------------------------
// Views

inline ngsim::SampleConfig sample_config(const json& c) {
  const auto& d = c.at("data");
  ngsim::SampleConfig s;
  s.history_len = d.at("history_len");
  s.future_len = d.at("future_len");
  s.downsample = d.at("downsample");
  s.stride = d.at("stride");
  s.label_window = d.at("label_window");
  s.lon_eps = d.at("lon_eps");
  s.include_kinematics = d.at("include_kinematics");
  s.grid.cell_length = d.at("cell_length");
  if (s.history_len < 2 || s.future_len < 1 || s.downsample < 1 || s.stride < 1 || s.label_window < 1) {
    throw ValidationError("data: history_len >= 2, future_len, downsample, stride and label_window >= 1 required");
  }
  return s;
}

inline std::array<double, 3> fractions(const json& c) {
  const auto& f = c.at("data").at("fractions");
  if (f.size() != 3) throw ValidationError("data.fractions must have three entries");
  std::array<double, 3> out{f[0].get<double>(), f[1].get<double>(), f[2].get<double>()};
  for (double x : out) {
    if (!(x >= 0)) throw ValidationError("data.fractions must be non-negative");
  }
  if (std::abs(out[0] + out[1] + out[2] - 1.0) > 1e-9) throw ValidationError("data.fractions must sum to 1");
  return out;
}

inline synth::DatasetOptions synth_options(const json& c) {
  synth::DatasetOptions o;
  o.n_neighbors = c.at("synth").at("n_neighbors");
  o.noise_sigma = c.at("synth").at("noise_sigma");
  o.maneuver_lead = c.at("synth").at("maneuver_lead");
  o.samples = sample_config(c);
  o.fractions = fractions(c);
  o.threads = c.at("threads");
  if (o.n_neighbors < 0 || o.n_neighbors > 8) throw ValidationError("synth.n_neighbors must be in [0, 8]");
  if (!(o.noise_sigma >= 0)) throw ValidationError("synth.noise_sigma must be >= 0");
  if (o.maneuver_lead < 0 || o.maneuver_lead > synth::kManeuverFrames) {
    throw ValidationError("synth.maneuver_lead must be in [0, " + std::to_string(synth::kManeuverFrames) + "]");
  }
  return o;
}

/// Model config with sequence sizes taken from the data section.
inline ModelConfig model_config(const json& c) {
  json m = c.at("model");
  const auto s = sample_config(c);
  m["history_len"] = s.history_len;
  m["future_len"] = s.future_len;
  m["input_dim"] = s.input_dim();
  m["cell_length"] = s.grid.cell_length;
  auto mc = ModelConfig::from_json(m);
  mc.validate();
  return mc;
}

/// Model config with sequence sizes taken from an actual sample.
inline ModelConfig model_config(const json& c, const TrajectorySample& like) {
  auto mc = model_config(c);
  mc.history_len = like.history_len;
  mc.future_len = like.future_len;
  mc.input_dim = like.input_dim;
  mc.validate();
  return mc;
}

inline LossConfig loss_config(const json& c) {
  auto l = LossConfig::from_json(c.at("loss"));
  l.validate();
  return l;
}

inline TrainConfig train_config(const json& c) {
  json t = c.at("train");
  t["seed"] = c.at("seed");
  t["threads"] = c.at("threads");
  auto tc = TrainConfig::from_json(t);
  tc.validate();
  return tc;
}

inline GradCheckOptions gradcheck_options(const json& c) {
  const auto& g = c.at("gradcheck");
  GradCheckOptions o;
  o.n_params = g.at("n_params");
  o.fd_step = g.at("fd_step");
  o.seed = g.at("probe_seed");
  o.nll = g.at("nll");
  if (o.n_params < 1 || !(o.fd_step > 0)) throw ValidationError("gradcheck: n_params >= 1 and fd_step > 0 required");
  return o;
}

inline std::vector<double> ablation_lambdas(const json& c) {
  std::vector<double> out;
  for (const auto& v : c.at("ablate").at("lambdas")) {
    const double l = v.get<double>();
    if (!(l >= 0)) throw ValidationError("ablate.lambdas must be non-negative");
    out.push_back(l);
  }
  if (out.empty()) throw ValidationError("ablate.lambdas must not be empty");
  return out;
}

inline const std::vector<TrajectorySample>& split_part(const ngsim::DatasetSplit& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "validation") return d.validation;
  if (name == "test") return d.test;
  throw ValidationError("unknown split '" + name + "' (train, validation or test)");
}

inline std::string require_path(const json& c, const std::string& key) {
  const std::string v = c.at(key);
  if (v.empty()) throw ValidationError("missing required field: " + key);
  return v;
}

}  // namespace miat::cfg
