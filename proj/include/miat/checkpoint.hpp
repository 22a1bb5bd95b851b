#pragma once

// Binary checkpoints: parameters, the model config (as JSON and as a hash),
// free-form run metadata and, optionally, optimizer state for resuming.
//
//   "MIATCKPT" u32 version u32 scalar_bytes
//   string model_config_json  u64 model_config_hash  string metadata_json
//   u32 n_tensors { string name u64 rows u64 cols scalar[rows*cols] }
//   u8 has_state [ i32 next_epoch f64 best_metric i32 best_epoch u64 step
//                  moments m, v in tensor order ]
//   u64 fnv1a of everything above

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "miat/binary_io.hpp"
#include "miat/model.hpp"

namespace miat {

template <class S>
struct OptimizerState {
  int next_epoch = 0;
  double best_metric = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::uint64_t step = 0;
  ModelParameters<S> m;
  ModelParameters<S> v;
};

template <class S>
struct Checkpoint {
  ModelConfig model;
  nlohmann::json metadata = nlohmann::json::object();
  ModelParameters<S> params;
  std::optional<OptimizerState<S>> state;
};

namespace detail {

inline constexpr std::string_view kCheckpointMagic = "MIATCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class S>
void put_tensors(io::Writer& w, const ModelParameters<S>& p) {
  const auto entries = p.entries();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put_string(e.name);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(e.tensor->rows()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(e.tensor->cols()));
    w.put_array(std::span<const S>(e.tensor->data(), static_cast<std::size_t>(e.tensor->size())));
  }
}

/// Reads tensors stored with `stored_bytes`-wide scalars into `p`, whose
/// shapes come from the config.
template <class S>
void get_tensors(io::Reader& r, ModelParameters<S>& p, std::uint32_t stored_bytes) {
  auto entries = p.entries();
  const auto n = r.get<std::uint32_t>();
  if (n != entries.size()) throw io::FormatError("checkpoint tensor count does not match the model config");
  for (auto& e : entries) {
    const auto name = r.get_string();
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (name != e.name || rows != static_cast<std::uint64_t>(e.tensor->rows()) ||
        cols != static_cast<std::uint64_t>(e.tensor->cols())) {
      throw io::FormatError("checkpoint tensor " + name + " does not match " + e.name);
    }
    const auto count = static_cast<std::size_t>(rows * cols);
    if (stored_bytes == sizeof(float)) {
      std::vector<float> buf(count);
      r.get_array(std::span<float>(buf));
      for (std::size_t i = 0; i < count; ++i) e.tensor->data()[i] = static_cast<S>(buf[i]);
    } else {
      std::vector<double> buf(count);
      r.get_array(std::span<double>(buf));
      for (std::size_t i = 0; i < count; ++i) e.tensor->data()[i] = static_cast<S>(buf[i]);
    }
  }
}

}  // namespace detail

template <class S>
std::vector<std::uint8_t> encode_checkpoint(const ModelParameters<S>& params, const ModelConfig& model,
                                            const nlohmann::json& metadata = nlohmann::json::object(),
                                            const OptimizerState<S>* state = nullptr) {
  check_shapes(params, model);
  io::Writer w;
  w.put_raw(detail::kCheckpointMagic);
  w.put<std::uint32_t>(detail::kCheckpointVersion);
  w.put<std::uint32_t>(sizeof(S));
  w.put_string(model.to_json().dump());
  w.put<std::uint64_t>(model.hash());
  w.put_string(metadata.dump());
  detail::put_tensors(w, params);
  w.put<std::uint8_t>(state ? 1 : 0);
  if (state) {
    w.put<std::int32_t>(state->next_epoch);
    w.put<double>(state->best_metric);
    w.put<std::int32_t>(state->best_epoch);
    w.put<std::uint64_t>(state->step);
    detail::put_tensors(w, state->m);
    detail::put_tensors(w, state->v);
  }
  io::seal(w);
  return std::move(w.bytes());
}

/// Decodes a checkpoint. With `expected`, a model config whose hash differs
/// is rejected before any tensor is read.
template <class S>
Checkpoint<S> decode_checkpoint(std::span<const std::uint8_t> bytes, const ModelConfig* expected = nullptr) {
  auto body = io::unseal(bytes, "checkpoint");
  io::Reader r(body);
  if (r.get_raw(detail::kCheckpointMagic.size()) != detail::kCheckpointMagic) {
    throw io::FormatError("not a checkpoint file");
  }
  if (r.get<std::uint32_t>() != detail::kCheckpointVersion) throw io::FormatError("unsupported checkpoint version");
  const auto scalar_bytes = r.get<std::uint32_t>();
  if (scalar_bytes != sizeof(float) && scalar_bytes != sizeof(double)) {
    throw io::FormatError("unsupported checkpoint scalar width");
  }
  Checkpoint<S> ck;
  ck.model = ModelConfig::from_json(nlohmann::json::parse(r.get_string()));
  const auto hash = r.get<std::uint64_t>();
  if (hash != ck.model.hash()) throw io::FormatError("checkpoint config hash is inconsistent");
  if (expected && expected->hash() != hash) {
    throw ValidationError("checkpoint model config does not match the requested model config");
  }
  ck.metadata = nlohmann::json::parse(r.get_string());
  ck.params = init_parameters<S>(ck.model, 0);
  detail::get_tensors(r, ck.params, scalar_bytes);
  if (r.get<std::uint8_t>() != 0) {
    OptimizerState<S> st;
    st.next_epoch = r.get<std::int32_t>();
    st.best_metric = r.get<double>();
    st.best_epoch = r.get<std::int32_t>();
    st.step = r.get<std::uint64_t>();
    st.m = ck.params.zeros_like();
    st.v = ck.params.zeros_like();
    detail::get_tensors(r, st.m, scalar_bytes);
    detail::get_tensors(r, st.v, scalar_bytes);
    ck.state = std::move(st);
  }
  if (r.remaining() != 0) throw io::FormatError("trailing bytes in checkpoint");
  return ck;
}

template <class S>
void save_checkpoint(const std::filesystem::path& path, const ModelParameters<S>& params, const ModelConfig& model,
                     const nlohmann::json& metadata = nlohmann::json::object(),
                     const OptimizerState<S>* state = nullptr) {
  io::write_file(path, encode_checkpoint(params, model, metadata, state));
}

template <class S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  const auto bytes = io::read_file(path);
  return decode_checkpoint<S>(bytes, expected);
}

}  // namespace miat
