#pragma once

// NGSIM-style ingestion: CSV parsing with unit conversion, lane capping,
// maneuver labeling on raw 10 Hz tracks, social-grid assignment, sliding
// window sample construction, vehicle-disjoint splits and the binary dataset
// format.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "miat/binary_io.hpp"
#include "miat/parallel.hpp"
#include "miat/types.hpp"

namespace miat::ngsim {

inline constexpr double kFeetToMeters = 0.3048;
inline constexpr int kMaxLaneId = 6;

using Track = std::span<const VehicleRecord>;

// ---------------------------------------------------------------------------
// Parsing

struct ParseResult {
  std::vector<VehicleRecord> records;  // sorted by (vehicle_id, frame_id)
  std::size_t rows_read = 0;
  std::size_t rows_skipped = 0;  // malformed, invalid or duplicate rows
};

/// Caps lane IDs at six; lanes below one are rejected.
inline int cap_lane_id(int lane, int max_lane = kMaxLaneId) {
  if (lane < 1) throw ValidationError("lane id must be >= 1, got " + std::to_string(lane));
  return std::min(lane, max_lane);
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    auto comma = line.find(',', start);
    auto cell = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) {
      cell.remove_suffix(1);
    }
    cells.push_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) return false;
  if constexpr (std::is_floating_point_v<T>) return std::isfinite(out);
  return true;
}

}  // namespace detail

/// Reads an NGSIM-format CSV (feet, ft/s, 10 Hz). Required columns:
/// Vehicle_ID, Frame_ID, Local_X, Local_Y, Lane_ID, v_Vel. v_Acc is optional.
inline ParseResult parse_records(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty CSV input: header row required");
  const auto header = detail::split_csv_line(line);
  auto column = [&](std::string_view name, bool required) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    if (required) throw ValidationError("missing required column: " + std::string(name));
    return std::nullopt;
  };
  const auto c_id = *column("Vehicle_ID", true);
  const auto c_frame = *column("Frame_ID", true);
  const auto c_x = *column("Local_X", true);
  const auto c_y = *column("Local_Y", true);
  const auto c_lane = *column("Lane_ID", true);
  const auto c_vel = *column("v_Vel", true);
  const auto c_acc = column("v_Acc", false);
  const std::size_t needed = std::max({c_id, c_frame, c_x, c_y, c_lane, c_vel, c_acc.value_or(0)}) + 1;

  ParseResult result;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++result.rows_read;
    const auto cells = detail::split_csv_line(line);
    VehicleRecord r;
    double x = 0, y = 0, v = 0, a = 0;
    long long lane = 0;
    bool ok = cells.size() >= needed && detail::parse_number(cells[c_id], r.vehicle_id) &&
              detail::parse_number(cells[c_frame], r.frame_id) && detail::parse_number(cells[c_x], x) &&
              detail::parse_number(cells[c_y], y) && detail::parse_number(cells[c_lane], lane) &&
              detail::parse_number(cells[c_vel], v);
    if (ok && c_acc) ok = detail::parse_number(cells[*c_acc], a);
    if (!ok || lane < 1 || v < 0) {
      ++result.rows_skipped;
      continue;
    }
    r.local_x = x * kFeetToMeters;
    r.local_y = y * kFeetToMeters;
    r.lane_id = cap_lane_id(static_cast<int>(std::min<long long>(lane, 1 << 20)));
    r.velocity = v * kFeetToMeters;
    r.acceleration = a * kFeetToMeters;
    result.records.push_back(r);
  }
  std::stable_sort(result.records.begin(), result.records.end(), [](const auto& a, const auto& b) {
    return a.vehicle_id != b.vehicle_id ? a.vehicle_id < b.vehicle_id : a.frame_id < b.frame_id;
  });
  auto dup = std::unique(result.records.begin(), result.records.end(), [](const auto& a, const auto& b) {
    return a.vehicle_id == b.vehicle_id && a.frame_id == b.frame_id;
  });
  result.rows_skipped += static_cast<std::size_t>(result.records.end() - dup);
  result.records.erase(dup, result.records.end());
  return result;
}

/// Splits (vehicle, frame)-sorted records into one contiguous track per vehicle.
inline std::vector<Track> group_by_vehicle(std::span<const VehicleRecord> records) {
  std::vector<Track> tracks;
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= records.size(); ++i) {
    if (i == records.size() || records[i].vehicle_id != records[begin].vehicle_id) {
      if (i > begin) tracks.push_back(records.subspan(begin, i - begin));
      begin = i;
    }
  }
  return tracks;
}

/// Record of a frame-sorted track at exactly `frame`, if present.
inline const VehicleRecord* at_frame(Track track, std::int64_t frame) {
  auto it = std::lower_bound(track.begin(), track.end(), frame,
                             [](const VehicleRecord& r, std::int64_t f) { return r.frame_id < f; });
  if (it == track.end() || it->frame_id != frame) return nullptr;
  return &*it;
}

/// Sub-range of a track with frame ids in [first, last].
inline Track frames_between(Track track, std::int64_t first, std::int64_t last) {
  auto lo = std::lower_bound(track.begin(), track.end(), first,
                             [](const VehicleRecord& r, std::int64_t f) { return r.frame_id < f; });
  auto hi = std::upper_bound(track.begin(), track.end(), last,
                             [](std::int64_t f, const VehicleRecord& r) { return f < r.frame_id; });
  if (hi <= lo) return {};
  return track.subspan(static_cast<std::size_t>(lo - track.begin()), static_cast<std::size_t>(hi - lo));
}

// ---------------------------------------------------------------------------
// Maneuver labels

/// Compares the lane at both ends of [anchor - window, anchor + window],
/// clipped to the track. Lane 1 is leftmost, so a decreasing id is a left change.
inline Lateral label_lateral(Track track, std::int64_t anchor, int window = 40) {
  auto span = frames_between(track, anchor - window, anchor + window);
  if (span.empty()) return Lateral::LaneKeep;
  const int start = span.front().lane_id;
  const int end = span.back().lane_id;
  if (end < start) return Lateral::ChangeLeft;
  if (end > start) return Lateral::ChangeRight;
  return Lateral::LaneKeep;
}

/// Mean speed before vs after the anchor; a relative change beyond eps
/// decides acceleration or deceleration.
inline Longitudinal label_longitudinal(Track track, std::int64_t anchor, int window = 40, double eps = 0.05) {
  auto mean_speed = [](Track t) {
    if (t.empty()) return 0.0;
    double s = 0;
    for (const auto& r : t) s += r.velocity;
    return s / static_cast<double>(t.size());
  };
  const double v_hist = mean_speed(frames_between(track, anchor - window, anchor));
  const double v_fut = mean_speed(frames_between(track, anchor, anchor + window));
  if (v_hist == 0.0) return v_fut > 0.0 ? Longitudinal::Accelerate : Longitudinal::Constant;
  if (v_fut > (1.0 + eps) * v_hist) return Longitudinal::Accelerate;
  if (v_fut < (1.0 - eps) * v_hist) return Longitudinal::Decelerate;
  return Longitudinal::Constant;
}

// ---------------------------------------------------------------------------
// Grid

/// Cell index (column * 13 + row) of `neighbor` in the ego-centred grid.
inline std::optional<int> grid_assign(const VehicleRecord& ego, const VehicleRecord& neighbor, const GridSpec& spec) {
  if (ego.vehicle_id == neighbor.vehicle_id) return std::nullopt;
  const int dlane = neighbor.lane_id - ego.lane_id;
  if (dlane < -1 || dlane > 1) return std::nullopt;
  const double rel = (neighbor.local_y - ego.local_y) / spec.cell_length;
  if (!std::isfinite(rel) || std::abs(rel) > 7.0) return std::nullopt;
  const int row = GridSpec::kEgoRow + static_cast<int>(std::round(rel));
  if (row < 0 || row >= GridSpec::kRows) return std::nullopt;
  const int column = 1 + dlane;
  return column * GridSpec::kRows + row;
}

// ---------------------------------------------------------------------------
// Samples

struct SampleConfig {
  int history_len = 16;  // T at the downsampled rate
  int future_len = 25;   // F at the downsampled rate
  int downsample = 2;    // raw frames per model step (10 Hz -> 5 Hz)
  int stride = 1;        // anchor spacing, in model steps
  int label_window = 40;  // raw frames
  double lon_eps = 0.05;
  bool include_kinematics = false;  // append velocity and acceleration features
  GridSpec grid;

  int input_dim() const { return include_kinematics ? 4 : 2; }
  int raw_history_frames() const { return downsample * (history_len - 1) + 1; }
  int raw_future_frames() const { return downsample * future_len; }
};

namespace detail {

/// (frame, record index) pairs sorted by frame for neighbour lookup.
class FrameIndex {
 public:
  explicit FrameIndex(std::span<const VehicleRecord> records) : records_(records) {
    order_.resize(records.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::stable_sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) {
      return records[a].frame_id < records[b].frame_id;
    });
  }

  template <class Fn>
  void for_each_at(std::int64_t frame, Fn&& fn) const {
    auto lo = std::lower_bound(order_.begin(), order_.end(), frame,
                               [&](std::size_t i, std::int64_t f) { return records_[i].frame_id < f; });
    for (auto it = lo; it != order_.end() && records_[*it].frame_id == frame; ++it) fn(records_[*it]);
  }

 private:
  std::span<const VehicleRecord> records_;
  std::vector<std::size_t> order_;
};

inline void write_features(float* out, const VehicleRecord& r, const VehicleRecord& origin, bool kinematics) {
  out[0] = static_cast<float>(r.local_x - origin.local_x);
  out[1] = static_cast<float>(r.local_y - origin.local_y);
  if (kinematics) {
    out[2] = static_cast<float>(r.velocity);
    out[3] = static_cast<float>(r.acceleration);
  }
}

inline std::vector<TrajectorySample> samples_for_track(Track track, const FrameIndex& index,
                                                      const SampleConfig& cfg) {
  std::vector<TrajectorySample> out;
  if (track.empty()) return out;
  const int ds = cfg.downsample;
  const int T = cfg.history_len;
  const int F = cfg.future_len;
  const int D = cfg.input_dim();
  const std::int64_t first_anchor = track.front().frame_id + ds * (T - 1);
  const std::int64_t last_anchor = track.back().frame_id - static_cast<std::int64_t>(ds) * F;

  for (std::int64_t anchor = first_anchor; anchor <= last_anchor; anchor += static_cast<std::int64_t>(ds) * cfg.stride) {
    std::vector<const VehicleRecord*> hist(T), fut(F);
    bool complete = true;
    for (int t = 0; t < T && complete; ++t) {
      hist[t] = at_frame(track, anchor - static_cast<std::int64_t>(ds) * (T - 1 - t));
      complete = hist[t] != nullptr;
    }
    for (int k = 0; k < F && complete; ++k) {
      fut[k] = at_frame(track, anchor + static_cast<std::int64_t>(ds) * (k + 1));
      complete = fut[k] != nullptr;
    }
    if (!complete) continue;

    const VehicleRecord& origin = *hist[T - 1];
    auto s = TrajectorySample::zeros(T, F, D);
    s.ego_id = origin.vehicle_id;
    s.anchor_frame = anchor;
    for (int t = 0; t < T; ++t) {
      detail::write_features(&s.ego(t, 0), *hist[t], origin, cfg.include_kinematics);
      // Nearest vehicle to the cell centre wins when several share a cell.
      std::array<const VehicleRecord*, GridSpec::kCells> occupant{};
      std::array<double, GridSpec::kCells> dist{};
      const VehicleRecord& ego = *hist[t];
      index.for_each_at(ego.frame_id, [&](const VehicleRecord& other) {
        auto cell = grid_assign(ego, other, cfg.grid);
        if (!cell) return;
        const int row = *cell % GridSpec::kRows;
        const double d = std::abs(other.local_y - ego.local_y - (row - GridSpec::kEgoRow) * cfg.grid.cell_length);
        auto& cur = occupant[*cell];
        if (!cur || d < dist[*cell] || (d == dist[*cell] && other.vehicle_id < cur->vehicle_id)) {
          cur = &other;
          dist[*cell] = d;
        }
      });
      for (int c = 0; c < GridSpec::kCells; ++c) {
        if (!occupant[c]) continue;
        s.set_occupied(c, t, true);
        detail::write_features(&s.neighbor(c, t, 0), *occupant[c], origin, cfg.include_kinematics);
      }
    }
    for (int k = 0; k < F; ++k) {
      s.future[2 * k] = static_cast<float>(fut[k]->local_x - origin.local_x);
      s.future[2 * k + 1] = static_cast<float>(fut[k]->local_y - origin.local_y);
    }
    s.label.lateral = label_lateral(track, anchor, cfg.label_window);
    s.label.longitudinal = label_longitudinal(track, anchor, cfg.label_window, cfg.lon_eps);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

/// One sample per (vehicle, anchor) with a full downsampled history and
/// future. `records` must be sorted by (vehicle_id, frame_id). When `targets`
/// is given, only those vehicles become egos; all records still act as
/// neighbours. Output order: vehicle id, then anchor frame.
inline std::vector<TrajectorySample> build_samples(std::span<const VehicleRecord> records, const SampleConfig& cfg,
                                                   std::span<const std::int64_t> targets = {}, int threads = 1) {
  if (cfg.history_len < 1 || cfg.future_len < 1 || cfg.downsample < 1 || cfg.stride < 1) {
    throw ValidationError("sample config dimensions must be >= 1");
  }
  auto tracks = group_by_vehicle(records);
  if (!targets.empty()) {
    std::erase_if(tracks, [&](Track t) {
      return std::find(targets.begin(), targets.end(), t.front().vehicle_id) == targets.end();
    });
  }
  detail::FrameIndex index(records);
  std::vector<std::vector<TrajectorySample>> per_track(tracks.size());
  parallel_for(tracks.size(), threads,
               [&](std::size_t i) { per_track[i] = detail::samples_for_track(tracks[i], index, cfg); });
  std::vector<TrajectorySample> out;
  for (auto& v : per_track) {
    for (auto& s : v) out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct DatasetSplit {
  std::vector<TrajectorySample> train, validation, test;

  std::array<std::vector<TrajectorySample>*, 3> parts() { return {&train, &validation, &test}; }
  std::array<const std::vector<TrajectorySample>*, 3> parts() const { return {&train, &validation, &test}; }
  std::size_t size() const { return train.size() + validation.size() + test.size(); }
  bool operator==(const DatasetSplit&) const = default;
};

namespace detail {

/// Lexicographic (max deviation, sum of squared deviations) of split fractions.
inline std::pair<double, double> split_objective(const std::array<double, 3>& counts, double total,
                                                 const std::array<double, 3>& fractions) {
  double worst = 0, sq = 0;
  for (int k = 0; k < 3; ++k) {
    const double dev = std::abs(counts[k] / total - fractions[k]);
    worst = std::max(worst, dev);
    sq += dev * dev;
  }
  return {worst, sq};
}

/// Exact assignment by dynamic programming over reachable (train, validation)
/// sample counts. Each cell stores the 1-based index of the vehicle that first
/// reached it, so the assignment can be walked back. Returns false when the
/// table or the sweep would be too large.
inline bool split_exact(const std::vector<double>& sizes, double total, const std::array<double, 3>& fractions,
                        std::vector<int>& split) {
  constexpr int kMaxTotal = 3000;
  const int W = static_cast<int>(total) + 1;
  if (total > kMaxTotal || 0.5 * W * W * static_cast<double>(sizes.size()) > 2e8) return false;
  auto at = [W](int a, int b) { return static_cast<std::size_t>(a) * W + b; };
  std::vector<std::uint16_t> first(static_cast<std::size_t>(W) * W, 0xFFFF);
  first[at(0, 0)] = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const int n = static_cast<int>(sizes[i]);
    const auto tag = static_cast<std::uint16_t>(i + 1);
    // Descending so cells reached in this step are not extended again.
    for (int a = W - 1; a >= 0; --a) {
      for (int b = W - 1 - a; b >= 0; --b) {
        if (first[at(a, b)] != 0xFFFF) continue;
        if ((a >= n && first[at(a - n, b)] < tag) || (b >= n && first[at(a, b - n)] < tag)) first[at(a, b)] = tag;
      }
    }
  }
  int best_a = 0, best_b = 0;
  std::pair<double, double> best{1e300, 1e300};
  for (int a = 0; a < W; ++a) {
    for (int b = 0; a + b < W; ++b) {
      if (first[at(a, b)] == 0xFFFF) continue;
      const auto obj = split_objective({double(a), double(b), total - a - b}, total, fractions);
      if (obj < best) {
        best = obj;
        best_a = a;
        best_b = b;
      }
    }
  }
  split.assign(sizes.size(), 2);
  int a = best_a, b = best_b;
  while (a + b > 0) {
    const int i = first[at(a, b)] - 1;
    const int n = static_cast<int>(sizes[static_cast<std::size_t>(i)]);
    if (a >= n && first[at(a - n, b)] < i + 1) {
      split[static_cast<std::size_t>(i)] = 0;
      a -= n;
    } else {
      split[static_cast<std::size_t>(i)] = 1;
      b -= n;
    }
  }
  return true;
}

}  // namespace detail

/// Assigns whole vehicles to train/validation/test. Vehicles are shuffled with
/// the seed. Small corpora (up to 3000 samples) get the assignment with the
/// smallest worst-case fraction deviation. Larger ones are assigned greedily
/// to the split with the largest sample deficit, then refined by single moves
/// and pairwise swaps.
inline DatasetSplit split_by_vehicle(std::vector<TrajectorySample> samples,
                                     std::array<double, 3> fractions, std::uint64_t seed) {
  const double fsum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(fsum - 1.0) > 1e-9 || *std::min_element(fractions.begin(), fractions.end()) < 0) {
    throw ValidationError("split fractions must be non-negative and sum to 1");
  }
  std::map<std::int64_t, double> count_by_vehicle;
  for (const auto& s : samples) count_by_vehicle[s.ego_id] += 1;
  if (count_by_vehicle.size() < 3) {
    throw ValidationError("split_by_vehicle needs at least 3 vehicles, got " +
                          std::to_string(count_by_vehicle.size()));
  }
  std::vector<std::int64_t> vehicles;
  for (const auto& [id, n] : count_by_vehicle) vehicles.push_back(id);
  std::mt19937_64 rng(seed);
  std::shuffle(vehicles.begin(), vehicles.end(), rng);

  const double total = static_cast<double>(samples.size());
  std::array<double, 3> counts{};
  std::vector<int> split(vehicles.size());
  for (std::size_t i = 0; i < vehicles.size(); ++i) {
    int best = 0;
    double best_deficit = -1e300;
    for (int k = 0; k < 3; ++k) {
      const double deficit = fractions[k] * total - counts[k];
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = k;
      }
    }
    split[i] = best;
    counts[best] += count_by_vehicle[vehicles[i]];
  }

  std::vector<double> sizes;
  for (auto id : vehicles) sizes.push_back(count_by_vehicle[id]);
  if (detail::split_exact(sizes, total, fractions, split)) {
    counts = {};
    for (std::size_t i = 0; i < vehicles.size(); ++i) counts[split[i]] += sizes[i];
  }

  auto objective = [&] { return detail::split_objective(counts, total, fractions); };
  const bool try_swaps = vehicles.size() <= 400;
  for (int pass = 0; pass < 64; ++pass) {
    bool improved = false;
    for (std::size_t i = 0; i < vehicles.size(); ++i) {
      const double n = count_by_vehicle[vehicles[i]];
      for (int k = 0; k < 3; ++k) {
        if (k == split[i]) continue;
        const auto before = objective();
        counts[split[i]] -= n;
        counts[k] += n;
        if (objective() < before) {
          split[i] = k;
          improved = true;
        } else {
          counts[k] -= n;
          counts[split[i]] += n;
        }
      }
    }
    if (try_swaps) {
      for (std::size_t i = 0; i < vehicles.size(); ++i) {
        for (std::size_t j = i + 1; j < vehicles.size(); ++j) {
          if (split[i] == split[j]) continue;
          const double ni = count_by_vehicle[vehicles[i]];
          const double nj = count_by_vehicle[vehicles[j]];
          if (ni == nj) continue;
          const auto before = objective();
          counts[split[i]] += nj - ni;
          counts[split[j]] += ni - nj;
          if (objective() < before) {
            std::swap(split[i], split[j]);
            improved = true;
          } else {
            counts[split[i]] -= nj - ni;
            counts[split[j]] -= ni - nj;
          }
        }
      }
    }
    if (!improved) break;
  }

  std::unordered_map<std::int64_t, int> assignment;
  for (std::size_t i = 0; i < vehicles.size(); ++i) assignment[vehicles[i]] = split[i];
  DatasetSplit out;
  auto parts = out.parts();
  for (auto& s : samples) parts[assignment[s.ego_id]]->push_back(std::move(s));
  return out;
}

// ---------------------------------------------------------------------------
// Binary dataset format
//
//   "MIATDSET" | u32 version | u32 T | u32 F | u32 D_in
//   3 x section { u64 sample count | u64 byte length | samples }
//   u64 FNV-1a checksum of everything above
//
// sample: i64 ego_id | i64 anchor | u8 lateral | u8 longitudinal |
//         f32[T*D] ego | u8[39*T] mask | f32[39*T*D] neighbors | f32[F*2] future

inline constexpr std::string_view kDatasetMagic = "MIATDSET";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const DatasetSplit& split) {
  const TrajectorySample* first = nullptr;
  for (auto* part : split.parts()) {
    if (!first && !part->empty()) first = &part->front();
  }
  const std::uint32_t T = first ? first->history_len : 0;
  const std::uint32_t F = first ? first->future_len : 0;
  const std::uint32_t D = first ? first->input_dim : 0;

  io::Writer w;
  w.put_raw(kDatasetMagic);
  w.put(kDatasetVersion);
  w.put(T);
  w.put(F);
  w.put(D);
  for (auto* part : split.parts()) {
    w.put<std::uint64_t>(part->size());
    const std::size_t length_slot = w.size();
    w.put<std::uint64_t>(0);
    const std::size_t begin = w.size();
    for (const auto& s : *part) {
      if (static_cast<std::uint32_t>(s.history_len) != T || static_cast<std::uint32_t>(s.future_len) != F ||
          static_cast<std::uint32_t>(s.input_dim) != D) {
        throw ValidationError("all samples in a dataset must share T, F and D_in");
      }
      w.put<std::int64_t>(s.ego_id);
      w.put<std::int64_t>(s.anchor_frame);
      w.put<std::uint8_t>(static_cast<std::uint8_t>(s.label.lateral));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(s.label.longitudinal));
      w.put_array(std::span<const float>(s.ego_history));
      w.put_array(std::span<const std::uint8_t>(s.neighbor_mask));
      w.put_array(std::span<const float>(s.neighbor_histories));
      w.put_array(std::span<const float>(s.future));
    }
    w.patch_u64(length_slot, w.size() - begin);
  }
  io::seal(w);
  return std::move(w.bytes());
}

inline DatasetSplit decode_dataset(std::span<const std::uint8_t> bytes) {
  {
    io::Reader header(bytes);
    if (header.get_raw(kDatasetMagic.size()) != kDatasetMagic) {
      throw io::FormatError("not a dataset file (bad magic)");
    }
    const auto version = header.get<std::uint32_t>();
    if (version != kDatasetVersion) {
      throw io::FormatError("dataset version mismatch: file has " + std::to_string(version) + ", expected " +
                            std::to_string(kDatasetVersion));
    }
  }
  io::Reader r(io::unseal(bytes, "dataset"));
  r.get_raw(kDatasetMagic.size());
  r.get<std::uint32_t>();
  const auto T = r.get<std::uint32_t>();
  const auto F = r.get<std::uint32_t>();
  const auto D = r.get<std::uint32_t>();
  if (T > 4096 || F > 4096 || D > 64) throw io::FormatError("implausible dataset dimensions");
  const std::size_t per_sample = 8 + 8 + 2 + 4ull * T * D + 1ull * GridSpec::kCells * T +
                                 4ull * GridSpec::kCells * T * D + 4ull * F * 2;
  DatasetSplit out;
  for (auto* part : out.parts()) {
    const auto n = r.get<std::uint64_t>();
    const auto length = r.get<std::uint64_t>();
    if (length != n * per_sample || length > r.remaining()) {
      throw io::FormatError("dataset section length does not match its sample count");
    }
    part->reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      auto s = TrajectorySample::zeros(static_cast<int>(T), static_cast<int>(F), static_cast<int>(D));
      s.ego_id = r.get<std::int64_t>();
      s.anchor_frame = r.get<std::int64_t>();
      const auto lat = r.get<std::uint8_t>();
      const auto lon = r.get<std::uint8_t>();
      if (lat > 2 || lon > 2) throw io::FormatError("invalid maneuver label in dataset");
      s.label = {static_cast<Lateral>(lat), static_cast<Longitudinal>(lon)};
      r.get_array(std::span<float>(s.ego_history));
      r.get_array(std::span<std::uint8_t>(s.neighbor_mask));
      r.get_array(std::span<float>(s.neighbor_histories));
      r.get_array(std::span<float>(s.future));
      part->push_back(std::move(s));
    }
  }
  if (r.remaining() != 0) throw io::FormatError("trailing bytes after dataset sections");
  return out;
}

inline void save_dataset(const DatasetSplit& split, const std::string& path) {
  io::write_file(path, encode_dataset(split));
}

inline DatasetSplit load_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

/// Sample counts per split, per joint maneuver class and per axis.
inline nlohmann::json dataset_stats(const DatasetSplit& split) {
  nlohmann::json j;
  const char* names[3] = {"train", "validation", "test"};
  auto parts = split.parts();
  for (int k = 0; k < 3; ++k) {
    nlohmann::json p;
    std::map<std::int64_t, int> vehicles;
    std::map<std::string, int> classes, lateral, longitudinal;
    for (int m = 0; m < kModes; ++m) classes[to_string(mode_label(m))] = 0;
    for (const auto& s : *parts[k]) {
      vehicles[s.ego_id]++;
      classes[to_string(s.label)]++;
      lateral[std::string(to_string(s.label.lateral))]++;
      longitudinal[std::string(to_string(s.label.longitudinal))]++;
    }
    p["samples"] = parts[k]->size();
    p["vehicles"] = vehicles.size();
    p["classes"] = classes;
    p["lateral"] = lateral;
    p["longitudinal"] = longitudinal;
    j[names[k]] = p;
  }
  j["total_samples"] = split.size();
  return j;
}

}  // namespace miat::ngsim
