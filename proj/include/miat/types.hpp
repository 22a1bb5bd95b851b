#pragma once

// Domain types shared by every module: raw vehicle records, the maneuver
// taxonomy, the 3 x 13 social grid, and the per-sample tensors fed to the
// model. All positions are meters, all speeds m/s.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace miat {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One per-frame observation of one vehicle (10 Hz ticks).
struct VehicleRecord {
  std::int64_t vehicle_id = 0;
  std::int64_t frame_id = 0;
  double local_x = 0.0;  // lateral, meters
  double local_y = 0.0;  // longitudinal, meters
  int lane_id = 1;       // 1 is the leftmost lane
  double velocity = 0.0;
  double acceleration = 0.0;

  bool operator==(const VehicleRecord&) const = default;
};

enum class Lateral : std::uint8_t { LaneKeep = 0, ChangeLeft = 1, ChangeRight = 2 };
enum class Longitudinal : std::uint8_t { Accelerate = 0, Decelerate = 1, Constant = 2 };

inline constexpr int kLateralClasses = 3;
inline constexpr int kLongitudinalClasses = 3;
inline constexpr int kModes = kLateralClasses * kLongitudinalClasses;

struct ManeuverLabel {
  Lateral lateral = Lateral::LaneKeep;
  Longitudinal longitudinal = Longitudinal::Constant;

  bool operator==(const ManeuverLabel&) const = default;
};

inline std::string_view to_string(Lateral l) {
  switch (l) {
    case Lateral::LaneKeep: return "LK";
    case Lateral::ChangeLeft: return "CLL";
    case Lateral::ChangeRight: return "CLR";
  }
  return "?";
}

inline std::string_view to_string(Longitudinal l) {
  switch (l) {
    case Longitudinal::Accelerate: return "ACC";
    case Longitudinal::Decelerate: return "DEC";
    case Longitudinal::Constant: return "CON";
  }
  return "?";
}

inline std::string to_string(const ManeuverLabel& m) {
  return std::string(to_string(m.lateral)) + "/" + std::string(to_string(m.longitudinal));
}

/// Lateral-major mode ordering: index = 3 * lateral + longitudinal.
constexpr int mode_index(Lateral lat, Longitudinal lon) {
  return 3 * static_cast<int>(lat) + static_cast<int>(lon);
}

constexpr int mode_index(const ManeuverLabel& m) { return mode_index(m.lateral, m.longitudinal); }

constexpr ManeuverLabel mode_label(int index) {
  if (index < 0 || index >= kModes) throw std::out_of_range("mode index must be in [0, 8]");
  return {static_cast<Lateral>(index / 3), static_cast<Longitudinal>(index % 3)};
}

/// 3 lane columns (left, same, right) x 13 longitudinal rows around the ego.
struct GridSpec {
  static constexpr int kColumns = 3;
  static constexpr int kRows = 13;
  static constexpr int kCells = kColumns * kRows;
  static constexpr int kEgoRow = 6;
  static constexpr int kEgoColumn = 1;
  static constexpr int kEgoCell = kEgoColumn * kRows + kEgoRow;

  double cell_length = 4.572;  // 15 ft

  double coverage() const { return 6.5 * cell_length; }
  bool operator==(const GridSpec&) const = default;
};

/// One training/evaluation example. Every array is row-major float so that
/// the binary dataset format round-trips bit-exactly.
struct TrajectorySample {
  int history_len = 0;  // T
  int future_len = 0;   // F
  int input_dim = 0;    // D_in

  std::vector<float> ego_history;         // T x D_in
  std::vector<float> neighbor_histories;  // 39 x T x D_in
  std::vector<std::uint8_t> neighbor_mask;  // 39 x T
  std::vector<float> future;              // F x 2, ego-relative
  ManeuverLabel label;
  std::int64_t ego_id = 0;
  std::int64_t anchor_frame = 0;

  static TrajectorySample zeros(int T, int F, int d_in) {
    TrajectorySample s;
    s.history_len = T;
    s.future_len = F;
    s.input_dim = d_in;
    s.ego_history.assign(static_cast<std::size_t>(T) * d_in, 0.0f);
    s.neighbor_histories.assign(static_cast<std::size_t>(GridSpec::kCells) * T * d_in, 0.0f);
    s.neighbor_mask.assign(static_cast<std::size_t>(GridSpec::kCells) * T, 0);
    s.future.assign(static_cast<std::size_t>(F) * 2, 0.0f);
    return s;
  }

  float& ego(int t, int k) { return ego_history[static_cast<std::size_t>(t) * input_dim + k]; }
  float ego(int t, int k) const { return ego_history[static_cast<std::size_t>(t) * input_dim + k]; }

  std::size_t neighbor_offset(int cell, int t) const {
    return (static_cast<std::size_t>(cell) * history_len + t) * input_dim;
  }
  float& neighbor(int cell, int t, int k) { return neighbor_histories[neighbor_offset(cell, t) + k]; }
  float neighbor(int cell, int t, int k) const { return neighbor_histories[neighbor_offset(cell, t) + k]; }

  bool occupied(int cell, int t) const {
    return neighbor_mask[static_cast<std::size_t>(cell) * history_len + t] != 0;
  }
  void set_occupied(int cell, int t, bool v) {
    neighbor_mask[static_cast<std::size_t>(cell) * history_len + t] = v ? 1 : 0;
  }

  float future_x(int k) const { return future[2 * static_cast<std::size_t>(k)]; }
  float future_y(int k) const { return future[2 * static_cast<std::size_t>(k) + 1]; }

  bool operator==(const TrajectorySample&) const = default;
};

/// Throws ValidationError describing the first violated invariant.
inline void validate(const TrajectorySample& s) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("sample (vehicle " + std::to_string(s.ego_id) + ", frame " +
                          std::to_string(s.anchor_frame) + "): " + what);
  };
  if (s.history_len < 1 || s.future_len < 1 || s.input_dim < 2) fail("non-positive dimensions");
  const auto T = static_cast<std::size_t>(s.history_len);
  const auto D = static_cast<std::size_t>(s.input_dim);
  if (s.ego_history.size() != T * D) fail("ego_history has wrong size");
  if (s.neighbor_histories.size() != GridSpec::kCells * T * D) fail("neighbor_histories has wrong size");
  if (s.neighbor_mask.size() != GridSpec::kCells * T) fail("neighbor_mask has wrong size");
  if (s.future.size() != static_cast<std::size_t>(s.future_len) * 2) fail("future has wrong size");
  for (int c = 0; c < GridSpec::kCells; ++c) {
    for (int t = 0; t < s.history_len; ++t) {
      if (s.neighbor_mask[static_cast<std::size_t>(c) * T + t] > 1) fail("mask value is not boolean");
      if (s.occupied(c, t)) continue;
      for (int k = 0; k < s.input_dim; ++k) {
        if (s.neighbor(c, t, k) != 0.0f) fail("masked-out cell carries non-zero features");
      }
    }
  }
  // The anchor row is the origin of the ego-relative frame.
  if (s.ego(s.history_len - 1, 0) != 0.0f || s.ego(s.history_len - 1, 1) != 0.0f) {
    fail("ego history does not end at the origin");
  }
  auto finite = [](const std::vector<float>& v) {
    for (float x : v) {
      if (!(x == x) || x > 3.0e38f || x < -3.0e38f) return false;
    }
    return true;
  };
  if (!finite(s.ego_history) || !finite(s.neighbor_histories) || !finite(s.future)) fail("non-finite value");
  if (static_cast<int>(s.label.lateral) > 2 || static_cast<int>(s.label.longitudinal) > 2) fail("bad label");
}

struct ManeuverDistribution {
  std::array<double, 3> p_lateral{1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::array<double, 3> p_longitudinal{1.0 / 3, 1.0 / 3, 1.0 / 3};
};

/// Diagonal Gaussian per future step; sigma is a standard deviation in meters.
struct GaussianTrajectory {
  std::vector<double> mu_x, mu_y, sigma_x, sigma_y;

  std::size_t size() const { return mu_x.size(); }
  void resize(std::size_t n) {
    mu_x.resize(n);
    mu_y.resize(n);
    sigma_x.resize(n);
    sigma_y.resize(n);
  }
};

struct PredictionOutput {
  std::array<GaussianTrajectory, kModes> modes;  // indexed by mode_index
  ManeuverDistribution maneuvers;
};

}  // namespace miat
