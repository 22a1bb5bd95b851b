#pragma once

// Desk-scale synthetic highway episodes with known maneuver ground truth.
// The ego follows a kinematic template (smoothstep lane change, +/-20% speed
// ramp) timed so that every anchor the sample builder emits sees the whole
// maneuver inside its labeling window. Neighbours hold lane and speed.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>
#include <vector>

#include "miat/ngsim.hpp"
#include "miat/types.hpp"

namespace miat::synth {

inline constexpr double kLaneWidth = 3.7;
inline constexpr int kRoadLanes = 3;
inline constexpr double kDt = 0.1;            // raw tick
inline constexpr int kManeuverFrames = 40;    // ramp duration, 4 s
inline constexpr int kAnchorSpan = 20;        // raw frames covered by anchors
inline constexpr double kSpeedChange = 0.2;

struct EpisodeOptions {
  std::int64_t id_base = 1;  // ego id; neighbours take the following ids
  int maneuver_lead = 18;    // raw frames of the maneuver ramp already done at the first anchor
  ngsim::SampleConfig samples;
};

struct Episode {
  std::vector<VehicleRecord> records;  // sorted by (vehicle, frame)
  std::int64_t ego_id = 0;
  ManeuverLabel maneuver;
};

inline double smoothstep(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

inline double lane_center(int lane) { return (lane - 0.5) * kLaneWidth; }

inline int lane_of(double x) { return std::clamp(static_cast<int>(std::floor(x / kLaneWidth)) + 1, 1, kRoadLanes); }

/// splitmix64; derives independent per-episode seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline Episode generate_episode(std::uint64_t seed, ManeuverLabel maneuver, int n_neighbors, double noise_sigma,
                                const EpisodeOptions& opt = {}) {
  if (n_neighbors < 0 || n_neighbors > 8) throw ValidationError("n_neighbors must be in [0, 8]");
  if (!(noise_sigma >= 0)) throw ValidationError("noise_sigma must be >= 0");
  if (opt.maneuver_lead < 0 || opt.maneuver_lead > kManeuverFrames) {
    throw ValidationError("maneuver_lead must be in [0, " + std::to_string(kManeuverFrames) + "]");
  }
  const auto& sc = opt.samples;
  const int history_frames = sc.downsample * (sc.history_len - 1);
  const int first_anchor = std::max(history_frames, 30);
  const int start_frame = first_anchor - history_frames;
  const int last_frame = first_anchor + kAnchorSpan + std::max(sc.downsample * sc.future_len, 40);

  std::mt19937_64 rng(seed);
  const int jitter = static_cast<int>(rng() % 9) - 4;
  const int ramp_start = first_anchor - opt.maneuver_lead + jitter;
  const double v0 = uniform(rng, 20.0, 30.0);
  const double y0 = uniform(rng, 50.0, 100.0);

  int start_lane = 1 + static_cast<int>(rng() % 3);
  int lane_step = 0;
  if (maneuver.lateral == Lateral::ChangeLeft) {
    start_lane = 2 + static_cast<int>(rng() % 2);
    lane_step = -1;
  } else if (maneuver.lateral == Lateral::ChangeRight) {
    start_lane = 1 + static_cast<int>(rng() % 2);
    lane_step = 1;
  }
  double speed_change = 0.0;
  if (maneuver.longitudinal == Longitudinal::Accelerate) speed_change = kSpeedChange;
  if (maneuver.longitudinal == Longitudinal::Decelerate) speed_change = -kSpeedChange;

  struct Neighbor {
    int lane;
    double y0, speed;
  };
  std::vector<Neighbor> neighbors;
  for (int i = 0; i < n_neighbors; ++i) {
    neighbors.push_back({1 + static_cast<int>(rng() % 3), y0 + uniform(rng, -25.0, 25.0), v0 + uniform(rng, -2.0, 2.0)});
  }

  std::normal_distribution<double> noise(0.0, noise_sigma > 0 ? noise_sigma : 1.0);
  auto jitter_pos = [&](double v) { return noise_sigma > 0 ? v + noise(rng) : v; };

  Episode ep;
  ep.ego_id = opt.id_base;
  ep.maneuver = maneuver;
  const int n_frames = last_frame + 1;
  std::vector<double> speed(n_frames), y(n_frames), x(n_frames);
  for (int f = 0; f < n_frames; ++f) {
    const double s = smoothstep(static_cast<double>(f - ramp_start) / kManeuverFrames);
    speed[f] = v0 * (1.0 + speed_change * s);
    x[f] = lane_center(start_lane) + lane_step * kLaneWidth * s;
    y[f] = f == 0 ? y0 : y[f - 1] + speed[f - 1] * kDt;
  }
  for (int f = start_frame; f < n_frames; ++f) {
    VehicleRecord r;
    r.vehicle_id = ep.ego_id;
    r.frame_id = f;
    r.lane_id = lane_of(x[f]);
    r.local_x = jitter_pos(x[f]);
    r.local_y = jitter_pos(y[f]);
    r.velocity = speed[f];
    r.acceleration = f + 1 < n_frames ? (speed[f + 1] - speed[f]) / kDt : 0.0;
    ep.records.push_back(r);
  }
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    const auto& nb = neighbors[i];
    for (int f = start_frame; f < n_frames; ++f) {
      VehicleRecord r;
      r.vehicle_id = ep.ego_id + 1 + static_cast<std::int64_t>(i);
      r.frame_id = f;
      r.lane_id = nb.lane;
      r.local_x = jitter_pos(lane_center(nb.lane));
      r.local_y = jitter_pos(nb.y0 + nb.speed * kDt * f);
      r.velocity = nb.speed;
      ep.records.push_back(r);
    }
  }
  return ep;
}

struct DatasetOptions {
  int n_neighbors = 2;
  double noise_sigma = 0.0;
  int maneuver_lead = 18;
  ngsim::SampleConfig samples;
  std::array<double, 3> fractions{0.7, 0.1, 0.2};
  int threads = 1;
};

/// Vehicle ids reserved per episode (ego plus up to 8 neighbours).
inline constexpr std::int64_t kIdsPerEpisode = 16;

/// Episodes cycle through the nine maneuver classes: episode e realizes mode e % 9.
inline std::vector<Episode> generate_corpus(std::uint64_t seed, int n_episodes, const DatasetOptions& opt) {
  std::vector<Episode> episodes(static_cast<std::size_t>(n_episodes));
  parallel_for(episodes.size(), opt.threads, [&](std::size_t e) {
    EpisodeOptions eo;
    eo.id_base = 1 + static_cast<std::int64_t>(e) * kIdsPerEpisode;
    eo.samples = opt.samples;
    eo.maneuver_lead = opt.maneuver_lead;
    episodes[e] = generate_episode(mix_seed(seed, e), mode_label(static_cast<int>(e % kModes)), opt.n_neighbors,
                                   opt.noise_sigma, eo);
  });
  return episodes;
}

/// Runs every episode through the real sample builder (ego vehicles only).
inline std::vector<TrajectorySample> corpus_samples(const std::vector<Episode>& episodes,
                                                    const DatasetOptions& opt) {
  std::vector<std::vector<TrajectorySample>> per(episodes.size());
  parallel_for(episodes.size(), opt.threads, [&](std::size_t e) {
    const std::int64_t ego = episodes[e].ego_id;
    per[e] = ngsim::build_samples(episodes[e].records, opt.samples, std::span(&ego, 1));
  });
  std::vector<TrajectorySample> out;
  for (auto& v : per) {
    for (auto& s : v) out.push_back(std::move(s));
  }
  return out;
}

inline ngsim::DatasetSplit generate_dataset(std::uint64_t seed, int n_per_class, const DatasetOptions& opt = {}) {
  if (n_per_class < 1) throw ValidationError("n_per_class must be >= 1");
  auto episodes = generate_corpus(seed, kModes * n_per_class, opt);
  return ngsim::split_by_vehicle(corpus_samples(episodes, opt), opt.fractions, seed);
}

/// NGSIM-format export (feet, ft/s) readable by ngsim::parse_records.
inline void write_ngsim_csv(std::ostream& out, const std::vector<VehicleRecord>& records) {
  out << "Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID,v_Vel,v_Acc\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%lld,%lld,%.17g,%.17g,%d,%.17g,%.17g\n", static_cast<long long>(r.vehicle_id),
                  static_cast<long long>(r.frame_id), r.local_x / ngsim::kFeetToMeters,
                  r.local_y / ngsim::kFeetToMeters, r.lane_id, r.velocity / ngsim::kFeetToMeters,
                  r.acceleration / ngsim::kFeetToMeters);
    out << buf;
  }
}

}  // namespace miat::synth
