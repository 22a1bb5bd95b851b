#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "miat/ngsim.hpp"
#include "miat/synthetic.hpp"

using namespace miat;
using namespace miat::ngsim;

namespace {

std::vector<VehicleRecord> straight_track(std::int64_t id, std::int64_t first, int n, int lane = 2, double y0 = 0,
                                          double speed = 20) {
  std::vector<VehicleRecord> out;
  for (int i = 0; i < n; ++i) {
    VehicleRecord r;
    r.vehicle_id = id;
    r.frame_id = first + i;
    r.lane_id = lane;
    r.local_x = (lane - 0.5) * 3.7;
    r.local_y = y0 + speed * 0.1 * i;
    r.velocity = speed;
    out.push_back(r);
  }
  return out;
}

std::vector<VehicleRecord> lane_profile(const std::vector<std::pair<std::int64_t, int>>& frames_lanes) {
  std::vector<VehicleRecord> out;
  for (auto [f, lane] : frames_lanes) {
    VehicleRecord r;
    r.vehicle_id = 1;
    r.frame_id = f;
    r.lane_id = lane;
    r.velocity = 10;
    out.push_back(r);
  }
  return out;
}

std::vector<VehicleRecord> speed_profile(double v_before, double v_after, std::int64_t anchor = 40) {
  std::vector<VehicleRecord> out;
  for (std::int64_t f = 0; f <= 2 * anchor; ++f) {
    VehicleRecord r;
    r.vehicle_id = 1;
    r.frame_id = f;
    r.velocity = f < anchor ? v_before : (f == anchor ? (v_before + v_after) / 2 : v_after);
    out.push_back(r);
  }
  return out;
}

std::size_t count_data_lines(const std::string& csv) {
  std::size_t n = 0;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

TrajectorySample tagged_sample(std::int64_t vehicle, std::int64_t anchor) {
  auto s = TrajectorySample::zeros(2, 2, 2);
  s.ego_id = vehicle;
  s.anchor_frame = anchor;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parsing

TEST(ParseRecords, ConvertsFeetToMeters) {
  std::istringstream in("Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID,v_Vel\n1,10,6.0,100.0,2,50.0\n");
  const auto r = parse_records(in);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_NEAR(r.records[0].local_x, 1.8288, 1e-12);
  EXPECT_NEAR(r.records[0].local_y, 30.48, 1e-12);
  EXPECT_NEAR(r.records[0].velocity, 15.24, 1e-12);
}

TEST(ParseRecords, SortsFramesPerVehicle) {
  std::istringstream in(
      "Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID,v_Vel\n2,5,0,0,1,1\n1,7,0,0,1,1\n1,3,0,0,1,1\n1,5,0,0,1,1\n");
  const auto r = parse_records(in);
  ASSERT_EQ(r.records.size(), 4u);
  std::vector<std::pair<std::int64_t, std::int64_t>> got;
  for (const auto& x : r.records) got.emplace_back(x.vehicle_id, x.frame_id);
  EXPECT_EQ(got, (std::vector<std::pair<std::int64_t, std::int64_t>>{{1, 3}, {1, 5}, {1, 7}, {2, 5}}));
}

TEST(ParseRecords, CountsRecordsAndGroupsOfFixture) {
  std::string csv = "Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID,v_Vel,v_Acc\n";
  for (int v = 1; v <= 3; ++v) {
    for (int f = 0; f < 100; ++f) {
      csv += std::to_string(v * 10) + "," + std::to_string(1000 + f) + ",12.5," + std::to_string(f * 4.0) + ",3,40.0,0.0\n";
    }
  }
  std::istringstream in(csv);
  const auto r = parse_records(in);
  EXPECT_EQ(r.records.size(), count_data_lines(csv));
  EXPECT_EQ(r.records.size(), 300u);
  EXPECT_EQ(group_by_vehicle(r.records).size(), 3u);
  EXPECT_EQ(r.rows_skipped, 0u);
}

TEST(ParseRecords, MissingColumnIsNamed) {
  std::istringstream in("Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel\n1,1,0,0,1\n");
  try {
    parse_records(in);
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("Lane_ID"), std::string::npos);
  }
}

TEST(ParseRecords, NonNumericRowsAreSkippedAndTallied) {
  std::istringstream in(
      "Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID,v_Vel\n1,1,0,0,1,1\n1,2,abc,0,1,1\n1,3,0,0,0,1\n1,4,0,0\n1,5,0,0,9,1\n");
  const auto r = parse_records(in);
  EXPECT_EQ(r.rows_read, 5u);
  EXPECT_EQ(r.rows_skipped, 3u);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.records[1].lane_id, 6);
}

TEST(ParseRecords, EmptyInputIsAnError) {
  std::istringstream in("");
  EXPECT_THROW(parse_records(in), ValidationError);
}

TEST(CapLaneId, Examples) {
  EXPECT_EQ(cap_lane_id(8), 6);
  EXPECT_EQ(cap_lane_id(3), 3);
  EXPECT_EQ(cap_lane_id(6), 6);
  EXPECT_EQ(cap_lane_id(1), 1);
  EXPECT_THROW(cap_lane_id(0), ValidationError);
}

// ---------------------------------------------------------------------------
// Labels

TEST(LabelLateral, Examples) {
  std::vector<std::pair<std::int64_t, int>> keep, left, right;
  for (std::int64_t f = 0; f <= 80; ++f) {
    keep.emplace_back(f, 4);
    left.emplace_back(f, f < 40 ? 4 : 3);
    right.emplace_back(f, f < 50 ? 2 : 3);
  }
  EXPECT_EQ(label_lateral(lane_profile(keep), 40), Lateral::LaneKeep);
  EXPECT_EQ(label_lateral(lane_profile(left), 40), Lateral::ChangeLeft);
  EXPECT_EQ(label_lateral(lane_profile(right), 40), Lateral::ChangeRight);
}

TEST(LabelLateral, WindowIsClippedAtTrackEnds) {
  std::vector<std::pair<std::int64_t, int>> fl;
  for (std::int64_t f = 30; f <= 45; ++f) fl.emplace_back(f, f < 38 ? 2 : 1);
  EXPECT_EQ(label_lateral(lane_profile(fl), 40), Lateral::ChangeLeft);
  // A change outside the window is ignored.
  std::vector<std::pair<std::int64_t, int>> late;
  for (std::int64_t f = 0; f <= 200; ++f) late.emplace_back(f, f < 150 ? 2 : 3);
  EXPECT_EQ(label_lateral(lane_profile(late), 40), Lateral::LaneKeep);
}

TEST(LabelLateral, MirroringLanesSwapsDirections) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::pair<std::int64_t, int>> fl, mirrored;
    for (std::int64_t f = 0; f <= 100; ++f) {
      const int lane = 1 + static_cast<int>(rng() % 6);
      fl.emplace_back(f, lane);
      mirrored.emplace_back(f, 7 - lane);
    }
    const std::int64_t anchor = static_cast<std::int64_t>(rng() % 101);
    const auto a = label_lateral(lane_profile(fl), anchor);
    const auto b = label_lateral(lane_profile(mirrored), anchor);
    if (a == Lateral::LaneKeep) {
      EXPECT_EQ(b, Lateral::LaneKeep);
    } else {
      EXPECT_EQ(b, a == Lateral::ChangeLeft ? Lateral::ChangeRight : Lateral::ChangeLeft);
    }
  }
}

TEST(LabelLongitudinal, Examples) {
  EXPECT_EQ(label_longitudinal(speed_profile(10, 10), 40), Longitudinal::Constant);
  EXPECT_EQ(label_longitudinal(speed_profile(10, 12), 40), Longitudinal::Accelerate);
  EXPECT_EQ(label_longitudinal(speed_profile(10, 9), 40), Longitudinal::Decelerate);
}

TEST(LabelLongitudinal, ThresholdBoundaries) {
  // Constant halves (anchor frame excluded from the change) give exact ratios.
  auto halves = [](double before, double after) {
    std::vector<VehicleRecord> out;
    for (std::int64_t f = 0; f <= 80; ++f) {
      VehicleRecord r;
      r.vehicle_id = 1;
      r.frame_id = f;
      r.velocity = f <= 40 ? before : after;
      out.push_back(r);
    }
    return out;
  };
  // v_f = (10 + 40 a) / 41 for a track constant at 10 up to the anchor.
  auto v_after_for_mean = [](double mean) { return (41 * mean - 10) / 40; };
  EXPECT_EQ(label_longitudinal(halves(10, v_after_for_mean(10.6)), 40), Longitudinal::Accelerate);
  EXPECT_EQ(label_longitudinal(halves(10, v_after_for_mean(10.4)), 40), Longitudinal::Constant);
  EXPECT_EQ(label_longitudinal(halves(10, v_after_for_mean(9.6)), 40), Longitudinal::Constant);
  EXPECT_EQ(label_longitudinal(halves(10, v_after_for_mean(9.4)), 40), Longitudinal::Decelerate);
  EXPECT_EQ(label_longitudinal(halves(10, v_after_for_mean(10.4)), 40, 40, 0.02), Longitudinal::Accelerate);
}

TEST(LabelLongitudinal, StandstillRules) {
  EXPECT_EQ(label_longitudinal(speed_profile(0, 0), 40), Longitudinal::Constant);
  std::vector<VehicleRecord> start;
  for (std::int64_t f = 40; f <= 80; ++f) {
    VehicleRecord r;
    r.vehicle_id = 1;
    r.frame_id = f;
    r.velocity = f == 40 ? 0.0 : 3.0;
    start.push_back(r);
  }
  // The only history frame is the anchor itself at rest.
  EXPECT_EQ(label_longitudinal(start, 40), Longitudinal::Accelerate);
}

// ---------------------------------------------------------------------------
// Grid

TEST(GridAssign, Examples) {
  GridSpec spec;
  VehicleRecord ego{1, 0, 0, 100, 3, 20, 0};
  VehicleRecord same{2, 0, 0, 100, 3, 20, 0};
  EXPECT_EQ(grid_assign(ego, same, spec), 19);
  VehicleRecord left{3, 0, 0, 100 + 9.144, 2, 20, 0};
  EXPECT_EQ(grid_assign(ego, left, spec), 8);
  VehicleRecord far{4, 0, 0, 140, 3, 20, 0};
  EXPECT_EQ(grid_assign(ego, far, spec), std::nullopt);
  VehicleRecord two_lanes{5, 0, 0, 100, 5, 20, 0};
  EXPECT_EQ(grid_assign(ego, two_lanes, spec), std::nullopt);
  EXPECT_EQ(grid_assign(ego, ego, spec), std::nullopt);
  VehicleRecord behind_right{6, 0, 0, 100 - 6 * 4.572, 4, 20, 0};
  EXPECT_EQ(grid_assign(ego, behind_right, spec), 2 * 13 + 0);
}

TEST(GridAssign, MutualViewsAreMirrored) {
  GridSpec spec;
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> dy(-35, 35);
  int checked = 0;
  for (int trial = 0; trial < 5000; ++trial) {
    VehicleRecord a{1, 0, 0, 0, 1 + static_cast<int>(rng() % 6), 20, 0};
    VehicleRecord b{2, 0, 0, dy(rng), 1 + static_cast<int>(rng() % 6), 20, 0};
    const auto ab = grid_assign(a, b, spec);
    const auto ba = grid_assign(b, a, spec);
    if (!ab || !ba) continue;
    ++checked;
    EXPECT_EQ(ba.value() / 13, 2 - ab.value() / 13);
    EXPECT_EQ(ba.value() % 13, 12 - ab.value() % 13);
  }
  EXPECT_GT(checked, 500);
}

// ---------------------------------------------------------------------------
// Samples

TEST(BuildSamples, ShortTrackYieldsNothing) {
  const auto recs = straight_track(1, 0, 20);
  EXPECT_TRUE(build_samples(recs, SampleConfig{}).empty());
}

TEST(BuildSamples, LoneVehicleHasEmptyGrid) {
  const auto recs = straight_track(1, 0, 100);
  const auto samples = build_samples(recs, SampleConfig{});
  ASSERT_FALSE(samples.empty());
  for (const auto& s : samples) {
    for (auto m : s.neighbor_mask) EXPECT_EQ(m, 0);
    EXPECT_NO_THROW(validate(s));
  }
}

// Independent window enumeration: an anchor is any frame on the 2-frame
// lattice starting at the first frame that has every history and future
// frame present.
std::size_t brute_force_windows(const std::vector<VehicleRecord>& track, const SampleConfig& cfg) {
  std::set<std::int64_t> frames;
  for (const auto& r : track) frames.insert(r.frame_id);
  const std::int64_t first = *frames.begin();
  std::size_t count = 0;
  for (std::int64_t a = first; a <= *frames.rbegin(); ++a) {
    if ((a - first) % (cfg.downsample * cfg.stride) != 0) continue;
    bool ok = true;
    for (int back = 0; back < cfg.downsample * (cfg.history_len - 1) + 1 && ok; back += cfg.downsample) {
      ok = frames.count(a - back) > 0 && a - back >= first;
    }
    for (int fwd = cfg.downsample; fwd <= cfg.downsample * cfg.future_len && ok; fwd += cfg.downsample) {
      ok = frames.count(a + fwd) > 0;
    }
    count += ok;
  }
  return count;
}

TEST(BuildSamples, CountMatchesWindowEnumeration) {
  SampleConfig cfg;
  auto exact = straight_track(1, 0, 31 + 50);
  EXPECT_EQ(build_samples(exact, cfg).size(), brute_force_windows(exact, cfg));
  EXPECT_EQ(build_samples(exact, cfg).size(), 1u);

  auto longer = straight_track(1, 0, 31 + 50 + 7);
  EXPECT_EQ(build_samples(longer, cfg).size(), brute_force_windows(longer, cfg));

  auto gappy = straight_track(1, 0, 200);
  gappy.erase(gappy.begin() + 120);
  EXPECT_EQ(build_samples(gappy, cfg).size(), brute_force_windows(gappy, cfg));

  SampleConfig strided = cfg;
  strided.stride = 3;
  EXPECT_EQ(build_samples(gappy, strided).size(), brute_force_windows(gappy, strided));
}

TEST(BuildSamples, NeighborsLandInGridAndAreEgoRelative) {
  auto recs = straight_track(1, 0, 100, 2, 0, 20);
  auto ahead = straight_track(2, 0, 100, 1, 9.144, 20);
  recs.insert(recs.end(), ahead.begin(), ahead.end());
  SampleConfig cfg;
  const std::int64_t ego = 1;
  const auto samples = build_samples(recs, cfg, std::span(&ego, 1));
  ASSERT_FALSE(samples.empty());
  for (const auto& s : samples) {
    EXPECT_EQ(s.ego_id, 1);
    for (int t = 0; t < s.history_len; ++t) {
      EXPECT_TRUE(s.occupied(8, t));
      // Neighbour position relative to the ego at the anchor frame.
      EXPECT_NEAR(s.neighbor(8, t, 1), 9.144 + s.ego(t, 1), 1e-4);
      EXPECT_NEAR(s.neighbor(8, t, 0), -3.7, 1e-5);
    }
    EXPECT_NEAR(s.future_y(0), 20 * 0.2, 1e-4);
    EXPECT_NEAR(s.future_y(24), 20 * 5.0, 1e-3);
  }
}

TEST(BuildSamples, ParallelOutputMatchesSerial) {
  synth::DatasetOptions opt;
  auto eps = synth::generate_corpus(2, 12, opt);
  std::vector<VehicleRecord> all;
  for (const auto& e : eps) all.insert(all.end(), e.records.begin(), e.records.end());
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.vehicle_id != b.vehicle_id ? a.vehicle_id < b.vehicle_id : a.frame_id < b.frame_id;
  });
  EXPECT_EQ(build_samples(all, SampleConfig{}, {}, 1), build_samples(all, SampleConfig{}, {}, 4));
}

// ---------------------------------------------------------------------------
// Splits

std::vector<TrajectorySample> samples_with_counts(const std::vector<int>& counts) {
  std::vector<TrajectorySample> out;
  for (std::size_t v = 0; v < counts.size(); ++v) {
    for (int i = 0; i < counts[v]; ++i) out.push_back(tagged_sample(static_cast<std::int64_t>(v + 1), i));
  }
  return out;
}

std::array<double, 3> fractions_of(const DatasetSplit& d) {
  const double n = static_cast<double>(d.size());
  return {d.train.size() / n, d.validation.size() / n, d.test.size() / n};
}

std::set<std::int64_t> ids(const std::vector<TrajectorySample>& v) {
  std::set<std::int64_t> out;
  for (const auto& s : v) out.insert(s.ego_id);
  return out;
}

TEST(SplitByVehicle, EqualCountsGiveExactVehicleFractions) {
  const auto d = split_by_vehicle(samples_with_counts(std::vector<int>(10, 5)), {0.7, 0.1, 0.2}, 3);
  EXPECT_EQ(ids(d.train).size(), 7u);
  EXPECT_EQ(ids(d.validation).size(), 1u);
  EXPECT_EQ(ids(d.test).size(), 2u);
}

TEST(SplitByVehicle, DeterministicForSeed) {
  const auto s = samples_with_counts({3, 9, 1, 4, 4, 7, 2, 8, 5, 5, 6});
  EXPECT_EQ(split_by_vehicle(s, {0.7, 0.1, 0.2}, 42), split_by_vehicle(s, {0.7, 0.1, 0.2}, 42));
}

TEST(SplitByVehicle, RejectsTooFewVehiclesAndBadFractions) {
  EXPECT_THROW(split_by_vehicle(samples_with_counts({4, 4}), {0.7, 0.1, 0.2}, 1), ValidationError);
  EXPECT_THROW(split_by_vehicle(samples_with_counts({4, 4, 4}), {0.7, 0.1, 0.1}, 1), ValidationError);
  EXPECT_THROW(split_by_vehicle(samples_with_counts({4, 4, 4}), {1.2, -0.1, -0.1}, 1), ValidationError);
}

TEST(SplitByVehicle, VehiclesDisjointAndSamplesPreservedForEverySeed) {
  std::mt19937_64 rng(9);
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    std::vector<int> counts(3 + rng() % 20);
    for (auto& c : counts) c = 1 + static_cast<int>(rng() % 12);
    const auto samples = samples_with_counts(counts);
    const auto d = split_by_vehicle(samples, {0.7, 0.1, 0.2}, seed);
    const auto a = ids(d.train), b = ids(d.validation), c = ids(d.test);
    for (auto id : a) EXPECT_TRUE(!b.count(id) && !c.count(id));
    for (auto id : b) EXPECT_FALSE(c.count(id));
    EXPECT_EQ(d.size(), samples.size());
  }
}

// Exhaustive oracle: the smallest achievable worst-case fraction deviation
// over all 3^n assignments of n <= 8 vehicles.
double best_achievable_deviation(const std::vector<int>& counts, const std::array<double, 3>& target) {
  const std::size_t n = counts.size();
  std::size_t combos = 1;
  for (std::size_t i = 0; i < n; ++i) combos *= 3;
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  double best = 1e9;
  for (std::size_t code = 0; code < combos; ++code) {
    std::array<double, 3> part{};
    std::size_t c = code;
    for (std::size_t i = 0; i < n; ++i, c /= 3) part[c % 3] += counts[i];
    double worst = 0;
    for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(part[k] / total - target[k]));
    best = std::min(best, worst);
  }
  return best;
}

TEST(SplitByVehicle, MeetsTolerancewheneverExhaustiveSearchCan) {
  const std::array<double, 3> target{0.7, 0.1, 0.2};
  std::mt19937_64 rng(23);
  int achievable = 0;
  for (int trial = 0; trial < 150; ++trial) {
    std::vector<int> counts(3 + rng() % 6);
    for (auto& c : counts) c = 1 + static_cast<int>(rng() % 40);
    const double best = best_achievable_deviation(counts, target);
    const auto d = split_by_vehicle(samples_with_counts(counts), target, rng());
    const auto f = fractions_of(d);
    double worst = 0;
    for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(f[k] - target[k]));
    EXPECT_GE(worst, best - 1e-12);
    if (best <= 0.02) {
      ++achievable;
      EXPECT_LE(worst, 0.02) << "trial " << trial;
    }
  }
  EXPECT_GT(achievable, 10);
}

// ---------------------------------------------------------------------------
// Serialization

TEST(Dataset, EmptySplitRoundTrips) {
  DatasetSplit empty;
  EXPECT_EQ(decode_dataset(encode_dataset(empty)), empty);
}

TEST(Dataset, HundredSamplesRoundTripBitExactly) {
  synth::DatasetOptions opt;
  opt.noise_sigma = 0.37;
  opt.n_neighbors = 5;
  auto d = synth::generate_dataset(4, 2, opt);
  ASSERT_GE(d.size(), 100u);
  const auto path = std::filesystem::temp_directory_path() / "miat_test_dataset.bin";
  save_dataset(d, path.string());
  const auto back = load_dataset(path.string());
  EXPECT_EQ(back, d);
  EXPECT_EQ(encode_dataset(back), encode_dataset(d));
  std::filesystem::remove(path);
}

TEST(Dataset, CorruptionIsRejected) {
  auto d = synth::generate_dataset(4, 1);
  const auto bytes = encode_dataset(d);
  auto header = bytes;
  header[2] ^= 0x20;
  EXPECT_THROW(decode_dataset(header), io::FormatError);
  auto version = bytes;
  version[8] = 9;
  EXPECT_THROW(decode_dataset(version), io::FormatError);
  auto body = bytes;
  body[bytes.size() / 2] ^= 1;
  EXPECT_THROW(decode_dataset(body), io::FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 9);
  EXPECT_THROW(decode_dataset(truncated), io::FormatError);
  EXPECT_THROW(load_dataset("/nonexistent/miat/dataset.bin"), std::exception);
}

TEST(Dataset, StatsCountSplitsAndClasses) {
  const auto d = synth::generate_dataset(8, 2);
  const auto j = dataset_stats(d);
  EXPECT_EQ(j["total_samples"], d.size());
  EXPECT_EQ(j["train"]["samples"], d.train.size());
  int classes = 0;
  for (const char* part : {"train", "validation", "test"}) {
    for (auto& [k, v] : j[part]["classes"].items()) classes += v.get<int>();
  }
  EXPECT_EQ(static_cast<std::size_t>(classes), d.size());
}
