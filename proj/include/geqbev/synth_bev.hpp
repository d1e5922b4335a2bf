#pragma once

// Synthetic fused-BEV scenes: one oriented rectangular vehicle per grid.
//
// Geometry: cell (r, c) has its center at index coordinates (r, c). The
// heading theta is measured counter-clockwise from +x, where x runs along
// columns and y runs up (y = -row). A cell is occupied iff its center lies
// inside the rotated rectangle.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "geqbev/errors.hpp"
#include "geqbev/group.hpp"
#include "geqbev/random.hpp"
#include "geqbev/serialize.hpp"
#include "geqbev/tensor.hpp"

namespace geqbev {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kHalfPi = 0.5 * std::numbers::pi;

enum class TestRotationPolicy { none, c4_multiples, uniform_continuous };

inline std::string_view to_string(TestRotationPolicy p) {
  switch (p) {
    case TestRotationPolicy::none: return "none";
    case TestRotationPolicy::c4_multiples: return "c4_multiples";
    case TestRotationPolicy::uniform_continuous: return "uniform_continuous";
  }
  return "?";
}

inline TestRotationPolicy parse_test_rotation_policy(std::string_view s) {
  if (s == "none") return TestRotationPolicy::none;
  if (s == "c4_multiples") return TestRotationPolicy::c4_multiples;
  if (s == "uniform_continuous") return TestRotationPolicy::uniform_continuous;
  throw InvalidConfig("unknown test_rotation_policy '" + std::string(s) + "'");
}

struct DatasetConfig {
  std::size_t grid_size = 32;
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::uint64_t seed = 7;
  TestRotationPolicy test_rotation_policy = TestRotationPolicy::c4_multiples;
  double length_min = 8.0, length_max = 14.0;
  double width_min = 4.0, width_max = 7.0;
  double noise_std = 0.05;
  /// training headings are drawn from [0, train_theta_max)
  double train_theta_max = kHalfPi;

  void validate() const {
    if (grid_size < 16) throw InvalidConfig("data.grid_size must be >= 16");
    if (n_train < 1) throw InvalidConfig("data.n_train must be >= 1");
    if (!(length_min > 0 && width_min > 0)) throw InvalidConfig("object sizes must be positive");
    if (length_max < length_min || width_max < width_min) {
      throw InvalidConfig("object size ranges must satisfy min <= max");
    }
    if (!(noise_std >= 0)) throw InvalidConfig("data.noise_std must be >= 0");
    if (!(train_theta_max > 0 && train_theta_max <= kTwoPi)) {
      throw InvalidConfig("data.train_theta_max must lie in (0, 2*pi]");
    }
  }
};

/// One scene. The canonical heading/center are stored together with the
/// number of quarter turns applied since rendering, so rotations compose
/// exactly.
struct BevSample {
  Tensor grid;  // [2,S,S]: intensity in [0,1], occupancy in {0,1}
  double base_theta = 0.0;
  double base_row = 0.0, base_col = 0.0;
  double length = 0.0, width = 0.0;
  int quarter_turns = 0;

  std::size_t grid_size() const { return grid.dim(2); }

  double theta() const {
    return std::fmod(base_theta + quarter_turns * kHalfPi, kTwoPi);
  }

  /// (row, col) of the object center after the applied quarter turns.
  std::pair<double, double> center() const {
    const double last = static_cast<double>(grid_size()) - 1.0;
    double r = base_row, c = base_col;
    for (int k = 0; k < quarter_turns; ++k) {
      const double nr = last - c;
      c = r;
      r = nr;
    }
    return {r, c};
  }
};

inline bool operator==(const BevSample& a, const BevSample& b) {
  return a.base_theta == b.base_theta && a.base_row == b.base_row && a.base_col == b.base_col &&
         a.length == b.length && a.width == b.width && a.quarter_turns == b.quarter_turns &&
         a.grid.shape() == b.grid.shape() &&
         std::equal(a.grid.data().begin(), a.grid.data().end(), b.grid.data().begin());
}

/// Parameters of one object, before rasterization.
struct ObjectSpec {
  double theta, row, col, length, width, brightness;
};

inline constexpr double kFrontFraction = 0.3;
inline constexpr double kFrontBoost = 0.4;

/// Rasterizes one object. The front kFrontFraction of the length is
/// brighter by kFrontBoost, marking the heading; noise is only added on
/// occupied cells.
inline BevSample rasterize(std::size_t S, const ObjectSpec& obj, double noise_std, Rng* noise) {
  std::vector<double> v(2 * S * S, 0.0);
  const double ct = std::cos(obj.theta), st = std::sin(obj.theta);
  const double hl = 0.5 * obj.length + 1e-9, hw = 0.5 * obj.width + 1e-9;
  const double front = 0.5 * obj.length - kFrontFraction * obj.length;
  for (std::size_t r = 0; r < S; ++r) {
    for (std::size_t c = 0; c < S; ++c) {
      const double dx = static_cast<double>(c) - obj.col;
      const double dy = obj.row - static_cast<double>(r);
      const double along = dx * ct + dy * st;
      const double across = -dx * st + dy * ct;
      if (std::abs(along) > hl || std::abs(across) > hw) continue;
      double value = obj.brightness + (along > front ? kFrontBoost : 0.0);
      if (noise_std > 0 && noise) value += noise->normal(0.0, noise_std);
      v[r * S + c] = std::clamp(value, 0.0, 1.0);
      v[S * S + r * S + c] = 1.0;
    }
  }
  BevSample s;
  s.grid = Tensor({2, S, S}, std::move(v));
  s.base_theta = obj.theta;
  s.base_row = obj.row;
  s.base_col = obj.col;
  s.length = obj.length;
  s.width = obj.width;
  return s;
}

/// Samples size, heading in [theta_lo, theta_hi) and a center that keeps
/// the whole footprint inside the grid, then rasterizes.
inline BevSample render_sample(Rng& rng, const DatasetConfig& cfg, double theta_lo,
                               double theta_hi) {
  const double last = static_cast<double>(cfg.grid_size) - 1.0;
  constexpr int kMaxAttempts = 64;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    ObjectSpec obj{};
    obj.length = rng.uniform(cfg.length_min, cfg.length_max);
    obj.width = rng.uniform(cfg.width_min, cfg.width_max);
    obj.theta = rng.uniform(theta_lo, theta_hi);
    obj.brightness = rng.uniform(0.35, 0.6);
    const double ct = std::abs(std::cos(obj.theta)), st = std::abs(std::sin(obj.theta));
    const double ex = 0.5 * (obj.length * ct + obj.width * st);  // half extent along x
    const double ey = 0.5 * (obj.length * st + obj.width * ct);
    if (2 * ex > last || 2 * ey > last) continue;
    obj.col = rng.uniform(ex, last - ex);
    obj.row = rng.uniform(ey, last - ey);
    return rasterize(cfg.grid_size, obj, cfg.noise_std, &rng);
  }
  throw PlacementFailure("could not place an object in a " + std::to_string(cfg.grid_size) +
                         "-cell grid after " + std::to_string(kMaxAttempts) + " attempts");
}

/// The scene rotated by k quarter turns counter-clockwise about the grid
/// center; heading and center follow.
inline BevSample rotate_sample(const BevSample& s, int k) {
  k = ((k % 4) + 4) % 4;
  BevSample out = s;
  if (k == 0) return out;
  out.grid = act_on_plane(GroupElement(GroupSpec::c4(), k), s.grid).detach();
  out.quarter_turns = (s.quarter_turns + k) % 4;
  return out;
}

/// Smallest absolute angle between two headings, in [0, pi].
inline double angular_error(double predicted, double truth) {
  double d = std::fmod(std::abs(predicted - truth), kTwoPi);
  if (d > std::numbers::pi) d = kTwoPi - d;
  return d;
}

// ---------------------------------------------------------------------------

/// Quarter turns applied to the test split at evaluation time.
inline std::vector<int> evaluation_rotations(TestRotationPolicy p) {
  if (p == TestRotationPolicy::c4_multiples) return {0, 1, 2, 3};
  return {0};
}

struct Dataset {
  DatasetConfig config;
  std::vector<BevSample> train;
  std::vector<BevSample> test;
};

inline constexpr std::uint64_t kTrainStream = 0x7261696eULL;
inline constexpr std::uint64_t kTestStream = 0x74657374ULL;

/// Deterministic in cfg.seed; every sample draws from its own derived seed.
inline Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset d{cfg, {}, {}};
  d.train.reserve(cfg.n_train);
  d.test.reserve(cfg.n_test);
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    Rng rng(derive_seed(cfg.seed ^ kTrainStream, i));
    d.train.push_back(render_sample(rng, cfg, 0.0, cfg.train_theta_max));
  }
  const bool full_circle = cfg.test_rotation_policy == TestRotationPolicy::uniform_continuous;
  for (std::size_t i = 0; i < cfg.n_test; ++i) {
    Rng rng(derive_seed(cfg.seed ^ kTestStream, i));
    d.test.push_back(render_sample(rng, cfg, 0.0, full_circle ? kTwoPi : cfg.train_theta_max));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Export format (version 1): a directory holding
//   manifest.json        {"format": "geqbev-dataset", "version": 1, "seed",
//                         "config": {...}, "samples": [{"split", "index",
//                         "file", "theta", "base_theta", "quarter_turns",
//                         "center": [row, col], "base_center": [row, col],
//                         "size": [length, width]}, ...]}
//   train/NNNNNN.bin     grid tensor blobs, [2,S,S]
//   test/NNNNNN.bin
// ---------------------------------------------------------------------------

inline constexpr int kDatasetFormatVersion = 1;

inline nlohmann::json to_json(const DatasetConfig& c) {
  return {{"grid_size", c.grid_size},
          {"n_train", c.n_train},
          {"n_test", c.n_test},
          {"seed", c.seed},
          {"test_rotation_policy", std::string(to_string(c.test_rotation_policy))},
          {"object_length", {c.length_min, c.length_max}},
          {"object_width", {c.width_min, c.width_max}},
          {"noise_std", c.noise_std},
          {"train_theta_max", c.train_theta_max}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.grid_size = j.at("grid_size").get<std::size_t>();
  c.n_train = j.at("n_train").get<std::size_t>();
  c.n_test = j.at("n_test").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.test_rotation_policy = parse_test_rotation_policy(j.at("test_rotation_policy").get<std::string>());
  c.length_min = j.at("object_length").at(0).get<double>();
  c.length_max = j.at("object_length").at(1).get<double>();
  c.width_min = j.at("object_width").at(0).get<double>();
  c.width_max = j.at("object_width").at(1).get<double>();
  c.noise_std = j.at("noise_std").get<double>();
  c.train_theta_max = j.at("train_theta_max").get<double>();
  return c;
}

inline void export_dataset(const Dataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "test");
  nlohmann::json samples = nlohmann::json::array();
  auto dump = [&](const std::vector<BevSample>& split, const char* name) {
    for (std::size_t i = 0; i < split.size(); ++i) {
      char file[32];
      std::snprintf(file, sizeof file, "%s/%06zu.bin", name, i);
      save_tensor(dir / file, split[i].grid);
      const auto& s = split[i];
      const auto [row, col] = s.center();
      samples.push_back({{"split", name},
                         {"index", i},
                         {"file", file},
                         {"theta", s.theta()},
                         {"base_theta", s.base_theta},
                         {"quarter_turns", s.quarter_turns},
                         {"center", {row, col}},
                         {"base_center", {s.base_row, s.base_col}},
                         {"size", {s.length, s.width}}});
    }
  };
  dump(d.train, "train");
  dump(d.test, "test");
  const nlohmann::json manifest{{"format", "geqbev-dataset"},
                                {"version", kDatasetFormatVersion},
                                {"seed", d.config.seed},
                                {"config", to_json(d.config)},
                                {"samples", samples}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

inline Dataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("no manifest.json in " + dir.string());
  const auto m = nlohmann::json::parse(is);
  if (m.value("format", "") != "geqbev-dataset") throw FormatError("not a geqbev dataset");
  if (m.at("version").get<int>() != kDatasetFormatVersion) {
    throw FormatError("unsupported dataset version");
  }
  Dataset d{dataset_config_from_json(m.at("config")), {}, {}};
  for (const auto& e : m.at("samples")) {
    BevSample s;
    s.grid = load_tensor(dir / e.at("file").get<std::string>());
    s.base_theta = e.at("base_theta").get<double>();
    s.quarter_turns = e.at("quarter_turns").get<int>();
    s.base_row = e.at("base_center").at(0).get<double>();
    s.base_col = e.at("base_center").at(1).get<double>();
    s.length = e.at("size").at(0).get<double>();
    s.width = e.at("size").at(1).get<double>();
    (e.at("split").get<std::string>() == "train" ? d.train : d.test).push_back(std::move(s));
  }
  return d;
}

}  // namespace geqbev
