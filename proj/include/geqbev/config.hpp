#pragma once

// YAML run configuration with strict key checking and dotted overrides.
//
//   data:    grid_size n_train n_test seed test_rotation_policy object_length
//            object_width noise_std train_theta_max path
//   model:   arch group depth channels pool kernel_size in_channels
//            match_params seed
//   train:   epochs batch_size learning_rate beta1 beta2 epsilon seed
//   eval:    rotations checkpoint
//   ablate:  archs depths pools seeds jobs save_checkpoints
//   output:  root
//
// Every key is optional; omitted keys keep their defaults.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "geqbev/errors.hpp"
#include "geqbev/group.hpp"
#include "geqbev/model.hpp"
#include "geqbev/synth_bev.hpp"
#include "geqbev/train.hpp"

namespace geqbev {

struct AblateConfig {
  std::vector<Arch> archs{Arch::geq};
  std::vector<std::size_t> depths{3};
  std::vector<PoolMethod> pools{PoolMethod::beveq};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t jobs = 1;
  bool save_checkpoints = true;
};

struct RunConfig {
  DatasetConfig data;
  std::string data_path;  // exported dataset to load instead of generating
  ModelConfig model;
  GroupSpec group = GroupSpec::c4();
  std::uint64_t model_seed = 1;
  TrainConfig train;
  std::vector<int> rotations;  // empty: derived from data.test_rotation_policy
  std::string checkpoint;      // eval input
  AblateConfig ablate;
  std::string output_root = "runs";

  std::vector<int> effective_rotations() const {
    return rotations.empty() ? evaluation_rotations(data.test_rotation_policy) : rotations;
  }
};

namespace detail {

inline std::string location(const std::string& source, const YAML::Node& n) {
  const YAML::Mark m = n.Mark();
  if (m.line < 0) return "--set";
  return source + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

class ConfigReader {
 public:
  ConfigReader(std::string source, std::set<std::string> overridden)
      : source_(std::move(source)), overridden_(std::move(overridden)) {}

  [[noreturn]] void fail(const YAML::Node& n, const std::string& key, const std::string& what) const {
    const std::string where = overridden_.count(key) ? "--set " + key : location(source_, n);
    throw InvalidConfig(where + ": key '" + key + "': " + what);
  }

  void check_keys(const YAML::Node& map, const std::string& prefix, const std::set<std::string>& allowed) const {
    if (!map.IsMap()) fail(map, prefix, "expected a mapping");
    for (const auto& kv : map) {
      const std::string k = kv.first.as<std::string>();
      if (!allowed.count(k)) {
        std::string list;
        for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
        fail(kv.first, prefix.empty() ? k : prefix + "." + k, "unknown key (allowed: " + list + ")");
      }
    }
  }

  template <class T>
  T scalar(const YAML::Node& n, const std::string& key, const char* type_name) const {
    if (!n.IsScalar()) fail(n, key, std::string("expected ") + type_name);
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      fail(n, key, std::string("expected ") + type_name + ", got '" + n.Scalar() + "'");
    }
  }

  std::uint64_t unsigned_int(const YAML::Node& n, const std::string& key) const {
    if (n.IsScalar() && !n.Scalar().empty() && n.Scalar()[0] == '-') {
      fail(n, key, "expected a non-negative integer, got '" + n.Scalar() + "'");
    }
    return scalar<std::uint64_t>(n, key, "a non-negative integer");
  }

  double real(const YAML::Node& n, const std::string& key) const { return scalar<double>(n, key, "a number"); }
  bool boolean(const YAML::Node& n, const std::string& key) const { return scalar<bool>(n, key, "true or false"); }
  std::string text(const YAML::Node& n, const std::string& key) const {
    return scalar<std::string>(n, key, "a string");
  }

  template <class F>
  auto list(const YAML::Node& n, const std::string& key, F&& item) const {
    if (!n.IsSequence()) fail(n, key, "expected a list");
    std::vector<decltype(item(n))> out;
    for (const auto& e : n) out.push_back(item(e));
    return out;
  }

  /// Runs parse(text) and reports its error message at the node.
  template <class F>
  auto parsed(const YAML::Node& n, const std::string& key, F&& parse) const {
    const std::string s = text(n, key);
    try {
      return parse(s);
    } catch (const Error& e) {
      fail(n, key, e.what());
    }
  }

  const std::string& source() const { return source_; }

 private:
  std::string source_;
  std::set<std::string> overridden_;
};

}  // namespace detail

/// Applies "section.key=value" to the tree; the value is parsed as YAML.
/// Returns "section.key".
inline std::string apply_override(YAML::Node& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InvalidConfig("--set " + assignment + ": expected section.key=value");
  const std::string path = assignment.substr(0, eq);
  const auto dot = path.find('.');
  if (dot == std::string::npos || path.find('.', dot + 1) != std::string::npos || dot == 0 ||
      dot + 1 == path.size()) {
    throw InvalidConfig("--set " + assignment + ": key must have the form section.key");
  }
  YAML::Node value;
  try {
    value = YAML::Load(assignment.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw InvalidConfig("--set " + assignment + ": " + e.msg);
  }
  const std::string section = path.substr(0, dot), key = path.substr(dot + 1);
  if (!root[section] || !root[section].IsMap()) root[section] = YAML::Node(YAML::NodeType::Map);
  YAML::Node sec = root[section];
  sec[key] = value;
  return path;
}

/// Validates the tree and builds a RunConfig. Throws InvalidConfig with a
/// "source:line:col: key 'section.key': ..." message on the first problem.
/// Keys listed in `overridden` are reported as "--set section.key".
inline RunConfig parse_run_config(const YAML::Node& root, const std::string& source,
                                  const std::set<std::string>& overridden = {}) {
  detail::ConfigReader rd(source, overridden);
  RunConfig c;
  if (!root || root.IsNull()) return c;
  rd.check_keys(root, "", {"data", "model", "train", "eval", "ablate", "output"});

  auto section = [&](const char* name, const std::set<std::string>& keys, auto&& body) {
    const YAML::Node s = root[name];
    if (!s || s.IsNull()) return;
    rd.check_keys(s, name, keys);
    for (const auto& kv : s) body(kv.first.as<std::string>(), kv.second, std::string(name) + "." + kv.first.as<std::string>());
  };
  auto pair_of = [&](const YAML::Node& n, const std::string& key) {
    const auto v = rd.list(n, key, [&](const YAML::Node& e) { return rd.real(e, key); });
    if (v.size() != 2) rd.fail(n, key, "expected [min, max]");
    return std::pair{v[0], v[1]};
  };

  section("data",
          {"grid_size", "n_train", "n_test", "seed", "test_rotation_policy", "object_length", "object_width",
           "noise_std", "train_theta_max", "path"},
          [&](const std::string& k, const YAML::Node& v, const std::string& key) {
            auto& d = c.data;
            if (k == "grid_size") d.grid_size = rd.unsigned_int(v, key);
            else if (k == "n_train") d.n_train = rd.unsigned_int(v, key);
            else if (k == "n_test") d.n_test = rd.unsigned_int(v, key);
            else if (k == "seed") d.seed = rd.unsigned_int(v, key);
            else if (k == "test_rotation_policy") d.test_rotation_policy = rd.parsed(v, key, [](const std::string& s) { return parse_test_rotation_policy(s); });
            else if (k == "object_length") std::tie(d.length_min, d.length_max) = pair_of(v, key);
            else if (k == "object_width") std::tie(d.width_min, d.width_max) = pair_of(v, key);
            else if (k == "noise_std") d.noise_std = rd.real(v, key);
            else if (k == "train_theta_max") d.train_theta_max = rd.real(v, key);
            else if (k == "path") c.data_path = rd.text(v, key);
          });

  section("model",
          {"arch", "group", "depth", "channels", "pool", "kernel_size", "in_channels", "match_params", "seed"},
          [&](const std::string& k, const YAML::Node& v, const std::string& key) {
            auto& m = c.model;
            if (k == "arch") m.arch = rd.parsed(v, key, [](const std::string& s) { return parse_arch(s); });
            else if (k == "group") c.group = rd.parsed(v, key, [](const std::string& s) { return GroupSpec::from_name(s); });
            else if (k == "depth") m.depth = rd.unsigned_int(v, key);
            else if (k == "channels") m.channels = rd.unsigned_int(v, key);
            else if (k == "pool") m.pool = {rd.parsed(v, key, [](const std::string& s) { return parse_pool_method(s); })};
            else if (k == "kernel_size") m.kernel_size = rd.unsigned_int(v, key);
            else if (k == "in_channels") m.in_channels = rd.unsigned_int(v, key);
            else if (k == "match_params") m.match_params = rd.boolean(v, key);
            else if (k == "seed") c.model_seed = rd.unsigned_int(v, key);
          });

  section("train", {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "epsilon", "seed"},
          [&](const std::string& k, const YAML::Node& v, const std::string& key) {
            auto& t = c.train;
            if (k == "epochs") t.epochs = rd.unsigned_int(v, key);
            else if (k == "batch_size") t.batch_size = rd.unsigned_int(v, key);
            else if (k == "learning_rate") t.learning_rate = rd.real(v, key);
            else if (k == "beta1") t.beta1 = rd.real(v, key);
            else if (k == "beta2") t.beta2 = rd.real(v, key);
            else if (k == "epsilon") t.epsilon = rd.real(v, key);
            else if (k == "seed") t.seed = rd.unsigned_int(v, key);
          });

  section("eval", {"rotations", "checkpoint"}, [&](const std::string& k, const YAML::Node& v, const std::string& key) {
    if (k == "rotations") {
      c.rotations = rd.list(v, key, [&](const YAML::Node& e) {
        const auto r = rd.unsigned_int(e, key);
        if (r > 3) rd.fail(e, key, "rotations are quarter turns in 0..3");
        return static_cast<int>(r);
      });
    } else if (k == "checkpoint") {
      c.checkpoint = rd.text(v, key);
    }
  });

  section("ablate", {"archs", "depths", "pools", "seeds", "jobs", "save_checkpoints"},
          [&](const std::string& k, const YAML::Node& v, const std::string& key) {
            auto& a = c.ablate;
            if (k == "archs") a.archs = rd.list(v, key, [&](const YAML::Node& e) { return rd.parsed(e, key, [](const std::string& s) { return parse_arch(s); }); });
            else if (k == "depths") a.depths = rd.list(v, key, [&](const YAML::Node& e) { return static_cast<std::size_t>(rd.unsigned_int(e, key)); });
            else if (k == "pools") a.pools = rd.list(v, key, [&](const YAML::Node& e) { return rd.parsed(e, key, [](const std::string& s) { return parse_pool_method(s); }); });
            else if (k == "seeds") a.seeds = rd.list(v, key, [&](const YAML::Node& e) { return rd.unsigned_int(e, key); });
            else if (k == "jobs") a.jobs = rd.unsigned_int(v, key);
            else if (k == "save_checkpoints") a.save_checkpoints = rd.boolean(v, key);
            if ((k == "archs" || k == "depths" || k == "pools" || k == "seeds") && v.size() == 0) rd.fail(v, key, "list must not be empty");
          });

  section("output", {"root"}, [&](const std::string& k, const YAML::Node& v, const std::string& key) {
    if (k == "root") c.output_root = rd.text(v, key);
  });

  // semantic checks, reported against the file as a whole
  try {
    c.data.validate();
    c.model.validate();
    c.train.validate();
    for (std::size_t d : c.ablate.depths)
      if (d < 1) throw InvalidConfig("ablate.depths entries must be >= 1");
    if (c.ablate.jobs < 1) throw InvalidConfig("ablate.jobs must be >= 1");
    if (c.model.in_channels != 2) throw InvalidConfig("model.in_channels must be 2 (intensity, occupancy)");
  } catch (const InvalidConfig& e) {
    throw InvalidConfig(source + ": " + e.what());
  }
  return c;
}

/// Loads a YAML file (or an empty config when path is empty), applies the
/// overrides in order and validates the result.
inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  YAML::Node root;
  const std::string source = path.empty() ? "<defaults>" : path.string();
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw InvalidConfig(source + ": file not found");
    try {
      root = YAML::LoadFile(path.string());
    } catch (const YAML::Exception& e) {
      throw InvalidConfig(source + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                          ": " + e.msg);
    }
  }
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  std::set<std::string> overridden;
  for (const auto& o : overrides) overridden.insert(apply_override(root, o));
  return parse_run_config(root, source, overridden);
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json data = to_json(c.data);
  data["path"] = c.data_path;
  nlohmann::json model = to_json(c.model);
  model["group"] = std::string(c.group.name());
  model["seed"] = c.model_seed;
  nlohmann::json ablate = {{"depths", c.ablate.depths}, {"seeds", c.ablate.seeds}, {"jobs", c.ablate.jobs},
                           {"save_checkpoints", c.ablate.save_checkpoints}};
  ablate["archs"] = nlohmann::json::array();
  for (Arch a : c.ablate.archs) ablate["archs"].push_back(to_string(a));
  ablate["pools"] = nlohmann::json::array();
  for (PoolMethod p : c.ablate.pools) ablate["pools"].push_back(to_string(p));
  return {{"data", data},
          {"model", model},
          {"train", to_json(c.train)},
          {"eval", {{"rotations", c.rotations}, {"checkpoint", c.checkpoint}}},
          {"ablate", ablate},
          {"output", {{"root", c.output_root}}}};
}

/// Rebuilds the config echoed into a run manifest. JSON is YAML, so it goes
/// through the same validation as a config file.
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::string& source,
                                      const std::vector<std::string>& overrides = {}) {
  YAML::Node root = YAML::Load(j.dump());
  std::set<std::string> overridden;
  for (const auto& o : overrides) overridden.insert(apply_override(root, o));
  return parse_run_config(root, source, overridden);
}

}  // namespace geqbev
