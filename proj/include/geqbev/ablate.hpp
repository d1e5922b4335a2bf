#pragma once

// Ablation runner: trains and evaluates a grid of (arch, depth, pool, seed)
// arms on one shared dataset and tabulates the angular errors.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "geqbev/model.hpp"
#include "geqbev/synth_bev.hpp"
#include "geqbev/train.hpp"

namespace geqbev {

struct ArmSpec {
  Arch arch = Arch::geq;
  std::size_t depth = 3;
  PoolMethod pool = PoolMethod::beveq;
  std::uint64_t seed = 1;

  std::string id() const {
    return std::string(to_string(arch)) + "_n" + std::to_string(depth) + "_" +
           std::string(to_string(pool)) + "_s" + std::to_string(seed);
  }
};

struct ArmResult {
  ArmSpec arm;
  bool ok = false;
  std::string error;
  double mean_error = 0.0;
  std::map<int, double> per_rotation_errors;
  double equivariance_error = 0.0;   // max over samples, radians
  double equivariance_median = 0.0;  // median over samples, radians
  std::size_t params = 0;
  std::vector<double> loss_curve;
  double train_time = 0.0;
  double wall_time = 0.0;
};

struct AblationPlan {
  DatasetConfig data;
  ModelConfig model;  // arch, depth and pool are overridden per arm
  TrainConfig train;
  GroupSpec group = GroupSpec::c4();
  std::vector<Arch> archs{Arch::geq};
  std::vector<std::size_t> depths{3};
  std::vector<PoolMethod> pools{PoolMethod::beveq};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<int> rotations;  // empty: derived from the test rotation policy
  std::size_t jobs = 1;        // > 1 runs arms in forked worker processes
  std::optional<std::filesystem::path> checkpoint_dir;

  std::vector<int> effective_rotations() const {
    return rotations.empty() ? evaluation_rotations(data.test_rotation_policy) : rotations;
  }
};

/// Arms in arch-major, then depth, pool, seed order.
inline std::vector<ArmSpec> expand_arms(const AblationPlan& plan) {
  std::vector<ArmSpec> out;
  for (Arch a : plan.archs)
    for (std::size_t d : plan.depths)
      for (PoolMethod p : plan.pools)
        for (std::uint64_t s : plan.seeds) out.push_back({a, d, p, s});
  return out;
}

inline constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;

/// Model initialisation depends only on the arm seed, so duplicate arms give
/// identical results regardless of their position in the plan.
inline ArmResult run_arm(const ArmSpec& arm, const AblationPlan& plan, const Dataset& data) {
  const auto start = std::chrono::steady_clock::now();
  ArmResult r;
  r.arm = arm;
  try {
    ModelConfig mc = plan.model;
    mc.arch = arm.arch;
    mc.depth = arm.depth;
    mc.pool = {arm.pool};
    Model model = build_model(mc, plan.group, derive_seed(arm.seed, kModelStream));
    r.params = model.stack.parameter_count();
    TrainConfig tc = plan.train;
    tc.seed = arm.seed;
    const TrainResult tr = train(model, data.train, tc);
    r.loss_curve = tr.loss_curve;
    r.train_time = tr.wall_time;
    const auto rotations = plan.effective_rotations();
    const EvalReport ev = evaluate(model, data.test, rotations);
    r.mean_error = ev.mean_angular_error;
    r.per_rotation_errors = ev.per_rotation_errors;
    r.equivariance_error = prediction_equivariance_error(ev);
    r.equivariance_median = prediction_equivariance_median(ev);
    if (plan.checkpoint_dir) {
      std::filesystem::create_directories(*plan.checkpoint_dir);
      save_checkpoint(*plan.checkpoint_dir / (arm.id() + ".ckpt"), model);
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline nlohmann::json to_json(const ArmResult& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [k, e] : r.per_rotation_errors) per[std::to_string(k)] = e;
  return {{"arch", to_string(r.arm.arch)},
          {"depth", r.arm.depth},
          {"pool", to_string(r.arm.pool)},
          {"seed", r.arm.seed},
          {"status", r.ok ? "ok" : "failed"},
          {"error", r.error},
          {"mean_angular_error", r.mean_error},
          {"per_rotation_errors", per},
          {"prediction_equivariance_max", r.equivariance_error},
          {"prediction_equivariance_median", r.equivariance_median},
          {"params", r.params},
          {"loss_curve", r.loss_curve},
          {"train_time", r.train_time},
          {"wall_time", r.wall_time}};
}

inline ArmResult arm_result_from_json(const nlohmann::json& j) {
  ArmResult r;
  r.arm = {parse_arch(j.at("arch").get<std::string>()), j.at("depth").get<std::size_t>(),
           parse_pool_method(j.at("pool").get<std::string>()), j.at("seed").get<std::uint64_t>()};
  r.ok = j.at("status") == "ok";
  r.error = j.at("error").get<std::string>();
  r.mean_error = j.at("mean_angular_error").get<double>();
  for (const auto& [k, e] : j.at("per_rotation_errors").items()) r.per_rotation_errors[std::stoi(k)] = e.get<double>();
  // NaN is written as null
  auto num = [&](const char* key) { return j.at(key).is_null() ? std::nan("") : j.at(key).get<double>(); };
  r.equivariance_error = num("prediction_equivariance_max");
  r.equivariance_median = num("prediction_equivariance_median");
  r.params = j.at("params").get<std::size_t>();
  r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  r.train_time = j.at("train_time").get<double>();
  r.wall_time = j.at("wall_time").get<double>();
  return r;
}

namespace detail {

/// Runs arms in up to `jobs` forked children. Each child writes its result
/// to its own file; a child that dies is recorded as a failed arm.
inline std::vector<ArmResult> run_forked(const std::vector<ArmSpec>& arms, const AblationPlan& plan,
                                         const Dataset& data, const std::filesystem::path& scratch) {
  std::filesystem::create_directories(scratch);
  std::vector<ArmResult> results(arms.size());
  std::map<pid_t, std::size_t> running;
  std::size_t next = 0;
  auto file_of = [&](std::size_t i) { return scratch / ("arm_" + std::to_string(i) + ".json"); };
  auto reap = [&] {
    int status = 0;
    const pid_t pid = ::wait(&status);
    if (pid <= 0) return;
    const std::size_t i = running.at(pid);
    running.erase(pid);
    std::ifstream in(file_of(i));
    if (WIFEXITED(status) && WEXITSTATUS(status) == 0 && in) {
      results[i] = arm_result_from_json(nlohmann::json::parse(in));
    } else {
      results[i].arm = arms[i];
      results[i].error = "worker process exited abnormally (status " + std::to_string(status) + ")";
    }
  };
  while (next < arms.size() || !running.empty()) {
    if (next < arms.size() && running.size() < plan.jobs) {
      const pid_t pid = ::fork();
      if (pid == 0) {
        const ArmResult r = run_arm(arms[next], plan, data);
        std::ofstream(file_of(next)) << to_json(r).dump();
        std::_Exit(0);
      }
      if (pid < 0) {
        results[next] = run_arm(arms[next], plan, data);
      } else {
        running[pid] = next;
      }
      ++next;
    } else {
      reap();
    }
  }
  std::filesystem::remove_all(scratch);
  return results;
}

}  // namespace detail

using ArmCallback = std::function<void(const ArmResult&, std::size_t index, std::size_t total)>;

/// Runs every arm; a failing arm is recorded and the others continue.
/// Forked workers are used when plan.jobs > 1 and a scratch directory is given.
inline std::vector<ArmResult> ablate(const AblationPlan& plan, const Dataset& data,
                                     const std::filesystem::path& scratch = {},
                                     const ArmCallback& on_done = {}) {
  const auto arms = expand_arms(plan);
  std::vector<ArmResult> results;
  if (plan.jobs > 1 && !scratch.empty()) {
    results = detail::run_forked(arms, plan, data, scratch);
    if (on_done)
      for (std::size_t i = 0; i < results.size(); ++i) on_done(results[i], i, results.size());
    return results;
  }
  for (std::size_t i = 0; i < arms.size(); ++i) {
    results.push_back(run_arm(arms[i], plan, data));
    if (on_done) on_done(results.back(), i, arms.size());
  }
  return results;
}

// ---------------------------------------------------------------------------
// reporting

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// One row per arm. Every column except train_time and wall_time is
/// reproducible bit-for-bit.
inline std::string results_csv(const std::vector<ArmResult>& results, const std::vector<int>& rotations) {
  std::ostringstream os;
  os << "arch,depth,pool,seed,status,mean_err";
  for (int k : rotations) os << ",err_k" << k;
  os << ",pred_equiv_max,pred_equiv_median,params,train_time,wall_time\n";
  for (const auto& r : results) {
    os << to_string(r.arm.arch) << ',' << r.arm.depth << ',' << to_string(r.arm.pool) << ','
       << r.arm.seed << ',' << (r.ok ? "ok" : "failed") << ',' << format_number(r.mean_error);
    for (int k : rotations) {
      const auto it = r.per_rotation_errors.find(k);
      os << ',' << format_number(it == r.per_rotation_errors.end() ? std::nan("") : it->second);
    }
    os << ',' << format_number(r.equivariance_error) << ',' << format_number(r.equivariance_median)
       << ',' << r.params << ',' << format_number(r.train_time) << ',' << format_number(r.wall_time)
       << '\n';
  }
  return os.str();
}

struct AggregateRow {
  Arch arch;
  std::size_t depth;
  PoolMethod pool;
  std::size_t runs = 0;  // successful seeds
  std::size_t failed = 0;
  double mean = 0.0, min = 0.0, max = 0.0;
};

/// Mean and range of mean angular error across seeds, per (arch, depth, pool).
inline std::vector<AggregateRow> aggregate(const std::vector<ArmResult>& results) {
  std::vector<AggregateRow> rows;
  for (const auto& r : results) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& a) {
      return a.arch == r.arm.arch && a.depth == r.arm.depth && a.pool == r.arm.pool;
    });
    if (it == rows.end()) {
      rows.push_back({r.arm.arch, r.arm.depth, r.arm.pool});
      it = rows.end() - 1;
    }
    if (!r.ok) {
      ++it->failed;
      continue;
    }
    if (it->runs == 0) it->min = it->max = r.mean_error;
    it->min = std::min(it->min, r.mean_error);
    it->max = std::max(it->max, r.mean_error);
    it->mean += r.mean_error;
    ++it->runs;
  }
  for (auto& row : rows)
    if (row.runs) row.mean /= static_cast<double>(row.runs);
  return rows;
}

inline std::string format_table(const std::vector<AggregateRow>& rows) {
  std::ostringstream os;
  os << "| arch  | depth | pool    | runs | mean angular error (rad) | range            |\n"
     << "|-------|-------|---------|------|--------------------------|------------------|\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "| %-5s | %5zu | %-7s | %4zu | %24.4f | %.4f .. %.4f |%s\n",
                  std::string(to_string(r.arch)).c_str(), r.depth,
                  std::string(to_string(r.pool)).c_str(), r.runs, r.mean, r.min, r.max,
                  r.failed ? (" " + std::to_string(r.failed) + " failed").c_str() : "");
    os << line;
  }
  return os.str();
}

/// Depth with the lowest mean error among rows sharing arch and pool, and
/// whether it is strictly inside the depth range.
struct DepthTrend {
  Arch arch;
  PoolMethod pool;
  std::size_t best_depth;
  bool intermediate_best;
};

inline std::vector<DepthTrend> depth_trends(const std::vector<AggregateRow>& rows) {
  std::vector<DepthTrend> out;
  for (const auto& r : rows) {
    if (std::any_of(out.begin(), out.end(), [&](const DepthTrend& t) { return t.arch == r.arch && t.pool == r.pool; }))
      continue;
    const AggregateRow* best = nullptr;
    std::size_t lo = r.depth, hi = r.depth, count = 0;
    for (const auto& q : rows) {
      if (q.arch != r.arch || q.pool != r.pool || q.runs == 0) continue;
      ++count;
      lo = std::min(lo, q.depth);
      hi = std::max(hi, q.depth);
      if (!best || q.mean < best->mean) best = &q;
    }
    if (best && count >= 3) out.push_back({r.arch, r.pool, best->depth, best->depth > lo && best->depth < hi});
  }
  return out;
}

inline nlohmann::json summary_json(const std::vector<ArmResult>& results) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& r : results) arms.push_back(to_json(r));
  nlohmann::json agg = nlohmann::json::array();
  const auto rows = aggregate(results);
  for (const auto& a : rows) {
    agg.push_back({{"arch", to_string(a.arch)}, {"depth", a.depth}, {"pool", to_string(a.pool)},
                   {"runs", a.runs}, {"failed", a.failed}, {"mean", a.mean}, {"min", a.min}, {"max", a.max}});
  }
  nlohmann::json trends = nlohmann::json::array();
  for (const auto& t : depth_trends(rows)) {
    trends.push_back({{"arch", to_string(t.arch)}, {"pool", to_string(t.pool)}, {"best_depth", t.best_depth},
                      {"intermediate_depth_best", t.intermediate_best}});
  }
  return {{"arms", arms}, {"aggregate", agg}, {"depth_trends", trends}};
}

}  // namespace geqbev
