// geqbev: dataset generation, property verification, training, evaluation
// and ablations. Exit codes: 0 success, 1 property/eval failure, 2 config error.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "geqbev/ablate.hpp"
#include "geqbev/config.hpp"
#include "geqbev/model.hpp"
#include "geqbev/runtime.hpp"
#include "geqbev/synth_bev.hpp"
#include "geqbev/train.hpp"
#include "geqbev/verify.hpp"

#ifndef GEQBEV_VERSION
#define GEQBEV_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace geqbev;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kConfigError = 2;
constexpr int kManifestVersion = 1;

std::string timestamp(const char* fmt, bool utc) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  if (utc) gmtime_r(&now, &tm);
  else localtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw FormatError("cannot write " + p.string());
  os << text;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

struct RunOptions {
  std::string config;
  std::string manifest;
  std::vector<std::string> overrides;
  std::string run_dir;
};

/// Config from --config or a previous run's --manifest, plus overrides.
RunConfig resolve_config(const RunOptions& o, const std::string& command) {
  if (!o.config.empty() && !o.manifest.empty()) throw InvalidConfig("--config and --manifest are exclusive");
  if (o.manifest.empty()) return load_run_config(o.config, o.overrides);
  std::ifstream in(o.manifest);
  if (!in) throw InvalidConfig(o.manifest + ": file not found");
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidConfig(o.manifest + ": " + e.what());
  }
  if (!m.contains("config") || !m.contains("command")) throw InvalidConfig(o.manifest + ": not a run manifest");
  if (m["command"] != command) {
    throw InvalidConfig(o.manifest + ": manifest records command '" + m["command"].get<std::string>() +
                        "', not '" + command + "'");
  }
  return run_config_from_json(m["config"], o.manifest, o.overrides);
}

/// Makes relative input paths absolute so the manifest is location independent.
void absolutize(RunConfig& c) {
  if (!c.data_path.empty()) c.data_path = fs::absolute(c.data_path).lexically_normal().string();
  if (!c.checkpoint.empty()) c.checkpoint = fs::absolute(c.checkpoint).lexically_normal().string();
}

fs::path make_run_dir(const RunOptions& o, const RunConfig& c, const std::string& command) {
  if (!o.run_dir.empty()) {
    fs::create_directories(o.run_dir);
    return o.run_dir;
  }
  const fs::path base = fs::path(c.output_root) / (command + "-" + timestamp("%Y%m%d-%H%M%S", false));
  fs::path dir = base;
  for (int n = 1; fs::exists(dir); ++n) dir = base.string() + "-" + std::to_string(n);
  fs::create_directories(dir);
  return dir;
}

class Manifest {
 public:
  Manifest(fs::path dir, const std::string& command, const RunConfig& c) : path_(dir / "manifest.json") {
    doc_ = {{"tool", "geqbev"},
            {"version", GEQBEV_VERSION},
            {"manifest_version", kManifestVersion},
            {"command", command},
            {"config", to_json(c)},
            {"seeds", {{"data", c.data.seed}, {"model", c.model_seed}, {"train", c.train.seed}}},
            {"run_dir", fs::absolute(dir).string()},
            {"outputs", json::object()},
            {"started_at", timestamp("%Y-%m-%dT%H:%M:%SZ", true)},
            {"status", "running"}};
    save();
  }
  void output(const std::string& key, const std::string& rel) { doc_["outputs"][key] = rel; }
  void finish(const std::string& status, double wall_time) {
    doc_["status"] = status;
    doc_["finished_at"] = timestamp("%Y-%m-%dT%H:%M:%SZ", true);
    doc_["wall_time"] = wall_time;
    save();
  }

 private:
  void save() const { write_json(path_, doc_); }
  fs::path path_;
  json doc_;
};

Dataset load_data(const RunConfig& c) {
  if (c.data_path.empty()) return generate_dataset(c.data);
  return import_dataset(c.data_path);
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& c, const fs::path& dir, Manifest& m) {
  const Dataset d = generate_dataset(c.data);
  export_dataset(d, dir / "dataset");
  m.output("dataset", "dataset");
  std::cout << "wrote " << d.train.size() << " train and " << d.test.size() << " test samples to "
            << (dir / "dataset").string() << "\n";
  return kOk;
}

int cmd_train(const RunConfig& c, const fs::path& dir, Manifest& m) {
  const Dataset d = load_data(c);
  Model model = build_model(c.model, c.group, c.model_seed);
  std::cerr << "training " << to_string(c.model.arch) << " model (" << model.stack.parameter_count()
            << " parameters) on " << d.train.size() << " samples\n";
  const TrainResult r = train(model, d.train, c.train);
  save_checkpoint(dir / "model.ckpt", model);
  std::string csv = "epoch,loss\n";
  for (std::size_t e = 0; e < r.loss_curve.size(); ++e) csv += std::to_string(e + 1) + "," + format_number(r.loss_curve[e]) + "\n";
  write_text(dir / "loss_curve.csv", csv);
  write_json(dir / "train.json", {{"loss_curve", r.loss_curve},
                                  {"steps", r.steps},
                                  {"params", model.stack.parameter_count()},
                                  {"widths", {model.widths.hidden, model.widths.last}},
                                  {"layers", model.stack.kinds()},
                                  {"wall_time", r.wall_time}});
  m.output("checkpoint", "model.ckpt");
  m.output("loss_curve", "loss_curve.csv");
  m.output("summary", "train.json");
  std::cout << "final loss " << format_number(r.loss_curve.back()) << ", checkpoint "
            << (dir / "model.ckpt").string() << "\n";
  return kOk;
}

int cmd_eval(const RunConfig& c, const fs::path& dir, Manifest& m) {
  Model model = load_checkpoint(c.checkpoint);
  const Dataset d = load_data(c);
  const auto rotations = c.effective_rotations();
  const EvalReport r = evaluate(model, d.test, rotations);
  json j = to_json(r);
  j["prediction_equivariance_max"] = prediction_equivariance_error(r);
  j["prediction_equivariance_median"] = prediction_equivariance_median(r);
  j["checkpoint"] = c.checkpoint;
  write_json(dir / "eval.json", j);
  std::string csv = "k,mean_err\n";
  for (const auto& [k, e] : r.per_rotation_errors) csv += std::to_string(k) + "," + format_number(e) + "\n";
  write_text(dir / "eval.csv", csv);
  m.output("report", "eval.json");
  m.output("per_rotation", "eval.csv");
  std::cout << "mean angular error " << r.mean_angular_error << " rad over " << r.n_samples << " predictions\n";
  for (const auto& [k, e] : r.per_rotation_errors) std::cout << "  k=" << k << ": " << e << "\n";
  return kOk;
}

int cmd_ablate(const RunConfig& c, const fs::path& dir, Manifest& m) {
  AblationPlan plan;
  plan.data = c.data;
  plan.model = c.model;
  plan.train = c.train;
  plan.group = c.group;
  plan.archs = c.ablate.archs;
  plan.depths = c.ablate.depths;
  plan.pools = c.ablate.pools;
  plan.seeds = c.ablate.seeds;
  plan.rotations = c.rotations;
  plan.jobs = c.ablate.jobs;
  if (c.ablate.save_checkpoints) plan.checkpoint_dir = dir / "checkpoints";
  const Dataset d = load_data(c);
  const auto results = ablate(plan, d, dir / ".workers", [](const ArmResult& r, std::size_t i, std::size_t n) {
    std::cerr << "[" << i + 1 << "/" << n << "] " << r.arm.id() << ": "
              << (r.ok ? "mean_err " + format_number(r.mean_error) : "FAILED " + r.error) << " ("
              << r.wall_time << " s)\n";
  });
  write_text(dir / "results.csv", results_csv(results, plan.effective_rotations()));
  const json summary = summary_json(results);
  write_json(dir / "summary.json", summary);
  const std::string table = format_table(aggregate(results));
  write_text(dir / "table.md", table);
  m.output("results", "results.csv");
  m.output("summary", "summary.json");
  m.output("table", "table.md");
  if (plan.checkpoint_dir) m.output("checkpoints", "checkpoints");
  std::cout << table;
  for (const auto& t : summary["depth_trends"]) {
    std::cout << "depth trend (" << t["arch"].get<std::string>() << ", " << t["pool"].get<std::string>()
              << "): best depth " << t["best_depth"] << ", intermediate depth best: "
              << (t["intermediate_depth_best"].get<bool>() ? "yes" : "no") << "\n";
  }
  const bool all_ok = std::all_of(results.begin(), results.end(), [](const ArmResult& r) { return r.ok; });
  return all_ok ? kOk : kFailure;
}

/// Shared flow of the run-directory commands: resolve and validate the
/// config, and only then create the run directory and manifest.
template <class F>
int run_command(const std::string& command, const RunOptions& o, F&& body) {
  RunConfig c;
  try {
    c = resolve_config(o, command);
    absolutize(c);
    if (command == "eval") {
      if (c.checkpoint.empty()) throw InvalidConfig("eval.checkpoint is required");
      if (!fs::exists(c.checkpoint)) throw InvalidConfig("eval.checkpoint: no such file " + c.checkpoint);
    }
    if (!c.data_path.empty() && !fs::exists(fs::path(c.data_path) / "manifest.json")) {
      throw InvalidConfig("data.path: no dataset manifest under " + c.data_path);
    }
    if (command == "train") build_model(c.model, c.group, c.model_seed);
    if (command == "ablate") {
      for (Arch a : c.ablate.archs)
        for (std::size_t depth : c.ablate.depths)
          for (PoolMethod p : c.ablate.pools) {
            ModelConfig mc = c.model;
            mc.arch = a;
            mc.depth = depth;
            mc.pool = {p};
            build_model(mc, c.group, 0);
          }
    }
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  const auto start = std::chrono::steady_clock::now();
  const fs::path dir = make_run_dir(o, c, command);
  Manifest manifest(dir, command, c);
  std::cerr << "run directory " << dir.string() << "\n";
  int code = kFailure;
  try {
    code = body(c, dir, manifest);
  } catch (const std::exception& e) {
    std::cerr << command << " failed: " << e.what() << "\n";
    code = kFailure;
  }
  manifest.finish(code == kOk ? "ok" : "failed", seconds_since(start));
  return code;
}

struct VerifyArgs {
  std::string group = "c4";
  std::size_t trials = 100;
  std::size_t max_grid = 32;
  double tolerance = 1e-10;
  double grad_tolerance = 1e-5;
  double oracle_tolerance = 1e-12;
  std::uint64_t seed = 0;
  bool inject_bug = false;
  std::optional<std::uint64_t> replay;
  std::vector<std::string> only;
  std::string json_out;
};

int cmd_verify(const VerifyArgs& a) {
  verify::Options o;
  try {
    o.group = GroupSpec::from_name(a.group);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  o.trials = a.trials;
  o.max_grid = std::max<std::size_t>(a.max_grid, 1);
  o.max_oracle_grid = std::min<std::size_t>(12, o.max_grid);
  o.tolerance = a.tolerance;
  o.grad_tolerance = a.grad_tolerance;
  o.oracle_tolerance = a.oracle_tolerance;
  o.seed = a.seed;
  o.inject_bug = a.inject_bug;
  o.replay_seed = a.replay;
  o.only = a.only;

  const verify::Report r = verify::run(o);
  std::printf("%-28s %7s %12s %10s  %s\n", "property", "trials", "max_error", "tolerance", "result");
  for (const auto& p : r.properties) {
    std::printf("%-28s %7zu %12.3e %10.1e  %s\n", p.name.c_str(), p.trials, p.max_error, p.tolerance,
                p.passed ? "PASS" : "FAIL");
  }
  for (const auto& p : r.properties) {
    if (p.passed) continue;
    std::printf("violated: %s (max error %.3e > %.1e)", p.name.c_str(), p.max_error, p.tolerance);
    if (p.failing_seed) {
      std::printf("; reproduce with: geqbev verify --group %s --only %s --replay-seed %llu%s",
                  a.group.c_str(), p.name.c_str(), static_cast<unsigned long long>(*p.failing_seed),
                  a.inject_bug ? " --inject-bug" : "");
    }
    if (!p.message.empty()) std::printf(" [%s]", p.message.c_str());
    std::printf("\n");
  }
  if (a.trials == 0 && !a.replay) {
    std::fprintf(stderr, "warning: --trials 0 exercises no randomized law; the pass is vacuous\n");
  }
  std::printf("%s in %.2f s\n", r.passed() ? "all properties hold" : "property violations found", r.wall_time);
  if (!a.json_out.empty()) write_json(a.json_out, verify::to_json(r));
  return r.passed() ? kOk : kFailure;
}

void add_run_options(CLI::App* sub, RunOptions& o) {
  sub->add_option("-c,--config", o.config, "YAML config file");
  sub->add_option("-m,--manifest", o.manifest, "re-run with the config recorded in a run manifest");
  sub->add_option("-s,--set", o.overrides, "override a config value, section.key=value (repeatable)");
  sub->add_option("--run-dir", o.run_dir, "write outputs here instead of a timestamped directory");
}

}  // namespace

int main(int argc, char** argv) {
  geqbev::tune_allocator();
  CLI::App app{"Rotation-equivariant BEV orientation models: verify, generate, train, evaluate, ablate"};
  app.set_version_flag("--version", GEQBEV_VERSION);
  app.require_subcommand(1);

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "run the equivariance, oracle and gradient property suites");
  verify->add_option("--group", va.group, "c1 or c4")->capture_default_str();
  verify->add_option("--trials", va.trials, "random trials per law")->capture_default_str();
  verify->add_option("--max-grid", va.max_grid, "largest grid side for equivariance laws")->capture_default_str();
  verify->add_option("--tolerance", va.tolerance, "relative tolerance of equivariance laws")->capture_default_str();
  verify->add_option("--grad-tolerance", va.grad_tolerance, "relative tolerance of gradient checks")->capture_default_str();
  verify->add_option("--oracle-tolerance", va.oracle_tolerance, "relative tolerance of oracle comparisons")->capture_default_str();
  verify->add_option("--seed", va.seed, "base seed")->capture_default_str();
  verify->add_flag("--inject-bug", va.inject_bug, "rotate one lifting kernel copy the wrong way (negative control)");
  verify->add_option("--replay-seed", va.replay, "run each selected law once with this trial seed");
  verify->add_option("--only", va.only, "restrict to laws whose name starts with this prefix (repeatable)");
  verify->add_option("--json", va.json_out, "also write the report as JSON");

  RunOptions gen_o, train_o, eval_o, ablate_o;
  auto* gen = app.add_subcommand("gen-data", "generate and export a synthetic BEV dataset");
  auto* trn = app.add_subcommand("train", "train one model and write its checkpoint");
  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on the rotated test split");
  auto* abl = app.add_subcommand("ablate", "train and evaluate a grid of arms, write CSV and tables");
  add_run_options(gen, gen_o);
  add_run_options(trn, train_o);
  add_run_options(evl, eval_o);
  add_run_options(abl, ablate_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  if (verify->parsed()) return cmd_verify(va);
  if (gen->parsed()) return run_command("gen-data", gen_o, cmd_gen_data);
  if (trn->parsed()) return run_command("train", train_o, cmd_train);
  if (evl->parsed()) return run_command("eval", eval_o, cmd_eval);
  if (abl->parsed()) return run_command("ablate", ablate_o, cmd_ablate);
  return kConfigError;
}
