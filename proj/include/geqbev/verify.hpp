#pragma once

// Randomized property suites: group laws, equivariance of every layer,
// oracle agreement, finite-difference gradients and C1 degeneration.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geqbev/group.hpp"
#include "geqbev/layers.hpp"
#include "geqbev/model.hpp"
#include "geqbev/ops.hpp"
#include "geqbev/random.hpp"
#include "geqbev/reference.hpp"

namespace geqbev::verify {

struct Options {
  GroupSpec group = GroupSpec::c4();
  std::size_t trials = 100;         // random trials per law
  std::size_t max_grid = 32;        // equivariance grids are S x S with S <= max_grid
  std::size_t max_oracle_grid = 12; // brute-force oracles are slow; kept small
  double tolerance = 1e-10;         // equivariance laws, relative
  double oracle_tolerance = 1e-12;
  double grad_tolerance = 1e-5;
  double fd_step = 1e-5;
  std::uint64_t seed = 0;
  bool inject_bug = false;  // flips one lift kernel rotation
  std::optional<std::uint64_t> replay_seed;  // run each selected law once with this seed
  std::vector<std::string> only;             // law name prefixes; empty = all
};

struct PropertyResult {
  std::string name;
  std::size_t trials = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
  std::optional<std::uint64_t> failing_seed;
  std::string message;
  bool exhaustive = false;  // checked once over all cases, not sampled
};

struct Report {
  std::vector<PropertyResult> properties;
  double wall_time = 0.0;

  bool passed() const {
    return std::all_of(properties.begin(), properties.end(), [](const auto& p) { return p.passed; });
  }
  /// True when no randomized trial ran at all.
  bool vacuous() const {
    return std::all_of(properties.begin(), properties.end(),
                       [](const auto& p) { return p.exhaustive || p.trials == 0; });
  }
  const PropertyResult* find(std::string_view name) const {
    for (const auto& p : properties)
      if (p.name == name) return &p;
    return nullptr;
  }
};

inline nlohmann::json to_json(const Report& r) {
  nlohmann::json props = nlohmann::json::array();
  for (const auto& p : r.properties) {
    nlohmann::json j = {{"name", p.name},           {"trials", p.trials},
                        {"max_error", p.max_error}, {"tolerance", p.tolerance},
                        {"passed", p.passed}};
    if (p.failing_seed) j["failing_seed"] = *p.failing_seed;
    if (!p.message.empty()) j["message"] = p.message;
    props.push_back(std::move(j));
  }
  return {{"passed", r.passed()}, {"vacuous", r.vacuous()}, {"wall_time", r.wall_time},
          {"properties", props}};
}

namespace detail {

inline std::uint64_t name_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return h;
}

inline std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }
inline std::size_t odd_kernel(Rng& rng, std::size_t max_k) { return 1 + 2 * rng.index(max_k / 2 + 1); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

/// (sin, cos) rows advanced by k quarter turns.
inline Tensor rotate_heading(const Tensor& sc, int k) {
  std::vector<double> out(sc.data().begin(), sc.data().end());
  for (int t = 0; t < k; ++t)
    for (std::size_t b = 0; b < sc.dim(0); ++b) {
      const double s = out[2 * b], c = out[2 * b + 1];
      out[2 * b] = c;
      out[2 * b + 1] = -s;
    }
  return Tensor(sc.shape(), std::move(out));
}

/// Lifted tensor whose values along the group axis are separated by at
/// least 0.03, so max pooling has no near-ties inside a finite-difference step.
inline Tensor separated_lifted(const Shape& s, Rng& rng) {
  const std::size_t R = s[2], plane = s[3] * s[4];
  std::vector<double> v(numel_of(s));
  std::vector<std::size_t> perm(R);
  for (std::size_t bc = 0; bc < s[0] * s[1]; ++bc)
    for (std::size_t x = 0; x < plane; ++x) {
      for (std::size_t r = 0; r < R; ++r) perm[r] = r;
      rng.shuffle(std::span<std::size_t>(perm));
      const double base = rng.uniform(-1.0, 1.0);
      for (std::size_t r = 0; r < R; ++r)
        v[(bc * R + r) * plane + x] = base + 0.05 * static_cast<double>(perm[r]) + rng.uniform(0.0, 0.01);
    }
  return Tensor(s, std::move(v));
}

/// Values bounded away from zero, for checking relu away from its kink.
inline Tensor away_from_zero(const Shape& s, Rng& rng) {
  Tensor t = Tensor::uniform(s, -1.0, 1.0, rng);
  for (double& x : t.mutable_data()) x = x < 0 ? x - 0.01 : x + 0.01;
  return t;
}

inline void randomize_bn(GroupBatchNorm& bn, Rng& rng) {
  for (double& v : bn.gamma.mutable_data()) v = rng.uniform(0.5, 1.5);
  for (double& v : bn.beta.mutable_data()) v = rng.uniform(-0.5, 0.5);
  for (double& v : bn.running_mean.mutable_data()) v = rng.uniform(-0.5, 0.5);
  for (double& v : bn.running_var.mutable_data()) v = rng.uniform(0.5, 2.0);
}

inline Tensor copy_as(const Tensor& t, Shape shape) {
  return Tensor(std::move(shape), std::vector<double>(t.data().begin(), t.data().end()), true);
}

class Runner {
 public:
  explicit Runner(const Options& o) : opts_(o) {}

  /// Runs trial(rng) -> error `trials` times (or once on replay) and records
  /// the worst error and the first failing trial seed.
  void law(const std::string& name, std::size_t trials, double tol,
           const std::function<double(Rng&)>& trial) {
    if (!selected(name)) return;
    PropertyResult r{name, 0, 0.0, tol, true, std::nullopt, {}};
    const std::uint64_t base = derive_seed(opts_.seed, name_hash(name));
    auto run_one = [&](std::uint64_t s) {
      Rng rng(s);
      double e;
      try {
        e = trial(rng);
      } catch (const std::exception& ex) {
        e = std::numeric_limits<double>::infinity();
        if (r.message.empty()) r.message = ex.what();
      }
      ++r.trials;
      if (!(e <= r.max_error)) r.max_error = e;
      if (!(e <= tol) && !r.failing_seed) {
        r.passed = false;
        r.failing_seed = s;
      }
    };
    if (opts_.replay_seed) run_one(*opts_.replay_seed);
    else
      for (std::size_t t = 0; t < trials; ++t) run_one(derive_seed(base, t));
    report_.properties.push_back(std::move(r));
  }

  /// A law checked exhaustively once; error 0 means it holds.
  void exact(const std::string& name, const std::function<double()>& check) {
    if (!selected(name)) return;
    const double e = check();
    report_.properties.push_back({name, 1, e, 0.0, e == 0.0, std::nullopt, {}, true});
  }

  Report take() { return std::move(report_); }

 private:
  bool selected(const std::string& name) const {
    if (opts_.only.empty()) return true;
    return std::any_of(opts_.only.begin(), opts_.only.end(),
                       [&](const std::string& p) { return name.rfind(p, 0) == 0; });
  }

  const Options& opts_;
  Report report_;
};

}  // namespace detail

/// Runs every suite and returns one result per law.
inline Report run(const Options& opts) {
  using namespace detail;
  using reference::relative_error;
  const auto start = std::chrono::steady_clock::now();
  const GroupSpec G = opts.group;
  const std::size_t R = static_cast<std::size_t>(G.order());
  const auto elements = GroupElement::all(G);
  Runner run(opts);
  const std::size_t N = opts.trials;

  // -- group structure --------------------------------------------------------
  run.exact("group.axioms", [&] {
    double bad = 0;
    const auto e = GroupElement::identity(G);
    for (const auto& a : elements) {
      if (!(a * e == a && e * a == a)) ++bad;
      if (!(a * a.inverse() == e && a.inverse() * a == e)) ++bad;
      for (const auto& b : elements)
        for (const auto& c : elements)
          if (!((a * b) * c == a * (b * c))) ++bad;
    }
    return bad;
  });

  run.law("action.plane.oracle", N, 0.0, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_grid);
    const Tensor x = Tensor::uniform({between(rng, 1, 2), between(rng, 1, 3), S, S}, -1, 1, rng);
    double worst = 0;
    for (const auto& g : elements)
      worst = std::max(worst, max_abs_diff(act_on_plane(g, x), reference::rotate_planes(x, g.index())));
    return worst;
  });

  run.law("action.lifted.oracle", N, 0.0, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_grid);
    const Tensor y = Tensor::uniform({between(rng, 1, 2), between(rng, 1, 3), R, S, S}, -1, 1, rng);
    double worst = 0;
    for (const auto& g : elements)
      worst = std::max(worst, max_abs_diff(act_on_lifted(g, y), reference::act_on_lifted(y, g.index())));
    return worst;
  });

  run.law("action.homomorphism", N, 0.0, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_grid);
    const Tensor x = Tensor::uniform({1, 2, S, S}, -1, 1, rng);
    const Tensor y = Tensor::uniform({1, 2, R, S, S}, -1, 1, rng);
    double worst = max_abs_diff(act_on_plane(GroupElement::identity(G), x), x);
    worst = std::max(worst, max_abs_diff(act_on_lifted(GroupElement::identity(G), y), y));
    for (const auto& g : elements)
      for (const auto& h : elements) {
        worst = std::max(worst, max_abs_diff(act_on_plane(g, act_on_plane(h, x)), act_on_plane(g * h, x)));
        worst = std::max(worst, max_abs_diff(act_on_lifted(g, act_on_lifted(h, y)), act_on_lifted(g * h, y)));
      }
    return worst;
  });

  run.law("action.permutation", N, 0.0, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_grid);
    const Tensor y = Tensor::uniform({1, 2, R, S, S}, -1, 1, rng);
    std::vector<double> ref(y.data().begin(), y.data().end());
    std::sort(ref.begin(), ref.end());
    double bad = 0;
    for (const auto& g : elements) {
      const Tensor t = act_on_lifted(g, y);
      std::vector<double> v(t.data().begin(), t.data().end());
      std::sort(v.begin(), v.end());
      if (v != ref) ++bad;
    }
    return bad;
  });

  // -- equivariance -------------------------------------------------------------
  auto make_lift = [&](std::size_t C, std::size_t O, std::size_t K, Rng& rng) {
    LiftLayer lift(C, O, K, G, rng);
    for (double& b : lift.bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
    lift.flip_rotation_for_testing = opts.inject_bug;
    return lift;
  };
  auto make_gconv = [&](std::size_t C, std::size_t O, std::size_t K, Rng& rng) {
    GroupConvLayer conv(C, O, K, G, rng);
    for (double& b : conv.bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
    return conv;
  };

  run.law("equivariance.lift", N, opts.tolerance, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_grid), C = between(rng, 1, 3);
    const LiftLayer lift = make_lift(C, between(rng, 1, 3), odd_kernel(rng, 5), rng);
    const Tensor x = Tensor::uniform({between(rng, 1, 2), C, S, S}, -1, 1, rng);
    const Tensor y = lift.forward(x);
    double worst = 0;
    for (const auto& g : elements)
      worst = std::max(worst, relative_error(lift.forward(act_on_plane(g, x)), act_on_lifted(g, y)));
    return worst;
  });

  run.law("equivariance.gconv", N, opts.tolerance, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_grid), C = between(rng, 1, 3);
    const GroupConvLayer conv = make_gconv(C, between(rng, 1, 3), odd_kernel(rng, 5), rng);
    const Tensor y = Tensor::uniform({between(rng, 1, 2), C, R, S, S}, -1, 1, rng);
    const Tensor z = conv.forward(y);
    double worst = 0;
    for (const auto& g : elements)
      worst = std::max(worst, relative_error(conv.forward(act_on_lifted(g, y)), act_on_lifted(g, z)));
    return worst;
  });

  run.law("equivariance.gbn", N, opts.tolerance, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_grid), C = between(rng, 1, 3);
    GroupBatchNorm bn(C);
    randomize_bn(bn, rng);
    const bool training = rng.index(2) == 0;
    const Tensor y = Tensor::uniform({between(rng, 1, 3), C, R, S, S}, -1, 1, rng);
    const Tensor z = bn.forward(y, training);
    double worst = 0;
    for (const auto& g : elements)
      worst = std::max(worst, relative_error(bn.forward(act_on_lifted(g, y), training), act_on_lifted(g, z)));
    return worst;
  });

  for (const PoolMethod method : {PoolMethod::max, PoolMethod::average}) {
    run.law("invariance.pool." + std::string(to_string(method)), N, opts.tolerance, [&, method](Rng& rng) {
      const std::size_t S = between(rng, 1, opts.max_grid), C = between(rng, 1, 3);
      const GroupPool pool({method}, C, G, rng);
      const Tensor y = Tensor::uniform({between(rng, 1, 2), C, R, S, S}, -1, 1, rng);
      const Tensor p = pool.forward(y);
      double worst = 0;
      for (const auto& g : elements)
        worst = std::max(worst, relative_error(pool.forward(act_on_lifted(g, y)), act_on_plane(g, p)));
      return worst;
    });
  }

  run.law("equivariance.head", N, opts.tolerance, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_grid), C = between(rng, 2, 3);
    const OrientationHead head(C, rng);
    const Tensor p = Tensor::uniform({between(rng, 1, 2), C, S, S}, -1, 1, rng);
    const Tensor o = head.forward(p);
    double worst = 0;
    for (const auto& g : elements)
      worst = std::max(worst, relative_error(head.forward(act_on_plane(g, p)), rotate_heading(o, g.index())));
    return worst;
  });

  // lift -> (gbn -> relu -> gconv)^N -> max/average pool -> head
  run.law("equivariance.model", N, opts.tolerance, [&](Rng& rng) {
    // Draws until the output is not at roundoff level (all relus dead makes
    // the head read constant maps, whose moments vanish).
    for (int attempt = 0;; ++attempt) {
      ModelConfig cfg;
      cfg.depth = between(rng, 1, 3);
      cfg.channels = between(rng, 2, 3);
      cfg.pool = {rng.index(2) == 0 ? PoolMethod::max : PoolMethod::average};
      Model m = build_model(cfg, G, rng.engine()());
      for (auto& layer : m.stack.layers()) {
        if (auto* bn = std::get_if<GroupBatchNorm>(&layer)) randomize_bn(*bn, rng);
        if (auto* lift = std::get_if<LiftLayer>(&layer)) lift->flip_rotation_for_testing = opts.inject_bug;
      }
      const bool training = rng.index(2) == 0;
      const std::size_t S = between(rng, 3, std::min<std::size_t>(std::max<std::size_t>(opts.max_grid, 3), 16));
      const Tensor x = Tensor::uniform({between(rng, 1, 2), cfg.in_channels, S, S}, 0, 1, rng);
      const Tensor o = m.forward(x, training);
      const double scale = std::max(std::abs(o.data()[0]), std::abs(o.data()[1]));
      if (scale < 1e-9 && attempt < 16) continue;
      double worst = 0;
      for (const auto& g : elements)
        worst = std::max(worst, relative_error(m.forward(act_on_plane(g, x), training), rotate_heading(o, g.index())));
      return worst;
    }
  });

  // -- oracles ------------------------------------------------------------------
  run.law("oracle.conv2d", N, opts.oracle_tolerance, [&](Rng& rng) {
    const std::size_t H = between(rng, 1, opts.max_oracle_grid), W = between(rng, 1, opts.max_oracle_grid);
    const std::size_t Kh = odd_kernel(rng, 5), Kw = odd_kernel(rng, 5);
    const std::size_t stride = between(rng, 1, 2);
    const std::size_t pad = between(rng, 0, 2);
    if (H + 2 * pad < Kh || W + 2 * pad < Kw) return 0.0;
    const std::size_t C = between(rng, 1, 3);
    const Tensor x = Tensor::uniform({between(rng, 1, 2), C, H, W}, -1, 1, rng);
    const Tensor k = Tensor::uniform({between(rng, 1, 3), C, Kh, Kw}, -1, 1, rng);
    return relative_error(conv2d(x, k, stride, pad), reference::conv2d(x, k, stride, pad));
  });

  run.law("oracle.lift", N, opts.oracle_tolerance, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_oracle_grid), C = between(rng, 1, 3);
    const LiftLayer lift = make_lift(C, between(rng, 1, 3), odd_kernel(rng, 5), rng);
    const Tensor x = Tensor::uniform({between(rng, 1, 2), C, S, S}, -1, 1, rng);
    return relative_error(lift.forward(x), reference::lift(x, lift.kernel, lift.bias, R));
  });

  run.law("oracle.gconv", N, opts.oracle_tolerance, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_oracle_grid), C = between(rng, 1, 3);
    const GroupConvLayer conv = make_gconv(C, between(rng, 1, 3), odd_kernel(rng, 5), rng);
    const Tensor y = Tensor::uniform({between(rng, 1, 2), C, R, S, S}, -1, 1, rng);
    return relative_error(conv.forward(y), reference::group_conv(y, conv.kernel, conv.bias));
  });

  run.law("oracle.gbn", N, opts.oracle_tolerance, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_oracle_grid), C = between(rng, 1, 3);
    GroupBatchNorm bn(C);
    randomize_bn(bn, rng);
    const Tensor y = Tensor::uniform({between(rng, 1, 3), C, R, S, S}, -1, 1, rng);
    return relative_error(bn.forward(y, true), reference::batch_norm(y, bn.gamma, bn.beta, bn.epsilon));
  });

  run.law("oracle.pool", N, 0.0, [&](Rng& rng) {
    const std::size_t S = between(rng, 1, opts.max_oracle_grid), C = between(rng, 1, 3);
    const Tensor y = Tensor::uniform({between(rng, 1, 2), C, R, S, S}, -1, 1, rng);
    const GroupPool mx({PoolMethod::max}, C, G, rng), av({PoolMethod::average}, C, G, rng);
    return std::max(relative_error(mx.forward(y), reference::pool_group(y, true)),
                    relative_error(av.forward(y), reference::pool_group(y, false)));
  });

  // -- gradients ------------------------------------------------------------------
  const std::size_t NG = N;
  const double gtol = opts.grad_tolerance, h = opts.fd_step;
  auto grad_law = [&](const std::string& name, std::function<double(Rng&)> f) {
    run.law("gradient." + name, NG, gtol, std::move(f));
  };
  auto small = [](Rng& rng) { return between(rng, 2, 5); };
  auto check = [&](Rng& rng, const std::function<Tensor()>& f, std::vector<Tensor> wrt) {
    return reference::gradient_check(f, std::move(wrt), rng, h);
  };

  grad_law("conv2d", [&](Rng& rng) {
    const std::size_t C = between(rng, 1, 2), K = odd_kernel(rng, 3), stride = between(rng, 1, 2),
                      pad = between(rng, 0, 1);
    const Tensor x = Tensor::uniform({between(rng, 1, 2), C, small(rng) + 1, small(rng) + 1}, -1, 1, rng);
    const Tensor k = Tensor::uniform({between(rng, 1, 2), C, K, K}, -1, 1, rng);
    return check(rng, [&] { return conv2d(x, k, stride, pad); }, {x, k});
  });
  grad_law("lift", [&](Rng& rng) {
    const std::size_t C = between(rng, 1, 2), S = small(rng);
    const LiftLayer lift(C, between(rng, 1, 2), odd_kernel(rng, 3), G, rng);
    const Tensor x = Tensor::uniform({between(rng, 1, 2), C, S, S}, -1, 1, rng);
    return check(rng, [&] { return lift.forward(x); }, {x, lift.kernel, lift.bias});
  });
  grad_law("gconv", [&](Rng& rng) {
    const std::size_t C = between(rng, 1, 2), S = small(rng);
    const GroupConvLayer conv(C, between(rng, 1, 2), odd_kernel(rng, 3), G, rng);
    const Tensor y = Tensor::uniform({between(rng, 1, 2), C, R, S, S}, -1, 1, rng);
    return check(rng, [&] { return conv.forward(y); }, {y, conv.kernel, conv.bias});
  });
  for (const bool training : {true, false}) {
    grad_law(training ? "gbn.train" : "gbn.eval", [&, training](Rng& rng) {
      const std::size_t C = between(rng, 1, 2), S = small(rng);
      GroupBatchNorm bn(C);
      randomize_bn(bn, rng);
      const Tensor y = Tensor::uniform({between(rng, 1, 2), C, R, S, S}, -1, 1, rng);
      return check(rng, [&] { return bn.forward(y, training); }, {y, bn.gamma, bn.beta});
    });
  }
  grad_law("relu", [&](Rng& rng) {
    const Tensor x = away_from_zero({between(rng, 1, 3), between(rng, 1, 3), small(rng)}, rng);
    return check(rng, [&] { return relu(x); }, {x});
  });
  for (const PoolMethod method : {PoolMethod::max, PoolMethod::average, PoolMethod::beveq}) {
    grad_law("pool." + std::string(to_string(method)), [&, method](Rng& rng) {
      const std::size_t C = between(rng, 1, 2), S = small(rng);
      const GroupPool pool({method}, C, G, rng);
      const Tensor y = separated_lifted({between(rng, 1, 2), C, R, S, S}, rng);
      std::vector<Tensor> wrt{y};
      for (auto& p : pool.parameters()) wrt.push_back(p.tensor);
      return check(rng, [&] { return pool.forward(y); }, wrt);
    });
  }
  grad_law("plain_conv", [&](Rng& rng) {
    const std::size_t C = between(rng, 1, 2), S = small(rng);
    const PlainConv conv(C, between(rng, 1, 2), odd_kernel(rng, 3), rng);
    const Tensor x = Tensor::uniform({between(rng, 1, 2), C, S, S}, -1, 1, rng);
    return check(rng, [&] { return conv.forward(x); }, {x, conv.kernel, conv.bias});
  });
  grad_law("head", [&](Rng& rng) {
    const std::size_t C = between(rng, 2, 3), S = small(rng);
    const OrientationHead head(C, rng);
    const Tensor p = Tensor::uniform({between(rng, 1, 2), C, S, S}, -1, 1, rng);
    return check(rng, [&] { return head.forward(p); }, {p, head.w, head.u});
  });

  // primitive ops that the layers are built from
  grad_law("op.elementwise", [&](Rng& rng) {
    const Shape s{between(rng, 1, 3), small(rng)};
    const Tensor a = Tensor::uniform(s, -1, 1, rng), b = Tensor::uniform(s, -1, 1, rng);
    const double c = rng.uniform(-2, 2);
    return check(rng, [&] { return scale(mul(add(a, b), sub(a, b)), c); }, {a, b});
  });
  grad_law("op.layout", [&](Rng& rng) {
    const std::size_t S = small(rng);
    const Tensor a = Tensor::uniform({2, 3, S, S}, -1, 1, rng), b = Tensor::uniform({2, 1, S, S}, -1, 1, rng);
    const Tensor bias = Tensor::uniform({1, 3, 1, 1}, -1, 1, rng);
    const int k = static_cast<int>(rng.index(4)), shift = static_cast<int>(rng.index(5)) - 2;
    return check(rng, [&] {
      const Tensor t = add(rot90(a, k), expand(bias, a.shape()));
      const Tensor c = concat({roll(t, 1, shift), b}, 1);
      return reshape(permute(c, {3, 1, 0, 2}), {S, 8 * S});
    }, {a, b, bias});
  });
  grad_law("op.reduce", [&](Rng& rng) {
    const Tensor a = separated_lifted({2, 2, 3, 2, 2}, rng);
    const std::size_t axis = rng.index(5);
    return check(rng, [&] {
      return concat({reshape(sum(a, axis), {sum(a, axis).numel()}), reshape(mean(a, axis), {mean(a, axis).numel()}),
                     reshape(max(a, 2), {16}), reshape(softmax(a, axis), {a.numel()}), sum(a), mean(a)}, 0);
    }, {a});
  });
  grad_law("op.matmul", [&](Rng& rng) {
    const std::size_t n = small(rng), k = small(rng), m = small(rng);
    const Tensor a = Tensor::uniform({2, n, k}, -1, 1, rng), b = Tensor::uniform({2, k, m}, -1, 1, rng);
    const Tensor c = Tensor::uniform({n, k}, -1, 1, rng), d = Tensor::uniform({k, m}, -1, 1, rng);
    return check(rng, [&] { return concat({reshape(bmm(a, b), {2 * n * m}), reshape(matmul(c, d), {n * m})}, 0); },
                 {a, b, c, d});
  });

  // -- trivial-group degeneration ---------------------------------------------------
  run.law("degeneration.c1", N, 0.0, [&](Rng& rng) {
    ModelConfig cfg;
    cfg.depth = between(rng, 1, 3);
    cfg.channels = between(rng, 2, 4);
    cfg.kernel_size = odd_kernel(rng, 5);
    cfg.pool = {static_cast<PoolMethod>(rng.index(3))};
    Model geq = build_model(cfg, GroupSpec::c1(), rng.engine()());
    LayerStack plain;
    Rng unused(0);
    for (auto& layer : geq.stack.layers()) {
      if (auto* l = std::get_if<LiftLayer>(&layer)) {
        for (double& b : l->bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
        PlainConv c(l->kernel.dim(1), l->kernel.dim(0), l->kernel.dim(2), unused);
        c.kernel = copy_as(l->kernel, l->kernel.shape());
        c.bias = copy_as(l->bias, l->bias.shape());
        plain.push(c);
      } else if (auto* gc = std::get_if<GroupConvLayer>(&layer)) {
        for (double& b : gc->bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
        const std::size_t O = gc->kernel.dim(0), C = gc->kernel.dim(1), K = gc->kernel.dim(3);
        PlainConv c(C, O, K, unused);
        c.kernel = copy_as(gc->kernel, {O, C, K, K});
        c.bias = copy_as(gc->bias, gc->bias.shape());
        plain.push(c);
      } else if (auto* bn = std::get_if<GroupBatchNorm>(&layer)) {
        randomize_bn(*bn, rng);
        GroupBatchNorm p(bn->gamma.numel());
        p.gamma = copy_as(bn->gamma, bn->gamma.shape());
        p.beta = copy_as(bn->beta, bn->beta.shape());
        p.running_mean = copy_as(bn->running_mean, bn->running_mean.shape());
        p.running_var = copy_as(bn->running_var, bn->running_var.shape());
        plain.push(p);
      } else if (auto* pool = std::get_if<GroupPool>(&layer)) {
        GroupPool p(pool->spec, cfg.channels, GroupSpec::c1(), unused);
        if (pool->spec.method == PoolMethod::beveq) {
          for (double& b : pool->bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
          p.kernel = copy_as(pool->kernel, pool->kernel.shape());
          p.bias = copy_as(pool->bias, pool->bias.shape());
        }
        plain.push(p);
      } else if (auto* head = std::get_if<OrientationHead>(&layer)) {
        OrientationHead p(cfg.channels, unused);
        p.w = copy_as(head->w, head->w.shape());
        p.u = copy_as(head->u, head->u.shape());
        plain.push(p);
      } else {
        plain.push(Relu{});
      }
    }
    const bool training = rng.index(2) == 0;
    const std::size_t S = between(rng, 1, 16);
    const Tensor x = Tensor::uniform({between(rng, 1, 3), cfg.in_channels, S, S}, 0, 1, rng);
    return max_abs_diff(geq.forward(x, training), plain.forward(x, training));
  });

  Report report = run.take();
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace geqbev::verify
