#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include <json.hpp>

#include "geqbev/errors.hpp"
#include "geqbev/model.hpp"
#include "geqbev/ops.hpp"
#include "geqbev/random.hpp"
#include "geqbev/synth_bev.hpp"

namespace geqbev {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1) throw InvalidConfig("train.epochs must be >= 1");
    if (batch_size < 1) throw InvalidConfig("train.batch_size must be >= 1");
    if (!(learning_rate >= 0)) throw InvalidConfig("train.learning_rate must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
      throw InvalidConfig("adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0)) throw InvalidConfig("train.epsilon must be > 0");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},         {"beta2", c.beta2},           {"epsilon", c.epsilon},
          {"seed", c.seed}};
}

/// Adam with bias-corrected moment estimates.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Tensor& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        const double m_hat = m[j] / c1;
        const double v_hat = v[j] / c2;
        w[j] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------

/// Stacks sample grids into [B,2,S,S] (optionally rotated by k).
inline Tensor make_input_batch(std::span<const BevSample* const> samples) {
  const Shape& g = samples.front()->grid.shape();
  std::vector<double> data;
  data.reserve(samples.size() * numel_of(g));
  for (const BevSample* s : samples) data.insert(data.end(), s->grid.data().begin(), s->grid.data().end());
  return Tensor({samples.size(), g[0], g[1], g[2]}, std::move(data));
}

/// (sin theta, cos theta) per sample, [B,2].
inline Tensor make_target_batch(std::span<const BevSample* const> samples) {
  std::vector<double> data;
  for (const BevSample* s : samples) {
    data.push_back(std::sin(s->theta()));
    data.push_back(std::cos(s->theta()));
  }
  return Tensor({samples.size(), 2}, std::move(data));
}

inline Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  const Tensor d = sub(prediction, target);
  return mean(mul(d, d));
}

inline std::vector<Tensor> parameter_tensors(const Model& m) {
  std::vector<Tensor> out;
  for (auto& p : m.stack.parameters()) out.push_back(p.tensor);
  return out;
}

struct TrainResult {
  std::vector<double> loss_curve;  // mean training loss per epoch
  std::size_t steps = 0;
  double wall_time = 0.0;
};

inline constexpr std::uint64_t kShuffleStream = 0x73687566ULL;

/// Minimizes the (sin, cos) MSE with Adam. Deterministic in tcfg.seed.
inline TrainResult train(Model& model, std::span<const BevSample> data, const TrainConfig& tcfg) {
  tcfg.validate();
  if (data.empty()) throw InvalidConfig("training set is empty");
  const auto start = std::chrono::steady_clock::now();
  Adam opt(parameter_tensors(model), tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.epsilon);
  Rng shuffle_rng(derive_seed(tcfg.seed, kShuffleStream));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  std::vector<const BevSample*> batch;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t at = 0; at < order.size(); at += tcfg.batch_size) {
      batch.clear();
      for (std::size_t i = at; i < std::min(order.size(), at + tcfg.batch_size); ++i) {
        batch.push_back(&data[order[i]]);
      }
      opt.zero_grad();
      const Tensor loss = mse_loss(model.forward(make_input_batch(batch), true),
                                   make_target_batch(batch));
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(opt.steps()));
      }
      backward(loss);
      opt.step();
      total += loss.item();
      ++batches;
    }
    result.loss_curve.push_back(total / static_cast<double>(batches));
  }
  result.steps = opt.steps();
  result.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------

/// Predicted headings atan2(sin_out, cos_out) in [0, 2pi) for every sample
/// rotated by k quarter turns. Runs in eval mode without recording a graph.
inline std::vector<double> predict_angles(Model& model, std::span<const BevSample> data, int k,
                                          std::size_t batch_size = 16) {
  autograd::NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(data.size());
  std::vector<BevSample> rotated;
  std::vector<const BevSample*> batch;
  for (std::size_t at = 0; at < data.size(); at += batch_size) {
    rotated.clear();
    batch.clear();
    for (std::size_t i = at; i < std::min(data.size(), at + batch_size); ++i) {
      rotated.push_back(rotate_sample(data[i], k));
    }
    for (const auto& s : rotated) batch.push_back(&s);
    const Tensor y = model.forward(make_input_batch(batch), false);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      double a = std::atan2(y.data()[2 * b], y.data()[2 * b + 1]);
      if (a < 0) a += kTwoPi;
      out.push_back(a);
    }
  }
  return out;
}

struct EvalReport {
  double mean_angular_error = 0.0;
  std::map<int, double> per_rotation_errors;
  std::map<int, std::vector<double>> predictions;  // per k, in test order; not serialized
  std::size_t n_samples = 0;
  nlohmann::json config;
  double wall_time = 0.0;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [k, e] : r.per_rotation_errors) per[std::to_string(k)] = e;
  return {{"mean_angular_error", r.mean_angular_error},
          {"per_rotation_errors", per},
          {"n_samples", r.n_samples},
          {"config", r.config},
          {"wall_time", r.wall_time}};
}

/// Headings predicted for `data` rotated by k quarter turns, in test order.
using AnglePredictor = std::function<std::vector<double>(std::span<const BevSample>, int k)>;

/// Mean angular error over every (sample, rotation) pair and per rotation.
inline EvalReport evaluate(const AnglePredictor& predict, std::span<const BevSample> data,
                           std::span<const int> rotations) {
  const auto start = std::chrono::steady_clock::now();
  EvalReport r;
  double total = 0.0;
  std::size_t count = 0;
  for (int k : rotations) {
    const auto& pred = r.predictions[k] = predict(data, k);
    if (pred.size() != data.size()) throw ShapeMismatch("predictor returned a wrong number of angles");
    double sum_k = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      BevSample truth = data[i];  // shares the grid; only the label is needed
      truth.quarter_turns = (truth.quarter_turns + k % 4 + 4) % 4;
      sum_k += angular_error(pred[i], truth.theta());
    }
    r.per_rotation_errors[k] = data.empty() ? 0.0 : sum_k / static_cast<double>(data.size());
    total += sum_k;
    count += data.size();
  }
  r.n_samples = count;
  r.mean_angular_error = count ? total / static_cast<double>(count) : 0.0;
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline EvalReport evaluate(Model& model, std::span<const BevSample> data,
                           std::span<const int> rotations) {
  EvalReport r = evaluate(
      [&](std::span<const BevSample> d, int k) { return predict_angles(model, d, k); }, data,
      rotations);
  r.config = to_json(model.config);
  r.config["group"] = std::string(model.group.name());
  return r;
}

/// Largest deviation over samples and k of theta(rotate(s, k)) from
/// theta(s) + k*pi/2, in radians. Needs k = 0 among the predictions.
inline double prediction_equivariance_error(const EvalReport& r) {
  const auto base = r.predictions.find(0);
  if (base == r.predictions.end()) return std::numeric_limits<double>::quiet_NaN();
  double worst = 0.0;
  for (const auto& [k, pred] : r.predictions)
    for (std::size_t i = 0; i < pred.size(); ++i)
      worst = std::max(worst, angular_error(pred[i], base->second[i] + k * kHalfPi));
  return worst;
}

/// Median of the same per-sample deviations.
inline double prediction_equivariance_median(const EvalReport& r) {
  const auto base = r.predictions.find(0);
  if (base == r.predictions.end()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> d;
  for (const auto& [k, pred] : r.predictions) {
    if (k == 0) continue;
    for (std::size_t i = 0; i < pred.size(); ++i) d.push_back(angular_error(pred[i], base->second[i] + k * kHalfPi));
  }
  if (d.empty()) return 0.0;
  std::nth_element(d.begin(), d.begin() + static_cast<long>(d.size() / 2), d.end());
  return d[d.size() / 2];
}

}  // namespace geqbev
