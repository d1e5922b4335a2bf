#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "geqbev/errors.hpp"
#include "geqbev/group.hpp"
#include "geqbev/ops.hpp"
#include "geqbev/random.hpp"
#include "geqbev/tensor.hpp"

namespace geqbev {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline Tensor init_kernel(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  return Tensor::uniform(shape, -bound, bound, rng).set_requires_grad(true);
}

inline Tensor zero_param(const Shape& shape) { return Tensor::zeros(shape).set_requires_grad(true); }

}  // namespace detail

// ---------------------------------------------------------------------------

/// Lifting convolution: planar [B,C,H,W] -> lifted [B,O,R,H,W].
class LiftLayer {
 public:
  LiftLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size,
            GroupSpec group, Rng& rng)
      : kernel(detail::init_kernel({out_channels, in_channels, kernel_size, kernel_size},
                                   in_channels * kernel_size * kernel_size, rng)),
        bias(detail::zero_param({out_channels})),
        padding((kernel_size - 1) / 2),
        group(group) {
    if (kernel_size % 2 == 0) throw InvalidHyperparameter("lift kernel size must be odd");
  }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != kernel.dim(1)) {
      throw ShapeMismatch("lift: expected [B," + std::to_string(kernel.dim(1)) + ",H,W], got " +
                          to_string(x.shape()));
    }
    detail::require_square(x, "lift");
    const std::size_t O = kernel.dim(0), R = static_cast<std::size_t>(group.order());
    Tensor rotated = transform_lift_kernel(kernel, group);
    if (flip_rotation_for_testing && R > 1) {
      // negative control: slice 1 rotated clockwise instead of counter-clockwise
      std::vector<Tensor> parts;
      for (std::size_t r = 0; r < R; ++r) {
        const int turns = r == 1 ? 3 : static_cast<int>(r);
        parts.push_back(reshape(rot90(kernel, turns), {O, 1, kernel.dim(1), kernel.dim(2), kernel.dim(3)}));
      }
      rotated = concat(parts, 1);
    }
    const Tensor planar = reshape(rotated, {O * R, kernel.dim(1), kernel.dim(2), kernel.dim(3)});
    const Tensor z = conv2d(x, planar, stride, padding);
    return add_channel_bias(reshape(z, {x.dim(0), O, R, z.dim(2), z.dim(3)}), bias);
  }

  std::vector<NamedTensor> parameters() const { return {{"kernel", kernel}, {"bias", bias}}; }

  Tensor kernel;  // [O,C,K,K]
  Tensor bias;    // [O]
  std::size_t stride = 1;
  std::size_t padding;
  GroupSpec group;
  bool flip_rotation_for_testing = false;
};

// ---------------------------------------------------------------------------

/// Group convolution on lifted maps: [B,C,R,H,W] -> [B,O,R,H,W].
class GroupConvLayer {
 public:
  GroupConvLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size,
                 GroupSpec group, Rng& rng)
      : kernel(detail::init_kernel(
            {out_channels, in_channels, static_cast<std::size_t>(group.order()), kernel_size, kernel_size},
            in_channels * static_cast<std::size_t>(group.order()) * kernel_size * kernel_size, rng)),
        bias(detail::zero_param({out_channels})),
        padding((kernel_size - 1) / 2),
        group(group) {
    if (kernel_size % 2 == 0) throw InvalidHyperparameter("group conv kernel size must be odd");
  }

  Tensor forward(const Tensor& y) const {
    if (y.rank() != 5 || y.dim(1) != kernel.dim(1)) {
      throw ShapeMismatch("group conv: expected [B," + std::to_string(kernel.dim(1)) +
                          ",R,H,W], got " + to_string(y.shape()));
    }
    const std::size_t O = kernel.dim(0), C = kernel.dim(1), R = kernel.dim(2), K = kernel.dim(3);
    if (y.dim(2) != R) {
      throw GroupOrderMismatch("group conv: input group axis " + std::to_string(y.dim(2)) +
                               " != group order " + std::to_string(R));
    }
    detail::require_square(y, "group conv");
    // (C,R) input slices fuse into C*R planar channels; kernel slices follow.
    const Tensor planar_kernel = reshape(transform_group_kernel(kernel, group), {O * R, C * R, K, K});
    const Tensor planar_in = reshape(y, {y.dim(0), C * R, y.dim(3), y.dim(4)});
    const Tensor z = conv2d(planar_in, planar_kernel, stride, padding);
    return add_channel_bias(reshape(z, {y.dim(0), O, R, z.dim(2), z.dim(3)}), bias);
  }

  std::vector<NamedTensor> parameters() const { return {{"kernel", kernel}, {"bias", bias}}; }

  Tensor kernel;  // [O,C,R,K,K]
  Tensor bias;    // [O]
  std::size_t stride = 1;
  std::size_t padding;
  GroupSpec group;
};

// ---------------------------------------------------------------------------

namespace detail {

/// Fused batch norm with per-channel (axis 1) statistics pooled over every
/// other axis. Handles [B,C,H,W] and [B,C,R,H,W] alike.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Tensor& running_mean, Tensor& running_var, double eps, double momentum,
                         bool training) {
  if (x.rank() < 3 || x.dim(1) != gamma.numel()) {
    throw ShapeMismatch("batch norm: expected [B," + std::to_string(gamma.numel()) +
                        ",...], got " + to_string(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), inner = x.numel() / (B * C);
  const double m = static_cast<double>(B * inner);
  auto in = x.data();
  auto g = gamma.data(), bt = beta.data();

  std::vector<double> mean(C, 0.0), inv_std(C, 0.0);
  if (training) {
    std::vector<double> var(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += in[(b * C + c) * inner + i];
      mean[c] = s / m;
      double q = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = in[(b * C + c) * inner + i] - mean[c];
          q += d * d;
        }
      var[c] = q / m;
      inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    }
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    const double unbias = m > 1.0 ? m / (m - 1.0) : 1.0;
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mean[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * var[c] * unbias;
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + eps);
    }
  }

  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * C + c) * inner + i;
        xhat[idx] = (in[idx] - mean[c]) * inv_std[c];
        out[idx] = g[c] * xhat[idx] + bt[c];
      }

  return autograd::record(
      x.shape(), std::move(out), training ? "batch_norm_train" : "batch_norm_eval",
      {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std, B, C, inner, m,
       training](std::span<const double> dy) {
        auto g = gamma.data();
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * C + c) * inner + i;
              sum_dy[c] += dy[idx];
              sum_dy_xhat[c] += dy[idx] * xhat[idx];
            }
        if (x.requires_grad()) {
          std::vector<double> dx(x.numel());
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double k = g[c] * inv_std[c];
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (b * C + c) * inner + i;
                dx[idx] = training
                              ? k / m * (m * dy[idx] - sum_dy[c] - xhat[idx] * sum_dy_xhat[c])
                              : k * dy[idx];
              }
            }
          autograd::accumulate(x, dx);
        }
        autograd::accumulate(gamma, sum_dy_xhat);
        autograd::accumulate(beta, sum_dy);
      });
}

}  // namespace detail

/// Batch normalization whose statistics are shared by all group slices of a
/// channel, which keeps it equivariant. Also serves as the plain 2-D BN.
class GroupBatchNorm {
 public:
  explicit GroupBatchNorm(std::size_t channels, double epsilon = 1e-5, double momentum = 0.1)
      : gamma(Tensor::ones({channels}).set_requires_grad(true)),
        beta(detail::zero_param({channels})),
        running_mean(Tensor::zeros({channels})),
        running_var(Tensor::ones({channels})),
        epsilon(epsilon),
        momentum(momentum) {}

  Tensor forward(const Tensor& y, bool training) {
    return detail::batch_norm(y, gamma, beta, running_mean, running_var, epsilon, momentum,
                              training);
  }

  std::vector<NamedTensor> parameters() const { return {{"gamma", gamma}, {"beta", beta}}; }
  std::vector<NamedTensor> buffers() const {
    return {{"running_mean", running_mean}, {"running_var", running_var}};
  }

  Tensor gamma, beta, running_mean, running_var;
  double epsilon;
  double momentum;
};

// ---------------------------------------------------------------------------

struct Relu {
  Tensor forward(const Tensor& x) const { return relu(x); }
};

// ---------------------------------------------------------------------------

enum class PoolMethod { max, average, beveq };

inline std::string_view to_string(PoolMethod m) {
  switch (m) {
    case PoolMethod::max: return "max";
    case PoolMethod::average: return "average";
    case PoolMethod::beveq: return "beveq";
  }
  return "?";
}

inline PoolMethod parse_pool_method(std::string_view name) {
  if (name == "max") return PoolMethod::max;
  if (name == "average" || name == "avg" || name == "mean") return PoolMethod::average;
  if (name == "beveq") return PoolMethod::beveq;
  throw UnknownPoolMethod("unknown pool method '" + std::string(name) +
                          "' (expected max, average or beveq)");
}

struct PoolSpec {
  PoolMethod method = PoolMethod::beveq;
};

/// Eliminates the group axis: [B,C,R,H,W] -> [B,C,H,W]. A rank-4 input is
/// treated as having a single group slice.
///   max     per-position maximum over R
///   average per-position mean over R
///   beveq   group slices stacked as C*R channels, learnable 1x1 conv to C
class GroupPool {
 public:
  GroupPool(PoolSpec spec, std::size_t channels, GroupSpec group, Rng& rng) : spec(spec) {
    if (spec.method == PoolMethod::beveq) {
      const std::size_t R = static_cast<std::size_t>(group.order());
      kernel = detail::init_kernel({channels, channels * R, 1, 1}, channels * R, rng);
      bias = detail::zero_param({channels});
    }
  }

  Tensor forward(const Tensor& y) const {
    const Tensor lifted =
        y.rank() == 4 ? reshape(y, {y.dim(0), y.dim(1), 1, y.dim(2), y.dim(3)}) : y;
    if (lifted.rank() != 5) throw ShapeMismatch("pool: expected [B,C,R,H,W], got " + to_string(y.shape()));
    switch (spec.method) {
      case PoolMethod::max: return max(lifted, 2);
      case PoolMethod::average: return mean(lifted, 2);
      case PoolMethod::beveq: {
        const std::size_t B = lifted.dim(0), C = lifted.dim(1), R = lifted.dim(2);
        if (kernel.dim(1) != C * R) {
          throw GroupOrderMismatch("beveq pool: expected " + std::to_string(kernel.dim(1)) +
                                   " stacked channels, got " + std::to_string(C * R));
        }
        const Tensor stacked = reshape(lifted, {B, C * R, lifted.dim(3), lifted.dim(4)});
        return add_channel_bias(conv2d(stacked, kernel, 1, 0), bias);
      }
    }
    throw UnknownPoolMethod("unreachable pool method");
  }

  std::vector<NamedTensor> parameters() const {
    if (spec.method != PoolMethod::beveq) return {};
    return {{"kernel", kernel}, {"bias", bias}};
  }

  PoolSpec spec;
  Tensor kernel;  // [C, C*R, 1, 1], beveq only
  Tensor bias;    // [C], beveq only
};

// ---------------------------------------------------------------------------

/// Ordinary convolution with bias and shape-preserving padding.
class PlainConv {
 public:
  PlainConv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size, Rng& rng)
      : kernel(detail::init_kernel({out_channels, in_channels, kernel_size, kernel_size},
                                   in_channels * kernel_size * kernel_size, rng)),
        bias(detail::zero_param({out_channels})),
        padding((kernel_size - 1) / 2) {
    if (kernel_size % 2 == 0) throw InvalidHyperparameter("conv kernel size must be odd");
  }

  Tensor forward(const Tensor& x) const {
    return add_channel_bias(conv2d(x, kernel, stride, padding), bias);
  }

  std::vector<NamedTensor> parameters() const { return {{"kernel", kernel}, {"bias", bias}}; }

  Tensor kernel;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding;
};

// ---------------------------------------------------------------------------

/// Orientation readout from a planar map p[B,C,H,W] to (sin, cos) [B,2].
///
/// For every channel pair (a,b) it forms the translation-invariant vector
///   v_ab = mean_x p_a(x) * grad p_b(x)
/// (central differences, zero outside the grid, x along columns, y up) and
/// combines them as o = sum_ab w_ab v_ab + u_ab J v_ab with J the quarter
/// turn. A quarter turn of p rotates o by exactly a quarter turn, so the
/// predicted angle atan2(o_y, o_x) follows C4 rotations of the scene.
/// The difference operator is antisymmetric, so v_aa = 0 and v_ab = -v_ba:
/// a single channel carries no signal.
class OrientationHead {
 public:
  OrientationHead(std::size_t channels, Rng& rng)
      : w(detail::init_kernel({channels * channels, 1}, channels * channels, rng)),
        u(detail::init_kernel({channels * channels, 1}, channels * channels, rng)) {
    if (channels < 2) throw InvalidHyperparameter("orientation head needs at least 2 channels");
  }

  Tensor forward(const Tensor& p) const {
    if (p.rank() != 4 || p.dim(1) * p.dim(1) != w.dim(0)) {
      throw ShapeMismatch("orientation head: unexpected input " + to_string(p.shape()));
    }
    const std::size_t B = p.dim(0), C = p.dim(1), H = p.dim(2), W = p.dim(3);
    static const Tensor dx(Shape{1, 1, 3, 3}, {0, 0, 0, -0.5, 0, 0.5, 0, 0, 0});
    static const Tensor dy(Shape{1, 1, 3, 3}, {0, 0.5, 0, 0, 0, 0, 0, -0.5, 0});

    const Tensor single = reshape(p, {B * C, 1, H, W});
    const Tensor flat = reshape(p, {B, C, H * W});
    const double inv_area = 1.0 / static_cast<double>(H * W);
    auto moments = [&](const Tensor& d) {
      const Tensor grad = permute(reshape(conv2d(single, d, 1, 1), {B, C, H * W}), {0, 2, 1});
      return reshape(scale(bmm(flat, grad), inv_area), {B, C * C});
    };
    const Tensor mx = moments(dx), my = moments(dy);
    const Tensor ox = sub(matmul(mx, w), matmul(my, u));
    const Tensor oy = add(matmul(my, w), matmul(mx, u));
    return concat({oy, ox}, 1);
  }

  std::vector<NamedTensor> parameters() const { return {{"w", w}, {"u", u}}; }

  Tensor w;  // [C*C, 1]
  Tensor u;  // [C*C, 1]
};

}  // namespace geqbev
