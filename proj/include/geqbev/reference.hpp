#pragma once

// Brute-force reference implementations. They work on raw values with
// explicit index arithmetic and share no code path with ops.hpp or
// group.hpp; the verification suite and the tests compare against them.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "geqbev/ops.hpp"
#include "geqbev/random.hpp"
#include "geqbev/tensor.hpp"

namespace geqbev::reference {

/// Nested-loop cross-correlation with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(0), Kh = k.dim(2), Kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - Kh) / stride + 1, Wo = (W + 2 * pad - Kw) / stride + 1;
  std::vector<double> out(B * O * Ho * Wo, 0.0);
  const auto xd = x.data(), kd = k.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < Kh; ++u)
              for (std::size_t v = 0; v < Kw; ++v) {
                const long ii = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long jj = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
                acc += xd[((b * C + c) * H + ii) * W + jj] * kd[((o * C + c) * Kh + u) * Kw + v];
              }
          out[((b * O + o) * Ho + i) * Wo + j] = acc;
        }
  return Tensor({B, O, Ho, Wo}, std::move(out));
}

/// Source cell of output cell (i, j) under a rotation by k quarter turns
/// counter-clockwise about the center of an S x S grid: out(p) = in(g^-1 p).
/// Works in centered physical coordinates (x right, y up).
inline std::pair<std::size_t, std::size_t> rotation_source(std::size_t i, std::size_t j,
                                                           std::size_t S, int k) {
  const double c = (static_cast<double>(S) - 1.0) / 2.0;
  double x = static_cast<double>(j) - c, y = c - static_cast<double>(i);
  for (int t = 0; t < ((k % 4) + 4) % 4; ++t) {
    // g^-1 is a clockwise quarter turn: (x, y) -> (y, -x)
    const double nx = y, ny = -x;
    x = nx;
    y = ny;
  }
  return {static_cast<std::size_t>(std::lround(c - y)), static_cast<std::size_t>(std::lround(x + c))};
}

/// Rotates every trailing S x S plane.
inline Tensor rotate_planes(const Tensor& t, int k) {
  const std::size_t S = t.dim(t.rank() - 1);
  const std::size_t planes = t.numel() / (S * S);
  std::vector<double> out(t.numel());
  const auto d = t.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < S; ++j) {
        const auto [si, sj] = rotation_source(i, j, S, k);
        out[p * S * S + i * S + j] = d[p * S * S + si * S + sj];
      }
  return Tensor(t.shape(), std::move(out));
}

/// Transformation law on [B,C,R,S,S]: slice r of the result is slice
/// (r - k) mod R of the input, rotated.
inline Tensor act_on_lifted(const Tensor& y, int k) {
  const std::size_t B = y.dim(0), C = y.dim(1), R = y.dim(2), S = y.dim(3);
  const Tensor rotated = rotate_planes(y, k);
  std::vector<double> out(y.numel());
  const auto d = rotated.data();
  const std::size_t plane = S * S;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t r = 0; r < R; ++r) {
        const std::size_t src = (r + R * 4 - static_cast<std::size_t>(((k % 4) + 4) % 4)) % R;
        std::copy_n(d.begin() + ((b * C + c) * R + src) * plane, plane,
                    out.begin() + ((b * C + c) * R + r) * plane);
      }
  return Tensor(y.shape(), std::move(out));
}

/// Extracts plane [a, b] of a rank-4 tensor [A,B,K,K] as its own [K,K].
inline Tensor plane_of(const Tensor& t, std::size_t a, std::size_t b) {
  const std::size_t K = t.dim(2);
  std::vector<double> v(t.data().begin() + static_cast<long>((a * t.dim(1) + b) * K * K),
                        t.data().begin() + static_cast<long>((a * t.dim(1) + b + 1) * K * K));
  return Tensor({K, K}, std::move(v));
}

/// Lifting correlation: out[b,o,r,i,j] = bias[o] + sum_{c,u,v}
/// x[b,c,i+u-p,j+v-p] * (kernel[o,c] rotated by r)[u,v].
inline Tensor lift(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t R) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = kernel.dim(0), K = kernel.dim(2), p = (K - 1) / 2;
  std::vector<double> out(B * O * R * H * W, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const Tensor kr = rotate_planes(plane_of(kernel, o, c), static_cast<int>(r));
        const auto kd = kr.data();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
              double acc = 0.0;
              for (std::size_t u = 0; u < K; ++u)
                for (std::size_t v = 0; v < K; ++v) {
                  const long ii = static_cast<long>(i + u) - static_cast<long>(p);
                  const long jj = static_cast<long>(j + v) - static_cast<long>(p);
                  if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
                  acc += xd[((b * C + c) * H + ii) * W + jj] * kd[u * K + v];
                }
              out[(((b * O + o) * R + r) * H + i) * W + j] += acc;
            }
      }
  const auto bd = bias.data();
  for (std::size_t n = 0; n < out.size(); ++n) out[n] += bd[(n / (R * H * W)) % O];
  return Tensor({B, O, R, H, W}, std::move(out));
}

/// Group correlation: out[b,o,r] = bias[o] + sum_{c,s} y[b,c,s] (*)
/// rot_r(kernel[o,c,(s-r) mod R]).
inline Tensor group_conv(const Tensor& y, const Tensor& kernel, const Tensor& bias) {
  const std::size_t B = y.dim(0), C = y.dim(1), R = y.dim(2), H = y.dim(3), W = y.dim(4);
  const std::size_t O = kernel.dim(0), K = kernel.dim(3), p = (K - 1) / 2;
  std::vector<double> out(B * O * R * H * W, 0.0);
  const auto yd = y.data(), kd_all = kernel.data();
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < R; ++s) {
          const std::size_t src = (s + R - r) % R;
          std::vector<double> plane(kd_all.begin() + static_cast<long>((((o * C + c) * R) + src) * K * K),
                                    kd_all.begin() + static_cast<long>((((o * C + c) * R) + src + 1) * K * K));
          const Tensor kr = rotate_planes(Tensor({K, K}, std::move(plane)), static_cast<int>(r));
          const auto kd = kr.data();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < H; ++i)
              for (std::size_t j = 0; j < W; ++j) {
                double acc = 0.0;
                for (std::size_t u = 0; u < K; ++u)
                  for (std::size_t v = 0; v < K; ++v) {
                    const long ii = static_cast<long>(i + u) - static_cast<long>(p);
                    const long jj = static_cast<long>(j + v) - static_cast<long>(p);
                    if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
                    acc += yd[(((b * C + c) * R + s) * H + ii) * W + jj] * kd[u * K + v];
                  }
                out[(((b * O + o) * R + r) * H + i) * W + j] += acc;
              }
        }
  const auto bd = bias.data();
  for (std::size_t n = 0; n < out.size(); ++n) out[n] += bd[(n / (R * H * W)) % O];
  return Tensor({B, O, R, H, W}, std::move(out));
}

/// Max or mean over axis 2 of [B,C,R,H,W].
inline Tensor pool_group(const Tensor& y, bool use_max) {
  const std::size_t B = y.dim(0), C = y.dim(1), R = y.dim(2), HW = y.dim(3) * y.dim(4);
  std::vector<double> out(B * C * HW);
  const auto d = y.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t x = 0; x < HW; ++x) {
      double acc = use_max ? d[bc * R * HW + x] : 0.0;
      for (std::size_t r = 0; r < R; ++r) {
        const double v = d[(bc * R + r) * HW + x];
        acc = use_max ? std::max(acc, v) : acc + v;
      }
      out[bc * HW + x] = use_max ? acc : acc / static_cast<double>(R);
    }
  return Tensor({B, C, y.dim(3), y.dim(4)}, std::move(out));
}

/// Two-pass batch statistics per channel (axis 1), biased variance.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t B = x.dim(0), C = x.dim(1), inner = x.numel() / (B * C);
  std::vector<double> out(x.numel());
  const auto d = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> vals;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < inner; ++i) vals.push_back(d[(b * C + c) * inner + i]);
    double mu = 0.0;
    for (double v : vals) mu += v;
    mu /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mu) * (v - mu);
    var /= static_cast<double>(vals.size());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * C + c) * inner + i;
        out[idx] = gamma.data()[c] * (d[idx] - mu) / std::sqrt(var + eps) + beta.data()[c];
      }
  }
  return Tensor(x.shape(), std::move(out));
}

/// max|a - b| / max(max|a|, max|b|); 0 when both are identically zero.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  return scale == 0.0 ? 0.0 : diff / scale;
}

inline double relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  return relative_error(a.data(), b.data());
}

/// Compares reverse-mode gradients of L = sum(w * f()) against central
/// differences, for every tensor in wrt. Returns the worst norm-wise
/// relative error ||analytic - numeric|| / max(||analytic||, ||numeric||).
inline double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt, Rng& rng,
                             double h = 1e-5) {
  for (Tensor& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor out = f();
  const Tensor w = Tensor::uniform(out.shape(), -1.0, 1.0, rng);
  backward(sum(mul(out, w)));

  const auto objective = [&] {
    autograd::NoGradGuard guard;
    const Tensor o = f();
    double acc = 0.0;
    for (std::size_t i = 0; i < o.numel(); ++i) acc += o.data()[i] * w.data()[i];
    return acc;
  };

  double worst = 0.0;
  for (Tensor& t : wrt) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double saved = d[i];
      d[i] = saved + h;
      const double lp = objective();
      d[i] = saved - h;
      const double lm = objective();
      d[i] = saved;
      numeric[i] = (lp - lm) / (2 * h);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double scale = std::sqrt(std::max(na, nn));
    if (scale > 1e-12) worst = std::max(worst, std::sqrt(diff) / scale);
    else worst = std::max(worst, std::sqrt(diff));
  }
  return worst;
}

}  // namespace geqbev::reference
