#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "geqbev/errors.hpp"
#include "geqbev/tensor.hpp"

namespace geqbev {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                        to_string(b.shape()) + " differ");
  }
}

inline std::size_t check_axis(const Tensor& t, std::size_t axis, const char* op) {
  if (axis >= t.rank()) {
    throw ShapeMismatch(std::string(op) + ": axis " + std::to_string(axis) +
                        " out of range for shape " + to_string(t.shape()));
  }
  return axis;
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// element-wise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return autograd::record(a.shape(), std::move(out), "add", {a, b},
                          [a, b](std::span<const double> g) {
                            autograd::accumulate(a, g);
                            autograd::accumulate(b, g);
                          });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return autograd::record(a.shape(), std::move(out), "sub", {a, b},
                          [a, b](std::span<const double> g) {
                            autograd::accumulate(a, g);
                            std::vector<double> neg(g.begin(), g.end());
                            for (double& v : neg) v = -v;
                            autograd::accumulate(b, neg);
                          });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return autograd::record(a.shape(), std::move(out), "mul", {a, b},
                          [a, b](std::span<const double> g) {
                            auto x = a.data(), y = b.data();
                            std::vector<double> ga(g.size()), gb(g.size());
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              ga[i] = g[i] * y[i];
                              gb[i] = g[i] * x[i];
                            }
                            autograd::accumulate(a, ga);
                            autograd::accumulate(b, gb);
                          });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return autograd::record(a.shape(), std::move(out), "scale", {a},
                          [a, s](std::span<const double> g) {
                            std::vector<double> ga(g.begin(), g.end());
                            for (double& v : ga) v *= s;
                            autograd::accumulate(a, ga);
                          });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return autograd::record(a.shape(), std::move(out), "relu", {a},
                          [a](std::span<const double> g) {
                            auto x = a.data();
                            std::vector<double> ga(g.size());
                            for (std::size_t i = 0; i < g.size(); ++i)
                              ga[i] = x[i] > 0.0 ? g[i] : 0.0;
                            autograd::accumulate(a, ga);
                          });
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeMismatch("reshape: cannot view " + to_string(a.shape()) + " as " +
                        to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return autograd::record(std::move(shape), std::move(out), "reshape", {a},
                          [a](std::span<const double> g) { autograd::accumulate(a, g); });
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const std::size_t n = a.rank();
  if (axes.size() != n) throw ShapeMismatch("permute: axis count mismatch");
  std::vector<bool> used(n, false);
  for (std::size_t ax : axes) {
    if (ax >= n || used[ax]) throw ShapeMismatch("permute: axes are not a permutation");
    used[ax] = true;
  }
  const Shape& in = a.shape();
  Shape out_shape(n);
  for (std::size_t i = 0; i < n; ++i) out_shape[i] = in[axes[i]];
  std::vector<std::size_t> in_strides(n, 1);
  for (std::size_t i = n - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in[i + 1];

  // map[out_flat] = in_flat
  std::vector<std::size_t> map(a.numel());
  std::vector<std::size_t> idx(n, 0);
  for (std::size_t o = 0; o < map.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < n; ++i) src += idx[i] * in_strides[axes[i]];
    map[o] = src;
    for (std::size_t i = n; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[map[o]];
  return autograd::record(std::move(out_shape), std::move(out), "permute", {a},
                          [a, map = std::move(map)](std::span<const double> g) {
                            std::vector<double> ga(g.size());
                            for (std::size_t o = 0; o < g.size(); ++o) ga[map[o]] = g[o];
                            autograd::accumulate(a, ga);
                          });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeMismatch("concat: no inputs");
  const Tensor& first = parts.front();
  detail::check_axis(first, axis, "concat");
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank()) throw ShapeMismatch("concat: rank mismatch");
    for (std::size_t i = 0; i < p.rank(); ++i) {
      if (i != axis && p.dim(i) != first.dim(i)) {
        throw ShapeMismatch("concat: shapes " + to_string(first.shape()) + " and " +
                            to_string(p.shape()) + " differ off the concat axis");
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  const auto split = detail::split_at(out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.dim(axis) * split.inner;
    auto x = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(x.begin() + o * chunk, chunk,
                  out.begin() + o * split.extent * split.inner + offset);
    }
    offset += chunk;
  }
  return autograd::record(out_shape, std::move(out), "concat", parts,
                          [parts, split](std::span<const double> g) {
                            std::size_t offset = 0;
                            for (const Tensor& p : parts) {
                              const std::size_t chunk = p.numel() / split.outer;
                              if (p.requires_grad()) {
                                std::vector<double> gp(p.numel());
                                for (std::size_t o = 0; o < split.outer; ++o) {
                                  std::copy_n(g.begin() + o * split.extent * split.inner + offset,
                                              chunk, gp.begin() + o * chunk);
                                }
                                autograd::accumulate(p, gp);
                              }
                              offset += chunk;
                            }
                          });
}

/// Repeats singleton axes of `a` to reach `target`. Non-singleton axes must
/// already match; this is the only broadcasting the library offers.
inline Tensor expand(const Tensor& a, const Shape& target) {
  if (a.rank() != target.size()) throw ShapeMismatch("expand: rank mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (a.dim(i) != target[i] && a.dim(i) != 1) {
      throw ShapeMismatch("expand: cannot expand " + to_string(a.shape()) + " to " +
                          to_string(target));
    }
  }
  const std::size_t n = target.size();
  std::vector<std::size_t> src_strides(n, 0);
  std::size_t stride = 1;
  for (std::size_t i = n; i-- > 0;) {
    src_strides[i] = a.dim(i) == 1 ? 0 : stride;
    stride *= a.dim(i);
  }
  std::vector<std::size_t> map(numel_of(target));
  std::vector<std::size_t> idx(n, 0);
  for (std::size_t o = 0; o < map.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < n; ++i) src += idx[i] * src_strides[i];
    map[o] = src;
    for (std::size_t i = n; i-- > 0;) {
      if (++idx[i] < target[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(map.size());
  auto x = a.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[map[o]];
  return autograd::record(target, std::move(out), "expand", {a},
                          [a, map = std::move(map)](std::span<const double> g) {
                            std::vector<double> ga(a.numel(), 0.0);
                            for (std::size_t o = 0; o < g.size(); ++o) ga[map[o]] += g[o];
                            autograd::accumulate(a, ga);
                          });
}

/// Rotates the trailing two axes by k quarter turns counter-clockwise
/// (numpy.rot90 convention): out[i][j] = in[j][W-1-i] for k = 1.
inline Tensor rot90(const Tensor& a, int k) {
  if (a.rank() < 2) throw ShapeMismatch("rot90: needs rank >= 2");
  k = ((k % 4) + 4) % 4;
  const std::size_t H = a.dim(a.rank() - 2), W = a.dim(a.rank() - 1);
  const std::size_t planes = a.numel() / (H * W);
  Shape out_shape = a.shape();
  if (k % 2 == 1) std::swap(out_shape[a.rank() - 2], out_shape[a.rank() - 1]);
  const std::size_t Ho = out_shape[a.rank() - 2], Wo = out_shape[a.rank() - 1];

  std::vector<std::size_t> map(Ho * Wo);  // plane-local out -> in
  for (std::size_t i = 0; i < Ho; ++i) {
    for (std::size_t j = 0; j < Wo; ++j) {
      std::size_t si = 0, sj = 0;
      switch (k) {
        case 0: si = i; sj = j; break;
        case 1: si = j; sj = W - 1 - i; break;
        case 2: si = H - 1 - i; sj = W - 1 - j; break;
        default: si = H - 1 - j; sj = i; break;
      }
      map[i * Wo + j] = si * W + sj;
    }
  }
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * H * W;
    for (std::size_t o = 0; o < map.size(); ++o) out[base + o] = x[base + map[o]];
  }
  return autograd::record(std::move(out_shape), std::move(out), "rot90", {a},
                          [a, map = std::move(map), planes](std::span<const double> g) {
                            const std::size_t plane = map.size();
                            std::vector<double> ga(g.size());
                            for (std::size_t p = 0; p < planes; ++p) {
                              const std::size_t base = p * plane;
                              for (std::size_t o = 0; o < plane; ++o)
                                ga[base + map[o]] = g[base + o];
                            }
                            autograd::accumulate(a, ga);
                          });
}

/// Cyclic shift along `axis`: out[r] = in[(r - shift) mod n].
inline Tensor roll(const Tensor& a, std::size_t axis, int shift) {
  detail::check_axis(a, axis, "roll");
  const auto sp = detail::split_at(a.shape(), axis);
  const long n = static_cast<long>(sp.extent);
  const std::size_t s = static_cast<std::size_t>(((shift % n) + n) % n);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t r = 0; r < sp.extent; ++r) {
      const std::size_t src = (r + sp.extent - s) % sp.extent;
      std::copy_n(x.begin() + (o * sp.extent + src) * sp.inner, sp.inner,
                  out.begin() + (o * sp.extent + r) * sp.inner);
    }
  }
  return autograd::record(a.shape(), std::move(out), "roll", {a},
                          [a, sp, s](std::span<const double> g) {
                            std::vector<double> ga(g.size());
                            for (std::size_t o = 0; o < sp.outer; ++o) {
                              for (std::size_t r = 0; r < sp.extent; ++r) {
                                const std::size_t src = (r + sp.extent - s) % sp.extent;
                                std::copy_n(g.begin() + (o * sp.extent + r) * sp.inner, sp.inner,
                                            ga.begin() + (o * sp.extent + src) * sp.inner);
                              }
                            }
                            autograd::accumulate(a, ga);
                          });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return autograd::record(Shape{1}, {s}, "sum", {a}, [a](std::span<const double> g) {
    std::vector<double> ga(a.numel(), g[0]);
    autograd::accumulate(a, ga);
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor sum(const Tensor& a, std::size_t axis) {
  detail::check_axis(a, axis, "sum");
  const auto sp = detail::split_at(a.shape(), axis);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t r = 0; r < sp.extent; ++r)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += x[(o * sp.extent + r) * sp.inner + i];
  return autograd::record(detail::drop_axis(a.shape(), axis), std::move(out), "sum_axis", {a},
                          [a, sp](std::span<const double> g) {
                            std::vector<double> ga(a.numel());
                            for (std::size_t o = 0; o < sp.outer; ++o)
                              for (std::size_t r = 0; r < sp.extent; ++r)
                                for (std::size_t i = 0; i < sp.inner; ++i)
                                  ga[(o * sp.extent + r) * sp.inner + i] = g[o * sp.inner + i];
                            autograd::accumulate(a, ga);
                          });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
  detail::check_axis(a, axis, "mean");
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

/// Maximum along `axis`; the gradient goes to the first maximal element.
inline Tensor max(const Tensor& a, std::size_t axis) {
  detail::check_axis(a, axis, "max");
  const auto sp = detail::split_at(a.shape(), axis);
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(out.size());
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.extent * sp.inner + i;
      for (std::size_t r = 1; r < sp.extent; ++r) {
        const std::size_t idx = (o * sp.extent + r) * sp.inner + i;
        if (x[idx] > x[best]) best = idx;
      }
      out[o * sp.inner + i] = x[best];
      arg[o * sp.inner + i] = best;
    }
  }
  return autograd::record(detail::drop_axis(a.shape(), axis), std::move(out), "max_axis", {a},
                          [a, arg = std::move(arg)](std::span<const double> g) {
                            std::vector<double> ga(a.numel(), 0.0);
                            for (std::size_t o = 0; o < g.size(); ++o) ga[arg[o]] += g[o];
                            autograd::accumulate(a, ga);
                          });
}

inline Tensor softmax(const Tensor& a, std::size_t axis) {
  detail::check_axis(a, axis, "softmax");
  const auto sp = detail::split_at(a.shape(), axis);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t r) { return (o * sp.extent + r) * sp.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < sp.extent; ++r) m = std::max(m, x[at(r)]);
      double z = 0.0;
      for (std::size_t r = 0; r < sp.extent; ++r) z += (out[at(r)] = std::exp(x[at(r)] - m));
      for (std::size_t r = 0; r < sp.extent; ++r) out[at(r)] /= z;
    }
  }
  std::vector<double> y = out;
  return autograd::record(a.shape(), std::move(out), "softmax", {a},
                          [a, sp, y = std::move(y)](std::span<const double> g) {
                            std::vector<double> ga(g.size());
                            for (std::size_t o = 0; o < sp.outer; ++o) {
                              for (std::size_t i = 0; i < sp.inner; ++i) {
                                auto at = [&](std::size_t r) {
                                  return (o * sp.extent + r) * sp.inner + i;
                                };
                                double dot = 0.0;
                                for (std::size_t r = 0; r < sp.extent; ++r) dot += g[at(r)] * y[at(r)];
                                for (std::size_t r = 0; r < sp.extent; ++r)
                                  ga[at(r)] = y[at(r)] * (g[at(r)] - dot);
                              }
                            }
                            autograd::accumulate(a, ga);
                          });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

/// Batched product: a[B,M,K] x b[B,K,N] -> [B,M,N].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeMismatch("bmm: incompatible shapes " + to_string(a.shape()) + " and " +
                        to_string(b.shape()));
  }
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  std::vector<double> out(B * M * N);
  for (std::size_t i = 0; i < B; ++i) {
    detail::ConstMatMap A(a.data().data() + i * M * K, M, K);
    detail::ConstMatMap Bm(b.data().data() + i * K * N, K, N);
    detail::MatMap C(out.data() + i * M * N, M, N);
    C.noalias() = A * Bm;
  }
  return autograd::record(Shape{B, M, N}, std::move(out), "bmm", {a, b},
                          [a, b, B, M, K, N](std::span<const double> g) {
                            std::vector<double> ga(a.requires_grad() ? a.numel() : 0);
                            std::vector<double> gb(b.requires_grad() ? b.numel() : 0);
                            for (std::size_t i = 0; i < B; ++i) {
                              detail::ConstMatMap G(g.data() + i * M * N, M, N);
                              if (!ga.empty()) {
                                detail::ConstMatMap Bm(b.data().data() + i * K * N, K, N);
                                detail::MatMap GA(ga.data() + i * M * K, M, K);
                                GA.noalias() = G * Bm.transpose();
                              }
                              if (!gb.empty()) {
                                detail::ConstMatMap A(a.data().data() + i * M * K, M, K);
                                detail::MatMap GB(gb.data() + i * K * N, K, N);
                                GB.noalias() = A.transpose() * G;
                              }
                            }
                            if (!ga.empty()) autograd::accumulate(a, ga);
                            if (!gb.empty()) autograd::accumulate(b, gb);
                          });
}

/// a[M,K] x b[K,N] -> [M,N].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeMismatch("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                        to_string(b.shape()));
  }
  const Tensor out = bmm(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)}));
  return reshape(out, {a.dim(0), b.dim(1)});
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

struct Conv2dGeometry {
  std::size_t B, C, H, W, O, Kh, Kw, stride, padding, Ho, Wo;
};

namespace detail {

/// Output columns [lo, hi) whose tap kj lands inside the input row.
inline std::pair<std::size_t, std::size_t> valid_columns(const Conv2dGeometry& g, std::size_t kj) {
  const std::size_t lo = kj >= g.padding ? 0 : (g.padding - kj + g.stride - 1) / g.stride;
  const std::size_t end = g.W + g.padding;
  const std::size_t hi = end <= kj ? 0 : std::min(g.Wo, (end - kj + g.stride - 1) / g.stride);
  return {std::min(lo, hi), hi};
}

inline void im2col(const double* x, const Conv2dGeometry& g, double* cols) {
  const long H = static_cast<long>(g.H);
  const std::size_t plane = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c) {
    for (std::size_t ki = 0; ki < g.Kh; ++ki) {
      for (std::size_t kj = 0; kj < g.Kw; ++kj) {
        double* dst = cols + ((c * g.Kh + ki) * g.Kw + kj) * plane;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oi = 0; oi < g.Ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          double* row = dst + oi * g.Wo;
          if (ii < 0 || ii >= H) {
            std::fill_n(row, g.Wo, 0.0);
            continue;
          }
          const double* src = x + (c * g.H + static_cast<std::size_t>(ii)) * g.W;
          std::fill(row, row + lo, 0.0);
          if (g.stride == 1 && lo < hi) {
            std::copy(src + (lo + kj - g.padding), src + (hi + kj - g.padding), row + lo);
          } else {
            for (std::size_t oj = lo; oj < hi; ++oj) row[oj] = src[oj * g.stride + kj - g.padding];
          }
          std::fill(row + hi, row + g.Wo, 0.0);
        }
      }
    }
  }
}

inline void col2im(const double* cols, const Conv2dGeometry& g, double* x) {
  const long H = static_cast<long>(g.H);
  const std::size_t plane = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c) {
    for (std::size_t ki = 0; ki < g.Kh; ++ki) {
      for (std::size_t kj = 0; kj < g.Kw; ++kj) {
        const double* src = cols + ((c * g.Kh + ki) * g.Kw + kj) * plane;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oi = 0; oi < g.Ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          if (ii < 0 || ii >= H) continue;
          double* dst = x + (c * g.H + static_cast<std::size_t>(ii)) * g.W;
          const double* row = src + oi * g.Wo;
          for (std::size_t oj = lo; oj < hi; ++oj) dst[oj * g.stride + kj - g.padding] += row[oj];
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip):
///   out[b,o,i,j] = sum_{c,u,v} in[b,c,i*s+u-p,j*s+v-p] * kernel[o,c,u,v]
/// with zeros outside the input.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
                     std::size_t padding = 0) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeMismatch("conv2d: expected rank-4 input and kernel, got " +
                        to_string(input.shape()) + " and " + to_string(kernel.shape()));
  }
  if (input.dim(1) != kernel.dim(1)) {
    throw ShapeMismatch("conv2d: input has " + std::to_string(input.dim(1)) +
                        " channels, kernel expects " + std::to_string(kernel.dim(1)));
  }
  if (stride < 1) throw InvalidHyperparameter("conv2d: stride must be >= 1");
  if (kernel.dim(2) % 2 == 0 || kernel.dim(3) % 2 == 0) {
    throw InvalidHyperparameter("conv2d: kernel extents must be odd, got " +
                                to_string(kernel.shape()));
  }
  Conv2dGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                   kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
  if (g.H + 2 * padding < g.Kh || g.W + 2 * padding < g.Kw) {
    throw InvalidHyperparameter("conv2d: kernel larger than padded input");
  }
  g.Ho = (g.H + 2 * padding - g.Kh) / stride + 1;
  g.Wo = (g.W + 2 * padding - g.Kw) / stride + 1;

  const std::size_t patch = g.C * g.Kh * g.Kw, plane = g.Ho * g.Wo;
  // the column matrices are kept for the kernel gradient when it is needed
  const bool keep_cols = autograd::grad_enabled() && kernel.requires_grad();
  auto cols = std::make_shared<std::vector<double>>(patch * plane * (keep_cols ? g.B : 1));
  std::vector<double> out(g.B * g.O * plane);
  detail::ConstMatMap Wm(kernel.data().data(), g.O, patch);
  for (std::size_t b = 0; b < g.B; ++b) {
    double* cb = cols->data() + (keep_cols ? b * patch * plane : 0);
    detail::im2col(input.data().data() + b * g.C * g.H * g.W, g, cb);
    detail::ConstMatMap Cm(cb, patch, plane);
    detail::MatMap Y(out.data() + b * g.O * plane, g.O, plane);
    Y.noalias() = Wm * Cm;
  }
  if (!keep_cols) cols.reset();
  return autograd::record(
      Shape{g.B, g.O, g.Ho, g.Wo}, std::move(out), "conv2d", {input, kernel},
      [input, kernel, g, cols](std::span<const double> grad) {
        const std::size_t patch = g.C * g.Kh * g.Kw, plane = g.Ho * g.Wo;
        std::vector<double> gk(kernel.requires_grad() ? kernel.numel() : 0, 0.0);
        std::vector<double> gx(input.requires_grad() ? input.numel() : 0, 0.0);
        std::vector<double> gcols(gx.empty() ? 0 : patch * plane);
        detail::ConstMatMap Wm(kernel.data().data(), g.O, patch);
        for (std::size_t b = 0; b < g.B; ++b) {
          detail::ConstMatMap G(grad.data() + b * g.O * plane, g.O, plane);
          if (!gk.empty() && cols) {
            detail::ConstMatMap Cm(cols->data() + b * patch * plane, patch, plane);
            detail::MatMap GK(gk.data(), g.O, patch);
            GK.noalias() += G * Cm.transpose();
          }
          if (!gx.empty()) {
            detail::MatMap GC(gcols.data(), patch, plane);
            GC.noalias() = Wm.transpose() * G;
            detail::col2im(gcols.data(), g, gx.data() + b * g.C * g.H * g.W);
          }
        }
        if (!gk.empty()) autograd::accumulate(kernel, std::move(gk));
        if (!gx.empty()) autograd::accumulate(input, std::move(gx));
      });
}

/// y + bias broadcast along every axis except 1; bias has y.dim(1) values.
inline Tensor add_channel_bias(const Tensor& y, const Tensor& bias) {
  if (y.rank() < 2 || bias.numel() != y.dim(1)) {
    throw ShapeMismatch("add_channel_bias: bias of " + std::to_string(bias.numel()) +
                        " values for input " + to_string(y.shape()));
  }
  const std::size_t B = y.dim(0), C = y.dim(1), inner = y.numel() / (B * C);
  std::vector<double> out(y.data().begin(), y.data().end());
  const auto bd = bias.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double* row = out.data() + (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += bd[c];
    }
  return autograd::record(y.shape(), std::move(out), "add_channel_bias", {y, bias},
                          [y, bias, B, C, inner](std::span<const double> g) {
                            if (bias.requires_grad()) {
                              std::vector<double> gb(C, 0.0);
                              for (std::size_t b = 0; b < B; ++b)
                                for (std::size_t c = 0; c < C; ++c)
                                  for (std::size_t i = 0; i < inner; ++i) gb[c] += g[(b * C + c) * inner + i];
                              autograd::accumulate(bias, std::move(gb));
                            }
                            autograd::accumulate(y, g);
                          });
}

}  // namespace geqbev
