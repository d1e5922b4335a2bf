#pragma once

// Finite rotation groups acting on square grids. Index k denotes a rotation
// by k * 90 degrees counter-clockwise about the grid center (array rot90
// convention: out[i][j] = in[j][S-1-i] for k = 1).

#include <string>
#include <string_view>
#include <vector>

#include "geqbev/errors.hpp"
#include "geqbev/ops.hpp"
#include "geqbev/tensor.hpp"

namespace geqbev {

class GroupSpec {
 public:
  enum class Kind { C1, C4 };

  constexpr GroupSpec() = default;
  constexpr explicit GroupSpec(Kind kind) : kind_(kind) {}

  static constexpr GroupSpec c1() { return GroupSpec(Kind::C1); }
  static constexpr GroupSpec c4() { return GroupSpec(Kind::C4); }

  static GroupSpec from_name(std::string_view name) {
    if (name == "c1" || name == "C1") return c1();
    if (name == "c4" || name == "C4") return c4();
    throw InvalidConfig("unknown group '" + std::string(name) + "' (expected c1 or c4)");
  }

  constexpr Kind kind() const { return kind_; }
  constexpr int order() const { return kind_ == Kind::C1 ? 1 : 4; }
  constexpr std::string_view name() const { return kind_ == Kind::C1 ? "c1" : "c4"; }

  friend constexpr bool operator==(GroupSpec, GroupSpec) = default;

 private:
  Kind kind_ = Kind::C4;
};

class GroupElement {
 public:
  GroupElement(GroupSpec group, int index) : group_(group), index_(index) {
    if (index < 0 || index >= group.order()) {
      throw InvalidHyperparameter("group element index " + std::to_string(index) +
                                  " outside [0," + std::to_string(group.order()) + ")");
    }
  }

  static GroupElement identity(GroupSpec group) { return {group, 0}; }

  static std::vector<GroupElement> all(GroupSpec group) {
    std::vector<GroupElement> out;
    for (int i = 0; i < group.order(); ++i) out.emplace_back(group, i);
    return out;
  }

  GroupSpec group() const { return group_; }
  int index() const { return index_; }

  GroupElement compose(const GroupElement& other) const {
    if (other.group_ != group_) throw GroupOrderMismatch("composing elements of different groups");
    return {group_, (index_ + other.index_) % group_.order()};
  }

  GroupElement inverse() const { return {group_, (group_.order() - index_) % group_.order()}; }

  friend GroupElement operator*(const GroupElement& a, const GroupElement& b) {
    return a.compose(b);
  }
  friend bool operator==(const GroupElement&, const GroupElement&) = default;

 private:
  GroupSpec group_;
  int index_;
};

namespace detail {

inline void require_square(const Tensor& x, const char* op) {
  if (x.rank() < 2 || x.dim(x.rank() - 1) != x.dim(x.rank() - 2)) {
    throw NonSquareGrid(std::string(op) + ": trailing axes must form a square grid, got " +
                        to_string(x.shape()));
  }
}

}  // namespace detail

/// [L_g f](x) = f(g^-1 x) on the trailing two (square) axes.
inline Tensor act_on_plane(const GroupElement& g, const Tensor& x) {
  detail::require_square(x, "act_on_plane");
  if (g.index() == 0) return x;
  return rot90(x, g.index());
}

/// Transformation law of lifted maps [B,C,R,H,W]: every spatial plane is
/// rotated and the R axis is cyclically shifted by g.
inline Tensor act_on_lifted(const GroupElement& g, const Tensor& y) {
  if (y.rank() != 5) throw ShapeMismatch("act_on_lifted: expected rank-5 tensor, got " + to_string(y.shape()));
  if (static_cast<int>(y.dim(2)) != g.group().order()) {
    throw GroupOrderMismatch("act_on_lifted: group axis has " + std::to_string(y.dim(2)) +
                             " slices, group order is " + std::to_string(g.group().order()));
  }
  detail::require_square(y, "act_on_lifted");
  if (g.index() == 0) return y;
  return roll(rot90(y, g.index()), 2, g.index());
}

/// [O,C,K,K] -> [O,R,C,K,K]; slice r is the kernel rotated by r quarter turns.
inline Tensor transform_lift_kernel(const Tensor& kernel, GroupSpec group) {
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3) || kernel.dim(2) % 2 == 0) {
    throw InvalidKernelShape("lift kernel must be [O,C,K,K] with K odd, got " +
                             to_string(kernel.shape()));
  }
  const std::size_t O = kernel.dim(0), C = kernel.dim(1), K = kernel.dim(2);
  std::vector<Tensor> slices;
  for (int r = 0; r < group.order(); ++r) {
    slices.push_back(reshape(r == 0 ? kernel : rot90(kernel, r), {O, 1, C, K, K}));
  }
  return slices.size() == 1 ? slices.front() : concat(slices, 1);
}

/// [O,C,R,K,K] -> [O,R,C,R,K,K]; slice r rotates every spatial plane by r
/// quarter turns and cyclically shifts the kernel's own group axis by r.
inline Tensor transform_group_kernel(const Tensor& kernel, GroupSpec group) {
  if (kernel.rank() != 5 || kernel.dim(3) != kernel.dim(4) || kernel.dim(3) % 2 == 0) {
    throw InvalidKernelShape("group kernel must be [O,C,R,K,K] with K odd, got " +
                             to_string(kernel.shape()));
  }
  if (static_cast<int>(kernel.dim(2)) != group.order()) {
    throw GroupOrderMismatch("group kernel has " + std::to_string(kernel.dim(2)) +
                             " group slices, group order is " + std::to_string(group.order()));
  }
  const std::size_t O = kernel.dim(0), C = kernel.dim(1), R = kernel.dim(2), K = kernel.dim(3);
  std::vector<Tensor> slices;
  for (int r = 0; r < group.order(); ++r) {
    const Tensor t = r == 0 ? kernel : roll(rot90(kernel, r), 2, r);
    slices.push_back(reshape(t, {O, 1, C, R, K, K}));
  }
  return slices.size() == 1 ? slices.front() : concat(slices, 1);
}

}  // namespace geqbev
