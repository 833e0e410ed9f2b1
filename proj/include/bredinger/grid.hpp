#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bredinger/errors.hpp"

namespace bredinger {

/// Periodic lattice on the unit torus of dimension 1 or 2 with m nodes per
/// axis. Node (i0, i1) sits at (i0 / m, i1 / m); flat indices are row major
/// with axis 0 outermost.
class TorusGrid {
 public:
  static constexpr int kMinNodes = 4;

  TorusGrid() = default;

  TorusGrid(int dim, int nodes_per_axis) : dim_(dim), m_(nodes_per_axis) {
    if (dim != 1 && dim != 2) throw ValidationError("grid: dim must be 1 or 2, got " + std::to_string(dim));
    if (nodes_per_axis < kMinNodes)
      throw ValidationError("grid: nodes per axis must be >= 4, got " + std::to_string(nodes_per_axis));
  }

  int dim() const { return dim_; }
  int nodes_per_axis() const { return m_; }
  std::size_t size() const { return dim_ == 1 ? std::size_t(m_) : std::size_t(m_) * std::size_t(m_); }
  double spacing() const { return 1.0 / m_; }
  /// h^dim, the volume of one cell.
  double cell_volume() const { return dim_ == 1 ? spacing() : spacing() * spacing(); }

  int wrap(long i) const {
    long r = i % m_;
    return static_cast<int>(r < 0 ? r + m_ : r);
  }

  std::size_t index(int i0) const { return static_cast<std::size_t>(wrap(i0)); }
  std::size_t index(int i0, int i1) const {
    return static_cast<std::size_t>(wrap(i0)) * std::size_t(m_) + static_cast<std::size_t>(wrap(i1));
  }
  std::size_t index(const std::array<int, 2>& c) const { return dim_ == 1 ? index(c[0]) : index(c[0], c[1]); }

  std::array<int, 2> coords(std::size_t node) const {
    if (dim_ == 1) return {static_cast<int>(node), 0};
    return {static_cast<int>(node / std::size_t(m_)), static_cast<int>(node % std::size_t(m_))};
  }

  /// Node reached from `node` by the lattice displacement with flat index `disp`.
  std::size_t translate(std::size_t node, std::size_t disp) const {
    auto a = coords(node);
    auto d = coords(disp);
    return dim_ == 1 ? index(a[0] + d[0]) : index(a[0] + d[0], a[1] + d[1]);
  }

  /// Flat index of the cyclic displacement to - from.
  std::size_t displacement(std::size_t from, std::size_t to) const {
    auto a = coords(from);
    auto b = coords(to);
    return dim_ == 1 ? index(b[0] - a[0]) : index(b[0] - a[0], b[1] - a[1]);
  }

  /// Flat index of the negated displacement.
  std::size_t negate(std::size_t disp) const {
    auto d = coords(disp);
    return dim_ == 1 ? index(-d[0]) : index(-d[0], -d[1]);
  }

  /// Minimal-image representative of an axis offset, in [-m/2, m/2).
  int minimal_image(int offset) const {
    int r = wrap(offset);
    return 2 * r >= m_ ? r - m_ : r;
  }

  bool operator==(const TorusGrid&) const = default;

 private:
  int dim_ = 1;
  int m_ = kMinNodes;
};

/// Uniform time lattice on [0, 1] with T steps and a sorted set of interior
/// constraint steps.
class TimeGrid {
 public:
  TimeGrid() = default;

  TimeGrid(int steps, std::vector<int> constraint_steps) : steps_(steps), constraints_(std::move(constraint_steps)) {
    if (steps < 2) throw ValidationError("time grid: steps must be >= 2, got " + std::to_string(steps));
    std::sort(constraints_.begin(), constraints_.end());
    for (std::size_t k = 0; k < constraints_.size(); ++k) {
      int j = constraints_[k];
      if (j <= 0 || j >= steps)
        throw ValidationError("time grid: constraint step " + std::to_string(j) + " is not interior to (0, " +
                              std::to_string(steps) + ")");
      if (k > 0 && constraints_[k - 1] == j)
        throw ValidationError("time grid: duplicate constraint step " + std::to_string(j));
    }
  }

  /// Builds the grid from constraint times given as fractions of [0, 1].
  /// Every time must coincide with a node up to 1e-12.
  static TimeGrid from_times(int steps, const std::vector<double>& times) {
    std::vector<int> js;
    js.reserve(times.size());
    for (double t : times) {
      if (!std::isfinite(t)) throw ValidationError("constraint_times: non-finite entry");
      double scaled = t * steps;
      double j = std::round(scaled);
      if (std::abs(scaled - j) > 1e-12 * std::max(1.0, double(steps)))
        throw ValidationError("constraint_times: " + std::to_string(t) + " is not on the time grid with T=" +
                              std::to_string(steps));
      js.push_back(static_cast<int>(j));
    }
    return TimeGrid(steps, std::move(js));
  }

  int steps() const { return steps_; }
  double dt() const { return 1.0 / steps_; }
  double time(int j) const { return static_cast<double>(j) / steps_; }
  const std::vector<int>& constraint_steps() const { return constraints_; }
  std::size_t constraint_count() const { return constraints_.size(); }

  /// Constraint index at step j, or -1.
  int constraint_at(int j) const {
    auto it = std::lower_bound(constraints_.begin(), constraints_.end(), j);
    return it != constraints_.end() && *it == j ? static_cast<int>(it - constraints_.begin()) : -1;
  }

  /// Mirror image t -> 1 - t of the constraint set.
  TimeGrid mirrored() const {
    std::vector<int> js;
    js.reserve(constraints_.size());
    for (int j : constraints_) js.push_back(steps_ - j);
    return TimeGrid(steps_, std::move(js));
  }

  bool operator==(const TimeGrid&) const = default;

 private:
  int steps_ = 2;
  std::vector<int> constraints_;
};

struct ScalarField {
  std::vector<double> values;

  ScalarField() = default;
  explicit ScalarField(std::size_t n, double fill = 0.0) : values(n, fill) {}
  explicit ScalarField(std::vector<double> v) : values(std::move(v)) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
};

struct VectorField {
  /// One component array per axis.
  std::vector<std::vector<double>> components;

  VectorField() = default;
  VectorField(int dim, std::size_t n, double fill = 0.0)
      : components(static_cast<std::size_t>(dim), std::vector<double>(n, fill)) {}

  int dim() const { return static_cast<int>(components.size()); }
  std::size_t size() const { return components.empty() ? 0 : components.front().size(); }
  std::vector<double>& operator[](int axis) { return components[static_cast<std::size_t>(axis)]; }
  const std::vector<double>& operator[](int axis) const { return components[static_cast<std::size_t>(axis)]; }
};

namespace detail {

inline void require_finite(const ScalarField& f, const char* what) {
  for (double v : f.values)
    if (!std::isfinite(v)) throw DomainError(std::string(what) + ": non-finite field entry");
}

inline void require_size(const TorusGrid& g, std::size_t n, const char* what) {
  if (n != g.size())
    throw ValidationError(std::string(what) + ": field has " + std::to_string(n) + " entries, grid has " +
                          std::to_string(g.size()));
}

/// Central difference of `f` along `axis`, written to out.
inline void central_difference(const std::vector<double>& f, const TorusGrid& g, int axis, std::vector<double>& out) {
  const int m = g.nodes_per_axis();
  const double inv = 0.5 * m;
  out.resize(f.size());
  if (g.dim() == 1) {
    for (int i = 0; i < m; ++i) out[std::size_t(i)] = (f[g.index(i + 1)] - f[g.index(i - 1)]) * inv;
    return;
  }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      double fp = axis == 0 ? f[g.index(i + 1, j)] : f[g.index(i, j + 1)];
      double fm = axis == 0 ? f[g.index(i - 1, j)] : f[g.index(i, j - 1)];
      out[g.index(i, j)] = (fp - fm) * inv;
    }
}

inline void second_difference_sum(const std::vector<double>& f, const TorusGrid& g, std::vector<double>& out) {
  const int m = g.nodes_per_axis();
  const double inv = double(m) * double(m);
  out.assign(f.size(), 0.0);
  if (g.dim() == 1) {
    for (int i = 0; i < m; ++i)
      out[std::size_t(i)] = (f[g.index(i + 1)] - 2.0 * f[g.index(i)] + f[g.index(i - 1)]) * inv;
    return;
  }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const double c = f[g.index(i, j)];
      double ax0 = f[g.index(i + 1, j)] - 2.0 * c + f[g.index(i - 1, j)];
      double ax1 = f[g.index(i, j + 1)] - 2.0 * c + f[g.index(i, j - 1)];
      out[g.index(i, j)] = ax0 * inv + ax1 * inv;
    }
}

}  // namespace detail

/// Central-difference gradient with cyclic wrap.
inline VectorField periodic_gradient(const ScalarField& f, const TorusGrid& g) {
  detail::require_size(g, f.size(), "periodic_gradient");
  detail::require_finite(f, "periodic_gradient");
  VectorField out(g.dim(), g.size());
  for (int axis = 0; axis < g.dim(); ++axis) detail::central_difference(f.values, g, axis, out[axis]);
  return out;
}

/// Second-difference Laplacian summed over axes, cyclic wrap.
inline ScalarField periodic_laplacian(const ScalarField& f, const TorusGrid& g) {
  detail::require_size(g, f.size(), "periodic_laplacian");
  detail::require_finite(f, "periodic_laplacian");
  ScalarField out;
  detail::second_difference_sum(f.values, g, out.values);
  return out;
}

/// Negative adjoint of periodic_gradient: sum of central differences of the
/// components. Node sums of the result vanish up to rounding.
inline ScalarField periodic_divergence(const VectorField& v, const TorusGrid& g) {
  if (v.dim() != g.dim()) throw ValidationError("periodic_divergence: component count does not match grid dim");
  ScalarField out(g.size(), 0.0);
  std::vector<double> tmp;
  for (int axis = 0; axis < g.dim(); ++axis) {
    detail::require_size(g, v[axis].size(), "periodic_divergence");
    for (double x : v[axis])
      if (!std::isfinite(x)) throw DomainError("periodic_divergence: non-finite field entry");
    detail::central_difference(v[axis], g, axis, tmp);
    for (std::size_t i = 0; i < tmp.size(); ++i) out[i] += tmp[i];
  }
  return out;
}

/// Central-difference curl proxy d0 v1 - d1 v0: the circulation around the
/// 2h x 2h plaquette centred at each node divided by its area. Vanishes up to
/// rounding on fields produced by periodic_gradient, because the central
/// difference operators along the two axes commute.
inline ScalarField periodic_curl(const VectorField& v, const TorusGrid& g) {
  if (g.dim() != 2 || v.dim() != 2) throw ValidationError("periodic_curl: needs a 2D field");
  std::vector<double> d0v1, d1v0;
  detail::central_difference(v[1], g, 0, d0v1);
  detail::central_difference(v[0], g, 1, d1v0);
  ScalarField out(g.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d0v1[i] - d1v0[i];
  return out;
}

/// Cyclic shift of a node field by the lattice displacement `disp`:
/// out[translate(i, disp)] = in[i].
inline std::vector<double> shift_field(const std::vector<double>& in, const TorusGrid& g, std::size_t disp) {
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[g.translate(i, disp)] = in[i];
  return out;
}

}  // namespace bredinger
