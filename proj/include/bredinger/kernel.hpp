#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "bredinger/errors.hpp"
#include "bredinger/exact_sum.hpp"
#include "bredinger/grid.hpp"

namespace bredinger {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Probability masses over grid nodes.
struct Density {
  std::vector<double> mass;

  Density() = default;
  explicit Density(std::vector<double> m) : mass(std::move(m)) {}

  static Density uniform(std::size_t n) { return Density(std::vector<double>(n, 1.0 / double(n))); }
  static Density point(std::size_t n, std::size_t at) {
    std::vector<double> m(n, 0.0);
    m.at(at) = 1.0;
    return Density(std::move(m));
  }

  /// Validating constructor: entries finite, nonnegative, summing to 1.
  static Density from_masses(std::vector<double> m, double tol = 1e-12) {
    ExactSum sum;
    for (double v : m) {
      if (!std::isfinite(v) || v < 0.0) throw ValidationError("density: entries must be finite and nonnegative");
      sum.add(v);
    }
    const double total = sum.value();
    if (std::abs(total - 1.0) > tol)
      throw ValidationError("density: masses sum to " + std::to_string(total) + ", expected 1");
    return Density(std::move(m));
  }

  std::size_t size() const { return mass.size(); }
  double operator[](std::size_t i) const { return mass[i]; }

  bool is_uniform(double tol) const {
    const double u = 1.0 / double(mass.size());
    return std::all_of(mass.begin(), mass.end(), [&](double v) { return std::abs(v - u) <= tol; });
  }
};

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  double mx = kNegInf;
  for (double x : v) mx = std::max(mx, x);
  if (mx == kNegInf) return kNegInf;
  ExactSum s;
  for (double x : v) s.add(std::exp(x - mx));
  return mx + std::log(s.value());
}

/// Wrapped sum over images of exp(-(u + k)^2 / (2 variance)) for |k| <= cutoff,
/// with u in [0, 1/2]. Far images are added first.
inline double image_sum(double u, double variance, int cutoff) {
  const double c = 0.5 / variance;
  double s = 0.0;
  for (int k = cutoff; k >= 1; --k) {
    const double p = u + k, q = u - k;
    s += std::exp(-p * p * c) + std::exp(-q * q * c);
  }
  return s + std::exp(-u * u * c);
}

/// |x - round(x)|, the distance to the nearest integer.
inline double reduce_offset(double x) {
  double r = x - std::round(x);
  return std::abs(r);
}

}  // namespace detail

/// Variance and image cutoff of a wrapped Gaussian on the unit torus.
struct WrappedGaussianParams {
  double variance = 1.0;
  int image_cutoff = 1;
  int dim = 1;

  static constexpr double kTailTolerance = 1e-15;

  /// Smallest cutoff whose neglected images stay below 1e-15 of the smallest
  /// retained leading term (per axis).
  static int cutoff_for(double variance) {
    if (!(variance > 0.0) || !std::isfinite(variance)) throw DomainError("wrapped Gaussian: variance must be > 0");
    const double c = 0.5 / variance;
    for (int kc = 1;; ++kc) {
      // Relative to exp(-(1/2)^2 c), the leading term at the worst offset.
      double tail = 0.0;
      for (int k = kc + 1; k <= kc + 400; ++k) {
        const double km = double(k - 1);
        const double term = std::exp(-(km * km - 0.25) * c);
        tail += term;
        if (term < 1e-40 * tail) break;
      }
      if (2.0 * tail < kTailTolerance) return kc;
      if (kc > 100000) throw ConfigurationError("wrapped Gaussian: variance too large for image summation");
    }
  }

  static WrappedGaussianParams make(double variance, int dim) {
    if (dim != 1 && dim != 2) throw ValidationError("wrapped Gaussian: dim must be 1 or 2");
    return {variance, cutoff_for(variance), dim};
  }
};

/// Continuum wrapped-Gaussian density at displacement d (components beyond
/// params.dim are ignored).
inline double wrapped_density(std::span<const double> d, const WrappedGaussianParams& p) {
  if (!(p.variance > 0.0)) throw DomainError("wrapped_density: variance must be > 0");
  if (d.size() < std::size_t(p.dim)) throw ValidationError("wrapped_density: displacement has too few components");
  double value = 1.0;
  for (int axis = 0; axis < p.dim; ++axis)
    value *= detail::image_sum(detail::reduce_offset(d[std::size_t(axis)]), p.variance, p.image_cutoff);
  return value * std::pow(2.0 * std::numbers::pi * p.variance, -0.5 * p.dim);
}

inline double wrapped_density(double d, const WrappedGaussianParams& p) {
  std::array<double, 2> v{d, 0.0};
  return wrapped_density(std::span<const double>(v.data(), 2), p);
}

/// One-step transition kernel of the reference chain: a circulant, symmetric,
/// strictly positive and row-stochastic stencil built from the wrapped
/// Gaussian with variance a * dt.
///
/// In 2D the wrapped Gaussian is a product over axes, so the normalized stencil
/// is the outer product of the normalized axis stencil and kernel application
/// runs as two axis convolutions. apply_direct() is the plain m^dim stencil
/// convolution kept as the reference path.
class TransitionKernel {
 public:
  TransitionKernel() = default;

  TransitionKernel(const TorusGrid& grid, double diffusion, double dt)
      : grid_(grid), diffusion_(diffusion), dt_(dt) {
    if (!(diffusion > 0.0) || !std::isfinite(diffusion)) throw DomainError("transition kernel: a must be > 0");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw DomainError("transition kernel: dt must be > 0");
    const double variance = diffusion * dt;
    const int m = grid.nodes_per_axis();
    params_ = WrappedGaussianParams::make(variance, grid.dim());

    axis_.assign(std::size_t(m), 0.0);
    for (int i = 0; i < m; ++i) {
      const double u = std::abs(double(grid.minimal_image(i))) / double(m);
      axis_[std::size_t(i)] = detail::image_sum(u, variance, params_.image_cutoff);
    }
    double total = 0.0;
    for (double v : axis_) total += v;
    for (double& v : axis_) v /= total;

    if (grid.dim() == 1) {
      stencil_ = axis_;
    } else {
      stencil_.resize(grid.size());
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) stencil_[grid.index(i, j)] = axis_[std::size_t(i)] * axis_[std::size_t(j)];
    }

    const double peak = *std::max_element(stencil_.begin(), stencil_.end());
    const double floor = *std::min_element(stencil_.begin(), stencil_.end());
    if (peak > 1.0 - 1e-15 || !(floor > 0.0))
      throw ConfigurationError("transition kernel: a*dt = " + std::to_string(variance) +
                               " makes the one-step kernel numerically a point mass on this grid; "
                               "increase a*dt or coarsen the grid");
  }

  const TorusGrid& grid() const { return grid_; }
  double diffusion() const { return diffusion_; }
  double dt() const { return dt_; }
  const WrappedGaussianParams& params() const { return params_; }

  /// Normalized one-step probability of the displacement with flat index `disp`.
  double operator[](std::size_t disp) const { return stencil_[disp]; }
  const std::vector<double>& stencil() const { return stencil_; }
  const std::vector<double>& axis_stencil() const { return axis_; }

  /// Cyclic convolution out[y] = sum_d k[d] in[y - d]. The kernel is even, so
  /// this is both forward propagation of a measure and the backward action on
  /// a function.
  void apply(std::span<const double> in, std::span<double> out) const {
    const int m = grid_.nodes_per_axis();
    if (grid_.dim() == 1) {
      axis_convolve(in.data(), out.data(), m, 1);
      return;
    }
    thread_local std::vector<double> scratch;
    scratch.resize(grid_.size());
    for (int i = 0; i < m; ++i)
      axis_convolve(in.data() + std::size_t(i) * std::size_t(m), scratch.data() + std::size_t(i) * std::size_t(m), m, 1);
    for (int j = 0; j < m; ++j) axis_convolve(scratch.data() + j, out.data() + j, m, std::size_t(m));
  }

  /// Reference convolution over the full m^dim stencil, displacement order.
  void apply_direct(std::span<const double> in, std::span<double> out) const {
    const std::size_t n = grid_.size();
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t d = 0; d < n; ++d) {
      const double k = stencil_[d];
      const std::size_t nd = grid_.negate(d);
      for (std::size_t y = 0; y < n; ++y) out[y] += k * in[grid_.translate(y, nd)];
    }
  }

  /// apply() on log-domain values, using a max shift. All -inf input gives
  /// all -inf output.
  void apply_log(std::span<const double> in, std::span<double> out) const {
    double mx = kNegInf;
    for (double v : in) mx = std::max(mx, v);
    if (mx == kNegInf) {
      std::fill(out.begin(), out.end(), kNegInf);
      return;
    }
    thread_local std::vector<double> lin, res;
    lin.resize(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) lin[i] = std::exp(in[i] - mx);
    res.resize(in.size());
    apply(lin, res);
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::log(res[i]) + mx;
  }

  /// Log of the n-step stencil: log K^n(0 -> d).
  std::vector<double> log_power(int steps) const {
    const std::size_t n = grid_.size();
    std::vector<double> cur(n, kNegInf), next(n);
    cur[0] = 0.0;
    for (int s = 0; s < steps; ++s) {
      apply_log(cur, next);
      std::swap(cur, next);
    }
    return cur;
  }

 private:
  // out[y * stride] = sum_d axis_[d] * in[((y - d) mod m) * stride]
  void axis_convolve(const double* in, double* out, int m, std::size_t stride) const {
    for (int y = 0; y < m; ++y) out[std::size_t(y) * stride] = 0.0;
    for (int d = 0; d < m; ++d) {
      const double k = axis_[std::size_t(d)];
      for (int y = 0; y < d; ++y) out[std::size_t(y) * stride] += k * in[std::size_t(y - d + m) * stride];
      for (int y = d; y < m; ++y) out[std::size_t(y) * stride] += k * in[std::size_t(y - d) * stride];
    }
  }

  TorusGrid grid_;
  double diffusion_ = 1.0;
  double dt_ = 1.0;
  WrappedGaussianParams params_;
  std::vector<double> axis_;
  std::vector<double> stencil_;
};

namespace detail {

/// |minimal image| of an integer axis offset as a fraction of the side.
inline double axis_offset(const TorusGrid& g, int offset) {
  return std::abs(double(g.minimal_image(offset))) / double(g.nodes_per_axis());
}

/// Log of the numerator image sums of the bridge midpoint density for the
/// offsets z - x = w and y - z = d - w (both as displacement flat indices).
inline double bridge_log_numerator(const TorusGrid& g, std::size_t w, std::size_t d, double a, int half_cut) {
  auto cw = g.coords(w), cd = g.coords(d);
  double s = 0.0;
  for (int axis = 0; axis < g.dim(); ++axis) {
    s += std::log(image_sum(axis_offset(g, cw[axis]), 0.5 * a, half_cut));
    s += std::log(image_sum(axis_offset(g, cd[axis] - cw[axis]), 0.5 * a, half_cut));
  }
  return s;
}

inline double bridge_log_denominator(const TorusGrid& g, std::size_t d, double a, int full_cut) {
  auto cd = g.coords(d);
  double s = 0.0;
  for (int axis = 0; axis < g.dim(); ++axis) s += std::log(image_sum(axis_offset(g, cd[axis]), a, full_cut));
  return s;
}

/// Continuum density of X_{1/2} under the x -> y bridge with diffusion a, at
/// node z. The double image sums over (k, l) factor into products per axis.
inline double bridge_midpoint_value(const TorusGrid& g, std::size_t x, std::size_t y, std::size_t z, double a,
                                    int half_cut, int full_cut) {
  auto cx = g.coords(x), cy = g.coords(y), cz = g.coords(z);
  double num = 1.0, den = 1.0;
  for (int axis = 0; axis < g.dim(); ++axis) {
    num *= image_sum(axis_offset(g, cz[axis] - cx[axis]), 0.5 * a, half_cut) *
           image_sum(axis_offset(g, cy[axis] - cz[axis]), 0.5 * a, half_cut);
    den *= image_sum(axis_offset(g, cy[axis] - cx[axis]), a, full_cut);
  }
  return std::pow(2.0 / (std::numbers::pi * a), 0.5 * g.dim()) * num / den;
}

}  // namespace detail

/// Node masses of the time-1/2 marginal of the Brownian bridge from x to y
/// over [0, 1] with diffusion a: the continuum density at each node times
/// h^dim, renormalized to sum 1.
inline Density bridge_midpoint_density(const TorusGrid& g, std::size_t x, std::size_t y, double a) {
  if (!(a > 0.0)) throw DomainError("bridge_midpoint_density: a must be > 0");
  const int half_cut = WrappedGaussianParams::cutoff_for(0.5 * a);
  const int full_cut = WrappedGaussianParams::cutoff_for(a);
  std::vector<double> m(g.size());
  double total = 0.0;
  for (std::size_t z = 0; z < g.size(); ++z) {
    m[z] = detail::bridge_midpoint_value(g, x, y, z, a, half_cut, full_cut) * g.cell_volume();
    total += m[z];
  }
  for (double& v : m) v /= total;
  return Density(std::move(m));
}

/// Continuum bridge midpoint density values at the nodes (no renormalization).
inline std::vector<double> bridge_midpoint_values(const TorusGrid& g, std::size_t x, std::size_t y, double a) {
  if (!(a > 0.0)) throw DomainError("bridge_midpoint_values: a must be > 0");
  const int half_cut = WrappedGaussianParams::cutoff_for(0.5 * a);
  const int full_cut = WrappedGaussianParams::cutoff_for(a);
  std::vector<double> v(g.size());
  for (std::size_t z = 0; z < g.size(); ++z) v[z] = detail::bridge_midpoint_value(g, x, y, z, a, half_cut, full_cut);
  return v;
}

/// H(vol | R^{xy}_{1/2}) = -integral of log rho over the torus, evaluated from
/// the log-sum form
///   log[(pi a / 2)^{dim/2} D(y - x)] - mean_z log N(x, z, y)
/// with midpoint quadrature on the grid nodes. The quadrature runs over
/// offsets w = z - x paired with -w, so the value depends only on the
/// displacement y - x and is bitwise symmetric in (x, y).
inline double bridge_entropy(const TorusGrid& g, std::size_t x, std::size_t y, double a) {
  if (!(a > 0.0)) throw DomainError("bridge_entropy: a must be > 0");
  const int half_cut = WrappedGaussianParams::cutoff_for(0.5 * a);
  const int full_cut = WrappedGaussianParams::cutoff_for(a);
  const std::size_t d = g.displacement(x, y);
  const double log_den = 0.5 * g.dim() * std::log(0.5 * std::numbers::pi * a) +
                         detail::bridge_log_denominator(g, d, a, full_cut);
  double paired = 0.0;
  for (std::size_t w = 0; w < g.size(); ++w)
    paired += detail::bridge_log_numerator(g, w, d, a, half_cut) +
              detail::bridge_log_numerator(g, g.negate(w), d, a, half_cut);
  return log_den - paired / (2.0 * double(g.size()));
}

}  // namespace bredinger
