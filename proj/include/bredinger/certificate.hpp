#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bredinger/errors.hpp"
#include "bredinger/exact_sum.hpp"
#include "bredinger/kernel.hpp"
#include "bredinger/measure.hpp"
#include "bredinger/parallel.hpp"

namespace bredinger {

/// Path law Q = sum gamma(x, z, y) R(. | X0 = x, X_{1/2} = z, X1 = y) with
/// gamma = pi (x) uniform in the middle coordinate. The density
/// dQ/dR = gamma / R_{0,1/2,1} is evaluated on demand from the half-time
/// kernel power instead of being stored as an N^3 table.
struct PinnedMeasure {
  ReferenceChain ref;
  Coupling pi;
  /// log K^{T/2} per displacement.
  std::vector<double> log_half;
  /// log K^T per displacement.
  std::vector<double> log_full;

  std::size_t size() const { return ref.size(); }
  int half() const { return ref.time.steps() / 2; }

  double log_gamma(std::size_t x, std::size_t, std::size_t y) const {
    const double p = pi(x, y);
    return p > 0.0 ? std::log(p) - std::log(double(size())) : kNegInf;
  }
  double log_reference(std::size_t x, std::size_t z, std::size_t y) const {
    const auto& g = ref.grid();
    return std::log(ref.initial[x]) + log_half[g.displacement(x, z)] + log_half[g.displacement(z, y)];
  }
  /// log dQ/dR on paths through (x, z, y) at times (0, 1/2, 1).
  double log_density(std::size_t x, std::size_t z, std::size_t y) const {
    return log_gamma(x, z, y) - log_reference(x, z, y);
  }
};

namespace detail {

inline PinnedMeasure assemble_pinned(Coupling pi, const ReferenceChain& ref) {
  if (ref.time.steps() % 2 != 0)
    throw ValidationError("pinned measure: T = " + std::to_string(ref.time.steps()) +
                          " is odd, so t = 1/2 is not a grid node");
  if (!ref.initial.is_uniform(1e-15)) throw ValidationError("pinned measure: reference must start from the uniform law");
  if (pi.size() != ref.size()) throw ValidationError("pinned measure: coupling size does not match the grid");
  PinnedMeasure q;
  q.ref = ref;
  q.pi = std::move(pi);
  q.log_half = ref.kernel.log_power(ref.time.steps() / 2);
  q.log_full = ref.kernel.log_power(ref.time.steps());
  return q;
}

}  // namespace detail

/// Builds Q for a bistochastic coupling.
inline PinnedMeasure build_pinned(const Coupling& pi, const ReferenceChain& ref) {
  if (!pi.bistochastic()) throw ValidationError("pinned measure: coupling is not bistochastic");
  return detail::assemble_pinned(pi, ref);
}

/// Same construction without the bistochastic guard; for negative controls.
inline PinnedMeasure build_pinned_unchecked(const Coupling& pi, const ReferenceChain& ref) {
  return detail::assemble_pinned(pi, ref);
}

/// Time marginals Q_{t_j}, j = 0..T. On each half the law only involves one
/// pair marginal of gamma, and the bridge sum over the pinned node depends
/// on a single displacement:
///   j <= T/2:  Q_j(w) = sum_x pi0(x)/N K^j(w - x) S_j(w - x),
///              S_j(d) = sum_u K^{T/2 - j}(u) / K^{T/2}(u + d)
///   j >= T/2:  Q_j(w) = sum_y pi1(y)/N K^{T - j}(y - w) S'_j(y - w),
///              S'_j(d) = sum_v K^{j - T/2}(v) / K^{T/2}(d + v)
/// with pi0, pi1 the marginals of pi and gamma's middle law uniform.
inline std::vector<Density> pinned_marginals(const PinnedMeasure& q) {
  const auto& g = q.ref.grid();
  const std::size_t n = q.size();
  const int steps = q.ref.time.steps(), h = q.half();
  std::vector<std::vector<double>> powers(std::size_t(steps) + 1);
  for (int s = 0; s <= steps; ++s)
    powers[std::size_t(s)] = s == h ? q.log_half : s == steps ? q.log_full : q.ref.kernel.log_power(s);
  std::vector<Density> out(std::size_t(steps) + 1);
  parallel_for(std::size_t(steps) + 1, [&](std::size_t jj) {
    const int j = int(jj);
    const bool first = j <= h;
    const auto& inner = powers[std::size_t(first ? h - j : j - h)];
    const auto& outer = powers[std::size_t(first ? j : steps - j)];
    std::vector<double> c(n);
    for (std::size_t d = 0; d < n; ++d) {
      ExactSum s;
      for (std::size_t u = 0; u < n; ++u) {
        if (inner[u] == kNegInf) continue;
        s.add(std::exp(inner[u] - q.log_half[g.translate(u, d)]));
      }
      c[d] = outer[d] == kNegInf ? 0.0 : std::exp(outer[d]) * s.value();
    }
    const Density& end = first ? q.pi.first() : q.pi.second();
    std::vector<double> mass(n);
    for (std::size_t w = 0; w < n; ++w) {
      ExactSum s;
      for (std::size_t e = 0; e < n; ++e)
        s.add(end[e] / double(n) * c[first ? g.displacement(e, w) : g.displacement(w, e)]);
      mass[w] = s.value();
    }
    out[jj] = Density(std::move(mass));
  });
  return out;
}

/// Max over grid times of tv(Q_t, uniform).
inline double verify_incompressibility(const PinnedMeasure& q) {
  const auto u = Density::uniform(q.size());
  double worst = 0.0;
  for (const auto& m : pinned_marginals(q)) worst = std::max(worst, tv_distance(m, u));
  return worst;
}

/// Q01(x, y) = sum_z R_{0,1/2,1}(x, z, y) dQ/dR(x, z, y).
inline Coupling pinned_endpoint(const PinnedMeasure& q) {
  const std::size_t n = q.size();
  std::vector<double> t(n * n, 0.0);
  parallel_for(n, [&](std::size_t x) {
    for (std::size_t y = 0; y < n; ++y) {
      if (!(q.pi(x, y) > 0.0)) continue;
      ExactSum s;
      for (std::size_t z = 0; z < n; ++z) {
        const double lr = q.log_reference(x, z, y);
        s.add(std::exp(lr + q.log_density(x, z, y)));
      }
      t[x * n + y] = s.value();
    }
  });
  return Coupling::unchecked(n, std::move(t));
}

struct EntropyDecomposition {
  /// H(Q|R), from the path density.
  double path = 0.0;
  /// H(gamma | R_{0,1/2,1}).
  double three_point = 0.0;
  /// H(pi | R01).
  double coupling = 0.0;
  /// sum pi(x, y) H(uniform | mid-law of the x -> y reference bridge).
  double bridge_term = 0.0;
  /// |H(Q|R) - H(pi|R01) - bridge_term|.
  double residual = 0.0;
};

namespace detail {

// H(uniform | K^{T/2}(.)K^{T/2}(d - .) / K^T(d)) for every displacement d.
inline std::vector<double> discrete_bridge_entropies(const std::vector<double>& log_half,
                                                     const std::vector<double>& log_full, const TorusGrid& g) {
  const std::size_t n = g.size();
  std::vector<double> out(n);
  const double log_n = std::log(double(n));
  parallel_for(n, [&](std::size_t d) {
    ExactSum s;
    for (std::size_t z = 0; z < n; ++z) s.add(log_half[z] + log_half[g.displacement(z, d)] - log_full[d]);
    out[d] = -log_n - s.value() / double(n);
  });
  return out;
}

}  // namespace detail

/// The chain H(Q|R) = H(gamma|R_{0,1/2,1}) = H(pi|R01) + bridge_term, each
/// piece evaluated on its own.
inline EntropyDecomposition entropy_decomposition(const PinnedMeasure& q) {
  const auto& g = q.ref.grid();
  const std::size_t n = q.size();
  EntropyDecomposition e;

  // Path form: E_Q[log dQ/dR] with Q(x, z, y) = R_{0,1/2,1} dQ/dR.
  std::vector<ExactSum> path(n), three(n);
  parallel_for(n, [&](std::size_t x) {
    for (std::size_t y = 0; y < n; ++y) {
      if (!(q.pi(x, y) > 0.0)) continue;
      for (std::size_t z = 0; z < n; ++z) {
        const double ld = q.log_density(x, z, y);
        path[x].add(std::exp(q.log_reference(x, z, y) + ld) * ld);
        const double gm = q.pi(x, y) / double(n);
        three[x].add(gm * (std::log(gm) - q.log_reference(x, z, y)));
      }
    }
  });
  ExactSum hp, h3;
  for (std::size_t x = 0; x < n; ++x) {
    hp.add(path[x]);
    h3.add(three[x]);
  }
  e.path = hp.value();
  e.three_point = h3.value();

  const auto r01 = q.ref.endpoint_law();
  e.coupling = discrete_entropy(q.pi.table(), r01);

  const auto per_disp = detail::discrete_bridge_entropies(q.log_half, q.log_full, g);
  ExactSum b;
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = 0; y < n; ++y)
      if (q.pi(x, y) > 0.0) b.add(q.pi(x, y) * per_disp[g.displacement(x, y)]);
  e.bridge_term = b.value();
  e.residual = std::abs(e.path - e.coupling - e.bridge_term);
  return e;
}

struct BridgeEntropySup {
  /// max over displacements of H(uniform | discrete bridge mid-law) of the chain.
  double discrete = 0.0;
  std::size_t discrete_argmax = 0;
  /// max over displacements of the continuum H(vol | R^{xy}_{1/2}) quadrature.
  double continuum = 0.0;
  std::size_t continuum_argmax = 0;
};

/// sup over (x, y) of H(vol | R^{xy}_{1/2}); translation invariance reduces
/// the pair loop to one displacement per class.
inline BridgeEntropySup sup_bridge_entropy(const ReferenceChain& ref) {
  if (ref.time.steps() % 2 != 0) throw ValidationError("sup_bridge_entropy: T must be even");
  const auto& g = ref.grid();
  const std::size_t n = g.size();
  const auto per_disp = detail::discrete_bridge_entropies(ref.kernel.log_power(ref.time.steps() / 2),
                                                          ref.kernel.log_power(ref.time.steps()), g);
  std::vector<double> cont(n);
  parallel_for(n, [&](std::size_t d) { cont[d] = bridge_entropy(g, 0, d, ref.kernel.diffusion()); });
  BridgeEntropySup s;
  s.discrete = per_disp[0];
  s.continuum = cont[0];
  for (std::size_t d = 1; d < n; ++d) {
    if (per_disp[d] > s.discrete) {
      s.discrete = per_disp[d];
      s.discrete_argmax = d;
    }
    if (cont[d] > s.continuum) {
      s.continuum = cont[d];
      s.continuum_argmax = d;
    }
  }
  return s;
}

}  // namespace bredinger
