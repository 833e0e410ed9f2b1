#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "bredinger/errors.hpp"
#include "bredinger/grid.hpp"
#include "bredinger/measure.hpp"

namespace bredinger {

/// Independent coupling a (x) b.
inline Coupling product_coupling(const Density& a, const Density& b) {
  if (a.size() != b.size()) throw ValidationError("product coupling: marginal sizes differ");
  const std::size_t n = a.size();
  std::vector<double> t(n * n);
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = 0; y < n; ++y) t[x * n + y] = a[x] * b[y];
  return Coupling::from_table(n, std::move(t), 1e-10);
}

/// Coupling carried by a node map f with uniform first marginal: mass 1/N on
/// every pair (x, f(x)). Bistochastic when f is a bijection.
template <class Map>
Coupling map_coupling(const TorusGrid& g, Map&& f) {
  const std::size_t n = g.size();
  std::vector<double> t(n * n, 0.0);
  for (std::size_t x = 0; x < n; ++x) t[x * n + f(x)] += 1.0 / double(n);
  return Coupling::unchecked(n, std::move(t));
}

/// Cyclic shift x -> x + s, with s a displacement flat index.
inline Coupling shift_coupling(const TorusGrid& g, std::size_t disp) {
  if (disp >= g.size()) throw ValidationError("shift coupling: displacement out of range");
  return map_coupling(g, [&](std::size_t x) { return g.translate(x, disp); });
}

/// Convex mixture of shift couplings; weights must be positive and are
/// normalized.
inline Coupling shift_mixture_coupling(const TorusGrid& g, const std::vector<std::pair<std::size_t, double>>& parts) {
  if (parts.empty()) throw ValidationError("shift mixture: no components");
  double total = 0.0;
  for (const auto& [d, w] : parts) {
    if (!(w > 0.0) || !std::isfinite(w)) throw ValidationError("shift mixture: weights must be positive");
    if (d >= g.size()) throw ValidationError("shift mixture: displacement out of range");
    total += w;
  }
  const std::size_t n = g.size();
  std::vector<double> t(n * n, 0.0);
  for (const auto& [d, w] : parts)
    for (std::size_t x = 0; x < n; ++x) t[x * n + g.translate(x, d)] += w / total / double(n);
  return Coupling::unchecked(n, std::move(t));
}

/// Point reflection x -> -x through the origin node.
inline Coupling reflection_coupling(const TorusGrid& g) {
  return map_coupling(g, [&](std::size_t x) {
    auto c = g.coords(x);
    return g.dim() == 1 ? g.index(-c[0]) : g.index(-c[0], -c[1]);
  });
}

/// Quarter turn (i, j) -> (-j, i) about the origin node; 2D only.
inline Coupling rotation_coupling(const TorusGrid& g) {
  if (g.dim() != 2) throw ValidationError("rotation coupling: needs dim = 2");
  return map_coupling(g, [&](std::size_t x) {
    auto c = g.coords(x);
    return g.index(-c[1], c[0]);
  });
}

/// Endpoint law of the reference chain, R01.
inline Coupling reference_coupling(const ReferenceChain& ref) {
  return Coupling::from_table(ref.size(), ref.endpoint_law(), 1e-10);
}

}  // namespace bredinger
