#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bredinger/errors.hpp"
#include "bredinger/exact_sum.hpp"
#include "bredinger/grid.hpp"
#include "bredinger/measure.hpp"
#include "bredinger/parallel.hpp"

namespace bredinger {

enum class PotentialSide { forward, backward };

/// Values on both sides of a constraint-time jump. `after` is the stored node
/// value; `before` is the one-sided value on the other side of the atom.
struct JumpEntry {
  int step = 0;
  ScalarField before;
  ScalarField after;
};

/// Per-time potential of one anchor: psi^{x0} (forward) or phi^{y} (backward).
struct PotentialField {
  PotentialSide side = PotentialSide::forward;
  std::size_t anchor = 0;
  std::vector<ScalarField> values;
  std::vector<JumpEntry> ledger;
};

/// Fields defined on a subset of the time nodes.
template <class Field>
struct Series {
  std::vector<int> steps;
  std::vector<Field> values;

  bool has(int j) const { return std::find(steps.begin(), steps.end(), j) != steps.end(); }
  const Field& at(int j) const {
    auto it = std::find(steps.begin(), steps.end(), j);
    if (it == steps.end()) throw ValidationError("series: no field at step " + std::to_string(j));
    return values[std::size_t(it - steps.begin())];
  }
  void push(int j, Field f) {
    steps.push_back(j);
    values.push_back(std::move(f));
  }
};

enum class VelocityKind { forward, backward, averaged };

struct VelocityField : Series<VectorField> {
  VelocityKind kind = VelocityKind::forward;
  std::size_t anchor = 0;
  double alpha = 0.0;
};

using ScalarSeries = Series<ScalarField>;

namespace detail {

inline bool all_finite(const ScalarField& f) {
  return std::all_of(f.values.begin(), f.values.end(), [](double v) { return std::isfinite(v); });
}

inline std::vector<double> theta_plus(const ReciprocalMeasure& p, int j, const std::vector<double>& v) {
  std::vector<double> out = v;
  if (int k = p.ref.time.constraint_at(j); k >= 0)
    for (std::size_t z = 0; z < out.size(); ++z) out[z] += p.theta[std::size_t(k)][z];
  return out;
}

// Minimal-image increment; the antipodal offset of an even grid has two
// nearest representatives and is split evenly between them, i.e. counts 0.
inline double axis_displacement(const TorusGrid& g, std::size_t from, std::size_t to, int axis) {
  auto a = g.coords(from), b = g.coords(to);
  const int r = g.minimal_image(b[std::size_t(axis)] - a[std::size_t(axis)]);
  if (2 * r == -g.nodes_per_axis()) return 0.0;
  return double(r) * g.spacing();
}

}  // namespace detail

/// psi^{x0}(t_j, .) = log E[exp(eta(x0, X1) + sum_{t_k > t_j} theta_k) | X_j = .].
/// Node values are post-jump; the ledger keeps psi(t_k-) = psi(t_k) + theta_k.
inline PotentialField psi_field(const ReciprocalMeasure& p, std::size_t x0) {
  if (x0 >= p.size()) throw ValidationError("psi_field: anchor out of range");
  auto s = start_messages(p, x0);
  if (s.log_z == kNegInf) throw InfeasibleError("psi_field: Z(x0) = 0 for start node " + std::to_string(x0));
  PotentialField f;
  f.side = PotentialSide::forward;
  f.anchor = x0;
  for (auto& b : s.backward) f.values.emplace_back(std::move(b));
  for (int j : p.ref.time.constraint_steps())
    f.ledger.push_back({j, ScalarField(detail::theta_plus(p, j, f.values[std::size_t(j)].values)),
                        f.values[std::size_t(j)]});
  return f;
}

/// Time reversal P* of the law of P, with reversed constraint times. The
/// reference chain is reversible for the uniform law, so P* is again a
/// reciprocal measure over the same kernel, started from P1, with
///   eta*(x, y) = eta(y, x) + log(N mu0(y)) - logZ(y),  theta*_{1-t} = theta_t.
/// For uniform mu0 and logZ = 0 this is the plain swap of eta.
inline ReciprocalMeasure time_reverse(const ReciprocalMeasure& p, const Marginals& m) {
  const std::size_t n = p.size();
  ReciprocalMeasure q;
  q.ref = p.ref;
  q.ref.time = p.ref.time.mirrored();
  q.ref.initial = m.time.back();
  q.eta.assign(n * n, kNegInf);
  for (std::size_t y = 0; y < n; ++y) {
    if (!p.charged(y)) continue;
    const double shift = std::log(double(n) * p.ref.initial[y]) - m.log_z[y];
    for (std::size_t x = 0; x < n; ++x) q.eta[x * n + y] = p.eta[y * n + x] + shift;
  }
  q.theta.assign(p.theta.rbegin(), p.theta.rend());
  normalize(q);
  return q;
}

inline ReciprocalMeasure time_reverse(const ReciprocalMeasure& p) { return time_reverse(p, marginals(p)); }

/// phi^{y}(t, .) = -xi^{y}(1 - t, .) with xi the forward potential of P*, given
/// the reversed measure. phi jumps by +theta across each constraint time.
inline PotentialField phi_field_from_reversed(const ReciprocalMeasure& reversed, std::size_t y) {
  auto xi = psi_field(reversed, y);
  const int steps = reversed.ref.time.steps();
  PotentialField f;
  f.side = PotentialSide::backward;
  f.anchor = y;
  f.values.resize(xi.values.size());
  for (int j = 0; j <= steps; ++j) {
    auto& dst = f.values[std::size_t(j)].values;
    dst = xi.values[std::size_t(steps - j)].values;
    for (auto& v : dst) v = -v;
  }
  for (auto it = xi.ledger.rbegin(); it != xi.ledger.rend(); ++it) {
    JumpEntry e;
    e.step = steps - it->step;
    e.before = it->before;
    e.after = it->after;
    for (auto& v : e.before.values) v = -v;
    for (auto& v : e.after.values) v = -v;
    f.ledger.push_back(std::move(e));
  }
  return f;
}

inline PotentialField phi_field(const ReciprocalMeasure& p, std::size_t y) {
  return phi_field_from_reversed(time_reverse(p), y);
}

/// Max deviation of the ledger jumps from -theta (psi) or +theta (phi).
inline double jump_defect(const PotentialField& f, const ReciprocalMeasure& p) {
  const double sign = f.side == PotentialSide::forward ? -1.0 : 1.0;
  double worst = 0.0;
  for (const auto& e : f.ledger) {
    const int k = p.ref.time.constraint_at(e.step);
    if (k < 0) throw InconsistencyError("jump ledger: step " + std::to_string(e.step) + " is not a constraint time");
    for (std::size_t z = 0; z < e.after.size(); ++z) {
      const double th = p.theta[std::size_t(k)][z];
      const double jump = e.after[z] - e.before[z];
      if (!std::isfinite(th) || !std::isfinite(jump)) {
        if (std::isfinite(th) != std::isfinite(jump)) worst = INFINITY;
        continue;
      }
      worst = std::max(worst, std::abs(jump - sign * th));
    }
  }
  return worst;
}

/// Velocity jumps a grad(after) - a grad(before) against -a grad theta (psi)
/// or +a grad theta (phi), over constraint times where theta is finite.
inline double velocity_jump_defect(const PotentialField& f, const ReciprocalMeasure& p) {
  const auto& g = p.grid();
  const double a = p.ref.kernel.diffusion();
  const double sign = f.side == PotentialSide::forward ? -1.0 : 1.0;
  double worst = 0.0;
  for (const auto& e : f.ledger) {
    const auto& th = p.theta[std::size_t(p.ref.time.constraint_at(e.step))];
    if (!detail::all_finite(th) || !detail::all_finite(e.before) || !detail::all_finite(e.after)) continue;
    auto gb = periodic_gradient(e.before, g), ga = periodic_gradient(e.after, g), gt = periodic_gradient(th, g);
    for (int axis = 0; axis < g.dim(); ++axis)
      for (std::size_t z = 0; z < g.size(); ++z)
        worst = std::max(worst, std::abs(a * ga[axis][z] - a * gb[axis][z] - sign * a * gt[axis][z]));
  }
  return worst;
}

/// a * grad of each finite time slice. Slices with -inf entries are allowed
/// only at the boundary time where the anchor's endpoint potential sits.
inline VelocityField gradient_velocity(const PotentialField& f, const TorusGrid& g, double a) {
  VelocityField v;
  v.kind = f.side == PotentialSide::forward ? VelocityKind::forward : VelocityKind::backward;
  v.anchor = f.anchor;
  const int last = int(f.values.size()) - 1;
  const int boundary = f.side == PotentialSide::forward ? last : 0;
  for (int j = 0; j <= last; ++j) {
    const auto& s = f.values[std::size_t(j)];
    if (!detail::all_finite(s)) {
      if (j == boundary) continue;
      throw DomainError("velocity: potential has -inf entries at interior step " + std::to_string(j));
    }
    auto grad = periodic_gradient(s, g);
    for (auto& comp : grad.components)
      for (auto& x : comp) x *= a;
    v.push(j, std::move(grad));
  }
  return v;
}

/// Forward velocity a grad psi^{x0}.
inline VelocityField forward_velocity(const PotentialField& psi, const TorusGrid& g, double a) {
  if (psi.side != PotentialSide::forward) throw ValidationError("forward_velocity: needs a psi field");
  return gradient_velocity(psi, g, a);
}

/// Backward velocity a grad phi^{y}.
inline VelocityField backward_velocity(const PotentialField& phi, const TorusGrid& g, double a) {
  if (phi.side != PotentialSide::backward) throw ValidationError("backward_velocity: needs a phi field");
  return gradient_velocity(phi, g, a);
}

namespace detail {

// Mean minimal-image increment over one step of the chain conditioned on
// X0 = x0, from node z at step j, divided by dt:
//   P(X_{j+1} = y | X_j = z) = K(z, y) exp(psi(t_{j+1}-, y) - psi(t_j, z)).
inline std::vector<double> nelson_at(const ReciprocalMeasure& p, const std::vector<double>& pre_next, double psi_here,
                                     std::size_t z) {
  const auto& g = p.grid();
  const auto& k = p.ref.kernel;
  const std::size_t n = p.size();
  std::vector<double> out(std::size_t(g.dim()), 0.0);
  ExactSum mass;
  std::vector<ExactSum> mom(std::size_t(g.dim()));
  for (std::size_t y = 0; y < n; ++y) {
    if (pre_next[y] == kNegInf) continue;
    const double w = k[g.displacement(z, y)] * std::exp(pre_next[y] - psi_here);
    mass.add(w);
    for (int axis = 0; axis < g.dim(); ++axis) mom[std::size_t(axis)].add(w * axis_displacement(g, z, y, axis));
  }
  const double total = mass.value();
  for (int axis = 0; axis < g.dim(); ++axis)
    out[std::size_t(axis)] = mom[std::size_t(axis)].value() / total / k.dt();
  return out;
}

}  // namespace detail

/// Forward Nelson velocity of P^{x0} at (t_j, z), j < T.
inline std::vector<double> nelson_velocity(const ReciprocalMeasure& p, std::size_t x0, int j, std::size_t z) {
  const int steps = p.ref.time.steps();
  if (j < 0 || j >= steps) throw ValidationError("nelson_velocity: step must lie in [0, T)");
  auto s = start_messages(p, x0);
  if (s.log_z == kNegInf) throw InfeasibleError("nelson_velocity: Z(x0) = 0 for start node " + std::to_string(x0));
  const double mass = std::exp(s.forward[std::size_t(j)][z] + s.backward[std::size_t(j)][z] - s.log_z);
  if (!(mass > 0.0)) throw DomainError("nelson_velocity: zero conditioning mass at node " + std::to_string(z));
  return detail::nelson_at(p, detail::theta_plus(p, j + 1, s.backward[std::size_t(j) + 1]),
                           s.backward[std::size_t(j)][z], z);
}

/// Forward Nelson field of the chain conditioned on X0 = x0 at steps 0..T-1.
/// Evaluated at every node through the h-transformed one-step kernel, which
/// is defined wherever psi is finite.
inline VelocityField nelson_forward_field(const ReciprocalMeasure& p, std::size_t x0) {
  auto s = start_messages(p, x0);
  if (s.log_z == kNegInf) throw InfeasibleError("nelson: Z(x0) = 0 for start node " + std::to_string(x0));
  const auto& g = p.grid();
  const int steps = p.ref.time.steps();
  VelocityField v;
  v.kind = VelocityKind::forward;
  v.anchor = x0;
  v.steps.resize(std::size_t(steps));
  v.values.assign(std::size_t(steps), VectorField(g.dim(), g.size()));
  parallel_for(std::size_t(steps), [&](std::size_t j) {
    v.steps[j] = int(j);
    const auto pre = detail::theta_plus(p, int(j) + 1, s.backward[j + 1]);
    for (std::size_t z = 0; z < g.size(); ++z) {
      auto e = detail::nelson_at(p, pre, s.backward[j][z], z);
      for (int axis = 0; axis < g.dim(); ++axis) v.values[j][axis][z] = e[std::size_t(axis)];
    }
  });
  return v;
}

/// Backward Nelson field of P conditioned on X1 = y at steps 1..T: the
/// negated forward field of P* from y at the mirrored steps.
inline VelocityField nelson_backward_field_from_reversed(const ReciprocalMeasure& reversed, std::size_t y) {
  auto fwd = nelson_forward_field(reversed, y);
  const int steps = reversed.ref.time.steps();
  VelocityField v;
  v.kind = VelocityKind::backward;
  v.anchor = y;
  for (int j = 1; j <= steps; ++j) {
    VectorField f = fwd.at(steps - j);
    for (auto& comp : f.components)
      for (auto& x : comp) x = -x;
    v.push(j, std::move(f));
  }
  return v;
}

inline VelocityField nelson_backward_field(const ReciprocalMeasure& p, std::size_t y) {
  return nelson_backward_field_from_reversed(time_reverse(p), y);
}

/// x0-averaged forward velocity (steps 0..T-1), y-averaged backward velocity
/// (steps 1..T) and the time marginals they are weighted against.
struct AveragedVelocities {
  VelocityField forward;
  VelocityField backward;
  std::vector<Density> marginals;
};

namespace detail {

// sum over anchors of mu(anchor) * P^{anchor}_j(z) * a grad pot^{anchor}_j(z),
// divided by the summed weights, for every step in `want`.
inline std::vector<VectorField> weighted_gradients(const ReciprocalMeasure& p, double sign,
                                                   const std::vector<int>& want) {
  const auto& g = p.grid();
  const std::size_t n = p.size();
  const int dim = g.dim();
  const double a = p.ref.kernel.diffusion();
  const std::size_t chunks = chunk_count(n);
  const std::size_t cells = want.size() * n;
  std::vector<std::vector<ExactSum>> wsum(chunks), vsum(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    wsum[c].resize(cells);
    vsum[c].resize(cells * std::size_t(dim));
    for (std::size_t x0 = c * n / chunks; x0 < (c + 1) * n / chunks; ++x0) {
      if (!p.charged(x0)) continue;
      auto s = start_messages(p, x0);
      for (std::size_t w = 0; w < want.size(); ++w) {
        const std::size_t j = std::size_t(want[w]);
        const ScalarField pot(s.backward[j]);
        if (!all_finite(pot)) throw DomainError("averaged velocity: potential not finite at step " + std::to_string(j));
        auto grad = periodic_gradient(pot, g);
        for (std::size_t z = 0; z < n; ++z) {
          const double wt = p.ref.initial[x0] * std::exp(s.forward[j][z] + s.backward[j][z] - s.log_z);
          wsum[c][w * n + z].add(wt);
          for (int axis = 0; axis < dim; ++axis)
            vsum[c][(w * n + z) * std::size_t(dim) + std::size_t(axis)].add(wt * sign * a * grad[axis][z]);
        }
      }
    }
  });
  std::vector<VectorField> out(want.size(), VectorField(dim, n));
  for (std::size_t w = 0; w < want.size(); ++w)
    for (std::size_t z = 0; z < n; ++z) {
      ExactSum ws;
      for (auto& part : wsum) ws.add(part[w * n + z]);
      const double total = ws.value();
      for (int axis = 0; axis < dim; ++axis) {
        ExactSum vs;
        for (auto& part : vsum) vs.add(part[(w * n + z) * std::size_t(dim) + std::size_t(axis)]);
        out[w][axis][z] = total > 0.0 ? vs.value() / total : 0.0;
      }
    }
  return out;
}

}  // namespace detail

/// Averaged velocities: forward weights P(X0 = x0 | X_t = z), backward weights
/// P(X1 = y | X_t = z) = mu0*(y) P*^{y}_{1-t}(z) / P_t(z).
inline AveragedVelocities averaged_velocities(const ReciprocalMeasure& p) {
  const int steps = p.ref.time.steps();
  auto m = marginals(p);
  auto rev = time_reverse(p, m);
  AveragedVelocities av;
  av.marginals = m.time;
  std::vector<int> fwd_steps, rev_steps;
  for (int j = 0; j < steps; ++j) fwd_steps.push_back(j);
  for (int j = 1; j <= steps; ++j) rev_steps.push_back(steps - j);
  auto f = detail::weighted_gradients(p, 1.0, fwd_steps);
  auto b = detail::weighted_gradients(rev, -1.0, rev_steps);
  av.forward.kind = VelocityKind::averaged;
  av.backward.kind = VelocityKind::averaged;
  av.backward.alpha = 1.0;
  for (int j = 0; j < steps; ++j) av.forward.push(j, std::move(f[std::size_t(j)]));
  for (int j = 1; j <= steps; ++j) av.backward.push(j, std::move(b[std::size_t(j) - 1]));
  return av;
}

/// Blend (1 - alpha) v_forward + alpha v_backward at the steps where every
/// needed part exists; alpha = 1/2 is the current velocity.
inline VelocityField alpha_velocity(const AveragedVelocities& av, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha_velocity: alpha must lie in [0, 1]");
  VelocityField v;
  v.kind = VelocityKind::averaged;
  v.alpha = alpha;
  const int steps = int(av.marginals.size()) - 1;
  for (int j = 0; j <= steps; ++j) {
    const bool need_f = alpha < 1.0, need_b = alpha > 0.0;
    if ((need_f && !av.forward.has(j)) || (need_b && !av.backward.has(j))) continue;
    const VectorField& ref = need_f ? av.forward.at(j) : av.backward.at(j);
    VectorField out(ref.dim(), ref.size());
    for (int axis = 0; axis < ref.dim(); ++axis)
      for (std::size_t z = 0; z < ref.size(); ++z) {
        double x = 0.0;
        if (need_f) x += (1.0 - alpha) * av.forward.at(j)[axis][z];
        if (need_b) x += alpha * av.backward.at(j)[axis][z];
        out[axis][z] = x;
      }
    v.push(j, std::move(out));
  }
  return v;
}

inline VectorField alpha_velocity(const ReciprocalMeasure& p, double alpha, int j) {
  return alpha_velocity(averaged_velocities(p), alpha).at(j);
}

namespace detail {

inline double pressure_proxy(const ReciprocalMeasure& p, int step, std::size_t z) {
  const int k = p.ref.time.constraint_at(step);
  return k < 0 ? 0.0 : p.theta[std::size_t(k)][z] / p.ref.time.dt();
}

}  // namespace detail

/// (psi(t_{j+1}) - psi(t_j))/dt + (a/2) Lap psi(t_j) + (a/2)|grad psi(t_j)|^2 + p,
/// p = theta_k/dt when t_{j+1} = t_k. Steps whose inputs are not finite are
/// left out.
inline ScalarSeries hjb_residual(const PotentialField& psi, const ReciprocalMeasure& p) {
  if (psi.side != PotentialSide::forward) throw ValidationError("hjb_residual: needs a psi field");
  const auto& g = p.grid();
  const double a = p.ref.kernel.diffusion(), dt = p.ref.time.dt();
  ScalarSeries out;
  for (int j = 0; j + 1 < int(psi.values.size()); ++j) {
    const auto& cur = psi.values[std::size_t(j)];
    const auto& next = psi.values[std::size_t(j) + 1];
    if (!detail::all_finite(cur) || !detail::all_finite(next)) continue;
    auto lap = periodic_laplacian(cur, g);
    auto grad = periodic_gradient(cur, g);
    ScalarField r(g.size());
    for (std::size_t z = 0; z < g.size(); ++z) {
      double sq = 0.0;
      for (int axis = 0; axis < g.dim(); ++axis) sq += grad[axis][z] * grad[axis][z];
      r[z] = (next[z] - cur[z]) / dt + 0.5 * a * lap[z] + 0.5 * a * sq + detail::pressure_proxy(p, j + 1, z);
    }
    out.push(j, std::move(r));
  }
  return out;
}

/// Mirror image of hjb_residual for phi:
/// (phi(t_j) - phi(t_{j-1}))/dt - (a/2) Lap phi(t_j) + (a/2)|grad phi(t_j)|^2 + p,
/// p = theta_k/dt when t_{j-1} = t_k.
inline ScalarSeries phi_residual(const PotentialField& phi, const ReciprocalMeasure& p) {
  if (phi.side != PotentialSide::backward) throw ValidationError("phi_residual: needs a phi field");
  const auto& g = p.grid();
  const double a = p.ref.kernel.diffusion(), dt = p.ref.time.dt();
  ScalarSeries out;
  for (int j = 1; j < int(phi.values.size()); ++j) {
    const auto& cur = phi.values[std::size_t(j)];
    const auto& prev = phi.values[std::size_t(j) - 1];
    if (!detail::all_finite(cur) || !detail::all_finite(prev)) continue;
    auto lap = periodic_laplacian(cur, g);
    auto grad = periodic_gradient(cur, g);
    ScalarField r(g.size());
    for (std::size_t z = 0; z < g.size(); ++z) {
      double sq = 0.0;
      for (int axis = 0; axis < g.dim(); ++axis) sq += grad[axis][z] * grad[axis][z];
      r[z] = (cur[z] - prev[z]) / dt - 0.5 * a * lap[z] + 0.5 * a * sq + detail::pressure_proxy(p, j - 1, z);
    }
    out.push(j, std::move(r));
  }
  return out;
}

/// Burgers residual of the backward velocity v = a grad phi:
/// (v(t_j) - v(t_{j-1}))/dt + (v . grad) v - (a/2) Lap v + a grad p, with the
/// same p as phi_residual.
inline Series<VectorField> burgers_residual(const PotentialField& phi, const ReciprocalMeasure& p) {
  if (phi.side != PotentialSide::backward) throw ValidationError("burgers_residual: needs a phi field");
  const auto& g = p.grid();
  const double a = p.ref.kernel.diffusion(), dt = p.ref.time.dt();
  const int dim = g.dim();
  auto v = backward_velocity(phi, g, a);
  Series<VectorField> out;
  for (int j = 1; j < int(phi.values.size()); ++j) {
    if (!v.has(j) || !v.has(j - 1)) continue;
    const auto& cur = v.at(j);
    const auto& prev = v.at(j - 1);
    ScalarField press(g.size());
    for (std::size_t z = 0; z < g.size(); ++z) press[z] = detail::pressure_proxy(p, j - 1, z);
    auto gp = periodic_gradient(press, g);
    VectorField r(dim, g.size());
    std::vector<VectorField> dv;
    for (int c = 0; c < dim; ++c) dv.push_back(periodic_gradient(ScalarField(cur[c]), g));
    for (int c = 0; c < dim; ++c) {
      auto lap = periodic_laplacian(ScalarField(cur[c]), g);
      for (std::size_t z = 0; z < g.size(); ++z) {
        double adv = 0.0;
        for (int b = 0; b < dim; ++b) adv += cur[b][z] * dv[std::size_t(c)][b][z];
        r[c][z] = (cur[c][z] - prev[c][z]) / dt + adv - 0.5 * a * lap[z] + a * gp[c][z];
      }
    }
    out.push(j, std::move(r));
  }
  return out;
}

/// (mu_{j+1} - mu_j)/dt + div(mu_j v_j) - a (1/2 - alpha) Lap mu_j on continuum
/// densities mu = mass * N, at the steps where v is defined.
inline ScalarSeries continuity_residual(const std::vector<Density>& mu, const VelocityField& v, double alpha,
                                        double a, const TorusGrid& g, const TimeGrid& tg) {
  if (mu.size() != std::size_t(tg.steps()) + 1) throw ValidationError("continuity_residual: one density per time node");
  const double dt = tg.dt(), scale = double(g.size());
  ScalarSeries out;
  for (std::size_t w = 0; w < v.steps.size(); ++w) {
    const int j = v.steps[w];
    if (j + 1 > tg.steps()) continue;
    ScalarField cur(g.size()), next(g.size());
    for (std::size_t z = 0; z < g.size(); ++z) {
      cur[z] = mu[std::size_t(j)][z] * scale;
      next[z] = mu[std::size_t(j) + 1][z] * scale;
    }
    VectorField flux(g.dim(), g.size());
    for (int axis = 0; axis < g.dim(); ++axis)
      for (std::size_t z = 0; z < g.size(); ++z) flux[axis][z] = cur[z] * v.values[w][axis][z];
    auto div = periodic_divergence(flux, g);
    auto lap = periodic_laplacian(cur, g);
    ScalarField r(g.size());
    for (std::size_t z = 0; z < g.size(); ++z)
      r[z] = (next[z] - cur[z]) / dt + div[z] - a * (0.5 - alpha) * lap[z];
    out.push(j, std::move(r));
  }
  return out;
}

/// Max |value| over the steps whose time lies in [t_lo, t_hi].
inline double window_max(const ScalarSeries& s, const TimeGrid& tg, double t_lo, double t_hi) {
  double m = 0.0;
  for (std::size_t w = 0; w < s.steps.size(); ++w) {
    const double t = tg.time(s.steps[w]);
    if (t < t_lo - 1e-12 || t > t_hi + 1e-12) continue;
    for (double x : s.values[w].values) m = std::max(m, std::abs(x));
  }
  return m;
}

inline double window_max(const Series<VectorField>& s, const TimeGrid& tg, double t_lo, double t_hi) {
  double m = 0.0;
  for (std::size_t w = 0; w < s.steps.size(); ++w) {
    const double t = tg.time(s.steps[w]);
    if (t < t_lo - 1e-12 || t > t_hi + 1e-12) continue;
    for (const auto& comp : s.values[w].components)
      for (double x : comp) m = std::max(m, std::abs(x));
  }
  return m;
}

/// Max over the window of |u - v| on the steps both fields define.
inline double window_max_difference(const Series<VectorField>& u, const Series<VectorField>& v, const TimeGrid& tg,
                                    double t_lo, double t_hi) {
  double m = 0.0;
  for (std::size_t w = 0; w < u.steps.size(); ++w) {
    const int j = u.steps[w];
    const double t = tg.time(j);
    if (t < t_lo - 1e-12 || t > t_hi + 1e-12 || !v.has(j)) continue;
    const auto& a = u.values[w];
    const auto& b = v.at(j);
    for (int axis = 0; axis < a.dim(); ++axis)
      for (std::size_t z = 0; z < a.size(); ++z) m = std::max(m, std::abs(a[axis][z] - b[axis][z]));
  }
  return m;
}

}  // namespace bredinger
