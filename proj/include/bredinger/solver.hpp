#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "bredinger/errors.hpp"
#include "bredinger/exact_sum.hpp"
#include "bredinger/measure.hpp"

namespace bredinger {

/// Finite-constraint entropy minimization problem: minimize H(P | R) subject
/// to P01 = pi and P_{t_k} = targets[k] at every constraint time.
struct ProblemSpec {
  ReferenceChain ref;
  Coupling pi;
  std::vector<Density> targets;
  double tol = 1e-9;
  int max_sweeps = 500;

  ProblemSpec() = default;
  ProblemSpec(ReferenceChain r, Coupling p, std::vector<Density> t, double tolerance = 1e-9, int sweeps = 500)
      : ref(std::move(r)), pi(std::move(p)), targets(std::move(t)), tol(tolerance), max_sweeps(sweeps) {
    validate();
  }

  void validate() const {
    const std::size_t n = ref.size();
    if (pi.size() != n) throw ValidationError("problem: coupling size does not match grid");
    if (targets.size() != ref.time.constraint_count())
      throw ValidationError("problem: " + std::to_string(targets.size()) + " targets for " +
                            std::to_string(ref.time.constraint_count()) + " constraint times");
    for (const auto& t : targets)
      if (t.size() != n) throw ValidationError("problem: target density has wrong size");
    if (!(tol > 0.0)) throw ValidationError("problem: tol must be > 0");
    if (max_sweeps < 1) throw ValidationError("problem: max_sweeps must be >= 1");
  }
};

struct FeasibilityReport {
  bool ok = true;
  std::vector<std::string> violations;
  /// H(pi | R01).
  double coupling_entropy = 0.0;
};

/// Checks pi << R01, pi_0 = mu0 (TV within tol) and that every target is a
/// normalized density; reports H(pi | R01).
inline FeasibilityReport feasibility_check(const ProblemSpec& spec) {
  spec.validate();
  FeasibilityReport rep;
  const auto r01 = spec.ref.endpoint_law();
  const auto& t = spec.pi.table();
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] > 0.0 && !(r01[i] > 0.0)) {
      rep.violations.push_back("pi charges a pair the reference chain cannot reach");
      break;
    }
  if (const double d = tv_distance(spec.pi.first(), spec.ref.initial); d > spec.tol)
    rep.violations.push_back("pi first marginal differs from the initial law (tv " + std::to_string(d) + ")");
  for (std::size_t k = 0; k < spec.targets.size(); ++k) {
    ExactSum s;
    bool bad = false;
    for (double v : spec.targets[k].mass) {
      bad = bad || !std::isfinite(v) || v < 0.0;
      s.add(v);
    }
    if (bad || std::abs(s.value() - 1.0) > 1e-12)
      rep.violations.push_back("target " + std::to_string(k) + " at t=" +
                               std::to_string(spec.ref.time.time(spec.ref.time.constraint_steps()[k])) +
                               " is not a normalized density");
  }
  rep.ok = rep.violations.empty();
  rep.coupling_entropy = discrete_entropy(t, r01);
  return rep;
}

inline void require_feasible(const ProblemSpec& spec) {
  auto rep = feasibility_check(spec);
  if (!rep.ok) {
    std::string msg = "infeasible problem:";
    for (const auto& v : rep.violations) msg += " " + v + ";";
    throw InfeasibleError(msg);
  }
}

/// Zero potentials over the problem's reference chain.
inline ReciprocalMeasure initial_measure(const ProblemSpec& spec) { return make_reference_measure(spec.ref); }

/// Endpoint calibration: eta += log pi - log P01, -inf where pi = 0.
/// With pi_0 = mu0 the recomputed P01 equals pi.
inline void ipf_update_endpoint(ReciprocalMeasure& p, const Coupling& pi, const Marginals& m) {
  const std::size_t n = p.size();
  if (pi.size() != n) throw ValidationError("ipf endpoint: coupling size does not match grid");
  for (std::size_t x0 = 0; x0 < n; ++x0)
    for (std::size_t y = 0; y < n; ++y) {
      const std::size_t i = x0 * n + y;
      const double target = pi.table()[i];
      if (target <= 0.0) {
        p.eta[i] = kNegInf;
        continue;
      }
      const double cur = m.endpoint.table()[i];
      if (!(cur > 0.0))
        throw InfeasibleError("ipf endpoint: P01 vanishes where pi > 0 at pair (" + std::to_string(x0) + ", " +
                              std::to_string(y) + ")");
      p.eta[i] += std::log(target) - std::log(cur);
    }
  normalize(p);
}

inline void ipf_update_endpoint(ReciprocalMeasure& p, const Coupling& pi) { ipf_update_endpoint(p, pi, marginals(p)); }

/// Outcome of the inner scaling of a marginal update.
struct ScalingStats {
  int iterations = 0;
  double residual = 0.0;
};

/// Exact calibration of the time-t_k marginal: theta_k += log v where v
/// solves the scaling equations
///   mu(z) = v(z) sum_x0 mu0(x0) C(x0, z) u(x0),  u(x0) = 1 / sum_z C(x0, z) v(z),
/// with C the conditional law of X_{t_k} given X0. The first iteration is the
/// plain proportional step v = mu / P_{t_k}; it is exact only when
/// per-start renormalization leaves the reweighted marginal unchanged, so the
/// scaling is iterated to machine precision. The result maximizes the dual in
/// theta_k.
inline ScalingStats ipf_update_marginal(ReciprocalMeasure& p, std::size_t k, const Density& mu, const Marginals& m) {
  const std::size_t n = p.size();
  if (k >= p.theta.size()) throw ValidationError("ipf marginal: constraint index out of range");
  if (mu.size() != n) throw ValidationError("ipf marginal: target has wrong size");
  const auto& c = m.constraint_conditionals[k];
  const auto& mu0 = p.ref.initial;
  const auto& pk = m.time[std::size_t(p.ref.time.constraint_steps()[k])];
  for (std::size_t z = 0; z < n; ++z)
    if (mu[z] > 0.0 && !(pk[z] > 0.0))
      throw InfeasibleError("ipf marginal: P vanishes where the target at constraint " + std::to_string(k) +
                            " charges node " + std::to_string(z));

  constexpr int kMaxInner = 10000;
  std::vector<double> v(n), u(n, 0.0), s(n), model(n);
  for (std::size_t z = 0; z < n; ++z) v[z] = mu[z] > 0.0 ? 1.0 : 0.0;
  ScalingStats stats;
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < kMaxInner; ++it) {
    parallel_for(n, [&](std::size_t x0) {
      if (!(mu0[x0] > 0.0)) return;
      ExactSum r;
      for (std::size_t z = 0; z < n; ++z) r.add(c[x0 * n + z] * v[z]);
      u[x0] = 1.0 / r.value();
    });
    parallel_for(n, [&](std::size_t z) {
      ExactSum col;
      for (std::size_t x0 = 0; x0 < n; ++x0)
        if (mu0[x0] > 0.0) col.add(mu0[x0] * c[x0 * n + z] * u[x0]);
      s[z] = col.value();
      model[z] = v[z] * s[z];
    });
    const double err = tv_distance(Density(model), mu);
    stats.iterations = it + 1;
    stats.residual = err;
    if (err <= 1e-15 || (err < 1e-13 && err >= prev)) break;
    prev = err;
    for (std::size_t z = 0; z < n; ++z) {
      if (!(mu[z] > 0.0)) continue;
      if (!(s[z] > 0.0)) throw InfeasibleError("ipf marginal: scaling lost support at node " + std::to_string(z));
      v[z] = mu[z] / s[z];
    }
  }
  auto& th = p.theta[k].values;
  for (std::size_t z = 0; z < n; ++z) th[z] = v[z] > 0.0 ? th[z] + std::log(v[z]) : kNegInf;
  normalize(p);
  return stats;
}

inline ScalingStats ipf_update_marginal(ReciprocalMeasure& p, std::size_t k, const Density& mu) {
  return ipf_update_marginal(p, k, mu, marginals(p));
}

/// Dual objective J = sum_k <theta_k, mu_k> + <eta, pi> - sum_x0 mu0(x0) logZ(x0),
/// the log normalizers recomputed by one forward pass per start.
inline double dual_objective(const ReciprocalMeasure& p, const ProblemSpec& spec) {
  ReciprocalMeasure q = p;
  normalize(q);
  const std::size_t n = p.size();
  ExactSum j;
  auto pair = [&](double mass, double pot) {
    if (mass > 0.0) j.add(mass * pot);
  };
  for (std::size_t k = 0; k < spec.targets.size(); ++k)
    for (std::size_t z = 0; z < n; ++z) pair(spec.targets[k][z], q.theta[k][z]);
  for (std::size_t i = 0; i < n * n; ++i) pair(spec.pi.table()[i], q.eta[i]);
  for (std::size_t x0 = 0; x0 < n; ++x0) pair(q.ref.initial[x0], -q.log_z[x0]);
  return j.value();
}

/// Max over constraints of the TV error of fresh marginals.
inline double constraint_error(const Marginals& m, const ProblemSpec& spec) {
  double err = tv_distance(m.endpoint, spec.pi);
  for (std::size_t k = 0; k < spec.targets.size(); ++k)
    err = std::max(err, tv_distance(m.time[std::size_t(spec.ref.time.constraint_steps()[k])], spec.targets[k]));
  return err;
}

/// Gauge fixing: subtract from each theta_k its target-weighted mean and add
/// it to eta, then move the pi-weighted mean of each eta row into logZ.
inline void fix_gauge(ReciprocalMeasure& p, const ProblemSpec& spec) {
  const std::size_t n = p.size();
  ExactSum shift;
  for (std::size_t k = 0; k < p.theta.size(); ++k) {
    ExactSum mean;
    for (std::size_t z = 0; z < n; ++z)
      if (spec.targets[k][z] > 0.0) mean.add(spec.targets[k][z] * p.theta[k][z]);
    const double c = mean.value();
    for (auto& v : p.theta[k].values) v -= c;
    shift.add(c);
  }
  const double total = shift.value();
  for (std::size_t x0 = 0; x0 < n; ++x0) {
    const double row_mass = spec.pi.first()[x0];
    ExactSum mean;
    for (std::size_t y = 0; y < n; ++y) {
      double& e = p.eta[x0 * n + y];
      e += total;
      if (spec.pi(x0, y) > 0.0) mean.add(spec.pi(x0, y) * e);
    }
    if (!(row_mass > 0.0)) continue;
    const double c = mean.value() / row_mass;
    for (std::size_t y = 0; y < n; ++y) p.eta[x0 * n + y] -= c;
  }
  normalize(p);
}

struct SweepRecord {
  double error = 0.0;
  double dual = 0.0;
};

struct SolveReport {
  bool converged = false;
  int sweeps = 0;
  double max_error = 0.0;
  /// H(P | R).
  double entropy = 0.0;
  /// H(P | R^{mu0}) = H(P | R) - H(mu0 | R0).
  double conditional_entropy = 0.0;
  double dual = 0.0;
  /// H(P | R^{mu0}) - J.
  double gap = 0.0;
  /// Bound C with |gap| <= C * max_error: twice the sup norm of the finite
  /// potentials on the supports of the targets.
  double gap_constant = 0.0;
  std::vector<SweepRecord> history;
  /// J after every single update, in order.
  std::vector<double> update_trace;
  /// Inner scaling iterations of each marginal update.
  std::vector<int> inner_iterations;
};

struct SolveOptions {
  /// Update order within a sweep: -1 is the endpoint, k >= 0 a constraint
  /// index. Empty means endpoint first, then constraints in time order.
  std::vector<int> order;
  /// Record J after every update (one extra forward pass per start each).
  bool trace_updates = true;
};

struct SolveResult {
  ReciprocalMeasure measure;
  SolveReport report;
};

inline SolveReport summarize(const ReciprocalMeasure& p, const ProblemSpec& spec, const Marginals& m) {
  SolveReport r;
  r.max_error = constraint_error(m, spec);
  r.entropy = relative_entropy(p, m);
  r.conditional_entropy = r.entropy - initial_entropy(p.ref);
  r.dual = dual_objective(p, spec);
  r.gap = r.conditional_entropy - r.dual;
  double sup = 0.0;
  const std::size_t n = p.size();
  for (std::size_t i = 0; i < n * n; ++i)
    if (spec.pi.table()[i] > 0.0 || m.endpoint.table()[i] > 0.0) sup = std::max(sup, std::abs(p.eta[i]));
  for (std::size_t k = 0; k < p.theta.size(); ++k) {
    double s = 0.0;
    for (std::size_t z = 0; z < n; ++z)
      if (spec.targets[k][z] > 0.0) s = std::max(s, std::abs(p.theta[k][z]));
    sup += s;
  }
  r.gap_constant = 2.0 * sup;
  return r;
}

/// Cyclic IPF sweeps until the max TV error of fresh marginals drops below
/// tol or max_sweeps is reached.
inline SolveResult solve(const ProblemSpec& spec, const SolveOptions& opts = {}) {
  require_feasible(spec);
  std::vector<int> order = opts.order;
  if (order.empty()) {
    order.push_back(-1);
    for (std::size_t k = 0; k < spec.targets.size(); ++k) order.push_back(int(k));
  }
  for (int o : order)
    if (o < -1 || o >= int(spec.targets.size())) throw ValidationError("solve: bad update order entry");

  SolveResult res;
  auto& p = res.measure;
  p = initial_measure(spec);
  std::vector<double> trace;
  std::vector<int> inner;
  std::vector<SweepRecord> history;
  Marginals m = marginals(p);
  int sweeps = 0;
  bool converged = false;
  double err = constraint_error(m, spec);
  for (int sweep = 1; sweep <= spec.max_sweeps; ++sweep) {
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i > 0) m = marginals(p);
      if (order[i] < 0) {
        ipf_update_endpoint(p, spec.pi, m);
      } else {
        const auto k = std::size_t(order[i]);
        inner.push_back(ipf_update_marginal(p, k, spec.targets[k], m).iterations);
      }
      if (opts.trace_updates) trace.push_back(dual_objective(p, spec));
    }
    fix_gauge(p, spec);
    m = marginals(p);
    err = constraint_error(m, spec);
    history.push_back({err, dual_objective(p, spec)});
    sweeps = sweep;
    if (err < spec.tol) {
      converged = true;
      break;
    }
  }
  res.report = summarize(p, spec, m);
  res.report.converged = converged;
  res.report.sweeps = sweeps;
  res.report.history = std::move(history);
  res.report.update_trace = std::move(trace);
  res.report.inner_iterations = std::move(inner);
  return res;
}

}  // namespace bredinger
