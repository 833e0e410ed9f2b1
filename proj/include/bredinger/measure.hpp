#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "bredinger/errors.hpp"
#include "bredinger/exact_sum.hpp"
#include "bredinger/grid.hpp"
#include "bredinger/kernel.hpp"
#include "bredinger/parallel.hpp"

namespace bredinger {

/// Joint law of (X0, X1) as an N x N row-major table with cached marginals.
class Coupling {
 public:
  Coupling() = default;

  /// Validates nonnegativity and unit mass (within tol).
  static Coupling from_table(std::size_t n, std::vector<double> table, double tol = 1e-12) {
    if (table.size() != n * n)
      throw ValidationError("coupling: table has " + std::to_string(table.size()) + " entries, expected " +
                            std::to_string(n * n));
    ExactSum sum;
    for (double v : table) {
      if (!std::isfinite(v) || v < 0.0) throw ValidationError("coupling: entries must be finite and nonnegative");
      sum.add(v);
    }
    const double total = sum.value();
    if (std::abs(total - 1.0) > tol)
      throw ValidationError("coupling: total mass " + std::to_string(total) + ", expected 1");
    return Coupling(n, std::move(table));
  }

  /// No validation; used for computed tables such as P01.
  static Coupling unchecked(std::size_t n, std::vector<double> table) { return Coupling(n, std::move(table)); }

  std::size_t size() const { return n_; }
  double operator()(std::size_t x, std::size_t y) const { return table_[x * n_ + y]; }
  const std::vector<double>& table() const { return table_; }
  const Density& first() const { return first_; }
  const Density& second() const { return second_; }
  bool bistochastic() const { return bistochastic_; }

 private:
  Coupling(std::size_t n, std::vector<double> table) : n_(n), table_(std::move(table)) {
    std::vector<ExactSum> fs(n), ss(n);
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < n; ++y) {
        fs[x].add(table_[x * n + y]);
        ss[y].add(table_[x * n + y]);
      }
    std::vector<double> f(n), s(n);
    for (std::size_t i = 0; i < n; ++i) {
      f[i] = fs[i].value();
      s[i] = ss[i].value();
    }
    first_ = Density(std::move(f));
    second_ = Density(std::move(s));
    bistochastic_ = first_.is_uniform(1e-10) && second_.is_uniform(1e-10);
  }

  std::size_t n_ = 0;
  std::vector<double> table_;
  Density first_, second_;
  bool bistochastic_ = false;
};

/// Total-variation distance: half the L1 distance of the masses.
inline double tv_distance(const Density& p, const Density& q) {
  if (p.size() != q.size()) throw ValidationError("tv_distance: size mismatch");
  ExactSum s;
  for (std::size_t i = 0; i < p.size(); ++i) s.add(std::abs(p[i] - q[i]));
  return 0.5 * s.value();
}

inline double tv_distance(const Coupling& p, const Coupling& q) {
  if (p.size() != q.size()) throw ValidationError("tv_distance: size mismatch");
  ExactSum s;
  for (std::size_t i = 0; i < p.table().size(); ++i) s.add(std::abs(p.table()[i] - q.table()[i]));
  return 0.5 * s.value();
}

/// H(p | q) for discrete laws with 0 log 0 = 0; +inf when p charges a q-null node.
inline double discrete_entropy(const std::vector<double>& p, const std::vector<double>& q) {
  ExactSum h;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    h.add(p[i] * std::log(p[i] / q[i]));
  }
  return h.value();
}

/// Reference Markov chain: transition kernel over the time grid, started from
/// an initial law (uniform unless overridden).
struct ReferenceChain {
  TransitionKernel kernel;
  TimeGrid time;
  Density initial;

  ReferenceChain() = default;
  ReferenceChain(const TorusGrid& grid, double diffusion, TimeGrid t)
      : kernel(grid, diffusion, t.dt()), time(std::move(t)), initial(Density::uniform(grid.size())) {}
  ReferenceChain(const TorusGrid& grid, double diffusion, TimeGrid t, Density mu0)
      : kernel(grid, diffusion, t.dt()), time(std::move(t)), initial(std::move(mu0)) {
    if (initial.size() != grid.size()) throw ValidationError("reference chain: initial law has wrong size");
  }

  const TorusGrid& grid() const { return kernel.grid(); }
  std::size_t size() const { return kernel.grid().size(); }

  /// Endpoint law R01(x, y) = mu0(x) K^T(x, y) of the chain.
  std::vector<double> endpoint_law() const {
    const auto lp = kernel.log_power(time.steps());
    const std::size_t n = size();
    std::vector<double> r(n * n);
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < n; ++y) r[x * n + y] = initial[x] * std::exp(lp[grid().displacement(x, y)]);
    return r;
  }
};

/// Path law P = exp(eta(X0, X1) + sum_k theta_k(X_{t_k}) - logZ(X0)) R^{mu0},
/// normalized per start node. Conditioned on X0 it is a Markov chain.
struct ReciprocalMeasure {
  ReferenceChain ref;
  /// N x N endpoint potential, row = start node. -inf forbids a pair.
  std::vector<double> eta;
  /// One potential per constraint time, in constraint order.
  std::vector<ScalarField> theta;
  /// Per-start log normalizers; -inf on starts without initial mass.
  std::vector<double> log_z;

  std::size_t size() const { return ref.size(); }
  const TorusGrid& grid() const { return ref.grid(); }
  double eta_at(std::size_t x0, std::size_t y) const { return eta[x0 * size() + y]; }
  bool charged(std::size_t x0) const { return ref.initial[x0] > 0.0; }
};

/// Log-domain forward and backward messages of the chain started at one node.
///   forward[j](z)  = log E_R[ 1{X_j = z} exp(sum_{t_k <= t_j} theta_k) | X0 = x0 ]
///   backward[j](z) = log E_R[ exp(eta(x0, X1) + sum_{t_k > t_j} theta_k) | X_j = z ]
/// backward[j] is the potential psi^{x0}(t_j, .) after the jump at t_j.
struct StartMessages {
  std::vector<std::vector<double>> forward;
  std::vector<std::vector<double>> backward;
  double log_z = kNegInf;
};

namespace detail {

inline void forward_pass(const ReciprocalMeasure& p, std::size_t x0, std::vector<std::vector<double>>& fwd) {
  const auto& tg = p.ref.time;
  const std::size_t n = p.size();
  fwd.resize(std::size_t(tg.steps()) + 1);
  fwd[0].assign(n, kNegInf);
  fwd[0][x0] = 0.0;
  for (int j = 1; j <= tg.steps(); ++j) {
    auto& cur = fwd[std::size_t(j)];
    cur.resize(n);
    p.ref.kernel.apply_log(fwd[std::size_t(j) - 1], cur);
    if (int k = tg.constraint_at(j); k >= 0) {
      const auto& th = p.theta[std::size_t(k)].values;
      for (std::size_t z = 0; z < n; ++z) cur[z] += th[z];
    }
  }
}

inline void backward_pass(const ReciprocalMeasure& p, std::size_t x0, std::vector<std::vector<double>>& bwd) {
  const auto& tg = p.ref.time;
  const std::size_t n = p.size();
  const int steps = tg.steps();
  bwd.resize(std::size_t(steps) + 1);
  bwd[std::size_t(steps)].assign(p.eta.begin() + std::ptrdiff_t(x0 * n), p.eta.begin() + std::ptrdiff_t((x0 + 1) * n));
  std::vector<double> pre(n);
  for (int j = steps - 1; j >= 0; --j) {
    const auto& next = bwd[std::size_t(j) + 1];
    pre = next;
    if (int k = tg.constraint_at(j + 1); k >= 0) {
      const auto& th = p.theta[std::size_t(k)].values;
      for (std::size_t z = 0; z < n; ++z) pre[z] += th[z];
    }
    bwd[std::size_t(j)].resize(n);
    p.ref.kernel.apply_log(pre, bwd[std::size_t(j)]);
  }
}

inline double endpoint_log_z(const ReciprocalMeasure& p, std::size_t x0, const std::vector<double>& last_forward) {
  const std::size_t n = p.size();
  std::vector<double> v(n);
  for (std::size_t y = 0; y < n; ++y) v[y] = last_forward[y] + p.eta[x0 * n + y];
  return log_sum_exp(v);
}

inline void check_shapes(const ReciprocalMeasure& p) {
  const std::size_t n = p.size();
  if (p.eta.size() != n * n) throw ValidationError("measure: eta table has wrong size");
  if (p.theta.size() != p.ref.time.constraint_count())
    throw ValidationError("measure: one theta field per constraint time required");
  for (const auto& th : p.theta)
    if (th.size() != n) throw ValidationError("measure: theta field has wrong size");
  for (double v : p.eta)
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
      throw DomainError("measure: eta entries must lie in [-inf, inf)");
  for (const auto& th : p.theta)
    for (double v : th.values)
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw DomainError("measure: theta entries must lie in [-inf, inf)");
}

/// Contiguous ranges of start nodes, one per worker. Reductions over starts
/// use exact accumulators, so the split never affects results.
inline std::size_t chunk_count(std::size_t n) {
  return std::max<std::size_t>(1, std::min<std::size_t>(n, static_cast<std::size_t>(thread_count())));
}

inline void raise_if_infeasible(const std::vector<char>& dead) {
  for (std::size_t x0 = 0; x0 < dead.size(); ++x0)
    if (dead[x0])
      throw InfeasibleError("measure: potentials kill all mass from start node " + std::to_string(x0) +
                            " (Z(x0) = 0)");
}

}  // namespace detail

inline StartMessages start_messages(const ReciprocalMeasure& p, std::size_t x0) {
  detail::check_shapes(p);
  StartMessages s;
  detail::forward_pass(p, x0, s.forward);
  detail::backward_pass(p, x0, s.backward);
  s.log_z = detail::endpoint_log_z(p, x0, s.forward.back());
  return s;
}

/// Recomputes the per-start log normalizers with one forward pass per start.
inline void normalize(ReciprocalMeasure& p) {
  detail::check_shapes(p);
  const std::size_t n = p.size();
  p.log_z.assign(n, kNegInf);
  std::vector<char> dead(n, 0);
  parallel_for(n, [&](std::size_t x0) {
    if (!p.charged(x0)) return;
    std::vector<std::vector<double>> fwd;
    detail::forward_pass(p, x0, fwd);
    p.log_z[x0] = detail::endpoint_log_z(p, x0, fwd.back());
    if (p.log_z[x0] == kNegInf) dead[x0] = 1;
  });
  detail::raise_if_infeasible(dead);
}

/// Reference measure itself: zero potentials.
inline ReciprocalMeasure make_reference_measure(const ReferenceChain& ref) {
  ReciprocalMeasure p;
  p.ref = ref;
  p.eta.assign(ref.size() * ref.size(), 0.0);
  p.theta.assign(ref.time.constraint_count(), ScalarField(ref.size(), 0.0));
  normalize(p);
  return p;
}

struct Marginals {
  /// P_{t_j} for j = 0..T.
  std::vector<Density> time;
  /// P01.
  Coupling endpoint;
  std::vector<double> log_z;
  /// Per constraint k, the N x N table P(X_{t_k} = z | X0 = x0), row x0.
  /// Rows of starts without initial mass are zero.
  std::vector<std::vector<double>> constraint_conditionals;
};

/// Time marginals, endpoint coupling and constraint-time conditionals of P by
/// per-start forward-backward passes in the log domain.
inline Marginals marginals(const ReciprocalMeasure& p) {
  detail::check_shapes(p);
  const std::size_t n = p.size();
  const auto& tg = p.ref.time;
  const std::size_t times = std::size_t(tg.steps()) + 1;
  const std::size_t kc = tg.constraint_count();

  Marginals out;
  out.log_z.assign(n, kNegInf);
  out.constraint_conditionals.assign(kc, std::vector<double>(n * n, 0.0));
  std::vector<double> p01(n * n, 0.0);
  std::vector<char> dead(n, 0);

  const std::size_t chunks = detail::chunk_count(n);
  std::vector<std::vector<ExactSum>> partial(chunks);

  parallel_for(chunks, [&](std::size_t c) {
    StartMessages s;
    auto& acc = partial[c];
    acc.resize(times * n);
    for (std::size_t x0 = c * n / chunks; x0 < (c + 1) * n / chunks; ++x0) {
      if (!p.charged(x0)) continue;
      detail::forward_pass(p, x0, s.forward);
      detail::backward_pass(p, x0, s.backward);
      const double lz = detail::endpoint_log_z(p, x0, s.forward.back());
      out.log_z[x0] = lz;
      if (lz == kNegInf) {
        dead[x0] = 1;
        continue;
      }
      const double w = p.ref.initial[x0];
      for (std::size_t j = 0; j < times; ++j) {
        const auto& f = s.forward[j];
        const auto& g = s.backward[j];
        ExactSum* row = acc.data() + j * n;
        const int k = tg.constraint_at(int(j));
        double* cond = k >= 0 ? out.constraint_conditionals[std::size_t(k)].data() + x0 * n : nullptr;
        for (std::size_t z = 0; z < n; ++z) {
          const double cz = std::exp(f[z] + g[z] - lz);
          row[z].add(w * cz);
          if (cond) cond[z] = cz;
        }
      }
      const auto& last = s.forward.back();
      for (std::size_t y = 0; y < n; ++y) p01[x0 * n + y] = w * std::exp(last[y] + p.eta[x0 * n + y] - lz);
    }
  });
  detail::raise_if_infeasible(dead);

  std::vector<double> total(times * n);
  for (std::size_t i = 0; i < total.size(); ++i) {
    ExactSum sum;
    for (const auto& acc : partial) sum.add(acc[i]);
    total[i] = sum.value();
  }
  out.time.reserve(times);
  for (std::size_t j = 0; j < times; ++j)
    out.time.emplace_back(std::vector<double>(total.begin() + std::ptrdiff_t(j * n), total.begin() + std::ptrdiff_t((j + 1) * n)));
  out.endpoint = Coupling::unchecked(n, std::move(p01));
  return out;
}

/// Time marginals of P conditioned on X0 = x0.
inline std::vector<Density> conditional_marginals(const ReciprocalMeasure& p, std::size_t x0) {
  const auto s = start_messages(p, x0);
  if (s.log_z == kNegInf) throw InfeasibleError("measure: Z(x0) = 0 for start node " + std::to_string(x0));
  std::vector<Density> out;
  for (std::size_t j = 0; j < s.forward.size(); ++j) {
    std::vector<double> m(p.size());
    for (std::size_t z = 0; z < p.size(); ++z) m[z] = std::exp(s.forward[j][z] + s.backward[j][z] - s.log_z);
    out.emplace_back(std::move(m));
  }
  return out;
}

/// H(mu0 | R0) with R0 uniform.
inline double initial_entropy(const ReferenceChain& ref) {
  return discrete_entropy(ref.initial.mass, Density::uniform(ref.size()).mass);
}

/// H(P | R) from the potential form:
///   H(mu0|R0) + <eta, P01> + sum_k <theta_k, P_{t_k}> - <logZ, mu0>,
/// with 0 * (-inf) = 0.
inline double relative_entropy(const ReciprocalMeasure& p, const Marginals& m) {
  const std::size_t n = p.size();
  const auto& tg = p.ref.time;
  ExactSum h;
  h.add(initial_entropy(p.ref));
  auto pair = [](double mass, double pot, const char* what) {
    if (mass <= 0.0) return 0.0;
    if (pot == kNegInf)
      throw InconsistencyError(std::string("relative_entropy: mass on a forbidden ") + what + " entry");
    return mass * pot;
  };
  for (std::size_t i = 0; i < n * n; ++i) h.add(pair(m.endpoint.table()[i], p.eta[i], "eta"));
  for (std::size_t k = 0; k < tg.constraint_count(); ++k) {
    const auto& mk = m.time[std::size_t(tg.constraint_steps()[k])];
    for (std::size_t z = 0; z < n; ++z) h.add(pair(mk[z], p.theta[k][z], "theta"));
  }
  for (std::size_t x0 = 0; x0 < n; ++x0)
    if (p.charged(x0)) h.add(-p.ref.initial[x0] * m.log_z[x0]);
  return h.value();
}

inline double relative_entropy(const ReciprocalMeasure& p) { return relative_entropy(p, marginals(p)); }

}  // namespace bredinger
