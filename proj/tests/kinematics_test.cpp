#include <gtest/gtest.h>

#include <cfloat>
#include <cmath>
#include <vector>

#include "bredinger/coupling.hpp"
#include "bredinger/kinematics.hpp"
#include "bredinger/solver.hpp"
#include "oracles.hpp"

using namespace bredinger;
using namespace bredinger::oracle;

namespace {

ReciprocalMeasure solved(const TorusGrid& g, int steps, std::vector<double> times, Coupling pi, double a,
                         double tol = 1e-11) {
  auto tg = TimeGrid::from_times(steps, times);
  ReferenceChain ref(g, a, tg);
  std::vector<Density> targets(tg.constraint_count(), Density::uniform(g.size()));
  ProblemSpec spec(ref, std::move(pi), std::move(targets), tol);
  spec.max_sweeps = 2000;
  auto res = solve(spec, {});
  EXPECT_TRUE(res.report.converged);
  return res.measure;
}

ReciprocalMeasure reflection_instance(int m, double a) {
  TorusGrid g(1, m);
  return solved(g, m / 2, {0.25, 0.5, 0.75}, reflection_coupling(g), a);
}

ReciprocalMeasure shift_instance(int m) {
  TorusGrid g(1, m);
  return solved(g, m / 2, {0.5}, shift_coupling(g, std::size_t(m / 4)), 1.0);
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double max_abs(const VectorField& v) {
  double m = 0.0;
  for (const auto& c : v.components) m = std::max(m, max_abs(c));
  return m;
}

// Continuum log density of the wrapped Gaussian, by direct image summation.
double log_wrapped(double d, double variance) {
  double s = 0.0;
  for (int k = -60; k <= 60; ++k) s += std::exp(-(d + k) * (d + k) / (2.0 * variance));
  return std::log(s / std::sqrt(2.0 * M_PI * variance));
}

}  // namespace

TEST(Kinematics, ZeroPotentialsGiveZeroFields) {
  TorusGrid g(1, 16);
  ReferenceChain ref(g, 1.0, TimeGrid::from_times(8, {0.5}));
  auto p = make_reference_measure(ref);
  for (std::size_t x : {0u, 5u}) {
    auto psi = psi_field(p, x);
    auto phi = phi_field(p, x);
    for (int j = 0; j <= 8; ++j) {
      EXPECT_LE(max_abs(psi.values[std::size_t(j)].values), 1e-15);
      EXPECT_LE(max_abs(phi.values[std::size_t(j)].values), 1e-15);
    }
    for (const auto& v : forward_velocity(psi, g, 1.0).values) EXPECT_LE(max_abs(v), 1e-13);
    for (const auto& v : nelson_forward_field(p, x).values) EXPECT_LE(max_abs(v), 1e-14);
    for (const auto& r : hjb_residual(psi, p).values) EXPECT_LE(max_abs(r.values), 1e-12);
    for (const auto& r : phi_residual(phi, p).values) EXPECT_LE(max_abs(r.values), 1e-12);
    for (const auto& r : burgers_residual(phi, p).values) EXPECT_LE(max_abs(r), 1e-10);
  }
  for (std::size_t z = 0; z < 16; ++z) EXPECT_LE(std::abs(nelson_velocity(p, 3, 2, z)[0]), 1e-14);

  auto av = averaged_velocities(p);
  for (double alpha : {0.0, 0.5, 1.0}) {
    auto v = alpha_velocity(av, alpha);
    for (const auto& f : v.values) EXPECT_LE(max_abs(f), 1e-13);
    auto c = continuity_residual(av.marginals, v, alpha, 1.0, g, ref.time);
    for (const auto& r : c.values) EXPECT_LE(max_abs(r.values), 1e-12);
  }
}

TEST(Kinematics, PsiBoundaryAndNormalizer) {
  for (bool sparse : {false, true}) {
    auto p = random_measure(21, {1, 3}, sparse);
    for (std::size_t x0 = 0; x0 < 8; ++x0) {
      if (!p.charged(x0)) {
        EXPECT_THROW(psi_field(p, x0), InfeasibleError);
        continue;
      }
      auto psi = psi_field(p, x0);
      for (std::size_t y = 0; y < 8; ++y) EXPECT_EQ(psi.values.back()[y], p.eta_at(x0, y));
      EXPECT_NEAR(psi.values.front()[x0], p.log_z[x0], 1e-10);
    }
  }
}

TEST(Kinematics, PsiMatchesDoobFactorOfEnumeration) {
  auto p = random_measure(5, {2}, false);
  auto e = enumerate(p);
  for (std::size_t x0 : {0u, 3u, 7u}) {
    auto psi = psi_field(p, x0);
    for (int j = 0; j <= 4; ++j) {
      std::vector<double> pmass(1u << 15, 0.0), rmass(1u << 15, 0.0);
      std::vector<std::vector<std::size_t>> rep(pmass.size());
      for (std::size_t i = 0; i < e.paths.size(); ++i) {
        if (e.paths[i][0] != x0) continue;
        std::size_t c = 0;
        for (int s = 0; s <= j; ++s) c = c * 8 + e.paths[i][std::size_t(s)];
        pmass[c] += e.p[i] / p.ref.initial[x0];
        rmass[c] += e.r[i] * 8.0;
        rep[c] = e.paths[i];
      }
      for (std::size_t c = 0; c < pmass.size(); ++c) {
        if (rmass[c] == 0.0) continue;
        const auto& path = rep[c];
        double pot = psi.values[std::size_t(j)][path[std::size_t(j)]] - p.log_z[x0];
        if (j >= 2) pot += p.theta[0][path[2]];
        EXPECT_NEAR(std::exp(pot), pmass[c] / rmass[c], 1e-10 * std::max(1.0, std::exp(pot)));
      }
    }
  }
}

TEST(Kinematics, JumpLedgerMatchesTheta) {
  auto p = reflection_instance(16, 0.1);
  for (std::size_t x : {0u, 3u, 9u}) {
    auto psi = psi_field(p, x);
    auto phi = phi_field(p, x);
    ASSERT_EQ(psi.ledger.size(), 3u);
    ASSERT_EQ(phi.ledger.size(), 3u);
    EXPECT_LE(jump_defect(psi, p), 1e-14);
    EXPECT_LE(jump_defect(phi, p), 1e-14);
    EXPECT_LE(velocity_jump_defect(psi, p), 1e-13);
    EXPECT_LE(velocity_jump_defect(phi, p), 1e-13);
    for (const auto& e : psi.ledger) EXPECT_EQ(e.after.values, psi.values[std::size_t(e.step)].values);
    for (const auto& e : phi.ledger) EXPECT_EQ(e.after.values, phi.values[std::size_t(e.step)].values);
  }
}

TEST(Kinematics, BridgeDriftMatchesWrappedGaussianOracle) {
  const int m = 64, steps = 32;
  const double a = 0.1;
  TorusGrid g(1, m);
  std::vector<double> mu(m, 0.0), table(std::size_t(m * m), 0.0);
  mu[0] = 1.0;
  const std::size_t y = 20;
  table[y] = 1.0;
  ReferenceChain ref(g, a, TimeGrid(steps, {}), Density(mu));
  ProblemSpec spec(ref, Coupling::from_table(std::size_t(m), table, 1e-12), {}, 1e-12);
  auto p = solve(spec, {}).measure;
  auto v = forward_velocity(psi_field(p, 0), g, a);
  const double h = g.spacing();
  for (int j = 0; j <= 24; ++j) {
    const double var = a * (1.0 - ref.time.time(j));
    for (std::size_t z = 0; z < std::size_t(m); ++z) {
      const double d = double(int(y) - int(z)) * h;
      const double expect = a * (log_wrapped(d - h, var) - log_wrapped(d + h, var)) / (2.0 * h);
      EXPECT_NEAR(v.at(j)[0][z], expect, 1e-9 * std::max(1.0, std::abs(expect))) << "j=" << j << " z=" << z;
    }
  }
}

TEST(Kinematics, ReversalOfReferenceIsReference) {
  TorusGrid g(1, 16);
  ReferenceChain ref(g, 0.5, TimeGrid::from_times(8, {0.25, 0.5}));
  auto p = make_reference_measure(ref);
  auto q = time_reverse(p);
  EXPECT_LE(max_abs(q.eta), 1e-15);
  for (const auto& th : q.theta) EXPECT_LE(max_abs(th.values), 0.0);
  EXPECT_EQ(q.ref.time.constraint_steps(), (std::vector<int>{4, 6}));
  EXPECT_LE(relative_entropy(q), 1e-14);
}

TEST(Kinematics, ReversalInvolutionAndMirror) {
  auto p = reflection_instance(16, 0.1);
  const std::size_t n = p.size();
  auto rev = time_reverse(p);
  auto back = time_reverse(rev);
  ASSERT_EQ(back.theta.size(), p.theta.size());
  for (std::size_t k = 0; k < p.theta.size(); ++k) EXPECT_EQ(back.theta[k].values, p.theta[k].values);
  EXPECT_EQ(back.ref.time.constraint_steps(), p.ref.time.constraint_steps());
  // eta is recovered up to a per-start constant, which normalization absorbs.
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = 0; y < n; ++y) {
      if (p.eta_at(x, y) == kNegInf) {
        EXPECT_EQ(back.eta_at(x, y), kNegInf);
        continue;
      }
      EXPECT_NEAR(back.eta_at(x, y) - back.log_z[x], p.eta_at(x, y) - p.log_z[x], 1e-12);
    }
  auto mp = marginals(p), mr = marginals(rev), mb = marginals(back);
  const int steps = p.ref.time.steps();
  for (int j = 0; j <= steps; ++j) EXPECT_LE(tv_distance(mr.time[std::size_t(j)], mp.time[std::size_t(steps - j)]), 1e-12);
  std::vector<double> transposed(n * n);
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = 0; y < n; ++y) transposed[y * n + x] = mp.endpoint(x, y);
  EXPECT_LE(tv_distance(mr.endpoint, Coupling::unchecked(n, transposed)), 1e-12);
  EXPECT_LE(tv_distance(mb.endpoint, mp.endpoint), 1e-12);
  EXPECT_NEAR(relative_entropy(rev, mr), relative_entropy(p, mp), 1e-10);
}

TEST(Kinematics, PhiBoundaryIsNegatedEndpointPotential) {
  auto p = reflection_instance(16, 0.1);
  for (std::size_t y : {0u, 5u, 12u}) {
    auto phi = phi_field(p, y);
    for (std::size_t x = 0; x < p.size(); ++x) EXPECT_EQ(phi.values.front()[x], -(p.eta_at(x, y) - p.log_z[x]));
  }
  TorusGrid g(1, 12);
  auto r = make_reference_measure(ReferenceChain(g, 1.0, TimeGrid(6, {3})));
  for (std::size_t x = 0; x < 12; ++x) EXPECT_LE(std::abs(phi_field(r, 4).values.front()[x]), 1e-15);
}

TEST(Kinematics, BackwardNelsonIsMirroredForwardOfReversal) {
  auto p = reflection_instance(16, 0.1);
  auto rev = time_reverse(p);
  const int steps = p.ref.time.steps();
  for (std::size_t y : {2u, 7u}) {
    auto back = nelson_backward_field(p, y);
    auto fwd = nelson_forward_field(rev, y);
    for (int j = 1; j <= steps; ++j)
      for (std::size_t z = 0; z < p.size(); ++z) EXPECT_EQ(back.at(j)[0][z], -fwd.at(steps - j)[0][z]);
  }
}

TEST(Kinematics, NelsonMatchesGradientAwayFromTheEnd) {
  auto p = reflection_instance(32, 0.1);
  const double a = 0.1;
  const auto& g = p.grid();
  for (std::size_t x : {0u, 11u}) {
    auto fv = forward_velocity(psi_field(p, x), g, a);
    auto nv = nelson_forward_field(p, x);
    auto bv = backward_velocity(phi_field(p, x), g, a);
    auto bn = nelson_backward_field(p, x);
    EXPECT_LE(window_max_difference(nv, fv, p.ref.time, 0.0, 0.75), 0.15);
    EXPECT_LE(window_max_difference(bn, bv, p.ref.time, 0.25, 1.0), 0.15);
  }
  const auto e = nelson_velocity(p, 11, 3, 14);
  EXPECT_EQ(e[0], nelson_forward_field(p, 11).at(3)[0][14]);
}

TEST(Kinematics, NelsonRejectsZeroConditioningMass) {
  auto p = random_measure(9, {2}, true);
  EXPECT_THROW(nelson_velocity(p, 0, 2, 4), DomainError);
  EXPECT_THROW(nelson_velocity(p, 0, 4, 1), ValidationError);
  EXPECT_THROW(nelson_velocity(p, 6, 1, 1), InfeasibleError);
}

TEST(Kinematics, InteriorInfinitePotentialIsRejected) {
  TorusGrid g(1, 8);
  PotentialField f;
  f.values.assign(3, ScalarField(8, 0.0));
  f.values[1][2] = kNegInf;
  EXPECT_THROW(forward_velocity(f, g, 1.0), DomainError);
  f.values[1][2] = 0.0;
  f.values[2][2] = kNegInf;
  EXPECT_EQ(forward_velocity(f, g, 1.0).steps, (std::vector<int>{0, 1}));
  EXPECT_THROW(backward_velocity(f, g, 1.0), ValidationError);
}

TEST(Kinematics, AlphaBlendEndpoints) {
  auto p = reflection_instance(16, 0.1);
  auto av = averaged_velocities(p);
  const int steps = p.ref.time.steps();
  auto v0 = alpha_velocity(av, 0.0);
  auto v1 = alpha_velocity(av, 1.0);
  auto vh = alpha_velocity(av, 0.5);
  ASSERT_EQ(int(v0.steps.size()), steps);
  ASSERT_EQ(int(v1.steps.size()), steps);
  ASSERT_EQ(int(vh.steps.size()), steps - 1);
  for (int j = 0; j < steps; ++j) EXPECT_EQ(v0.at(j)[0], av.forward.at(j)[0]);
  for (int j = 1; j <= steps; ++j) EXPECT_EQ(v1.at(j)[0], av.backward.at(j)[0]);
  for (int j = 1; j < steps; ++j)
    for (std::size_t z = 0; z < p.size(); ++z)
      EXPECT_NEAR(vh.at(j)[0][z], 0.5 * (av.forward.at(j)[0][z] + av.backward.at(j)[0][z]), 1e-15);
  EXPECT_THROW(alpha_velocity(av, 1.5), ValidationError);

  // At t = 0 the forward average has a single contributing anchor.
  auto psi = psi_field(p, 5);
  EXPECT_NEAR(av.forward.at(0)[0][5], forward_velocity(psi, p.grid(), 0.1).at(0)[0][5], 1e-14);
}

TEST(Kinematics, AveragedVelocitiesIgnoreThreadCount) {
  auto p = reflection_instance(16, 0.1);
  set_thread_count(1);
  auto one = averaged_velocities(p);
  set_thread_count(5);
  auto five = averaged_velocities(p);
  set_thread_count(0);
  for (std::size_t w = 0; w < one.forward.values.size(); ++w) {
    EXPECT_EQ(one.forward.values[w][0], five.forward.values[w][0]);
    EXPECT_EQ(one.backward.values[w][0], five.backward.values[w][0]);
  }
}

TEST(Kinematics, ContinuityOnShiftInstanceAtRoundingFloor) {
  auto p = shift_instance(16);
  const auto& g = p.grid();
  auto av = averaged_velocities(p);
  const double floor = DBL_EPSILON / p.ref.time.dt();
  for (double alpha : {0.0, 0.5}) {
    auto c = continuity_residual(av.marginals, alpha_velocity(av, alpha), alpha, 1.0, g, p.ref.time);
    EXPECT_LE(window_max(c, p.ref.time, 0.0, 1.0), 10.0 * floor) << "alpha=" << alpha;
  }
}

TEST(Kinematics, ContinuityResidualConservesMass) {
  auto p = reflection_instance(32, 0.1);
  auto av = averaged_velocities(p);
  auto c = continuity_residual(av.marginals, alpha_velocity(av, 0.5), 0.5, 0.1, p.grid(), p.ref.time);
  for (const auto& r : c.values) EXPECT_LE(std::abs(ExactSum::sum(r.values)) / 32.0, 1e-12);
}

TEST(Kinematics, CurrentVelocityIsNotAGradient) {
  TorusGrid g(2, 8);
  auto p = solved(g, 4, {0.5}, rotation_coupling(g), 0.1, 1e-10);
  auto v = alpha_velocity(averaged_velocities(p), 0.5);
  double single = 0.0;
  for (std::size_t x = 0; x < g.size(); ++x) {
    for (const auto& f : forward_velocity(psi_field(p, x), g, 0.1).values)
      single = std::max(single, max_abs(periodic_curl(f, g).values));
    for (const auto& f : backward_velocity(phi_field(p, x), g, 0.1).values)
      single = std::max(single, max_abs(periodic_curl(f, g).values));
  }
  double current = 0.0;
  for (const auto& f : v.values) current = std::max(current, max_abs(periodic_curl(f, g).values));
  EXPECT_GT(current, 10.0 * single);
  EXPECT_GT(current, 1.0);
}

TEST(Kinematics, BurgersIsGradientOfPhiResidualToSecondOrder) {
  std::vector<double> worst;
  for (int m : {16, 32, 64}) {
    TorusGrid g(1, m);
    auto p = solved(g, 8, {0.25, 0.5, 0.75}, reflection_coupling(g), 1.0);
    auto phi = phi_field(p, std::size_t(m / 8));
    auto br = burgers_residual(phi, p);
    auto pr = phi_residual(phi, p);
    double d = 0.0;
    for (std::size_t w = 0; w < br.steps.size(); ++w) {
      auto grad = periodic_gradient(pr.at(br.steps[w]), g);
      for (std::size_t z = 0; z < g.size(); ++z) d = std::max(d, std::abs(br.values[w][0][z] - grad[0][z]));
    }
    worst.push_back(d);
  }
  for (std::size_t i = 1; i < worst.size(); ++i) {
    const double ratio = worst[i - 1] / worst[i];
    EXPECT_GT(ratio, 3.5);
    EXPECT_LT(ratio, 4.5);
  }
}

TEST(Kinematics, HjbResidualOnBridgeIsFirstOrder) {
  std::vector<double> norms;
  for (int m : {32, 64, 128}) {
    TorusGrid g(1, m);
    std::vector<double> mu(std::size_t(m), 0.0), table(std::size_t(m * m), 0.0);
    mu[0] = 1.0;
    table[std::size_t(m / 4)] = 1.0;
    ReferenceChain ref(g, 0.1, TimeGrid(m / 2, {}), Density(mu));
    ProblemSpec spec(ref, Coupling::from_table(std::size_t(m), table, 1e-12), {}, 1e-12);
    auto p = solve(spec, {}).measure;
    norms.push_back(window_max(hjb_residual(psi_field(p, 0), p), ref.time, 0.0, 0.75));
  }
  for (std::size_t i = 1; i < norms.size(); ++i) {
    const double ratio = norms[i - 1] / norms[i];
    EXPECT_GE(ratio, 1.6);
    EXPECT_LE(ratio, 2.6);
  }
}
