#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <random>

#include "bredinger/io.hpp"
#include "bredinger/run.hpp"

using namespace bredinger;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bredinger_io_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json base_config() {
  return json{{"version", 1}, {"m", 16}, {"T", 8}, {"a", 1.0}, {"constraint_times", {0.5}}, {"coupling", "identity"}};
}

std::map<std::string, std::string> read_dir(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = io::read_text(e.path());
  return out;
}

std::string error_of(const json& doc, const fs::path& base = ".") {
  try {
    run::parse_config(doc, base);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Io, DoublesRoundTripBitwise) {
  std::mt19937_64 rng(5);
  std::vector<double> vals{0.0, -0.0, 1.0, 0.1, 1.0 / 3.0, 5e-324, 2.2250738585072014e-308,
                           std::numeric_limits<double>::max(), -1e-300};
  for (int i = 0; i < 2000; ++i) {
    double v = std::bit_cast<double>(rng());
    if (std::isfinite(v)) vals.push_back(v);
  }
  for (double v : vals) {
    const double back = io::parse_double(io::format_double(v));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back), std::bit_cast<std::uint64_t>(v)) << io::format_double(v);
  }
  EXPECT_EQ(io::format_double(0.1), "0.1");
  EXPECT_EQ(io::parse_double("-inf"), -std::numeric_limits<double>::infinity());
  EXPECT_EQ(io::format_double(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_TRUE(std::isnan(io::parse_double(io::format_double(std::nan("")))));
  EXPECT_THROW(io::parse_double("1.5x"), ValidationError);
  EXPECT_THROW(io::parse_double(""), ValidationError);
}

TEST(Io, CsvRoundTrip) {
  io::Table t;
  t.columns = {"step", "i0", "value"};
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 1e3);
  for (int i = 0; i < 50; ++i) t.add({double(i), double(i % 7), nd(rng)});
  t.add({1.0, 2.0, -std::numeric_limits<double>::infinity()});
  auto dir = scratch("csv");
  io::write_csv(dir / "t.csv", t);
  auto back = io::read_csv(dir / "t.csv");
  EXPECT_EQ(back.columns, t.columns);
  ASSERT_EQ(back.rows.size(), t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(back.rows[r][c], t.rows[r][c]);
  EXPECT_EQ(io::to_csv(back), io::to_csv(t));
  EXPECT_THROW(io::parse_csv("a,b\n1,2,3\n"), ValidationError);
  EXPECT_THROW(t.add({1.0}), InconsistencyError);
}

TEST(Io, SummaryRoundTrip) {
  io::Summary s;
  s.set("converged", true);
  s.set("sweeps", 3);
  s.set("entropy", 2.7725887222397811);
  s.set("coupling", std::string("{\"family\":\"shift\",\"shift\":4}"));
  auto back = io::Summary::parse(s.text());
  EXPECT_EQ(back.text(), s.text());
  EXPECT_EQ(back.number("entropy"), 2.7725887222397811);
  EXPECT_EQ(back.get("coupling"), s.get("coupling"));
  EXPECT_THROW(back.get("missing"), ValidationError);
  EXPECT_THROW(s.set("bad=key", 1), InconsistencyError);
}

TEST(Config, MinimalDefaults) {
  auto c = run::parse_config(base_config());
  EXPECT_EQ(c.dim, 1);
  EXPECT_EQ(c.m, 16);
  EXPECT_EQ(c.steps, 8);
  EXPECT_EQ(c.constraint_times, std::vector<double>{0.5});
  EXPECT_TRUE(c.targets_file.empty());
  EXPECT_EQ(c.coupling["family"], "identity");
  EXPECT_FALSE(c.command.has_value());
}

TEST(Config, RejectsBadDocuments) {
  auto doc = base_config();
  doc.erase("version");
  EXPECT_NE(error_of(doc).find("'version'"), std::string::npos);
  doc = base_config();
  doc["version"] = 2;
  EXPECT_NE(error_of(doc).find("'version'"), std::string::npos);
  doc = base_config();
  doc["tolerance"] = 1e-9;
  EXPECT_NE(error_of(doc).find("'tolerance': unknown key"), std::string::npos);
  doc = base_config();
  doc["coupling"] = {{"family", "shift"}, {"shift", 4}, {"shfit", 1}};
  EXPECT_NE(error_of(doc).find("'coupling.shfit'"), std::string::npos);
  doc = base_config();
  doc["anchors"] = {{"begin", {0}}};
  EXPECT_NE(error_of(doc).find("'anchors.begin'"), std::string::npos);
  doc = base_config();
  doc["m"] = 16.5;
  EXPECT_NE(error_of(doc).find("'m'"), std::string::npos);
  doc = base_config();
  doc["m"] = 4096;
  EXPECT_NE(error_of(doc).find("'m'"), std::string::npos);
  doc = base_config();
  doc["dim"] = 2;
  doc["m"] = 64;
  EXPECT_NE(error_of(doc).find("'m'"), std::string::npos);
  doc = base_config();
  doc["T"] = 100000;
  EXPECT_NE(error_of(doc).find("'T'"), std::string::npos);
  doc = base_config();
  doc["a"] = -1.0;
  EXPECT_NE(error_of(doc).find("'a'"), std::string::npos);
  doc = base_config();
  doc["coupling"] = "twist";
  EXPECT_NE(error_of(doc).find("'coupling.family'"), std::string::npos);
  doc = base_config();
  doc["coupling"] = "shift:s=x";
  EXPECT_NE(error_of(doc).find("'coupling'"), std::string::npos);
  doc = base_config();
  doc["targets"] = {{"file", "no_such_file.csv"}};
  EXPECT_NE(error_of(doc).find("'targets'"), std::string::npos);
  doc = base_config();
  doc["alphas"] = {0.5, 1.5};
  EXPECT_NE(error_of(doc).find("'alphas'"), std::string::npos);
  doc = base_config();
  doc["window"] = {0.5, 0.25};
  EXPECT_NE(error_of(doc).find("'window'"), std::string::npos);
  doc = base_config();
  doc["anchors"] = {{"start", {16}}};
  EXPECT_NE(error_of(doc).find("'anchors.start'"), std::string::npos);
  EXPECT_THROW(run::parse_config(json::array()), ValidationError);
}

TEST(Config, OffGridTimeNamesTheField) {
  auto doc = base_config();
  doc["constraint_times"] = {0.3};
  EXPECT_NE(error_of(doc).find("'constraint_times'"), std::string::npos);
  doc["constraint_times"] = {0.0};
  EXPECT_NE(error_of(doc).find("'constraint_times'"), std::string::npos);
}

TEST(Config, CouplingFamilies) {
  auto doc = base_config();
  doc["coupling"] = "shift:s=4";
  auto c = run::parse_config(doc);
  auto ref = run::make_reference(c);
  EXPECT_EQ(tv_distance(run::make_coupling(c, ref), shift_coupling(ref.grid(), 4)), 0.0);

  doc["dim"] = 2;
  doc["m"] = 8;
  doc["coupling"] = "shift:s=3,5";
  c = run::parse_config(doc);
  ref = run::make_reference(c);
  EXPECT_EQ(tv_distance(run::make_coupling(c, ref), shift_coupling(ref.grid(), ref.grid().index(3, 5))), 0.0);
  doc["coupling"] = "rotation";
  c = run::parse_config(doc);
  EXPECT_TRUE(run::make_coupling(c, run::make_reference(c)).bistochastic());
  doc["coupling"] = "shift:s=3";
  c = run::parse_config(doc);
  EXPECT_THROW(run::make_coupling(c, run::make_reference(c)), ValidationError);

  doc = base_config();
  doc["coupling"] = {{"family", "mixture"},
                     {"components", {{{"shift", 2}, {"weight", 1.0}}, {{"shift", -3}, {"weight", 3.0}}}}};
  c = run::parse_config(doc);
  ref = run::make_reference(c);
  auto mix = run::make_coupling(c, ref);
  EXPECT_EQ(tv_distance(mix, shift_mixture_coupling(ref.grid(), {{2, 1.0}, {13, 3.0}})), 0.0);
  doc["coupling"] = "rotation";
  c = run::parse_config(doc);
  EXPECT_THROW(run::make_coupling(c, run::make_reference(c)), ValidationError);
  doc["coupling"] = {{"family", "reflection"}, {"shift", 1}};
  c = run::parse_config(doc);
  EXPECT_THROW(run::make_coupling(c, run::make_reference(c)), ValidationError);
}

TEST(Config, TableFilesResolveAgainstConfigDir) {
  auto dir = scratch("tables");
  io::Table pi;
  pi.columns = {"x", "y", "mass"};
  for (int x = 0; x < 16; ++x) pi.add({double(x), double((x + 5) % 16), 1.0 / 16.0});
  io::write_csv(dir / "pi.csv", pi);
  io::Table tg;
  tg.columns = {"k", "node", "mass"};
  for (int z = 0; z < 16; ++z) tg.add({0.0, double(z), 1.0 / 16.0});
  io::write_csv(dir / "targets.csv", tg);
  auto doc = base_config();
  doc["coupling"] = {{"family", "file"}, {"file", "pi.csv"}};
  doc["targets"] = {{"file", "targets.csv"}};
  io::write_text(dir / "config.json", doc.dump(2));
  auto c = run::load_config(dir / "config.json");
  auto spec = run::make_problem(c);
  EXPECT_EQ(tv_distance(spec.pi, shift_coupling(spec.ref.grid(), 5)), 0.0);
  EXPECT_TRUE(spec.targets[0].is_uniform(0.0));

  io::write_text(dir / "broken.json", "{\"version\": 1,");
  EXPECT_THROW(run::load_config(dir / "broken.json"), ValidationError);
  EXPECT_THROW(run::load_config(dir / "absent.json"), ValidationError);
}

TEST(Run, IdentityCouplingIsTheReference) {
  auto c = run::parse_config(base_config());
  auto dir = scratch("identity");
  auto o = run::run_solve(c, dir);
  EXPECT_EQ(o.exit_code, run::kOk);
  auto s = io::read_summary(dir / "summary.txt");
  EXPECT_EQ(s.get("converged"), "1");
  EXPECT_LE(s.number("sweeps"), 2.0);
  EXPECT_LT(s.number("entropy"), 1e-10);
  for (const char* f : {"eta.csv", "theta.csv", "marginals.csv", "history.csv"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  auto marg = io::read_csv(dir / "marginals.csv");
  EXPECT_EQ(marg.rows.size(), 9u * 16u);
}

TEST(Run, ShiftSolveMatchesSolverRegression) {
  auto doc = base_config();
  doc["coupling"] = "shift:s=4";
  auto dir = scratch("shift");
  auto o = run::run_solve(run::parse_config(doc), dir);
  EXPECT_EQ(o.exit_code, run::kOk);
  auto s = io::read_summary(dir / "summary.txt");
  EXPECT_NEAR(s.number("entropy"), 2.7725887222397811, 1e-12);
  EXPECT_EQ(s.number("entropy"), o.summary.number("entropy"));

  auto spec = run::make_problem(run::parse_config(doc));
  SolveOptions opts;
  opts.trace_updates = false;
  auto p = solve(spec, opts).measure;
  auto eta = io::read_csv(dir / "eta.csv");
  for (const auto& row : eta.rows) EXPECT_EQ(row[2], p.eta_at(std::size_t(row[0]), std::size_t(row[1])));
  auto theta = io::read_csv(dir / "theta.csv");
  for (const auto& row : theta.rows) EXPECT_EQ(row[3], p.theta[0][std::size_t(row[2])]);
}

TEST(Run, InfeasibleCouplingWritesViolationReport) {
  auto dir = scratch("infeasible");
  io::Table pi;
  pi.columns = {"x", "y", "mass"};
  pi.add({0.0, 0.0, 0.5});
  pi.add({1.0, 3.0, 0.5});
  io::write_csv(dir / "pi.csv", pi);
  auto doc = base_config();
  doc["coupling"] = {{"family", "file"}, {"file", "pi.csv"}};
  auto o = run::run_solve(run::parse_config(doc, dir), dir / "out");
  EXPECT_EQ(o.exit_code, run::kInfeasible);
  auto f = io::read_summary(dir / "out" / "feasibility.txt");
  EXPECT_EQ(f.get("feasible"), "0");
  EXPECT_GE(f.number("violations"), 1.0);
  EXPECT_NE(f.get("violation.0").find("first marginal"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out" / "eta.csv"));
}

TEST(Run, NonConvergenceIsFlagged) {
  auto doc = base_config();
  doc["m"] = 32;
  doc["T"] = 16;
  doc["a"] = 0.1;
  doc["constraint_times"] = {0.25, 0.5, 0.75};
  doc["coupling"] = "reflection";
  doc["max_sweeps"] = 2;
  doc["tol"] = 1e-12;
  auto dir = scratch("partial");
  auto o = run::run_kinematics(run::parse_config(doc), dir);
  EXPECT_EQ(o.exit_code, run::kNotConverged);
  auto s = io::read_summary(dir / "summary.txt");
  EXPECT_EQ(s.get("converged"), "0");
  EXPECT_EQ(s.get("partial"), "1");
  EXPECT_EQ(s.get("exit_code"), "4");
  EXPECT_TRUE(fs::exists(dir / "eta.csv"));
  EXPECT_FALSE(fs::exists(dir / "residual_norms.csv"));
}

TEST(Run, CertifyProductAndShift) {
  auto doc = base_config();
  doc["coupling"] = "product";
  auto o = run::run_certify(run::parse_config(doc), scratch("cert_product"));
  EXPECT_LE(o.summary.number("identity_residual"), 1e-10);
  EXPECT_LE(o.summary.number("max_marginal_tv"), 1e-12);

  doc["coupling"] = "shift:s=4";
  auto dir = scratch("cert_shift");
  o = run::run_certify(run::parse_config(doc), dir);
  auto s = io::read_summary(dir / "summary.txt");
  EXPECT_NEAR(s.number("path_entropy"), 2.7725887275903576, 1e-12);
  EXPECT_NEAR(s.number("coupling_entropy"), 2.7725887222397811, 1e-12);
  EXPECT_NEAR(s.number("bridge_term"), 5.3505764263661604e-09, 1e-15);
  EXPECT_LE(s.number("endpoint_tv"), 1e-12);
  EXPECT_NEAR(s.number("sup_bridge_entropy"), s.number("sup_bridge_entropy_quadrature"), 1e-6);

  doc["T"] = 7;
  doc["constraint_times"] = json::array();
  EXPECT_THROW(run::run_certify(run::parse_config(doc), scratch("cert_odd")), ValidationError);
}

TEST(Run, ZeroPotentialResidualsAtRoundingFloor) {
  auto doc = base_config();
  doc["alphas"] = {0.0, 0.5, 1.0};
  doc["anchors"] = {{"start", {0, 5}}, {"end", {3}}};
  doc["window"] = {0.0, 1.0};
  auto dir = scratch("zero");
  auto o = run::run_kinematics(run::parse_config(doc), dir);
  ASSERT_EQ(o.exit_code, run::kOk);
  auto norms = io::read_csv(dir / "residual_norms.csv");
  ASSERT_EQ(norms.rows.size(), 1u);
  ASSERT_EQ(norms.columns.size(), 9u);
  EXPECT_EQ(norms.columns.back(), "continuity_alpha_1");
  for (std::size_t c = 3; c < norms.columns.size(); ++c) EXPECT_LE(norms.rows[0][c], 1e-11) << norms.columns[c];
  for (const char* f : {"psi.csv", "phi.csv", "velocity_forward.csv", "velocity_backward.csv", "nelson_forward.csv",
                        "velocity_alpha.csv", "residual_hjb.csv", "residual_burgers.csv", "residual_continuity.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  auto psi = io::read_csv(dir / "psi.csv");
  EXPECT_EQ(psi.rows.size(), 2u * 9u * 16u);
}

TEST(Run, RefinementPairShowsResidualDecay) {
  std::vector<io::Table> norms;
  for (int m : {16, 32}) {
    auto doc = base_config();
    doc["m"] = m;
    doc["T"] = m / 2;
    doc["coupling"] = "shift:s=" + std::to_string(m / 4);
    auto dir = scratch("ladder" + std::to_string(m));
    ASSERT_EQ(run::run_residuals(run::parse_config(doc), dir).exit_code, run::kOk);
    norms.push_back(io::read_csv(dir / "residual_norms.csv"));
    EXPECT_FALSE(fs::exists(dir / "psi.csv"));
  }
  // Columns m, T, a, hjb, burgers, nelson_gap.
  for (std::size_t c : {3u, 4u, 5u}) {
    const double ratio = norms[0].rows[0][c] / norms[1].rows[0][c];
    EXPECT_GT(ratio, 1.6) << norms[0].columns[c];
  }
}

TEST(Run, AnchorWithoutInitialMassIsRejected) {
  auto dir = scratch("anchor");
  io::Table mu;
  mu.columns = {"node", "mass"};
  io::Table pi;
  pi.columns = {"x", "y", "mass"};
  for (int z = 0; z < 16; ++z) {
    const double w = z == 3 ? 0.0 : 1.0 / 15.0;
    mu.add({double(z), w});
    if (w > 0.0) pi.add({double(z), double((z + 1) % 16), w});
  }
  io::write_csv(dir / "mu.csv", mu);
  io::write_csv(dir / "pi.csv", pi);
  auto doc = base_config();
  doc["initial"] = {{"file", "mu.csv"}};
  doc["coupling"] = {{"family", "file"}, {"file", "pi.csv"}};
  doc["anchors"] = {{"start", {3}}, {"end", {0}}};
  auto c = run::parse_config(doc, dir);
  try {
    run::run_kinematics(c, dir / "out");
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("anchors.start"), std::string::npos);
  }
  doc["anchors"] = {{"start", {0}}, {"end", {4}}};
  EXPECT_THROW(run::run_kinematics(run::parse_config(doc, dir), dir / "out"), ValidationError);
  doc["anchors"] = {{"start", {0}}, {"end", {0}}};
  EXPECT_EQ(run::run_kinematics(run::parse_config(doc, dir), dir / "out").exit_code, run::kOk);
}

TEST(Run, ArtifactsAreByteIdentical) {
  auto doc = base_config();
  doc["dim"] = 2;
  doc["m"] = 6;
  doc["T"] = 4;
  doc["a"] = 0.2;
  doc["coupling"] = "rotation";
  doc["alphas"] = {0.0, 0.5};
  doc["anchors"] = {{"start", {{1, 2}}}, {"end", {7}}};
  auto c = run::parse_config(doc);
  std::vector<std::map<std::string, std::string>> runs;
  for (int threads : {1, 0, 3}) {
    set_thread_count(threads);
    auto dir = scratch("det" + std::to_string(threads));
    ASSERT_EQ(run::run_kinematics(c, dir).exit_code, run::kOk);
    runs.push_back(read_dir(dir));
  }
  set_thread_count(0);
  ASSERT_EQ(runs[0].size(), 15u);
  EXPECT_EQ(runs[0], runs[1]);
  EXPECT_EQ(runs[0], runs[2]);
}

TEST(Run, ExitCodeMapping) {
  EXPECT_EQ(run::exit_code_for(ValidationError("x")), run::kValidation);
  EXPECT_EQ(run::exit_code_for(DomainError("x")), run::kValidation);
  EXPECT_EQ(run::exit_code_for(ConfigurationError("x")), run::kValidation);
  EXPECT_EQ(run::exit_code_for(InfeasibleError("x")), run::kInfeasible);
  EXPECT_EQ(run::exit_code_for(InconsistencyError("x")), run::kInternal);
  EXPECT_EQ(run::exit_code_for(std::runtime_error("x")), run::kInternal);
}
