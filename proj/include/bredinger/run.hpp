#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <filesystem>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bredinger/certificate.hpp"
#include "bredinger/coupling.hpp"
#include "bredinger/io.hpp"
#include "bredinger/kinematics.hpp"
#include "bredinger/solver.hpp"

namespace bredinger::run {

/// Process exit statuses.
enum ExitCode : int { kOk = 0, kValidation = 2, kInfeasible = 3, kNotConverged = 4, kInternal = 5 };

/// Desk-scale limits. Per-sweep cost grows like m^(3 dim).
inline constexpr int kMaxNodes1D = 512;
inline constexpr int kMaxNodes2D = 32;
inline constexpr int kMaxSteps = 1024;

enum class Command { solve, certify, kinematics, residuals };

inline std::string command_name(Command c) {
  switch (c) {
    case Command::solve: return "solve";
    case Command::certify: return "certify";
    case Command::kinematics: return "kinematics";
    case Command::residuals: return "residuals";
  }
  return "?";
}

inline Command parse_command(const std::string& s) {
  for (auto c : {Command::solve, Command::certify, Command::kinematics, Command::residuals})
    if (command_name(c) == s) return c;
  throw ValidationError("config: field 'command': unknown command '" + s + "'");
}

struct RunConfig {
  int dim = 1;
  int m = 0;
  int steps = 0;
  double a = 0.0;
  std::vector<double> constraint_times;
  /// Empty means uniform.
  std::filesystem::path targets_file;
  std::filesystem::path initial_file;
  /// Coupling description as given, normalized to JSON.
  nlohmann::json coupling;
  double tol = 1e-10;
  int max_sweeps = 500;
  std::vector<double> alphas{0.5};
  std::vector<std::size_t> start_anchors{0};
  std::vector<std::size_t> end_anchors{0};
  double window_lo = 0.0;
  double window_hi = 0.75;
  std::filesystem::path output = "out";
  std::optional<Command> command;
};

namespace detail {

using nlohmann::json;

inline ValidationError field_error(const std::string& field, const std::string& msg) {
  return ValidationError("config: field '" + field + "': " + msg);
}

inline void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [k, v] : obj.items())
    if (!allowed.count(k)) throw field_error(where.empty() ? k : where + "." + k, "unknown key");
}

inline int get_int(const json& v, const std::string& field) {
  if (!v.is_number_integer()) throw field_error(field, "expected an integer");
  return v.get<int>();
}

inline double get_number(const json& v, const std::string& field) {
  if (!v.is_number()) throw field_error(field, "expected a number");
  return v.get<double>();
}

inline std::vector<double> get_numbers(const json& v, const std::string& field) {
  if (!v.is_array()) throw field_error(field, "expected a list of numbers");
  std::vector<double> out;
  for (const auto& e : v) out.push_back(get_number(e, field));
  return out;
}

inline std::filesystem::path get_file(const json& v, const std::string& field, const std::filesystem::path& base) {
  if (!v.is_object()) throw field_error(field, "expected \"uniform\" or {\"file\": ...}");
  check_keys(v, {"file"}, field);
  if (!v.contains("file") || !v["file"].is_string()) throw field_error(field, "missing string 'file'");
  std::filesystem::path p = v["file"].get<std::string>();
  if (p.is_relative()) p = base / p;
  if (!std::filesystem::is_regular_file(p)) throw field_error(field, "file " + p.string() + " does not exist");
  return p;
}

/// A node is a flat index, or per-axis coordinates [i0, i1] in 2D.
inline std::size_t get_node(const json& v, const TorusGrid& g, const std::string& field) {
  if (v.is_number_integer()) {
    const long i = v.get<long>();
    if (i < 0 || std::size_t(i) >= g.size()) throw field_error(field, "node " + std::to_string(i) + " out of range");
    return std::size_t(i);
  }
  if (v.is_array() && int(v.size()) == g.dim()) {
    std::array<int, 2> c{0, 0};
    for (int axis = 0; axis < g.dim(); ++axis) {
      c[std::size_t(axis)] = get_int(v[std::size_t(axis)], field);
      if (c[std::size_t(axis)] < 0 || c[std::size_t(axis)] >= g.nodes_per_axis())
        throw field_error(field, "coordinate out of range");
    }
    return g.index(c);
  }
  throw field_error(field, "expected a node index or a coordinate list of length dim");
}

inline std::size_t shift_of(const json& v, const TorusGrid& g, const std::string& field) {
  if (v.is_number_integer() && g.dim() == 1) return g.index(v.get<int>());
  if (v.is_array() && int(v.size()) == g.dim()) {
    std::array<int, 2> c{0, 0};
    for (int axis = 0; axis < g.dim(); ++axis) c[std::size_t(axis)] = get_int(v[std::size_t(axis)], field);
    return g.index(c);
  }
  throw field_error(field, "shift needs " + std::to_string(g.dim()) + " integer component(s)");
}

// "shift:s=4" or "shift:s=3,5" -> {"family": "shift", "shift": ...}.
inline json expand_coupling(const json& v) {
  if (v.is_object()) return v;
  if (!v.is_string()) throw field_error("coupling", "expected a family name or an object");
  const std::string s = v.get<std::string>();
  const std::string prefix = "shift:s=";
  if (s.rfind(prefix, 0) != 0) return json{{"family", s}};
  json parts = json::array();
  std::string rest = s.substr(prefix.size());
  std::size_t pos = 0;
  while (true) {
    auto comma = rest.find(',', pos);
    const std::string tok = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    int val = 0;
    auto r = std::from_chars(tok.data(), tok.data() + tok.size(), val);
    if (tok.empty() || r.ec != std::errc() || r.ptr != tok.data() + tok.size())
      throw field_error("coupling", "cannot parse shift '" + s + "'");
    parts.push_back(val);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return json{{"family", "shift"}, {"shift", parts.size() == 1 ? parts[0] : parts}};
}

inline Density read_density_file(const std::filesystem::path& path, std::size_t n, const std::string& field) {
  auto t = io::read_csv(path);
  if (t.columns != std::vector<std::string>{"node", "mass"}) throw field_error(field, "expected columns node,mass");
  std::vector<double> mass(n, 0.0);
  for (const auto& row : t.rows) {
    if (row[0] < 0 || row[0] >= double(n) || row[0] != std::floor(row[0]))
      throw field_error(field, "bad node index in " + path.string());
    mass[std::size_t(row[0])] += row[1];
  }
  try {
    return Density::from_masses(std::move(mass), 1e-12);
  } catch (const ValidationError& e) {
    throw field_error(field, e.what());
  }
}

}  // namespace detail

/// Parses a version-1 config document. Relative input files resolve against
/// base_dir. Unknown keys are errors.
inline RunConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".") {
  using detail::field_error;
  if (!doc.is_object()) throw ValidationError("config: top level must be an object");
  detail::check_keys(doc,
                     {"version", "command", "dim", "m", "T", "a", "constraint_times", "targets", "initial", "coupling",
                      "tol", "max_sweeps", "alphas", "anchors", "window", "output"},
                     "");
  if (!doc.contains("version")) throw field_error("version", "missing");
  if (detail::get_int(doc["version"], "version") != 1) throw field_error("version", "only version 1 is supported");
  for (const char* req : {"m", "T", "a", "coupling"})
    if (!doc.contains(req)) throw field_error(req, "missing");

  RunConfig c;
  if (doc.contains("command")) {
    if (!doc["command"].is_string()) throw field_error("command", "expected a string");
    c.command = parse_command(doc["command"].get<std::string>());
  }
  if (doc.contains("dim")) c.dim = detail::get_int(doc["dim"], "dim");
  if (c.dim != 1 && c.dim != 2) throw field_error("dim", "must be 1 or 2");
  c.m = detail::get_int(doc["m"], "m");
  const int max_m = c.dim == 1 ? kMaxNodes1D : kMaxNodes2D;
  if (c.m < 2 || c.m > max_m) throw field_error("m", "must lie in [2, " + std::to_string(max_m) + "]");
  c.steps = detail::get_int(doc["T"], "T");
  if (c.steps < 2 || c.steps > kMaxSteps) throw field_error("T", "must lie in [2, " + std::to_string(kMaxSteps) + "]");
  c.a = detail::get_number(doc["a"], "a");
  if (!(c.a > 0.0) || !std::isfinite(c.a)) throw field_error("a", "must be positive and finite");

  if (doc.contains("constraint_times")) c.constraint_times = detail::get_numbers(doc["constraint_times"], "constraint_times");
  try {
    TimeGrid::from_times(c.steps, c.constraint_times);
  } catch (const ValidationError& e) {
    throw field_error("constraint_times", e.what());
  }

  for (const char* key : {"targets", "initial"}) {
    if (!doc.contains(key)) continue;
    const auto& v = doc[key];
    if (v.is_string() && v.get<std::string>() == "uniform") continue;
    (std::string(key) == "targets" ? c.targets_file : c.initial_file) = detail::get_file(v, key, base_dir);
  }

  c.coupling = detail::expand_coupling(doc["coupling"]);
  {
    const auto& cp = c.coupling;
    detail::check_keys(cp, {"family", "shift", "components", "file"}, "coupling");
    if (!cp.contains("family") || !cp["family"].is_string()) throw field_error("coupling.family", "missing");
    const auto fam = cp["family"].get<std::string>();
    static const std::set<std::string> known{"identity", "product", "reflection", "rotation", "shift", "mixture", "file"};
    if (!known.count(fam)) throw field_error("coupling.family", "unknown family '" + fam + "'");
    if (fam == "file") {
      c.coupling["file"] = detail::get_file(nlohmann::json{{"file", cp.value("file", nlohmann::json())}}, "coupling", base_dir).string();
    }
  }

  if (doc.contains("tol")) c.tol = detail::get_number(doc["tol"], "tol");
  if (!(c.tol > 0.0)) throw field_error("tol", "must be positive");
  if (doc.contains("max_sweeps")) c.max_sweeps = detail::get_int(doc["max_sweeps"], "max_sweeps");
  if (c.max_sweeps < 1) throw field_error("max_sweeps", "must be >= 1");
  if (doc.contains("alphas")) c.alphas = detail::get_numbers(doc["alphas"], "alphas");
  for (double al : c.alphas)
    if (!(al >= 0.0 && al <= 1.0)) throw field_error("alphas", "entries must lie in [0, 1]");

  TorusGrid g(c.dim, c.m);
  if (doc.contains("anchors")) {
    const auto& an = doc["anchors"];
    if (!an.is_object()) throw field_error("anchors", "expected {\"start\": [...], \"end\": [...]}");
    detail::check_keys(an, {"start", "end"}, "anchors");
    for (const char* side : {"start", "end"}) {
      if (!an.contains(side)) continue;
      const std::string f = std::string("anchors.") + side;
      if (!an[side].is_array()) throw field_error(f, "expected a list of nodes");
      auto& dst = std::string(side) == "start" ? c.start_anchors : c.end_anchors;
      dst.clear();
      for (const auto& node : an[side]) dst.push_back(detail::get_node(node, g, f));
    }
  }
  if (doc.contains("window")) {
    auto w = detail::get_numbers(doc["window"], "window");
    if (w.size() != 2 || !(w[0] >= 0.0 && w[0] < w[1] && w[1] <= 1.0))
      throw field_error("window", "expected [lo, hi] with 0 <= lo < hi <= 1");
    c.window_lo = w[0];
    c.window_hi = w[1];
  }
  if (doc.contains("output")) {
    if (!doc["output"].is_string()) throw field_error("output", "expected a path");
    c.output = doc["output"].get<std::string>();
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  const std::string text = io::read_text(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config: " + path.string() + ": " + e.what());
  }
  return parse_config(doc, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

inline ReferenceChain make_reference(const RunConfig& c) {
  TorusGrid g(c.dim, c.m);
  auto tg = TimeGrid::from_times(c.steps, c.constraint_times);
  if (c.initial_file.empty()) return ReferenceChain(g, c.a, tg);
  return ReferenceChain(g, c.a, tg, detail::read_density_file(c.initial_file, g.size(), "initial"));
}

inline Coupling make_coupling(const RunConfig& c, const ReferenceChain& ref) {
  using detail::field_error;
  const auto& g = ref.grid();
  const auto& cp = c.coupling;
  const auto fam = cp["family"].get<std::string>();
  auto need_only = [&](std::set<std::string> keys) {
    keys.insert("family");
    detail::check_keys(cp, keys, "coupling");
  };
  if (fam == "identity") {
    need_only({});
    return reference_coupling(ref);
  }
  if (fam == "product") {
    need_only({});
    return product_coupling(ref.initial, Density::uniform(g.size()));
  }
  if (fam == "reflection") {
    need_only({});
    return reflection_coupling(g);
  }
  if (fam == "rotation") {
    need_only({});
    return rotation_coupling(g);
  }
  if (fam == "shift") {
    need_only({"shift"});
    if (!cp.contains("shift")) throw field_error("coupling.shift", "missing");
    return shift_coupling(g, detail::shift_of(cp["shift"], g, "coupling.shift"));
  }
  if (fam == "mixture") {
    need_only({"components"});
    if (!cp.contains("components") || !cp["components"].is_array())
      throw field_error("coupling.components", "expected a list");
    std::vector<std::pair<std::size_t, double>> parts;
    for (const auto& comp : cp["components"]) {
      if (!comp.is_object()) throw field_error("coupling.components", "expected {shift, weight} objects");
      detail::check_keys(comp, {"shift", "weight"}, "coupling.components");
      if (!comp.contains("shift") || !comp.contains("weight"))
        throw field_error("coupling.components", "each entry needs shift and weight");
      parts.emplace_back(detail::shift_of(comp["shift"], g, "coupling.components.shift"),
                         detail::get_number(comp["weight"], "coupling.components.weight"));
    }
    return shift_mixture_coupling(g, parts);
  }
  need_only({"file"});
  auto t = io::read_csv(cp["file"].get<std::string>());
  if (t.columns != std::vector<std::string>{"x", "y", "mass"}) throw field_error("coupling.file", "expected columns x,y,mass");
  const std::size_t n = g.size();
  std::vector<double> table(n * n, 0.0);
  for (const auto& row : t.rows) {
    for (int i = 0; i < 2; ++i)
      if (row[std::size_t(i)] < 0 || row[std::size_t(i)] >= double(n) || row[std::size_t(i)] != std::floor(row[std::size_t(i)]))
        throw field_error("coupling.file", "bad node index");
    table[std::size_t(row[0]) * n + std::size_t(row[1])] += row[2];
  }
  try {
    return Coupling::from_table(n, std::move(table));
  } catch (const ValidationError& e) {
    throw field_error("coupling.file", e.what());
  }
}

inline std::vector<Density> make_targets(const RunConfig& c, const ReferenceChain& ref) {
  const std::size_t n = ref.size(), count = ref.time.constraint_count();
  if (c.targets_file.empty()) return std::vector<Density>(count, Density::uniform(n));
  auto t = io::read_csv(c.targets_file);
  if (t.columns != std::vector<std::string>{"k", "node", "mass"})
    throw detail::field_error("targets", "expected columns k,node,mass");
  std::vector<std::vector<double>> mass(count, std::vector<double>(n, 0.0));
  for (const auto& row : t.rows) {
    if (row[0] < 0 || row[0] >= double(count) || row[0] != std::floor(row[0]))
      throw detail::field_error("targets", "constraint index out of range");
    if (row[1] < 0 || row[1] >= double(n) || row[1] != std::floor(row[1]))
      throw detail::field_error("targets", "node index out of range");
    mass[std::size_t(row[0])][std::size_t(row[1])] += row[2];
  }
  std::vector<Density> out;
  for (auto& m : mass) out.emplace_back(std::move(m));
  return out;
}

inline ProblemSpec make_problem(const RunConfig& c) {
  auto ref = make_reference(c);
  auto pi = make_coupling(c, ref);
  auto targets = make_targets(c, ref);
  return ProblemSpec(ref, pi, targets, c.tol, c.max_sweeps);
}

/// Outcome of one run; artifacts are already on disk.
struct RunOutcome {
  int exit_code = kOk;
  io::Summary summary;
};

namespace detail {

inline std::vector<std::string> node_columns(const TorusGrid& g) {
  return g.dim() == 1 ? std::vector<std::string>{"i0"} : std::vector<std::string>{"i0", "i1"};
}

inline void push_node(std::vector<double>& row, const TorusGrid& g, std::size_t z) {
  auto c = g.coords(z);
  for (int axis = 0; axis < g.dim(); ++axis) row.push_back(double(c[std::size_t(axis)]));
}

inline io::Table field_table(const TorusGrid& g, std::vector<std::string> lead, std::vector<std::string> values) {
  io::Table t;
  t.columns = std::move(lead);
  for (auto& s : node_columns(g)) t.columns.push_back(s);
  for (auto& s : values) t.columns.push_back(s);
  return t;
}

inline std::vector<std::string> component_names(const std::string& base, int dim) {
  std::vector<std::string> out;
  for (int c = 0; c < dim; ++c) out.push_back(base + std::to_string(c));
  return out;
}

inline void add_scalar_rows(io::Table& t, const TorusGrid& g, std::vector<double> lead, int step, const ScalarField& f) {
  for (std::size_t z = 0; z < g.size(); ++z) {
    auto row = lead;
    row.push_back(double(step));
    push_node(row, g, z);
    row.push_back(f[z]);
    t.add(std::move(row));
  }
}

inline void add_vector_rows(io::Table& t, const TorusGrid& g, std::vector<double> lead, int step, const VectorField& f) {
  for (std::size_t z = 0; z < g.size(); ++z) {
    auto row = lead;
    row.push_back(double(step));
    push_node(row, g, z);
    for (int c = 0; c < g.dim(); ++c) row.push_back(f[c][z]);
    t.add(std::move(row));
  }
}

inline std::string join_numbers(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + io::format_double(v[i]);
  return s;
}

inline io::Summary header(const RunConfig& c, Command cmd) {
  io::Summary s;
  s.set("command", command_name(cmd));
  s.set("dim", c.dim);
  s.set("m", c.m);
  s.set("T", c.steps);
  s.set("a", c.a);
  s.set("constraint_times", join_numbers(c.constraint_times));
  s.set("coupling", c.coupling.dump());
  s.set("targets", c.targets_file.empty() ? std::string("uniform") : c.targets_file.filename().string());
  s.set("tol", c.tol);
  s.set("max_sweeps", c.max_sweeps);
  return s;
}

inline void log_line(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << '\n';
}

struct SolvedRun {
  ProblemSpec spec;
  SolveResult result;
  Marginals marginals;
};

// Solves and writes the solve artifacts. Returns the exit code; on
// infeasibility only feasibility.txt is written.
inline int solve_and_write(const RunConfig& c, const std::filesystem::path& out, io::Summary& s, SolvedRun& run,
                           std::ostream* log) {
  run.spec = make_problem(c);
  const auto feas = feasibility_check(run.spec);
  s.set("coupling_entropy", feas.coupling_entropy);
  if (!feas.ok) {
    io::Summary f;
    f.set("feasible", false);
    f.set("violations", feas.violations.size());
    for (std::size_t i = 0; i < feas.violations.size(); ++i) f.set("violation." + std::to_string(i), feas.violations[i]);
    io::write_summary(out / "feasibility.txt", f);
    s.set("feasible", false);
    log_line(log, "infeasible: " + std::to_string(feas.violations.size()) + " violation(s), see feasibility.txt");
    return kInfeasible;
  }
  s.set("feasible", true);
  SolveOptions opts;
  opts.trace_updates = false;
  run.result = solve(run.spec, opts);
  const auto& r = run.result.report;
  const auto& p = run.result.measure;
  run.marginals = marginals(p);
  const auto& g = p.grid();
  const std::size_t n = g.size();

  s.set("converged", r.converged);
  s.set("partial", !r.converged);
  s.set("sweeps", r.sweeps);
  s.set("max_error", r.max_error);
  s.set("entropy", r.entropy);
  s.set("conditional_entropy", r.conditional_entropy);
  s.set("dual", r.dual);
  s.set("gap", r.gap);
  s.set("gap_constant", r.gap_constant);
  s.set("endpoint_tv", tv_distance(run.marginals.endpoint, run.spec.pi));
  log_line(log, std::string(r.converged ? "converged" : "NOT converged") + " after " + std::to_string(r.sweeps) +
                    " sweep(s), H(P|R) = " + io::format_double(r.entropy) + ", max error " +
                    io::format_double(r.max_error));

  io::Table hist;
  hist.columns = {"sweep", "error", "dual"};
  for (std::size_t i = 0; i < r.history.size(); ++i) hist.add({double(i + 1), r.history[i].error, r.history[i].dual});
  io::write_csv(out / "history.csv", hist);

  io::Table eta;
  eta.columns = {"x", "y", "eta"};
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = 0; y < n; ++y) eta.add({double(x), double(y), p.eta_at(x, y)});
  io::write_csv(out / "eta.csv", eta);

  auto theta = field_table(g, {"k", "step"}, {"theta"});
  for (std::size_t k = 0; k < p.theta.size(); ++k)
    add_scalar_rows(theta, g, {double(k)}, p.ref.time.constraint_steps()[k], p.theta[k]);
  io::write_csv(out / "theta.csv", theta);

  auto marg = field_table(g, {"step"}, {"mass"});
  for (std::size_t j = 0; j < run.marginals.time.size(); ++j)
    add_scalar_rows(marg, g, {}, int(j), ScalarField(run.marginals.time[j].mass));
  io::write_csv(out / "marginals.csv", marg);
  return r.converged ? kOk : kNotConverged;
}

inline void finish(const std::filesystem::path& out, RunOutcome& o) {
  o.summary.set("exit_code", o.exit_code);
  io::write_summary(out / "summary.txt", o.summary);
}

inline std::string alpha_label(double alpha) { return "continuity_alpha_" + io::format_double(alpha); }

inline void check_anchors(const RunConfig& c, const ReferenceChain& ref, const Coupling& pi) {
  for (auto x : c.start_anchors)
    if (!(ref.initial[x] > 0.0))
      throw detail::field_error("anchors.start", "node " + std::to_string(x) + " carries no initial mass");
  for (auto y : c.end_anchors)
    if (!(pi.second()[y] > 0.0))
      throw detail::field_error("anchors.end", "node " + std::to_string(y) + " carries no final mass");
}

// Shared body of the kinematics and residuals commands.
inline RunOutcome kinematic_run(const RunConfig& c, const std::filesystem::path& out, std::ostream* log, bool fields) {
  const Command cmd = fields ? Command::kinematics : Command::residuals;
  std::filesystem::create_directories(out);
  RunOutcome o;
  o.summary = header(c, cmd);
  {
    auto ref = make_reference(c);
    check_anchors(c, ref, make_coupling(c, ref));
  }
  SolvedRun run;
  o.exit_code = solve_and_write(c, out, o.summary, run, log);
  if (o.exit_code != kOk) {
    finish(out, o);
    return o;
  }
  const auto& p = run.result.measure;
  const auto& g = p.grid();
  const auto& tg = p.ref.time;
  const double a = c.a;
  const double lo = c.window_lo, hi = c.window_hi;
  o.summary.set("window", join_numbers({lo, hi}));

  auto psi_t = field_table(g, {"anchor", "step"}, {"psi"});
  auto phi_t = field_table(g, {"anchor", "step"}, {"phi"});
  auto fv_t = field_table(g, {"anchor", "step"}, component_names("v", g.dim()));
  auto nv_t = field_table(g, {"anchor", "step"}, component_names("v", g.dim()));
  auto bv_t = field_table(g, {"anchor", "step"}, component_names("v", g.dim()));
  auto hjb_t = field_table(g, {"anchor", "step"}, {"hjb"});
  auto burg_t = field_table(g, {"anchor", "step"}, component_names("r", g.dim()));
  auto cont_t = field_table(g, {"alpha", "step"}, {"continuity"});
  auto av_t = field_table(g, {"alpha", "step"}, component_names("v", g.dim()));

  double hjb = 0.0, nelson = 0.0, burgers = 0.0;
  for (auto x : c.start_anchors) {
    auto psi = psi_field(p, x);
    auto fv = forward_velocity(psi, g, a);
    auto nv = nelson_forward_field(p, x);
    auto res = hjb_residual(psi, p);
    hjb = std::max(hjb, window_max(res, tg, lo, hi));
    nelson = std::max(nelson, window_max_difference(nv, fv, tg, lo, hi));
    for (std::size_t w = 0; w < res.steps.size(); ++w) add_scalar_rows(hjb_t, g, {double(x)}, res.steps[w], res.values[w]);
    if (!fields) continue;
    for (std::size_t j = 0; j < psi.values.size(); ++j) add_scalar_rows(psi_t, g, {double(x)}, int(j), psi.values[j]);
    for (std::size_t w = 0; w < fv.steps.size(); ++w) add_vector_rows(fv_t, g, {double(x)}, fv.steps[w], fv.values[w]);
    for (std::size_t w = 0; w < nv.steps.size(); ++w) add_vector_rows(nv_t, g, {double(x)}, nv.steps[w], nv.values[w]);
  }
  const auto rev = time_reverse(p, run.marginals);
  for (auto y : c.end_anchors) {
    auto phi = phi_field_from_reversed(rev, y);
    auto res = burgers_residual(phi, p);
    burgers = std::max(burgers, window_max(res, tg, 1.0 - hi, 1.0 - lo));
    for (std::size_t w = 0; w < res.steps.size(); ++w) add_vector_rows(burg_t, g, {double(y)}, res.steps[w], res.values[w]);
    if (!fields) continue;
    auto bv = backward_velocity(phi, g, a);
    for (std::size_t j = 0; j < phi.values.size(); ++j) add_scalar_rows(phi_t, g, {double(y)}, int(j), phi.values[j]);
    for (std::size_t w = 0; w < bv.steps.size(); ++w) add_vector_rows(bv_t, g, {double(y)}, bv.steps[w], bv.values[w]);
  }

  io::Table norms;
  norms.columns = {"m", "T", "a", "hjb", "burgers", "nelson_gap"};
  std::vector<double> row{double(c.m), double(c.steps), a, hjb, burgers, nelson};
  o.summary.set("norm.hjb", hjb);
  o.summary.set("norm.burgers", burgers);
  o.summary.set("norm.nelson_gap", nelson);
  if (!c.alphas.empty()) {
    auto av = averaged_velocities(p);
    for (double alpha : c.alphas) {
      auto v = alpha_velocity(av, alpha);
      auto res = continuity_residual(av.marginals, v, alpha, a, g, tg);
      const double norm = window_max(res, tg, 0.0, 1.0);
      norms.columns.push_back(alpha_label(alpha));
      row.push_back(norm);
      o.summary.set("norm." + alpha_label(alpha), norm);
      for (std::size_t w = 0; w < res.steps.size(); ++w) add_scalar_rows(cont_t, g, {alpha}, res.steps[w], res.values[w]);
      if (fields)
        for (std::size_t w = 0; w < v.steps.size(); ++w) add_vector_rows(av_t, g, {alpha}, v.steps[w], v.values[w]);
    }
  }
  norms.add(std::move(row));
  log_line(log, "residual norms: hjb " + io::format_double(hjb) + ", burgers " + io::format_double(burgers) +
                    ", nelson gap " + io::format_double(nelson));

  io::write_csv(out / "residual_norms.csv", norms);
  io::write_csv(out / "residual_hjb.csv", hjb_t);
  io::write_csv(out / "residual_burgers.csv", burg_t);
  io::write_csv(out / "residual_continuity.csv", cont_t);
  if (fields) {
    io::write_csv(out / "psi.csv", psi_t);
    io::write_csv(out / "phi.csv", phi_t);
    io::write_csv(out / "velocity_forward.csv", fv_t);
    io::write_csv(out / "velocity_backward.csv", bv_t);
    io::write_csv(out / "nelson_forward.csv", nv_t);
    io::write_csv(out / "velocity_alpha.csv", av_t);
  }
  finish(out, o);
  return o;
}

}  // namespace detail

/// Solves and writes summary.txt, history.csv, eta.csv, theta.csv and
/// marginals.csv. Exit 3 on infeasible input (feasibility.txt lists the
/// violations), 4 when max_sweeps runs out (summary has partial=1).
inline RunOutcome run_solve(const RunConfig& c, const std::filesystem::path& out, std::ostream* log = nullptr) {
  std::filesystem::create_directories(out);
  RunOutcome o;
  o.summary = detail::header(c, Command::solve);
  detail::SolvedRun run;
  o.exit_code = detail::solve_and_write(c, out, o.summary, run, log);
  detail::finish(out, o);
  return o;
}

/// Pinned-bridge certificate for the configured coupling: entropy chain,
/// marginal check and sup bridge entropy. Writes summary.txt and
/// certificate_marginals.csv.
inline RunOutcome run_certify(const RunConfig& c, const std::filesystem::path& out, std::ostream* log = nullptr) {
  auto ref = make_reference(c);
  auto pi = make_coupling(c, ref);
  auto q = build_pinned(pi, ref);
  std::filesystem::create_directories(out);
  RunOutcome o;
  o.summary = detail::header(c, Command::certify);
  auto& s = o.summary;
  const auto e = entropy_decomposition(q);
  const auto ms = pinned_marginals(q);
  const auto u = Density::uniform(q.size());
  double worst = 0.0;
  for (const auto& m : ms) worst = std::max(worst, tv_distance(m, u));
  const auto sup = sup_bridge_entropy(ref);
  s.set("path_entropy", e.path);
  s.set("three_point_entropy", e.three_point);
  s.set("coupling_entropy", e.coupling);
  s.set("bridge_term", e.bridge_term);
  s.set("identity_residual", e.residual);
  s.set("max_marginal_tv", worst);
  s.set("endpoint_tv", tv_distance(pinned_endpoint(q), pi));
  s.set("sup_bridge_entropy", sup.discrete);
  s.set("sup_bridge_entropy_argmax", sup.discrete_argmax);
  s.set("sup_bridge_entropy_quadrature", sup.continuum);
  s.set("sup_bridge_entropy_quadrature_argmax", sup.continuum_argmax);
  detail::log_line(log, "H(Q|R) = " + io::format_double(e.path) + ", identity residual " +
                            io::format_double(e.residual) + ", max marginal tv " + io::format_double(worst));
  const auto& g = ref.grid();
  auto t = detail::field_table(g, {"step"}, {"mass"});
  for (std::size_t j = 0; j < ms.size(); ++j) detail::add_scalar_rows(t, g, {}, int(j), ScalarField(ms[j].mass));
  io::write_csv(out / "certificate_marginals.csv", t);
  detail::finish(out, o);
  return o;
}

/// Solve, then psi/phi fields for the anchors, velocities (a grad psi,
/// Nelson forward, a grad phi, averaged blends per alpha), residual fields
/// and residual_norms.csv. Forward quantities are normed over the window,
/// backward ones over its mirror image.
inline RunOutcome run_kinematics(const RunConfig& c, const std::filesystem::path& out, std::ostream* log = nullptr) {
  return detail::kinematic_run(c, out, log, true);
}

/// Same as run_kinematics without the potential and velocity tables.
inline RunOutcome run_residuals(const RunConfig& c, const std::filesystem::path& out, std::ostream* log = nullptr) {
  return detail::kinematic_run(c, out, log, false);
}

inline RunOutcome run_command(Command cmd, const RunConfig& c, const std::filesystem::path& out,
                              std::ostream* log = nullptr) {
  switch (cmd) {
    case Command::solve: return run_solve(c, out, log);
    case Command::certify: return run_certify(c, out, log);
    case Command::kinematics: return run_kinematics(c, out, log);
    case Command::residuals: return run_residuals(c, out, log);
  }
  throw InconsistencyError("run: unknown command");
}

/// Maps an exception to the process exit status.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InfeasibleError*>(&e)) return kInfeasible;
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ConfigurationError*>(&e) ||
      dynamic_cast<const DomainError*>(&e))
    return kValidation;
  return kInternal;
}

}  // namespace bredinger::run
