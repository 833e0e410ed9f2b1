#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "bredinger/parallel.hpp"
#include "bredinger/run.hpp"

namespace run = bredinger::run;

int main(int argc, char** argv) {
  CLI::App app{"Entropy minimization with incompressibility and endpoint constraints on a discrete torus"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  int threads = 0;
  bool quiet = false;
  const std::pair<run::Command, const char*> commands[] = {
      {run::Command::solve, "solve and export potentials with the sweep history"},
      {run::Command::certify, "pinned-bridge feasibility certificate for the coupling"},
      {run::Command::kinematics, "solve, then export velocity and PDE residual fields"},
      {run::Command::residuals, "solve, then residual fields and norms only"},
  };
  for (const auto& [cmd, help] : commands) {
    auto* sub = app.add_subcommand(run::command_name(cmd), help);
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--out", out_dir, "output directory (overrides the config's output)");
    sub->add_option("--threads", threads, "worker threads, 0 = all cores")->check(CLI::NonNegativeNumber);
    sub->add_flag("--quiet", quiet, "no progress output");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return run::kValidation;
  }

  const auto cmd = run::parse_command(app.get_subcommands().front()->get_name());
  std::ostream* log = quiet ? nullptr : &std::cerr;
  try {
    bredinger::set_thread_count(threads);
    auto cfg = run::load_config(config_path);
    if (cfg.command && *cfg.command != cmd)
      throw bredinger::ValidationError("config: field 'command': config is for '" + run::command_name(*cfg.command) +
                                       "', invoked as '" + run::command_name(cmd) + "'");
    const std::filesystem::path out = out_dir.empty() ? cfg.output : std::filesystem::path(out_dir);
    auto outcome = run::run_command(cmd, cfg, out, log);
    if (log) *log << run::command_name(cmd) << ": artifacts in " << out.string() << ", exit " << outcome.exit_code << '\n';
    return outcome.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return run::exit_code_for(e);
  }
}
