// nsd: budget | expert | distill | eval | export
//
//   nsd distill --config run.cfg --set distill.iterations=200
//
// NSD_THREADS caps the worker count for expert training and evaluation.

#include <iostream>

#include "CLI11.hpp"
#include "nsd/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Spectral-decomposition dataset distillation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string checkpoint, image_path;
  bool show_config = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "override one key, e.g. --set budget.ipc=1");
    cmd->add_flag("--print-config", show_config, "print the resolved config before running");
  };
  auto* budget = app.add_subcommand("budget", "report storage of the decomposition layout");
  auto* expert = app.add_subcommand("expert", "train expert trajectories");
  auto* distill = app.add_subcommand("distill", "run or resume distillation");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  auto* exp = app.add_subcommand("export", "write synthesized images as PGM/PPM");
  for (auto* c : {budget, expert, distill, eval, exp}) add_common(c);
  for (auto* c : {eval, exp})
    c->add_option("--checkpoint", checkpoint, "state file (default: <output.dir>/checkpoint.nsdt)");
  exp->add_option("--out", image_path, "image path (default: <output.dir>/images.pgm)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : nsd::kExitConfig;
  }

  return nsd::run_guarded(
      [&]() -> int {
        const std::filesystem::path path(config_path);
        const nsd::RunConfig cfg =
            nsd::load_config(config_path.empty() ? nullptr : &path, overrides);
        if (show_config) std::cout << nsd::print_config(cfg);
        if (budget->parsed()) return nsd::cmd_budget(cfg, std::cout);
        if (expert->parsed()) return nsd::cmd_expert(cfg, std::cout);
        if (distill->parsed()) return nsd::cmd_distill(cfg, std::cout);
        if (eval->parsed()) return nsd::cmd_eval(cfg, checkpoint, std::cout);
        return nsd::cmd_export(cfg, checkpoint, image_path, std::cout);
      },
      std::cerr);
}
