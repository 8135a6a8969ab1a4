#include <CLI11.hpp>
#include <iostream>

#include "mcm/commands.hpp"
#include "mcm/error.hpp"

int main(int argc, char** argv) {
  mcm::tune_allocator();
  CLI::App app{"mcm: few-step consistency distillation on synthetic spectrogram grids"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  mcm::CommandFlags flags;
  int steps = 0;
  std::string baseline;
  std::size_t width_mult = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key = value config file");
    sub->add_option("--set", overrides, "override a config key (key=value)");
    sub->add_option("--seed", seed, "run seed");
  };
  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset");
  common(gen);
  gen->add_flag("--csv", flags.csv, "also export per-class CSV grids");
  auto* teacher = app.add_subcommand("train-teacher", "train the teacher denoiser");
  common(teacher);
  auto* distill = app.add_subcommand("distill", "distill a consistency student from the teacher");
  common(distill);
  distill->add_option("--steps", steps, "distillation steps");
  auto* sample = app.add_subcommand("sample", "sample grids from a checkpoint");
  common(sample);
  sample->add_option("--steps", steps, "sampling steps");
  sample->add_option("--baseline", baseline, "ddim: teacher DDIM sampler");
  sample->add_flag("--csv", flags.csv, "also export CSV grids");
  auto* longgen = app.add_subcommand("sample-long", "shared restricted long-grid generation");
  common(longgen);
  longgen->add_option("--steps", steps, "sampling steps");
  longgen->add_option("--width-mult", width_mult, "long width as a multiple of the grid width");
  longgen->add_flag("--independent", flags.independent, "also emit the independent-crops baseline");
  longgen->add_flag("--csv", flags.csv, "also export CSV grids");
  auto* eval = app.add_subcommand("eval", "evaluate generated grids against the reference set");
  common(eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  CLI::App* cmd = app.get_subcommands().front();
  auto given = [cmd](const std::string& name) {
    const CLI::Option* opt = cmd->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  if (given("--steps")) flags.steps = steps;
  if (given("--baseline")) flags.baseline = baseline;
  if (given("--width-mult")) flags.width_mult = width_mult;

  mcm::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = mcm::load_config(config_path);
    mcm::apply_overrides(cfg, overrides);
    if (seed) cfg.seed = *seed;
  } catch (const mcm::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return mcm::run_command(cmd->get_name(), cfg, flags, std::cout, std::cerr);
}
