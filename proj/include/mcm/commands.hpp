#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>

#include "mcm/config.hpp"

namespace mcm {

/// Command-specific flags that override config keys.
struct CommandFlags {
  std::optional<int> steps;               // distill.steps or sample.steps
  std::optional<std::string> baseline;    // sample.baseline
  std::optional<std::size_t> width_mult;  // long.width = mult * data.width
  bool independent = false;
  bool csv = false;
};

/// Folds flags into a copy of the config for `command` and validates it.
RunConfig resolve(const std::string& command, RunConfig cfg, const CommandFlags& flags);

/// Seed of sample `i` in `sample` and `sample-long`.
std::uint64_t sample_seed(const RunConfig& cfg, std::size_t i);
std::uint64_t data_seed(const RunConfig& cfg);

void cmd_gen_data(const RunConfig& cfg, std::ostream& log);
void cmd_train_teacher(const RunConfig& cfg, std::ostream& log);
void cmd_distill(const RunConfig& cfg, std::ostream& log);
void cmd_sample(const RunConfig& cfg, std::ostream& log);
void cmd_sample_long(const RunConfig& cfg, std::ostream& log);
void cmd_eval(const RunConfig& cfg, std::ostream& log);

/// Keeps freed tape buffers in the heap instead of returning them to the OS
/// each step (glibc only; a no-op elsewhere). Call once at startup.
void tune_allocator();

/// Runs a resolved command. Returns the process exit code:
/// 0 success, 1 validation failure, 2 missing input or I/O failure.
int run_command(const std::string& command, const RunConfig& cfg, const CommandFlags& flags, std::ostream& out,
                std::ostream& err);

}  // namespace mcm
