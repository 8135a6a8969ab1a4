#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcm/consistency.hpp"
#include "mcm/data.hpp"
#include "mcm/models.hpp"
#include "mcm/teacher.hpp"

namespace mcm {

struct DiffusionConfig {
  int num_steps = 100;
  double beta_min = 1e-3;
  double beta_max = 0.1;
};

struct SampleConfig {
  int steps = 4;
  std::size_t count = 30;
  int cls = -1;  // -1 cycles through the classes
  std::string model = "ema";  // ema | student
  std::string baseline = "none";  // none | ddim
  double w = 2.0;  // guidance of the DDIM baseline
  bool csv = false;
};

struct LongConfig {
  std::size_t height = 16;
  std::size_t width = 256;
  std::size_t step = 8;
  std::size_t batch = 8;
  int cls = 0;
  bool independent = false;
};

struct EvalConfig {
  std::string samples;  // grid batch; defaults to <out_dir>/samples.mcmg
  std::string labels;   // defaults to <out_dir>/samples_labels.csv
  std::size_t probe_iterations = 400;
};

/// Every tunable of every command. Keys are `section.name`.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string device = "cpu";
  DatasetSpec data;
  DiffusionConfig diffusion;
  DenoiserConfig model;
  TeacherTrainConfig teacher;
  DistillConfig distill;
  std::uint64_t distill_steps = 1000;
  double sigma_data = 0.5;
  double time_scale = 10.0;
  std::size_t disc_hidden = 32;
  std::uint64_t feature_seed = 11;
  SampleConfig sample;
  LongConfig long_gen;
  EvalConfig eval;
  std::string teacher_path;  // default <out_dir>/teacher.mcmp
  std::string student_path;  // default <out_dir>/ema.mcmp

  /// Sets one key from its text form. Throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Cross-field checks run before any command does work.
  void validate() const;

  std::filesystem::path out(const std::string& name) const { return std::filesystem::path(out_dir) / name; }
  std::filesystem::path teacher_checkpoint() const;
  std::filesystem::path student_checkpoint() const;

  NoiseSchedule schedule() const;
  DenoiserConfig denoiser() const;
  FeatureNetConfig features() const;

  static std::vector<std::string> keys();
};

/// Parses `key = value` lines; `#` starts a comment. Throws IoError if unreadable.
RunConfig load_config(const std::filesystem::path& path);
/// Applies `key=value` overrides in order.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);

}  // namespace mcm
