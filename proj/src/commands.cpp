#include "mcm/commands.hpp"

#include <chrono>
#include <fstream>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <sstream>

#include "mcm/consistency.hpp"
#include "mcm/error.hpp"
#include "mcm/eval.hpp"
#include "mcm/longgen.hpp"
#include "mcm/rng.hpp"
#include "mcm/teacher.hpp"

namespace mcm {

namespace {

// Long-grid extents that the crop layout cannot tile; reported with exit code 2.
class CropLayoutError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

std::uint64_t derived(const RunConfig& cfg, const std::string& label) { return Rng::split(cfg.seed, label).next_u64(); }

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  return out;
}

void write_labels(const std::filesystem::path& path, std::span<const int> labels) {
  auto out = open_out(path);
  out << "label\n";
  for (int l : labels) out << l << '\n';
}

std::vector<int> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read labels " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "label") throw FormatError("labels file must start with a 'label' header", 0);
  std::vector<int> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(std::stoi(line));
    } catch (const std::exception&) {
      throw FormatError("bad label '" + line + "' in " + path.string(), 0);
    }
  }
  return out;
}

ParamSet require_params(const std::filesystem::path& path, const char* what) {
  if (!std::filesystem::exists(path)) throw IoError(std::string("missing ") + what + " checkpoint " + path.string());
  return load_params(path);
}

std::vector<SpectrogramSample> dataset(const RunConfig& cfg) {
  DatasetSpec spec = cfg.data;
  spec.seed = data_seed(cfg);
  return synth_dataset(spec);
}

DiscHeadSet make_disc(const RunConfig& cfg, const FeatureNet& fnet) {
  DiscHeadConfig dc;
  for (std::size_t k = 0; k < fnet.num_taps(); ++k) dc.input_dims.push_back(fnet.tap_dim(k));
  dc.hidden = cfg.disc_hidden;
  dc.num_classes = cfg.data.num_classes;
  return DiscHeadSet(dc, derived(cfg, "disc-init"));
}

int label_of(const RunConfig& cfg, std::size_t i) {
  return cfg.sample.cls >= 0 ? cfg.sample.cls : static_cast<int>(i % static_cast<std::size_t>(cfg.data.num_classes));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::uint64_t sample_seed(const RunConfig& cfg, std::size_t i) { return derived(cfg, "sample-" + std::to_string(i)); }
std::uint64_t data_seed(const RunConfig& cfg) { return derived(cfg, "data"); }

RunConfig resolve(const std::string& command, RunConfig cfg, const CommandFlags& flags) {
  if (flags.steps) {
    if (*flags.steps < 0) throw ConfigError("--steps must be >= 0");
    if (command == "distill") cfg.distill_steps = static_cast<std::uint64_t>(*flags.steps);
    else if (command == "sample" || command == "sample-long") cfg.sample.steps = *flags.steps;
    else throw ConfigError("--steps is not accepted by " + command);
  }
  if (flags.baseline) {
    if (command != "sample") throw ConfigError("--baseline is only accepted by sample");
    cfg.set("sample.baseline", *flags.baseline);
  }
  if (flags.width_mult) {
    if (command != "sample-long") throw ConfigError("--width-mult is only accepted by sample-long");
    if (*flags.width_mult == 0) throw ConfigError("--width-mult must be >= 1");
    cfg.long_gen.width = *flags.width_mult * cfg.data.grid.width;
    cfg.long_gen.height = cfg.data.grid.height;
  }
  if (flags.independent) cfg.long_gen.independent = true;
  if (flags.csv) cfg.sample.csv = true;
  cfg.validate();
  if (command == "sample-long") {
    try {
      make_crops(cfg.long_gen.height, cfg.long_gen.width, cfg.data.grid.height, cfg.data.grid.width,
                 cfg.long_gen.step);
    } catch (const ConfigError& e) {
      throw CropLayoutError(e.what());
    }
  }
  return cfg;
}

void cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  const auto data = dataset(cfg);
  std::vector<int> labels;
  for (const auto& s : data) labels.push_back(s.label);
  save_grid(stack_grids(data), cfg.out("data.mcmg"));
  write_labels(cfg.out("data_labels.csv"), labels);
  if (cfg.sample.csv) {
    for (int c = 0; c < cfg.data.num_classes && static_cast<std::size_t>(c) < data.size(); ++c) {
      save_grid_csv(data[static_cast<std::size_t>(c)].grid, cfg.out("data_" + std::to_string(c) + ".csv"));
    }
  }
  log << "wrote " << data.size() << " samples to " << cfg.out("data.mcmg").string() << '\n';
}

void cmd_train_teacher(const RunConfig& cfg, std::ostream& log) {
  const auto data = dataset(cfg);
  const auto sched = cfg.schedule();
  DenoiserModel model(cfg.denoiser(), derived(cfg, "teacher-init"));
  const auto rows = train_teacher(model, data, sched, cfg.teacher, derived(cfg, "teacher-train"));
  save_params(model.params(), cfg.out("teacher.mcmp"));
  auto csv = open_out(cfg.out("teacher_loss.csv"));
  csv << "step,loss\n";
  for (const auto& r : rows) csv << r.step << ',' << r.loss << '\n';
  log << "teacher: " << rows.size() << " steps";
  if (!rows.empty()) log << ", final loss " << rows.back().loss;
  log << '\n';
}

void cmd_distill(const RunConfig& cfg, std::ostream& log) {
  DenoiserModel teacher(cfg.denoiser(), require_params(cfg.teacher_checkpoint(), "teacher"));
  const auto data = dataset(cfg);
  const auto sched = cfg.schedule();
  const auto csched = ConsistencySchedule::make(sched, cfg.sigma_data, cfg.time_scale);
  FeatureNet fnet(cfg.features(), cfg.feature_seed);
  auto result = distill_train(teacher, data, fnet, make_disc(cfg, fnet), sched, csched, cfg.distill,
                              cfg.distill_steps, derived(cfg, "distill"));
  save_params(result.state.student, cfg.out("student.mcmp"));
  save_params(result.state.ema, cfg.out("ema.mcmp"));
  save_params(result.state.disc, cfg.out("disc.mcmp"));
  auto csv = open_out(cfg.out("distill_loss.csv"));
  csv << "step,distil,adv_g,adv_d\n";
  for (const auto& r : result.log) csv << r.step << ',' << r.distil << ',' << r.adv_g << ',' << r.adv_d << '\n';
  log << "distill: " << result.log.size() << " steps\n";
}

void cmd_sample(const RunConfig& cfg, std::ostream& log) {
  const auto sched = cfg.schedule();
  const bool ddim = cfg.sample.baseline == "ddim";
  const auto path = ddim ? cfg.teacher_checkpoint()
                         : (cfg.student_path.empty() ? cfg.out(cfg.sample.model + ".mcmp") : cfg.student_checkpoint());
  DenoiserModel model(cfg.denoiser(), require_params(path, ddim ? "teacher" : "student"));
  const auto csched = ConsistencySchedule::make(sched, cfg.sigma_data, cfg.time_scale);
  const auto ts = uniform_timesteps(sched.num_steps, cfg.sample.steps);
  std::vector<Tensor> grids;
  std::vector<int> labels;
  std::vector<double> latency;
  for (std::size_t i = 0; i < cfg.sample.count; ++i) {
    const int label = label_of(cfg, i);
    const CondToken c[1] = {CondToken::cls(label)};
    const auto t0 = std::chrono::steady_clock::now();
    Tensor g = ddim ? ddim_sample(model, c, cfg.sample.w, ts, sched, sample_seed(cfg, i))
                    : cm_sample(model, csched, sched, c, cfg.sample.steps, sample_seed(cfg, i));
    latency.push_back(seconds_since(t0));
    g = std::move(g).reshaped(cfg.data.grid.shape());
    if (cfg.sample.csv) save_grid_csv(g, cfg.out("sample_" + std::to_string(i) + ".csv"));
    grids.push_back(std::move(g));
    labels.push_back(label);
  }
  save_grid(stack_grids(grids), cfg.out("samples.mcmg"));
  write_labels(cfg.out("samples_labels.csv"), labels);
  double total = 0.0;
  for (double t : latency) total += t;
  auto json = open_out(cfg.out("timing.json"));
  json << "{\n  \"sampler\": \"" << (ddim ? "ddim" : "consistency") << "\",\n  \"steps\": " << cfg.sample.steps
       << ",\n  \"count\": " << latency.size() << ",\n  \"mean_latency_seconds\": " << total / latency.size()
       << ",\n  \"per_sample_seconds\": [";
  for (std::size_t i = 0; i < latency.size(); ++i) json << (i ? ", " : "") << latency[i];
  json << "]\n}\n";
  log << "sample: " << grids.size() << " grids, mean latency " << total / latency.size() << " s\n";
}

void cmd_sample_long(const RunConfig& cfg, std::ostream& log) {
  const auto sched = cfg.schedule();
  const auto path = cfg.student_path.empty() ? cfg.out(cfg.sample.model + ".mcmp") : cfg.student_checkpoint();
  DenoiserModel model(cfg.denoiser(), require_params(path, "student"));
  const auto csched = ConsistencySchedule::make(sched, cfg.sigma_data, cfg.time_scale);
  const auto& L = cfg.long_gen;
  const auto g = cfg.data.grid;
  const std::uint64_t seed = sample_seed(cfg, 0);
  const CondToken c = CondToken::cls(L.cls);
  const Tensor shared = long_sample(model, csched, sched, L.height, L.width, c, cfg.sample.steps, L.step, seed, L.batch);
  save_grid(shared, cfg.out("long.mcmg"));
  if (cfg.sample.csv) save_grid_csv(shared, cfg.out("long.csv"));
  log << "sample-long: " << shared.dim(1) << "x" << shared.dim(2) << " grid\n";
  if (!L.independent) return;
  const bool tiles = L.height == g.height && L.width % g.width == 0;
  const Tensor indep = independent_long_sample(model, csched, sched, L.height, L.width, c, cfg.sample.steps,
                                               tiles ? g.width : L.step, seed);
  save_grid(indep, cfg.out("long_independent.mcmg"));
  if (cfg.sample.csv) save_grid_csv(indep, cfg.out("long_independent.csv"));
  if (L.width / g.width >= 2 && L.width % g.width == 0) {
    const double s = seam_discontinuity(shared, g.width);
    const double i = seam_discontinuity(indep, g.width);
    auto json = open_out(cfg.out("seam.json"));
    json << "{\n  \"shared\": " << s << ",\n  \"independent\": " << i << ",\n  \"ratio\": " << (i > 0 ? s / i : 0.0)
         << "\n}\n";
    log << "seam discontinuity: shared " << s << ", independent " << i << '\n';
  }
}

void cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const auto samples_path = cfg.eval.samples.empty() ? cfg.out("samples.mcmg") : std::filesystem::path(cfg.eval.samples);
  const auto labels_path =
      cfg.eval.labels.empty() ? cfg.out("samples_labels.csv") : std::filesystem::path(cfg.eval.labels);
  if (!std::filesystem::exists(samples_path)) throw IoError("missing samples " + samples_path.string());
  const Tensor gen = load_grid(samples_path);
  const auto labels = read_labels(labels_path);
  const auto real = dataset(cfg);
  if (batch_size(gen, cfg.data.grid) != real.size()) {
    log << "warning: " << batch_size(gen, cfg.data.grid) << " generated vs " << real.size() << " reference samples\n";
  }
  FeatureNet fnet(cfg.features(), cfg.feature_seed);
  ClassProbe probe(fnet, real, cfg.data.num_classes, cfg.eval.probe_iterations);
  const auto report = evaluate(gen, labels, real, fnet, probe);
  auto json = open_out(cfg.out("report.json"));
  json << report.to_json();
  auto csv = open_out(cfg.out("report.csv"));
  csv << report.csv_header() << report.csv_row();
  log << report.to_json();
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 1 << 28);
#endif
}

int run_command(const std::string& command, const RunConfig& base, const CommandFlags& flags, std::ostream& out,
                std::ostream& err) {
  try {
    const RunConfig cfg = resolve(command, base, flags);
    if (command == "gen-data") cmd_gen_data(cfg, out);
    else if (command == "train-teacher") cmd_train_teacher(cfg, out);
    else if (command == "distill") cmd_distill(cfg, out);
    else if (command == "sample") cmd_sample(cfg, out);
    else if (command == "sample-long") cmd_sample_long(cfg, out);
    else if (command == "eval") cmd_eval(cfg, out);
    else throw ConfigError("unknown command '" + command + "'");
    return 0;
  } catch (const CropLayoutError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace mcm
