#include "mcm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>

#include "mcm/error.hpp"

namespace mcm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  std::from_chars_result r{};
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars for double is missing on older libstdc++.
    try {
      std::size_t used = 0;
      v = std::stod(text, &used);
      if (used != text.size()) throw ConfigError("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + text + "'");
    }
  } else {
    r = std::from_chars(first, last, v);
    if (r.ec != std::errc() || r.ptr != last) throw ConfigError(key + ": expected an integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <class T>
Setter num(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<T>(k, v); };
}

template <class T, class S>
Setter num(S RunConfig::*section, T S::*field) {
  return [section, field](RunConfig& c, const std::string& k, const std::string& v) {
    (c.*section).*field = parse_number<T>(k, v);
  };
}

Setter grid_dim(std::size_t GridShape::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    c.data.grid.*field = parse_number<std::size_t>(k, v);
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", num(&RunConfig::seed)},
      {"out_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
      {"device",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "cpu") throw ConfigError(k + ": only 'cpu' is supported");
         c.device = v;
       }},
      {"data.num_samples", num(&RunConfig::data, &DatasetSpec::num_samples)},
      {"data.num_classes", num(&RunConfig::data, &DatasetSpec::num_classes)},
      {"data.channels", grid_dim(&GridShape::channels)},
      {"data.height", grid_dim(&GridShape::height)},
      {"data.width", grid_dim(&GridShape::width)},
      {"diffusion.num_steps", num(&RunConfig::diffusion, &DiffusionConfig::num_steps)},
      {"diffusion.beta_min", num(&RunConfig::diffusion, &DiffusionConfig::beta_min)},
      {"diffusion.beta_max", num(&RunConfig::diffusion, &DiffusionConfig::beta_max)},
      {"model.patch_h", num(&RunConfig::model, &DenoiserConfig::patch_h)},
      {"model.patch_w", num(&RunConfig::model, &DenoiserConfig::patch_w)},
      {"model.embed_dim", num(&RunConfig::model, &DenoiserConfig::embed_dim)},
      {"model.hidden", num(&RunConfig::model, &DenoiserConfig::hidden)},
      {"model.blocks", num(&RunConfig::model, &DenoiserConfig::blocks)},
      {"model.time_dim", num(&RunConfig::model, &DenoiserConfig::time_dim)},
      {"model.skip_knots", num(&RunConfig::model, &DenoiserConfig::skip_knots)},
      {"teacher.epochs", num(&RunConfig::teacher, &TeacherTrainConfig::epochs)},
      {"teacher.batch", num(&RunConfig::teacher, &TeacherTrainConfig::batch)},
      {"teacher.lr", num(&RunConfig::teacher, &TeacherTrainConfig::lr)},
      {"teacher.lr_final", num(&RunConfig::teacher, &TeacherTrainConfig::lr_final)},
      {"teacher.weight_decay", num(&RunConfig::teacher, &TeacherTrainConfig::weight_decay)},
      {"teacher.cfg_dropout", num(&RunConfig::teacher, &TeacherTrainConfig::cfg_dropout)},
      {"teacher.path", [](RunConfig& c, const std::string&, const std::string& v) { c.teacher_path = v; }},
      {"distill.steps", num(&RunConfig::distill_steps)},
      {"distill.k", num(&RunConfig::distill, &DistillConfig::k)},
      {"distill.w", num(&RunConfig::distill, &DistillConfig::w)},
      {"distill.lambda", num(&RunConfig::distill, &DistillConfig::lambda)},
      {"distill.gamma", num(&RunConfig::distill, &DistillConfig::gamma)},
      {"distill.ema_rate", num(&RunConfig::distill, &DistillConfig::ema_rate)},
      {"distill.lr", num(&RunConfig::distill, &DistillConfig::lr)},
      {"distill.disc_lr", num(&RunConfig::distill, &DistillConfig::disc_lr)},
      {"distill.weight_decay", num(&RunConfig::distill, &DistillConfig::weight_decay)},
      {"distill.huber_delta", num(&RunConfig::distill, &DistillConfig::huber_delta)},
      {"distill.batch", num(&RunConfig::distill, &DistillConfig::batch)},
      {"distill.distance",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "l2") c.distill.distance = Distance::L2;
         else if (v == "huber") c.distill.distance = Distance::Huber;
         else throw ConfigError(k + ": expected l2 or huber, got '" + v + "'");
       }},
      {"distill.sigma_data", num(&RunConfig::sigma_data)},
      {"distill.time_scale", num(&RunConfig::time_scale)},
      {"disc.hidden", num(&RunConfig::disc_hidden)},
      {"features.seed", num(&RunConfig::feature_seed)},
      {"sample.steps", num(&RunConfig::sample, &SampleConfig::steps)},
      {"sample.count", num(&RunConfig::sample, &SampleConfig::count)},
      {"sample.class", num(&RunConfig::sample, &SampleConfig::cls)},
      {"sample.w", num(&RunConfig::sample, &SampleConfig::w)},
      {"sample.model",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "ema" && v != "student") throw ConfigError(k + ": expected ema or student");
         c.sample.model = v;
       }},
      {"sample.baseline",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "none" && v != "ddim") throw ConfigError(k + ": expected none or ddim");
         c.sample.baseline = v;
       }},
      {"sample.csv", [](RunConfig& c, const std::string& k, const std::string& v) { c.sample.csv = parse_bool(k, v); }},
      {"sample.path", [](RunConfig& c, const std::string&, const std::string& v) { c.student_path = v; }},
      {"long.height", num(&RunConfig::long_gen, &LongConfig::height)},
      {"long.width", num(&RunConfig::long_gen, &LongConfig::width)},
      {"long.step", num(&RunConfig::long_gen, &LongConfig::step)},
      {"long.batch", num(&RunConfig::long_gen, &LongConfig::batch)},
      {"long.class", num(&RunConfig::long_gen, &LongConfig::cls)},
      {"long.independent",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.long_gen.independent = parse_bool(k, v); }},
      {"eval.samples", [](RunConfig& c, const std::string&, const std::string& v) { c.eval.samples = v; }},
      {"eval.labels", [](RunConfig& c, const std::string&, const std::string& v) { c.eval.labels = v; }},
      {"eval.probe_iterations", num(&RunConfig::eval, &EvalConfig::probe_iterations)},
  };
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(*this, key, value);
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : setters()) out.push_back(k);
  return out;
}

void RunConfig::validate() const {
  data.validate();
  if (diffusion.num_steps < 1) throw ConfigError("diffusion.num_steps must be >= 1");
  schedule();
  denoiser().validate();
  teacher.validate();
  distill.validate(diffusion.num_steps);
  if (!(sigma_data > 0.0) || !(time_scale > 0.0)) throw ConfigError("distill.sigma_data and distill.time_scale must be > 0");
  if (disc_hidden == 0) throw ConfigError("disc.hidden must be positive");
  if (sample.steps < 1 || sample.steps > diffusion.num_steps) throw ConfigError("sample.steps must lie in [1, diffusion.num_steps]");
  if (sample.count == 0) throw ConfigError("sample.count must be positive");
  if (sample.cls < -1 || sample.cls >= data.num_classes) throw ConfigError("sample.class must be -1 or a class id");
  if (!(sample.w >= 0.0)) throw ConfigError("sample.w must be >= 0");
  if (long_gen.cls < 0 || long_gen.cls >= data.num_classes) throw ConfigError("long.class must be a class id");
  if (long_gen.batch == 0) throw ConfigError("long.batch must be >= 1");
  if (eval.probe_iterations == 0) throw ConfigError("eval.probe_iterations must be positive");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

std::filesystem::path RunConfig::teacher_checkpoint() const {
  return teacher_path.empty() ? out("teacher.mcmp") : std::filesystem::path(teacher_path);
}

std::filesystem::path RunConfig::student_checkpoint() const {
  return student_path.empty() ? out("ema.mcmp") : std::filesystem::path(student_path);
}

NoiseSchedule RunConfig::schedule() const {
  return make_schedule(diffusion.num_steps, diffusion.beta_min, diffusion.beta_max);
}

DenoiserConfig RunConfig::denoiser() const {
  DenoiserConfig c = model;
  c.grid = data.grid;
  c.num_classes = data.num_classes;
  c.num_steps = diffusion.num_steps;
  c.beta_min = diffusion.beta_min;
  c.beta_max = diffusion.beta_max;
  return c;
}

FeatureNetConfig RunConfig::features() const {
  FeatureNetConfig f;
  f.grid = data.grid;
  return f;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  RunConfig cfg;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    cfg.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
}

}  // namespace mcm
