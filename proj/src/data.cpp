#include "mcm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"
#include "mcm/error.hpp"
#include "mcm/rng.hpp"

namespace mcm {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Family {
  int kind = 0;        // 0 harmonic stack, 1 chirp, 2 pulses
  double shift = 1.0;  // frequency scaling for repeated families
};

double gauss(double d, double s) { return std::exp(-d * d / (2.0 * s * s)); }

// Pattern intensity in [0, 1] at (row, col); `width` widens features per channel.
struct Pattern {
  int kind;
  double a, b, c;  // family parameters drawn once per sample
  double height;

  double at(double y, double x, double width) const {
    switch (kind) {
      case 0: {  // a = fundamental row, b = modulation period, c = modulation phase
        double v = 0.0, amp = 1.0;
        for (int h = 1; a * h < height + 2.0; ++h, amp *= 0.75) v += amp * gauss(y - a * h, 0.6 * width);
        const double mod = 0.75 + 0.25 * std::sin(kTwoPi * x / b + c);
        return std::min(1.0, v * mod);
      }
      case 1: {  // a = start row, b = slope (rows per column)
        const double row = std::fmod(a + b * x + 4.0 * height, height);
        double dist = std::abs(y - row);
        dist = std::min(dist, height - dist);
        return gauss(dist, 0.8 * width);
      }
      default: {  // a = period, b = phase, c = frequency decay
        const double q = 0.5 + 0.5 * std::cos(kTwoPi * (x - b) / a);
        return q * q * q * std::exp(-y / (c * width));
      }
    }
  }
};

Pattern draw_pattern(const Family& fam, double height, Rng& rng) {
  Pattern p{fam.kind, 0, 0, 0, height};
  switch (fam.kind) {
    case 0:
      p.a = rng.uniform(1.5, 4.0) * fam.shift;
      p.b = rng.uniform(16.0, 48.0);
      p.c = rng.uniform(0.0, kTwoPi);
      break;
    case 1:
      p.a = rng.uniform(0.0, height);
      p.b = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 0.45) * fam.shift;
      break;
    default:
      p.a = rng.uniform(6.0, 10.0) / fam.shift;
      p.b = rng.uniform(0.0, p.a);
      p.c = rng.uniform(4.0, 10.0);
      break;
  }
  return p;
}

void check_grid_tensor(const Tensor& grid) {
  if (grid.rank() < 1) throw StructuralError("grid must have rank >= 1");
}

}  // namespace

void DatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
  if (num_samples == 0) throw ConfigError("data.num_samples must be positive");
  if (grid.channels == 0 || grid.height == 0 || grid.width == 0) throw ConfigError("grid dims must be positive");
}

std::vector<SpectrogramSample> synth_dataset(const DatasetSpec& spec) {
  spec.validate();
  const auto& g = spec.grid;
  std::vector<SpectrogramSample> out;
  out.reserve(spec.num_samples);
  for (std::size_t i = 0; i < spec.num_samples; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
    auto rng = Rng::split(spec.seed, "sample-" + std::to_string(i));
    const Family fam{label % 3, 1.0 + 0.35 * (label / 3)};
    const Pattern pat = draw_pattern(fam, static_cast<double>(g.height), rng);
    Tensor grid(g.shape());
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double width = 1.0 + 0.25 * static_cast<double>(c);
      const double amp = 1.0 - 0.1 * static_cast<double>(c);
      for (std::size_t y = 0; y < g.height; ++y) {
        for (std::size_t x = 0; x < g.width; ++x) {
          const double p = pat.at(static_cast<double>(y), static_cast<double>(x), width);
          grid[(c * g.height + y) * g.width + x] = std::clamp(2.0 * amp * p - 1.0, -1.0, 1.0);
        }
      }
    }
    out.push_back({std::move(grid), label});
  }
  return out;
}

Tensor stack_grids(std::span<const SpectrogramSample> samples) {
  std::vector<Tensor> grids;
  grids.reserve(samples.size());
  for (const auto& s : samples) grids.push_back(s.grid);
  return stack_grids(grids);
}

Tensor stack_grids(std::span<const Tensor> grids) {
  if (grids.empty()) throw StructuralError("stack_grids of nothing");
  Shape shape{grids.size()};
  shape.insert(shape.end(), grids[0].shape().begin(), grids[0].shape().end());
  std::vector<double> data;
  data.reserve(shape_size(shape));
  for (const auto& g : grids) {
    if (g.shape() != grids[0].shape()) throw StructuralError("stack_grids: grids differ in shape");
    data.insert(data.end(), g.data().begin(), g.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor unstack_grid(const Tensor& batch, std::size_t i) {
  if (batch.rank() < 2) throw StructuralError("unstack_grid needs a batch tensor");
  Tensor row = slice_rows(batch, i, i + 1);
  Shape shape(batch.shape().begin() + 1, batch.shape().end());
  return std::move(row).reshaped(std::move(shape));
}

std::vector<std::uint8_t> encode_grid(const Tensor& grid) {
  check_grid_tensor(grid);
  detail::ByteWriter w;
  w.bytes("MCMG");
  w.u32(kGridFormatVersion);
  w.u32(static_cast<std::uint32_t>(grid.rank()));
  for (auto d : grid.shape()) w.u64(d);
  w.f64s(grid.data());
  return w.take();
}

Tensor decode_grid(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("MCMG");
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kGridFormatVersion) {
    throw FormatError("unsupported MCMG version " + std::to_string(version), version_at);
  }
  const auto rank_at = r.offset();
  const auto rank = r.u32("rank");
  if (rank == 0) throw FormatError("grid rank must be positive", rank_at);
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto at = r.offset();
    const auto d = r.u64("dims");
    if (d == 0) throw FormatError("zero dimension", at);
    shape.push_back(static_cast<std::size_t>(d));
  }
  auto values = r.f64s(shape_size(shape), "grid values");
  if (!r.at_end()) throw FormatError("trailing bytes after grid values", r.offset());
  return Tensor(std::move(shape), std::move(values));
}

void save_grid(const Tensor& grid, const std::filesystem::path& path) {
  detail::write_file(path, encode_grid(grid));
}

Tensor load_grid(const std::filesystem::path& path) { return decode_grid(detail::read_file(path)); }

void save_grid_csv(const Tensor& grid, const std::filesystem::path& path) {
  if (grid.rank() != 3) throw StructuralError("CSV export expects a [C, H, W] grid");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  const std::size_t C = grid.dim(0), H = grid.dim(1), W = grid.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        if (x) out << ',';
        out << grid[(c * H + y) * W + x];
      }
      out << '\n';
    }
  }
}

}  // namespace mcm
