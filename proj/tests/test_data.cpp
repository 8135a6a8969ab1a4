#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mcm/data.hpp"
#include "mcm/error.hpp"
#include "mcm/models.hpp"
#include "support.hpp"

using namespace mcm;
using namespace mcm::testing;

namespace {

DatasetSpec small_spec(std::uint64_t seed = 0) {
  DatasetSpec s;
  s.num_samples = 300;
  s.num_classes = 3;
  s.grid = GridShape{4, 16, 32};
  s.seed = seed;
  return s;
}

std::filesystem::path temp_dir() {
  auto p = std::filesystem::temp_directory_path() / "mcm_test_data";
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("dataset is deterministic, labelled round robin and bounded") {
  const auto a = synth_dataset(small_spec(4));
  const auto b = synth_dataset(small_spec(4));
  const auto c = synth_dataset(small_spec(5));
  REQUIRE(a.size() == 300);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].label == static_cast<int>(i % 3));
    CHECK(a[i].grid == b[i].grid);
    CHECK(a[i].grid.shape() == Shape{4, 16, 32});
    for (double v : a[i].grid.data()) {
      REQUIRE(v >= -1.0);
      REQUIRE(v <= 1.0);
    }
    differs = differs || !(a[i].grid == c[i].grid);
  }
  CHECK(differs);
  // A prefix of a bigger dataset is the smaller dataset.
  auto big = small_spec(4);
  big.num_samples = 400;
  CHECK(synth_dataset(big)[299].grid == a[299].grid);
}

TEST_CASE("dataset spec validation") {
  auto s = small_spec();
  s.num_classes = 1;
  CHECK_THROWS_AS(synth_dataset(s), ConfigError);
  s = small_spec();
  s.num_samples = 0;
  CHECK_THROWS_AS(synth_dataset(s), ConfigError);
  s = small_spec();
  s.grid.height = 0;
  CHECK_THROWS_AS(synth_dataset(s), ConfigError);
}

TEST_CASE("classes are separable by nearest centroid in frozen-feature space") {
  const auto train = synth_dataset(small_spec(1));
  auto hs = small_spec(2);
  hs.num_samples = 150;
  const auto hold = synth_dataset(hs);
  FeatureNet fnet(FeatureNetConfig{small_spec().grid}, 11);
  const Tensor ft = fnet.pooled(stack_grids(train));
  const Tensor fh = fnet.pooled(stack_grids(hold));
  const std::size_t d = ft.cols();
  std::vector<std::vector<double>> cent(3, std::vector<double>(d, 0.0));
  std::vector<int> count(3, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) cent[train[i].label][j] += ft[i * d + j];
    ++count[train[i].label];
  }
  for (int k = 0; k < 3; ++k) {
    for (double& v : cent[k]) v /= count[k];
  }
  int correct = 0;
  for (std::size_t i = 0; i < hold.size(); ++i) {
    int best = -1;
    double best_d = 1e300;
    for (int k = 0; k < 3; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) dist += (fh[i * d + j] - cent[k][j]) * (fh[i * d + j] - cent[k][j]);
      if (dist < best_d) best_d = dist, best = k;
    }
    correct += best == hold[i].label;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(hold.size()) > 0.9);
  for (int a = 0; a < 3; ++a) {
    for (int b = a + 1; b < 3; ++b) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) dist += (cent[a][j] - cent[b][j]) * (cent[a][j] - cent[b][j]);
      CHECK(dist > 0.0);
    }
  }
}

TEST_CASE("stack and unstack") {
  const auto a = synth_dataset(small_spec());
  const Tensor batch = stack_grids(std::span(a).subspan(0, 5));
  CHECK(batch.shape() == Shape{5, 4, 16, 32});
  CHECK(unstack_grid(batch, 3) == a[3].grid);
  CHECK_THROWS(unstack_grid(batch, 5));
}

TEST_CASE("grid format round trip and layout") {
  Tensor g({2, 2, 2}, {1, -2, 3.5, 4, 5, 6, 7, -0.25});
  const auto bytes = encode_grid(g);
  CHECK(bytes.size() == 100);
  CHECK(bytes[0] == 'M');
  CHECK(bytes[3] == 'G');
  CHECK(bytes[4] == 1);  // version, little-endian
  CHECK(bytes[8] == 3);  // rank
  CHECK(decode_grid(bytes) == g);
  const auto path = temp_dir() / "g.mcmg";
  save_grid(g, path);
  CHECK(std::filesystem::file_size(path) == 100);
  CHECK(load_grid(path) == g);
  const Tensor batch({3, 2, 2, 2}, 0.5);
  CHECK(decode_grid(encode_grid(batch)) == batch);
}

TEST_CASE("grid format errors") {
  Tensor g({2, 2, 2}, 1.0);
  auto bytes = encode_grid(g);
  auto truncated = bytes;
  truncated.resize(99);
  CHECK_THROWS_AS(decode_grid(truncated), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_grid(magic), FormatError);
  auto version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(decode_grid(version), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_grid(trailing), FormatError);
  CHECK_THROWS_AS(load_grid(temp_dir() / "missing.mcmg"), IoError);
}

TEST_CASE("grid csv has one row per channel and frequency bin") {
  Tensor g({2, 3, 4}, 0.5);
  const auto path = temp_dir() / "g.csv";
  save_grid_csv(g, path);
  std::ifstream in(path);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows >= 6);
  CHECK(rows <= 7);  // optional header
}
