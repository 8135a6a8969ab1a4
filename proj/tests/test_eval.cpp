#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include "mcm/error.hpp"
#include "mcm/eval.hpp"
#include "support.hpp"

using namespace mcm;
using namespace mcm::testing;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat mat(const std::vector<double>& flat, std::size_t d) {
  Mat m(d, std::vector<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) m[i][j] = flat[i * d + j];
  }
  return m;
}

Mat mul(const Mat& a, const Mat& b) {
  const std::size_t d = a.size();
  Mat c(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      for (std::size_t j = 0; j < d; ++j) c[i][j] += a[i][k] * b[k][j];
    }
  }
  return c;
}

// Cyclic Jacobi eigen-decomposition of a symmetric matrix, then V sqrt(L) V^T.
Mat jacobi_sqrt(Mat a) {
  const std::size_t d = a.size();
  Mat v(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) off += a[p][q] * a[p][q];
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  Mat out(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < d; ++k) out[i][j] += v[i][k] * std::sqrt(std::max(a[k][k], 0.0)) * v[j][k];
    }
  }
  return out;
}

double oracle_fd(const FeatureStats& a, const FeatureStats& b) {
  const std::size_t d = a.dim();
  const Mat sa = mat(a.cov, d), sb = mat(b.cov, d);
  const Mat ra = jacobi_sqrt(sa);
  const Mat cross = jacobi_sqrt(mul(mul(ra, sb), ra));
  double fd = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    fd += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
    fd += sa[i][i] + sb[i][i] - 2.0 * cross[i][i];
  }
  return fd;
}

Tensor random_features(Rng& rng, std::size_t n, std::size_t d, double shift = 0.0) {
  Tensor f = rng.normal_tensor({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < d; ++k) {
      f[r * d + k] = f[r * d + k] * (1.0 + 0.3 * static_cast<double>(k)) + shift + 0.5 * f[r * d] * (k > 0);
    }
  }
  return f;
}

std::vector<SpectrogramSample> real_data(std::size_t n, std::uint64_t seed) {
  DatasetSpec s;
  s.num_samples = n;
  s.num_classes = 3;
  s.grid = GridShape{4, 16, 32};
  s.seed = seed;
  return synth_dataset(s);
}

}  // namespace

TEST_CASE("feature stats") {
  const Tensor f({3, 2}, {1, 2, 3, 4, 5, 9});
  const auto s = feature_stats(f, 0.0);
  CHECK(s.count == 3);
  CHECK(s.mean[0] == doctest::Approx(3.0));
  CHECK(s.mean[1] == doctest::Approx(5.0));
  CHECK(s.cov[0] == doctest::Approx(4.0));
  CHECK(s.cov[1] == doctest::Approx(7.0));
  CHECK(s.cov[3] == doctest::Approx(13.0));
  CHECK(feature_stats(f).cov[0] == doctest::Approx(4.0 + kCovRidge));
  CHECK_THROWS(feature_stats(Tensor({1, 2}, {1, 2})));
}

TEST_CASE("frechet distance self, shift and symmetry") {
  Rng rng(1);
  const auto a = feature_stats(random_features(rng, 200, 5));
  CHECK(std::abs(frechet_distance(a, a)) <= 1e-9);
  FeatureStats shifted = a;
  std::vector<double> delta{0.5, -1.0, 2.0, 0.0, 0.25};
  double norm = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    shifted.mean[i] += delta[i];
    norm += delta[i] * delta[i];
  }
  CHECK(std::abs(frechet_distance(a, shifted) - norm) <= 1e-9);
  const auto b = feature_stats(random_features(rng, 150, 5, 0.7));
  CHECK(frechet_distance(a, b) == doctest::Approx(frechet_distance(b, a)).epsilon(1e-10));
  CHECK(frechet_distance(a, b) > 0.0);
  const auto c = feature_stats(random_features(rng, 50, 3));
  CHECK_THROWS_AS(frechet_distance(a, c), StructuralError);
}

TEST_CASE("frechet distance matches a Jacobi oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = trial < 10 ? 3 : 6;
    const auto a = feature_stats(random_features(rng, 40, d));
    const auto b = feature_stats(random_features(rng, 60, d, 0.3 * trial));
    CHECK(std::abs(frechet_distance(a, b) - oracle_fd(a, b)) <= 1e-8);
  }
  // Diagonal closed form: sum (sqrt(a) - sqrt(b))^2.
  FeatureStats x{{0, 0}, {4, 0, 0, 9}, 2}, y{{0, 0}, {1, 0, 0, 16}, 2};
  CHECK(frechet_distance(x, y) == doctest::Approx(1.0 + 1.0).epsilon(1e-12));
}

TEST_CASE("sim_aa examples and monotonicity") {
  const Tensor train({2, 2}, {1, 0, 0, 1});
  const Tensor gen({3, 2}, {1, 0.01, 1, 1, -1, 0});
  CHECK(sim_aa(gen, train, 0.99) == doctest::Approx(1.0 / 3.0));
  CHECK(sim_aa(gen, train, 0.7) == doctest::Approx(2.0 / 3.0));
  CHECK(sim_aa(gen, train, -1.0) == doctest::Approx(1.0));
  CHECK(sim_aa(gen, gen, 0.999999) == 1.0);
  CHECK(sim_aa(Tensor({1, 2}, {1, 0}), train, 1.0) == 0.0);  // strict threshold
  Rng rng(3);
  const Tensor g = rng.normal_tensor({40, 4}), t = rng.normal_tensor({60, 4});
  double prev = 1.0;
  for (double thr = -1.0; thr <= 1.0; thr += 0.05) {
    const double v = sim_aa(g, t, thr);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK_THROWS_AS(sim_aa(g, Tensor({2, 3}), 0.5), StructuralError);
}

TEST_CASE("inception score bounds and examples") {
  CHECK(inception_score(Tensor({2, 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3})) ==
        doctest::Approx(1.0));
  CHECK(inception_score(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})) == doctest::Approx(3.0));
  CHECK(inception_score(Tensor({2, 3}, {1, 0, 0, 1, 0, 0})) == doctest::Approx(1.0));
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p({10, 4});
    for (std::size_t r = 0; r < 10; ++r) {
      double z = 0.0;
      for (std::size_t k = 0; k < 4; ++k) z += p[r * 4 + k] = std::exp(2.0 * rng.normal());
      for (std::size_t k = 0; k < 4; ++k) p[r * 4 + k] /= z;
    }
    const double is = inception_score(p);
    CHECK(is >= 1.0 - 1e-12);
    CHECK(is <= 4.0 + 1e-12);
  }
  CHECK_THROWS_AS(inception_score(Tensor({1, 2}, {0.5, 0.6})), NumericError);
}

TEST_CASE("paired KL") {
  const Tensor p({2, 2}, {0.5, 0.5, 0.9, 0.1});
  const Tensor q({2, 2}, {0.25, 0.75, 0.5, 0.5});
  const double kl0 = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  const double kl1 = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  CHECK(paired_kl(p, q) == doctest::Approx((kl0 + kl1) / 2.0).epsilon(1e-12));
  CHECK(paired_kl(p, p) == doctest::Approx(0.0));
  CHECK(paired_kl(Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0.5, 0.5})) == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(paired_kl(p, Tensor({2, 2}, {0.5, 0.6, 0.5, 0.5})), NumericError);
  CHECK_THROWS_AS(paired_kl(p, Tensor({1, 2}, {0.5, 0.5})), StructuralError);
}

TEST_CASE("feature-space metrics on real data") {
  const auto train = real_data(300, 1);
  const auto hold = real_data(90, 2);
  FeatureNet fnet(FeatureNetConfig{GridShape{4, 16, 32}}, 11);

  const auto cents = class_centroids(fnet, train, 3);
  CHECK(cents.num_classes() == 3);
  std::vector<int> right, wrong;
  for (const auto& s : hold) {
    right.push_back(s.label);
    wrong.push_back((s.label + 1) % 3);
  }
  const Tensor hg = stack_grids(hold);
  CHECK(class_similarity(hg, right, fnet, cents) > class_similarity(hg, wrong, fnet, cents) + 0.2);
  std::vector<int> bad = right;
  bad[0] = 3;
  CHECK_THROWS_AS(class_similarity(hg, bad, fnet, cents), ContractError);

  ClassProbe probe(fnet, train, 3);
  CHECK(probe.accuracy(hold) > 0.9);
  const Tensor pr = probe.probs(hg);
  for (std::size_t r = 0; r < pr.rows(); ++r) {
    CHECK(pr[r * 3] + pr[r * 3 + 1] + pr[r * 3 + 2] == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(inception_score(pr) > 2.0);

  Rng rng(5);
  Tensor noise = rng.normal_tensor({90, 4, 16, 32});
  const double fd_real = toy_fd(fnet, hg, train);
  const double fd_noise = toy_fd(fnet, noise, train);
  CHECK(fd_real < 0.1 * fd_noise);

  const auto report = evaluate(hg, right, train, fnet, probe);
  CHECK(report.fd >= 0.0);
  CHECK(report.is_score >= 1.0);
  CHECK(report.kl >= 0.0);
  CHECK(report.sim_aa_95 <= report.sim_aa_90);
  const auto j = nlohmann::json::parse(report.to_json());
  CHECK(j.at("fd").get<double>() == doctest::Approx(report.fd));
  CHECK(report.csv_header() == "fd,is_score,kl,ta_similarity,sim_aa_90,sim_aa_95\n");
  CHECK_THROWS_AS(evaluate(hg, std::vector<int>(3, 0), train, fnet, probe), StructuralError);
}
