#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mcm/consistency.hpp"
#include "mcm/error.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mcm;
using namespace mcm::testing;

namespace {

const GridShape kGrid{2, 4, 8};

DenoiserConfig tiny_denoiser() {
  DenoiserConfig c;
  c.grid = kGrid;
  c.num_classes = 2;
  c.num_steps = 10;
  c.patch_h = 2;
  c.patch_w = 4;
  c.embed_dim = 3;
  c.hidden = 4;
  c.blocks = 1;
  c.time_dim = 4;
  c.beta_min = 1e-2;
  c.beta_max = 0.3;
  return c;
}

NoiseSchedule tiny_schedule() { return make_schedule(10, 1e-2, 0.3); }

ParamSet live_params(const DenoiserConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  ParamSet p = DenoiserModel::init_params(cfg, seed);
  Rng rng(seed + 1);
  for (auto& seg : p.mutable_segments()) {
    for (std::size_t i = 0; i < seg.value.size(); ++i) seg.value[i] += scale * rng.normal();
  }
  return p;
}

FeatureNetConfig tiny_features() {
  FeatureNetConfig f;
  f.grid = kGrid;
  f.channels = {3, 2};
  return f;
}

DiscHeadSet tiny_heads(const FeatureNet& f, HeadActivation act = HeadActivation::Softplus) {
  DiscHeadConfig dc;
  for (std::size_t k = 0; k < f.num_taps(); ++k) dc.input_dims.push_back(f.tap_dim(k));
  dc.hidden = 3;
  dc.num_classes = 2;
  dc.activation = act;
  return DiscHeadSet(dc, 21);
}

// Heads whose score is the constant b2 on every input.
DiscHeadSet constant_heads(const FeatureNet& f, std::vector<double> scores) {
  DiscHeadSet h = tiny_heads(f, HeadActivation::Identity);
  for (auto& seg : h.params().mutable_segments()) {
    for (std::size_t i = 0; i < seg.value.size(); ++i) seg.value[i] = 0.0;
  }
  for (std::size_t k = 0; k < scores.size(); ++k) h.params().assign(DiscHeadSet::key(k, "b2"), Tensor({1}, {scores[k]}));
  return h;
}

std::vector<SpectrogramSample> tiny_data(std::size_t n) {
  DatasetSpec spec;
  spec.num_samples = n;
  spec.num_classes = 2;
  spec.grid = kGrid;
  spec.seed = 3;
  return synth_dataset(spec);
}

DistillBatch tiny_batch(std::uint64_t seed, int max_n) {
  Rng rng(seed);
  DistillBatch b;
  b.x0 = rng.normal_tensor(kGrid.batch(2));
  b.eps = rng.normal_tensor(kGrid.batch(2));
  b.c = {CondToken::cls(0), CondToken::cls(1)};
  b.n = {static_cast<int>(rng.integer(0, max_n)), static_cast<int>(rng.integer(0, max_n))};
  return b;
}

}  // namespace

TEST_CASE("consistency schedule boundary and finiteness") {
  const auto sched = make_schedule(100, 1e-3, 0.1);
  const auto cs = ConsistencySchedule::make(sched);
  REQUIRE(cs.c_skip.size() == 101);
  CHECK(cs.c_skip[0] == 1.0);
  CHECK(cs.c_out[0] == 0.0);
  for (std::size_t n = 1; n <= 100; ++n) {
    CHECK(std::isfinite(cs.c_skip[n]));
    CHECK(cs.c_skip[n] < cs.c_skip[n - 1]);
    CHECK(cs.c_out[n] > cs.c_out[n - 1]);
  }
  CHECK(cs.c_skip[1] == doctest::Approx(0.25 / (100.0 + 0.25)));
  CHECK(cs.c_out[1] == doctest::Approx(10.0 / std::sqrt(100.25)));
  CHECK_THROWS_AS(ConsistencySchedule::make(sched, 0.0), ConfigError);
}

TEST_CASE("boundary condition: consistency_fn at n = 0 returns x for 100 random inputs") {
  const auto cfg = tiny_denoiser();
  const auto sched = tiny_schedule();
  const auto cs = ConsistencySchedule::make(sched);
  DenoiserModel m(cfg, live_params(cfg, 4));
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor(rng, kGrid.batch(1), 3.0);
    const std::vector<int> n{0};
    const std::vector<CondToken> c{trial % 3 == 2 ? CondToken::null() : CondToken::cls(trial % 2)};
    CHECK(max_abs_diff(consistency_fn(m, cs, sched, x, n, c), x) <= 1e-12);
    Tape t;
    auto p = bind_all(t, m.params(), true);
    CHECK(max_abs_diff(consistency_fn(t, m, p, cs, sched, t.constant(x), n, c).value(), x) <= 1e-12);
  }
}

TEST_CASE("consistency_fn with the exact-eps oracle combines x and the true x0") {
  const auto sched = tiny_schedule();
  const auto cs = ConsistencySchedule::make(sched);
  Rng rng(9);
  const Tensor x0 = rng.normal_tensor(kGrid.batch(1));
  ExactEpsDenoiser oracle(kGrid, x0, sched);
  const std::vector<CondToken> c{CondToken::cls(0)};
  for (int n = 1; n <= 10; ++n) {
    const Tensor x = add_noise(x0, rng.normal_tensor(x0.shape()), n, sched);
    const std::vector<int> nn{n};
    const Tensor out = consistency_fn(oracle, cs, sched, x, nn, c);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto k = static_cast<std::size_t>(n);
      CHECK(out[i] == doctest::Approx(cs.c_skip[k] * x[i] + cs.c_out[k] * x0[i]).epsilon(1e-12));
    }
  }
  // c_skip = 0, c_out = 1 gives x0 exactly.
  ConsistencySchedule pure{std::vector<double>(11, 0.0), std::vector<double>(11, 1.0)};
  pure.c_skip[0] = 1.0;
  pure.c_out[0] = 0.0;
  const Tensor x = add_noise(x0, rng.normal_tensor(x0.shape()), 7, sched);
  const std::vector<int> n7{7};
  CHECK(max_abs_diff(consistency_fn(oracle, pure, sched, x, n7, c), x0) <= 1e-12);
}

TEST_CASE("differentiable and inference consistency_fn agree") {
  const auto cfg = tiny_denoiser();
  const auto sched = tiny_schedule();
  const auto cs = ConsistencySchedule::make(sched);
  DenoiserModel m(cfg, live_params(cfg, 5));
  Rng rng(10);
  const Tensor x = rng.normal_tensor(kGrid.batch(3));
  const std::vector<int> n{1, 6, 10};
  const std::vector<CondToken> c{CondToken::cls(0), CondToken::cls(1), CondToken::null()};
  Tape t;
  auto p = bind_all(t, m.params(), false);
  CHECK(max_abs_diff(consistency_fn(t, m, p, cs, sched, t.constant(x), n, c).value(),
                     consistency_fn(m, cs, sched, x, n, c)) <= 1e-12);
}

TEST_CASE("distances") {
  Tape t;
  Var a = t.constant(Tensor({2}, {1.0, 3.0}));
  Var b = t.constant(Tensor({2}, {0.0, 1.0}));
  CHECK(distance(a, b, Distance::L2, 0.01).value().item() == doctest::Approx(2.5));
  const double d = 0.01;
  const double huber = 0.5 * (std::sqrt(1.0 + d * d) - d) + 0.5 * (std::sqrt(4.0 + d * d) - d);
  CHECK(distance(a, b, Distance::Huber, d).value().item() == doctest::Approx(huber).epsilon(1e-14));
  CHECK(distance(a, a, Distance::L2, d).value().item() == 0.0);
  CHECK(distance(a, a, Distance::Huber, d).value().item() == doctest::Approx(0.0));
}

TEST_CASE("distill_pair equals a hand-stepped recomputation") {
  const auto cfg = tiny_denoiser();
  const auto sched = tiny_schedule();
  const auto cs = ConsistencySchedule::make(sched);
  DenoiserModel teacher(cfg, live_params(cfg, 1));
  DenoiserModel student(cfg, live_params(cfg, 2));
  DenoiserModel ema(cfg, live_params(cfg, 3));
  DistillConfig dc;
  dc.k = 3;
  dc.w = 2.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto batch = tiny_batch(seed, 10 - dc.k);
    Tape t;
    auto sp = bind_all(t, student.params(), true);
    const auto pair = distill_pair(t, student, sp, teacher, ema, batch, dc, sched, cs);
    std::vector<int> nk{batch.n[0] + dc.k, batch.n[1] + dc.k};
    const Tensor xk = add_noise(batch.x0, batch.eps, nk, sched);
    const Tensor xhat = cfg_ddim_step_rows(teacher, xk, nk, batch.n, batch.c, dc.w, sched);
    const Tensor a = consistency_fn(student, cs, sched, xk, nk, batch.c);
    const Tensor b = consistency_fn(ema, cs, sched, xhat, batch.n, batch.c);
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]) / static_cast<double>(a.size());
    CHECK(std::abs(pair.loss.value().item() - mse) <= 1e-12);
    CHECK(max_abs_diff(pair.x0_pred.value(), a) <= 1e-12);
    CHECK(max_abs_diff(pair.target, b) <= 1e-12);
  }
  auto bad = tiny_batch(0, 0);
  bad.n = {10 - dc.k + 1, 0};
  Tape t;
  auto sp = bind_all(t, student.params(), true);
  CHECK_THROWS_AS(distill_pair(t, student, sp, teacher, ema, bad, dc, sched, cs), ContractError);
}

TEST_CASE("adversarial losses on constant heads") {
  FeatureNet f(tiny_features(), 2);
  Rng rng(11);
  const Tensor x = rng.normal_tensor(kGrid.batch(2));
  const std::vector<CondToken> c{CondToken::cls(0), CondToken::cls(1)};
  {
    auto heads = constant_heads(f, {1.5, -0.5});
    Tape t;
    auto hp = bind_all(t, heads.params(), false);
    CHECK(adv_generator_loss(t, heads, hp, f, t.constant(x), c).value().item() == doctest::Approx(-1.0));
  }
  {
    auto heads = constant_heads(f, {0.0, 0.0});
    Tape t;
    auto hp = bind_all(t, heads.params(), false);
    CHECK(adv_generator_loss(t, heads, hp, f, t.constant(x), c).value().item() == 0.0);
    // Two heads at D = 0: each contributes max(0, 1) + max(0, 1).
    CHECK(adv_discriminator_loss(t, heads, hp, f, x, x, c, 0.0).value().item() == doctest::Approx(4.0));
    CHECK_THROWS_AS(adv_discriminator_loss(t, heads, hp, f, x, x, c, -1.0), ConfigError);
  }
}

TEST_CASE("hinge discriminator loss matches per-head scores") {
  FeatureNet f(tiny_features(), 2);
  auto heads = tiny_heads(f);
  Rng rng(15);
  const Tensor real = random_tensor(rng, kGrid.batch(3), 2.0);
  const Tensor fake = random_tensor(rng, kGrid.batch(3), 2.0);
  const std::vector<CondToken> c{CondToken::cls(0), CondToken::cls(1), CondToken::cls(0)};
  const auto fr = f.features(real), ff = f.features(fake);
  double expect = 0.0;
  for (std::size_t k = 0; k < f.num_taps(); ++k) {
    const Tensor dr = heads.disc_score(fr[k], k, c), df = heads.disc_score(ff[k], k, c);
    for (std::size_t b = 0; b < 3; ++b) expect += (std::max(0.0, 1.0 - dr[b]) + std::max(0.0, 1.0 + df[b])) / 3.0;
  }
  Tape t;
  auto hp = bind_all(t, heads.params(), false);
  CHECK(adv_discriminator_loss(t, heads, hp, f, real, fake, c, 0.0).value().item() ==
        doctest::Approx(expect).epsilon(1e-13));
  // Shifting every score by +10 on real and -10 on fake clears both hinges.
  for (std::size_t k = 0; k < f.num_taps(); ++k) heads.params().assign(DiscHeadSet::key(k, "b2"), Tensor({1}, {10.0}));
  auto hp2 = bind_all(t, heads.params(), false);
  const double real_only = adv_discriminator_loss(t, heads, hp2, f, real, fake, c, 0.0).value().item();
  double fake_part = 0.0;
  for (std::size_t k = 0; k < f.num_taps(); ++k) {
    const Tensor df = heads.disc_score(ff[k], k, c);
    for (std::size_t b = 0; b < 3; ++b) fake_part += std::max(0.0, 1.0 + df[b]) / 3.0;
  }
  CHECK(real_only == doctest::Approx(fake_part).epsilon(1e-13));
}

TEST_CASE("R1 term of an affine head equals |W1^T (w2 + e_c)|^2") {
  FeatureNet f(tiny_features(), 3);
  auto heads = tiny_heads(f, HeadActivation::Identity);
  Rng rng(12);
  const Tensor real = rng.normal_tensor(kGrid.batch(2));
  const Tensor fake = rng.normal_tensor(kGrid.batch(2));
  const std::vector<CondToken> c{CondToken::cls(1), CondToken::cls(1)};
  Tape t;
  auto hp = bind_all(t, heads.params(), false);
  const double with = adv_discriminator_loss(t, heads, hp, f, real, fake, c, 1.0).value().item();
  const double without = adv_discriminator_loss(t, heads, hp, f, real, fake, c, 0.0).value().item();
  double r1 = 0.0;
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& w1 = heads.params().at(DiscHeadSet::key(k, "w1"));
    const auto& w2 = heads.params().at(DiscHeadSet::key(k, "w2"));
    const auto& proj = heads.params().at(DiscHeadSet::key(k, "proj"));
    const std::size_t m = w2.size(), d = f.tap_dim(k);
    for (std::size_t i = 0; i < d; ++i) {
      double g = 0.0;
      for (std::size_t j = 0; j < m; ++j) g += w1[j * d + i] * (w2[j] + proj[1 * m + j]);
      r1 += g * g;
    }
  }
  CHECK(with - without == doctest::Approx(r1).epsilon(1e-12));
}

TEST_CASE("full generator and discriminator losses match central differences") {
  const auto cfg = tiny_denoiser();
  const auto sched = tiny_schedule();
  const auto cs = ConsistencySchedule::make(sched);
  DenoiserModel teacher(cfg, live_params(cfg, 1));
  DenoiserModel ema(cfg, live_params(cfg, 3));
  const ParamSet sparams = live_params(cfg, 2);
  DenoiserModel student(cfg, sparams);
  FeatureNet f(tiny_features(), 4);
  auto heads = tiny_heads(f);
  DistillConfig dc;
  dc.k = 3;
  const auto batch = tiny_batch(7, 10 - dc.k);

  Graph gen = [&](Tape& t, const Bindings& b) {
    auto pair = distill_pair(t, student, b, teacher, ema, batch, dc, sched, cs);
    auto hp = bind_all(t, heads.params(), false);
    return total_loss(adv_generator_loss(t, heads, hp, f, pair.x0_pred, batch.c), pair.loss, dc.lambda);
  };
  CHECK(max_fd_error(gen, sparams, sparams.names()) <= 1e-5);

  Rng rng(13);
  const Tensor real = rng.normal_tensor(kGrid.batch(2));
  const Tensor fake = rng.normal_tensor(kGrid.batch(2));
  Graph disc = [&](Tape& t, const Bindings& b) {
    return adv_discriminator_loss(t, heads, b, f, real, fake, batch.c, 1.0);
  };
  CHECK(max_fd_error(disc, heads.params(), heads.params().names()) <= 1e-5);
}

TEST_CASE("gradient isolation between student and discriminator") {
  const auto cfg = tiny_denoiser();
  FeatureNet f(tiny_features(), 4);
  auto heads = tiny_heads(f);
  DenoiserModel student(cfg, live_params(cfg, 2));
  Rng rng(14);
  const Tensor x = rng.normal_tensor(kGrid.batch(2));
  const std::vector<CondToken> c{CondToken::cls(0), CondToken::cls(1)};
  const std::vector<int> n{4, 9};
  {
    Tape t;
    auto sp = bind_all(t, student.params(), true);
    auto hp = bind_all(t, heads.params(), false);
    Var x0 = student.forward(t, sp, t.constant(x), n, c);
    t.backward(adv_generator_loss(t, heads, hp, f, x0, c));
    for (const auto& [name, v] : hp.vars()) CHECK(!v.requires_grad());
    const ParamSet g = collect_grads(t, sp, student.params());
    double norm = 0.0;
    for (const auto& s : g.segments()) {
      for (double v : s.value.data()) norm += v * v;
    }
    CHECK(norm > 0.0);
  }
  {
    Tape t;
    auto sp = bind_all(t, student.params(), true);
    auto hp = bind_all(t, heads.params(), true);
    const Tensor fake = student.predict_eps(x, n, c);
    t.backward(adv_discriminator_loss(t, heads, hp, f, x, fake, c, 1.0));
    const ParamSet g = collect_grads(t, sp, student.params());
    for (const auto& s : g.segments()) CHECK(s.value == Tensor::zeros_like(s.value));
  }
}

TEST_CASE("total loss is affine in lambda") {
  CHECK(total_loss(0.5, 0.2, 3.0) == doctest::Approx(1.1));
  CHECK(total_loss(0.5, 0.2, 0.0) == 0.5);
  CHECK(total_loss(0.5, 0.0, 3.0) == 0.5);
  CHECK(total_loss(0.5, 0.2, 5.0) - total_loss(0.5, 0.2, 4.0) == doctest::Approx(0.2));
  CHECK_THROWS_AS(total_loss(0.5, 0.2, -1.0), ConfigError);
}

TEST_CASE("distillation loop: initialization, EMA cadence and determinism") {
  const auto cfg = tiny_denoiser();
  const auto sched = tiny_schedule();
  const auto cs = ConsistencySchedule::make(sched);
  DenoiserModel teacher(cfg, live_params(cfg, 1, 0.1));
  FeatureNet f(tiny_features(), 4);
  const auto data = tiny_data(12);
  DistillConfig dc;
  dc.k = 3;
  dc.batch = 4;
  dc.lr = 1e-3;
  dc.disc_lr = 1e-3;

  Distiller d(teacher, f, tiny_heads(f), sched, cs, dc, 5);
  CHECK(d.ema().params() == teacher.params());
  CHECK(d.student().params() == teacher.params());
  CHECK(encode_params(d.state().ema) == encode_params(teacher.params()));
  const ParamSet fnet_before = f.params();
  for (int s = 0; s < 3; ++s) {
    const ParamSet ema_prev = d.ema().params();
    const auto row = d.step(data);
    CHECK(row.step == static_cast<std::uint64_t>(s));
    CHECK(std::isfinite(row.distil));
    for (const auto& seg : d.ema().params().segments()) {
      const auto& prev = ema_prev.at(seg.name);
      const auto& online = d.student().params().at(seg.name);
      for (std::size_t i = 0; i < seg.value.size(); ++i) {
        CHECK(seg.value[i] == doctest::Approx(0.95 * prev[i] + 0.05 * online[i]).epsilon(1e-14));
      }
    }
  }
  CHECK(f.params() == fnet_before);
  CHECK(teacher.params() == DenoiserModel(cfg, live_params(cfg, 1, 0.1)).params());

  const auto r1 = distill_train(teacher, data, f, tiny_heads(f), sched, cs, dc, 3, 9);
  const auto r2 = distill_train(teacher, data, f, tiny_heads(f), sched, cs, dc, 3, 9);
  CHECK(checksum(r1.state.student) == checksum(r2.state.student));
  CHECK(checksum(r1.state.ema) == checksum(r2.state.ema));
  CHECK(checksum(r1.state.disc) == checksum(r2.state.disc));
  CHECK(r1.log.size() == 3);
  const auto r0 = distill_train(teacher, data, f, tiny_heads(f), sched, cs, dc, 0, 9);
  CHECK(encode_params(r0.state.ema) == encode_params(teacher.params()));
  CHECK_THROWS_AS(distill_train(teacher, {}, f, tiny_heads(f), sched, cs, dc, 1, 9), ConfigError);
  auto bad = dc;
  bad.k = 11;
  CHECK_THROWS_AS(Distiller(teacher, f, tiny_heads(f), sched, cs, bad, 1), ConfigError);
}

TEST_CASE("cm_sample call count, timesteps and determinism") {
  const auto sched = make_schedule(100, 1e-3, 0.1);
  const auto cs = ConsistencySchedule::make(sched);
  ToyDenoiser toy(kGrid);
  const std::vector<CondToken> c{CondToken::cls(0), CondToken::cls(1)};
  CHECK(consistency_timesteps(100, 4) == std::vector<int>{100, 75, 50, 25});
  CHECK(consistency_timesteps(100, 1) == std::vector<int>{100});
  for (int steps : {1, 2, 4, 8}) {
    toy.calls = 0;
    const Tensor a = cm_sample(toy, cs, sched, c, steps, 3);
    CHECK(toy.calls == steps);
    CHECK(a == cm_sample(toy, cs, sched, c, steps, 3));
    CHECK(a.shape() == kGrid.batch(2));
  }
  CHECK(!(cm_sample(toy, cs, sched, c, 4, 3) == cm_sample(toy, cs, sched, c, 4, 4)));
  CHECK_THROWS_AS(cm_sample(toy, cs, sched, c, 0, 3), ContractError);
}
