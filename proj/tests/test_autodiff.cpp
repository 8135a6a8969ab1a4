#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <memory>

#include "mcm/autodiff.hpp"
#include "mcm/error.hpp"
#include "mcm/optim.hpp"
#include "support.hpp"

using namespace mcm;
using mcm::testing::max_fd_error;
using mcm::testing::random_tensor;

namespace {

// Contracts op(...) with a fixed random weight so every output element matters.
Var weighted(Tape& tape, Var y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(rng, y.shape()))));
}

ParamSet inputs(std::initializer_list<std::pair<const char*, Shape>> specs, std::uint64_t seed = 1,
                double shift = 0.0) {
  Rng rng(seed);
  ParamSet p;
  for (const auto& [name, shape] : specs) {
    Tensor t = random_tensor(rng, shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += shift;
    p.add(name, t);
  }
  return p;
}

void check_unary(const char* label, std::function<Var(Var)> op, double shift = 0.0) {
  CAPTURE(label);
  auto p = inputs({{"a", {3, 4}}}, 7, shift);
  Graph g = [&](Tape& t, const Bindings& b) { return weighted(t, op(b.at("a"))); };
  CHECK(max_fd_error(g, p, {"a"}) <= 1e-5);
}

}  // namespace

TEST_CASE("elementwise binary ops match central differences") {
  auto p = inputs({{"a", {2, 3}}, {"b", {2, 3}}});
  for (auto op : {ad::add, ad::sub, ad::mul}) {
    Graph g = [&](Tape& t, const Bindings& b) { return weighted(t, op(b.at("a"), b.at("b"))); };
    CHECK(max_fd_error(g, p, {"a", "b"}) <= 1e-5);
  }
}

TEST_CASE("unary ops match central differences") {
  check_unary("scale", [](Var a) { return ad::scale(a, -1.7); });
  check_unary("add_scalar", [](Var a) { return ad::add_scalar(a, 0.3); });
  check_unary("silu", ad::silu);
  check_unary("softplus", ad::softplus);
  check_unary("sigmoid", ad::sigmoid);
  check_unary("tanh", ad::tanh);
  check_unary("relu", ad::relu);
  check_unary("square", ad::square);
  check_unary("sqrt", ad::sqrt, 4.0);
  check_unary("log_softmax_rows", ad::log_softmax_rows);
  check_unary("sum", ad::sum);
  check_unary("mean", ad::mean);
  check_unary("sum_sq", ad::sum_sq);
  check_unary("reshape", [](Var a) { return ad::reshape(a, {2, 6}); });
  check_unary("slice_rows", [](Var a) { return ad::slice_rows(a, 1, 3); });
  check_unary("tile_rows", [](Var a) { return ad::tile_rows(a, 3); });
}

TEST_CASE("broadcast ops match central differences") {
  auto p = inputs({{"a", {4, 3}}, {"r", {3}}, {"c", {4}}});
  Graph row = [](Tape& t, const Bindings& b) { return weighted(t, ad::add_row(b.at("a"), b.at("r"))); };
  Graph col = [](Tape& t, const Bindings& b) { return weighted(t, ad::mul_col(b.at("a"), b.at("c"))); };
  CHECK(max_fd_error(row, p, {"a", "r"}) <= 1e-5);
  CHECK(max_fd_error(col, p, {"a", "c"}) <= 1e-5);
}

TEST_CASE("matmul matches central differences for every transpose combination") {
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      CAPTURE(ta);
      CAPTURE(tb);
      const Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
      const Shape sb = tb ? Shape{5, 4} : Shape{4, 5};
      auto p = inputs({{"a", sa}, {"b", sb}}, 3);
      Graph g = [&](Tape& t, const Bindings& b) { return weighted(t, ad::matmul(b.at("a"), b.at("b"), ta, tb)); };
      CHECK(max_fd_error(g, p, {"a", "b"}) <= 1e-5);
    }
  }
}

TEST_CASE("gather and concat_rows match central differences") {
  auto p = inputs({{"a", {3, 2}}, {"b", {2, 2}}});
  auto index = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{5, 0, 0, 3, 2, 5, 1});
  Graph gather = [&](Tape& t, const Bindings& b) { return weighted(t, ad::gather(b.at("a"), index, {7})); };
  CHECK(max_fd_error(gather, p, {"a"}) <= 1e-5);
  Graph cat = [](Tape& t, const Bindings& b) {
    const Var parts[] = {b.at("a"), b.at("b"), b.at("a")};
    return weighted(t, ad::concat_rows(parts));
  };
  CHECK(max_fd_error(cat, p, {"a", "b"}) <= 1e-5);
}

TEST_CASE("a composite graph matches central differences") {
  auto p = inputs({{"x", {5, 3}}, {"w", {3, 4}}, {"bias", {4}}});
  Graph g = [](Tape& t, const Bindings& b) {
    Var h = ad::silu(ad::add_row(ad::matmul(b.at("x"), b.at("w")), b.at("bias")));
    Var z = ad::mul(ad::tanh(h), ad::softplus(h));
    return ad::add(ad::mean(ad::square(z)), ad::sum(ad::log_softmax_rows(z)));
  };
  CHECK(max_fd_error(g, p, {"x", "w", "bias"}) <= 1e-5);
}

TEST_CASE("hand-computed forward values") {
  Tape t;
  Var a = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  Var b = t.constant(Tensor({2, 2}, {5, 6, 7, 8}));
  CHECK(ad::matmul(a, b).value() == Tensor({2, 2}, {19, 22, 43, 50}));
  CHECK(ad::matmul(a, b, true, false).value() == Tensor({2, 2}, {26, 30, 38, 44}));
  CHECK(ad::sum_sq(a).value().item() == 30.0);
  CHECK(ad::mul_col(a, t.constant(Tensor({2}, {2, -1}))).value() == Tensor({2, 2}, {2, 4, -3, -4}));
  CHECK(ad::softplus(t.constant(Tensor({1}, {800.0}))).value().item() == doctest::Approx(800.0));
  CHECK(ad::sigmoid(t.constant(Tensor({1}, {-800.0}))).value().item() >= 0.0);
  const Tensor ls = ad::log_softmax_rows(t.constant(Tensor({1, 2}, {0.0, 0.0}))).value();
  CHECK(ls[0] == doctest::Approx(-std::log(2.0)));
}

TEST_CASE("stop_gradient blocks flow and unreached leaves get zero gradient") {
  Tape t;
  Var a = t.leaf(Tensor({2}, {1.0, 2.0}), true);
  Var unused = t.leaf(Tensor({3}, 1.0), true);
  Var y = ad::add(ad::sum_sq(a), ad::sum(ad::stop_gradient(ad::scale(a, 5.0))));
  t.backward(y);
  CHECK(t.grad(a) == Tensor({2}, {2.0, 4.0}));
  CHECK(t.grad(unused) == Tensor({3}, 0.0));
}

TEST_CASE("gradients accumulate through shared subexpressions") {
  Tape t;
  Var a = t.leaf(Tensor({1}, {3.0}), true);
  Var y = ad::add(ad::mul(a, a), a);
  t.backward(y);
  CHECK(t.grad(a).item() == 7.0);
}

TEST_CASE("shape contracts") {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({3, 2}));
  CHECK_THROWS_AS(ad::add(a, b), StructuralError);
  CHECK_THROWS_AS(ad::matmul(a, a), StructuralError);
  CHECK_THROWS_AS(ad::add_row(a, t.constant(Tensor({2}))), StructuralError);
  CHECK_THROWS_AS(ad::slice_rows(a, 1, 3), StructuralError);
  CHECK_THROWS_AS(t.backward(a), ContractError);
  Graph vec = [](Tape&, const Bindings& bb) { return bb.at("x"); };
  ParamSet p;
  p.add("x", Tensor({2}, 1.0));
  const std::vector<std::string> wrt{"x"};
  CHECK_THROWS_AS(gradient(vec, p, wrt), ContractError);
}

TEST_CASE("evaluate rejects non-finite output") {
  ParamSet p;
  p.add("x", Tensor({1}, {-1.0}));
  Graph g = [](Tape&, const Bindings& b) { return ad::sqrt(b.at("x")); };
  CHECK_THROWS_AS(evaluate(g, p), NumericError);
}

TEST_CASE("adamw first step matches the closed form") {
  ParamSet p, g;
  p.add("w", Tensor({2}, {1.0, -2.0}));
  g.add("w", Tensor({2}, {0.5, -3.0}));
  AdamWConfig cfg{0.1, 0.9, 0.999, 1e-8, 0.01};
  auto state = AdamWState::init(p, cfg);
  adamw_step(p, g, state);
  // First bias-corrected step is sign(g) * |g| / (|g| + eps).
  for (std::size_t i = 0; i < 2; ++i) {
    const double w0 = i == 0 ? 1.0 : -2.0, gi = i == 0 ? 0.5 : -3.0;
    const double expect = w0 * (1.0 - 0.1 * 0.01) - 0.1 * gi / (std::abs(gi) + 1e-8);
    CHECK(p.at("w")[i] == doctest::Approx(expect).epsilon(1e-14));
  }
  CHECK(state.t == 1);
}

TEST_CASE("adamw rejects bad hyperparameters and mismatched layouts") {
  ParamSet p;
  p.add("w", Tensor({2}));
  CHECK_THROWS_AS(AdamWState::init(p, {-1.0, 0.9, 0.999, 1e-8, 0.0}), ConfigError);
  CHECK_THROWS_AS(AdamWState::init(p, {1e-3, 1.0, 0.999, 1e-8, 0.0}), ConfigError);
  auto s = AdamWState::init(p, {});
  ParamSet other;
  other.add("v", Tensor({2}));
  CHECK_THROWS_AS(adamw_step(p, other, s), StructuralError);
}

TEST_CASE("ema update rates") {
  ParamSet target, online;
  target.add("w", Tensor({2}, {1.0, 2.0}));
  online.add("w", Tensor({2}, {3.0, 6.0}));
  ParamSet t = target;
  ema_update(t, online, 0.95);
  CHECK(t.at("w")[0] == doctest::Approx(0.95 * 1.0 + 0.05 * 3.0));
  t = target;
  ema_update(t, online, 0.0);
  CHECK(t == online);
  t = target;
  ema_update(t, online, 1.0);
  CHECK(t == target);
  CHECK_THROWS_AS(ema_update(t, online, 1.5), ConfigError);
}
