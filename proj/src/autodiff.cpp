#include "mcm/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "mcm/error.hpp"
#include "mcm/params.hpp"

namespace mcm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MutMap as_matrix(Tensor& t) {
  return MutMap(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

Tape& same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid()) throw ContractError("op on an unbound Var");
  if (a.tape() != b.tape()) throw ContractError("vars belong to different tapes");
  return *a.tape();
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw StructuralError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

// Elementwise unary op: f gives the value, df(x, y) the local derivative.
template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tape& tape = *a.tape();
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const auto ia = a.id();
  return tape.push(std::move(y), {ia}, [ia, df](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xv = t.value(ia);
    const Tensor& yv = t.value(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, {}, {}, requires_grad});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, Backward backward) {
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
  Node node{std::move(value), Tensor{}, {}, {}, needs};
  if (needs) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

void Tape::backward(Var output) {
  if (output.tape() != this) throw ContractError("backward on a Var from another tape");
  if (output.value().size() != 1) {
    throw ContractError("gradient requires a scalar output, got shape " + shape_string(output.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor{};
  if (!nodes_[output.id()].requires_grad) return;
  grad_buffer(output.id())[0] = 1.0;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Tensor::zeros_like(n.value);
  return n.grad;
}

namespace ad {

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const auto ia = a.id(), ib = b.id();
  return tape.push(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      Tensor& gi = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return tape.push(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return tape.push(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      const Tensor& bv = t.value(ib);
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      const Tensor& av = t.value(ia);
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var add_row(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  if (b.value().size() != cols) {
    throw StructuralError("add_row: bias of size " + std::to_string(b.value().size()) + " for " +
                          std::to_string(cols) + " columns");
  }
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] += bv[c];
  }
  const auto ia = a.id(), ib = b.id();
  return tape.push(std::move(y), {ia, ib}, [ia, ib, rows, cols](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    }
  });
}

Var mul_col(Var a, Var v) {
  Tape& tape = same_tape(a, v);
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  if (v.value().size() != rows) throw StructuralError("mul_col: one coefficient per row required");
  Tensor y = a.value();
  const Tensor& vv = v.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] *= vv[r];
  }
  const auto ia = a.id(), iv = v.id();
  return tape.push(std::move(y), {ia, iv}, [ia, iv, rows, cols](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      const Tensor& vv = t.value(iv);
      Tensor& ga = t.grad_buffer(ia);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r * cols + c] * vv[r];
      }
    }
    if (t.requires_grad(iv)) {
      const Tensor& av = t.value(ia);
      Tensor& gv = t.grad_buffer(iv);
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * av[r * cols + c];
        gv[r] += acc;
      }
    }
  });
}

Var matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = transpose_a ? av.cols() : av.rows();
  const std::size_t ka = transpose_a ? av.rows() : av.cols();
  const std::size_t kb = transpose_b ? bv.cols() : bv.rows();
  const std::size_t n = transpose_b ? bv.rows() : bv.cols();
  if (ka != kb) {
    throw StructuralError("matmul: inner dims " + std::to_string(ka) + " vs " + std::to_string(kb));
  }
  Tensor y({m, n});
  auto Y = as_matrix(y);
  auto A = as_matrix(av);
  auto B = as_matrix(bv);
  if (!transpose_a && !transpose_b) Y.noalias() = A * B;
  else if (transpose_a && !transpose_b) Y.noalias() = A.transpose() * B;
  else if (!transpose_a && transpose_b) Y.noalias() = A * B.transpose();
  else Y.noalias() = A.transpose() * B.transpose();

  const auto ia = a.id(), ib = b.id();
  return tape.push(std::move(y), {ia, ib}, [ia, ib, transpose_a, transpose_b](Tape& t, std::size_t self) {
    auto G = as_matrix(t.grad_of(self));
    auto A = as_matrix(t.value(ia));
    auto B = as_matrix(t.value(ib));
    if (t.requires_grad(ia)) {
      auto GA = as_matrix(t.grad_buffer(ia));
      if (!transpose_a && !transpose_b) GA.noalias() += G * B.transpose();
      else if (transpose_a && !transpose_b) GA.noalias() += B * G.transpose();
      else if (!transpose_a && transpose_b) GA.noalias() += G * B;
      else GA.noalias() += B.transpose() * G.transpose();
    }
    if (t.requires_grad(ib)) {
      auto GB = as_matrix(t.grad_buffer(ib));
      if (!transpose_a && !transpose_b) GB.noalias() += A.transpose() * G;
      else if (transpose_a && !transpose_b) GB.noalias() += A * G;
      else if (!transpose_a && transpose_b) GB.noalias() += G.transpose() * A;
      else GB.noalias() += G.transpose() * A.transpose();
    }
  });
}

Var silu(Var a) {
  return unary(
      a, [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var softplus(Var a) {
  return unary(a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(Var a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var log_softmax_rows(Var a) {
  Tape& tape = *a.tape();
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = x[r * cols];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(x[r * cols + c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = x[r * cols + c] - lse;
  }
  const auto ia = a.id();
  return tape.push(std::move(y), {ia}, [ia, rows, cols](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& yv = t.value(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        ga[r * cols + c] += g[r * cols + c] - std::exp(yv[r * cols + c]) * gs;
      }
    }
  });
}

Var sum(Var a) {
  Tape& tape = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto ia = a.id();
  return tape.push(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_sq(Var a) {
  Tape& tape = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  const auto ia = a.id();
  return tape.push(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * x[i];
  });
}

Var gather(Var a, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  Tape& tape = *a.tape();
  const Tensor& x = a.value();
  if (index->size() != shape_size(out_shape)) throw StructuralError("gather: index/shape size mismatch");
  Tensor y(std::move(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto src = (*index)[i];
    if (src >= x.size()) throw StructuralError("gather: index out of range");
    y[i] = x[src];
  }
  const auto ia = a.id();
  return tape.push(std::move(y), {ia}, [ia, index](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*index)[i]] += g[i];
  });
}

Var reshape(Var a, Shape shape) {
  Tape& tape = *a.tape();
  Tensor y = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return tape.push(std::move(y), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = *a.tape();
  Tensor y = mcm::slice_rows(a.value(), begin, end);
  const auto ia = a.id();
  const std::size_t offset = begin * a.value().cols();
  return tape.push(std::move(y), {ia}, [ia, offset](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw StructuralError("concat_rows of nothing");
  Tape& tape = *parts[0].tape();
  std::vector<Tensor> values;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw ContractError("vars belong to different tapes");
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  Tensor y = mcm::concat_rows(values);
  return tape.push(std::move(y), ids, [ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t offset = 0;
    for (auto id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        Tensor& gi = t.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

Var tile_rows(Var a, std::size_t times) {
  const std::size_t n = a.value().size();
  auto index = std::make_shared<std::vector<std::size_t>>(n * times);
  for (std::size_t r = 0; r < times; ++r) {
    for (std::size_t i = 0; i < n; ++i) (*index)[r * n + i] = i;
  }
  Shape shape = a.shape();
  shape[0] *= times;
  return gather(a, std::move(index), std::move(shape));
}

Var stop_gradient(Var a) { return a.tape()->constant(a.value()); }

}  // namespace ad

Var Bindings::at(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw StructuralError("input " + name + " is not bound");
  return it->second;
}

Bindings bind(Tape& tape, const ParamSet& params, std::span<const std::string> trainable) {
  for (const auto& name : trainable) {
    if (!params.contains(name)) throw StructuralError("cannot differentiate w.r.t. unknown segment " + name);
  }
  Bindings b;
  for (const auto& s : params.segments()) {
    const bool grad = std::find(trainable.begin(), trainable.end(), s.name) != trainable.end();
    b.set(s.name, tape.leaf(s.value, grad));
  }
  return b;
}

Bindings bind_all(Tape& tape, const ParamSet& params, bool requires_grad) {
  Bindings b;
  for (const auto& s : params.segments()) b.set(s.name, tape.leaf(s.value, requires_grad));
  return b;
}

ParamSet collect_grads(const Tape& tape, const Bindings& bindings, const ParamSet& params) {
  ParamSet out;
  for (const auto& s : params.segments()) out.add(s.name, tape.grad(bindings.at(s.name)));
  return out;
}

Tensor evaluate(const Graph& graph, const ParamSet& inputs) {
  Tape tape;
  auto bindings = bind_all(tape, inputs, false);
  Var out = graph(tape, bindings);
  if (!out.value().all_finite()) throw NumericError("graph produced a non-finite value");
  return out.value();
}

ParamSet gradient(const Graph& graph, const ParamSet& inputs, std::span<const std::string> wrt) {
  Tape tape;
  auto bindings = bind(tape, inputs, wrt);
  Var out = graph(tape, bindings);
  if (out.value().size() != 1) {
    throw ContractError("gradient requires a scalar output, got shape " + shape_string(out.shape()));
  }
  if (!out.value().all_finite()) throw NumericError("graph produced a non-finite value");
  tape.backward(out);
  ParamSet grads;
  for (const auto& name : wrt) grads.add(name, tape.grad(bindings.at(name)));
  return grads;
}

}  // namespace mcm
