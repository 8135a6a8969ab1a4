#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mcm/tensor.hpp"

namespace mcm {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in execution order, so
/// the recording order is already a topological order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op result. `backward` is dropped when no input needs a gradient.
  Var push(Tensor value, std::vector<std::size_t> inputs, Backward backward);

  /// Seeds d(output)/d(output) = 1 and propagates. Output must hold one element.
  void backward(Var output);

  /// Gradient accumulated at `v`; a zero tensor when nothing reached it.
  Tensor grad(Var v) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient buffer of an input, zero-allocated on first use.
  Tensor& grad_buffer(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

namespace ad {

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

/// a[r, c] + b[c] broadcast over rows.
Var add_row(Var a, Var b);
/// a[r, c] * v[r] broadcast over columns.
Var mul_col(Var a, Var v);

/// 2-D product on the row/col views of a and b, with optional transposes.
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);

// Nonlinearities.
Var silu(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var square(Var a);
Var sqrt(Var a);
/// Row-wise log-softmax over the column view.
Var log_softmax_rows(Var a);

// Reductions to shape [1].
Var sum(Var a);
Var mean(Var a);
Var sum_sq(Var a);

/// out.flat[i] = a.flat[index[i]]; backward scatters-adds.
Var gather(Var a, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape);
Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
/// Repeats a (leading dim r) `times` times along the leading axis.
Var tile_rows(Var a, std::size_t times);
/// Same value, no gradient flow.
Var stop_gradient(Var a);

}  // namespace ad

class ParamSet;

/// Named Vars for the segments of a ParamSet bound onto a tape.
class Bindings {
 public:
  void set(const std::string& name, Var v) { vars_[name] = v; }
  Var at(const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

/// Binds every segment; segments listed in `trainable` become gradient leaves.
Bindings bind(Tape& tape, const ParamSet& params, std::span<const std::string> trainable);
Bindings bind_all(Tape& tape, const ParamSet& params, bool requires_grad);
/// Reads gradients of all bound segments back into a ParamSet with the layout of `params`.
ParamSet collect_grads(const Tape& tape, const Bindings& bindings, const ParamSet& params);

/// A computation built on a fresh tape from bound inputs.
using Graph = std::function<Var(Tape&, const Bindings&)>;

/// Forward value of `graph`. Throws NumericError on non-finite output.
Tensor evaluate(const Graph& graph, const ParamSet& inputs);

/// d(output)/d(segment) for each segment in `wrt`. Output must be scalar.
ParamSet gradient(const Graph& graph, const ParamSet& inputs, std::span<const std::string> wrt);

}  // namespace mcm
