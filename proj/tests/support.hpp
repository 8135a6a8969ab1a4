#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mcm/autodiff.hpp"
#include "mcm/params.hpp"
#include "mcm/rng.hpp"

namespace mcm::testing {

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t = rng.normal_tensor(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] *= scale;
  return t;
}

/// Largest relative error between the tape gradient of `graph` and central
/// differences of `reference`. Pass a reference with detached values frozen to
/// check stop_gradient, which differences cannot see.
inline double max_fd_error_against(const Graph& graph, const Graph& reference, const ParamSet& inputs,
                                   const std::vector<std::string>& wrt, double h = 1e-5) {
  const ParamSet analytic = gradient(graph, inputs, wrt);
  double worst = 0.0;
  for (const auto& name : wrt) {
    const Tensor& g = analytic.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ParamSet plus = inputs, minus = inputs;
      Tensor tp = inputs.at(name), tm = inputs.at(name);
      tp[i] += h;
      tm[i] -= h;
      plus.assign(name, tp);
      minus.assign(name, tm);
      const double fd = (evaluate(reference, plus).item() - evaluate(reference, minus).item()) / (2.0 * h);
      worst = std::max(worst, rel_err(fd, g[i]));
    }
  }
  return worst;
}

/// Same, with the graph as its own reference.
inline double max_fd_error(const Graph& graph, const ParamSet& inputs, const std::vector<std::string>& wrt,
                           double h = 1e-5) {
  return max_fd_error_against(graph, graph, inputs, wrt, h);
}

}  // namespace mcm::testing
