#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "imm_gpt/tensor.hpp"

namespace imm_gpt {

struct GradCheckOptions {
  double eps = 1e-4;
  // (f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h; otherwise (f(h) - f(-h)) / 2h.
  bool five_point = true;
  double tolerance = 1e-4;
  // Tensors larger than this are checked on a random coordinate subset.
  std::int64_t max_coords_per_param = 64;
  std::uint64_t seed = 0;
};

struct ParamGradError {
  std::string name;
  std::int64_t coords_checked = 0;
  double max_rel_error = 0.0;
  std::int64_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;
  double tolerance = 0.0;

  double worst_error() const;
  const ParamGradError* worst() const;
  bool passed() const { return worst_error() < tolerance; }
};

/// Gradients below this magnitude are compared on an absolute scale.
/// Attention key biases, for one, have exactly zero gradient.
inline constexpr double kGradFloor = 1e-6;

/// |a - n| / max(|a|, |n|, kGradFloor)
double relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients of `forward_fn` against central
/// differences. forward_fn must rebuild the graph from the parameters on
/// every call and return a scalar. Throws std::runtime_error if two
/// evaluations at the same point disagree.
GradCheckReport grad_check(const std::function<Tensor<double>()>& forward_fn,
                           const ParameterList<double>& params,
                           const GradCheckOptions& options = {});

}  // namespace imm_gpt
