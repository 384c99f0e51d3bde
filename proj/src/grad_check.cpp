#include "imm_gpt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace imm_gpt {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradFloor});
  return std::abs(analytic - numeric) / denom;
}

double GradCheckReport::worst_error() const {
  const auto* w = worst();
  return w ? w->max_rel_error : 0.0;
}

const ParamGradError* GradCheckReport::worst() const {
  const ParamGradError* best = nullptr;
  for (const auto& p : params) {
    if (!best || p.max_rel_error > best->max_rel_error) best = &p;
  }
  return best;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& forward_fn,
                           const ParameterList<double>& params,
                           const GradCheckOptions& options) {
  auto evaluate = [&] {
    NoGradGuard no_grad;
    return forward_fn().item();
  };

  for (const auto& p : params) {
    auto t = p.tensor;
    t.zero_grad();
  }
  const Tensor<double> loss = forward_fn();
  backward(loss);

  const double f0 = evaluate();
  if (f0 != loss.item() || evaluate() != f0) {
    throw std::runtime_error("grad_check: forward_fn is not deterministic");
  }

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  report.tolerance = options.tolerance;
  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    const std::int64_t n = t.size();
    std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.max_coords_per_param));
      std::sort(coords.begin(), coords.end());
    }
    const auto grad = t.grad();
    ParamGradError err{p.name};
    err.coords_checked = static_cast<std::int64_t>(coords.size());
    auto values = t.mutable_data();
    for (auto c : coords) {
      const double original = values[c];
      auto at = [&](double offset) {
        values[c] = original + offset;
        return evaluate();
      };
      const double h = options.eps;
      const double numeric = options.five_point
                                 ? (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h)
                                 : (at(h) - at(-h)) / (2 * h);
      values[c] = original;
      const double analytic = grad.empty() ? 0.0 : grad[c];
      const double rel = relative_error(analytic, numeric);
      if (rel > err.max_rel_error || err.coords_checked == 0) {
        err.max_rel_error = rel;
        err.worst_index = c;
        err.analytic = analytic;
        err.numeric = numeric;
      }
    }
    report.params.push_back(std::move(err));
  }
  return report;
}

}  // namespace imm_gpt
