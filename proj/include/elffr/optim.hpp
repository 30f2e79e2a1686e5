#pragma once

#include <elffr/types.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace elffr {

struct NelderMeadResult {
  VectorXd x;
  double value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
  bool converged = false;
};

struct NelderMeadOptions {
  double initial_step = 1.0;
  double f_tol = 1e-8;   // spread of simplex values
  double x_tol = 1e-7;   // largest vertex distance from the best vertex
  int max_evaluations = 2000;
};

/// Derivative-free minimization (standard reflection/expansion/contraction/shrink).
/// Non-finite objective values are treated as +inf.
inline NelderMeadResult nelder_mead(const std::function<double(const VectorXd&)>& f, const VectorXd& x0,
                                    const NelderMeadOptions& opt = {}) {
  const Index n = x0.size();
  NelderMeadResult result;
  auto eval = [&](const VectorXd& x) {
    ++result.evaluations;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };
  if (n == 0) {
    result.x = x0;
    result.value = eval(x0);
    result.converged = true;
    return result;
  }

  std::vector<VectorXd> simplex(static_cast<std::size_t>(n + 1), x0);
  std::vector<double> values(static_cast<std::size_t>(n + 1));
  for (Index i = 0; i < n; ++i) simplex[static_cast<std::size_t>(i + 1)](i) += opt.initial_step;
  for (std::size_t i = 0; i < simplex.size(); ++i) values[i] = eval(simplex[i]);

  std::vector<std::size_t> order(simplex.size());
  while (result.evaluations < opt.max_evaluations) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    const std::size_t best = order.front();
    const std::size_t worst = order.back();
    const std::size_t second = order[order.size() - 2];

    double spread = values[worst] - values[best];
    double diameter = 0.0;
    for (const auto& v : simplex) diameter = std::max(diameter, (v - simplex[best]).cwiseAbs().maxCoeff());
    if (std::isfinite(values[best]) && spread <= opt.f_tol && diameter <= opt.x_tol) {
      result.converged = true;
      break;
    }
    if (!std::isfinite(spread) && diameter <= opt.x_tol) break;

    VectorXd centroid = VectorXd::Zero(n);
    for (std::size_t i = 0; i < simplex.size(); ++i)
      if (i != worst) centroid += simplex[i];
    centroid /= static_cast<double>(n);

    const VectorXd reflected = centroid + (centroid - simplex[worst]);
    const double f_reflected = eval(reflected);
    if (f_reflected < values[best]) {
      const VectorXd expanded = centroid + 2.0 * (centroid - simplex[worst]);
      const double f_expanded = eval(expanded);
      if (f_expanded < f_reflected) {
        simplex[worst] = expanded;
        values[worst] = f_expanded;
      } else {
        simplex[worst] = reflected;
        values[worst] = f_reflected;
      }
      continue;
    }
    if (f_reflected < values[second]) {
      simplex[worst] = reflected;
      values[worst] = f_reflected;
      continue;
    }
    const bool outside = f_reflected < values[worst];
    const VectorXd contracted = outside ? VectorXd(centroid + 0.5 * (reflected - centroid))
                                        : VectorXd(centroid + 0.5 * (simplex[worst] - centroid));
    const double f_contracted = eval(contracted);
    if (f_contracted < (outside ? f_reflected : values[worst])) {
      simplex[worst] = contracted;
      values[worst] = f_contracted;
      continue;
    }
    for (std::size_t i = 0; i < simplex.size(); ++i) {
      if (i == best) continue;
      simplex[i] = simplex[best] + 0.5 * (simplex[i] - simplex[best]);
      values[i] = eval(simplex[i]);
    }
  }

  const auto it = std::min_element(values.begin(), values.end());
  const std::size_t best = static_cast<std::size_t>(it - values.begin());
  result.x = simplex[best];
  result.value = values[best];
  return result;
}

}  // namespace elffr
