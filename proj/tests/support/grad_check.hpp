#pragma once

// Central finite-difference oracle for autodiff checks. Test-only: it
// evaluates the loss through the value path and never touches the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "kpop/rng.hpp"
#include "kpop/tensor.hpp"

namespace kpop::testing {

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double max_rel_error = 0.0;
  double pass_fraction() const { return checked ? double(passed) / double(checked) : 0.0; }
};

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares analytic gradients of `loss` (already populated on `params`) with
/// central differences. `max_coords` > 0 samples that many coordinates per
/// tensor at random instead of checking all of them.
inline GradCheckResult finite_difference_check(const std::function<double()>& loss, std::vector<nn::Tensor> params,
                                               double h = 1e-5, double tol = 1e-4, std::size_t max_coords = 0,
                                               std::uint64_t seed = 1) {
  GradCheckResult r;
  Rng rng(seed);
  for (auto& p : params) {
    auto data = p.mutable_data();
    const auto g = p.grad();
    std::vector<std::size_t> coords;
    if (max_coords == 0 || max_coords >= data.size()) {
      for (std::size_t i = 0; i < data.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < max_coords; ++i) {
        coords.push_back(static_cast<std::size_t>(rng.uniform_int(0, int(data.size()) - 1)));
      }
    }
    for (std::size_t i : coords) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss();
      data[i] = saved - h;
      const double down = loss();
      data[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double err = relative_error(g[i], fd);
      r.max_rel_error = std::max(r.max_rel_error, err);
      ++r.checked;
      if (err < tol) ++r.passed;
    }
  }
  return r;
}

}  // namespace kpop::testing
