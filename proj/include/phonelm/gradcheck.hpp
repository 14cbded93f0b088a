#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "phonelm/autograd.hpp"
#include "phonelm/errors.hpp"
#include "phonelm/rng.hpp"
#include "phonelm/tensor.hpp"

namespace phonelm {

// Builds a scalar loss from leaves bound to the supplied parameter
// tensors. Must be deterministic: it is evaluated many times.
using GradCheckFn = std::function<Var<double>(
    Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  size_t coords_checked = 0;
  size_t worst_tensor = 0;
  size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

namespace detail {
inline double eval_loss(const GradCheckFn& f,
                        const std::vector<TensorT<double>>& params) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p, false));
  const double v = tape.value(f(tape, leaves))[0];
  if (!std::isfinite(v)) throw NumericError("gradient check: loss not finite");
  return v;
}
}  // namespace detail

// Central-difference check of reverse-mode gradients, 64-bit only.
// Samples up to coords_per_tensor coordinates from each parameter.
// Relative error uses a small absolute floor so that near-zero gradient
// coordinates are compared absolutely.
inline GradCheckReport gradient_check(
    const GradCheckFn& f, const std::vector<TensorT<double>>& params,
    double h = 1e-5, size_t coords_per_tensor = 64, uint64_t seed = 12345) {
  GradCheckReport report;

  // Analytic gradients.
  std::vector<TensorT<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
    Var<double> loss = f(tape, leaves);
    if (!std::isfinite(tape.value(loss)[0])) {
      throw NumericError("gradient check: loss not finite");
    }
    tape.backward(loss);
    for (auto& leaf : leaves) {
      const auto& g = tape.grad(leaf);
      if (!g.all_finite()) {
        throw NumericError("gradient check: non-finite analytic gradient");
      }
      analytic.push_back(g);
    }
  }

  Rng rng(seed);
  std::vector<TensorT<double>> work = params;
  for (size_t ti = 0; ti < params.size(); ++ti) {
    const size_t n = params[ti].size();
    std::vector<size_t> coords;
    if (n <= coords_per_tensor) {
      coords.resize(n);
      for (size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      coords.reserve(coords_per_tensor);
      for (size_t i = 0; i < coords_per_tensor; ++i) {
        coords.push_back(rng.next_index(n));
      }
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (size_t ci : coords) {
      const double orig = work[ti][ci];
      const double hh = h * std::max(1.0, std::abs(orig));
      work[ti][ci] = orig + hh;
      const double fp = detail::eval_loss(f, work);
      work[ti][ci] = orig - hh;
      const double fm = detail::eval_loss(f, work);
      work[ti][ci] = orig;
      const double numeric = (fp - fm) / (2.0 * hh);
      const double a = analytic[ti][ci];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), 1e-4});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = ti;
        report.worst_coord = ci;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace phonelm
