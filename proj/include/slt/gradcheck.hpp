#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "slt/rng.hpp"
#include "slt/tensor.hpp"

namespace slt {

struct GradcheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  /// 0 checks every element; otherwise a seeded sample of this many per leaf.
  std::size_t max_checks_per_leaf = 0;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t checked = 0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the reverse-mode gradient of the scalar `f()` with respect to each
/// leaf against central differences (f(x+h) - f(x-h)) / 2h. The relative
/// error of one element is |a - n| / max(1, |a|, |n|). Leaves are perturbed in
/// place and restored. The denominator uses the step actually representable
/// in T, and the comparison runs in double.
template <class T>
GradcheckReport gradcheck(const std::function<BasicTensor<T>()>& f,
                          std::vector<BasicTensor<T>> leaves, const GradcheckOptions& opts = {}) {
  for (auto& leaf : leaves) leaf.zero_grad();
  const BasicTensor<T> loss = f();
  if (loss.size() != 1) {
    throw ContractError("gradcheck needs a scalar function, got shape " + shape_str(loss.shape()));
  }
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) {
    std::vector<double> g(leaf.size(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }

  NoGradGuard no_grad;
  SplitMix64 rng(opts.seed);
  GradcheckReport report;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    std::vector<std::size_t> picks(values.size());
    std::iota(picks.begin(), picks.end(), 0);
    if (opts.max_checks_per_leaf != 0 && opts.max_checks_per_leaf < picks.size()) {
      rng.shuffle(picks.begin(), picks.end());
      picks.resize(opts.max_checks_per_leaf);
      std::sort(picks.begin(), picks.end());
    }
    for (const std::size_t i : picks) {
      const T original = values[i];
      const T plus = static_cast<T>(original + opts.step);
      const T minus = static_cast<T>(original - opts.step);
      values[i] = plus;
      const double f_plus = static_cast<double>(f().item());
      values[i] = minus;
      const double f_minus = static_cast<double>(f().item());
      values[i] = original;

      const double numeric = (f_plus - f_minus) / (double(plus) - double(minus));
      const double a = analytic[l][i];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++report.checked;
      if (err > report.max_rel_err || report.checked == 1) {
        report.max_rel_err = err;
        report.worst_leaf = l;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err < opts.tolerance;
  return report;
}

/// Single-input form: checks d f(x) / dx.
template <class T>
GradcheckReport gradcheck(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                          BasicTensor<T> x, double step = 1e-3, double tolerance = 1e-3) {
  x.set_requires_grad(true);
  GradcheckOptions opts;
  opts.step = step;
  opts.tolerance = tolerance;
  return gradcheck<T>([&] { return f(x); }, {x}, opts);
}

}  // namespace slt
