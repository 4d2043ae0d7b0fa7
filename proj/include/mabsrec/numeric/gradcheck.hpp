#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mabsrec/error.hpp"
#include "mabsrec/numeric/params.hpp"
#include "mabsrec/numeric/rng.hpp"
#include "mabsrec/numeric/tape.hpp"

namespace mabsrec::numeric {

/// Builds a scalar loss on the given tape, reading parameters from the
/// ParamSet under test. Must be deterministic.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates sampled per tensor (all of them when the tensor is smaller).
  std::size_t coords_per_tensor = 20;
  /// Denominator floor of the relative error, so coordinates whose analytic and
  /// numeric derivatives are both ~0 are judged on absolute error instead.
  double magnitude_floor = 1e-6;
  std::uint64_t seed = 7;
};

struct GradCheckReport {
  struct TensorResult {
    std::string name;
    std::size_t coords_checked = 0;
    double max_relative_error = 0.0;
  };
  std::vector<TensorResult> tensors;
  double tolerance = 0.0;

  double worst() const {
    double w = 0.0;
    for (const auto& t : tensors) w = std::max(w, t.max_relative_error);
    return w;
  }
  bool passed() const { return worst() < tolerance; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients against central finite differences.
/// Leaves the analytic gradients in `params`.
inline GradCheckReport finite_diff_check(const LossBuilder& build, ParamSet& params, const GradCheckOptions& opt = {}) {
  auto evaluate = [&build]() {
    Tape tape(false);
    return build(tape).value().item();
  };

  params.zero_grad();
  double base = 0.0;
  {
    Tape tape(true);
    Var loss = build(tape);
    base = loss.value().item();
    tape.backward(loss);
  }
  const double again = evaluate();
  if (again != base) {
    throw Error("nondeterministic", "finite_diff_check: forward pass is not deterministic (" + std::to_string(base) +
                                        " vs " + std::to_string(again) + "); disable dropout and fix the seed");
  }

  Rng rng(opt.seed);
  GradCheckReport report;
  report.tolerance = opt.tolerance;
  for (auto& entry : params) {
    GradCheckReport::TensorResult result{entry.name, 0, 0.0};
    std::vector<std::size_t> coords(entry.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.coords_per_tensor) {
      for (std::size_t i = 0; i < opt.coords_per_tensor; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.next() % (coords.size() - i));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(opt.coords_per_tensor);
    }
    for (std::size_t c : coords) {
      const double original = entry.value[c];
      entry.value[c] = original + opt.epsilon;
      const double plus = evaluate();
      entry.value[c] = original - opt.epsilon;
      const double minus = evaluate();
      entry.value[c] = original;
      const double numeric = (plus - minus) / (2.0 * opt.epsilon);
      result.max_relative_error =
          std::max(result.max_relative_error, relative_error(entry.grad[c], numeric, opt.magnitude_floor));
      ++result.coords_checked;
    }
    report.tensors.push_back(result);
  }
  return report;
}

}  // namespace mabsrec::numeric
