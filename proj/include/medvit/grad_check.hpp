#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "medvit/tensor.hpp"

namespace medvit {

struct GradCheckOptions {
  /// Central-difference step is step_scale * max(1, |theta|).
  double step_scale = 1e-4;
  double tolerance = 1e-4;
  /// 0 checks every coordinate; otherwise probes are drawn round-robin over
  /// the inputs so each tensor is covered.
  std::size_t max_probes = 0;
  std::uint64_t seed = 0;
};

struct GradCheckFailure {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  /// Probes that matched only after shrinking the step by 10 or 100.
  std::size_t refined = 0;
  /// Probes whose estimates still disagree across step sizes, i.e. a relu or
  /// spline kink sits inside every stencil tried.
  std::size_t excluded = 0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failures.empty(); }
  std::string summary() const;
};

/// |a - b| / max(1, |a|, |b|)
double relative_error(double a, double b);

/// Compares tape gradients of the scalar `f()` with respect to `inputs`
/// against central differences. `f` must rebuild its graph from the current
/// values of the inputs on every call.
GradCheckReport grad_check(const std::function<Tensor()>& f, const ParameterList& inputs,
                           const GradCheckOptions& options = {});

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options = {});

}  // namespace medvit
