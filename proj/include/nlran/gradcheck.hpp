#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nlran/autodiff.hpp"
#include "nlran/layers.hpp"

namespace nlran {

struct GradcheckResult {
  std::string name;
  double max_error = 0.0;  // relative error as in finite_difference_check
  bool passed = false;
  double seconds = 0.0;
};

/// Central-difference check of the gradients that accumulate into a
/// parameter store. Up to `per_parameter` entries of every parameter are
/// probed (chosen by `seed`).
double parameter_difference_check(ParameterStore<double>& store, const std::function<Var<double>(Tape<double>&)>& loss,
                                  std::size_t per_parameter, std::uint64_t seed, double eps = 1e-6);

/// Double-precision checks over every differentiable operation, the full
/// attention module (each variant) and the non-local block.
std::vector<GradcheckResult> run_gradcheck_suite(double tolerance = 1e-4, std::uint64_t seed = 2024,
                                                 const std::function<void(const GradcheckResult&)>& on_result = {});

}  // namespace nlran
