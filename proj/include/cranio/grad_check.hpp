#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cranio/tensor.hpp"

namespace cranio {

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Coordinates checked per parameter tensor; <= 0 checks all of them.
  Index max_coordinates = 0;
  std::uint64_t seed = 0;
};

// max over checked coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& function, const Tensor<double>& point,
                  double epsilon);

// Same measure over a set of leaf parameters perturbed in place; `function`
// must rebuild the loss from the current parameter values on every call.
double grad_check(const std::function<Tensor<double>()>& function, std::vector<Tensor<double>> params,
                  const GradCheckOptions& options = {});

}  // namespace cranio
