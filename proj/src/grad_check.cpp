#include "cranio/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace cranio {

namespace {

void check_epsilon(double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2))
    throw Error(ErrorKind::InvalidArgument, "grad_check", "epsilon must lie in (0, 1e-2]");
}

double evaluate(const std::function<Tensor<double>()>& function, Index coordinate) {
  const double value = function().item();
  if (!std::isfinite(value))
    throw Error(ErrorKind::NonFinite, "grad_check", "non-finite evaluation at coordinate " + std::to_string(coordinate));
  return value;
}

double evaluate_guarded(const std::function<Tensor<double>()>& function, Index coordinate) {
  try {
    NoGradGuard no_grad;
    return evaluate(function, coordinate);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::NonFinite || e.kind() == ErrorKind::Range)
      throw Error(ErrorKind::NonFinite, "grad_check", "non-finite evaluation at coordinate " + std::to_string(coordinate));
    throw;
  }
}

}  // namespace

double grad_check(const std::function<Tensor<double>()>& function, std::vector<Tensor<double>> params,
                  const GradCheckOptions& options) {
  check_epsilon(options.epsilon);
  const Tensor<double> loss = function();
  if (loss.size() != 1) throw Error(ErrorKind::Shape, "grad_check", "function must be scalar-valued");
  const auto analytic = gradients(loss, params);

  std::mt19937_64 rng(options.seed);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& param = params[p];
    std::vector<Index> coords(static_cast<std::size_t>(param.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (options.max_coordinates > 0 && static_cast<Index>(coords.size()) > options.max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.max_coordinates));
    }
    const Array<double> original = param.values();
    for (Index c : coords) {
      Array<double> probe = original;
      probe[c] = original[c] + options.epsilon;
      param.assign(probe);
      const double plus = evaluate_guarded(function, c);
      probe[c] = original[c] - options.epsilon;
      param.assign(probe);
      const double minus = evaluate_guarded(function, c);
      param.assign(original);
      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      const double a = analytic[p][c];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& function, const Tensor<double>& point,
                  double epsilon) {
  Tensor<double> leaf(point.shape(), point.values(), true);
  return grad_check([&] { return function(leaf); }, {leaf}, GradCheckOptions{epsilon, 0, 0});
}

}  // namespace cranio
