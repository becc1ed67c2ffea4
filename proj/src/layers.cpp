#include "cranio/layers.hpp"

#include <cmath>

namespace cranio {

template <typename S>
Tensor<S> init_parameter(Shape shape, Init init, Index fan_in, std::mt19937_64& rng) {
  const Index n = numel(shape);
  Array<S> v = Array<S>::Zero(n);
  if (init != Init::Zero) {
    const double stddev = init == Init::Normal002 ? 0.02 : std::sqrt(2.0 / static_cast<double>(fan_in));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < n; ++i) v[i] = static_cast<S>(dist(rng));
  }
  return Tensor<S>(std::move(shape), std::move(v), true);
}

template <typename S>
Conv2d<S>::Conv2d(Index in, Index out, Index kernel, ConvParams p, bool with_bias, Init init, std::mt19937_64& rng)
    : params(p) {
  weight = init_parameter<S>({out, in, kernel, kernel}, init, in * kernel * kernel, rng);
  if (with_bias) bias = Tensor<S>::zeros({out}, true);
}

template <typename S>
void Conv2d<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

template <typename S>
ConvTranspose2d<S>::ConvTranspose2d(Index in, Index out, Index kernel, ConvTransposeParams p, bool with_bias,
                                    Init init, std::mt19937_64& rng)
    : params(p) {
  weight = init_parameter<S>({in, out, kernel, kernel}, init, in * kernel * kernel, rng);
  if (with_bias) bias = Tensor<S>::zeros({out}, true);
}

template <typename S>
void ConvTranspose2d<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

template <typename S>
Linear<S>::Linear(Index in, Index out, Init init, std::mt19937_64& rng, Init bias_init) {
  weight = init_parameter<S>({in, out}, init, in, rng);
  bias = init_parameter<S>({out}, bias_init, in, rng);
}

template <typename S>
void Linear<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

template Tensor<float> init_parameter<float>(Shape, Init, Index, std::mt19937_64&);
template Tensor<double> init_parameter<double>(Shape, Init, Index, std::mt19937_64&);
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct ConvTranspose2d<float>;
template struct ConvTranspose2d<double>;
template struct Linear<float>;
template struct Linear<double>;

}  // namespace cranio
