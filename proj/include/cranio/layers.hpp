#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cranio/ops.hpp"

namespace cranio {

template <typename S>
using ParameterList = std::vector<std::pair<std::string, Tensor<S>>>;

template <typename S>
std::vector<Tensor<S>> tensors_of(const ParameterList<S>& params) {
  std::vector<Tensor<S>> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.push_back(t);
  return out;
}

enum class Init { Normal002, Kaiming, Zero };

template <typename S>
Tensor<S> init_parameter(Shape shape, Init init, Index fan_in, std::mt19937_64& rng);

template <typename S>
struct Conv2d {
  Tensor<S> weight;
  Tensor<S> bias;  // undefined when the layer feeds a normalization
  ConvParams params;

  Conv2d() = default;
  Conv2d(Index in, Index out, Index kernel, ConvParams p, bool with_bias, Init init, std::mt19937_64& rng);

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight, bias, params); }
  void collect(ParameterList<S>& out, const std::string& prefix) const;
  Index out_channels() const { return weight.dim(0); }
};

template <typename S>
struct ConvTranspose2d {
  Tensor<S> weight;
  Tensor<S> bias;
  ConvTransposeParams params;

  ConvTranspose2d() = default;
  ConvTranspose2d(Index in, Index out, Index kernel, ConvTransposeParams p, bool with_bias, Init init,
                  std::mt19937_64& rng);

  Tensor<S> operator()(const Tensor<S>& x) const { return conv_transpose2d(x, weight, bias, params); }
  void collect(ParameterList<S>& out, const std::string& prefix) const;
};

// x [rows, in] -> [rows, out]
template <typename S>
struct Linear {
  Tensor<S> weight;  // [in, out]
  Tensor<S> bias;    // [out]

  Linear() = default;
  Linear(Index in, Index out, Init init, std::mt19937_64& rng, Init bias_init = Init::Zero);

  Tensor<S> operator()(const Tensor<S>& x) const { return add_row_bias(matmul(x, weight), bias); }
  void collect(ParameterList<S>& out, const std::string& prefix) const;
  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }
};

}  // namespace cranio
