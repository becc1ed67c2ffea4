#pragma once

#include <random>
#include <span>

#include "cranio/tensor.hpp"

namespace cranio {

enum class PadMode { Zero, Reflect };

struct ConvParams {
  Index stride = 1;
  Index padding = 0;
  PadMode pad_mode = PadMode::Zero;
};

struct ConvTransposeParams {
  Index stride = 1;
  Index padding = 0;
  Index output_padding = 0;
};

// Elementwise; operands must have identical shapes.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S offset);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator*(S factor, const Tensor<S>& a) { return scale(a, factor); }

// [m,k] x [k,n], or [m,k] x [n,k]^T when transpose_b is set.
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool transpose_b = false);
// [rows,n] + bias[n] broadcast over rows.
template <typename S> Tensor<S> add_row_bias(const Tensor<S>& x, const Tensor<S>& bias);

// x [N,C,H,W], weight [O,C,kh,kw], bias [O] or undefined.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, ConvParams params = {});
// x [N,C,H,W], weight [C,O,kh,kw], bias [O] or undefined.
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           ConvTransposeParams params = {});

// Per-sample, per-channel normalization over the spatial axes (no affine).
template <typename S> Tensor<S> instance_norm(const Tensor<S>& x, S epsilon = S(1e-5));

template <typename S> Tensor<S> relu(const Tensor<S>& x);
template <typename S> Tensor<S> leaky_relu(const Tensor<S>& x, S slope = S(0.2));
template <typename S> Tensor<S> tanh(const Tensor<S>& x);
template <typename S> Tensor<S> atanh(const Tensor<S>& x);
template <typename S> Tensor<S> sigmoid(const Tensor<S>& x);
template <typename S> Tensor<S> log(const Tensor<S>& x);
template <typename S> Tensor<S> exp(const Tensor<S>& x);
template <typename S> Tensor<S> abs(const Tensor<S>& x);
template <typename S> Tensor<S> clamp(const Tensor<S>& x, S lo, S hi);
// log(sigmoid(x)), stable for large |x|.
template <typename S> Tensor<S> log_sigmoid(const Tensor<S>& x);

template <typename S> Tensor<S> softmax(const Tensor<S>& x, std::size_t axis);
template <typename S> Tensor<S> log_softmax(const Tensor<S>& x, std::size_t axis);
// logits [rows, classes] -> per-row -log softmax(logits)[target], shape [rows].
template <typename S> Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const Index> targets);

template <typename S> Tensor<S> sum(const Tensor<S>& x);
template <typename S> Tensor<S> mean(const Tensor<S>& x);
// [N,C,H,W] -> [N,C]
template <typename S> Tensor<S> mean_spatial(const Tensor<S>& x);

// mean |a - b| and mean (a - b)^2
template <typename S> Tensor<S> l1_distance(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> squared_l2_distance(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S> Tensor<S> concat(std::span<const Tensor<S>> parts, std::size_t axis);
template <typename S> Tensor<S> slice(const Tensor<S>& x, std::size_t axis, Index begin, Index length);

// x [N,C,H,W] -> [N*L, C]; row n*L+i holds channel vector of sample n at flat
// spatial position locations[i].
template <typename S> Tensor<S> gather_locations(const Tensor<S>& x, std::span<const Index> locations);

// Divides each row of [rows, K] by max(||row||, epsilon).
template <typename S> Tensor<S> normalize_rows(const Tensor<S>& x, S epsilon = S(1e-12));

// Inverted dropout with keep-probability 1-p.
template <typename S> Tensor<S> dropout(const Tensor<S>& x, S p, std::mt19937_64& rng);

}  // namespace cranio
