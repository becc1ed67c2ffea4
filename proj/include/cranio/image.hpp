#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "cranio/tensor.hpp"

namespace cranio {

// Planar (CHW) float image with values nominally in [-1, 1].
struct Image {
  Index channels = 3;
  Index height = 0;
  Index width = 0;
  Array<float> data;

  Image() = default;
  Image(Index c, Index h, Index w, float fill = 0.0f) : channels(c), height(h), width(w), data(Array<float>::Constant(c * h * w, fill)) {}

  float& at(Index c, Index y, Index x) { return data[(c * height + y) * width + x]; }
  float at(Index c, Index y, Index x) const { return data[(c * height + y) * width + x]; }
  bool same_size(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }
};

// 8-bit RGB PNG. Values map linearly from [-1, 1] to 0..255 with rounding.
Image load_image(const std::filesystem::path& path);
void save_image(const Image& image, const std::filesystem::path& path);

// Stacks equally sized images into an [N, C, H, W] tensor and back.
template <typename S>
Tensor<S> to_batch(std::span<const Image> images);
template <typename S>
std::vector<Image> from_batch(const Tensor<S>& batch);

}  // namespace cranio
