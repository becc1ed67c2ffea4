#include "cranio/image.hpp"

#include <png.h>

#include <cmath>
#include <cstring>

namespace cranio {

Image load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::NotFound, "load_image", "no such file: " + path.string());
  if (path.extension() != ".png")
    throw Error(ErrorKind::Format, "load_image", "unsupported format '" + path.extension().string() + "' (PNG only)");
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw Error(ErrorKind::Format, "load_image", path.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw Error(ErrorKind::Format, "load_image", path.string() + ": " + png.message);
  }
  Image img(3, png.height, png.width);
  for (Index y = 0; y < img.height; ++y)
    for (Index x = 0; x < img.width; ++x)
      for (Index c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(pixels[static_cast<std::size_t>((y * img.width + x) * 3 + c)] / 127.5 - 1.0);
  return img;
}

void save_image(const Image& image, const std::filesystem::path& path) {
  if (image.channels != 3 || image.height < 1 || image.width < 1 || image.data.size() != 3 * image.height * image.width)
    throw Error(ErrorKind::Shape, "save_image", "expected a non-empty 3-channel image");
  if (path.extension() != ".png")
    throw Error(ErrorKind::Format, "save_image", "unsupported format '" + path.extension().string() + "' (PNG only)");
  std::vector<unsigned char> pixels(static_cast<std::size_t>(3 * image.height * image.width));
  for (Index y = 0; y < image.height; ++y)
    for (Index x = 0; x < image.width; ++x)
      for (Index c = 0; c < 3; ++c) {
        const float v = image.at(c, y, x);
        if (!(v >= -1.0f && v <= 1.0f))
          throw Error(ErrorKind::Range, "save_image",
                      "value " + std::to_string(v) + " outside [-1, 1] at (" + std::to_string(c) + ", " +
                          std::to_string(y) + ", " + std::to_string(x) + ")");
        pixels[static_cast<std::size_t>((y * image.width + x) * 3 + c)] =
            static_cast<unsigned char>(std::lround((static_cast<double>(v) + 1.0) * 127.5));
      }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, pixels.data(), 0, nullptr))
    throw Error(ErrorKind::Io, "save_image", path.string() + ": " + png.message);
}

template <typename S>
Tensor<S> to_batch(std::span<const Image> images) {
  if (images.empty()) throw Error(ErrorKind::Shape, "to_batch", "no images");
  const Image& first = images.front();
  const Index plane = first.channels * first.height * first.width;
  Array<S> values(static_cast<Index>(images.size()) * plane);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].same_size(first)) throw Error(ErrorKind::Shape, "to_batch", "images differ in size");
    values.segment(static_cast<Index>(i) * plane, plane) = images[i].data.template cast<S>();
  }
  return Tensor<S>({static_cast<Index>(images.size()), first.channels, first.height, first.width}, std::move(values));
}

template <typename S>
std::vector<Image> from_batch(const Tensor<S>& batch) {
  if (batch.rank() != 4) throw Error(ErrorKind::Shape, "from_batch", "expected [N, C, H, W], got " + to_string(batch.shape()));
  std::vector<Image> out;
  const Index plane = batch.dim(1) * batch.dim(2) * batch.dim(3);
  for (Index n = 0; n < batch.dim(0); ++n) {
    Image img(batch.dim(1), batch.dim(2), batch.dim(3));
    img.data = batch.values().segment(n * plane, plane).template cast<float>();
    out.push_back(std::move(img));
  }
  return out;
}

template Tensor<float> to_batch<float>(std::span<const Image>);
template Tensor<double> to_batch<double>(std::span<const Image>);
template std::vector<Image> from_batch<float>(const Tensor<float>&);
template std::vector<Image> from_batch<double>(const Tensor<double>&);

}  // namespace cranio
