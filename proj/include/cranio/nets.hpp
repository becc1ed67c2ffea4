#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <json.hpp>

#include "cranio/layers.hpp"

namespace cranio {

struct GeneratorOptions {
  Index image_size = 64;
  Index in_channels = 3;
  Index out_channels = 3;
  Index base_channels = 32;
  Index n_res_blocks = 4;
  // Encoder layer indices exposed for patch features. Index 0 is the input
  // image, 1 the stem, 2 and 3 the two downsampling blocks and 4.. the
  // residual blocks. Empty selects input, both downsamples and the middle
  // residual block.
  std::vector<Index> tap_points;
  // Zero-initialized output conv plus an input skip so that an untrained
  // network is (up to clamping at +-0.999) the identity map.
  bool identity_init = false;
  // Dropout inside residual blocks, kept active at inference (cGAN noise).
  double dropout = 0.0;
  std::uint64_t seed = 0;
};

struct DiscriminatorOptions {
  Index image_size = 64;
  Index in_channels = 3;
  Index base_channels = 32;
  Index n_layers = 3;
  std::uint64_t seed = 0;
};

struct EmbedderOptions {
  Index image_size = 64;
  Index in_channels = 3;
  std::vector<Index> widths = {16, 32, 64, 64};
  Index n_classes = 2;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const GeneratorOptions& o);
void from_json(const nlohmann::json& j, GeneratorOptions& o);
void to_json(nlohmann::json& j, const DiscriminatorOptions& o);
void from_json(const nlohmann::json& j, DiscriminatorOptions& o);
void to_json(nlohmann::json& j, const EmbedderOptions& o);
void from_json(const nlohmann::json& j, EmbedderOptions& o);

// Sampled patch embeddings of one batch: for each tap layer, the flat spatial
// indices drawn and a [batch * locations, width] feature matrix whose row
// n * locations + i belongs to image n at locations[i].
template <typename S>
struct FeatureLayer {
  Index layer = 0;
  std::vector<Index> locations;
  Tensor<S> features;
};

template <typename S>
struct FeatureStack {
  Index batch = 0;
  std::vector<FeatureLayer<S>> layers;

  std::vector<std::vector<Index>> locations() const;
};

template <typename S>
struct GeneratorOutput {
  Tensor<S> image;
  std::vector<Tensor<S>> taps;
};

// Residual encoder/decoder with a tanh head. Output spatial size equals input.
template <typename S>
class Generator {
 public:
  explicit Generator(const GeneratorOptions& options);

  Tensor<S> operator()(const Tensor<S>& x) const { return forward(x); }
  Tensor<S> forward(const Tensor<S>& x) const;
  GeneratorOutput<S> forward_with_taps(const Tensor<S>& x) const;
  // Runs the encoder only as far as the deepest tap.
  std::vector<Tensor<S>> encode(const Tensor<S>& x) const;

  Index encoder_depth() const { return 4 + options_.n_res_blocks; }
  const std::vector<Index>& tap_points() const { return options_.tap_points; }
  std::vector<Index> tap_channels() const;
  const GeneratorOptions& options() const { return options_; }
  ParameterList<S> parameters() const;

  void reseed_noise(std::uint64_t seed) const { noise_rng_.seed(seed); }

 private:
  Tensor<S> run(const Tensor<S>& x, std::vector<Tensor<S>>* taps, Index stop_after) const;
  void check_input(const Tensor<S>& x) const;

  GeneratorOptions options_;
  Conv2d<S> stem_, down1_, down2_;
  std::vector<std::pair<Conv2d<S>, Conv2d<S>>> blocks_;
  ConvTranspose2d<S> up1_, up2_;
  Conv2d<S> head_;
  mutable std::mt19937_64 noise_rng_;
};

// Patch discriminator: emits a grid of realism logits [N, 1, h, w].
template <typename S>
class Discriminator {
 public:
  explicit Discriminator(const DiscriminatorOptions& options);

  Tensor<S> operator()(const Tensor<S>& x) const { return forward(x); }
  Tensor<S> forward(const Tensor<S>& x) const;
  Index output_size() const;
  const DiscriminatorOptions& options() const { return options_; }
  ParameterList<S> parameters() const;

 private:
  DiscriminatorOptions options_;
  std::vector<Conv2d<S>> convs_;
};

// One two-layer perceptron per tap; outputs are L2-normalized rows.
template <typename S>
class ProjectionHeads {
 public:
  ProjectionHeads(const std::vector<Index>& in_channels, Index width, std::uint64_t seed);

  Tensor<S> project(std::size_t layer, const Tensor<S>& features) const;
  FeatureStack<S> operator()(const FeatureStack<S>& stack) const;

  std::size_t count() const { return mlps_.size(); }
  Index width() const { return width_; }
  const std::vector<Index>& in_channels() const { return in_channels_; }
  std::uint64_t seed() const { return seed_; }
  ParameterList<S> parameters() const;

 private:
  std::vector<Index> in_channels_;
  Index width_;
  std::uint64_t seed_;
  std::vector<std::pair<Linear<S>, Linear<S>>> mlps_;
};

// Small conv classifier; the pooled activations before the classifier are
// the image's feature vector.
template <typename S>
class Embedder {
 public:
  explicit Embedder(const EmbedderOptions& options);

  Tensor<S> features(const Tensor<S>& x) const;
  Tensor<S> logits_from_features(const Tensor<S>& features) const { return classifier_(features); }
  Tensor<S> logits(const Tensor<S>& x) const { return logits_from_features(features(x)); }

  Index feature_width() const { return options_.widths.back(); }
  const EmbedderOptions& options() const { return options_; }
  ParameterList<S> parameters() const;

  bool trained() const { return trained_; }
  void set_trained(bool trained) { trained_ = trained; }

 private:
  EmbedderOptions options_;
  std::vector<Conv2d<S>> blocks_;
  Linear<S> classifier_;
  bool trained_ = false;
};

template <typename S>
Generator<S> build_generator(Index image_size, Index base_channels, Index n_res_blocks,
                             std::vector<Index> tap_points, std::uint64_t seed = 0);
template <typename S>
Discriminator<S> build_discriminator(Index image_size, Index base_channels, Index n_layers, std::uint64_t seed = 0);

// Draws n_locations distinct spatial indices per tap (shared by every image of
// the batch) and gathers the matching feature vectors.
template <typename S>
FeatureStack<S> sample_patch_features(const std::vector<Tensor<S>>& taps, const std::vector<Index>& tap_points,
                                      Index n_locations, std::mt19937_64& rng);
// Gathers features at previously recorded locations.
template <typename S>
FeatureStack<S> gather_patch_features(const std::vector<Tensor<S>>& taps, const std::vector<Index>& tap_points,
                                      const std::vector<std::vector<Index>>& locations);

template <typename S>
FeatureStack<S> encode_patch_features(const Generator<S>& gen, const Tensor<S>& image, Index n_locations,
                                      std::mt19937_64& rng);
template <typename S>
FeatureStack<S> encode_patch_features(const Generator<S>& gen, const Tensor<S>& image,
                                      const std::vector<std::vector<Index>>& locations);

template <typename S>
FeatureStack<S> project_features(const ProjectionHeads<S>& heads, const FeatureStack<S>& stack) {
  return heads(stack);
}

}  // namespace cranio
