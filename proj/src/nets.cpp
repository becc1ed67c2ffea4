#include "cranio/nets.hpp"

#include <algorithm>
#include <numeric>

namespace cranio {

namespace {

constexpr double kIdentitySkipLimit = 0.999;

bool is_power_of_two(Index v) { return v > 0 && (v & (v - 1)) == 0; }

[[noreturn]] void invalid(const char* where, const std::string& what) {
  throw Error(ErrorKind::InvalidArgument, where, what);
}

template <typename S>
Tensor<S> norm_relu(const Tensor<S>& x) {
  return relu(instance_norm(x));
}

}  // namespace

void to_json(nlohmann::json& j, const GeneratorOptions& o) {
  j = {{"image_size", o.image_size},       {"in_channels", o.in_channels},   {"out_channels", o.out_channels},
       {"base_channels", o.base_channels}, {"n_res_blocks", o.n_res_blocks}, {"tap_points", o.tap_points},
       {"identity_init", o.identity_init}, {"dropout", o.dropout},           {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, GeneratorOptions& o) {
  j.at("image_size").get_to(o.image_size);
  j.at("in_channels").get_to(o.in_channels);
  j.at("out_channels").get_to(o.out_channels);
  j.at("base_channels").get_to(o.base_channels);
  j.at("n_res_blocks").get_to(o.n_res_blocks);
  j.at("tap_points").get_to(o.tap_points);
  j.at("identity_init").get_to(o.identity_init);
  j.at("dropout").get_to(o.dropout);
  j.at("seed").get_to(o.seed);
}

void to_json(nlohmann::json& j, const DiscriminatorOptions& o) {
  j = {{"image_size", o.image_size},
       {"in_channels", o.in_channels},
       {"base_channels", o.base_channels},
       {"n_layers", o.n_layers},
       {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, DiscriminatorOptions& o) {
  j.at("image_size").get_to(o.image_size);
  j.at("in_channels").get_to(o.in_channels);
  j.at("base_channels").get_to(o.base_channels);
  j.at("n_layers").get_to(o.n_layers);
  j.at("seed").get_to(o.seed);
}

void to_json(nlohmann::json& j, const EmbedderOptions& o) {
  j = {{"image_size", o.image_size},
       {"in_channels", o.in_channels},
       {"widths", o.widths},
       {"n_classes", o.n_classes},
       {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, EmbedderOptions& o) {
  j.at("image_size").get_to(o.image_size);
  j.at("in_channels").get_to(o.in_channels);
  j.at("widths").get_to(o.widths);
  j.at("n_classes").get_to(o.n_classes);
  j.at("seed").get_to(o.seed);
}

template <typename S>
std::vector<std::vector<Index>> FeatureStack<S>::locations() const {
  std::vector<std::vector<Index>> out;
  for (const auto& l : layers) out.push_back(l.locations);
  return out;
}

// --- Generator -------------------------------------------------------------

template <typename S>
Generator<S>::Generator(const GeneratorOptions& options) : options_(options), noise_rng_(options.seed ^ 0x9e3779b97f4a7c15ULL) {
  const auto& o = options_;
  if (!is_power_of_two(o.image_size) || o.image_size < 16)
    invalid("build_generator", "image_size must be a power of two >= 16, got " + std::to_string(o.image_size));
  if (o.n_res_blocks < 1) invalid("build_generator", "n_res_blocks must be >= 1");
  if (o.base_channels < 1 || o.in_channels < 1 || o.out_channels < 1)
    invalid("build_generator", "channel counts must be positive");
  if (o.identity_init && o.in_channels != o.out_channels)
    invalid("build_generator", "identity_init needs matching input and output channels");
  if (o.dropout < 0.0 || o.dropout >= 1.0) invalid("build_generator", "dropout must be in [0, 1)");
  if (options_.tap_points.empty())
    options_.tap_points = {0, 2, 3, 4 + (o.n_res_blocks - 1) / 2};
  for (std::size_t i = 0; i < options_.tap_points.size(); ++i) {
    const Index t = options_.tap_points[i];
    if (t < 0 || t >= encoder_depth())
      throw Error(ErrorKind::Range, "build_generator",
                  "tap point " + std::to_string(t) + " outside encoder depth " + std::to_string(encoder_depth()));
    if (i > 0 && t <= options_.tap_points[i - 1])
      invalid("build_generator", "tap points must be strictly increasing");
  }

  std::mt19937_64 rng(o.seed);
  const Index c = o.base_channels;
  stem_ = Conv2d<S>(o.in_channels, c, 7, {1, 3, PadMode::Reflect}, false, Init::Normal002, rng);
  down1_ = Conv2d<S>(c, 2 * c, 3, {2, 1, PadMode::Zero}, false, Init::Normal002, rng);
  down2_ = Conv2d<S>(2 * c, 4 * c, 3, {2, 1, PadMode::Zero}, false, Init::Normal002, rng);
  for (Index b = 0; b < o.n_res_blocks; ++b) {
    Conv2d<S> first(4 * c, 4 * c, 3, {1, 1, PadMode::Reflect}, false, Init::Normal002, rng);
    Conv2d<S> second(4 * c, 4 * c, 3, {1, 1, PadMode::Reflect}, false, Init::Normal002, rng);
    blocks_.emplace_back(std::move(first), std::move(second));
  }
  up1_ = ConvTranspose2d<S>(4 * c, 2 * c, 3, {2, 1, 1}, false, Init::Normal002, rng);
  up2_ = ConvTranspose2d<S>(2 * c, c, 3, {2, 1, 1}, false, Init::Normal002, rng);
  head_ = Conv2d<S>(c, o.out_channels, 7, {1, 3, PadMode::Reflect}, true,
                    o.identity_init ? Init::Zero : Init::Normal002, rng);
}

template <typename S>
void Generator<S>::check_input(const Tensor<S>& x) const {
  const Shape expected{x.rank() == 4 ? x.dim(0) : 1, options_.in_channels, options_.image_size, options_.image_size};
  if (x.rank() != 4 || x.shape() != expected)
    throw Error(ErrorKind::Shape, "generator", "expected input " + to_string(expected) + ", got " + to_string(x.shape()));
}

template <typename S>
Tensor<S> Generator<S>::run(const Tensor<S>& x, std::vector<Tensor<S>>* taps, Index stop_after) const {
  check_input(x);
  auto record = [&](Index layer, const Tensor<S>& h) {
    if (taps && std::binary_search(options_.tap_points.begin(), options_.tap_points.end(), layer)) taps->push_back(h);
  };
  record(0, x);
  Tensor<S> h = norm_relu(stem_(x));
  record(1, h);
  if (stop_after == 1) return h;
  h = norm_relu(down1_(h));
  record(2, h);
  if (stop_after == 2) return h;
  h = norm_relu(down2_(h));
  record(3, h);
  if (stop_after == 3) return h;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    Tensor<S> r = norm_relu(blocks_[b].first(h));
    if (options_.dropout > 0.0) r = dropout(r, static_cast<S>(options_.dropout), noise_rng_);
    h = add(h, instance_norm(blocks_[b].second(r)));
    const Index layer = 4 + static_cast<Index>(b);
    record(layer, h);
    if (stop_after == layer) return h;
  }
  h = norm_relu(up1_(h));
  h = norm_relu(up2_(h));
  h = head_(h);
  if (options_.identity_init) {
    const S limit = static_cast<S>(kIdentitySkipLimit);
    h = add(h, cranio::atanh(clamp(x, -limit, limit)));
  }
  return cranio::tanh(h);
}

template <typename S>
Tensor<S> Generator<S>::forward(const Tensor<S>& x) const {
  return run(x, nullptr, -1);
}

template <typename S>
GeneratorOutput<S> Generator<S>::forward_with_taps(const Tensor<S>& x) const {
  GeneratorOutput<S> out;
  out.image = run(x, &out.taps, -1);
  return out;
}

template <typename S>
std::vector<Tensor<S>> Generator<S>::encode(const Tensor<S>& x) const {
  std::vector<Tensor<S>> taps;
  const Index deepest = options_.tap_points.empty() ? 0 : options_.tap_points.back();
  if (deepest == 0) {
    check_input(x);
    taps.push_back(x);
  } else {
    run(x, &taps, deepest);
  }
  return taps;
}

template <typename S>
std::vector<Index> Generator<S>::tap_channels() const {
  const Index c = options_.base_channels;
  std::vector<Index> out;
  for (Index t : options_.tap_points) {
    if (t == 0) out.push_back(options_.in_channels);
    else if (t == 1) out.push_back(c);
    else if (t == 2) out.push_back(2 * c);
    else out.push_back(4 * c);
  }
  return out;
}

template <typename S>
ParameterList<S> Generator<S>::parameters() const {
  ParameterList<S> out;
  stem_.collect(out, "stem");
  down1_.collect(out, "down1");
  down2_.collect(out, "down2");
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b].first.collect(out, "res" + std::to_string(b) + ".conv1");
    blocks_[b].second.collect(out, "res" + std::to_string(b) + ".conv2");
  }
  up1_.collect(out, "up1");
  up2_.collect(out, "up2");
  head_.collect(out, "head");
  return out;
}

// --- Discriminator ---------------------------------------------------------

template <typename S>
Discriminator<S>::Discriminator(const DiscriminatorOptions& options) : options_(options) {
  const auto& o = options_;
  if (o.n_layers < 1) invalid("build_discriminator", "n_layers must be >= 1");
  if (o.base_channels < 1 || o.in_channels < 1) invalid("build_discriminator", "channel counts must be positive");
  if (!is_power_of_two(o.image_size) || output_size() < 2)
    invalid("build_discriminator", "image_size " + std::to_string(o.image_size) + " too small for " +
                                       std::to_string(o.n_layers) + " layers (logit grid would be below 2x2)");
  std::mt19937_64 rng(o.seed);
  const Index c = o.base_channels;
  convs_.emplace_back(o.in_channels, c, 4, ConvParams{2, 1, PadMode::Zero}, true, Init::Normal002, rng);
  Index mult = 1;
  for (Index n = 1; n < o.n_layers; ++n) {
    const Index prev = mult;
    mult = std::min<Index>(Index{1} << n, 8);
    convs_.emplace_back(c * prev, c * mult, 4, ConvParams{2, 1, PadMode::Zero}, false, Init::Normal002, rng);
  }
  const Index prev = mult;
  mult = std::min<Index>(Index{1} << o.n_layers, 8);
  convs_.emplace_back(c * prev, c * mult, 4, ConvParams{1, 1, PadMode::Zero}, false, Init::Normal002, rng);
  convs_.emplace_back(c * mult, 1, 4, ConvParams{1, 1, PadMode::Zero}, true, Init::Normal002, rng);
}

template <typename S>
Index Discriminator<S>::output_size() const {
  Index s = options_.image_size;
  for (Index n = 0; n < options_.n_layers; ++n) s /= 2;
  return s - 2;
}

template <typename S>
Tensor<S> Discriminator<S>::forward(const Tensor<S>& x) const {
  const Shape expected{x.rank() == 4 ? x.dim(0) : 1, options_.in_channels, options_.image_size, options_.image_size};
  if (x.rank() != 4 || x.shape() != expected)
    throw Error(ErrorKind::Shape, "discriminator", "expected input " + to_string(expected) + ", got " + to_string(x.shape()));
  Tensor<S> h = leaky_relu(convs_.front()(x), S(0.2));
  for (std::size_t i = 1; i + 1 < convs_.size(); ++i) h = leaky_relu(instance_norm(convs_[i](h)), S(0.2));
  return convs_.back()(h);
}

template <typename S>
ParameterList<S> Discriminator<S>::parameters() const {
  ParameterList<S> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "conv" + std::to_string(i));
  return out;
}

// --- Projection heads ------------------------------------------------------

template <typename S>
ProjectionHeads<S>::ProjectionHeads(const std::vector<Index>& in_channels, Index width, std::uint64_t seed)
    : in_channels_(in_channels), width_(width), seed_(seed) {
  if (width < 1) invalid("projection_heads", "embedding width must be positive");
  std::mt19937_64 rng(seed);
  for (Index c : in_channels) {
    // Random biases keep an all-zero patch feature (common after ReLU) away
    // from the non-differentiable zero vector at the normalization.
    Linear<S> first(c, width, Init::Normal002, rng, Init::Normal002);
    Linear<S> second(width, width, Init::Normal002, rng, Init::Normal002);
    mlps_.emplace_back(std::move(first), std::move(second));
  }
}

template <typename S>
Tensor<S> ProjectionHeads<S>::project(std::size_t layer, const Tensor<S>& features) const {
  if (layer >= mlps_.size())
    throw Error(ErrorKind::Shape, "project_features", "no head for layer " + std::to_string(layer));
  const auto& [first, second] = mlps_[layer];
  if (features.rank() != 2 || features.dim(1) != first.in_features())
    throw Error(ErrorKind::Shape, "project_features",
                "head " + std::to_string(layer) + " expects width " + std::to_string(first.in_features()) + ", got " +
                    to_string(features.shape()));
  return normalize_rows(second(relu(first(features))));
}

template <typename S>
FeatureStack<S> ProjectionHeads<S>::operator()(const FeatureStack<S>& stack) const {
  if (stack.layers.size() != mlps_.size())
    throw Error(ErrorKind::Shape, "project_features",
                std::to_string(stack.layers.size()) + " feature layers for " + std::to_string(mlps_.size()) + " heads");
  FeatureStack<S> out;
  out.batch = stack.batch;
  for (std::size_t l = 0; l < stack.layers.size(); ++l)
    out.layers.push_back({stack.layers[l].layer, stack.layers[l].locations, project(l, stack.layers[l].features)});
  return out;
}

template <typename S>
ParameterList<S> ProjectionHeads<S>::parameters() const {
  ParameterList<S> out;
  for (std::size_t l = 0; l < mlps_.size(); ++l) {
    mlps_[l].first.collect(out, "mlp" + std::to_string(l) + ".fc1");
    mlps_[l].second.collect(out, "mlp" + std::to_string(l) + ".fc2");
  }
  return out;
}

// --- Embedder --------------------------------------------------------------

template <typename S>
Embedder<S>::Embedder(const EmbedderOptions& options) : options_(options) {
  const auto& o = options_;
  if (o.widths.empty()) invalid("embedder", "need at least one block");
  if (o.n_classes < 2) invalid("embedder", "need at least two classes");
  Index size = o.image_size;
  for (std::size_t i = 0; i < o.widths.size(); ++i) size /= 2;
  if (size < 1 || (o.image_size >> o.widths.size()) << o.widths.size() != o.image_size)
    invalid("embedder", "image_size must be divisible by 2^blocks");
  std::mt19937_64 rng(o.seed);
  Index in = o.in_channels;
  for (Index w : o.widths) {
    blocks_.emplace_back(in, w, 3, ConvParams{2, 1, PadMode::Zero}, true, Init::Kaiming, rng);
    in = w;
  }
  classifier_ = Linear<S>(in, o.n_classes, Init::Kaiming, rng);
}

template <typename S>
Tensor<S> Embedder<S>::features(const Tensor<S>& x) const {
  const Shape expected{x.rank() == 4 ? x.dim(0) : 1, options_.in_channels, options_.image_size, options_.image_size};
  if (x.rank() != 4 || x.shape() != expected)
    throw Error(ErrorKind::Shape, "embedder", "expected input " + to_string(expected) + ", got " + to_string(x.shape()));
  Tensor<S> h = x;
  for (const auto& b : blocks_) h = leaky_relu(b(h), S(0.2));
  return mean_spatial(h);
}

template <typename S>
ParameterList<S> Embedder<S>::parameters() const {
  ParameterList<S> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "block" + std::to_string(i));
  classifier_.collect(out, "classifier");
  return out;
}

// --- Builders and patch sampling ---------------------------------------------

template <typename S>
Generator<S> build_generator(Index image_size, Index base_channels, Index n_res_blocks, std::vector<Index> tap_points,
                             std::uint64_t seed) {
  GeneratorOptions o;
  o.image_size = image_size;
  o.base_channels = base_channels;
  o.n_res_blocks = n_res_blocks;
  o.tap_points = std::move(tap_points);
  o.seed = seed;
  return Generator<S>(o);
}

template <typename S>
Discriminator<S> build_discriminator(Index image_size, Index base_channels, Index n_layers, std::uint64_t seed) {
  DiscriminatorOptions o;
  o.image_size = image_size;
  o.base_channels = base_channels;
  o.n_layers = n_layers;
  o.seed = seed;
  return Discriminator<S>(o);
}

template <typename S>
FeatureStack<S> sample_patch_features(const std::vector<Tensor<S>>& taps, const std::vector<Index>& tap_points,
                                      Index n_locations, std::mt19937_64& rng) {
  if (taps.size() != tap_points.size())
    throw Error(ErrorKind::Shape, "encode_patch_features", "tap count does not match tap points");
  if (n_locations < 1) invalid("encode_patch_features", "n_locations must be >= 1");
  std::vector<std::vector<Index>> locations;
  for (std::size_t l = 0; l < taps.size(); ++l) {
    const Index available = taps[l].dim(2) * taps[l].dim(3);
    if (n_locations > available)
      invalid("encode_patch_features", std::to_string(n_locations) + " locations requested but layer " +
                                           std::to_string(tap_points[l]) + " has " + std::to_string(available));
    std::vector<Index> pool(static_cast<std::size_t>(available));
    std::iota(pool.begin(), pool.end(), Index{0});
    // Partial Fisher-Yates: the first n_locations entries are a uniform draw.
    for (Index i = 0; i < n_locations; ++i) {
      std::uniform_int_distribution<Index> pick(i, available - 1);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
    }
    pool.resize(static_cast<std::size_t>(n_locations));
    locations.push_back(std::move(pool));
  }
  return gather_patch_features(taps, tap_points, locations);
}

template <typename S>
FeatureStack<S> gather_patch_features(const std::vector<Tensor<S>>& taps, const std::vector<Index>& tap_points,
                                      const std::vector<std::vector<Index>>& locations) {
  if (taps.size() != tap_points.size() || locations.size() != taps.size())
    throw Error(ErrorKind::Shape, "encode_patch_features",
                std::to_string(locations.size()) + " location sets for " + std::to_string(taps.size()) + " taps");
  FeatureStack<S> stack;
  stack.batch = taps.empty() ? 0 : taps.front().dim(0);
  for (std::size_t l = 0; l < taps.size(); ++l)
    stack.layers.push_back({tap_points[l], locations[l], gather_locations<S>(taps[l], locations[l])});
  return stack;
}

template <typename S>
FeatureStack<S> encode_patch_features(const Generator<S>& gen, const Tensor<S>& image, Index n_locations,
                                      std::mt19937_64& rng) {
  return sample_patch_features(gen.encode(image), gen.tap_points(), n_locations, rng);
}

template <typename S>
FeatureStack<S> encode_patch_features(const Generator<S>& gen, const Tensor<S>& image,
                                      const std::vector<std::vector<Index>>& locations) {
  return gather_patch_features(gen.encode(image), gen.tap_points(), locations);
}

#define CRANIO_INSTANTIATE_NETS(S)                                                                                  \
  template struct FeatureStack<S>;                                                                                  \
  template class Generator<S>;                                                                                      \
  template class Discriminator<S>;                                                                                  \
  template class ProjectionHeads<S>;                                                                                \
  template class Embedder<S>;                                                                                       \
  template Generator<S> build_generator<S>(Index, Index, Index, std::vector<Index>, std::uint64_t);                 \
  template Discriminator<S> build_discriminator<S>(Index, Index, Index, std::uint64_t);                             \
  template FeatureStack<S> sample_patch_features<S>(const std::vector<Tensor<S>>&, const std::vector<Index>&, Index, \
                                                    std::mt19937_64&);                                              \
  template FeatureStack<S> gather_patch_features<S>(const std::vector<Tensor<S>>&, const std::vector<Index>&,       \
                                                    const std::vector<std::vector<Index>>&);                        \
  template FeatureStack<S> encode_patch_features<S>(const Generator<S>&, const Tensor<S>&, Index, std::mt19937_64&); \
  template FeatureStack<S> encode_patch_features<S>(const Generator<S>&, const Tensor<S>&,                          \
                                                    const std::vector<std::vector<Index>>&);

CRANIO_INSTANTIATE_NETS(float)
CRANIO_INSTANTIATE_NETS(double)

}  // namespace cranio
