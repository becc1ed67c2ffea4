#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cranio/checkpoint.hpp"
#include "cranio/data.hpp"
#include "cranio/losses.hpp"

namespace cranio {

struct TrainConfig {
  Variant variant = Variant::FastCUT;
  Index epochs = 200;
  Index batch_size = 4;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  Index image_size = 64;
  Index n_locations = 64;
  Index log_every = 1;         // steps
  Index checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint

  Index generator_channels = 16;
  Index res_blocks = 4;
  std::vector<Index> tap_points;  // empty: generator default
  Index discriminator_channels = 16;
  Index discriminator_layers = 3;
  Index head_width = 256;
  bool identity_init = false;

  GanForm gan_form = GanForm::LeastSquares;
  double tau = 0.07;
  bool detach_source_features = false;
  // Unset weights take the variant's defaults.
  std::optional<double> lambda_cycle, lambda_identity, lambda_x, lambda_y, lambda_l1;

  void validate() const;
  LossConfig loss() const;
  GeneratorOptions generator_options() const;
  DiscriminatorOptions discriminator_options() const;

  // "key = value" lines; '#' starts a comment.
  static TrainConfig parse(const std::string& text);
  std::string to_text() const;
};

TrainConfig load_train_config(const std::filesystem::path& path);
void to_json(nlohmann::json& j, const TrainConfig& c);

template <typename S>
class Adam {
 public:
  Adam(ParameterList<S> params, double lr, double beta1, double beta2, double eps = 1e-8);

  void zero_grad();
  // Applies one update from the accumulated gradients. Parameters without a
  // gradient are left alone. Returns the number of entries that changed.
  Index step();
  long steps() const { return t_; }
  const ParameterList<S>& parameters() const { return params_; }

 private:
  ParameterList<S> params_;
  std::vector<Array<S>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// Networks of one variant: G_Y and D_Y always; G_X and D_X for CycleGAN;
// projection heads for CUT and FastCUT.
template <typename S>
struct Models {
  TrainConfig config;
  std::unique_ptr<Generator<S>> g_y, g_x;
  std::unique_ptr<Discriminator<S>> d_y, d_x;
  std::unique_ptr<ProjectionHeads<S>> heads;

  explicit Models(const TrainConfig& config);
  ParameterList<S> generator_parameters() const;      // generators and heads
  ParameterList<S> discriminator_parameters() const;
  ParameterList<S> parameters() const;                 // both, prefixed by net
};

struct StepRecord {
  long step = 0;
  Index epoch = 0;
  double generator_total = 0.0;
  double discriminator_total = 0.0;
  std::vector<LossTerm> terms;
  std::string line;
};

template <typename S>
class Trainer {
 public:
  Trainer(const TrainConfig& config, std::vector<ImagePair> pairs);

  // Batch for a global step; the order within an epoch is a seeded shuffle.
  Batch<S> batch_for(long step) const;
  long steps_per_epoch() const;
  long total_steps() const { return steps_per_epoch() * config_.epochs; }

  // Objective values at the current parameters without updating anything;
  // matches what step() logs for the same step index.
  StepRecord evaluate(const Batch<S>& batch, long step);
  // Generator update followed by a discriminator update on the same fakes.
  StepRecord step(const Batch<S>& batch, long step);

  // Full run: a loss record per log_every steps to `log`, checkpoints in
  // out_dir. A non-finite loss throws Diverged, leaving the last checkpoint.
  void run(const std::filesystem::path& out_dir, std::ostream* log = nullptr);

  Checkpoint checkpoint() const;
  Models<S>& models() { return models_; }
  const TrainConfig& config() const { return config_; }
  long completed_steps() const { return completed_; }

 private:
  StepRecord compute(const Batch<S>& batch, long step, bool update);

  TrainConfig config_;
  LossConfig loss_;
  std::vector<ImagePair> pairs_;
  Models<S> models_;
  Adam<S> opt_g_, opt_d_;
  long completed_ = 0;
};

// A skull-to-face generator restored from a training checkpoint.
template <typename S>
struct Translator {
  TrainConfig config;
  std::unique_ptr<Generator<S>> generator;
  std::uint64_t noise_seed = 0;
};

template <typename S>
Translator<S> load_translator(const std::filesystem::path& checkpoint);
// Runs without recording gradients; the dropout noise (cGAN) is reseeded
// from the checkpoint on every call, so outputs are reproducible.
template <typename S>
std::vector<Image> generate(const Translator<S>& translator, std::span<const Image> skulls, Index batch_size = 8);

struct EmbedderTrainConfig {
  Index epochs = 40;
  Index batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  // Fresh random warp, colour jitter and pixel noise on every presentation.
  bool augment = true;
  EmbedderOptions net;  // n_classes is taken from the labels
};

// Identity classifier on labelled images (labels 0..C-1); marked trained.
template <typename S>
Embedder<S> train_embedder(const EmbedderTrainConfig& config, const std::vector<Image>& images,
                           const std::vector<Index>& labels, std::ostream* log = nullptr);

template <typename S>
Checkpoint embedder_checkpoint(const Embedder<S>& embedder);
template <typename S>
Embedder<S> load_embedder(const std::filesystem::path& path);

}  // namespace cranio
