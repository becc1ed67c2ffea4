#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cranio/nets.hpp"

namespace cranio {

enum class Variant { CycleGAN, CGAN, CUT, FastCUT };
enum class GanForm { Log, LeastSquares };
enum class Side { Generator, Discriminator };

const char* to_string(Variant v);
const char* to_string(GanForm f);
// Accepts the lower-case names cyclegan, cgan, cut, fastcut.
Variant parse_variant(const std::string& name);
GanForm parse_gan_form(const std::string& name);

struct LossConfig {
  Variant variant = Variant::FastCUT;
  double lambda_cycle = 10.0;     // CycleGAN reconstruction weight
  double lambda_identity = 5.0;   // CycleGAN identity weight
  double lambda_x = 10.0;         // patch term weight (CUT family)
  double lambda_y = 0.0;          // identity term weight (CUT family)
  double lambda_l1 = 100.0;       // cGAN reconstruction weight
  double tau = 0.07;
  GanForm gan_form = GanForm::LeastSquares;
  Index n_locations = 64;
  // Stops gradients into the encoder through the source-image features.
  bool detach_source_features = false;

  // Defaults for a variant, including its (lambda_x, lambda_y) pair.
  static LossConfig for_variant(Variant v);
  void validate() const;
};

template <typename S>
using ImageMap = std::function<Tensor<S>(const Tensor<S>&)>;

template <typename S>
struct Batch {
  Tensor<S> x;  // skull domain
  Tensor<S> y;  // face domain
  bool paired = false;
};

// One weighted summand of an objective. total == sum of weight * value.
struct LossTerm {
  std::string name;
  double weight = 1.0;
  double value = 0.0;
  double contribution() const { return weight * value; }
};

template <typename S>
struct Objective {
  Tensor<S> total;
  std::vector<LossTerm> terms;
  // Translated images produced on the way (G_Y(x), and G_X(y) for CycleGAN),
  // reusable for the discriminator update.
  std::vector<Tensor<S>> fakes;

  double term(const std::string& name) const;
};

// Real logits are ignored (and may be undefined) on the generator side.
template <typename S>
Tensor<S> gan_loss(const Tensor<S>& real_logits, const Tensor<S>& fake_logits, Side side, GanForm form);

template <typename S>
Tensor<S> cycle_loss(const Tensor<S>& x, const Tensor<S>& y, const ImageMap<S>& g_y, const ImageMap<S>& g_x);
template <typename S>
Tensor<S> identity_loss_cyclegan(const Tensor<S>& x, const Tensor<S>& y, const ImageMap<S>& g_y,
                                 const ImageMap<S>& g_x);
template <typename S>
Tensor<S> cut_identity_loss(const ImageMap<S>& g_y, const Tensor<S>& y);

// Contrastive cross-entropy of one query against its positive and negatives:
// query [K], positive [K], negatives [N, K].
template <typename S>
Tensor<S> patch_nce_single(const Tensor<S>& query, const Tensor<S>& positive, const Tensor<S>& negatives, double tau);

// Sum over layers and sampled locations, mean over images, of the contrastive
// loss between translated (query) and source (key) embeddings. Negatives for a
// location are the other sampled locations of the same layer and image.
template <typename S>
Tensor<S> patch_nce_stacks(const FeatureStack<S>& queries, const FeatureStack<S>& keys, double tau);

// Samples locations on x, reuses them on translate(x), projects both through
// heads and scores them with patch_nce_stacks.
template <typename S>
Tensor<S> patch_loss_total(const Generator<S>& g_y, const ProjectionHeads<S>& heads, const Tensor<S>& x,
                           Index n_locations, std::mt19937_64& rng, double tau = 0.07);

template <typename S>
struct CycleNets {
  ImageMap<S> g_y, g_x, d_y, d_x;
};

template <typename S>
struct CganNets {
  ImageMap<S> g_y;
  ImageMap<S> d_y;  // scores [x, y] concatenated along channels
};

template <typename S>
struct CutNets {
  const Generator<S>* g_y = nullptr;
  ImageMap<S> d_y;
  const ProjectionHeads<S>* heads = nullptr;
  // Optional replacement for g_y's forward pass (patch features still come
  // from g_y's encoder).
  ImageMap<S> translate;
};

template <typename S>
Objective<S> cyclegan_objective(const Batch<S>& batch, const CycleNets<S>& nets, const LossConfig& config,
                                Side side = Side::Generator);
template <typename S>
Objective<S> cgan_objective(const Batch<S>& batch, const CganNets<S>& nets, const LossConfig& config,
                            Side side = Side::Generator);
template <typename S>
Objective<S> cut_objective(const Batch<S>& batch, const CutNets<S>& nets, const LossConfig& config,
                           std::mt19937_64& rng, Side side = Side::Generator);

// "step=.. variant=.. name=value ... total=.." with terms in breakdown order.
template <typename S>
std::string format_loss_record(long step, Variant variant, const Objective<S>& generator, double discriminator_total);

}  // namespace cranio
