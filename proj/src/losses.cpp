#include "cranio/losses.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace cranio {

namespace {

[[noreturn]] void invalid(const char* where, const std::string& what) {
  throw Error(ErrorKind::InvalidArgument, where, what);
}

template <typename S>
void require_same(const char* where, const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.defined() || !b.defined()) throw Error(ErrorKind::Shape, where, "undefined image batch");
  if (a.shape() != b.shape())
    throw Error(ErrorKind::Shape, where, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename S>
void require_map(const char* where, const ImageMap<S>& f, const char* name) {
  if (!f) invalid(where, std::string("missing network ") + name);
}

template <typename S>
Tensor<S> weighted(const Tensor<S>& total, const Tensor<S>& term, double weight) {
  return add(total, scale(term, static_cast<S>(weight)));
}

template <typename S>
Tensor<S> detached(const Tensor<S>& t) {
  return t.requires_grad() ? t.detach() : t;
}

}  // namespace

const char* to_string(Variant v) {
  switch (v) {
    case Variant::CycleGAN: return "cyclegan";
    case Variant::CGAN: return "cgan";
    case Variant::CUT: return "cut";
    case Variant::FastCUT: return "fastcut";
  }
  return "unknown";
}

const char* to_string(GanForm f) { return f == GanForm::Log ? "log" : "least_squares"; }

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::CycleGAN, Variant::CGAN, Variant::CUT, Variant::FastCUT})
    if (name == to_string(v)) return v;
  throw Error(ErrorKind::Usage, "variant", "unknown variant '" + name + "' (expected cyclegan, cgan, cut or fastcut)");
}

GanForm parse_gan_form(const std::string& name) {
  if (name == "log") return GanForm::Log;
  if (name == "least_squares" || name == "lsgan") return GanForm::LeastSquares;
  throw Error(ErrorKind::Usage, "gan_form", "unknown GAN form '" + name + "' (expected log or least_squares)");
}

LossConfig LossConfig::for_variant(Variant v) {
  LossConfig c;
  c.variant = v;
  if (v == Variant::CUT) {
    c.lambda_x = 1.0;
    c.lambda_y = 1.0;
  } else if (v == Variant::FastCUT) {
    c.lambda_x = 10.0;
    c.lambda_y = 0.0;
  }
  return c;
}

void LossConfig::validate() const {
  for (double w : {lambda_cycle, lambda_identity, lambda_x, lambda_y, lambda_l1})
    if (!(w >= 0.0) || !std::isfinite(w)) invalid("loss_config", "loss weights must be finite and >= 0");
  if (!(tau > 0.0) || !std::isfinite(tau)) invalid("loss_config", "temperature must be > 0");
  if (variant == Variant::FastCUT && (lambda_x != 10.0 || lambda_y != 0.0))
    invalid("loss_config", "fastcut fixes (lambda_x, lambda_y) = (10, 0)");
  if ((variant == Variant::CUT || variant == Variant::FastCUT) && n_locations < 2)
    invalid("loss_config", "patch loss needs n_locations >= 2");
}

template <typename S>
double Objective<S>::term(const std::string& name) const {
  for (const auto& t : terms)
    if (t.name == name) return t.value;
  throw Error(ErrorKind::NotFound, "objective", "no term '" + name + "'");
}

template <typename S>
Tensor<S> gan_loss(const Tensor<S>& real_logits, const Tensor<S>& fake_logits, Side side, GanForm form) {
  if (!fake_logits.defined()) invalid("gan_loss", "empty batch: no fake logits");
  if (side == Side::Generator) {
    if (form == GanForm::Log) return scale(mean(log_sigmoid(fake_logits)), S(-1));
    return squared_l2_distance(fake_logits, Tensor<S>::full(fake_logits.shape(), S(1)));
  }
  if (!real_logits.defined()) invalid("gan_loss", "empty batch: no real logits");
  if (form == GanForm::Log)
    return scale(add(mean(log_sigmoid(real_logits)), mean(log_sigmoid(scale(fake_logits, S(-1))))), S(-1));
  return add(squared_l2_distance(real_logits, Tensor<S>::full(real_logits.shape(), S(1))),
             squared_l2_distance(fake_logits, Tensor<S>::zeros(fake_logits.shape())));
}

template <typename S>
Tensor<S> cycle_loss(const Tensor<S>& x, const Tensor<S>& y, const ImageMap<S>& g_y, const ImageMap<S>& g_x) {
  require_map("cycle_loss", g_y, "G_Y");
  require_map("cycle_loss", g_x, "G_X");
  const Tensor<S> rx = g_x(g_y(x));
  const Tensor<S> ry = g_y(g_x(y));
  require_same("cycle_loss", rx, x);
  require_same("cycle_loss", ry, y);
  return add(l1_distance(rx, x), l1_distance(ry, y));
}

template <typename S>
Tensor<S> identity_loss_cyclegan(const Tensor<S>& x, const Tensor<S>& y, const ImageMap<S>& g_y,
                                 const ImageMap<S>& g_x) {
  require_map("identity_loss", g_y, "G_Y");
  require_map("identity_loss", g_x, "G_X");
  const Tensor<S> iy = g_y(y);
  const Tensor<S> ix = g_x(x);
  require_same("identity_loss", iy, y);
  require_same("identity_loss", ix, x);
  return add(l1_distance(iy, y), l1_distance(ix, x));
}

template <typename S>
Tensor<S> cut_identity_loss(const ImageMap<S>& g_y, const Tensor<S>& y) {
  require_map("cut_identity_loss", g_y, "G_Y");
  const Tensor<S> iy = g_y(y);
  require_same("cut_identity_loss", iy, y);
  return l1_distance(iy, y);
}

template <typename S>
Tensor<S> patch_nce_single(const Tensor<S>& query, const Tensor<S>& positive, const Tensor<S>& negatives, double tau) {
  if (!(tau > 0.0)) invalid("patch_nce", "temperature must be > 0");
  if (!negatives.defined()) invalid("patch_nce", "no negatives (N = 0)");
  const Index k = query.size();
  if (positive.size() != k) throw Error(ErrorKind::Shape, "patch_nce", "positive width differs from query width");
  if (negatives.rank() != 2 || negatives.dim(1) != k)
    throw Error(ErrorKind::Shape, "patch_nce",
                "negatives must be [N, " + std::to_string(k) + "], got " + to_string(negatives.shape()));
  const std::vector<Tensor<S>> keys_parts{reshape(positive, {1, k}), negatives};
  const Tensor<S> keys = concat<S>(keys_parts, 0);
  const Tensor<S> logits = scale(matmul(reshape(query, {1, k}), keys, true), static_cast<S>(1.0 / tau));
  const Index target = 0;
  return sum(softmax_cross_entropy(logits, std::span<const Index>(&target, 1)));
}

template <typename S>
Tensor<S> patch_nce_stacks(const FeatureStack<S>& queries, const FeatureStack<S>& keys, double tau) {
  if (!(tau > 0.0)) invalid("patch_loss", "temperature must be > 0");
  if (queries.layers.size() != keys.layers.size() || queries.layers.empty())
    throw Error(ErrorKind::Shape, "patch_loss", "query and key stacks need the same non-zero layer count");
  if (queries.batch != keys.batch || queries.batch < 1)
    throw Error(ErrorKind::Shape, "patch_loss", "query and key stacks cover different batches");
  const Index batch = queries.batch;
  const S inv_tau = static_cast<S>(1.0 / tau);
  Tensor<S> total;
  for (std::size_t l = 0; l < queries.layers.size(); ++l) {
    const auto& q = queries.layers[l];
    const auto& k = keys.layers[l];
    if (q.locations != k.locations)
      invalid("patch_loss", "layer " + std::to_string(q.layer) + ": query and key locations differ");
    const Index n = static_cast<Index>(q.locations.size());
    if (n < 2) invalid("patch_loss", "fewer than 2 sampled locations leaves no negatives");
    std::vector<Index> targets(static_cast<std::size_t>(n));
    std::iota(targets.begin(), targets.end(), Index{0});
    for (Index b = 0; b < batch; ++b) {
      const Tensor<S> logits =
          scale(matmul(slice(q.features, 0, b * n, n), slice(k.features, 0, b * n, n), true), inv_tau);
      const Tensor<S> term = sum(softmax_cross_entropy(logits, std::span<const Index>(targets)));
      total = total.defined() ? add(total, term) : term;
    }
  }
  return scale(total, S(1) / static_cast<S>(batch));
}

template <typename S>
Tensor<S> patch_loss_total(const Generator<S>& g_y, const ProjectionHeads<S>& heads, const Tensor<S>& x,
                           Index n_locations, std::mt19937_64& rng, double tau) {
  if (n_locations < 2) invalid("patch_loss", "fewer than 2 sampled locations leaves no negatives");
  const GeneratorOutput<S> out = g_y.forward_with_taps(x);
  const FeatureStack<S> source = sample_patch_features(out.taps, g_y.tap_points(), n_locations, rng);
  const FeatureStack<S> translated = gather_patch_features(g_y.encode(out.image), g_y.tap_points(), source.locations());
  return patch_nce_stacks(heads(translated), heads(source), tau);
}

template <typename S>
Objective<S> cyclegan_objective(const Batch<S>& batch, const CycleNets<S>& nets, const LossConfig& config,
                                Side side) {
  if (config.variant != Variant::CycleGAN) invalid("cyclegan_objective", "config variant is not cyclegan");
  config.validate();
  for (auto [f, name] : {std::pair{&nets.g_y, "G_Y"}, {&nets.g_x, "G_X"}, {&nets.d_y, "D_Y"}, {&nets.d_x, "D_X"}})
    require_map("cyclegan_objective", *f, name);
  require_same("cyclegan_objective", batch.x, batch.y);
  Objective<S> obj;
  if (side == Side::Discriminator) {
    Tensor<S> fake_y, fake_x;
    {
      NoGradGuard guard;
      fake_y = nets.g_y(batch.x);
      fake_x = nets.g_x(batch.y);
    }
    const Tensor<S> dy = gan_loss(nets.d_y(batch.y), nets.d_y(fake_y), side, config.gan_form);
    const Tensor<S> dx = gan_loss(nets.d_x(batch.x), nets.d_x(fake_x), side, config.gan_form);
    obj.total = add(dy, dx);
    obj.terms = {{"gan_y", 1.0, dy.item()}, {"gan_x", 1.0, dx.item()}};
    obj.fakes = {fake_y, fake_x};
    return obj;
  }
  const Tensor<S> fake_y = nets.g_y(batch.x);
  const Tensor<S> fake_x = nets.g_x(batch.y);
  const Tensor<S> gy = gan_loss(Tensor<S>(), nets.d_y(fake_y), side, config.gan_form);
  const Tensor<S> gx = gan_loss(Tensor<S>(), nets.d_x(fake_x), side, config.gan_form);
  const Tensor<S> rec_x = nets.g_x(fake_y), rec_y = nets.g_y(fake_x);
  require_same("cycle_loss", rec_x, batch.x);
  const Tensor<S> cyc = add(l1_distance(rec_x, batch.x), l1_distance(rec_y, batch.y));
  Tensor<S> total = weighted(add(gy, gx), cyc, config.lambda_cycle);
  double idt_value = 0.0;
  if (config.lambda_identity != 0.0) {
    const Tensor<S> idt = identity_loss_cyclegan(batch.x, batch.y, nets.g_y, nets.g_x);
    total = weighted(total, idt, config.lambda_identity);
    idt_value = idt.item();
  }
  obj.total = total;
  obj.terms = {{"gan_y", 1.0, gy.item()},
               {"gan_x", 1.0, gx.item()},
               {"cycle", config.lambda_cycle, cyc.item()},
               {"identity", config.lambda_identity, idt_value}};
  obj.fakes = {detached(fake_y), detached(fake_x)};
  return obj;
}

template <typename S>
Objective<S> cgan_objective(const Batch<S>& batch, const CganNets<S>& nets, const LossConfig& config, Side side) {
  if (config.variant != Variant::CGAN) invalid("cgan_objective", "config variant is not cgan");
  config.validate();
  if (!batch.paired)
    invalid("cgan_objective", "the conditioned GAN is supervised and needs paired (skull, face) batches");
  require_map("cgan_objective", nets.g_y, "G_Y");
  require_map("cgan_objective", nets.d_y, "D_Y");
  require_same("cgan_objective", batch.x, batch.y);
  auto pair = [&](const Tensor<S>& face) { return concat<S>(std::vector<Tensor<S>>{batch.x, face}, 1); };
  Objective<S> obj;
  if (side == Side::Discriminator) {
    Tensor<S> fake;
    {
      NoGradGuard guard;
      fake = nets.g_y(batch.x);
    }
    const Tensor<S> d = gan_loss(nets.d_y(pair(batch.y)), nets.d_y(pair(fake)), side, config.gan_form);
    obj.total = d;
    obj.terms = {{"gan", 1.0, d.item()}};
    obj.fakes = {fake};
    return obj;
  }
  const Tensor<S> fake = nets.g_y(batch.x);
  require_same("cgan_objective", fake, batch.y);
  const Tensor<S> gan = gan_loss(Tensor<S>(), nets.d_y(pair(fake)), side, config.gan_form);
  const Tensor<S> l1 = l1_distance(fake, batch.y);
  obj.total = weighted(gan, l1, config.lambda_l1);
  obj.terms = {{"gan", 1.0, gan.item()}, {"l1", config.lambda_l1, l1.item()}};
  obj.fakes = {detached(fake)};
  return obj;
}

template <typename S>
Objective<S> cut_objective(const Batch<S>& batch, const CutNets<S>& nets, const LossConfig& config,
                           std::mt19937_64& rng, Side side) {
  if (config.variant != Variant::CUT && config.variant != Variant::FastCUT)
    invalid("cut_objective", std::string("config variant ") + to_string(config.variant) + " is not cut or fastcut");
  config.validate();
  if (!nets.g_y) invalid("cut_objective", "missing generator G_Y");
  require_map("cut_objective", nets.d_y, "D_Y");
  if (!nets.heads) invalid("cut_objective", "missing projection heads");
  if (!batch.x.defined() || !batch.y.defined()) throw Error(ErrorKind::Shape, "cut_objective", "undefined image batch");
  const Generator<S>& g = *nets.g_y;
  const ImageMap<S> translate = nets.translate ? nets.translate : ImageMap<S>([&g](const Tensor<S>& t) { return g(t); });

  Objective<S> obj;
  if (side == Side::Discriminator) {
    Tensor<S> fake;
    {
      NoGradGuard guard;
      fake = translate(batch.x);
    }
    const Tensor<S> d = gan_loss(nets.d_y(batch.y), nets.d_y(fake), side, config.gan_form);
    obj.total = d;
    obj.terms = {{"gan", 1.0, d.item()}};
    obj.fakes = {fake};
    return obj;
  }

  std::vector<Tensor<S>> source_taps;
  Tensor<S> fake;
  if (nets.translate) {
    source_taps = g.encode(batch.x);
    fake = translate(batch.x);
  } else {
    GeneratorOutput<S> out = g.forward_with_taps(batch.x);
    source_taps = std::move(out.taps);
    fake = out.image;
  }
  require_same("cut_objective", fake, batch.x);
  if (config.detach_source_features)
    for (auto& t : source_taps) t = detached(t);
  const FeatureStack<S> source = sample_patch_features(source_taps, g.tap_points(), config.n_locations, rng);
  const FeatureStack<S> translated = gather_patch_features(g.encode(fake), g.tap_points(), source.locations());
  const Tensor<S> patch = patch_nce_stacks((*nets.heads)(translated), (*nets.heads)(source), config.tau);
  const Tensor<S> gan = gan_loss(Tensor<S>(), nets.d_y(fake), side, config.gan_form);
  Tensor<S> total = weighted(gan, patch, config.lambda_x);
  double idt_value = 0.0;
  // A zero identity weight skips the term entirely, so the objective cannot
  // depend on how the generator treats face-domain inputs.
  if (config.lambda_y != 0.0) {
    const Tensor<S> idt = cut_identity_loss(translate, batch.y);
    total = weighted(total, idt, config.lambda_y);
    idt_value = idt.item();
  }
  obj.total = total;
  obj.terms = {{"gan", 1.0, gan.item()}, {"patch", config.lambda_x, patch.item()}, {"identity", config.lambda_y, idt_value}};
  obj.fakes = {detached(fake)};
  return obj;
}

template <typename S>
std::string format_loss_record(long step, Variant variant, const Objective<S>& generator, double discriminator_total) {
  char buf[64];
  std::string line = "step=" + std::to_string(step) + " variant=" + to_string(variant);
  std::snprintf(buf, sizeof(buf), " d_loss=%.10g", discriminator_total);
  line += buf;
  for (const auto& t : generator.terms) {
    std::snprintf(buf, sizeof(buf), "=%.10g", t.contribution());
    line += " " + t.name + buf;
  }
  std::snprintf(buf, sizeof(buf), " total=%.10g", static_cast<double>(generator.total.item()));
  return line + buf;
}

#define CRANIO_INSTANTIATE_LOSSES(S)                                                                                 \
  template struct Objective<S>;                                                                                      \
  template Tensor<S> gan_loss<S>(const Tensor<S>&, const Tensor<S>&, Side, GanForm);                                 \
  template Tensor<S> cycle_loss<S>(const Tensor<S>&, const Tensor<S>&, const ImageMap<S>&, const ImageMap<S>&);      \
  template Tensor<S> identity_loss_cyclegan<S>(const Tensor<S>&, const Tensor<S>&, const ImageMap<S>&,               \
                                               const ImageMap<S>&);                                                  \
  template Tensor<S> cut_identity_loss<S>(const ImageMap<S>&, const Tensor<S>&);                                     \
  template Tensor<S> patch_nce_single<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, double);              \
  template Tensor<S> patch_nce_stacks<S>(const FeatureStack<S>&, const FeatureStack<S>&, double);                    \
  template Tensor<S> patch_loss_total<S>(const Generator<S>&, const ProjectionHeads<S>&, const Tensor<S>&, Index,    \
                                         std::mt19937_64&, double);                                                  \
  template Objective<S> cyclegan_objective<S>(const Batch<S>&, const CycleNets<S>&, const LossConfig&, Side);        \
  template Objective<S> cgan_objective<S>(const Batch<S>&, const CganNets<S>&, const LossConfig&, Side);             \
  template Objective<S> cut_objective<S>(const Batch<S>&, const CutNets<S>&, const LossConfig&, std::mt19937_64&,    \
                                         Side);                                                                      \
  template std::string format_loss_record<S>(long, Variant, const Objective<S>&, double);

CRANIO_INSTANTIATE_LOSSES(float)
CRANIO_INSTANTIATE_LOSSES(double)

}  // namespace cranio
