#include "cranio/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cranio {

namespace {

enum SeedTag : std::uint64_t { kGenY = 10, kGenX, kDisY, kDisX, kHeads, kShuffle, kStep, kNoise, kEmbedNet, kEmbedAug };

[[noreturn]] void bad_config(const std::string& message) { throw Error(ErrorKind::InvalidArgument, "train_config", message); }

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename S>
void prefixed(ParameterList<S>& out, const ParameterList<S>& in, const std::string& prefix) {
  for (const auto& [name, t] : in) out.emplace_back(prefix + name, t);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) bad_config("epochs must be >= 1");
  if (batch_size < 1) bad_config("batch_size must be >= 1");
  if (!(learning_rate > 0)) bad_config("learning_rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) bad_config("adam betas must lie in [0, 1)");
  if (log_every < 1) bad_config("log_every must be >= 1");
  if (checkpoint_every < 0) bad_config("checkpoint_every must be >= 0");
  if (head_width < 1) bad_config("head_width must be >= 1");
  loss().validate();
}

LossConfig TrainConfig::loss() const {
  LossConfig l = LossConfig::for_variant(variant);
  l.gan_form = gan_form;
  l.tau = tau;
  l.n_locations = n_locations;
  l.detach_source_features = detach_source_features;
  if (lambda_cycle) l.lambda_cycle = *lambda_cycle;
  if (lambda_identity) l.lambda_identity = *lambda_identity;
  if (lambda_x) l.lambda_x = *lambda_x;
  if (lambda_y) l.lambda_y = *lambda_y;
  if (lambda_l1) l.lambda_l1 = *lambda_l1;
  return l;
}

GeneratorOptions TrainConfig::generator_options() const {
  GeneratorOptions o;
  o.image_size = image_size;
  o.base_channels = generator_channels;
  o.n_res_blocks = res_blocks;
  o.tap_points = tap_points;
  o.identity_init = identity_init;
  o.dropout = variant == Variant::CGAN ? 0.5 : 0.0;
  o.seed = derive_seed(seed, kGenY);
  return o;
}

DiscriminatorOptions TrainConfig::discriminator_options() const {
  DiscriminatorOptions o;
  o.image_size = image_size;
  o.in_channels = variant == Variant::CGAN ? 6 : 3;
  o.base_channels = discriminator_channels;
  o.n_layers = discriminator_layers;
  o.seed = derive_seed(seed, kDisY);
  return o;
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) bad_config("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto fail = [&](const std::string& why) {
      bad_config("line " + std::to_string(line_no) + ": " + key + ": " + why);
    };
    auto as_index = [&]() -> Index {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(value, &used);
      } catch (const std::exception&) {
        fail("expected an integer, got '" + value + "'");
      }
      if (used != value.size()) fail("expected an integer, got '" + value + "'");
      return static_cast<Index>(v);
    };
    auto as_double = [&]() -> double {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        fail("expected a number, got '" + value + "'");
      }
      if (used != value.size()) fail("expected a number, got '" + value + "'");
      return v;
    };
    auto as_bool = [&]() {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      fail("expected true or false, got '" + value + "'");
      return false;
    };
    if (key == "variant") c.variant = parse_variant(value);
    else if (key == "epochs") c.epochs = as_index();
    else if (key == "batch_size") c.batch_size = as_index();
    else if (key == "learning_rate") c.learning_rate = as_double();
    else if (key == "adam_betas") {
      const auto comma = value.find(',');
      if (comma == std::string::npos) fail("expected two comma-separated numbers");
      try {
        c.beta1 = std::stod(value.substr(0, comma));
        c.beta2 = std::stod(value.substr(comma + 1));
      } catch (const std::exception&) {
        fail("expected two comma-separated numbers");
      }
    } else if (key == "seed") c.seed = static_cast<std::uint64_t>(as_index());
    else if (key == "image_size") c.image_size = as_index();
    else if (key == "n_locations") c.n_locations = as_index();
    else if (key == "log_every") c.log_every = as_index();
    else if (key == "checkpoint_every") c.checkpoint_every = as_index();
    else if (key == "generator_channels") c.generator_channels = as_index();
    else if (key == "res_blocks") c.res_blocks = as_index();
    else if (key == "tap_points") {
      c.tap_points.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        try {
          c.tap_points.push_back(std::stol(trim(item)));
        } catch (const std::exception&) {
          fail("expected comma-separated integers");
        }
      }
    } else if (key == "discriminator_channels") c.discriminator_channels = as_index();
    else if (key == "discriminator_layers") c.discriminator_layers = as_index();
    else if (key == "head_width") c.head_width = as_index();
    else if (key == "identity_init") c.identity_init = as_bool();
    else if (key == "gan_form") c.gan_form = parse_gan_form(value);
    else if (key == "tau") c.tau = as_double();
    else if (key == "detach_source_features") c.detach_source_features = as_bool();
    else if (key == "lambda_cycle") c.lambda_cycle = as_double();
    else if (key == "lambda_identity") c.lambda_identity = as_double();
    else if (key == "lambda_x") c.lambda_x = as_double();
    else if (key == "lambda_y") c.lambda_y = as_double();
    else if (key == "lambda_l1") c.lambda_l1 = as_double();
    else fail("unknown key");
  }
  return c;
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "variant = " << to_string(variant) << "\nepochs = " << epochs << "\nbatch_size = " << batch_size
     << "\nlearning_rate = " << format_double(learning_rate) << "\nadam_betas = " << format_double(beta1) << ", "
     << format_double(beta2) << "\nseed = " << seed << "\nimage_size = " << image_size
     << "\nn_locations = " << n_locations << "\nlog_every = " << log_every
     << "\ncheckpoint_every = " << checkpoint_every << "\ngenerator_channels = " << generator_channels
     << "\nres_blocks = " << res_blocks << "\n";
  if (!tap_points.empty()) {
    os << "tap_points = ";
    for (std::size_t i = 0; i < tap_points.size(); ++i) os << (i ? ", " : "") << tap_points[i];
    os << "\n";
  }
  os << "discriminator_channels = " << discriminator_channels << "\ndiscriminator_layers = " << discriminator_layers
     << "\nhead_width = " << head_width << "\nidentity_init = " << (identity_init ? "true" : "false")
     << "\ngan_form = " << to_string(gan_form) << "\ntau = " << format_double(tau)
     << "\ndetach_source_features = " << (detach_source_features ? "true" : "false") << "\n";
  for (auto [name, v] : {std::pair{"lambda_cycle", &lambda_cycle}, {"lambda_identity", &lambda_identity},
                         {"lambda_x", &lambda_x}, {"lambda_y", &lambda_y}, {"lambda_l1", &lambda_l1}})
    if (*v) os << name << " = " << format_double(**v) << "\n";
  return os.str();
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::NotFound, "train_config", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return TrainConfig::parse(ss.str());
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  const LossConfig l = c.loss();
  j = {{"text", c.to_text()},
       {"variant", to_string(c.variant)},
       {"seed", c.seed},
       {"loss",
        {{"lambda_cycle", l.lambda_cycle},
         {"lambda_identity", l.lambda_identity},
         {"lambda_x", l.lambda_x},
         {"lambda_y", l.lambda_y},
         {"lambda_l1", l.lambda_l1},
         {"tau", l.tau},
         {"gan_form", to_string(l.gan_form)},
         {"n_locations", l.n_locations}}}};
}

template <typename S>
Adam<S>::Adam(ParameterList<S> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, t] : params_) {
    m_.push_back(Array<S>::Zero(t.size()));
    v_.push_back(Array<S>::Zero(t.size()));
  }
}

template <typename S>
void Adam<S>::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

template <typename S>
Index Adam<S>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const S step_size = static_cast<S>(lr_ / c1);
  const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
  const S root_c2 = static_cast<S>(std::sqrt(c2)), eps = static_cast<S>(eps_);
  Index changed = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<S>& p = params_[i].second;
    if (!p.has_grad()) continue;
    const Array<S>& g = p.grad();
    m_[i] = b1 * m_[i] + (S(1) - b1) * g;
    v_[i] = b2 * v_[i] + (S(1) - b2) * g.square();
    Array<S> next = p.values() - step_size * m_[i] / (v_[i].sqrt() / root_c2 + eps);
    changed += (next != p.values()).count();
    p.assign(std::move(next));
  }
  return changed;
}

template <typename S>
Models<S>::Models(const TrainConfig& c) : config(c) {
  c.validate();
  g_y = std::make_unique<Generator<S>>(c.generator_options());
  d_y = std::make_unique<Discriminator<S>>(c.discriminator_options());
  if (c.variant == Variant::CycleGAN) {
    GeneratorOptions gx = c.generator_options();
    gx.seed = derive_seed(c.seed, kGenX);
    g_x = std::make_unique<Generator<S>>(gx);
    DiscriminatorOptions dx = c.discriminator_options();
    dx.seed = derive_seed(c.seed, kDisX);
    d_x = std::make_unique<Discriminator<S>>(dx);
  }
  if (c.variant == Variant::CUT || c.variant == Variant::FastCUT)
    heads = std::make_unique<ProjectionHeads<S>>(g_y->tap_channels(), c.head_width, derive_seed(c.seed, kHeads));
}

template <typename S>
ParameterList<S> Models<S>::generator_parameters() const {
  ParameterList<S> out;
  prefixed(out, g_y->parameters(), "g_y.");
  if (g_x) prefixed(out, g_x->parameters(), "g_x.");
  if (heads) prefixed(out, heads->parameters(), "heads.");
  return out;
}

template <typename S>
ParameterList<S> Models<S>::discriminator_parameters() const {
  ParameterList<S> out;
  prefixed(out, d_y->parameters(), "d_y.");
  if (d_x) prefixed(out, d_x->parameters(), "d_x.");
  return out;
}

template <typename S>
ParameterList<S> Models<S>::parameters() const {
  ParameterList<S> out = generator_parameters();
  prefixed(out, discriminator_parameters(), "");
  return out;
}

template <typename S>
Trainer<S>::Trainer(const TrainConfig& config, std::vector<ImagePair> pairs)
    : config_(config),
      loss_(config.loss()),
      pairs_(std::move(pairs)),
      models_(config),
      opt_g_(models_.generator_parameters(), config.learning_rate, config.beta1, config.beta2),
      opt_d_(models_.discriminator_parameters(), config.learning_rate, config.beta1, config.beta2) {
  if (pairs_.empty()) throw Error(ErrorKind::InvalidArgument, "train", "no training pairs");
  for (const auto& p : pairs_)
    if (p.skull.height != config.image_size || p.skull.width != config.image_size || !p.skull.same_size(p.face))
      throw Error(ErrorKind::Shape, "train",
                  "pair " + pair_stem(p) + " is not " + std::to_string(config.image_size) + "x" +
                      std::to_string(config.image_size));
}

template <typename S>
long Trainer<S>::steps_per_epoch() const {
  const auto n = static_cast<long>(pairs_.size());
  return (n + config_.batch_size - 1) / config_.batch_size;
}

template <typename S>
Batch<S> Trainer<S>::batch_for(long step) const {
  const long per_epoch = steps_per_epoch();
  const long epoch = step / per_epoch, within = step % per_epoch;
  std::vector<std::size_t> order(pairs_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(config_.seed, kShuffle, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t begin = static_cast<std::size_t>(within * config_.batch_size);
  const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config_.batch_size));
  std::vector<Image> xs, ys;
  for (std::size_t i = begin; i < end; ++i) {
    xs.push_back(pairs_[order[i]].skull);
    ys.push_back(pairs_[order[i]].face);
  }
  // Every variant sees aligned pairs; only the cGAN objective uses that.
  return Batch<S>{to_batch<S>(xs), to_batch<S>(ys), true};
}

template <typename S>
StepRecord Trainer<S>::compute(const Batch<S>& batch, long step, bool update) {
  const Models<S>& m = models_;
  std::mt19937_64 rng(derive_seed(config_.seed, kStep, static_cast<std::uint64_t>(step)));
  m.g_y->reseed_noise(derive_seed(config_.seed, kNoise, static_cast<std::uint64_t>(step)));
  auto net = [](const auto& n) { return ImageMap<S>([&n](const Tensor<S>& t) { return n(t); }); };
  auto constant = [](const Tensor<S>& value) { return ImageMap<S>([value](const Tensor<S>&) { return value; }); };

  // Generator side, then the discriminator side scored on the fakes that
  // the generator side produced (before its update).
  Objective<S> g_obj, d_obj;
  auto d_side = [&]() {
    switch (config_.variant) {
      case Variant::CycleGAN:
        return cyclegan_objective(batch, CycleNets<S>{constant(g_obj.fakes[0]), constant(g_obj.fakes[1]), net(*m.d_y), net(*m.d_x)},
                                  loss_, Side::Discriminator);
      case Variant::CGAN:
        return cgan_objective(batch, CganNets<S>{constant(g_obj.fakes[0]), net(*m.d_y)}, loss_, Side::Discriminator);
      default:
        return cut_objective(batch, CutNets<S>{m.g_y.get(), net(*m.d_y), m.heads.get(), constant(g_obj.fakes[0])},
                             loss_, rng, Side::Discriminator);
    }
  };
  try {
    switch (config_.variant) {
      case Variant::CycleGAN:
        g_obj = cyclegan_objective(batch, CycleNets<S>{net(*m.g_y), net(*m.g_x), net(*m.d_y), net(*m.d_x)}, loss_);
        break;
      case Variant::CGAN:
        g_obj = cgan_objective(batch, CganNets<S>{net(*m.g_y), net(*m.d_y)}, loss_);
        break;
      default:
        g_obj = cut_objective(batch, CutNets<S>{m.g_y.get(), net(*m.d_y), m.heads.get(), {}}, loss_, rng);
    }
    if (update) {
      opt_g_.zero_grad();
      opt_d_.zero_grad();
      g_obj.total.backward();
      opt_g_.step();
    }
    d_obj = d_side();
    if (update) {
      opt_d_.zero_grad();
      d_obj.total.backward();
      opt_d_.step();
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::NonFinite)
      throw Error(ErrorKind::Diverged, "train", "step " + std::to_string(step) + ": " + e.what());
    throw;
  }

  StepRecord r;
  r.step = step;
  r.epoch = static_cast<Index>(step / steps_per_epoch());
  r.generator_total = static_cast<double>(g_obj.total.item());
  r.discriminator_total = static_cast<double>(d_obj.total.item());
  if (!std::isfinite(r.generator_total) || !std::isfinite(r.discriminator_total))
    throw Error(ErrorKind::Diverged, "train", "step " + std::to_string(step) + ": non-finite loss");
  r.terms = g_obj.terms;
  r.line = format_loss_record(step, config_.variant, g_obj, r.discriminator_total);
  return r;
}

template <typename S>
StepRecord Trainer<S>::evaluate(const Batch<S>& batch, long step) {
  return compute(batch, step, false);
}

template <typename S>
StepRecord Trainer<S>::step(const Batch<S>& batch, long step) {
  StepRecord r = compute(batch, step, true);
  completed_ = std::max(completed_, step + 1);
  return r;
}

template <typename S>
Checkpoint Trainer<S>::checkpoint() const {
  Checkpoint ck;
  nlohmann::json config;
  to_json(config, config_);
  nlohmann::json gen;
  to_json(gen, models_.g_y->options());
  ck.header = {{"kind", "translation"},
               {"config", config},
               {"generator", gen},
               {"steps", completed_},
               {"noise_seed", derive_seed(config_.seed, kNoise, ~std::uint64_t{0})}};
  store_parameters(ck, models_.parameters(), "");
  return ck;
}

template <typename S>
void Trainer<S>::run(const std::filesystem::path& out_dir, std::ostream* log) {
  std::filesystem::create_directories(out_dir);
  const auto ck_path = out_dir / "checkpoint.bin";
  const long per_epoch = steps_per_epoch();
  for (long s = completed_; s < total_steps(); ++s) {
    const StepRecord r = step(batch_for(s), s);
    if (log && s % config_.log_every == 0) *log << r.line << '\n';
    const bool epoch_end = (s + 1) % per_epoch == 0;
    const long epoch = (s + 1) / per_epoch;
    if (epoch_end && config_.checkpoint_every > 0 && epoch % config_.checkpoint_every == 0)
      write_checkpoint(ck_path, checkpoint());
  }
  if (log) log->flush();
  write_checkpoint(ck_path, checkpoint());
}

template <typename S>
Translator<S> load_translator(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.header.value("kind", "") != "translation")
    throw Error(ErrorKind::Format, "load_translator", path.string() + " is not a translation checkpoint");
  Translator<S> t;
  try {
    t.config = TrainConfig::parse(ck.header.at("config").at("text").get<std::string>());
    t.generator = std::make_unique<Generator<S>>(ck.header.at("generator").get<GeneratorOptions>());
    t.noise_seed = ck.header.at("noise_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, "load_translator", path.string() + ": bad header: " + e.what());
  }
  restore_parameters(ck, t.generator->parameters(), "g_y.");
  return t;
}

template <typename S>
std::vector<Image> generate(const Translator<S>& translator, std::span<const Image> skulls, Index batch_size) {
  if (!translator.generator) throw Error(ErrorKind::State, "generate", "translator has no generator");
  if (batch_size < 1) throw Error(ErrorKind::InvalidArgument, "generate", "batch_size must be >= 1");
  NoGradGuard guard;
  translator.generator->reseed_noise(translator.noise_seed);
  std::vector<Image> out;
  for (std::size_t i = 0; i < skulls.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto chunk = skulls.subspan(i, std::min(skulls.size() - i, static_cast<std::size_t>(batch_size)));
    for (Image& img : from_batch<S>(translator.generator->forward(to_batch<S>(chunk)))) {
      img.data = img.data.cwiseMax(-1.0f).cwiseMin(1.0f);
      out.push_back(std::move(img));
    }
  }
  return out;
}

template <typename S>
Embedder<S> train_embedder(const EmbedderTrainConfig& config, const std::vector<Image>& images,
                           const std::vector<Index>& labels, std::ostream* log) {
  if (images.empty() || images.size() != labels.size())
    throw Error(ErrorKind::InvalidArgument, "train_embedder", "need one label per image and at least one image");
  if (config.epochs < 1 || config.batch_size < 1 || !(config.learning_rate > 0))
    throw Error(ErrorKind::InvalidArgument, "train_embedder", "epochs, batch_size and learning_rate must be positive");
  const Index classes = *std::max_element(labels.begin(), labels.end()) + 1;
  if (*std::min_element(labels.begin(), labels.end()) < 0)
    throw Error(ErrorKind::InvalidArgument, "train_embedder", "labels must be >= 0");
  EmbedderOptions o = config.net;
  o.n_classes = std::max<Index>(classes, 2);
  o.image_size = images.front().height;
  o.seed = derive_seed(config.seed, kEmbedNet);
  Embedder<S> net(o);
  Adam<S> opt(net.parameters(), config.learning_rate, 0.9, 0.999);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(config.seed, kEmbedAug, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    Index correct = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
      std::vector<Image> batch;
      std::vector<Index> targets;
      for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(config.batch_size)); ++i) {
        Image img = images[order[i]];
        if (config.augment) {
          auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
          img = warp_affine(img, u(-8, 8), u(0.92, 1.08), u(-0.06, 0.06), u(-0.06, 0.06));
          img = colour_jitter(img, u(-0.2, 0.2), u(-0.2, 0.2));
          std::normal_distribution<float> noise(0.0f, 0.04f);
          for (Index k = 0; k < img.data.size(); ++k) img.data[k] = std::clamp(img.data[k] + noise(rng), -1.0f, 1.0f);
        }
        batch.push_back(std::move(img));
        targets.push_back(labels[order[i]]);
      }
      const Tensor<S> logits = net.logits(to_batch<S>(batch));
      const Tensor<S> loss = mean(softmax_cross_entropy(logits, std::span<const Index>(targets)));
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += static_cast<double>(loss.item()) * static_cast<double>(targets.size());
      for (std::size_t r = 0; r < targets.size(); ++r) {
        const auto row = logits.values().segment(static_cast<Index>(r) * o.n_classes, o.n_classes);
        Index arg = 0;
        row.maxCoeff(&arg);
        correct += arg == targets[r];
      }
    }
    if (log)
      *log << "epoch=" << epoch << " loss=" << total / static_cast<double>(images.size())
           << " accuracy=" << static_cast<double>(correct) / static_cast<double>(images.size()) << '\n';
  }
  net.set_trained(true);
  return net;
}

template <typename S>
Checkpoint embedder_checkpoint(const Embedder<S>& embedder) {
  Checkpoint ck;
  nlohmann::json options;
  to_json(options, embedder.options());
  ck.header = {{"kind", "embedder"}, {"embedder", options}, {"trained", embedder.trained()}};
  store_parameters(ck, embedder.parameters(), "");
  return ck;
}

template <typename S>
Embedder<S> load_embedder(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.header.value("kind", "") != "embedder")
    throw Error(ErrorKind::Format, "load_embedder", path.string() + " is not an embedder checkpoint");
  EmbedderOptions o;
  try {
    o = ck.header.at("embedder").get<EmbedderOptions>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, "load_embedder", path.string() + ": bad header: " + e.what());
  }
  Embedder<S> net(o);
  restore_parameters(ck, net.parameters(), "");
  net.set_trained(ck.header.value("trained", false));
  return net;
}

#define CRANIO_INSTANTIATE_TRAIN(S)                                                                  \
  template class Adam<S>;                                                                            \
  template struct Models<S>;                                                                         \
  template class Trainer<S>;                                                                         \
  template Translator<S> load_translator<S>(const std::filesystem::path&);                          \
  template std::vector<Image> generate<S>(const Translator<S>&, std::span<const Image>, Index);               \
  template Embedder<S> train_embedder<S>(const EmbedderTrainConfig&, const std::vector<Image>&,                   \
                                         const std::vector<Index>&, std::ostream*);                               \
  template Checkpoint embedder_checkpoint<S>(const Embedder<S>&);                                                  \
  template Embedder<S> load_embedder<S>(const std::filesystem::path&);

CRANIO_INSTANTIATE_TRAIN(float)
CRANIO_INSTANTIATE_TRAIN(double)

}  // namespace cranio
