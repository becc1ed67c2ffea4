#include "doctest.h"

#include <cmath>
#include <random>

#include "toy.hpp"

using namespace cranio;
using toy::random_tensor;
using T = Tensor<double>;

namespace {

ImageMap<double> identity_map() {
  return [](const T& t) { return t; };
}

ImageMap<double> affine_map(double a, double b) {
  return [a, b](const T& t) { return add_scalar(scale(t, a), b); };
}

double l1_oracle(const Array<double>& a, const Array<double>& b) {
  double s = 0.0;
  for (Index i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double nce_oracle(double positive, const std::vector<double>& negatives, double tau) {
  double denom = std::exp(positive / tau);
  for (double n : negatives) denom += std::exp(n / tau);
  return -std::log(std::exp(positive / tau) / denom);
}

// Unit vectors whose dot products with the query are the requested values.
struct DotCase {
  T query, positive, negatives;
};

DotCase with_dots(double positive, const std::vector<double>& negatives) {
  const Index n = static_cast<Index>(negatives.size());
  const Index k = 2;
  auto unit = [](double c) { return std::vector<double>{c, std::sqrt(std::max(0.0, 1.0 - c * c))}; };
  Array<double> neg(n * k);
  for (Index i = 0; i < n; ++i) {
    auto u = unit(negatives[static_cast<std::size_t>(i)]);
    neg[i * k] = u[0];
    neg[i * k + 1] = u[1];
  }
  auto p = unit(positive);
  return {T::from({k}, {1.0, 0.0}), T::from({k}, {p[0], p[1]}), T({n, k}, neg)};
}

}  // namespace

TEST_CASE("gan_loss reference values") {
  const T zero = T::zeros({2, 1, 3, 3});
  CHECK(gan_loss(zero, zero, Side::Discriminator, GanForm::Log).item() == doctest::Approx(2 * std::log(2.0)));
  const T ones = T::full({2, 1, 3, 3}, 1.0);
  CHECK(gan_loss(T(), ones, Side::Generator, GanForm::LeastSquares).item() == 0.0);
  const T quarter = T::full({1, 1, 2, 2}, std::log(1.0 / 3.0));  // sigmoid = 0.25
  CHECK(gan_loss(T(), quarter, Side::Generator, GanForm::Log).item() == doctest::Approx(-std::log(0.25)).epsilon(1e-12));
  CHECK(gan_loss(ones, zero, Side::Discriminator, GanForm::LeastSquares).item() == 0.0);
  CHECK(gan_loss(zero, ones, Side::Discriminator, GanForm::LeastSquares).item() == doctest::Approx(2.0));
  CHECK_THROWS_AS(gan_loss(zero, T(), Side::Discriminator, GanForm::Log), Error);
  CHECK_THROWS_AS(gan_loss(T(), zero, Side::Discriminator, GanForm::Log), Error);
}

TEST_CASE("cycle loss") {
  const T x = random_tensor({1, 3, 4, 4}, 1), y = random_tensor({1, 3, 4, 4}, 2);
  CHECK(cycle_loss(x, y, identity_map(), identity_map()).item() == 0.0);

  // G_X shifts everything except the face batch back by 0.5, so only the
  // skull cycle is off by +0.5.
  ImageMap<double> g_y = [&](const T& t) { return t.node() == y.node() ? t : add_scalar(t, 0.5); };
  ImageMap<double> g_x = [&](const T& t) { return t.node() == y.node() ? add_scalar(t, -0.5) : t; };
  CHECK(cycle_loss(x, y, g_y, g_x).item() == doctest::Approx(0.5).epsilon(1e-12));

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> coef(-2.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const T a = random_tensor({1, 2, 3, 3}, 100 + trial), b = random_tensor({1, 2, 3, 3}, 300 + trial);
    const double ay = coef(rng), by = coef(rng), ax = coef(rng), bx = coef(rng);
    double expected_x = 0.0, expected_y = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
      expected_x += std::abs(ax * (ay * a.values()[i] + by) + bx - a.values()[i]);
      expected_y += std::abs(ay * (ax * b.values()[i] + bx) + by - b.values()[i]);
    }
    const double expected = (expected_x + expected_y) / static_cast<double>(a.size());
    CHECK(std::abs(cycle_loss(a, b, affine_map(ay, by), affine_map(ax, bx)).item() - expected) < 1e-12);
  }
  CHECK_THROWS_AS(cycle_loss(x, y, ImageMap<double>([](const T& t) { return slice(t, 1, 0, 1); }), identity_map()), Error);
  CHECK_THROWS_AS(cycle_loss(x, y, ImageMap<double>(), identity_map()), Error);
}

TEST_CASE("identity losses") {
  const T x = random_tensor({1, 3, 4, 4}, 4);
  const T y = T::full({1, 3, 4, 4}, 1.0);
  CHECK(identity_loss_cyclegan(x, y, identity_map(), identity_map()).item() == 0.0);
  CHECK(identity_loss_cyclegan(x, y, affine_map(-1.0, 0.0), identity_map()).item() == doctest::Approx(2.0));
  CHECK(cut_identity_loss(identity_map(), y).item() == 0.0);
  CHECK(cut_identity_loss(affine_map(1.0, -0.3), y).item() == doctest::Approx(0.3).epsilon(1e-12));

  for (int trial = 0; trial < 100; ++trial) {
    const T a = random_tensor({2, 3, 2, 2}, 500 + trial), b = random_tensor({2, 3, 2, 2}, 700 + trial);
    const double s = 0.5 + 0.01 * trial;
    const T ga = scale(b, s), ha = scale(a, -s);
    const double expected = l1_oracle(ga.values(), b.values()) + l1_oracle(ha.values(), a.values());
    CHECK(std::abs(identity_loss_cyclegan(a, b, affine_map(s, 0.0), affine_map(-s, 0.0)).item() - expected) < 1e-12);
    CHECK(std::abs(cut_identity_loss(affine_map(s, 0.1), b).item() -
                   l1_oracle(add_scalar(scale(b, s), 0.1).values(), b.values())) < 1e-12);
  }
}

TEST_CASE("patch_nce_single reference values") {
  auto uniform = with_dots(0.3, {0.3, 0.3});
  CHECK(patch_nce_single(uniform.query, uniform.positive, uniform.negatives, 0.07).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-12));

  auto saturated = with_dots(1.0, {-1.0, -1.0});
  CHECK(patch_nce_single(saturated.query, saturated.positive, saturated.negatives, 0.07).item() < 1e-10);

  auto one_negative = with_dots(1.0, {0.5});
  const double v = patch_nce_single(one_negative.query, one_negative.positive, one_negative.negatives, 0.07).item();
  CHECK(v == doctest::Approx(nce_oracle(1.0, {0.5}, 0.07)).epsilon(1e-9));
  CHECK(v == doctest::Approx(7.9e-4).epsilon(0.01));

  for (Index n : {1, 2, 15, 255}) {
    auto c = with_dots(0.2, std::vector<double>(static_cast<std::size_t>(n), 0.2));
    CHECK(std::abs(patch_nce_single(c.query, c.positive, c.negatives, 0.07).item() - std::log(n + 1.0)) < 1e-9);
  }

  CHECK_THROWS_AS(patch_nce_single(one_negative.query, one_negative.positive, T(), 0.07), Error);
  CHECK_THROWS_AS(patch_nce_single(one_negative.query, one_negative.positive, one_negative.negatives, 0.0), Error);
  CHECK_THROWS_AS(patch_nce_single(one_negative.query, T::zeros({3}), one_negative.negatives, 0.07), Error);
}

TEST_CASE("patch_nce_single is non-negative and decreasing in the positive similarity") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> dot(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> negs(5);
    for (auto& n : negs) n = dot(rng);
    double previous = std::numeric_limits<double>::infinity();
    for (double p = -1.0; p <= 1.0; p += 0.1) {
      auto c = with_dots(p, negs);
      const double v = patch_nce_single(c.query, c.positive, c.negatives, 0.07).item();
      CHECK(v >= 0.0);
      CHECK(v < previous);
      previous = v;
    }
  }
}

TEST_CASE("patch_nce_stacks sums single terms over locations") {
  // One layer, two locations, one image.
  const T s = T::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const double c = std::sqrt(0.5);
  const T f = T::from({2, 2}, {c, c, 0.6, 0.8});
  FeatureStack<double> keys{1, {{0, {3, 7}, s}}};
  FeatureStack<double> queries{1, {{0, {3, 7}, f}}};
  const double expected = patch_nce_single(slice(f, 0, 0, 1), slice(s, 0, 0, 1), slice(s, 0, 1, 1), 0.07).item() +
                          patch_nce_single(slice(f, 0, 1, 1), slice(s, 0, 1, 1), slice(s, 0, 0, 1), 0.07).item();
  CHECK(patch_nce_stacks(queries, keys, 0.07).item() == doctest::Approx(expected).epsilon(1e-12));

  // Duplicating every image leaves the batch mean unchanged.
  const std::vector<T> fs{f, f}, ss{s, s};
  FeatureStack<double> keys2{2, {{0, {3, 7}, concat<double>(ss, 0)}}};
  FeatureStack<double> queries2{2, {{0, {3, 7}, concat<double>(fs, 0)}}};
  CHECK(patch_nce_stacks(queries2, keys2, 0.07).item() == doctest::Approx(expected).epsilon(1e-12));

  FeatureStack<double> lonely{1, {{0, {3}, slice(s, 0, 0, 1)}}};
  CHECK_THROWS_AS(patch_nce_stacks(lonely, lonely, 0.07), Error);
  FeatureStack<double> moved{1, {{0, {3, 8}, f}}};
  CHECK_THROWS_AS(patch_nce_stacks(moved, keys, 0.07), Error);
}

TEST_CASE("patch loss on an identity translation stays below the uniform value") {
  GeneratorOptions o;
  o.image_size = 16;
  o.base_channels = 4;
  o.n_res_blocks = 1;
  o.identity_init = true;
  o.seed = 2;
  Generator<double> g(o);
  ProjectionHeads<double> heads(g.tap_channels(), 16, 3);
  const T x = random_tensor({2, 3, 16, 16}, 5, -0.5, 0.5);
  std::mt19937_64 rng(4);
  const Index n = 8;
  const double loss = patch_loss_total(g, heads, x, n, rng, 0.07).item();
  CHECK(loss > 0.0);
  CHECK(loss < static_cast<double>(heads.count() * n) * std::log(static_cast<double>(n)));
  std::mt19937_64 again(4);
  CHECK(patch_loss_total(g, heads, x, n, again, 0.07).item() == loss);
  std::mt19937_64 r(4);
  CHECK_THROWS_AS(patch_loss_total(g, heads, x, 1, r, 0.07), Error);
}

TEST_CASE("loss configuration") {
  auto cut = LossConfig::for_variant(Variant::CUT);
  CHECK(cut.lambda_x == 1.0);
  CHECK(cut.lambda_y == 1.0);
  auto fast = LossConfig::for_variant(Variant::FastCUT);
  CHECK(fast.lambda_x == 10.0);
  CHECK(fast.lambda_y == 0.0);
  CHECK(fast.tau == 0.07);
  fast.lambda_y = 1.0;
  CHECK_THROWS_AS(fast.validate(), Error);
  cut.lambda_x = 2.0;
  CHECK_NOTHROW(cut.validate());
  CHECK(parse_variant("fastcut") == Variant::FastCUT);
  CHECK_THROWS_AS(parse_variant("stargan"), Error);

  // Term arithmetic of the CUT-family weights.
  auto contribution = [](const LossConfig& c, double gan, double patch, double idt) {
    return LossTerm{"gan", 1.0, gan}.contribution() + LossTerm{"patch", c.lambda_x, patch}.contribution() +
           LossTerm{"identity", c.lambda_y, idt}.contribution();
  };
  CHECK(contribution(LossConfig::for_variant(Variant::CUT), 0.5, 0.5, 0.5) == doctest::Approx(1.5));
  CHECK(contribution(LossConfig::for_variant(Variant::FastCUT), 0.2, 0.1, 123.0) == doctest::Approx(1.2));
}

TEST_CASE("cyclegan objective") {
  const T x = random_tensor({1, 3, 16, 16}, 1), y = random_tensor({1, 3, 16, 16}, 2);
  ImageMap<double> d_one = [](const T& t) { return T::full({t.dim(0), 1, 2, 2}, 1.0); };
  auto cfg = LossConfig::for_variant(Variant::CycleGAN);
  CycleNets<double> ideal{identity_map(), identity_map(), d_one, d_one};
  CHECK(cyclegan_objective(Batch<double>{x, y}, ideal, cfg).total.item() == 0.0);

  // Cycle term 0.3 and nothing else.
  ImageMap<double> g_y = [&](const T& t) { return t.node() == x.node() ? add_scalar(t, 0.3) : t; };
  CycleNets<double> shifted{g_y, identity_map(), d_one, d_one};
  cfg.lambda_identity = 0.0;
  auto obj = cyclegan_objective(Batch<double>{x, y}, shifted, cfg);
  CHECK(obj.term("cycle") == doctest::Approx(0.3));
  CHECK(obj.total.item() == doctest::Approx(3.0));

  toy::Suite s(3);
  CycleNets<double> nets{toy::as_map(s.g_y), toy::as_map(s.g_x), toy::as_map(s.d_y), toy::as_map(s.d_x)};
  auto full = LossConfig::for_variant(Variant::CycleGAN);
  auto real = cyclegan_objective(Batch<double>{s.x, s.y}, nets, full);
  const double expected =
      gan_loss(T(), s.d_y(s.g_y(s.x)), Side::Generator, full.gan_form).item() +
      gan_loss(T(), s.d_x(s.g_x(s.y)), Side::Generator, full.gan_form).item() +
      10.0 * cycle_loss(s.x, s.y, nets.g_y, nets.g_x).item() +
      5.0 * identity_loss_cyclegan(s.x, s.y, nets.g_y, nets.g_x).item();
  CHECK(std::abs(real.total.item() - expected) < 1e-9);
  double sum = 0.0;
  for (const auto& t : real.terms) sum += t.contribution();
  CHECK(std::abs(sum - real.total.item()) < 1e-9);

  auto d = cyclegan_objective(Batch<double>{s.x, s.y}, nets, full, Side::Discriminator);
  CHECK(d.terms.size() == 2);
  CycleNets<double> missing{nets.g_y, ImageMap<double>(), nets.d_y, nets.d_x};
  CHECK_THROWS_AS(cyclegan_objective(Batch<double>{s.x, s.y}, missing, full), Error);
  CHECK_THROWS_AS(cyclegan_objective(Batch<double>{s.x, s.y}, nets, LossConfig::for_variant(Variant::CUT)), Error);
}

TEST_CASE("cgan objective") {
  const T x = random_tensor({1, 3, 16, 16}, 1), y = random_tensor({1, 3, 16, 16}, 2);
  ImageMap<double> d_half = [](const T& t) {
    CHECK(t.dim(1) == 6);
    return T::zeros({t.dim(0), 1, 2, 2});
  };
  auto cfg = LossConfig::for_variant(Variant::CGAN);
  cfg.gan_form = GanForm::Log;
  ImageMap<double> exact = [&](const T&) { return y; };
  CganNets<double> nets{exact, d_half};
  auto d = cgan_objective(Batch<double>{x, y, true}, nets, cfg, Side::Discriminator);
  CHECK(d.total.item() == doctest::Approx(2 * std::log(2.0)));
  auto g = cgan_objective(Batch<double>{x, y, true}, nets, cfg);
  CHECK(g.term("l1") == 0.0);
  CHECK_THROWS_AS(cgan_objective(Batch<double>{x, y, false}, nets, cfg), Error);

  toy::Suite s(4);
  CganNets<double> real{toy::as_map(s.g_cgan), toy::as_map(s.d_cgan)};
  s.g_cgan.reseed_noise(9);
  auto obj = cgan_objective(Batch<double>{s.x, s.y, true}, real, cfg);
  s.g_cgan.reseed_noise(9);
  const T fake = s.g_cgan(s.x);
  const double expected =
      gan_loss(T(), s.d_cgan(concat<double>(std::vector<T>{s.x, fake}, 1)), Side::Generator, GanForm::Log).item() +
      100.0 * l1_oracle(fake.values(), s.y.values());
  CHECK(std::abs(obj.total.item() - expected) < 1e-9);
}

TEST_CASE("cut objectives and the identity weight") {
  toy::Suite s(5);
  auto run = [&](Variant v, double perturbation) {
    auto cfg = LossConfig::for_variant(v);
    cfg.n_locations = 6;
    CutNets<double> nets{&s.g_y, toy::as_map(s.d_y), &s.heads, {}};
    nets.translate = [&](const T& t) {
      T out = s.g_y(t);
      return t.node() == s.y.node() ? add_scalar(out, perturbation) : out;
    };
    std::mt19937_64 rng(17);
    return cut_objective(Batch<double>{s.x, s.y}, nets, cfg, rng);
  };
  const auto fast = run(Variant::FastCUT, 0.0);
  for (double p : {0.1, -0.7, 3.0}) CHECK(run(Variant::FastCUT, p).total.item() == fast.total.item());
  CHECK(fast.term("identity") == 0.0);

  const auto cut = run(Variant::CUT, 0.0);
  for (double p : {0.1, -0.7, 3.0}) {
    const auto shifted = run(Variant::CUT, p);
    const double idt_change = shifted.term("identity") - cut.term("identity");
    CHECK(std::abs((shifted.total.item() - cut.total.item()) - idt_change) < 1e-12);
    CHECK(std::abs(idt_change) > 0);
  }

  double sum = 0.0;
  for (const auto& t : cut.terms) sum += t.contribution();
  CHECK(std::abs(sum - cut.total.item()) < 1e-9);

  std::mt19937_64 rng(1);
  CutNets<double> nets{&s.g_y, toy::as_map(s.d_y), &s.heads, {}};
  CHECK_THROWS_AS(cut_objective(Batch<double>{s.x, s.y}, nets, LossConfig::for_variant(Variant::CycleGAN), rng), Error);
  const std::string line = format_loss_record(3, Variant::CUT, cut, 0.25);
  CHECK(line.rfind("step=3 variant=cut d_loss=0.25 gan=", 0) == 0);
  CHECK(line.find(" patch=") != std::string::npos);
  CHECK(line.find(" identity=") != std::string::npos);
  CHECK(line.find(" total=") != std::string::npos);
}

TEST_CASE("objective gradients match finite differences on the toy network") {
  for (std::uint64_t seed : {1u, 2u}) {
    toy::Suite s(seed);
    for (const auto& c : s.cases()) {
      INFO(c.name);
      CHECK(toy::check(c, seed) < 1e-3);
    }
  }
}
