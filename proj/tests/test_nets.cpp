#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "cranio/checkpoint.hpp"
#include "cranio/nets.hpp"

using namespace cranio;

namespace {

template <typename S>
Tensor<S> random_image(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0, bool rg = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Array<S> v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(dist(rng));
  return Tensor<S>(std::move(shape), std::move(v), rg);
}

template <typename S>
Tensor<S> weighted_sum(const Tensor<S>& y, std::uint64_t seed) {
  return sum(mul(y, random_image<S>(y.shape(), seed)));
}

template <typename S>
void require_all_gradients(const ParameterList<S>& params) {
  for (const auto& [name, p] : params) {
    INFO(name);
    REQUIRE(p.has_grad());
    CHECK(p.grad().abs().maxCoeff() > 0);
  }
}

}  // namespace

TEST_CASE("generator keeps spatial size and tanh range") {
  auto g = build_generator<float>(64, 32, 4, {0, 2, 4}, 1);
  CHECK(g.tap_points() == std::vector<Index>{0, 2, 4});
  auto out = g(Tensor<float>::zeros({1, 3, 64, 64}));
  CHECK(out.shape() == Shape{1, 3, 64, 64});
  CHECK(out.values().maxCoeff() <= 1.0f);
  CHECK(out.values().minCoeff() >= -1.0f);

  auto small = build_generator<double>(16, 4, 1, {}, 3);
  auto wild = small(random_image<double>({2, 3, 16, 16}, 5, -100.0, 100.0));
  CHECK(wild.values().abs().maxCoeff() <= 1.0);
}

TEST_CASE("generator is deterministic") {
  auto a = build_generator<float>(32, 8, 2, {}, 11);
  auto b = build_generator<float>(32, 8, 2, {}, 11);
  auto x = random_image<float>({1, 3, 32, 32}, 2);
  auto ya = a(x);
  CHECK((ya.values() == a(x).values()).all());
  CHECK((ya.values() == b(x).values()).all());
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK((pa[i].second.values() == pb[i].second.values()).all());
}

TEST_CASE("generator option validation") {
  CHECK_THROWS_AS(build_generator<float>(48, 8, 2, {}), Error);
  CHECK_THROWS_AS(build_generator<float>(8, 8, 2, {}), Error);
  CHECK_THROWS_AS(build_generator<float>(32, 8, 0, {}), Error);
  try {
    build_generator<float>(32, 8, 4, {0, 8});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Range);
  }
  CHECK_THROWS_AS(build_generator<float>(32, 8, 4, {2, 2}), Error);
  auto g = build_generator<float>(32, 8, 2, {});
  CHECK_THROWS_AS(g(Tensor<float>::zeros({1, 3, 16, 16})), Error);
  CHECK_THROWS_AS(g(Tensor<float>::zeros({1, 1, 32, 32})), Error);
}

TEST_CASE("identity-initialised generator starts as the identity") {
  GeneratorOptions o;
  o.image_size = 16;
  o.base_channels = 4;
  o.n_res_blocks = 1;
  o.identity_init = true;
  Generator<double> g(o);
  auto x = random_image<double>({2, 3, 16, 16}, 4, -0.9, 0.9);
  CHECK((g(x).values() - x.values()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("patch features: exhaustive sampling, determinism, shared locations") {
  auto g = build_generator<double>(32, 4, 1, {3}, 7);
  auto x = random_image<double>({2, 3, 32, 32}, 8);
  std::mt19937_64 rng(1);
  auto stack = encode_patch_features(g, x, 64, rng);
  REQUIRE(stack.layers.size() == 1);
  const auto& locs = stack.layers[0].locations;
  CHECK(std::set<Index>(locs.begin(), locs.end()).size() == 64);
  CHECK(stack.layers[0].features.shape() == Shape{2 * 64, 16});

  std::mt19937_64 r1(5), r2(5);
  auto a = encode_patch_features(g, x, 10, r1);
  auto b = encode_patch_features(g, x, 10, r2);
  CHECK(a.locations() == b.locations());

  std::mt19937_64 r3(1);
  CHECK_THROWS_AS(encode_patch_features(g, x, 65, r3), Error);
  CHECK_THROWS_AS(encode_patch_features(g, x, std::vector<std::vector<Index>>{{64}}), Error);
  CHECK_THROWS_AS(encode_patch_features(g, x, std::vector<std::vector<Index>>{}), Error);

  // Row n * L + i holds image n at locations[i].
  auto taps = g.encode(x);
  const Index hw = 64;
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 10; ++i)
      for (Index c = 0; c < 16; ++c)
        CHECK(a.layers[0].features.values()[(n * 10 + i) * 16 + c] ==
              taps[0].values()[(n * 16 + c) * hw + a.layers[0].locations[static_cast<std::size_t>(i)]]);
}

TEST_CASE("identity translation yields equal source and translated stacks") {
  GeneratorOptions o;
  o.image_size = 16;
  o.base_channels = 4;
  o.n_res_blocks = 2;
  o.identity_init = true;
  Generator<double> g(o);
  auto x = random_image<double>({2, 3, 16, 16}, 9, -0.5, 0.5);
  std::mt19937_64 rng(3);
  auto s = encode_patch_features(g, x, 8, rng);
  auto f = encode_patch_features(g, x, s.locations());
  for (std::size_t l = 0; l < s.layers.size(); ++l)
    CHECK((s.layers[l].features.values() == f.layers[l].features.values()).all());
  auto translated = encode_patch_features(g, g(x), s.locations());
  for (std::size_t l = 0; l < s.layers.size(); ++l)
    CHECK((s.layers[l].features.values() - translated.layers[l].features.values()).abs().maxCoeff() < 1e-9);
}

TEST_CASE("projection heads emit unit vectors and never NaN") {
  auto g = build_generator<double>(16, 4, 1, {}, 2);
  ProjectionHeads<double> heads(g.tap_channels(), 32, 4);
  CHECK(heads.count() == 4);
  auto x = random_image<double>({2, 3, 16, 16}, 1);
  std::mt19937_64 rng(0);
  auto projected = project_features(heads, encode_patch_features(g, x, 6, rng));
  for (const auto& layer : projected.layers) {
    CHECK(layer.features.shape() == Shape{12, 32});
    for (Index r = 0; r < 12; ++r) {
      const double norm = layer.features.values().segment(r * 32, 32).matrix().norm();
      CHECK(std::abs(norm - 1.0) < 1e-6);
    }
  }

  auto row = random_image<double>({1, 3}, 6);
  auto twice = concat<double>(std::vector<Tensor<double>>{row, row}, 0);
  auto out = heads.project(0, twice);
  CHECK((out.values().head(32) == out.values().tail(32)).all());

  auto zero = heads.project(0, Tensor<double>::zeros({1, 3}));
  CHECK(zero.values().allFinite());
  CHECK(std::abs(zero.values().matrix().norm() - 1.0) < 1e-6);

  CHECK_THROWS_AS(heads.project(0, Tensor<double>::zeros({1, 4})), Error);
  FeatureStack<double> short_stack;
  CHECK_THROWS_AS(heads(short_stack), Error);
}

TEST_CASE("discriminator emits a logit grid") {
  auto d = build_discriminator<float>(64, 32, 3, 1);
  CHECK(d.output_size() == 6);
  auto out = d(random_image<float>({1, 3, 64, 64}, 3));
  CHECK(out.shape() == Shape{1, 1, 6, 6});
  auto again = build_discriminator<float>(64, 32, 3, 1);
  auto pa = d.parameters(), pb = again.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK((pa[i].second.values() == pb[i].second.values()).all());
  CHECK_THROWS_AS(build_discriminator<float>(16, 8, 3), Error);
}

TEST_CASE("discriminator is translation invariant away from borders") {
  // At 128x128 the cells 3..10 of the 14x14 grid never see padding.
  auto d = build_discriminator<double>(128, 4, 3, 2);
  auto out = d(Tensor<double>::full({1, 3, 128, 128}, 0.3));
  REQUIRE(out.shape() == Shape{1, 1, 14, 14});
  const double ref = out.values()[3 * 14 + 3];
  for (Index i = 3; i <= 10; ++i)
    for (Index j = 3; j <= 10; ++j) CHECK(out.values()[i * 14 + j] == doctest::Approx(ref).epsilon(1e-10));
}

TEST_CASE("every parameter receives gradient") {
  auto x = random_image<double>({2, 3, 16, 16}, 21);
  SUBCASE("generator") {
    auto g = build_generator<double>(16, 4, 2, {}, 1);
    weighted_sum(g(x), 3).backward();
    require_all_gradients(g.parameters());
  }
  SUBCASE("generator with dropout") {
    GeneratorOptions o;
    o.image_size = 16;
    o.base_channels = 4;
    o.n_res_blocks = 1;
    o.dropout = 0.5;
    Generator<double> g(o);
    weighted_sum(g(x), 3).backward();
    require_all_gradients(g.parameters());
  }
  SUBCASE("discriminator") {
    auto d = build_discriminator<double>(16, 4, 2, 1);
    weighted_sum(d(x), 4).backward();
    require_all_gradients(d.parameters());
  }
  SUBCASE("projection heads") {
    auto g = build_generator<double>(16, 4, 1, {}, 1);
    ProjectionHeads<double> heads(g.tap_channels(), 16, 2);
    std::mt19937_64 rng(0);
    auto p = heads(encode_patch_features(g, x, 8, rng));
    Tensor<double> loss = weighted_sum(p.layers[0].features, 1);
    for (std::size_t l = 1; l < p.layers.size(); ++l) loss = loss + weighted_sum(p.layers[l].features, l + 1);
    loss.backward();
    require_all_gradients(heads.parameters());
  }
  SUBCASE("embedder") {
    EmbedderOptions o;
    o.image_size = 16;
    o.widths = {4, 8};
    o.n_classes = 3;
    Embedder<double> e(o);
    weighted_sum(e.logits(x), 5).backward();
    require_all_gradients(e.parameters());
  }
}

TEST_CASE("embedder feature width is fixed") {
  Embedder<float> e(EmbedderOptions{});
  auto f = e.features(random_image<float>({3, 3, 64, 64}, 1));
  CHECK(f.shape() == Shape{3, 64});
  CHECK(e.logits(random_image<float>({1, 3, 64, 64}, 2)).shape() == Shape{1, 2});
  CHECK_THROWS_AS(e.features(Tensor<float>::zeros({1, 3, 32, 32})), Error);
}

TEST_CASE("options round-trip through JSON") {
  GeneratorOptions o;
  o.image_size = 32;
  o.tap_points = {0, 3};
  o.dropout = 0.5;
  o.seed = 99;
  nlohmann::json j = o;
  auto back = j.get<GeneratorOptions>();
  CHECK(back.image_size == 32);
  CHECK(back.tap_points == o.tap_points);
  CHECK(back.dropout == 0.5);
  CHECK(back.seed == 99);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto path = std::filesystem::temp_directory_path() / "cranio_test_ck.bin";
  auto g = build_generator<float>(16, 4, 1, {}, 1);
  Checkpoint ck;
  ck.header["generator"] = g.options();
  store_parameters(ck, g.parameters(), "g.");
  write_checkpoint(path, ck);

  auto loaded = read_checkpoint(path);
  auto h = Generator<float>(loaded.header.at("generator").get<GeneratorOptions>());
  auto other = build_generator<float>(16, 4, 1, {}, 2);
  restore_parameters(loaded, other.parameters(), "g.");
  auto x = random_image<float>({1, 3, 16, 16}, 3);
  CHECK((g(x).values() == other(x).values()).all());
  CHECK((g(x).values() == h(x).values()).all());

  auto wider = build_generator<float>(16, 8, 1, {}, 1);
  CHECK_THROWS_AS(restore_parameters(loaded, wider.parameters(), "g."), Error);
  auto as_double = build_generator<double>(16, 4, 1, {}, 1);
  CHECK_THROWS_AS(restore_parameters(loaded, as_double.parameters(), "g."), Error);
  CHECK_THROWS_AS(read_checkpoint(path.string() + ".missing"), Error);
  std::filesystem::remove(path);
}
