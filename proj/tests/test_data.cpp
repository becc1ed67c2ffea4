#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "cranio/data.hpp"

using namespace cranio;
namespace fs = std::filesystem;

namespace {

bool same_pixels(const Image& a, const Image& b) { return a.same_size(b) && (a.data == b.data).all(); }

double distance(const FaceGeometry& a, const FaceGeometry& b) {
  const auto x = a.normalized(), y = b.normalized();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s);
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("cranio_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("synth_generate counts and labels") {
  const auto full = synth_generate(7, 51, 64);
  CHECK(full.pairs.size() == 102);
  CHECK(full.geometry.size() == 51);
  for (const auto& p : full.pairs) {
    CHECK(p.skull.same_size(p.face));
    CHECK(p.skull.height == 64);
    CHECK(p.provenance == "original");
    CHECK(p.skull.data.minCoeff() >= -1.0f);
    CHECK(p.face.data.maxCoeff() <= 1.0f);
  }

  const auto small = synth_generate(7, 2, 64);
  REQUIRE(small.pairs.size() == 4);
  std::set<Index> ids;
  for (const auto& p : small.pairs) ids.insert(p.identity);
  CHECK(ids == std::set<Index>{0, 1});
  CHECK(small.pairs[0].view == View::Frontal);
  CHECK(small.pairs[1].view == View::Lateral);

  CHECK_THROWS_AS(synth_generate(7, 1, 64), Error);
  CHECK_THROWS_AS(synth_generate(7, 4, 16), Error);
}

TEST_CASE("synth_generate is deterministic and seed dependent") {
  const auto a = synth_generate(11, 3, 32), b = synth_generate(11, 3, 32), c = synth_generate(12, 3, 32);
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    CHECK(same_pixels(a.pairs[i].skull, b.pairs[i].skull));
    CHECK(same_pixels(a.pairs[i].face, b.pairs[i].face));
  }
  CHECK_FALSE(same_pixels(a.pairs[0].face, c.pairs[0].face));
}

TEST_CASE("sampled geometry is always valid") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const auto g = sample_geometry(rng);
    CHECK(g.valid());
    CHECK(g.head_width > 0);
    CHECK(g.head_height > 0);
    for (double v : g.normalized()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(jitter_geometry(g, rng).valid());
  }
}

TEST_CASE("identities are separable in latent space") {
  const auto synth = synth_generate(7, 51, 32);
  std::mt19937_64 rng(5);
  double between = 0.0, within = 0.0;
  Index n_between = 0, n_within = 0;
  for (std::size_t i = 0; i < synth.geometry.size(); ++i) {
    for (std::size_t j = i + 1; j < synth.geometry.size(); ++j, ++n_between)
      between += distance(synth.geometry[i], synth.geometry[j]);
    for (int k = 0; k < 4; ++k, ++n_within)
      within += distance(jitter_geometry(synth.geometry[i], rng), jitter_geometry(synth.geometry[i], rng));
  }
  between /= static_cast<double>(n_between);
  within /= static_cast<double>(n_within);
  CHECK(between > 5.0 * within);
}

TEST_CASE("skull and face differ but share layout") {
  std::mt19937_64 rng(9);
  const auto g = sample_geometry(rng);
  const Image skull = render_skull(g, View::Frontal, 64), face = render_face(g, View::Frontal, 64);
  // Background: black around the skull, light around the face.
  CHECK(skull.at(0, 0, 0) < -0.9f);
  CHECK(face.at(0, 0, 0) > 0.5f);
  CHECK_FALSE(same_pixels(render_face(g, View::Frontal, 64), render_face(g, View::Lateral, 64)));
}

TEST_CASE("augment emits one of each kind") {
  const auto synth = synth_generate(7, 41, 32);
  REQUIRE(synth.pairs.size() == 82);
  const auto out = augment(synth.pairs, 1);
  CHECK(out.size() == 410);
  CHECK(augment({}, 1).empty());

  const auto one = augment({synth.pairs[3]}, 1);
  REQUIRE(one.size() == 5);
  std::vector<std::string> kinds;
  for (const auto& p : one) kinds.push_back(p.provenance);
  CHECK(kinds == std::vector<std::string>{"original", "augmented:flip", "augmented:rotation",
                                          "augmented:colour_jitter", "augmented:affine"});
  for (const auto& p : out) {
    const auto& src = synth.pairs[static_cast<std::size_t>(p.source)];
    CHECK(p.identity == src.identity);
    CHECK(p.view == src.view);
  }
  // Jitter leaves the skull untouched; geometric kinds change both images.
  CHECK(same_pixels(one[3].skull, synth.pairs[3].skull));
  CHECK_FALSE(same_pixels(one[3].face, synth.pairs[3].face));
  CHECK_FALSE(same_pixels(one[2].skull, synth.pairs[3].skull));
  CHECK_FALSE(same_pixels(one[4].face, synth.pairs[3].face));
}

TEST_CASE("geometric transforms") {
  const auto p = synth_generate(4, 2, 32).pairs[1];
  CHECK(same_pixels(flip_horizontal(flip_horizontal(p.skull)), p.skull));
  CHECK(same_pixels(flip_horizontal(flip_horizontal(p.face)), p.face));
  CHECK(flip_horizontal(p.face).at(1, 5, 0) == p.face.at(1, 5, 31));

  const Image same = warp_affine(p.face, 0.0, 1.0, 0.0, 0.0);
  CHECK((same.data - p.face.data).abs().maxCoeff() < 1e-6f);

  Image ramp(1, 8, 8);
  for (Index y = 0; y < 8; ++y)
    for (Index x = 0; x < 8; ++x) ramp.at(0, y, x) = static_cast<float>(x) / 8.0f;
  const Image shifted = warp_affine(ramp, 0.0, 1.0, 0.125, 0.0);  // one pixel right
  CHECK(shifted.at(0, 3, 4) == doctest::Approx(3.0 / 8.0));
  CHECK(shifted.at(0, 3, 0) == doctest::Approx(0.0));  // clamped edge
  const Image turned = warp_affine(ramp, 90.0, 1.0, 0.0, 0.0);
  CHECK(std::abs(turned.at(0, 0, 4) - turned.at(0, 7, 4)) > 0.5f);  // the ramp now runs vertically
  CHECK_THROWS_AS(warp_affine(ramp, 0.0, 0.0, 0.0, 0.0), Error);
}

TEST_CASE("colour jitter stays in range") {
  const auto p = synth_generate(4, 2, 32).pairs[0];
  for (double b : {-0.2, 0.0, 0.2})
    for (double c : {-0.2, 0.0, 0.2}) {
      const Image out = colour_jitter(p.face, b, c);
      CHECK(out.data.minCoeff() >= -1.0f);
      CHECK(out.data.maxCoeff() <= 1.0f);
    }
  CHECK((colour_jitter(p.face, 0.0, 0.0).data - p.face.data).abs().maxCoeff() < 1e-6f);
}

TEST_CASE("split counts and determinism") {
  const auto synth = synth_generate(7, 51, 32);
  const auto s = split_pairs(synth.pairs, 0.8, 7);
  CHECK(s.train.size() == 82);
  CHECK(s.test.size() == 20);

  std::vector<ImagePair> ten(synth.pairs.begin(), synth.pairs.begin() + 10);
  const auto half = split_pairs(ten, 0.5, 3);
  CHECK(half.train.size() == 5);
  CHECK(half.test.size() == 5);

  auto members = [](const Split& sp) {
    std::vector<Index> v;
    for (const auto& p : sp.test) v.push_back(p.source);
    return v;
  };
  CHECK(members(split_pairs(synth.pairs, 0.8, 21)) == members(split_pairs(synth.pairs, 0.8, 21)));
  CHECK(members(split_pairs(synth.pairs, 0.8, 21)) != members(split_pairs(synth.pairs, 0.8, 22)));

  CHECK_THROWS_AS(split_pairs({synth.pairs[0]}, 0.8, 1), Error);
  CHECK_THROWS_AS(split_pairs(ten, 0.0, 1), Error);
  CHECK_THROWS_AS(split_pairs(ten, 1.0, 1), Error);
}

TEST_CASE("split then augment never leaks test pairs") {
  const auto synth = synth_generate(2, 10, 32);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = split_pairs(synth.pairs, 0.8, seed);
    std::set<Index> train_sources, test_sources;
    for (const auto& p : augment(s.train, seed)) train_sources.insert(p.source);
    for (const auto& p : s.test) test_sources.insert(p.source);
    for (Index t : test_sources) CHECK(train_sources.count(t) == 0);
    CHECK(train_sources.size() + test_sources.size() == synth.pairs.size());
  }
}

TEST_CASE("png round trip and errors") {
  const fs::path dir = scratch("png");
  Image zero(3, 8, 8, 0.0f);
  save_image(zero, dir / "zero.png");
  const Image back = load_image(dir / "zero.png");
  REQUIRE(back.same_size(zero));
  CHECK((back.data - zero.data).abs().maxCoeff() <= 1.0f / 255.0f);

  const auto p = synth_generate(1, 2, 32).pairs[0];
  save_image(p.face, dir / "face.png");
  CHECK((load_image(dir / "face.png").data - p.face.data).abs().maxCoeff() <= 1.0f / 255.0f);

  try {
    load_image(dir / "missing.png");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NotFound);
  }
  Image hot(3, 4, 4, 2.0f);
  try {
    save_image(hot, dir / "hot.png");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Range);
  }
  {
    std::ofstream junk(dir / "junk.png");
    junk << "not a png";
  }
  CHECK_THROWS_AS(load_image(dir / "junk.png"), Error);
  fs::remove_all(dir);
}

TEST_CASE("dataset write and read back") {
  const fs::path dir = scratch("dataset");
  DatasetOptions opts;
  opts.identities = 5;
  opts.image_size = 32;
  const Dataset d = build_dataset(opts);
  CHECK(d.original_pairs == 10);
  CHECK(d.train.size() == 8 * 5);
  CHECK(d.test.size() == 2);

  const auto written = write_dataset(d, dir);
  const auto m = read_manifest(dir);
  CHECK(m.seed == opts.seed);
  CHECK(m.identities == 5);
  CHECK(m.augmentation_factor == 5);
  REQUIRE(m.records.size() == written.records.size());
  CHECK(m.records.size() == 42);
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    CHECK(m.records[i].path_face == written.records[i].path_face);
    CHECK(m.records[i].identity == identity_from_name(m.records[i].path_face));
  }
  std::size_t gallery = 0;
  for (const auto& e : fs::directory_iterator(dir / "gallery")) gallery += e.path().extension() == ".png";
  CHECK(gallery == 10);

  const auto test = load_split(dir, m, "test");
  REQUIRE(test.size() == 2);
  CHECK(test[0].identity == d.test[0].identity);
  CHECK((test[0].skull.data - d.test[0].skull.data).abs().maxCoeff() <= 1.0f / 255.0f);

  CHECK(identity_from_name("p0003_id0012_frontal.png") == 12);
  CHECK(identity_from_name("nothing.png") == -1);
  CHECK_THROWS_AS(read_manifest(dir / "nope"), Error);
  fs::remove_all(dir);
}
