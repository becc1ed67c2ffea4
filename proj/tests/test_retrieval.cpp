#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "cranio/retrieval.hpp"

using namespace cranio;
namespace fs = std::filesystem;

namespace {

EmbeddingGallery random_gallery(std::mt19937_64& rng, Index n, Index d, Index identities) {
  std::normal_distribution<float> z(0.0f, 1.0f);
  EmbeddingGallery g;
  for (Index i = 0; i < n; ++i) {
    Eigen::RowVectorXf f(d);
    for (Index j = 0; j < d; ++j) f[j] = z(rng);
    g.append(f, static_cast<Index>(rng() % static_cast<std::uint64_t>(identities)), "img" + std::to_string(i));
  }
  return g;
}

// Independent scoring: full sort of every row, then direct counting.
struct Naive {
  double recall = 0.0, map = 0.0;
};

Naive naive_scores(const EmbeddingGallery& g, const FeatureMatrix& q, const std::vector<Index>& query_ids, Index k) {
  Naive out;
  for (Index i = 0; i < q.rows(); ++i) {
    std::vector<std::pair<double, Index>> d;
    for (Index r = 0; r < g.size(); ++r) {
      double s = 0.0;
      for (Index j = 0; j < g.width(); ++j) s += std::pow(double(g.features(r, j)) - double(q(i, j)), 2);
      d.push_back({std::sqrt(s), r});
    }
    std::sort(d.begin(), d.end());
    Index total = 0;
    for (Index r = 0; r < g.size(); ++r) total += g.identities[r] == query_ids[i];
    Index found = 0;
    double ap = 0.0;
    for (Index r = 0; r < std::min(k, g.size()); ++r)
      if (g.identities[d[r].second] == query_ids[i]) {
        ++found;
        ap += double(found) / double(r + 1);
      }
    out.recall += double(found) / double(total);
    out.map += ap / double(std::min(total, k));
  }
  out.recall /= double(q.rows());
  out.map /= double(q.rows());
  return out;
}

RetrievalResult ranked(std::vector<Index> rows) {
  RetrievalResult r;
  r.k = static_cast<Index>(rows.size());
  for (Index row : rows) r.ranked.push_back({row, 0.0});
  return r;
}

}  // namespace

TEST_CASE("hand-computed query") {
  EmbeddingGallery g;
  g.append(Eigen::RowVector2f(0, 0), 0, "a");
  g.append(Eigen::RowVector2f(3, 4), 1, "b");
  const auto r = query(g, Eigen::RowVector2f(1, 0), 2);
  REQUIRE(r.ranked.size() == 2);
  CHECK(r.ranked[0].row == 0);
  CHECK(r.ranked[0].distance == doctest::Approx(1.0));
  CHECK(r.ranked[1].row == 1);
  CHECK(r.ranked[1].distance == doctest::Approx(std::sqrt(20.0)));
  CHECK(query(g, Eigen::RowVector2f(1, 0), 5).ranked.size() == 2);

  // Ties go to the lower row.
  g.append(Eigen::RowVector2f(0, 0), 2, "c");
  const auto t = query(g, Eigen::RowVector2f(0, 0), 3);
  CHECK(t.ranked[0].row == 0);
  CHECK(t.ranked[1].row == 2);

  CHECK_THROWS_AS(query(EmbeddingGallery{}, Eigen::RowVector2f(0, 0), 1), Error);
  CHECK_THROWS_AS(query(g, Eigen::RowVector2f(0, 0), 0), Error);
  CHECK_THROWS_AS(query(g, Eigen::RowVector3f(0, 0, 0), 1), Error);
  CHECK_THROWS_AS(g.append(Eigen::RowVector3f(0, 0, 0), 0, "d"), Error);
}

TEST_CASE("ranking matches a full sort") {
  std::mt19937_64 rng(1);
  const EmbeddingGallery g = random_gallery(rng, 100, 6, 10);
  for (int t = 0; t < 20; ++t) {
    const Eigen::RowVectorXf q = random_gallery(rng, 1, 6, 1).features.row(0);
    const auto r = query(g, q, 100);
    std::vector<std::pair<double, Index>> oracle;
    for (Index i = 0; i < g.size(); ++i) oracle.push_back({(g.features.row(i).cast<double>() - q.cast<double>()).norm(), i});
    std::sort(oracle.begin(), oracle.end());
    for (Index i = 0; i < 100; ++i) {
      CHECK(r.ranked[i].row == oracle[i].second);
      if (i > 0) CHECK(r.ranked[i].distance >= r.ranked[i - 1].distance);
    }
  }
}

TEST_CASE("every member retrieves itself first") {
  std::mt19937_64 rng(2);
  const EmbeddingGallery g = random_gallery(rng, 60, 5, 7);
  for (Index i = 0; i < g.size(); ++i) {
    const auto r = query(g, g.features.row(i), 1);
    CHECK(r.ranked[0].row == i);
    CHECK(r.ranked[0].distance == 0.0);
  }
}

TEST_CASE("recall and AP examples") {
  const RetrievalResult at3 = ranked({5, 6, 0, 7, 8, 9, 10, 11, 12, 13});
  CHECK(recall_at_k({at3}, {{0}}, 10) == 1.0);
  std::vector<Index> rows(20);
  std::iota(rows.begin(), rows.end(), Index{1});
  rows[14] = 0;
  CHECK(recall_at_k({ranked(rows)}, {{0}}, 10) == 0.0);
  CHECK(recall_at_k({ranked({0, 1, 2, 3, 4, 5, 6, 7, 8, 9})}, {{0, 4, 50}}, 10) == doctest::Approx(2.0 / 3.0));

  CHECK(mean_average_precision({ranked({0, 1, 2})}, {{0}}, 10) == 1.0);
  CHECK(mean_average_precision({ranked({1, 0, 2})}, {{0}}, 10) == 0.5);
  CHECK(mean_average_precision({ranked({0, 1, 2, 3})}, {{0, 2}}, 10) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));

  CHECK_THROWS_AS(recall_at_k({at3}, {{}}, 10), Error);
  CHECK_THROWS_AS(mean_average_precision({at3}, {{}}, 10), Error);
  try {
    recall_at_k({at3, at3}, {{0}, {}}, 10);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("query") != std::string::npos);
  }
}

TEST_CASE("metrics agree with the naive implementation") {
  std::mt19937_64 rng(3);
  for (int inst = 0; inst < 200; ++inst) {
    const Index n = 5 + static_cast<Index>(rng() % 196), d = 1 + static_cast<Index>(rng() % 8);
    const Index ids = 1 + static_cast<Index>(rng() % 20);
    const EmbeddingGallery g = random_gallery(rng, n, d, ids);
    const Index nq = 1 + static_cast<Index>(rng() % 10);
    FeatureMatrix q = random_gallery(rng, nq, d, 1).features;
    std::vector<Index> qid;
    for (Index i = 0; i < nq; ++i) qid.push_back(g.identities[rng() % static_cast<std::uint64_t>(n)]);
    const Index k = 1 + static_cast<Index>(rng() % 25);
    const auto results = query_all(g, q, k);
    const auto rel = identity_relevance(g, qid);
    const Naive oracle = naive_scores(g, q, qid, k);
    CHECK(recall_at_k(results, rel, k) == oracle.recall);
    CHECK(mean_average_precision(results, rel, k) == oracle.map);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(4);
  const EmbeddingGallery g = random_gallery(rng, 80, 4, 8);
  FeatureMatrix q = random_gallery(rng, 12, 4, 1).features;
  std::vector<Index> qid;
  for (Index i = 0; i < 12; ++i) qid.push_back(static_cast<Index>(i % 8));
  const auto rel = identity_relevance(g, qid);
  const auto results = query_all(g, q, 80);
  double prev = 0.0;
  for (Index k = 1; k <= 80; ++k) {
    const double r = recall_at_k(results, rel, k), m = mean_average_precision(results, rel, k);
    CHECK(r >= prev);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
    prev = r;
  }
  CHECK(prev == 1.0);

  // A shared offset leaves rankings unchanged.
  EmbeddingGallery shifted = g;
  const Eigen::RowVector4f offset(0.5f, -0.25f, 1.0f, 0.125f);
  shifted.features.rowwise() += offset;
  FeatureMatrix qs = q;
  qs.rowwise() += offset;
  const auto moved = query_all(shifted, qs, 80);
  for (std::size_t i = 0; i < results.size(); ++i)
    for (std::size_t j = 0; j < 80; ++j) CHECK(moved[i].ranked[j].row == results[i].ranked[j].row);
}

TEST_CASE("random baseline") {
  // One relevant row out of 50 and k = 10 gives recall 0.2 in expectation.
  const Relevance rel(20, std::vector<Index>{7});
  CHECK(random_recall_baseline(50, rel, 10, 1000, 1) == doctest::Approx(0.2).epsilon(0.05));
  CHECK(random_recall_baseline(50, rel, 10, 100, 3) == random_recall_baseline(50, rel, 10, 100, 3));
}

TEST_CASE("gallery persistence and building") {
  std::mt19937_64 rng(5);
  const EmbeddingGallery g = random_gallery(rng, 10, 7, 3);
  const fs::path dir = fs::temp_directory_path() / "cranio_test_gallery";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_gallery(g, dir / "gallery");
  const EmbeddingGallery back = load_gallery(dir / "gallery");
  CHECK(back.features == g.features);
  CHECK(back.identities == g.identities);
  CHECK(back.paths == g.paths);
  CHECK(fs::file_size(dir / "gallery.bin") == 10 * 7 * 4);
  CHECK_THROWS_AS(load_gallery(dir / "missing"), Error);
  fs::remove_all(dir);

  EmbedderOptions o;
  o.image_size = 16;
  o.widths = {4, 4};
  o.n_classes = 3;
  Embedder<float> net(o);
  std::vector<Image> images;
  std::vector<Index> ids;
  std::vector<std::string> paths;
  for (int i = 0; i < 10; ++i) {
    images.emplace_back(3, 16, 16, -1.0f + 0.2f * static_cast<float>(i));
    ids.push_back(9 - i);
    paths.push_back("p" + std::to_string(i));
  }
  CHECK_THROWS_AS(build_gallery(net, images, ids, paths, "e"), Error);
  net.set_trained(true);
  const auto a = build_gallery(net, images, ids, paths, "e"), b = build_gallery(net, images, ids, paths, "e");
  CHECK(a.size() == 10);
  CHECK(a.identities == ids);
  CHECK(a.features == b.features);
}

TEST_CASE("contact sheet marks matches in green") {
  std::vector<Image> gallery{Image(3, 8, 8, 0.0f), Image(3, 8, 8, 0.5f)};
  std::vector<Image> queries{Image(3, 8, 8, -0.5f)};
  const Image sheet = contact_sheet(queries, {ranked({1, 0})}, gallery, {{1}}, 2);
  CHECK(sheet.height == 16);
  CHECK(sheet.width == 48);
  // First match cell is relevant: green border; second is not.
  CHECK(sheet.at(1, 0, 16) > 0.5f);
  CHECK(sheet.at(0, 0, 16) < -0.9f);
  CHECK(sheet.at(1, 0, 32) == doctest::Approx(0.2f));
  CHECK(sheet.at(0, 8, 20) == 0.5f);
}
