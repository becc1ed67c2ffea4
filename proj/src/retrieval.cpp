#include "cranio/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace cranio {

namespace {

void check_relevance(const std::vector<RetrievalResult>& results, const Relevance& relevance, Index k) {
  if (k < 1) throw Error(ErrorKind::InvalidArgument, "retrieval", "k must be >= 1");
  if (results.size() != relevance.size())
    throw Error(ErrorKind::Shape, "retrieval", std::to_string(results.size()) + " results but " +
                                                   std::to_string(relevance.size()) + " relevance lists");
  for (std::size_t q = 0; q < relevance.size(); ++q)
    if (relevance[q].empty())
      throw Error(ErrorKind::InvalidArgument, "retrieval",
                  "query " + std::to_string(results[q].query) + " has no relevant gallery rows");
}

Index hits(const std::vector<Match>& ranked, const std::vector<Index>& relevant, Index k, double* precision_sum) {
  const std::set<Index> rel(relevant.begin(), relevant.end());
  Index found = 0;
  const Index depth = std::min<Index>(k, static_cast<Index>(ranked.size()));
  for (Index r = 0; r < depth; ++r)
    if (rel.count(ranked[static_cast<std::size_t>(r)].row)) {
      ++found;
      if (precision_sum) *precision_sum += static_cast<double>(found) / static_cast<double>(r + 1);
    }
  return found;
}

void paste(Image& sheet, const Image& img, Index top, Index left) {
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < img.height; ++y)
      for (Index x = 0; x < img.width; ++x) sheet.at(c, top + y, left + x) = img.at(std::min(c, img.channels - 1), y, x);
}

void border(Image& sheet, Index top, Index left, Index h, Index w, Index thickness, const float rgb[3]) {
  for (Index y = top; y < top + h; ++y)
    for (Index x = left; x < left + w; ++x) {
      const bool edge = y < top + thickness || y >= top + h - thickness || x < left + thickness || x >= left + w - thickness;
      if (edge)
        for (Index c = 0; c < 3; ++c) sheet.at(c, y, x) = rgb[c];
    }
}

}  // namespace

void EmbeddingGallery::append(const Eigen::Ref<const Eigen::RowVectorXf>& feature, Index identity,
                              const std::string& path) {
  if (size() > 0 && feature.size() != width())
    throw Error(ErrorKind::Shape, "gallery", "feature width " + std::to_string(feature.size()) + " vs gallery width " +
                                                 std::to_string(width()));
  if (!feature.allFinite()) throw Error(ErrorKind::NonFinite, "gallery", "non-finite feature for " + path);
  if (identity < 0) throw Error(ErrorKind::InvalidArgument, "gallery", "missing identity for " + path);
  features.conservativeResize(size() + 1, feature.size());
  features.row(size() - 1) = feature;
  identities.push_back(identity);
  paths.push_back(path);
}

template <typename S>
FeatureMatrix embed_images(const Embedder<S>& embedder, std::span<const Image> images, Index batch_size) {
  NoGradGuard guard;
  const Index n = static_cast<Index>(images.size());
  FeatureMatrix out(n, embedder.feature_width());
  for (Index i = 0; i < n; i += batch_size) {
    const Index m = std::min(batch_size, n - i);
    const Tensor<S> f =
        embedder.features(to_batch<S>(images.subspan(static_cast<std::size_t>(i), static_cast<std::size_t>(m))));
    for (Index r = 0; r < m; ++r)
      for (Index c = 0; c < out.cols(); ++c) out(i + r, c) = static_cast<float>(f.at(r * out.cols() + c));
  }
  return out;
}

template <typename S>
EmbeddingGallery build_gallery(const Embedder<S>& embedder, std::span<const Image> images,
                               const std::vector<Index>& identities, const std::vector<std::string>& paths,
                               const std::string& embedder_id) {
  if (images.empty()) throw Error(ErrorKind::InvalidArgument, "build_gallery", "no images");
  if (identities.size() != images.size() || paths.size() != images.size())
    throw Error(ErrorKind::Shape, "build_gallery", "need one identity and path per image");
  if (!embedder.trained()) throw Error(ErrorKind::State, "build_gallery", "embedder is untrained");
  const FeatureMatrix f = embed_images(embedder, images);
  EmbeddingGallery g;
  g.embedder_id = embedder_id;
  for (Index i = 0; i < f.rows(); ++i)
    g.append(f.row(i), identities[static_cast<std::size_t>(i)], paths[static_cast<std::size_t>(i)]);
  return g;
}

void save_gallery(const EmbeddingGallery& g, const std::filesystem::path& prefix) {
  auto bin_path = prefix, tsv_path = prefix;
  bin_path += ".bin";
  tsv_path += ".tsv";
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw Error(ErrorKind::Io, "save_gallery", "cannot write " + bin_path.string());
  for (Index i = 0; i < g.size(); ++i)
    for (Index j = 0; j < g.width(); ++j) {
      const auto bits = std::bit_cast<std::uint32_t>(g.features(i, j));
      const char bytes[4] = {static_cast<char>(bits), static_cast<char>(bits >> 8), static_cast<char>(bits >> 16),
                             static_cast<char>(bits >> 24)};
      bin.write(bytes, 4);
    }
  std::ofstream tsv(tsv_path, std::ios::trunc);
  tsv << "# embedder=" << g.embedder_id << "\n# n=" << g.size() << "\n# d=" << g.width() << "\nrow\tidentity_id\tpath\n";
  for (Index i = 0; i < g.size(); ++i)
    tsv << i << '\t' << g.identities[static_cast<std::size_t>(i)] << '\t' << g.paths[static_cast<std::size_t>(i)] << '\n';
  if (!bin.flush() || !tsv.flush()) throw Error(ErrorKind::Io, "save_gallery", "write failed for " + prefix.string());
}

EmbeddingGallery load_gallery(const std::filesystem::path& prefix) {
  auto bin_path = prefix, tsv_path = prefix;
  bin_path += ".bin";
  tsv_path += ".tsv";
  std::ifstream tsv(tsv_path);
  if (!tsv) throw Error(ErrorKind::NotFound, "load_gallery", "no gallery sidecar " + tsv_path.string());
  EmbeddingGallery g;
  Index n = -1, d = -1;
  std::string line;
  bool header = false;
  while (std::getline(tsv, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2), value = line.substr(eq + 1);
      if (key == "embedder") g.embedder_id = value;
      else if (key == "n") n = std::stol(value);
      else if (key == "d") d = std::stol(value);
      continue;
    }
    if (!header) {
      header = true;
      continue;
    }
    std::istringstream ss(line);
    std::string row, id, path;
    std::getline(ss, row, '\t');
    std::getline(ss, id, '\t');
    std::getline(ss, path);
    g.identities.push_back(std::stol(id));
    g.paths.push_back(path);
  }
  if (n < 0 || d < 0 || static_cast<Index>(g.identities.size()) != n)
    throw Error(ErrorKind::Format, "load_gallery", tsv_path.string() + ": header and rows disagree");
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw Error(ErrorKind::NotFound, "load_gallery", "no gallery block " + bin_path.string());
  g.features.resize(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) {
      unsigned char b[4];
      if (!bin.read(reinterpret_cast<char*>(b), 4))
        throw Error(ErrorKind::Format, "load_gallery", bin_path.string() + " is shorter than n*d floats");
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      g.features(i, j) = std::bit_cast<float>(bits);
    }
  if (bin.peek() != std::char_traits<char>::eof())
    throw Error(ErrorKind::Format, "load_gallery", bin_path.string() + " is longer than n*d floats");
  return g;
}

RetrievalResult query(const EmbeddingGallery& gallery, const Eigen::Ref<const Eigen::RowVectorXf>& feature, Index k,
                      Index query_id) {
  if (gallery.size() == 0) throw Error(ErrorKind::InvalidArgument, "query", "empty gallery");
  if (k < 1) throw Error(ErrorKind::InvalidArgument, "query", "k must be >= 1");
  if (feature.size() != gallery.width())
    throw Error(ErrorKind::Shape, "query", "query width " + std::to_string(feature.size()) + " vs gallery width " +
                                               std::to_string(gallery.width()));
  std::vector<Match> all(static_cast<std::size_t>(gallery.size()));
  for (Index i = 0; i < gallery.size(); ++i) {
    double s = 0.0;
    for (Index j = 0; j < gallery.width(); ++j) {
      const double diff = static_cast<double>(gallery.features(i, j)) - static_cast<double>(feature[j]);
      s += diff * diff;
    }
    all[static_cast<std::size_t>(i)] = {i, std::sqrt(s)};
  }
  const auto depth = static_cast<std::size_t>(std::min(k, gallery.size()));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(depth), all.end(),
                    [](const Match& a, const Match& b) { return a.distance != b.distance ? a.distance < b.distance : a.row < b.row; });
  all.resize(depth);
  return {query_id, k, std::move(all)};
}

std::vector<RetrievalResult> query_all(const EmbeddingGallery& gallery, const FeatureMatrix& queries, Index k) {
  std::vector<RetrievalResult> out;
  for (Index q = 0; q < queries.rows(); ++q) out.push_back(query(gallery, queries.row(q), k, q));
  return out;
}

Relevance identity_relevance(const EmbeddingGallery& gallery, const std::vector<Index>& query_identities) {
  Relevance rel;
  for (Index id : query_identities) {
    std::vector<Index> rows;
    for (Index i = 0; i < gallery.size(); ++i)
      if (gallery.identities[static_cast<std::size_t>(i)] == id) rows.push_back(i);
    rel.push_back(std::move(rows));
  }
  return rel;
}

double recall_at_k(const std::vector<RetrievalResult>& results, const Relevance& relevance, Index k) {
  check_relevance(results, relevance, k);
  if (results.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < results.size(); ++q)
    total += static_cast<double>(hits(results[q].ranked, relevance[q], k, nullptr)) /
             static_cast<double>(relevance[q].size());
  return total / static_cast<double>(results.size());
}

double mean_average_precision(const std::vector<RetrievalResult>& results, const Relevance& relevance, Index k) {
  check_relevance(results, relevance, k);
  if (results.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < results.size(); ++q) {
    double precision_sum = 0.0;
    hits(results[q].ranked, relevance[q], k, &precision_sum);
    total += precision_sum / static_cast<double>(std::min<Index>(static_cast<Index>(relevance[q].size()), k));
  }
  return total / static_cast<double>(results.size());
}

double random_recall_baseline(Index gallery_size, const Relevance& relevance, Index k, Index n_shuffles,
                              std::uint64_t seed) {
  if (gallery_size < 1 || n_shuffles < 1)
    throw Error(ErrorKind::InvalidArgument, "random_recall_baseline", "need a non-empty gallery and >= 1 shuffle");
  std::mt19937_64 rng(seed);
  std::vector<Index> perm(static_cast<std::size_t>(gallery_size));
  double total = 0.0;
  for (Index s = 0; s < n_shuffles; ++s) {
    std::vector<RetrievalResult> results;
    for (std::size_t q = 0; q < relevance.size(); ++q) {
      std::iota(perm.begin(), perm.end(), Index{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      RetrievalResult r{static_cast<Index>(q), k, {}};
      for (Index i = 0; i < std::min(k, gallery_size); ++i) r.ranked.push_back({perm[static_cast<std::size_t>(i)], 0.0});
      results.push_back(std::move(r));
    }
    total += recall_at_k(results, relevance, k);
  }
  return total / static_cast<double>(n_shuffles);
}

Image contact_sheet(std::span<const Image> queries, const std::vector<RetrievalResult>& results,
                    std::span<const Image> gallery_images, const Relevance& relevance, Index columns) {
  if (queries.size() != results.size() || results.size() != relevance.size())
    throw Error(ErrorKind::Shape, "contact_sheet", "queries, results and relevance differ in length");
  if (queries.empty()) throw Error(ErrorKind::InvalidArgument, "contact_sheet", "no queries");
  const Index h = queries.front().height, w = queries.front().width, pad = 4;
  const Index cell_h = h + 2 * pad, cell_w = w + 2 * pad;
  Image sheet(3, cell_h * static_cast<Index>(queries.size()), cell_w * (columns + 1), 1.0f);
  const float green[3] = {-1.0f, 0.6f, -1.0f}, grey[3] = {0.2f, 0.2f, 0.2f}, blue[3] = {-0.6f, -0.4f, 0.8f};
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const Index top = static_cast<Index>(q) * cell_h;
    border(sheet, top, 0, cell_h, cell_w, pad, blue);
    paste(sheet, queries[q], top + pad, pad);
    const std::set<Index> rel(relevance[q].begin(), relevance[q].end());
    for (Index c = 0; c < std::min<Index>(columns, static_cast<Index>(results[q].ranked.size())); ++c) {
      const Index row = results[q].ranked[static_cast<std::size_t>(c)].row;
      if (row >= static_cast<Index>(gallery_images.size()))
        throw Error(ErrorKind::Range, "contact_sheet", "gallery row " + std::to_string(row) + " has no image");
      const Index left = (c + 1) * cell_w;
      border(sheet, top, left, cell_h, cell_w, pad, rel.count(row) ? green : grey);
      const Image& g = gallery_images[static_cast<std::size_t>(row)];
      if (g.height != h || g.width != w) throw Error(ErrorKind::Shape, "contact_sheet", "gallery image size differs from query");
      paste(sheet, g, top + pad, left + pad);
    }
  }
  return sheet;
}

template FeatureMatrix embed_images<float>(const Embedder<float>&, std::span<const Image>, Index);
template FeatureMatrix embed_images<double>(const Embedder<double>&, std::span<const Image>, Index);
template EmbeddingGallery build_gallery<float>(const Embedder<float>&, std::span<const Image>, const std::vector<Index>&,
                                               const std::vector<std::string>&, const std::string&);
template EmbeddingGallery build_gallery<double>(const Embedder<double>&, std::span<const Image>,
                                                const std::vector<Index>&, const std::vector<std::string>&,
                                                const std::string&);

}  // namespace cranio
