#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cranio/image.hpp"
#include "cranio/nets.hpp"

namespace cranio {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EmbeddingGallery {
  FeatureMatrix features;  // one row per gallery image
  std::vector<Index> identities;
  std::vector<std::string> paths;
  std::string embedder_id;

  Index size() const { return features.rows(); }
  Index width() const { return features.cols(); }
  void append(const Eigen::Ref<const Eigen::RowVectorXf>& feature, Index identity, const std::string& path);
};

template <typename S>
FeatureMatrix embed_images(const Embedder<S>& embedder, std::span<const Image> images, Index batch_size = 32);

template <typename S>
EmbeddingGallery build_gallery(const Embedder<S>& embedder, std::span<const Image> images,
                               const std::vector<Index>& identities, const std::vector<std::string>& paths,
                               const std::string& embedder_id);

// <prefix>.bin holds the row-major little-endian float32 block; <prefix>.tsv
// the header (embedder, n, d) and one "row identity path" line per row.
void save_gallery(const EmbeddingGallery& gallery, const std::filesystem::path& prefix);
EmbeddingGallery load_gallery(const std::filesystem::path& prefix);

struct Match {
  Index row = 0;
  double distance = 0.0;
};

struct RetrievalResult {
  Index query = 0;
  Index k = 0;
  std::vector<Match> ranked;  // ascending distance, ties by lower row
};

// Full-scan Euclidean search.
RetrievalResult query(const EmbeddingGallery& gallery, const Eigen::Ref<const Eigen::RowVectorXf>& feature, Index k,
                      Index query_id = 0);
std::vector<RetrievalResult> query_all(const EmbeddingGallery& gallery, const FeatureMatrix& queries, Index k);

// Relevant gallery rows per query.
using Relevance = std::vector<std::vector<Index>>;
// A gallery row is relevant iff its identity equals the query's.
Relevance identity_relevance(const EmbeddingGallery& gallery, const std::vector<Index>& query_identities);

double recall_at_k(const std::vector<RetrievalResult>& results, const Relevance& relevance, Index k);
// AP@k normalised by min(relevant, k).
double mean_average_precision(const std::vector<RetrievalResult>& results, const Relevance& relevance, Index k);

// Mean recall@k when each query's ranking is a uniformly random permutation
// of the gallery, averaged over n_shuffles draws.
double random_recall_baseline(Index gallery_size, const Relevance& relevance, Index k, Index n_shuffles,
                              std::uint64_t seed);

// One row per query: the query image, then its top matches left to right.
// Matches of the query's identity get a green border, others a grey one.
Image contact_sheet(std::span<const Image> queries, const std::vector<RetrievalResult>& results,
                    std::span<const Image> gallery_images, const Relevance& relevance, Index columns);

}  // namespace cranio
