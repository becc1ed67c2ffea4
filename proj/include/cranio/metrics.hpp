#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cranio/image.hpp"
#include "cranio/nets.hpp"

namespace cranio {

struct FeatureBatch {
  Eigen::MatrixXd features;  // one row per image
  std::string source;        // "real" or "generated"
  Index width() const { return features.cols(); }
};

struct ProbBatch {
  Eigen::MatrixXd probs;  // one row per image, rows sum to 1
};

// Gaussian-windowed SSIM of two single-channel planes whose values span
// `range` (max - min of the representable values). Valid windows only.
double ssim(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double range);
// Colour images are compared on luma (0.299 R + 0.587 G + 0.114 B); images in
// [-1, 1] have range 2.
double ssim(const Image& x, const Image& y, double range = 2.0);
Eigen::MatrixXd luma(const Image& image);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased (n - 1)
};
GaussianStats gaussian_stats(const FeatureBatch& batch);

double frechet_distance(const GaussianStats& a, const GaussianStats& b);
double fid(const FeatureBatch& real, const FeatureBatch& generated);

struct InceptionScore {
  double mean = 0.0;
  double std = 0.0;
};
// Splits are contiguous row blocks of near-equal size; std is the population
// standard deviation across splits.
InceptionScore inception_score(const ProbBatch& probs, Index n_splits = 4);

struct Embedding {
  FeatureBatch features;
  ProbBatch probs;
};
// Pooled embedder features and softmax class probabilities, computed
// without gradients in chunks of batch_size.
template <typename S>
Embedding embed_for_metrics(const Embedder<S>& embedder, std::span<const Image> images, bool allow_untrained = false,
                            Index batch_size = 32);

}  // namespace cranio
