#include "cranio/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>

namespace cranio {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

Eigen::VectorXd gaussian_window() {
  Eigen::VectorXd w(kWindow);
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - (kWindow - 1) / 2.0;
    w[i] = std::exp(-d * d / (2 * kSigma * kSigma));
  }
  return w / w.sum();
}

// Separable valid-mode filtering with the SSIM window.
Eigen::MatrixXd filter(const Eigen::MatrixXd& m, const Eigen::VectorXd& w) {
  const Index oh = m.rows() - kWindow + 1, ow = m.cols() - kWindow + 1;
  Eigen::MatrixXd rows(oh, m.cols());
  for (Index i = 0; i < oh; ++i) rows.row(i) = w.transpose() * m.middleRows(i, kWindow);
  Eigen::MatrixXd out(oh, ow);
  for (Index j = 0; j < ow; ++j) out.col(j) = rows.middleCols(j, kWindow) * w;
  return out;
}

void require_finite_features(const FeatureBatch& b, const char* op) {
  if (!b.features.allFinite()) throw Error(ErrorKind::NonFinite, op, "non-finite " + b.source + " features");
}

}  // namespace

double ssim(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double range) {
  if (x.rows() != y.rows() || x.cols() != y.cols())
    throw Error(ErrorKind::Shape, "ssim", "images differ in size: " + std::to_string(x.rows()) + "x" +
                                              std::to_string(x.cols()) + " vs " + std::to_string(y.rows()) + "x" +
                                              std::to_string(y.cols()));
  if (x.rows() < kWindow || x.cols() < kWindow)
    throw Error(ErrorKind::Shape, "ssim", "image smaller than the 11x11 window");
  if (!(range > 0)) throw Error(ErrorKind::InvalidArgument, "ssim", "range must be > 0");
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  const Eigen::VectorXd w = gaussian_window();
  const Eigen::ArrayXXd mx = filter(x, w).array(), my = filter(y, w).array();
  const Eigen::ArrayXXd sxx = filter(x.cwiseProduct(x), w).array() - mx * mx;
  const Eigen::ArrayXXd syy = filter(y.cwiseProduct(y), w).array() - my * my;
  const Eigen::ArrayXXd sxy = filter(x.cwiseProduct(y), w).array() - mx * my;
  const Eigen::ArrayXXd map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean();
}

Eigen::MatrixXd luma(const Image& image) {
  Eigen::MatrixXd out(image.height, image.width);
  for (Index y = 0; y < image.height; ++y)
    for (Index x = 0; x < image.width; ++x)
      out(y, x) = image.channels == 1 ? image.at(0, y, x)
                                      : 0.299 * image.at(0, y, x) + 0.587 * image.at(1, y, x) + 0.114 * image.at(2, y, x);
  return out;
}

double ssim(const Image& x, const Image& y, double range) {
  if (!x.same_size(y)) throw Error(ErrorKind::Shape, "ssim", "images differ in size");
  if (x.channels != 1 && x.channels != 3) throw Error(ErrorKind::Shape, "ssim", "expected 1 or 3 channels");
  return ssim(luma(x), luma(y), range);
}

GaussianStats gaussian_stats(const FeatureBatch& batch) {
  const Index n = batch.features.rows();
  if (n < 2) throw Error(ErrorKind::InvalidArgument, "gaussian_stats", "need at least 2 feature rows, got " + std::to_string(n));
  require_finite_features(batch, "gaussian_stats");
  GaussianStats s;
  s.mean = batch.features.colwise().mean().transpose();
  const Eigen::MatrixXd centred = batch.features.rowwise() - s.mean.transpose();
  s.cov = (centred.transpose() * centred) / static_cast<double>(n - 1);
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size())
    throw Error(ErrorKind::Shape, "fid", "feature widths differ: " + std::to_string(a.mean.size()) + " vs " +
                                             std::to_string(b.mean.size()));
  // Tr((A B)^1/2) = Tr((A^1/2 B A^1/2)^1/2) with A^1/2 from the symmetric
  // eigendecomposition of A.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.cov);
  if (ea.info() != Eigen::Success) throw Error(ErrorKind::NonFinite, "fid", "eigendecomposition of the first covariance failed");
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd root_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = root_a * b.cov * root_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  if (em.info() != Eigen::Success)
    throw Error(ErrorKind::NonFinite, "fid",
                "eigendecomposition failed; covariance eigenvalues span [" + std::to_string(la.minCoeff()) + ", " +
                    std::to_string(la.maxCoeff()) + "]");
  const Eigen::VectorXd lm = em.eigenvalues();
  const double scale = std::max(1.0, lm.cwiseAbs().maxCoeff());
  double trace_root = 0.0;
  for (Index i = 0; i < lm.size(); ++i) {
    if (lm[i] < -1e-8 * scale)
      throw Error(ErrorKind::NonFinite, "fid",
                  "product of covariances has eigenvalue " + std::to_string(lm[i]) + " (condition " +
                      std::to_string(la.maxCoeff() / std::max(la.minCoeff(), 1e-300)) + ")");
    trace_root += std::sqrt(std::max(lm[i], 0.0));
  }
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_root;
  return std::max(d, 0.0);
}

double fid(const FeatureBatch& real, const FeatureBatch& generated) {
  return frechet_distance(gaussian_stats(real), gaussian_stats(generated));
}

InceptionScore inception_score(const ProbBatch& p, Index n_splits) {
  const Index n = p.probs.rows();
  if (n_splits < 1 || n < n_splits)
    throw Error(ErrorKind::InvalidArgument, "inception_score",
                "need n >= n_splits >= 1, got n=" + std::to_string(n) + " splits=" + std::to_string(n_splits));
  for (Index i = 0; i < n; ++i) {
    if ((p.probs.row(i).array() < 0).any() || !p.probs.row(i).allFinite())
      throw Error(ErrorKind::Range, "inception_score", "row " + std::to_string(i) + " has a negative or non-finite entry");
    if (std::abs(p.probs.row(i).sum() - 1.0) > 1e-6)
      throw Error(ErrorKind::Range, "inception_score", "row " + std::to_string(i) + " sums to " + std::to_string(p.probs.row(i).sum()));
  }
  constexpr double eps = 1e-12;
  std::vector<double> scores;
  for (Index s = 0; s < n_splits; ++s) {
    const Index begin = s * n / n_splits, end = (s + 1) * n / n_splits;
    const auto block = p.probs.middleRows(begin, end - begin);
    const Eigen::RowVectorXd marginal = block.colwise().mean();
    double kl = 0.0;
    for (Index i = 0; i < block.rows(); ++i)
      for (Index c = 0; c < block.cols(); ++c) {
        const double q = block(i, c);
        if (q > 0) kl += q * (std::log(q + eps) - std::log(marginal[c] + eps));
      }
    scores.push_back(std::exp(kl / static_cast<double>(block.rows())));
  }
  InceptionScore out;
  for (double s : scores) out.mean += s;
  out.mean /= static_cast<double>(scores.size());
  for (double s : scores) out.std += (s - out.mean) * (s - out.mean);
  out.std = std::sqrt(out.std / static_cast<double>(scores.size()));
  return out;
}

template <typename S>
Embedding embed_for_metrics(const Embedder<S>& embedder, std::span<const Image> images, bool allow_untrained,
                            Index batch_size) {
  if (!embedder.trained() && !allow_untrained)
    throw Error(ErrorKind::State, "embed_for_metrics", "embedder is untrained; train one or pass the override");
  if (images.empty()) throw Error(ErrorKind::InvalidArgument, "embed_for_metrics", "no images");
  NoGradGuard guard;
  const Index n = static_cast<Index>(images.size());
  Embedding e;
  e.features.features.resize(n, embedder.feature_width());
  e.probs.probs.resize(n, embedder.options().n_classes);
  for (Index i = 0; i < n; i += batch_size) {
    const Index m = std::min(batch_size, n - i);
    const Tensor<S> f = embedder.features(to_batch<S>(images.subspan(static_cast<std::size_t>(i), static_cast<std::size_t>(m))));
    const Tensor<S> logits = embedder.logits_from_features(f);
    const Index width = f.dim(1), classes = logits.dim(1);
    for (Index r = 0; r < m; ++r) {
      for (Index c = 0; c < width; ++c) e.features.features(i + r, c) = static_cast<double>(f.at(r * width + c));
      Eigen::RowVectorXd z(classes);
      for (Index c = 0; c < classes; ++c) z[c] = static_cast<double>(logits.at(r * classes + c));
      z = (z.array() - z.maxCoeff()).exp().matrix();
      e.probs.probs.row(i + r) = z / z.sum();
    }
  }
  return e;
}

template Embedding embed_for_metrics<float>(const Embedder<float>&, std::span<const Image>, bool, Index);
template Embedding embed_for_metrics<double>(const Embedder<double>&, std::span<const Image>, bool, Index);

}  // namespace cranio
