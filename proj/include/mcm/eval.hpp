#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcm/data.hpp"
#include "mcm/models.hpp"
#include "mcm/tensor.hpp"

namespace mcm {

/// Gaussian fit of a feature set. The covariance carries a ridge on its diagonal.
struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> cov;  // dim x dim, row-major
  std::size_t count = 0;

  std::size_t dim() const noexcept { return mean.size(); }
};

constexpr double kCovRidge = 1e-6;

/// Stats of the rows of `features` ([N, d]). Covariance uses the N - 1 normalisation.
FeatureStats feature_stats(const Tensor& features, double ridge = kCovRidge);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// Fraction of generated rows whose best cosine against the train rows exceeds `threshold`.
double sim_aa(const Tensor& gen_feats, const Tensor& train_feats, double threshold);

/// Class centroids in pooled-feature space, centered on the mean of the real features.
struct ClassCentroids {
  std::vector<double> center;  // subtracted from every feature before use
  Tensor centroids;            // [num_classes, d]

  int num_classes() const { return static_cast<int>(centroids.rows()); }
};

/// Centered pooled features of a grid batch.
Tensor embed(const FeatureNet& fnet, const Tensor& grids, std::span<const double> center);

ClassCentroids class_centroids(const FeatureNet& fnet, std::span<const SpectrogramSample> real, int num_classes);

/// Mean cosine between each generated grid's centered feature and its label's centroid.
double class_similarity(const Tensor& gen_grids, std::span<const int> labels, const FeatureNet& fnet,
                        const ClassCentroids& centroids);

/// Affine + softmax probe over standardized pooled features, trained full batch.
class ClassProbe {
 public:
  ClassProbe(const FeatureNet& fnet, std::span<const SpectrogramSample> real, int num_classes,
             std::size_t iterations = 400, double lr = 0.05);

  /// Class probabilities [B, num_classes].
  Tensor probs(const Tensor& grids) const;
  /// Fraction of samples whose argmax matches the label.
  double accuracy(std::span<const SpectrogramSample> samples) const;
  int num_classes() const noexcept { return num_classes_; }

 private:
  Tensor standardize(const Tensor& pooled) const;

  const FeatureNet& fnet_;
  int num_classes_;
  std::vector<double> mean_, inv_std_;
  Tensor w_, b_;
};

/// exp(E_x KL(p(y|x) || p(y))). Rows must be probability vectors.
double inception_score(const Tensor& probs);

/// Mean over rows of KL(ref[i] || gen[i]).
double paired_kl(const Tensor& ref_probs, const Tensor& gen_probs);

struct MetricReport {
  double fd = 0.0;
  double is_score = 0.0;
  double kl = 0.0;
  double ta_similarity = 0.0;
  double sim_aa_90 = 0.0;
  double sim_aa_95 = 0.0;

  std::string to_json() const;
  std::string csv_header() const;
  std::string csv_row() const;
};

/// Toy FD between generated grids and the real samples.
double toy_fd(const FeatureNet& fnet, const Tensor& gen_grids, std::span<const SpectrogramSample> real);

/// All six metrics. Generated grid i is paired for KL with the next real sample of the same class.
MetricReport evaluate(const Tensor& gen_grids, std::span<const int> gen_labels,
                      std::span<const SpectrogramSample> real, const FeatureNet& fnet, const ClassProbe& probe);

}  // namespace mcm
