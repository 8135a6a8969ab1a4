#include "mcm/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "mcm/autodiff.hpp"
#include "mcm/error.hpp"
#include "mcm/optim.hpp"
#include "mcm/params.hpp"

namespace mcm {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat as_matrix(const FeatureStats& s) {
  return Eigen::Map<const Mat>(s.cov.data(), static_cast<Eigen::Index>(s.dim()), static_cast<Eigen::Index>(s.dim()));
}

// Symmetric PSD square root with negative eigenvalues clamped to zero.
Mat sqrt_psd(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

std::vector<double> normalized_row(const Tensor& t, std::size_t r) {
  const std::size_t d = t.cols();
  std::vector<double> v(t.ptr() + r * d, t.ptr() + (r + 1) * d);
  double nn = 0.0;
  for (double x : v) nn += x * x;
  nn = std::sqrt(nn);
  if (nn > 0.0) {
    for (double& x : v) x /= nn;
  }
  return v;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

void check_probabilities(const Tensor& p) {
  if (p.rank() != 2) throw StructuralError("probability table must be [N, K]");
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < p.cols(); ++k) {
      const double v = p[r * p.cols() + k];
      if (!(v >= 0.0) || !std::isfinite(v)) throw NumericError("probabilities must be finite and non-negative");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw NumericError("probability row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}

double kl_row(const double* p, const double* q, std::size_t k) {
  double out = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (p[i] > 0.0) out += p[i] * (std::log(p[i]) - std::log(std::max(q[i], 1e-300)));
  }
  return out;
}

}  // namespace

FeatureStats feature_stats(const Tensor& features, double ridge) {
  if (features.rank() != 2) throw StructuralError("feature_stats expects [N, d]");
  const std::size_t n = features.rows(), d = features.cols();
  if (n < 2) throw ContractError("feature_stats needs at least two samples");
  Eigen::Map<const Mat> x(features.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Mat centered = x.rowwise() - mu;
  Mat cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  cov.diagonal().array() += ridge;
  FeatureStats s;
  s.mean.assign(mu.data(), mu.data() + d);
  s.cov.assign(cov.data(), cov.data() + d * d);
  s.count = n;
  return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim() != b.dim() || a.cov.size() != a.dim() * a.dim() || b.cov.size() != b.dim() * b.dim()) {
    throw StructuralError("frechet_distance: feature dimensions differ");
  }
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Mat sa = as_matrix(a), sb = as_matrix(b);
  // Tr (S_a S_b)^(1/2) = Tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), which is symmetric.
  const Mat ra = sqrt_psd(sa);
  const Mat inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * cross);
}

double sim_aa(const Tensor& gen_feats, const Tensor& train_feats, double threshold) {
  if (gen_feats.rank() != 2 || train_feats.rank() != 2) throw StructuralError("sim_aa expects [N, d] features");
  if (gen_feats.cols() != train_feats.cols()) throw StructuralError("sim_aa: feature dimensions differ");
  const std::size_t ng = gen_feats.rows(), nt = train_feats.rows(), d = gen_feats.cols();
  std::vector<std::vector<double>> train;
  train.reserve(nt);
  for (std::size_t j = 0; j < nt; ++j) train.push_back(normalized_row(train_feats, j));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ng; ++i) {
    const auto g = normalized_row(gen_feats, i);
    double best = -2.0;
    for (const auto& t : train) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += g[k] * t[k];
      best = std::max(best, dot);
    }
    if (best > threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ng);
}

Tensor embed(const FeatureNet& fnet, const Tensor& grids, std::span<const double> center) {
  Tensor f = fnet.pooled(grids);
  if (center.size() != f.cols()) throw StructuralError("embed: center has the wrong dimension");
  for (std::size_t r = 0; r < f.rows(); ++r) {
    for (std::size_t k = 0; k < f.cols(); ++k) f[r * f.cols() + k] -= center[k];
  }
  return f;
}

ClassCentroids class_centroids(const FeatureNet& fnet, std::span<const SpectrogramSample> real, int num_classes) {
  if (real.empty()) throw ContractError("class_centroids needs real samples");
  if (num_classes < 1) throw ContractError("num_classes must be positive");
  const Tensor f = fnet.pooled(stack_grids(real));
  const std::size_t d = f.cols();
  ClassCentroids out;
  out.center.assign(d, 0.0);
  for (std::size_t r = 0; r < f.rows(); ++r) {
    for (std::size_t k = 0; k < d; ++k) out.center[k] += f[r * d + k] / static_cast<double>(f.rows());
  }
  out.centroids = Tensor({static_cast<std::size_t>(num_classes), d});
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t r = 0; r < f.rows(); ++r) {
    const int label = real[r].label;
    if (label < 0 || label >= num_classes) throw ContractError("real label out of range");
    const auto l = static_cast<std::size_t>(label);
    ++counts[l];
    for (std::size_t k = 0; k < d; ++k) out.centroids[l * d + k] += f[r * d + k] - out.center[k];
  }
  for (std::size_t l = 0; l < counts.size(); ++l) {
    if (counts[l] == 0) throw ContractError("class " + std::to_string(l) + " has no real samples");
    for (std::size_t k = 0; k < d; ++k) out.centroids[l * d + k] /= static_cast<double>(counts[l]);
  }
  return out;
}

double class_similarity(const Tensor& gen_grids, std::span<const int> labels, const FeatureNet& fnet,
                        const ClassCentroids& centroids) {
  const Tensor f = embed(fnet, gen_grids, centroids.center);
  if (labels.size() != f.rows()) throw StructuralError("class_similarity: one label per grid required");
  if (labels.empty()) throw ContractError("class_similarity of an empty set");
  const std::size_t d = f.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < f.rows(); ++r) {
    if (labels[r] < 0 || labels[r] >= centroids.num_classes()) {
      throw ContractError("unknown label " + std::to_string(labels[r]));
    }
    const auto l = static_cast<std::size_t>(labels[r]);
    total += cosine({f.ptr() + r * d, d}, {centroids.centroids.ptr() + l * d, d});
  }
  return total / static_cast<double>(f.rows());
}

// ---------------------------------------------------------------------------

ClassProbe::ClassProbe(const FeatureNet& fnet, std::span<const SpectrogramSample> real, int num_classes,
                       std::size_t iterations, double lr)
    : fnet_(fnet), num_classes_(num_classes) {
  if (real.empty()) throw ContractError("ClassProbe needs real samples");
  if (num_classes < 2) throw ContractError("ClassProbe needs at least two classes");
  const Tensor pooled = fnet_.pooled(stack_grids(real));
  const std::size_t n = pooled.rows(), d = pooled.cols();
  mean_.assign(d, 0.0);
  inv_std_.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < d; ++k) mean_[k] += pooled[r * d + k] / static_cast<double>(n);
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < d; ++k) {
      const double c = pooled[r * d + k] - mean_[k];
      inv_std_[k] += c * c / static_cast<double>(n);
    }
  }
  for (double& v : inv_std_) v = v > 0.0 ? 1.0 / std::sqrt(v) : 1.0;
  const Tensor x = standardize(pooled);

  // One-hot mask of the labels so the NLL is a masked sum of log-probabilities.
  const auto k = static_cast<std::size_t>(num_classes);
  Tensor onehot({n, k});
  for (std::size_t r = 0; r < n; ++r) {
    if (real[r].label < 0 || real[r].label >= num_classes) throw ContractError("real label out of range");
    onehot[r * k + static_cast<std::size_t>(real[r].label)] = 1.0;
  }
  ParamSet params;
  params.add("w", Tensor({d, k}));
  params.add("b", Tensor({k}));
  auto opt = AdamWState::init(params, {lr, 0.9, 0.999, 1e-8, 0.0});
  for (std::size_t it = 0; it < iterations; ++it) {
    Tape tape;
    auto p = bind_all(tape, params, true);
    Var logits = ad::add_row(ad::matmul(tape.constant(x), p.at("w")), p.at("b"));
    Var nll = ad::scale(ad::sum(ad::mul(ad::log_softmax_rows(logits), tape.constant(onehot))),
                        -1.0 / static_cast<double>(n));
    tape.backward(nll);
    adamw_step(params, collect_grads(tape, p, params), opt);
  }
  w_ = params.at("w");
  b_ = params.at("b");
}

Tensor ClassProbe::standardize(const Tensor& pooled) const {
  Tensor x = pooled;
  const std::size_t d = x.cols();
  if (d != mean_.size()) throw StructuralError("probe feature dimension mismatch");
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < d; ++j) x[r * d + j] = (x[r * d + j] - mean_[j]) * inv_std_[j];
  }
  return x;
}

Tensor ClassProbe::probs(const Tensor& grids) const {
  const Tensor x = standardize(fnet_.pooled(grids));
  const std::size_t n = x.rows(), d = x.cols(), k = static_cast<std::size_t>(num_classes_);
  Tensor out({n, k});
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) {
      double z = b_[c];
      for (std::size_t j = 0; j < d; ++j) z += x[r * d + j] * w_[j * k + c];
      out[r * k + c] = z;
      mx = std::max(mx, z);
    }
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += (out[r * k + c] = std::exp(out[r * k + c] - mx));
    for (std::size_t c = 0; c < k; ++c) out[r * k + c] /= s;
  }
  return out;
}

double ClassProbe::accuracy(std::span<const SpectrogramSample> samples) const {
  if (samples.empty()) throw ContractError("accuracy of an empty set");
  const Tensor p = probs(stack_grids(samples));
  const std::size_t k = p.cols();
  std::size_t right = 0;
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const auto row = p.data().subspan(r * k, k);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == samples[r].label) ++right;
  }
  return static_cast<double>(right) / static_cast<double>(samples.size());
}

double inception_score(const Tensor& probs) {
  check_probabilities(probs);
  const std::size_t n = probs.rows(), k = probs.cols();
  std::vector<double> marginal(k, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < k; ++c) marginal[c] += probs[r * k + c] / static_cast<double>(n);
  }
  double mean_kl = 0.0;
  for (std::size_t r = 0; r < n; ++r) mean_kl += kl_row(probs.ptr() + r * k, marginal.data(), k);
  return std::exp(mean_kl / static_cast<double>(n));
}

double paired_kl(const Tensor& ref_probs, const Tensor& gen_probs) {
  check_probabilities(ref_probs);
  check_probabilities(gen_probs);
  if (ref_probs.shape() != gen_probs.shape()) throw StructuralError("paired_kl: tables differ in shape");
  const std::size_t n = ref_probs.rows(), k = ref_probs.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) total += kl_row(ref_probs.ptr() + r * k, gen_probs.ptr() + r * k, k);
  return total / static_cast<double>(n);
}

std::string MetricReport::to_json() const {
  std::ostringstream os;
  os.precision(17);
  os << "{\n  \"fd\": " << fd << ",\n  \"is_score\": " << is_score << ",\n  \"kl\": " << kl
     << ",\n  \"ta_similarity\": " << ta_similarity << ",\n  \"sim_aa_90\": " << sim_aa_90
     << ",\n  \"sim_aa_95\": " << sim_aa_95 << "\n}\n";
  return os.str();
}

std::string MetricReport::csv_header() const { return "fd,is_score,kl,ta_similarity,sim_aa_90,sim_aa_95\n"; }

std::string MetricReport::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << fd << ',' << is_score << ',' << kl << ',' << ta_similarity << ',' << sim_aa_90 << ',' << sim_aa_95 << '\n';
  return os.str();
}

double toy_fd(const FeatureNet& fnet, const Tensor& gen_grids, std::span<const SpectrogramSample> real) {
  return frechet_distance(feature_stats(fnet.pooled(gen_grids)), feature_stats(fnet.pooled(stack_grids(real))));
}

MetricReport evaluate(const Tensor& gen_grids, std::span<const int> gen_labels,
                      std::span<const SpectrogramSample> real, const FeatureNet& fnet, const ClassProbe& probe) {
  if (real.empty()) throw ContractError("evaluate needs real samples");
  const std::size_t ng = batch_size(gen_grids, fnet.config().grid);
  if (gen_labels.size() != ng) throw StructuralError("evaluate: one label per generated grid required");
  if (ng == 0) throw ContractError("evaluate needs generated samples");
  const Tensor real_grids = stack_grids(real);
  const auto centroids = class_centroids(fnet, real, probe.num_classes());
  const Tensor gen_f = embed(fnet, gen_grids, centroids.center);
  const Tensor real_f = embed(fnet, real_grids, centroids.center);

  MetricReport rep;
  rep.fd = frechet_distance(feature_stats(gen_f), feature_stats(real_f));
  const Tensor gen_p = probe.probs(gen_grids);
  rep.is_score = inception_score(gen_p);

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(probe.num_classes()));
  for (std::size_t j = 0; j < real.size(); ++j) by_class.at(static_cast<std::size_t>(real[j].label)).push_back(j);
  std::vector<std::size_t> cursor(by_class.size(), 0);
  std::vector<Tensor> paired;
  for (std::size_t i = 0; i < ng; ++i) {
    if (gen_labels[i] < 0 || gen_labels[i] >= probe.num_classes()) throw ContractError("unknown generated label");
    const auto& pool = by_class[static_cast<std::size_t>(gen_labels[i])];
    if (pool.empty()) throw ContractError("no real sample of class " + std::to_string(gen_labels[i]));
    auto& at = cursor[static_cast<std::size_t>(gen_labels[i])];
    paired.push_back(real[pool[at % pool.size()]].grid);
    ++at;
  }
  rep.kl = paired_kl(probe.probs(stack_grids(paired)), gen_p);
  rep.ta_similarity = class_similarity(gen_grids, gen_labels, fnet, centroids);
  rep.sim_aa_90 = sim_aa(gen_f, real_f, 0.90);
  rep.sim_aa_95 = sim_aa(gen_f, real_f, 0.95);
  return rep;
}

}  // namespace mcm
