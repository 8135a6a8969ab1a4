#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "mcm/autodiff.hpp"
#include "mcm/diffusion.hpp"
#include "mcm/grid.hpp"
#include "mcm/params.hpp"

namespace mcm {

struct DenoiserConfig {
  GridShape grid;
  int num_classes = 3;
  int num_steps = 100;  // timestep embeddings cover [0, num_steps]
  double beta_min = 1e-3;
  double beta_max = 0.1;
  std::size_t patch_h = 4;
  std::size_t patch_w = 4;
  std::size_t embed_dim = 64;
  std::size_t hidden = 256;
  std::size_t blocks = 2;
  std::size_t time_dim = 32;
  std::size_t skip_knots = 5;  // timesteps where the local skip filter is pinned

  std::size_t num_patches() const { return (grid.height / patch_h) * (grid.width / patch_w); }
  std::size_t patch_size() const { return grid.channels * patch_h * patch_w; }
  /// Patch plus a one-cell border, the receptive field of the skip filter.
  std::size_t halo_size() const { return grid.channels * (patch_h + 2) * (patch_w + 2); }
  void validate() const;
};

/// Conditional epsilon-prediction backbone shared by teacher and student.
///
/// The grid is cut into non-overlapping patches, each patch is embedded and
/// tagged with a learned position vector. A global residual MLP reads all
/// patch embeddings at once together with the sinusoidal timestep embedding
/// and the class embedding (row `num_classes` is the null token), and its
/// output is broadcast back to every patch. A per-patch MLP plus a linear
/// skip filter produces v = sqrt(ab) eps - sqrt(1 - ab) x0, which is turned
/// into eps = sqrt(ab) v + sqrt(1 - ab) x. The skip reads the patch with a
/// one-cell border (edge cells repeated) and its matrix is interpolated
/// linearly in n between `skip_knots` learned matrices, so how much raw input
/// passes through can follow the noise level. The output and skip layers
/// start at zero, so a fresh model predicts v = 0.
class DenoiserModel : public Denoiser {
 public:
  DenoiserModel(DenoiserConfig config, std::uint64_t seed);
  DenoiserModel(DenoiserConfig config, ParamSet params);

  const DenoiserConfig& config() const noexcept { return config_; }
  const ParamSet& params() const noexcept { return params_; }
  ParamSet& params() noexcept { return params_; }

  GridShape grid_shape() const override { return config_.grid; }

  const NoiseSchedule& schedule() const noexcept { return schedule_; }

  /// Differentiable v prediction. x: [B, C, H, W] (or [B, C*H*W]). Returns [B, C, H, W].
  Var forward_v(Tape& tape, const Bindings& p, Var x, std::span<const int> n, std::span<const CondToken> c) const;
  Var skip_filter(Tape& tape, const Bindings& p, Var x, std::span<const std::size_t> trows) const;
  /// Differentiable eps prediction derived from forward_v.
  Var forward(Tape& tape, const Bindings& p, Var x, std::span<const int> n, std::span<const CondToken> c) const;

  Tensor predict_eps(const Tensor& x, std::span<const int> n, std::span<const CondToken> c) const override;

  /// Fresh parameters in this architecture's layout.
  static ParamSet init_params(const DenoiserConfig& config, std::uint64_t seed);

 private:
  void build_indices();

  DenoiserConfig config_;
  ParamSet params_;
  NoiseSchedule schedule_;
  Tensor time_table_;  // [num_steps + 1, time_dim]
  std::shared_ptr<const std::vector<std::size_t>> patchify_;    // one grid -> [P, patch]
  std::shared_ptr<const std::vector<std::size_t>> unpatchify_;  // [P, patch] -> one grid
  std::shared_ptr<const std::vector<std::size_t>> halo_;        // one grid -> [P, halo]
  Tensor knot_weights_;                                          // [num_steps + 1, skip_knots]
};

struct FeatureNetConfig {
  GridShape grid;
  std::vector<std::size_t> channels = {8, 16, 32};  // one tap per layer
  std::size_t kernel = 2;
  std::size_t stride = 2;
  double gain = 1.5;
};

/// Frozen random strided convolution stack (tanh between layers). Parameters
/// are fixed at construction and are never bound as trainable.
class FeatureNet {
 public:
  FeatureNet(FeatureNetConfig config, std::uint64_t seed);
  FeatureNet(FeatureNetConfig config, ParamSet params);

  std::size_t num_taps() const noexcept { return layers_.size(); }
  std::size_t tap_dim(std::size_t k) const;
  std::size_t tap_channels(std::size_t k) const;
  const ParamSet& params() const noexcept { return params_; }
  const FeatureNetConfig& config() const noexcept { return config_; }

  /// Differentiable w.r.t. x only. Each tap is [B, positions * channels].
  std::vector<Var> taps(Tape& tape, Var x) const;
  std::vector<Tensor> features(const Tensor& x) const;
  /// Final tap averaged over spatial positions: [B, channels.back()].
  Tensor pooled(const Tensor& x) const;

 private:
  struct Layer {
    std::size_t in_c, in_h, in_w, out_c, out_h, out_w;
    bool chw_input;  // first layer reads C,H,W; later layers read H,W,C
  };
  std::vector<std::size_t> im2col_index(const Layer& layer, std::size_t batch) const;
  void build_layers();

  FeatureNetConfig config_;
  ParamSet params_;
  std::vector<Layer> layers_;
};

enum class HeadActivation { Softplus, Identity };

struct DiscHeadConfig {
  std::vector<std::size_t> input_dims;  // one per head
  std::size_t hidden = 32;
  int num_classes = 3;
  HeadActivation activation = HeadActivation::Softplus;
};

/// Lightweight conditional heads D_k(h) = w2 . act(W1 h + b1) + b2 + e_c . act(W1 h + b1),
/// where e_c is the class projection row (zero for the null token).
class DiscHeadSet {
 public:
  DiscHeadSet(DiscHeadConfig config, std::uint64_t seed);
  DiscHeadSet(DiscHeadConfig config, ParamSet params);

  std::size_t num_heads() const noexcept { return config_.input_dims.size(); }
  const DiscHeadConfig& config() const noexcept { return config_; }
  const ParamSet& params() const noexcept { return params_; }
  ParamSet& params() noexcept { return params_; }

  /// Scores [B, 1] for features h [B, d_k].
  Var score(Tape& tape, const Bindings& p, Var h, std::size_t k, std::span<const CondToken> c) const;
  /// Analytic grad of each row's score w.r.t. its features, as differentiable ops: [B, d_k].
  Var input_grad(Tape& tape, const Bindings& p, Var h, std::size_t k, std::span<const CondToken> c) const;

  Tensor disc_score(const Tensor& h, std::size_t k, std::span<const CondToken> c) const;
  Tensor head_input_grad(const Tensor& h, std::size_t k, std::span<const CondToken> c) const;

  static std::string key(std::size_t k, const char* part);

 private:
  void check_head(std::size_t k) const;
  Var coefficients(Tape& tape, const Bindings& p, std::size_t k, std::span<const CondToken> c) const;

  DiscHeadConfig config_;
  ParamSet params_;
};

}  // namespace mcm
