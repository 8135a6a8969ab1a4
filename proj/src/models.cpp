#include "mcm/models.hpp"

#include <algorithm>
#include <cmath>

#include "mcm/error.hpp"
#include "mcm/rng.hpp"

namespace mcm {

namespace {

Tensor normal_init(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

std::shared_ptr<const std::vector<std::size_t>> row_index(std::span<const CondToken> c, int num_classes) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(c.size());
  for (auto tok : c) idx->push_back(tok.row(num_classes));
  return idx;
}

// Gathers whole rows of a [R, cols] table.
Var gather_rows(Var table, std::span<const std::size_t> rows) {
  const std::size_t cols = table.value().cols();
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(rows.size() * cols);
  for (auto r : rows) {
    for (std::size_t c = 0; c < cols; ++c) idx->push_back(r * cols + c);
  }
  return ad::gather(table, std::move(idx), {rows.size(), cols});
}

// Repeats a per-grid index over every grid in a batch.
std::shared_ptr<const std::vector<std::size_t>> batched(const std::vector<std::size_t>& one, std::size_t batch,
                                                        std::size_t stride) {
  auto idx = std::make_shared<std::vector<std::size_t>>(one.size() * batch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < one.size(); ++i) (*idx)[b * one.size() + i] = b * stride + one[i];
  }
  return idx;
}

}  // namespace

// ---------------------------------------------------------------------------
// DenoiserModel

void DenoiserConfig::validate() const {
  if (grid.channels == 0 || grid.height == 0 || grid.width == 0) throw ConfigError("grid dims must be positive");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (num_steps < 1) throw ConfigError("num_steps must be >= 1");
  if (patch_h == 0 || patch_w == 0 || grid.height % patch_h != 0 || grid.width % patch_w != 0) {
    throw ConfigError("patch size must divide the grid height and width");
  }
  if (skip_knots == 0) throw ConfigError("model.skip_knots must be positive");
  if (embed_dim == 0 || hidden == 0 || time_dim == 0 || time_dim % 2 != 0) {
    throw ConfigError("embed_dim/hidden must be positive and time_dim positive and even");
  }
}

ParamSet DenoiserModel::init_params(const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto rng = Rng::split(seed, "denoiser-init");
  const std::size_t dp = cfg.patch_size(), e = cfg.embed_dim, P = cfg.num_patches(), h = cfg.hidden;
  const auto inv = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  ParamSet p;
  p.add("embed.w", normal_init(rng, {dp, e}, inv(dp)));
  p.add("embed.b", Tensor({e}));
  p.add("pos", normal_init(rng, {P, e}, 0.1));
  p.add("global.w", normal_init(rng, {P * e, h}, inv(P * e)));
  p.add("global.b", Tensor({h}));
  p.add("time.w", normal_init(rng, {cfg.time_dim, h}, inv(cfg.time_dim)));
  p.add("time.b", Tensor({h}));
  p.add("class", normal_init(rng, {static_cast<std::size_t>(cfg.num_classes) + 1, h}, 0.5));
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    const std::string b = "block" + std::to_string(i);
    p.add(b + ".w1", normal_init(rng, {h, h}, inv(h)));
    p.add(b + ".b1", Tensor({h}));
    p.add(b + ".w2", normal_init(rng, {h, h}, 0.5 * inv(h)));
    p.add(b + ".b2", Tensor({h}));
  }
  p.add("broadcast.w", normal_init(rng, {h, P * e}, inv(h)));
  p.add("broadcast.b", Tensor({P * e}));
  p.add("token.w", normal_init(rng, {e, e}, inv(e)));
  p.add("token.b", Tensor({e}));
  p.add("out.w", Tensor({e, dp}));
  p.add("out.b", Tensor({dp}));
  for (std::size_t k = 0; k < cfg.skip_knots; ++k) p.add("skip.w" + std::to_string(k), Tensor({cfg.halo_size(), dp}));
  return p;
}

DenoiserModel::DenoiserModel(DenoiserConfig config, std::uint64_t seed)
    : DenoiserModel(config, init_params(config, seed)) {}

DenoiserModel::DenoiserModel(DenoiserConfig config, ParamSet params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  schedule_ = make_schedule(config_.num_steps, config_.beta_min, config_.beta_max);
  if (!params_.same_layout(init_params(config_, 0))) {
    throw StructuralError("parameter layout does not match the denoiser architecture");
  }
  build_indices();
}

void DenoiserModel::build_indices() {
  const auto& g = config_.grid;
  const std::size_t ph = config_.patch_h, pw = config_.patch_w;
  const std::size_t gw = g.width / pw;
  const std::size_t dp = config_.patch_size();
  std::vector<std::size_t> fwd(g.size()), inv(g.size());
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) {
        const std::size_t patch = (y / ph) * gw + (x / pw);
        const std::size_t within = (c * ph + (y % ph)) * pw + (x % pw);
        const std::size_t tok = patch * dp + within;
        const std::size_t grid_i = (c * g.height + y) * g.width + x;
        fwd[tok] = grid_i;
        inv[grid_i] = tok;
      }
    }
  }
  patchify_ = std::make_shared<const std::vector<std::size_t>>(std::move(fwd));
  unpatchify_ = std::make_shared<const std::vector<std::size_t>>(std::move(inv));

  // border cells outside the grid repeat the nearest edge cell
  const std::size_t gh = g.height / ph;
  std::vector<std::size_t> halo;
  halo.reserve(config_.num_patches() * config_.halo_size());
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t dy = 0; dy < ph + 2; ++dy) {
          for (std::size_t dx = 0; dx < pw + 2; ++dx) {
            const auto y = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(py * ph + dy) - 1, 0,
                                                      static_cast<std::ptrdiff_t>(g.height) - 1);
            const auto x = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(px * pw + dx) - 1, 0,
                                                      static_cast<std::ptrdiff_t>(g.width) - 1);
            halo.push_back((c * g.height + static_cast<std::size_t>(y)) * g.width + static_cast<std::size_t>(x));
          }
        }
      }
    }
  }
  halo_ = std::make_shared<const std::vector<std::size_t>>(std::move(halo));

  const std::size_t K = config_.skip_knots;
  knot_weights_ = Tensor({static_cast<std::size_t>(config_.num_steps) + 1, K});
  for (int n = 0; n <= config_.num_steps; ++n) {
    if (K == 1) {
      knot_weights_[static_cast<std::size_t>(n)] = 1.0;
      continue;
    }
    const double pos = static_cast<double>(n) * static_cast<double>(K - 1) / config_.num_steps;
    const std::size_t lo = std::min(static_cast<std::size_t>(pos), K - 2);
    const double frac = pos - static_cast<double>(lo);
    knot_weights_[static_cast<std::size_t>(n) * K + lo] = 1.0 - frac;
    knot_weights_[static_cast<std::size_t>(n) * K + lo + 1] = frac;
  }

  const std::size_t td = config_.time_dim, half = td / 2;
  time_table_ = Tensor({static_cast<std::size_t>(config_.num_steps) + 1, td});
  for (int n = 0; n <= config_.num_steps; ++n) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      time_table_[static_cast<std::size_t>(n) * td + i] = std::sin(n * freq);
      time_table_[static_cast<std::size_t>(n) * td + half + i] = std::cos(n * freq);
    }
  }
}

Var DenoiserModel::forward(Tape& tape, const Bindings& p, Var x, std::span<const int> n,
                           std::span<const CondToken> c) const {
  Var v = forward_v(tape, p, x, n, c);
  Tensor a({n.size()}), s({n.size()});
  for (std::size_t b = 0; b < n.size(); ++b) {
    a[b] = schedule_.sqrt_alpha_bar(n[b]);
    s[b] = schedule_.sqrt_one_minus_alpha_bar(n[b]);
  }
  return ad::add(ad::mul_col(v, tape.constant(a)), ad::mul_col(ad::reshape(x, v.shape()), tape.constant(s)));
}

Var DenoiserModel::forward_v(Tape& tape, const Bindings& p, Var x, std::span<const int> n,
                             std::span<const CondToken> c) const {
  const auto& g = config_.grid;
  const std::size_t B = batch_size(x.value(), g);
  if (n.size() != B || c.size() != B) throw StructuralError("denoise: one timestep and token per grid required");
  const std::size_t P = config_.num_patches(), dp = config_.patch_size(), e = config_.embed_dim;

  std::vector<std::size_t> trows(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (n[b] < 0 || n[b] > config_.num_steps) throw ContractError("timestep outside the embedding table");
    trows[b] = static_cast<std::size_t>(n[b]);
  }
  std::vector<std::size_t> crows(B);
  for (std::size_t b = 0; b < B; ++b) crows[b] = c[b].row(config_.num_classes);

  using namespace ad;
  Var tok = gather(x, batched(*patchify_, B, g.size()), {B * P, dp});
  Var u = add_row(matmul(tok, p.at("embed.w")), p.at("embed.b"));
  u = add(u, tile_rows(p.at("pos"), B));

  Var h = add_row(matmul(reshape(u, {B, P * e}), p.at("global.w")), p.at("global.b"));
  Var temb = gather_rows(tape.constant(time_table_), trows);
  h = add(h, add_row(matmul(temb, p.at("time.w")), p.at("time.b")));
  h = add(h, gather_rows(p.at("class"), crows));
  for (std::size_t i = 0; i < config_.blocks; ++i) {
    const std::string b = "block" + std::to_string(i);
    Var r = add_row(matmul(silu(h), p.at(b + ".w1")), p.at(b + ".b1"));
    r = add_row(matmul(silu(r), p.at(b + ".w2")), p.at(b + ".b2"));
    h = add(h, r);
  }
  Var back = add_row(matmul(silu(h), p.at("broadcast.w")), p.at("broadcast.b"));
  Var v = silu(add(u, reshape(back, {B * P, e})));
  v = silu(add_row(matmul(v, p.at("token.w")), p.at("token.b")));
  Var out = add_row(matmul(v, p.at("out.w")), p.at("out.b"));
  out = add(out, skip_filter(tape, p, x, trows));
  return gather(out, batched(*unpatchify_, B, g.size()), g.batch(B));
}

// Each grid only touches the two knots around its n, so rows are grouped by
// knot, multiplied once per group and put back in batch order. Two slots: the
// knot at or below n and the one above.
Var DenoiserModel::skip_filter(Tape& tape, const Bindings& p, Var x, std::span<const std::size_t> trows) const {
  using namespace ad;
  const auto& g = config_.grid;
  const std::size_t B = trows.size(), P = config_.num_patches(), dh = config_.halo_size(), dp = config_.patch_size();
  const std::size_t K = config_.skip_knots;
  Var halo = gather(x, batched(*halo_, B, g.size()), {B * P, dh});
  Var total;
  for (std::size_t slot = 0; slot < std::min<std::size_t>(K, 2); ++slot) {
    std::vector<std::size_t> knot(B);
    Tensor w({B * P});
    for (std::size_t b = 0; b < B; ++b) {
      const double* kw = knot_weights_.data().data() + trows[b] * K;
      std::size_t lo = 0;
      while (lo + 2 < K && kw[lo] == 0.0) ++lo;
      knot[b] = lo + slot;
      for (std::size_t i = 0; i < P; ++i) w[b * P + i] = kw[lo + slot];
    }
    std::vector<Var> parts;
    std::vector<std::size_t> place(B);  // grid b sits at this row block of the stacked products
    std::size_t filled = 0;
    for (std::size_t k = 0; k < K; ++k) {
      auto idx = std::make_shared<std::vector<std::size_t>>();
      for (std::size_t b = 0; b < B; ++b) {
        if (knot[b] != k) continue;
        place[b] = filled++;
        for (std::size_t i = 0; i < P * dh; ++i) idx->push_back(b * P * dh + i);
      }
      if (idx->empty()) continue;
      const std::size_t rows = idx->size() / dh;
      parts.push_back(matmul(gather(halo, std::move(idx), {rows, dh}), p.at("skip.w" + std::to_string(k))));
    }
    Var stacked = parts.size() == 1 ? parts[0] : concat_rows(parts);
    auto back = std::make_shared<std::vector<std::size_t>>(B * P * dp);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < P * dp; ++i) (*back)[b * P * dp + i] = place[b] * P * dp + i;
    }
    Var y = mul_col(gather(stacked, std::move(back), {B * P, dp}), tape.constant(std::move(w)));
    total = slot == 0 ? y : add(total, y);
  }
  return total;
}

Tensor DenoiserModel::predict_eps(const Tensor& x, std::span<const int> n, std::span<const CondToken> c) const {
  Tape tape;
  auto p = bind_all(tape, params_, false);
  Var out = forward(tape, p, tape.constant(x), n, c);
  return out.value().reshaped(x.shape());
}

// ---------------------------------------------------------------------------
// FeatureNet

FeatureNet::FeatureNet(FeatureNetConfig config, std::uint64_t seed) : config_(std::move(config)) {
  build_layers();
  auto rng = Rng::split(seed, "featurenet-init");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& L = layers_[k];
    const std::size_t fan_in = L.in_c * config_.kernel * config_.kernel;
    params_.add("conv" + std::to_string(k) + ".w",
                normal_init(rng, {fan_in, L.out_c}, config_.gain / std::sqrt(static_cast<double>(fan_in))));
    params_.add("conv" + std::to_string(k) + ".b", normal_init(rng, {L.out_c}, 0.1));
  }
}

FeatureNet::FeatureNet(FeatureNetConfig config, ParamSet params)
    : config_(std::move(config)), params_(std::move(params)) {
  build_layers();
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& L = layers_[k];
    const Shape w{L.in_c * config_.kernel * config_.kernel, L.out_c};
    if (params_.at("conv" + std::to_string(k) + ".w").shape() != w ||
        params_.at("conv" + std::to_string(k) + ".b").shape() != Shape{L.out_c}) {
      throw StructuralError("feature net parameter layout mismatch");
    }
  }
}

void FeatureNet::build_layers() {
  if (config_.channels.empty()) throw ConfigError("feature net needs at least one tap");
  if (config_.kernel == 0 || config_.stride == 0) throw ConfigError("feature net kernel/stride must be positive");
  std::size_t c = config_.grid.channels, h = config_.grid.height, w = config_.grid.width;
  for (std::size_t k = 0; k < config_.channels.size(); ++k) {
    if (h < config_.kernel || w < config_.kernel) throw ConfigError("feature net has too many layers for the grid");
    const std::size_t oh = (h - config_.kernel) / config_.stride + 1;
    const std::size_t ow = (w - config_.kernel) / config_.stride + 1;
    layers_.push_back({c, h, w, config_.channels[k], oh, ow, k == 0});
    c = config_.channels[k];
    h = oh;
    w = ow;
  }
}

std::size_t FeatureNet::tap_dim(std::size_t k) const {
  const auto& L = layers_.at(k);
  return L.out_c * L.out_h * L.out_w;
}

std::size_t FeatureNet::tap_channels(std::size_t k) const { return layers_.at(k).out_c; }

std::vector<std::size_t> FeatureNet::im2col_index(const Layer& L, std::size_t batch) const {
  const std::size_t K = config_.kernel, S = config_.stride;
  const std::size_t in_size = L.in_c * L.in_h * L.in_w;
  const std::size_t patch = L.in_c * K * K;
  std::vector<std::size_t> idx;
  idx.reserve(batch * L.out_h * L.out_w * patch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oy = 0; oy < L.out_h; ++oy) {
      for (std::size_t ox = 0; ox < L.out_w; ++ox) {
        for (std::size_t c = 0; c < L.in_c; ++c) {
          for (std::size_t ky = 0; ky < K; ++ky) {
            for (std::size_t kx = 0; kx < K; ++kx) {
              const std::size_t y = oy * S + ky, x = ox * S + kx;
              const std::size_t off = L.chw_input ? (c * L.in_h + y) * L.in_w + x : (y * L.in_w + x) * L.in_c + c;
              idx.push_back(b * in_size + off);
            }
          }
        }
      }
    }
  }
  return idx;
}

std::vector<Var> FeatureNet::taps(Tape& tape, Var x) const {
  const std::size_t B = batch_size(x.value(), config_.grid);
  std::vector<Var> out;
  Var cur = x;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& L = layers_[k];
    const std::size_t P = L.out_h * L.out_w;
    auto idx = std::make_shared<const std::vector<std::size_t>>(im2col_index(L, B));
    Var cols = ad::gather(cur, idx, {B * P, L.in_c * config_.kernel * config_.kernel});
    Var w = tape.constant(params_.at("conv" + std::to_string(k) + ".w"));
    Var bias = tape.constant(params_.at("conv" + std::to_string(k) + ".b"));
    Var act = ad::tanh(ad::add_row(ad::matmul(cols, w), bias));
    cur = ad::reshape(act, {B, P * L.out_c});
    out.push_back(cur);
  }
  return out;
}

std::vector<Tensor> FeatureNet::features(const Tensor& x) const {
  Tape tape;
  auto taps_v = taps(tape, tape.constant(x));
  std::vector<Tensor> out;
  for (auto& t : taps_v) out.push_back(t.value());
  return out;
}

Tensor FeatureNet::pooled(const Tensor& x) const {
  const auto last = features(x).back();
  const auto& L = layers_.back();
  const std::size_t B = last.rows(), P = L.out_h * L.out_w, C = L.out_c;
  Tensor out({B, C});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t c = 0; c < C; ++c) out[b * C + c] += last[(b * P + p) * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) out[b * C + c] /= static_cast<double>(P);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DiscHeadSet

std::string DiscHeadSet::key(std::size_t k, const char* part) { return "head" + std::to_string(k) + "." + part; }

DiscHeadSet::DiscHeadSet(DiscHeadConfig config, std::uint64_t seed) : config_(std::move(config)) {
  if (config_.input_dims.empty() || config_.hidden == 0 || config_.num_classes < 1) {
    throw ConfigError("discriminator heads need at least one head, positive hidden size and classes");
  }
  auto rng = Rng::split(seed, "disc-init");
  const std::size_t m = config_.hidden;
  for (std::size_t k = 0; k < config_.input_dims.size(); ++k) {
    const std::size_t d = config_.input_dims[k];
    params_.add(key(k, "w1"), normal_init(rng, {m, d}, 1.0 / std::sqrt(static_cast<double>(d))));
    params_.add(key(k, "b1"), Tensor({m}));
    params_.add(key(k, "w2"), normal_init(rng, {m}, 1.0 / std::sqrt(static_cast<double>(m))));
    params_.add(key(k, "b2"), Tensor({1}));
    params_.add(key(k, "proj"), normal_init(rng, {static_cast<std::size_t>(config_.num_classes), m},
                                            0.1 / std::sqrt(static_cast<double>(m))));
  }
}

DiscHeadSet::DiscHeadSet(DiscHeadConfig config, ParamSet params)
    : config_(std::move(config)), params_(std::move(params)) {
  const std::size_t m = config_.hidden;
  for (std::size_t k = 0; k < config_.input_dims.size(); ++k) {
    const std::size_t d = config_.input_dims[k];
    if (params_.at(key(k, "w1")).shape() != Shape{m, d} || params_.at(key(k, "b1")).shape() != Shape{m} ||
        params_.at(key(k, "w2")).shape() != Shape{m} || params_.at(key(k, "b2")).shape() != Shape{1} ||
        params_.at(key(k, "proj")).shape() != Shape{static_cast<std::size_t>(config_.num_classes), m}) {
      throw StructuralError("discriminator head parameter layout mismatch");
    }
  }
}

void DiscHeadSet::check_head(std::size_t k) const {
  if (k >= num_heads()) {
    throw ContractError("head index " + std::to_string(k) + " out of range (" + std::to_string(num_heads()) +
                        " heads)");
  }
}

// Per-row output weights w2 + e_c, [B, hidden]. The null token has no projection row.
Var DiscHeadSet::coefficients(Tape& tape, const Bindings& p, std::size_t k, std::span<const CondToken> c) const {
  const std::size_t m = config_.hidden, B = c.size();
  Var proj = p.at(key(k, "proj"));
  Var padded = ad::concat_rows(std::vector<Var>{proj, tape.constant(Tensor({1, m}))});
  auto rows = row_index(c, config_.num_classes);
  Var e = gather_rows(padded, *rows);
  Var w2 = ad::tile_rows(ad::reshape(p.at(key(k, "w2")), {1, m}), B);
  return ad::add(w2, e);
}

Var DiscHeadSet::score(Tape& tape, const Bindings& p, Var h, std::size_t k, std::span<const CondToken> c) const {
  check_head(k);
  const std::size_t B = h.value().rows();
  if (c.size() != B) throw StructuralError("disc_score: one token per feature row required");
  if (h.value().cols() != config_.input_dims[k]) throw StructuralError("disc_score: feature width mismatch");
  Var z = ad::add_row(ad::matmul(h, p.at(key(k, "w1")), false, true), p.at(key(k, "b1")));
  Var a = config_.activation == HeadActivation::Softplus ? ad::softplus(z) : z;
  Var weighted = ad::mul(a, coefficients(tape, p, k, c));
  Var ones = tape.constant(Tensor({config_.hidden, 1}, 1.0));
  return ad::add_row(ad::matmul(weighted, ones), p.at(key(k, "b2")));
}

Var DiscHeadSet::input_grad(Tape& tape, const Bindings& p, Var h, std::size_t k,
                            std::span<const CondToken> c) const {
  check_head(k);
  const std::size_t B = h.value().rows();
  if (c.size() != B) throw StructuralError("head_input_grad: one token per feature row required");
  if (h.value().cols() != config_.input_dims[k]) throw StructuralError("head_input_grad: feature width mismatch");
  Var coef = coefficients(tape, p, k, c);
  Var s;
  if (config_.activation == HeadActivation::Softplus) {
    Var z = ad::add_row(ad::matmul(h, p.at(key(k, "w1")), false, true), p.at(key(k, "b1")));
    s = ad::mul(ad::sigmoid(z), coef);
  } else {
    s = coef;
  }
  return ad::matmul(s, p.at(key(k, "w1")));
}

Tensor DiscHeadSet::disc_score(const Tensor& h, std::size_t k, std::span<const CondToken> c) const {
  Tape tape;
  auto p = bind_all(tape, params_, false);
  return score(tape, p, tape.constant(h), k, c).value();
}

Tensor DiscHeadSet::head_input_grad(const Tensor& h, std::size_t k, std::span<const CondToken> c) const {
  Tape tape;
  auto p = bind_all(tape, params_, false);
  return input_grad(tape, p, tape.constant(h), k, c).value();
}

}  // namespace mcm
