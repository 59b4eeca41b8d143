#pragma once

// Recurrent latent plate-dynamics model.
//
// Per high-level step t, with deterministic state h and stochastic latent z:
//   h_t       = GRU(ELU(W_in [z_{t-1}; a_{t-1}]), h_{t-1})
//   prior     p(z_t | h_t)          = N(mean, exp(logstd))   one ELU hidden layer
//   posterior q(z_t | h_t, e_t)     = N(mean, exp(logstd))   e_t = conv encoder(mask_t)
//   z_t       = mean_q + exp(logstd_q) * eps_t
//   decoder   [h_t; z_t] -> linear -> 2 transposed strided convs -> mask logits-free grid
//   reward    [h_t; z_t] -> ELU hidden -> scalar
// Training minimizes weighted reconstruction squared error (summed over
// pixels), KL(q || p) and reward squared error. Gradients are exact and
// hand-derived; see evaluate().

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "vapors/common.hpp"
#include "vapors/grid.hpp"
#include "vapors/nn.hpp"

namespace vapors {

using nn::Mat;

struct ModelConfig {
  int grid = 64;
  int num_primitives = kDefaultNumPrimitives;
  int kernel1 = 4;
  int kernel2 = 4;
  int enc_channels1 = 16;
  int enc_channels2 = 8;
  int dec_channels2 = 16;  // channels at the coarse decoder resolution
  int dec_channels1 = 16;  // channels at the intermediate decoder resolution
  int deter = 64;
  int stoch = 30;
  int hidden = 128;
  double min_logstd = -5.0;
  double max_logstd = 2.0;
  int overshooting = 1;  // KL prediction distances 1..overshooting; 1 = one-step KL only
  std::uint64_t init_seed = 0;

  int mid() const { return grid / kernel1; }
  int coarse() const { return mid() / kernel2; }
  int feature_dim() const { return coarse() * coarse() * enc_channels2; }
  int latent_dim() const { return deter + stoch; }

  void validate() const {
    if (grid <= 0 || kernel1 <= 0 || kernel2 <= 0 || grid % (kernel1 * kernel2) != 0)
      throw ConfigError("model grid must be divisible by kernel1 * kernel2");
    if (num_primitives <= 0 || deter <= 0 || stoch <= 0 || hidden <= 0 || enc_channels1 <= 0 ||
        enc_channels2 <= 0 || dec_channels1 <= 0 || dec_channels2 <= 0)
      throw ConfigError("model sizes must be positive");
    if (!(min_logstd < max_logstd)) throw ConfigError("min_logstd must be below max_logstd");
    if (overshooting < 1) throw ConfigError("overshooting distance must be >= 1");
  }

  // Small configuration used for finite-difference gradient checks.
  static ModelConfig miniature() {
    ModelConfig c;
    c.grid = 8;
    c.kernel1 = 2;
    c.kernel2 = 2;
    c.enc_channels1 = 3;
    c.enc_channels2 = 2;
    c.dec_channels2 = 3;
    c.dec_channels1 = 2;
    c.deter = 8;
    c.stoch = 4;
    c.hidden = 6;
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamId : int {
  Enc1W, Enc1B, Enc2W, Enc2B,
  InW, InB, GruWx, GruBx, GruWh, GruBh,
  Prior1W, Prior1B, Prior2W, Prior2B,
  Post1W, Post1B, Post2W, Post2B,
  Dec0W, Dec0B, Dec1W, Dec1B, Dec2W, Dec2B,
  Rew1W, Rew1B, Rew2W, Rew2B,
  Count
};

inline constexpr int kNumParams = static_cast<int>(ParamId::Count);

inline constexpr std::array<std::string_view, kNumParams> kParamNames = {
    "encoder.conv1.weight", "encoder.conv1.bias", "encoder.conv2.weight", "encoder.conv2.bias",
    "core.input.weight", "core.input.bias", "core.gru.wx", "core.gru.bx", "core.gru.wh", "core.gru.bh",
    "prior.hidden.weight", "prior.hidden.bias", "prior.out.weight", "prior.out.bias",
    "posterior.hidden.weight", "posterior.hidden.bias", "posterior.out.weight", "posterior.out.bias",
    "decoder.linear.weight", "decoder.linear.bias", "decoder.deconv1.weight", "decoder.deconv1.bias",
    "decoder.deconv2.weight", "decoder.deconv2.bias",
    "reward.hidden.weight", "reward.hidden.bias", "reward.out.weight", "reward.out.bias"};

struct Shape {
  int rows = 0;
  int cols = 0;
  friend bool operator==(Shape, Shape) = default;
};

inline Shape param_shape(const ModelConfig& c, ParamId id) {
  const int k1 = c.kernel1 * c.kernel1;
  const int k2 = c.kernel2 * c.kernel2;
  const int coarse_px = c.coarse() * c.coarse();
  switch (id) {
    case ParamId::Enc1W: return {c.enc_channels1, k1};
    case ParamId::Enc1B: return {c.enc_channels1, 1};
    case ParamId::Enc2W: return {c.enc_channels2, k2 * c.enc_channels1};
    case ParamId::Enc2B: return {c.enc_channels2, 1};
    case ParamId::InW: return {c.deter, c.stoch + c.num_primitives};
    case ParamId::InB: return {c.deter, 1};
    case ParamId::GruWx: return {3 * c.deter, c.deter};
    case ParamId::GruBx: return {3 * c.deter, 1};
    case ParamId::GruWh: return {3 * c.deter, c.deter};
    case ParamId::GruBh: return {3 * c.deter, 1};
    case ParamId::Prior1W: return {c.hidden, c.deter};
    case ParamId::Prior1B: return {c.hidden, 1};
    case ParamId::Prior2W: return {2 * c.stoch, c.hidden};
    case ParamId::Prior2B: return {2 * c.stoch, 1};
    case ParamId::Post1W: return {c.hidden, c.deter + c.feature_dim()};
    case ParamId::Post1B: return {c.hidden, 1};
    case ParamId::Post2W: return {2 * c.stoch, c.hidden};
    case ParamId::Post2B: return {2 * c.stoch, 1};
    case ParamId::Dec0W: return {coarse_px * c.dec_channels2, c.latent_dim()};
    case ParamId::Dec0B: return {coarse_px * c.dec_channels2, 1};
    case ParamId::Dec1W: return {k2 * c.dec_channels1, c.dec_channels2};
    case ParamId::Dec1B: return {k2 * c.dec_channels1, 1};
    case ParamId::Dec2W: return {k1, c.dec_channels1};
    case ParamId::Dec2B: return {k1, 1};
    case ParamId::Rew1W: return {c.hidden, c.latent_dim()};
    case ParamId::Rew1B: return {c.hidden, 1};
    case ParamId::Rew2W: return {1, c.hidden};
    case ParamId::Rew2B: return {1, 1};
    case ParamId::Count: break;
  }
  throw ContractViolation("invalid parameter id");
}

template <typename S>
struct ModelParams {
  ModelConfig config;
  std::array<Mat<S>, kNumParams> tensors;

  Mat<S>& operator[](ParamId id) { return tensors[static_cast<int>(id)]; }
  const Mat<S>& operator[](ParamId id) const { return tensors[static_cast<int>(id)]; }

  static ModelParams zeros(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    for (int i = 0; i < kNumParams; ++i) {
      const Shape s = param_shape(cfg, static_cast<ParamId>(i));
      p.tensors[i] = Mat<S>::Zero(s.rows, s.cols);
    }
    return p;
  }

  /// Weights ~ N(0, 1/fan_in), biases 0, reward output layer 0.
  static ModelParams initialize(const ModelConfig& cfg) {
    ModelParams p = zeros(cfg);
    std::mt19937_64 rng(cfg.init_seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int i = 0; i < kNumParams; ++i) {
      const auto id = static_cast<ParamId>(i);
      auto& t = p.tensors[i];
      if (t.cols() == 1 || id == ParamId::Rew2W) continue;
      const double scale = 1.0 / std::sqrt(static_cast<double>(t.cols()));
      for (Eigen::Index c = 0; c < t.cols(); ++c)
        for (Eigen::Index r = 0; r < t.rows(); ++r) t(r, c) = static_cast<S>(scale * n(rng));
    }
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }

  bool all_finite() const {
    return std::all_of(tensors.begin(), tensors.end(), [](const Mat<S>& t) { return t.allFinite(); });
  }

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.config = config;
    for (int i = 0; i < kNumParams; ++i) out.tensors[i] = tensors[i].template cast<T>();
    return out;
  }
};

/// One column per batch element.
template <typename S>
struct LatentState {
  Mat<S> deterministic;
  Mat<S> mean;
  Mat<S> logstd;
  Mat<S> sample;

  Mat<S> features() const { return nn::vstack(deterministic, sample); }
};

struct Sequence {
  std::vector<ObsGrid> obs;          // L masks
  std::vector<int> primitives;       // L - 1 primitive indices, primitives[t] leads from obs[t] to obs[t+1]
  std::vector<double> rewards;       // L; rewards[t] earned on reaching obs[t]; rewards[0] unused
  std::vector<std::uint8_t> valid;   // L; 0 marks padding after an episode ended
};

struct TrainBatch {
  std::vector<Sequence> sequences;
  std::uint64_t noise_seed = 0;
  std::int64_t batch_id = 0;

  int size() const { return static_cast<int>(sequences.size()); }
  int length() const { return sequences.empty() ? 0 : static_cast<int>(sequences.front().obs.size()); }
};

struct LossWeights {
  double recon = 1.0;
  double kl = 1.0;
  double reward = 1.0;
};

struct LossReport {
  double recon = 0.0;
  double kl = 0.0;
  double reward = 0.0;
  double total = 0.0;
};

namespace detail {

template <typename S>
struct HeadCache {
  Mat<S> input, hidden, raw, mean, logstd;
};

template <typename S>
void head_forward(const ModelParams<S>& p, ParamId w1, const Mat<S>& input, HeadCache<S>& c) {
  const auto id = static_cast<int>(w1);
  const auto& cfg = p.config;
  c.input = input;
  c.hidden = nn::elu<S>(nn::affine(p.tensors[id], p.tensors[id + 1], input));
  c.raw = nn::affine(p.tensors[id + 2], p.tensors[id + 3], c.hidden);
  c.mean = c.raw.topRows(cfg.stoch);
  const S lo = static_cast<S>(cfg.min_logstd), hi = static_cast<S>(cfg.max_logstd);
  c.logstd = c.raw.bottomRows(cfg.stoch).unaryExpr([lo, hi](S v) { return std::clamp(v, lo, hi); });
}

template <typename S>
Mat<S> head_backward(const ModelParams<S>& p, ParamId w1, const HeadCache<S>& c, const Mat<S>& dmean,
                     const Mat<S>& dlogstd, ModelParams<S>& g) {
  const auto id = static_cast<int>(w1);
  const auto& cfg = p.config;
  const S lo = static_cast<S>(cfg.min_logstd), hi = static_cast<S>(cfg.max_logstd);
  Mat<S> draw(2 * cfg.stoch, dmean.cols());
  draw.topRows(cfg.stoch) = dmean;
  draw.bottomRows(cfg.stoch) =
      dlogstd.binaryExpr(c.raw.bottomRows(cfg.stoch), [lo, hi](S d, S v) { return v > lo && v < hi ? d : S(0); });
  const Mat<S> dhidden = nn::affine_backward(p.tensors[id + 2], c.hidden, draw, g.tensors[id + 2], g.tensors[id + 3]);
  return nn::affine_backward(p.tensors[id], c.input, nn::elu_backward<S>(c.hidden, dhidden), g.tensors[id],
                             g.tensors[id + 1]);
}

template <typename S>
struct TransitionCache {
  Mat<S> input, embedded;
  nn::GruCache<S> gru;
};

template <typename S>
Mat<S> transition_forward(const ModelParams<S>& p, const Mat<S>& z_prev, const Mat<S>& a_prev, const Mat<S>& h_prev,
                          TransitionCache<S>& c) {
  c.input = nn::vstack(z_prev, a_prev);
  c.embedded = nn::elu<S>(nn::affine(p[ParamId::InW], p[ParamId::InB], c.input));
  return nn::gru_forward(p[ParamId::GruWx], p[ParamId::GruBx], p[ParamId::GruWh], p[ParamId::GruBh], c.embedded,
                         h_prev, c.gru);
}

// Returns dz_prev; writes dh_prev.
template <typename S>
Mat<S> transition_backward(const ModelParams<S>& p, const TransitionCache<S>& c, const Mat<S>& dh, ModelParams<S>& g,
                           Mat<S>& dh_prev) {
  const Mat<S> demb = nn::gru_backward(p[ParamId::GruWx], p[ParamId::GruWh], c.gru, dh, g[ParamId::GruWx],
                                       g[ParamId::GruBx], g[ParamId::GruWh], g[ParamId::GruBh], dh_prev);
  const Mat<S> dinput = nn::affine_backward(p[ParamId::InW], c.input, nn::elu_backward<S>(c.embedded, demb),
                                            g[ParamId::InW], g[ParamId::InB]);
  return dinput.topRows(p.config.stoch);
}

template <typename S>
struct EncoderCache {
  Mat<S> patches1, act1, patches2, feature;
};

template <typename S>
nn::PatchConv<S> conv1_layer(const ModelConfig& c) {
  return {1, c.enc_channels1, c.grid, c.grid, c.kernel1};
}
template <typename S>
nn::PatchConv<S> conv2_layer(const ModelConfig& c) {
  return {c.enc_channels1, c.enc_channels2, c.mid(), c.mid(), c.kernel2};
}
template <typename S>
nn::PatchDeconv<S> deconv1_layer(const ModelConfig& c) {
  return {c.dec_channels2, c.dec_channels1, c.coarse(), c.coarse(), c.kernel2};
}
template <typename S>
nn::PatchDeconv<S> deconv2_layer(const ModelConfig& c) {
  return {c.dec_channels1, 1, c.mid(), c.mid(), c.kernel1};
}

template <typename S>
const Mat<S>& encode_forward(const ModelParams<S>& p, const Mat<S>& obs, EncoderCache<S>& c) {
  const auto& cfg = p.config;
  c.act1 = nn::elu<S>(conv1_layer<S>(cfg).forward(p[ParamId::Enc1W], p[ParamId::Enc1B], obs, c.patches1));
  c.feature = nn::elu<S>(conv2_layer<S>(cfg).forward(p[ParamId::Enc2W], p[ParamId::Enc2B], c.act1, c.patches2));
  return c.feature;
}

template <typename S>
void encode_backward(const ModelParams<S>& p, const EncoderCache<S>& c, const Mat<S>& dfeature, ModelParams<S>& g) {
  const auto& cfg = p.config;
  const Mat<S> dact1 = conv2_layer<S>(cfg).backward(p[ParamId::Enc2W], c.patches2, nn::elu_backward<S>(c.feature, dfeature),
                                                    g[ParamId::Enc2W], g[ParamId::Enc2B], true);
  conv1_layer<S>(cfg).backward(p[ParamId::Enc1W], c.patches1, nn::elu_backward<S>(c.act1, dact1), g[ParamId::Enc1W],
                               g[ParamId::Enc1B], false);
}

template <typename S>
struct DecoderCache {
  Mat<S> input, coarse, cols1, mid, cols2;
};

template <typename S>
Mat<S> decode_forward(const ModelParams<S>& p, const Mat<S>& latent, DecoderCache<S>& c) {
  const auto& cfg = p.config;
  c.input = latent;
  c.coarse = nn::elu<S>(nn::affine(p[ParamId::Dec0W], p[ParamId::Dec0B], latent));
  c.mid = nn::elu<S>(deconv1_layer<S>(cfg).forward(p[ParamId::Dec1W], p[ParamId::Dec1B], c.coarse, c.cols1));
  return deconv2_layer<S>(cfg).forward(p[ParamId::Dec2W], p[ParamId::Dec2B], c.mid, c.cols2);
}

template <typename S>
Mat<S> decode_backward(const ModelParams<S>& p, const DecoderCache<S>& c, const Mat<S>& dout, ModelParams<S>& g) {
  const auto& cfg = p.config;
  const Mat<S> dmid = deconv2_layer<S>(cfg).backward(p[ParamId::Dec2W], c.cols2, dout, g[ParamId::Dec2W], g[ParamId::Dec2B]);
  const Mat<S> dcoarse = deconv1_layer<S>(cfg).backward(p[ParamId::Dec1W], c.cols1, nn::elu_backward<S>(c.mid, dmid),
                                                        g[ParamId::Dec1W], g[ParamId::Dec1B]);
  return nn::affine_backward(p[ParamId::Dec0W], c.input, nn::elu_backward<S>(c.coarse, dcoarse), g[ParamId::Dec0W],
                             g[ParamId::Dec0B]);
}

template <typename S>
struct RewardCache {
  Mat<S> input, hidden;
};

template <typename S>
Mat<S> reward_forward(const ModelParams<S>& p, const Mat<S>& latent, RewardCache<S>& c) {
  c.input = latent;
  c.hidden = nn::elu<S>(nn::affine(p[ParamId::Rew1W], p[ParamId::Rew1B], latent));
  return nn::affine(p[ParamId::Rew2W], p[ParamId::Rew2B], c.hidden);
}

template <typename S>
Mat<S> reward_backward(const ModelParams<S>& p, const RewardCache<S>& c, const Mat<S>& dout, ModelParams<S>& g) {
  const Mat<S> dhidden = nn::affine_backward(p[ParamId::Rew2W], c.hidden, dout, g[ParamId::Rew2W], g[ParamId::Rew2B]);
  return nn::affine_backward(p[ParamId::Rew1W], c.input, nn::elu_backward<S>(c.hidden, dhidden), g[ParamId::Rew1W],
                             g[ParamId::Rew1B]);
}

template <typename S>
Mat<S> reparameterize(const Mat<S>& mean, const Mat<S>& logstd, const Mat<S>& eps) {
  return mean + logstd.array().exp().matrix().cwiseProduct(eps);
}

// Gradient of z = mean + exp(logstd) * eps w.r.t. logstd.
template <typename S>
Mat<S> reparam_logstd_grad(const Mat<S>& logstd, const Mat<S>& eps, const Mat<S>& dz) {
  return dz.cwiseProduct(logstd.array().exp().matrix()).cwiseProduct(eps);
}

/// Elementwise KL(q || p) between diagonal Gaussians, and its partials.
template <typename S>
struct KlTerms {
  Mat<S> value, dq_mean, dq_logstd, dp_mean, dp_logstd;
};

template <typename S>
KlTerms<S> gaussian_kl(const Mat<S>& qm, const Mat<S>& qls, const Mat<S>& pm, const Mat<S>& pls) {
  KlTerms<S> k;
  const auto qvar = (S(2) * qls.array()).exp();
  const auto pvar = (S(2) * pls.array()).exp();
  const auto diff = (qm - pm).array();
  k.value = (pls.array() - qls.array() + (qvar + diff.square()) / (S(2) * pvar) - S(0.5)).matrix();
  k.dq_mean = (diff / pvar).matrix();
  k.dp_mean = -k.dq_mean;
  k.dq_logstd = (qvar / pvar - S(1)).matrix();
  k.dp_logstd = (S(1) - (qvar + diff.square()) / pvar).matrix();
  return k;
}

template <typename S>
Mat<S> obs_matrix(const std::vector<const ObsGrid*>& masks, int grid) {
  Mat<S> m(static_cast<Eigen::Index>(grid) * grid, static_cast<Eigen::Index>(masks.size()));
  for (std::size_t b = 0; b < masks.size(); ++b) {
    const ObsGrid& g = *masks[b];
    if (g.width() != grid || g.height() != grid) throw ContractViolation("mask size does not match model grid");
    for (std::size_t i = 0; i < g.size(); ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) = g[i] ? S(1) : S(0);
  }
  return m;
}

template <typename S>
Mat<S> one_hot(const std::vector<int>& indices, int k) {
  Mat<S> m = Mat<S>::Zero(k, static_cast<Eigen::Index>(indices.size()));
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] < 0) continue;  // no action
    if (indices[b] >= k) throw ContractViolation("primitive index exceeds model primitive count");
    m(indices[b], static_cast<Eigen::Index>(b)) = S(1);
  }
  return m;
}

template <typename S>
Mat<S> standard_normal(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat<S> m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = static_cast<S>(n(rng));
  return m;
}

}  // namespace detail

/// Filtered posterior latents for one observation sequence. `primitives[t]`
/// leads from obs[t] to obs[t+1]; the first step sees a zero action. Without
/// a seed the posterior means are used as samples.
template <typename S>
std::vector<LatentState<S>> posterior_encode(const std::vector<ObsGrid>& obs, const std::vector<int>& primitives,
                                             const ModelParams<S>& p,
                                             std::optional<std::uint64_t> sampling_seed = std::nullopt) {
  const auto& cfg = p.config;
  if (obs.empty()) throw ContractViolation("posterior_encode needs at least one observation");
  if (primitives.size() + 1 != obs.size()) throw ContractViolation("need exactly one primitive between observations");
  std::optional<std::mt19937_64> rng;
  if (sampling_seed) rng.emplace(*sampling_seed);

  std::vector<LatentState<S>> out;
  Mat<S> h = Mat<S>::Zero(cfg.deter, 1);
  Mat<S> z = Mat<S>::Zero(cfg.stoch, 1);
  for (std::size_t t = 0; t < obs.size(); ++t) {
    const Mat<S> a = t == 0 ? Mat<S>::Zero(cfg.num_primitives, 1)
                            : detail::one_hot<S>({primitives[t - 1]}, cfg.num_primitives);
    detail::TransitionCache<S> tc;
    h = detail::transition_forward(p, z, a, h, tc);
    detail::EncoderCache<S> ec;
    const Mat<S> e = detail::encode_forward(p, detail::obs_matrix<S>({&obs[t]}, cfg.grid), ec);
    detail::HeadCache<S> post;
    detail::head_forward(p, ParamId::Post1W, nn::vstack(h, e), post);
    const Mat<S> eps = rng ? detail::standard_normal<S>(*rng, cfg.stoch, 1) : Mat<S>::Zero(cfg.stoch, 1);
    z = detail::reparameterize(post.mean, post.logstd, eps);
    out.push_back({h, post.mean, post.logstd, z});
  }
  return out;
}

/// Prior step from `prev` under primitive index per column. `eps` (stoch x B)
/// defaults to zero, i.e. the sample is the prior mean.
template <typename S>
LatentState<S> prior_transition(const LatentState<S>& prev, const std::vector<int>& primitives, const ModelParams<S>& p,
                                const Mat<S>* eps = nullptr) {
  const auto& cfg = p.config;
  if (static_cast<Eigen::Index>(primitives.size()) != prev.deterministic.cols())
    throw ContractViolation("one primitive per latent column required");
  for (int k : primitives)
    if (k < 0 || k >= cfg.num_primitives) throw ContractViolation("primitive must be a valid one-hot index");
  detail::TransitionCache<S> tc;
  LatentState<S> next;
  next.deterministic =
      detail::transition_forward(p, prev.sample, detail::one_hot<S>(primitives, cfg.num_primitives), prev.deterministic, tc);
  detail::HeadCache<S> prior;
  detail::head_forward(p, ParamId::Prior1W, next.deterministic, prior);
  next.mean = prior.mean;
  next.logstd = prior.logstd;
  next.sample = eps ? detail::reparameterize(prior.mean, prior.logstd, *eps) : prior.mean;
  return next;
}

template <typename S>
LatentState<S> prior_transition(const LatentState<S>& prev, int primitive, const ModelParams<S>& p) {
  return prior_transition(prev, std::vector<int>{primitive}, p);
}

/// Predicted grid for the first latent column.
template <typename S>
GrayGrid decode_obs(const LatentState<S>& latent, const ModelParams<S>& p) {
  const auto& cfg = p.config;
  detail::DecoderCache<S> c;
  const Mat<S> out = detail::decode_forward(p, latent.features(), c);
  GrayGrid g(cfg.grid, cfg.grid);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(out(static_cast<Eigen::Index>(i), 0));
  return g;
}

/// Predicted reward per latent column.
template <typename S>
Mat<S> decode_rewards(const LatentState<S>& latent, const ModelParams<S>& p) {
  detail::RewardCache<S> c;
  return detail::reward_forward(p, latent.features(), c);
}

template <typename S>
double decode_reward(const LatentState<S>& latent, const ModelParams<S>& p) {
  return static_cast<double>(decode_rewards(latent, p)(0, 0));
}

/// Loss over a batch and, when `grad` is non-null, its exact gradient
/// (accumulated into `grad`, which must be zero-initialized by the caller).
///
/// recon  = mean over valid steps of the per-image sum of squared errors
/// kl     = mean over prediction distances d = 1..overshooting of the mean
///          per-step KL(q_t || p_{t|t-d}), summed over latent dimensions.
///          Gradients flow into both the posterior and the open-loop prior.
/// reward = mean over valid steps t >= 1 of (predicted - actual)^2
template <typename S>
LossReport evaluate(const TrainBatch& batch, const ModelParams<S>& p, const LossWeights& weights,
                    ModelParams<S>* grad = nullptr) {
  using namespace detail;
  const auto& cfg = p.config;
  const int B = batch.size();
  const int L = batch.length();
  if (B == 0 || L == 0) throw ContractViolation("empty training batch");
  for (const auto& s : batch.sequences) {
    if (static_cast<int>(s.obs.size()) != L || static_cast<int>(s.primitives.size()) != L - 1 ||
        static_cast<int>(s.rewards.size()) != L || static_cast<int>(s.valid.size()) != L)
      throw ContractViolation("inconsistent sequence lengths in batch");
  }

  // ---- inputs ----
  std::vector<Mat<S>> obs(L), act(L), rew(L), valid(L);
  for (int t = 0; t < L; ++t) {
    std::vector<const ObsGrid*> masks;
    std::vector<int> prims;
    rew[t].resize(1, B);
    valid[t].resize(1, B);
    for (int b = 0; b < B; ++b) {
      const auto& s = batch.sequences[b];
      masks.push_back(&s.obs[t]);
      prims.push_back(t == 0 ? -1 : s.primitives[t - 1]);
      rew[t](0, b) = static_cast<S>(s.rewards[t]);
      valid[t](0, b) = s.valid[t] ? S(1) : S(0);
    }
    obs[t] = obs_matrix<S>(masks, cfg.grid);
    act[t] = one_hot<S>(prims, cfg.num_primitives);
  }

  std::mt19937_64 noise_rng(batch.noise_seed);
  std::vector<Mat<S>> eps(L);
  for (int t = 0; t < L; ++t) eps[t] = standard_normal<S>(noise_rng, cfg.stoch, B);

  // ---- posterior rollout ----
  struct Step {
    TransitionCache<S> trans;
    Mat<S> h;
    HeadCache<S> prior, post;
    EncoderCache<S> enc;
    Mat<S> z, xhat, rhat;
    DecoderCache<S> dec;
    RewardCache<S> rew;
  };
  std::vector<Step> steps(L);
  Mat<S> h_prev = Mat<S>::Zero(cfg.deter, B);
  Mat<S> z_prev = Mat<S>::Zero(cfg.stoch, B);
  for (int t = 0; t < L; ++t) {
    Step& st = steps[t];
    st.h = transition_forward(p, z_prev, act[t], h_prev, st.trans);
    head_forward(p, ParamId::Prior1W, st.h, st.prior);
    const Mat<S>& e = encode_forward(p, obs[t], st.enc);
    head_forward(p, ParamId::Post1W, nn::vstack(st.h, e), st.post);
    st.z = reparameterize(st.post.mean, st.post.logstd, eps[t]);
    const Mat<S> latent = nn::vstack(st.h, st.z);
    st.xhat = decode_forward(p, latent, st.dec);
    st.rhat = reward_forward(p, latent, st.rew);
    h_prev = st.h;
    z_prev = st.z;
  }

  // ---- open-loop prior chains for distances >= 2 ----
  // Chain rooted at t samples from prior_t and predicts t+1, ..., t+J.
  struct ChainLink {
    Mat<S> eps_prev, z_prev;
    TransitionCache<S> trans;
    Mat<S> h;
    HeadCache<S> prior;
  };
  const int max_extra = cfg.overshooting - 1;
  std::vector<std::vector<ChainLink>> chains(L);
  for (int t = 0; t + 1 < L && max_extra > 0; ++t) {
    const int links = std::min(max_extra, L - 1 - t);
    const HeadCache<S>* from = &steps[t].prior;
    Mat<S> h = steps[t].h;
    for (int j = 1; j <= links; ++j) {
      ChainLink link;
      link.eps_prev = standard_normal<S>(noise_rng, cfg.stoch, B);
      link.z_prev = reparameterize(from->mean, from->logstd, link.eps_prev);
      link.h = transition_forward(p, link.z_prev, act[t + j], h, link.trans);
      head_forward(p, ParamId::Prior1W, link.h, link.prior);
      h = link.h;
      chains[t].push_back(std::move(link));
      from = &chains[t].back().prior;
    }
  }

  // ---- losses ----
  double n_valid = 0.0, n_reward = 0.0;
  for (int t = 0; t < L; ++t) {
    n_valid += static_cast<double>(valid[t].sum());
    if (t >= 1) n_reward += static_cast<double>(valid[t].sum());
  }
  if (n_valid == 0.0) throw ContractViolation("batch has no valid steps");

  std::vector<double> pairs(cfg.overshooting + 1, 0.0);
  pairs[1] = n_valid;
  for (int t = 0; t < L; ++t)
    for (std::size_t j = 1; j <= chains[t].size(); ++j) pairs[j + 1] += static_cast<double>(valid[t + j].sum());
  int active_distances = 0;
  for (int d = 1; d <= cfg.overshooting; ++d) active_distances += pairs[d] > 0.0;

  LossReport rep;
  std::vector<double> kl_sums(cfg.overshooting + 1, 0.0);
  std::vector<KlTerms<S>> kl_main(L);
  std::vector<std::vector<KlTerms<S>>> kl_chain(L);
  for (int t = 0; t < L; ++t) {
    const Step& st = steps[t];
    const Mat<S> diff = st.xhat - obs[t];
    rep.recon += static_cast<double>((diff.array().square().colwise().sum() * valid[t].array()).sum());
    kl_main[t] = gaussian_kl(st.post.mean, st.post.logstd, st.prior.mean, st.prior.logstd);
    kl_sums[1] += static_cast<double>((kl_main[t].value.colwise().sum().array() * valid[t].array()).sum());
    if (t >= 1) {
      const Mat<S> rd = st.rhat - rew[t];
      rep.reward += static_cast<double>((rd.array().square() * valid[t].array()).sum());
    }
    for (std::size_t j = 1; j <= chains[t].size(); ++j) {
      const int target = t + static_cast<int>(j);
      const auto& link = chains[t][j - 1];
      kl_chain[t].push_back(
          gaussian_kl(steps[target].post.mean, steps[target].post.logstd, link.prior.mean, link.prior.logstd));
      kl_sums[j + 1] +=
          static_cast<double>((kl_chain[t].back().value.colwise().sum().array() * valid[target].array()).sum());
    }
  }
  rep.recon /= n_valid;
  for (int d = 1; d <= cfg.overshooting; ++d)
    if (pairs[d] > 0.0) rep.kl += kl_sums[d] / pairs[d] / active_distances;
  rep.reward = n_reward > 0.0 ? rep.reward / n_reward : 0.0;
  rep.total = weights.recon * rep.recon + weights.kl * rep.kl + weights.reward * rep.reward;

  if (!grad) return rep;

  // ---- backward ----
  ModelParams<S>& g = *grad;
  auto kl_scale = [&](int d) { return static_cast<S>(weights.kl / (pairs[d] * active_distances)); };
  const S recon_scale = static_cast<S>(2.0 * weights.recon / n_valid);
  const S reward_scale = n_reward > 0.0 ? static_cast<S>(2.0 * weights.reward / n_reward) : S(0);

  // Row-broadcast of a 1 x B weight onto an r x B matrix.
  auto masked = [](const Mat<S>& m, const Mat<S>& w, S scale) {
    return Mat<S>((m.array().rowwise() * (w.array() * scale).row(0)).matrix());
  };

  // KL terms of open-loop predictions also pull on the posterior they target.
  std::vector<Mat<S>> dq_mean_extra(L, Mat<S>::Zero(cfg.stoch, B));
  std::vector<Mat<S>> dq_logstd_extra(L, Mat<S>::Zero(cfg.stoch, B));
  for (int t = 0; t < L; ++t)
    for (std::size_t j = 1; j <= kl_chain[t].size(); ++j) {
      const int target = t + static_cast<int>(j);
      const auto& k = kl_chain[t][j - 1];
      dq_mean_extra[target] += masked(k.dq_mean, valid[target], kl_scale(static_cast<int>(j) + 1));
      dq_logstd_extra[target] += masked(k.dq_logstd, valid[target], kl_scale(static_cast<int>(j) + 1));
    }

  Mat<S> dh_next = Mat<S>::Zero(cfg.deter, B);  // gradient reaching h_t from step t+1
  Mat<S> dz_next = Mat<S>::Zero(cfg.stoch, B);  // gradient reaching z_t from step t+1
  for (int t = L - 1; t >= 0; --t) {
    const Step& st = steps[t];
    Mat<S> dh = dh_next;
    Mat<S> dz = dz_next;
    Mat<S> dprior_mean = Mat<S>::Zero(cfg.stoch, B);
    Mat<S> dprior_logstd = Mat<S>::Zero(cfg.stoch, B);

    // Chains rooted here: they read h_t and sample from prior_t.
    if (!chains[t].empty()) {
      const auto& chain = chains[t];
      Mat<S> dh_link = Mat<S>::Zero(cfg.deter, B);
      Mat<S> dz_link = Mat<S>::Zero(cfg.stoch, B);  // gradient on the sample produced by link j's prior
      for (int j = static_cast<int>(chain.size()); j >= 1; --j) {
        const auto& link = chain[j - 1];
        const int target = t + j;
        const auto& k = kl_chain[t][j - 1];
        const S s = kl_scale(j + 1);
        Mat<S> dpm = masked(k.dp_mean, valid[target], s) + dz_link;
        Mat<S> dpl = masked(k.dp_logstd, valid[target], s);
        if (j < static_cast<int>(chain.size())) {
          dpl += reparam_logstd_grad(link.prior.logstd, chain[j].eps_prev, dz_link);
        }
        dh_link += head_backward(p, ParamId::Prior1W, link.prior, dpm, dpl, g);
        Mat<S> dh_prev;
        dz_link = transition_backward(p, link.trans, dh_link, g, dh_prev);
        dh_link = dh_prev;
      }
      dh += dh_link;
      dprior_mean += dz_link;
      dprior_logstd += reparam_logstd_grad(st.prior.logstd, chain[0].eps_prev, dz_link);
    }

    // Decoder and reward heads read [h_t; z_t].
    Mat<S> dlatent = decode_backward(p, st.dec, masked(st.xhat - obs[t], valid[t], recon_scale), g);
    if (t >= 1) dlatent += reward_backward(p, st.rew, masked(st.rhat - rew[t], valid[t], reward_scale), g);
    dh += dlatent.topRows(cfg.deter);
    dz += dlatent.bottomRows(cfg.stoch);

    // z_t = mean_q + exp(logstd_q) * eps_t, then KL(q_t || p_t).
    const auto& k = kl_main[t];
    const S s1 = kl_scale(1);
    Mat<S> dq_mean = dz + masked(k.dq_mean, valid[t], s1) + dq_mean_extra[t];
    Mat<S> dq_logstd =
        reparam_logstd_grad(st.post.logstd, eps[t], dz) + masked(k.dq_logstd, valid[t], s1) + dq_logstd_extra[t];
    dprior_mean += masked(k.dp_mean, valid[t], s1);
    dprior_logstd += masked(k.dp_logstd, valid[t], s1);

    const Mat<S> dpost_in = head_backward(p, ParamId::Post1W, st.post, dq_mean, dq_logstd, g);
    dh += dpost_in.topRows(cfg.deter);
    encode_backward(p, st.enc, Mat<S>(dpost_in.bottomRows(cfg.feature_dim())), g);
    dh += head_backward(p, ParamId::Prior1W, st.prior, dprior_mean, dprior_logstd, g);

    Mat<S> dh_prev;
    dz_next = transition_backward(p, st.trans, dh, g, dh_prev);
    dh_next = dh_prev;
  }
  return rep;
}

}  // namespace vapors
