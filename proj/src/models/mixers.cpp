#include "spectra/models/mixers.hpp"

#include <cmath>
#include <numbers>

#include "spectra/autodiff/ops.hpp"

namespace spectra::models {

using ad::Shape;
using ad::Tensor;

namespace {

struct SeqView {
  Shape lead;  // leading batch axes of the caller's tensor
  std::size_t batch = 1;
  std::size_t len = 0;
  std::size_t width = 0;
};

SeqView seq_view(const Tensor& u, const char* op) {
  if (u.rank() < 2) {
    throw ad::ShapeError(std::string(op) + ": expected [..., L, d], got " + ad::shape_str(u.shape()));
  }
  SeqView v;
  const auto& s = u.shape();
  v.lead.assign(s.begin(), s.end() - 2);
  v.len = s[s.size() - 2];
  v.width = s.back();
  v.batch = ad::numel_of(v.lead);
  return v;
}

// [B, L, d] -> [B, H, L, m]
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads) {
  const std::size_t m = x.shape().back() / heads;
  return ad::permute(ad::reshape(x, {batch, len, heads, m}), {0, 2, 1, 3});
}

// [B, H, L, m] -> [B, L, H * m]
Tensor merge_heads(const Tensor& x) {
  const auto& s = x.shape();
  return ad::reshape(ad::permute(x, {0, 2, 1, 3}), {s[0], s[2], s[1] * s[3]});
}

void check_weight(const Tensor& w, std::size_t rows, std::size_t cols, const char* what) {
  if (!w.defined() || w.rank() != 2 || w.dim(0) != rows || w.dim(1) != cols) {
    throw ad::ShapeError(std::string(what) + ": expected weight [" + std::to_string(rows) + ", " +
                         std::to_string(cols) + "], got " +
                         (w.defined() ? ad::shape_str(w.shape()) : std::string("undefined")));
  }
}

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor normalizer(NormFn fn, const Tensor& pre) {
  switch (fn) {
    case NormFn::Exp:
      return ad::exp(pre);
    case NormFn::Sigmoid:
      return ad::sigmoid(pre);
    case NormFn::Softplus:
    default:
      return ad::softplus(pre);
  }
}

Tensor stacked_polar(const Tensor& magnitude, const Tensor& angle) {
  return ad::concat_last({ad::mul(magnitude, ad::cos(angle)), ad::mul(magnitude, ad::sin(angle))});
}

}  // namespace

AttentionProjections attention_projections(AttentionKind kind, const AttentionParams& p, const Tensor& u,
                                           std::size_t heads, NormFn norm_fn) {
  const SeqView v = seq_view(u, "attention_forward");
  if (heads == 0 || v.width % heads != 0) {
    throw ad::ShapeError("attention_forward: model dim " + std::to_string(v.width) +
                         " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t d = v.width;
  const std::size_t m = d / heads;
  check_weight(p.w_q, d, d, "attention_forward W_Q");
  check_weight(p.w_k, d, d, "attention_forward W_K");
  check_weight(p.w_v, d, d, "attention_forward W_V");
  const Tensor u3 = ad::reshape(u, {v.batch, v.len, d});

  AttentionProjections out;
  // q_i carries the 1/sqrt(m) temperature so that every kernel sees q_i^T k_j.
  out.q = ad::scale(split_heads(ad::matmul(u3, p.w_q), v.batch, v.len, heads),
                    1.0 / std::sqrt(static_cast<double>(m)));
  out.k = split_heads(ad::matmul(u3, p.w_k), v.batch, v.len, heads);
  out.v = split_heads(ad::matmul(u3, p.w_v), v.batch, v.len, heads);
  if (kind == AttentionKind::Norm) {
    check_weight(p.w_eta, d, heads, "attention_forward w_eta");
    if (!p.b_eta.defined() || p.b_eta.shape() != Shape{heads}) {
      throw ad::ShapeError("attention_forward b_eta: expected [" + std::to_string(heads) + "]");
    }
    const Tensor pre = ad::add(ad::matmul(u3, p.w_eta), p.b_eta);  // [B, L, H]
    const Tensor eta = ad::clamp_min(normalizer(norm_fn, pre), kNormEtaFloor, &out.clamped);
    out.eta = ad::reshape(ad::permute(eta, {0, 2, 1}), {v.batch, heads, v.len, 1});
  }
  return out;
}

Tensor attention_forward(AttentionKind kind, const AttentionParams& params, const Tensor& u, std::size_t heads,
                         NormFn norm_fn, std::size_t* clamped) {
  const AttentionProjections p = attention_projections(kind, params, u, heads, norm_fn);
  if (clamped) *clamped = p.clamped;
  Tensor weights;
  switch (kind) {
    case AttentionKind::Softmax:
      weights = ad::causal_softmax(ad::matmul(p.q, ad::transpose_last2(p.k)));
      break;
    case AttentionKind::Linear: {
      const Tensor fq = ad::add_scalar(ad::elu(p.q), 1.0);
      const Tensor fk = ad::add_scalar(ad::elu(p.k), 1.0);
      const Tensor scores = ad::causal_mask(ad::matmul(fq, ad::transpose_last2(fk)));
      weights = ad::div(scores, ad::sum_last(scores));
      break;
    }
    case AttentionKind::Norm: {
      const Tensor scores = ad::causal_mask(ad::matmul(p.q, ad::transpose_last2(p.k)));
      weights = ad::div(scores, p.eta);
      break;
    }
  }
  return ad::reshape(merge_heads(ad::matmul(weights, p.v)), u.shape());
}

Tensor lti_lambda(const LtiParams& p) {
  const Tensor dt = ad::exp(p.log_dt);
  const Tensor magnitude = ad::exp(ad::scale(ad::mul(dt, ad::exp(p.log_neg_real)), -1.0));
  return stacked_polar(magnitude, ad::mul(dt, p.phase));
}

Tensor lru_lambda(const LruParams& p) {
  const Tensor magnitude = ad::exp(ad::scale(ad::exp(p.nu_log), -1.0));
  return stacked_polar(magnitude, ad::exp(p.theta_log));
}

Tensor lti_input_scale(const LtiParams& p) {
  const Tensor dt = ad::exp(p.log_dt);
  return ad::concat_last({dt, dt});
}

Tensor lru_input_scale(const LruParams& p) {
  const Tensor g = ad::exp(p.gamma_log);
  return ad::concat_last({g, g});
}

Mamba2Internals mamba2_internals(const Mamba2Params& p, const Tensor& u, std::size_t heads, bool pseudo_lti) {
  const SeqView v = seq_view(u, "ssm_forward(mamba2)");
  const std::size_t d = v.width;
  if (heads == 0 || d % heads != 0) {
    throw ad::ShapeError("ssm_forward(mamba2): model dim " + std::to_string(d) + " not divisible by heads " +
                         std::to_string(heads));
  }
  check_weight(p.w_x, d, d, "ssm_forward(mamba2) w_x");
  check_weight(p.w_z, d, d, "ssm_forward(mamba2) w_z");
  if (!p.w_b.defined() || p.w_b.rank() != 2 || p.w_b.dim(0) != d || !p.w_c.defined() ||
      p.w_c.shape() != p.w_b.shape()) {
    throw ad::ShapeError("ssm_forward(mamba2): w_b and w_c must both be [d, N]");
  }
  const Tensor u3 = ad::reshape(u, {v.batch, v.len, d});
  Mamba2Internals in;
  in.x = ad::silu(ad::add(ad::causal_conv1d(ad::matmul(u3, p.w_x), p.conv_w), p.conv_b));
  in.z = ad::matmul(u3, p.w_z);
  in.b_in = ad::matmul(u3, p.w_b);
  in.c_out = ad::matmul(u3, p.w_c);
  if (pseudo_lti) {
    in.dt = ad::add(Tensor::zeros({v.batch, v.len, heads}), ad::softplus(p.b_dt));
  } else {
    check_weight(p.w_dt, d, heads, "ssm_forward(mamba2) w_dt");
    in.dt = ad::softplus(ad::add(ad::matmul(u3, p.w_dt), p.b_dt));
  }
  const Tensor a = ad::scale(ad::exp(p.a_log), -1.0);
  in.log_lambda = ad::mul(in.dt, a);
  return in;
}

Tensor mamba2_scan(const Mamba2Internals& in, const Mamba2Params& p, std::size_t heads) {
  const auto& s = in.x.shape();
  const std::size_t batch = s[0], len = s[1], d = s[2];
  const std::size_t hd = d / heads;
  const Tensor cb = ad::matmul(in.c_out, ad::transpose_last2(in.b_in));  // [B, L, L]
  const Tensor decay = ad::causal_decay(ad::permute(in.log_lambda, {0, 2, 1}));  // [B, H, L, L]
  const Tensor mix = ad::mul(decay, ad::reshape(cb, {batch, 1, len, len}));
  const Tensor x4 = ad::reshape(in.x, {batch, len, heads, hd});
  const Tensor xdt = ad::permute(ad::mul(x4, ad::reshape(in.dt, {batch, len, heads, 1})), {0, 2, 1, 3});
  const Tensor y = ad::permute(ad::matmul(mix, xdt), {0, 2, 1, 3});  // [B, L, H, hd]
  const Tensor skip = ad::mul(x4, ad::reshape(p.d_skip, {heads, 1}));
  return ad::reshape(ad::add(y, skip), {batch, len, d});
}

Tensor ssm_forward(MixerKind kind, const MixerParams& params, const Tensor& u, std::size_t heads) {
  const SeqView v = seq_view(u, "ssm_forward");
  switch (kind) {
    case MixerKind::LtiSsm:
    case MixerKind::Lru: {
      Tensor lambda, scale, b, c, d_skip;
      if (kind == MixerKind::LtiSsm) {
        const auto& p = std::get<LtiParams>(params);
        lambda = lti_lambda(p);
        scale = lti_input_scale(p);
        b = p.b;
        c = p.c;
        d_skip = p.d_skip;
      } else {
        const auto& p = std::get<LruParams>(params);
        lambda = lru_lambda(p);
        scale = lru_input_scale(p);
        b = p.b;
        c = p.c;
        d_skip = p.d_skip;
      }
      check_weight(b, v.width, lambda.numel(), "ssm_forward B");
      check_weight(c, lambda.numel(), v.width, "ssm_forward C");
      const Tensor x = ad::mul(ad::matmul(u, b), scale);
      const Tensor h = ad::complex_diag_scan(x, lambda);
      return ad::add(ad::matmul(h, c), ad::mul(u, d_skip));
    }
    case MixerKind::Mamba2:
    case MixerKind::Mamba2PseudoLti: {
      const auto& p = std::get<Mamba2Params>(params);
      const Mamba2Internals in = mamba2_internals(p, u, heads, kind == MixerKind::Mamba2PseudoLti);
      const Tensor y = ad::mul(mamba2_scan(in, p, heads), ad::silu(in.z));
      return ad::reshape(ad::matmul(y, p.w_out), u.shape());
    }
    default:
      throw std::invalid_argument("ssm_forward: " + std::string(to_string(kind)) + " is not an SSM");
  }
}

Tensor apply_gate(const Tensor& layer_out, const Tensor& u, const Tensor& w_g, const Tensor& b_g) {
  if (layer_out.shape() != u.shape()) {
    throw ad::ShapeError("apply_gate: layer output " + ad::shape_str(layer_out.shape()) +
                         " and input " + ad::shape_str(u.shape()) + " differ");
  }
  Tensor pre = ad::matmul(u, w_g);
  if (b_g.defined()) pre = ad::add(pre, b_g);
  return ad::mul(layer_out, ad::silu(pre));
}

Tensor apply_conv(const Tensor& u, const Tensor& kernel) { return ad::causal_conv1d(u, kernel); }

double gate_passthrough_bias() {
  // Newton on f(b) = b * sigmoid(b) - 1
  double b = 1.0;
  for (int i = 0; i < 50; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-b));
    const double f = b * s - 1.0;
    const double df = s * (1.0 + b * (1.0 - s));
    b -= f / df;
  }
  return b;
}

AttentionParams init_attention(const ModelConfig& c, std::mt19937_64& rng) {
  const std::size_t d = c.model_dim;
  AttentionParams p;
  p.w_q = normal({d, d}, kInitStd, rng);
  p.w_k = normal({d, d}, kInitStd, rng);
  p.w_v = normal({d, d}, kInitStd, rng);
  if (c.zero_qk_init) {
    p.w_q = Tensor::zeros({d, d});
    p.w_k = Tensor::zeros({d, d});
  }
  if (c.mixer_kind == MixerKind::NormAttn) {
    p.w_eta = normal({d, c.heads}, kInitStd, rng);
    p.b_eta = Tensor::zeros({c.heads});
  }
  return p;
}

LtiParams init_lti(const ModelConfig& c, std::mt19937_64& rng) {
  const std::size_t n = c.state_dim;
  const std::size_t d = c.model_dim;
  LtiParams p;
  // lambda_n = -1/2 + i*pi*n
  p.log_neg_real = Tensor::full({n}, std::log(0.5));
  std::vector<double> phase(n);
  for (std::size_t i = 0; i < n; ++i) phase[i] = std::numbers::pi * static_cast<double>(i);
  p.phase = Tensor::from({n}, std::move(phase));
  p.log_dt = uniform({n}, std::log(1e-3), std::log(1e-1), rng);
  p.b = normal({d, 2 * n}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  p.c = normal({2 * n, d}, 1.0 / std::sqrt(static_cast<double>(n)), rng);
  p.d_skip = Tensor::full({d}, 1.0);
  return p;
}

LruParams init_lru(const ModelConfig& c, std::mt19937_64& rng) {
  const std::size_t n = c.state_dim;
  const std::size_t d = c.model_dim;
  std::uniform_real_distribution<double> ring(0.9, 0.999);
  std::uniform_real_distribution<double> angle(1e-4, std::numbers::pi / 10.0);
  std::vector<double> nu(n), theta(n), gamma(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ring(rng);
    nu[i] = std::log(-std::log(r));
    theta[i] = std::log(angle(rng));
    gamma[i] = std::log(std::sqrt(1.0 - r * r));
  }
  LruParams p;
  p.nu_log = Tensor::from({n}, std::move(nu));
  p.theta_log = Tensor::from({n}, std::move(theta));
  p.gamma_log = Tensor::from({n}, std::move(gamma));
  p.b = normal({d, 2 * n}, 1.0 / std::sqrt(2.0 * static_cast<double>(d)), rng);
  p.c = normal({2 * n, d}, 1.0 / std::sqrt(static_cast<double>(n)), rng);
  p.d_skip = Tensor::full({d}, 1.0);
  return p;
}

Mamba2Params init_mamba2(const ModelConfig& c, std::mt19937_64& rng) {
  const std::size_t d = c.model_dim;
  const std::size_t n = c.state_dim;
  const std::size_t h = c.heads;
  const std::size_t taps = 4;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Mamba2Params p;
  std::uniform_real_distribution<double> a_range(1.0, 16.0);
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  std::vector<double> a_log(h), b_dt(h);
  for (std::size_t i = 0; i < h; ++i) {
    a_log[i] = std::log(a_range(rng));
    const double dt = std::exp(log_dt(rng));
    b_dt[i] = dt + std::log(-std::expm1(-dt));  // softplus^{-1}(dt)
  }
  p.a_log = Tensor::from({h}, std::move(a_log));
  p.b_dt = Tensor::from({h}, std::move(b_dt));
  if (c.mixer_kind != MixerKind::Mamba2PseudoLti) p.w_dt = normal({d, h}, s, rng);
  p.w_x = normal({d, d}, s, rng);
  p.conv_w = uniform({taps, d}, -0.5, 0.5, rng);
  p.conv_b = Tensor::zeros({d});
  p.w_b = normal({d, n}, s, rng);
  p.w_c = normal({d, n}, s, rng);
  p.w_z = normal({d, d}, s, rng);
  p.d_skip = Tensor::full({h}, 1.0);
  p.w_out = normal({d, d}, s, rng);
  return p;
}

}  // namespace spectra::models
