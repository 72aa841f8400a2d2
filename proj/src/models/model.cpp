#include "spectra/models/model.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "spectra/autodiff/ops.hpp"

namespace spectra::models {

using ad::Tensor;

namespace {

Tensor normal(ad::Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

SequenceModel::SequenceModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  const std::size_t v = config_.vocab_size;
  std::mt19937_64 rng(config_.seed);

  embed_ = params_.add("embed", normal({v, d}, kInitStd, rng), false);
  if (config_.use_pos_embed) {
    pos_embed_ = params_.add("pos_embed", normal({config_.max_seq_len, d}, kInitStd, rng), false);
  }

  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerParams lp;
    lp.ln1_gamma = params_.add(pre + "ln1.gamma", Tensor::full({d}, 1.0), false);
    lp.ln1_beta = params_.add(pre + "ln1.beta", Tensor::zeros({d}), false);
    if (config_.use_conv) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(config_.conv_kernel));
      std::uniform_real_distribution<double> dist(-bound, bound);
      std::vector<double> k(config_.conv_kernel * d);
      for (auto& x : k) x = dist(rng);
      lp.conv_kernel = params_.add(pre + "conv.kernel", Tensor::from({config_.conv_kernel, d}, std::move(k)), false);
    }
    if (config_.use_gate) {
      lp.gate_w = params_.add(pre + "gate.w", normal({d, d}, 0.1 / std::sqrt(static_cast<double>(d)), rng), true);
      lp.gate_b = params_.add(pre + "gate.b", Tensor::full({d}, gate_passthrough_bias()), false);
    }

    const std::string mx = pre + "mixer.";
    switch (config_.mixer_kind) {
      case MixerKind::SoftmaxAttn:
      case MixerKind::LinearAttn:
      case MixerKind::NormAttn: {
        AttentionParams p = init_attention(config_, rng);
        p.w_q = params_.add(mx + "w_q", p.w_q, true);
        p.w_k = params_.add(mx + "w_k", p.w_k, true);
        p.w_v = params_.add(mx + "w_v", p.w_v, true);
        if (p.w_eta.defined()) {
          p.w_eta = params_.add(mx + "w_eta", p.w_eta, true);
          p.b_eta = params_.add(mx + "b_eta", p.b_eta, false);
        }
        lp.mixer = p;
        break;
      }
      case MixerKind::LtiSsm: {
        LtiParams p = init_lti(config_, rng);
        p.log_neg_real = params_.add(mx + "log_neg_real", p.log_neg_real, false);
        p.phase = params_.add(mx + "phase", p.phase, false);
        p.log_dt = params_.add(mx + "log_dt", p.log_dt, false);
        p.b = params_.add(mx + "b", p.b, true);
        p.c = params_.add(mx + "c", p.c, true);
        p.d_skip = params_.add(mx + "d_skip", p.d_skip, false);
        lp.mixer = p;
        break;
      }
      case MixerKind::Lru: {
        LruParams p = init_lru(config_, rng);
        p.nu_log = params_.add(mx + "nu_log", p.nu_log, false);
        p.theta_log = params_.add(mx + "theta_log", p.theta_log, false);
        p.gamma_log = params_.add(mx + "gamma_log", p.gamma_log, false);
        p.b = params_.add(mx + "b", p.b, true);
        p.c = params_.add(mx + "c", p.c, true);
        p.d_skip = params_.add(mx + "d_skip", p.d_skip, false);
        lp.mixer = p;
        break;
      }
      case MixerKind::Mamba2:
      case MixerKind::Mamba2PseudoLti: {
        Mamba2Params p = init_mamba2(config_, rng);
        p.a_log = params_.add(mx + "a_log", p.a_log, false);
        if (p.w_dt.defined()) p.w_dt = params_.add(mx + "w_dt", p.w_dt, true);
        p.b_dt = params_.add(mx + "b_dt", p.b_dt, false);
        p.w_x = params_.add(mx + "w_x", p.w_x, true);
        p.conv_w = params_.add(mx + "conv_w", p.conv_w, false);
        p.conv_b = params_.add(mx + "conv_b", p.conv_b, false);
        p.w_b = params_.add(mx + "w_b", p.w_b, true);
        p.w_c = params_.add(mx + "w_c", p.w_c, true);
        p.w_z = params_.add(mx + "w_z", p.w_z, true);
        p.d_skip = params_.add(mx + "d_skip", p.d_skip, false);
        p.w_out = params_.add(mx + "w_out", p.w_out, true);
        lp.mixer = p;
        break;
      }
    }

    const std::size_t hidden = config_.mlp_hidden;
    lp.ln2_gamma = params_.add(pre + "ln2.gamma", Tensor::full({d}, 1.0), false);
    lp.ln2_beta = params_.add(pre + "ln2.beta", Tensor::zeros({d}), false);
    lp.mlp_w1 = params_.add(pre + "mlp.w1", normal({d, hidden}, kInitStd, rng), true);
    lp.mlp_b1 = params_.add(pre + "mlp.b1", Tensor::zeros({hidden}), false);
    lp.mlp_w2 = params_.add(pre + "mlp.w2", normal({hidden, d}, kInitStd, rng), true);
    lp.mlp_b2 = params_.add(pre + "mlp.b2", Tensor::zeros({d}), false);
    layers_.push_back(std::move(lp));
  }

  ln_f_gamma_ = params_.add("ln_f.gamma", Tensor::full({d}, 1.0), false);
  ln_f_beta_ = params_.add("ln_f.beta", Tensor::zeros({d}), false);
  head_ = params_.add("head", normal({d, v}, kInitStd, rng), true);
}

Tensor SequenceModel::mixer_forward(std::size_t index, const Tensor& u, std::size_t* clamped) const {
  const LayerParams& lp = layers_.at(index);
  if (is_attention(config_.mixer_kind)) {
    return attention_forward(attention_kind(config_.mixer_kind), std::get<AttentionParams>(lp.mixer), u,
                             config_.heads, config_.norm_fn, clamped);
  }
  if (clamped) *clamped = 0;
  return ssm_forward(config_.mixer_kind, lp.mixer, u, config_.heads);
}

Tensor SequenceModel::forward(std::span<const int> tokens, std::size_t batch, std::size_t len,
                              ForwardProbe* probe) const {
  if (tokens.size() != batch * len) {
    throw ad::ShapeError("model_forward: " + std::to_string(tokens.size()) + " tokens for batch " +
                         std::to_string(batch) + " x length " + std::to_string(len));
  }
  if (len == 0) throw ad::ShapeError("model_forward: empty sequence");
  if (config_.use_pos_embed && len > config_.max_seq_len) {
    throw ad::ShapeError("model_forward: sequence length " + std::to_string(len) +
                         " exceeds positional table of " + std::to_string(config_.max_seq_len));
  }
  const std::size_t d = config_.model_dim;
  Tensor x = ad::reshape(ad::gather_rows(embed_, tokens), {batch, len, d});
  if (config_.use_pos_embed) {
    std::vector<int> positions(len);
    std::iota(positions.begin(), positions.end(), 0);
    x = ad::add(x, ad::gather_rows(pos_embed_, positions));
  }
  if (probe) {
    probe->mixer_inputs.clear();
    probe->norm_eta_clamps = 0;
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerParams& lp = layers_[l];
    const Tensor h = ad::layer_norm(x, lp.ln1_gamma, lp.ln1_beta);
    const Tensor u = config_.use_conv ? apply_conv(h, lp.conv_kernel) : h;
    if (probe) probe->mixer_inputs.push_back(u.detach());
    std::size_t clamped = 0;
    Tensor y = mixer_forward(l, u, &clamped);
    if (probe) probe->norm_eta_clamps += clamped;
    if (config_.use_gate) y = apply_gate(y, h, lp.gate_w, lp.gate_b);
    x = ad::add(x, y);
    const Tensor h2 = ad::layer_norm(x, lp.ln2_gamma, lp.ln2_beta);
    const Tensor hidden = ad::gelu(ad::add(ad::matmul(h2, lp.mlp_w1), lp.mlp_b1));
    x = ad::add(x, ad::add(ad::matmul(hidden, lp.mlp_w2), lp.mlp_b2));
  }
  return ad::matmul(ad::layer_norm(x, ln_f_gamma_, ln_f_beta_), head_);
}

}  // namespace spectra::models
