#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spectra/autodiff/tensor.hpp"
#include "spectra/models/config.hpp"
#include "spectra/models/mixers.hpp"
#include "spectra/models/param_store.hpp"

namespace spectra::models {

struct LayerParams {
  ad::Tensor ln1_gamma, ln1_beta;
  ad::Tensor conv_kernel;      // [conv_kernel, d] when use_conv
  ad::Tensor gate_w, gate_b;   // when use_gate
  MixerParams mixer;
  ad::Tensor ln2_gamma, ln2_beta;
  ad::Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

/// Values captured during a forward pass, used by spectral extraction.
struct ForwardProbe {
  std::vector<ad::Tensor> mixer_inputs;  // per layer, [B, L, d], detached
  std::size_t norm_eta_clamps = 0;
};

/// Pre-norm residual backbone:
///   x = embed(tokens) [+ positional]
///   per layer: h = LN(x); u = conv(h)?; y = mixer(u); y = gate(y, h)?;
///              x += y; x += MLP(LN(x))
///   logits = LN(x) @ W_head
class SequenceModel {
 public:
  explicit SequenceModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t depth() const { return layers_.size(); }
  const LayerParams& layer(std::size_t index) const { return layers_.at(index); }

  /// tokens: batch * len ids, row-major. Returns logits [batch, len, vocab].
  ad::Tensor forward(std::span<const int> tokens, std::size_t batch, std::size_t len,
                     ForwardProbe* probe = nullptr) const;

  /// Mixer output for layer `index` given its (post-convolution) input u.
  ad::Tensor mixer_forward(std::size_t index, const ad::Tensor& u, std::size_t* clamped = nullptr) const;

 private:
  ModelConfig config_;
  ParamStore params_;
  ad::Tensor embed_, pos_embed_, ln_f_gamma_, ln_f_beta_, head_;
  std::vector<LayerParams> layers_;
};

}  // namespace spectra::models
