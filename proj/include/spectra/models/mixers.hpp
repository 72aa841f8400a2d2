#pragma once

#include <cstddef>
#include <random>
#include <variant>

#include "spectra/autodiff/tensor.hpp"
#include "spectra/models/config.hpp"

// Sequence mixers. Every forward takes u: [..., L, d] (any number of leading
// batch axes) and returns [..., L, d].
namespace spectra::models {

/// Floor applied to norm-attention normalizers before division.
inline constexpr double kNormEtaFloor = 1e-30;

/// W_Q, W_K, W_V are stored input-major ([d, d], used as u @ W). Heads take
/// contiguous column blocks of width m = d / heads. `w_eta` [d, heads] and
/// `b_eta` [heads] exist for norm attention only.
struct AttentionParams {
  ad::Tensor w_q, w_k, w_v;
  ad::Tensor w_eta, b_eta;
};

/// Diagonal complex LTI SSM with N states. Continuous eigenvalue
/// lambda_n = -exp(log_neg_real_n) + i * phase_n, step exp(log_dt_n),
/// discrete Lambda = exp(dt * lambda). Input map b: [d, 2N] and readout
/// c: [2N, d] act on the [re, im] stacked state; d_skip: [d].
struct LtiParams {
  ad::Tensor log_neg_real, phase, log_dt;
  ad::Tensor b, c, d_skip;
};

/// Linear recurrent unit: Lambda = exp(-exp(nu_log) + i exp(theta_log)),
/// inputs scaled by gamma = exp(gamma_log).
struct LruParams {
  ad::Tensor nu_log, theta_log, gamma_log;
  ad::Tensor b, c, d_skip;
};

/// Single-group scalar-decay selective SSM (Mamba-2 style). Per head h:
/// a_h = -exp(a_log_h), dt = softplus(u w_dt + b_dt), Lambda = exp(dt a_h).
/// The pseudo-LTI variant has no w_dt (dt = softplus(b_dt)).
struct Mamba2Params {
  ad::Tensor a_log, w_dt, b_dt;
  ad::Tensor w_x, conv_w, conv_b;
  ad::Tensor w_b, w_c, w_z, d_skip, w_out;
};

using MixerParams = std::variant<AttentionParams, LtiParams, LruParams, Mamba2Params>;

/// Quantities of an attention head computed from u, in [B, H, L, m] layout.
/// `eta` is set for norm attention only ([B, H, L, 1], already clamped).
struct AttentionProjections {
  ad::Tensor q, k, v;
  ad::Tensor eta;
  std::size_t clamped = 0;
};

struct Mamba2Internals {
  ad::Tensor x;           // [B, L, d] after projection, convolution, SiLU
  ad::Tensor dt;          // [B, L, H]
  ad::Tensor log_lambda;  // [B, L, H] = dt * a
  ad::Tensor b_in;        // [B, L, N]
  ad::Tensor c_out;       // [B, L, N]
  ad::Tensor z;           // [B, L, d] gate pre-activation
};

AttentionProjections attention_projections(AttentionKind kind, const AttentionParams& params,
                                           const ad::Tensor& u, std::size_t heads, NormFn norm_fn);

/// Masked separable attention without output projection:
/// y_i = sum_{j<=i} phi(q_i)^T psi(k_j) / eta_i * (W_V u_j), per head.
/// `clamped` receives the number of norm-attention normalizers raised to
/// kNormEtaFloor.
ad::Tensor attention_forward(AttentionKind kind, const AttentionParams& params, const ad::Tensor& u,
                             std::size_t heads, NormFn norm_fn, std::size_t* clamped = nullptr);

/// Discrete diagonal transition as [re(0..N-1), im(0..N-1)].
ad::Tensor lti_lambda(const LtiParams& params);
ad::Tensor lru_lambda(const LruParams& params);
/// Input scaling applied to B u per state, stacked for [re, im] ([2N]).
ad::Tensor lti_input_scale(const LtiParams& params);
ad::Tensor lru_input_scale(const LruParams& params);

Mamba2Internals mamba2_internals(const Mamba2Params& params, const ad::Tensor& u, std::size_t heads,
                                 bool pseudo_lti);
/// SSD core before gating: y = sum_j C_i.B_j prod Lambda dt_j x_j + D x_i, [B, L, d].
ad::Tensor mamba2_scan(const Mamba2Internals& in, const Mamba2Params& params, std::size_t heads);

ad::Tensor ssm_forward(MixerKind kind, const MixerParams& params, const ad::Tensor& u, std::size_t heads);

/// layer_out * silu(u @ w_g + b_g); `b_g` may be undefined (no bias).
ad::Tensor apply_gate(const ad::Tensor& layer_out, const ad::Tensor& u, const ad::Tensor& w_g,
                      const ad::Tensor& b_g = {});

/// Depthwise causal convolution with kernel [d_conv, d].
ad::Tensor apply_conv(const ad::Tensor& u, const ad::Tensor& kernel);

/// silu(b) = 1, the pass-through bias used when initializing gates.
double gate_passthrough_bias();

/// Standard deviation of the GPT-2 style normal initialization used for
/// embeddings, attention projections, MLP weights and the output head.
inline constexpr double kInitStd = 0.02;

/// Parameter initializers, drawing from `rng` in a fixed order.
AttentionParams init_attention(const ModelConfig& config, std::mt19937_64& rng);
LtiParams init_lti(const ModelConfig& config, std::mt19937_64& rng);
LruParams init_lru(const ModelConfig& config, std::mt19937_64& rng);
Mamba2Params init_mamba2(const ModelConfig& config, std::mt19937_64& rng);

}  // namespace spectra::models
