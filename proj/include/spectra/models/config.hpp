#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace spectra::models {

enum class MixerKind { SoftmaxAttn, LinearAttn, NormAttn, LtiSsm, Lru, Mamba2, Mamba2PseudoLti };
enum class NormFn { Softplus, Exp, Sigmoid };
enum class AttentionKind { Softmax, Linear, Norm };

std::string_view to_string(MixerKind kind);
std::string_view to_string(NormFn fn);
std::optional<MixerKind> parse_mixer_kind(std::string_view name);
std::optional<NormFn> parse_norm_fn(std::string_view name);

bool is_attention(MixerKind kind);
bool is_mamba2(MixerKind kind);
/// Input-independent transition (LTI SSM, LRU, pseudo-LTI Mamba-2).
bool has_input_invariant_transition(MixerKind kind);
AttentionKind attention_kind(MixerKind kind);
/// Learnable positional embeddings are used by softmax and linear attention only.
bool protocol_pos_embed(MixerKind kind);

struct ModelConfig {
  MixerKind mixer_kind = MixerKind::SoftmaxAttn;
  std::size_t depth = 2;
  std::size_t model_dim = 64;
  std::size_t state_dim = 16;
  std::size_t heads = 4;
  bool use_gate = false;
  bool use_conv = false;
  std::size_t conv_kernel = 4;
  NormFn norm_fn = NormFn::Softplus;
  bool use_pos_embed = true;
  std::size_t vocab_size = 128;
  std::uint64_t seed = 0;
  std::size_t max_seq_len = 64;
  std::size_t mlp_hidden = 128;
  /// Debug aid: initialize W_Q and W_K to zero (attention kinds).
  bool zero_qk_init = false;

  std::size_t head_dim() const { return model_dim / heads; }

  /// Throws ConfigError with a pointer under `prefix` on violated invariants.
  void validate(std::string_view prefix = "/model") const;
};

/// Reads a ModelConfig; `use_pos_embed` defaults to the protocol value for the
/// mixer kind. Deviations from the protocol are appended to `notes`.
ModelConfig model_config_from_json(const nlohmann::json& obj, std::string_view prefix = "/model",
                                   std::vector<std::string>* notes = nullptr);
nlohmann::json to_json(const ModelConfig& config);

}  // namespace spectra::models
