#include "spectra/models/config.hpp"

#include <array>
#include <utility>

#include "spectra/config_json.hpp"

namespace spectra::models {

namespace {

constexpr std::array<std::pair<MixerKind, std::string_view>, 7> kMixerNames{{
    {MixerKind::SoftmaxAttn, "softmax_attn"},
    {MixerKind::LinearAttn, "linear_attn"},
    {MixerKind::NormAttn, "norm_attn"},
    {MixerKind::LtiSsm, "lti_ssm"},
    {MixerKind::Lru, "lru"},
    {MixerKind::Mamba2, "mamba2"},
    {MixerKind::Mamba2PseudoLti, "mamba2_pseudo_lti"},
}};

constexpr std::array<std::pair<NormFn, std::string_view>, 3> kNormNames{{
    {NormFn::Softplus, "softplus"},
    {NormFn::Exp, "exp"},
    {NormFn::Sigmoid, "sigmoid"},
}};

}  // namespace

std::string_view to_string(MixerKind kind) {
  for (auto [k, name] : kMixerNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

std::string_view to_string(NormFn fn) {
  for (auto [f, name] : kNormNames) {
    if (f == fn) return name;
  }
  return "unknown";
}

std::optional<MixerKind> parse_mixer_kind(std::string_view name) {
  for (auto [k, n] : kMixerNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

std::optional<NormFn> parse_norm_fn(std::string_view name) {
  for (auto [f, n] : kNormNames) {
    if (n == name) return f;
  }
  return std::nullopt;
}

bool is_attention(MixerKind kind) {
  return kind == MixerKind::SoftmaxAttn || kind == MixerKind::LinearAttn || kind == MixerKind::NormAttn;
}

bool is_mamba2(MixerKind kind) { return kind == MixerKind::Mamba2 || kind == MixerKind::Mamba2PseudoLti; }

bool has_input_invariant_transition(MixerKind kind) {
  return kind == MixerKind::LtiSsm || kind == MixerKind::Lru || kind == MixerKind::Mamba2PseudoLti;
}

AttentionKind attention_kind(MixerKind kind) {
  switch (kind) {
    case MixerKind::LinearAttn:
      return AttentionKind::Linear;
    case MixerKind::NormAttn:
      return AttentionKind::Norm;
    default:
      return AttentionKind::Softmax;
  }
}

bool protocol_pos_embed(MixerKind kind) {
  return kind == MixerKind::SoftmaxAttn || kind == MixerKind::LinearAttn;
}

void ModelConfig::validate(std::string_view prefix) const {
  using json_fields::join;
  if (depth < 1) throw ConfigError(join(prefix, "depth"), "depth must be >= 1");
  if (model_dim < 1) throw ConfigError(join(prefix, "model_dim"), "model_dim must be >= 1");
  if (heads < 1) throw ConfigError(join(prefix, "heads"), "heads must be >= 1");
  if (model_dim % heads != 0) {
    throw ConfigError(join(prefix, "heads"), "model_dim " + std::to_string(model_dim) +
                                                 " is not divisible by heads " + std::to_string(heads));
  }
  if (state_dim < 1) throw ConfigError(join(prefix, "state_dim"), "state_dim must be >= 1");
  if (conv_kernel < 1) throw ConfigError(join(prefix, "conv_kernel"), "conv_kernel must be >= 1");
  if (vocab_size < 2) throw ConfigError(join(prefix, "vocab_size"), "vocab_size must be >= 2");
  if (max_seq_len < 1) throw ConfigError(join(prefix, "max_seq_len"), "max_seq_len must be >= 1");
  if (mlp_hidden < 1) throw ConfigError(join(prefix, "mlp_hidden"), "mlp_hidden must be >= 1");
}

ModelConfig model_config_from_json(const nlohmann::json& obj, std::string_view prefix,
                                   std::vector<std::string>* notes) {
  using json_fields::join;
  using json_fields::optional;
  using json_fields::required;
  if (!obj.is_object()) throw ConfigError(std::string(prefix), "expected an object");
  ModelConfig c;
  const auto kind_name = required<std::string>(obj, "mixer_kind", prefix);
  const auto kind = parse_mixer_kind(kind_name);
  if (!kind) throw ConfigError(join(prefix, "mixer_kind"), "unknown mixer kind '" + kind_name + "'");
  c.mixer_kind = *kind;
  c.depth = required<std::size_t>(obj, "depth", prefix);
  c.model_dim = required<std::size_t>(obj, "model_dim", prefix);
  c.state_dim = required<std::size_t>(obj, "state_dim", prefix);
  c.heads = required<std::size_t>(obj, "heads", prefix);
  c.vocab_size = required<std::size_t>(obj, "vocab_size", prefix);
  c.use_gate = optional<bool>(obj, "use_gate", prefix, false);
  c.use_conv = optional<bool>(obj, "use_conv", prefix, false);
  c.conv_kernel = optional<std::size_t>(obj, "conv_kernel", prefix, 4);
  const auto norm_name = optional<std::string>(obj, "norm_fn", prefix, "softplus");
  const auto norm = parse_norm_fn(norm_name);
  if (!norm) throw ConfigError(join(prefix, "norm_fn"), "unknown normalization '" + norm_name + "'");
  c.norm_fn = *norm;
  c.use_pos_embed = optional<bool>(obj, "use_pos_embed", prefix, protocol_pos_embed(c.mixer_kind));
  if (notes && c.use_pos_embed != protocol_pos_embed(c.mixer_kind)) {
    notes->push_back("use_pos_embed overridden to " + std::string(c.use_pos_embed ? "true" : "false") +
                     " for " + std::string(to_string(c.mixer_kind)));
  }
  c.seed = optional<std::uint64_t>(obj, "seed", prefix, 0);
  c.max_seq_len = optional<std::size_t>(obj, "max_seq_len", prefix, 64);
  c.mlp_hidden = optional<std::size_t>(obj, "mlp_hidden", prefix, 2 * c.model_dim);
  c.zero_qk_init = optional<bool>(obj, "zero_qk_init", prefix, false);
  c.validate(prefix);
  if (obj.contains("head_dim")) {
    const auto m = json_fields::read_as<std::size_t>(obj.at("head_dim"), join(prefix, "head_dim"));
    if (m != c.head_dim()) {
      throw ConfigError(join(prefix, "head_dim"), "head_dim must equal model_dim / heads = " +
                                                      std::to_string(c.head_dim()));
    }
  }
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"mixer_kind", std::string(to_string(c.mixer_kind))},
      {"depth", c.depth},
      {"model_dim", c.model_dim},
      {"state_dim", c.state_dim},
      {"heads", c.heads},
      {"head_dim", c.head_dim()},
      {"use_gate", c.use_gate},
      {"use_conv", c.use_conv},
      {"conv_kernel", c.conv_kernel},
      {"norm_fn", std::string(to_string(c.norm_fn))},
      {"use_pos_embed", c.use_pos_embed},
      {"vocab_size", c.vocab_size},
      {"seed", c.seed},
      {"max_seq_len", c.max_seq_len},
      {"mlp_hidden", c.mlp_hidden},
      {"zero_qk_init", c.zero_qk_init},
  };
}

}  // namespace spectra::models
