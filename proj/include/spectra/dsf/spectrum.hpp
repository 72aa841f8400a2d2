#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "spectra/models/model.hpp"

namespace spectra::dsf {

enum class Phase { Init, Trained };

std::string_view to_string(Phase phase);
std::optional<Phase> parse_phase(std::string_view name);

/// Eigenvalue magnitudes of one (layer, head), one list per sequence.
struct SpectrumPanel {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<std::vector<double>> sequences;
};

struct SpectrumRecord {
  std::string model_id;
  std::string mixer_kind;
  Phase phase = Phase::Init;
  std::size_t eval_batch = 0;
  std::size_t seq_len = 0;
  std::vector<SpectrumPanel> layers;
  std::size_t dropped_sequences = 0;
  std::vector<std::string> drop_reasons;
  std::size_t norm_eta_clamps = 0;
  /// Per-query accuracy of the model these spectra came from, when known.
  std::optional<double> performance;
};

/// Stable identity of an architecture (independent of parameter values).
std::string model_identity(const models::ModelConfig& config);

/// Spectra over a batch of token sequences ([batch, len] row-major).
/// Attention and Mamba-2 contribute |Lambda_i| for i = 1..L-1 per head (one
/// value per step: Lambda_i is a multiple of the identity); LTI and LRU
/// contribute their N diagonal magnitudes. Sequences with a non-finite
/// normalizer or transition are dropped from every panel and counted.
/// Work fans out across sequences on up to `threads` threads; results do not
/// depend on the thread count.
SpectrumRecord extract_spectrum(const models::SequenceModel& model, std::span<const int> tokens, std::size_t batch,
                                std::size_t len, Phase phase, std::size_t threads = 1);

nlohmann::json to_json(const SpectrumRecord& record);
/// Throws std::invalid_argument on schema violations or negative magnitudes.
SpectrumRecord spectrum_from_json(const nlohmann::json& obj);

}  // namespace spectra::dsf
