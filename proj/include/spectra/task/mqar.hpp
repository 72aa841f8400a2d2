#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

// Multi-query associative recall. A sequence of length L is laid out as
//   k_1 v_1 k_2 v_2 ... k_n v_n | q_1 _ q_2 _ ... q_n _ | _ ...
// where every key is queried exactly once in shuffled order and `_` is the
// padding token 0. The model must emit the paired value at each query
// position (next-token prediction), so targets are set there and ignored
// everywhere else.
namespace spectra::task {

inline constexpr int kPadToken = 0;
inline constexpr int kIgnoreTarget = -100;

struct MqarConfig {
  std::size_t num_kv = 8;
  std::size_t seq_len = 64;
  std::size_t vocab_size = 128;
  std::size_t num_examples = 20000;
  std::uint64_t seed = 0;

  /// Throws spectra::ConfigError naming the violated inequality.
  void validate(std::string_view prefix = "/task") const;
};

MqarConfig mqar_config_from_json(const nlohmann::json& obj, std::string_view prefix = "/task");
nlohmann::json to_json(const MqarConfig& config);

struct MqarBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> tokens;   // [batch, len]
  std::vector<int> targets;  // [batch, len], kIgnoreTarget off the query positions
  std::vector<std::vector<std::size_t>> query_positions;

  /// Sequences [first, first + count) as a new batch.
  MqarBatch slice(std::size_t first, std::size_t count) const;
  std::span<const int> sequence(std::size_t index) const;
};

/// Examples [first, first + count) of the dataset described by `config`.
/// Example e depends only on (seed, e), so any range reproduces the same
/// sequences as the full dataset.
MqarBatch mqar_generate(const MqarConfig& config, std::size_t first, std::size_t count);
MqarBatch mqar_generate(const MqarConfig& config);

struct MqarScore {
  double per_query_accuracy = 0.0;
  double full_sequence_accuracy = 0.0;
  std::size_t queries = 0;
  std::size_t sequences = 0;
};

/// logits: [batch, len, vocab] row-major. Ties in argmax resolve to the
/// lowest token id.
MqarScore score(std::span<const double> logits, std::size_t vocab, const MqarBatch& batch);

/// Brute-force check that every target equals the value paired with the
/// queried key in the prefix, keys are distinct, keys and values come from
/// disjoint vocabulary halves, and targets appear only at query positions.
/// Returns one message per violation.
std::vector<std::string> verify_pairing(const MqarBatch& batch, std::size_t vocab_size);

/// One JSON object per line: {"tokens", "targets", "query_positions"}.
void write_jsonl(std::ostream& out, const MqarBatch& batch);
MqarBatch read_jsonl(std::istream& in);

}  // namespace spectra::task
