#include "spectra/task/mqar.hpp"

#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>

#include "spectra/config_json.hpp"

namespace spectra::task {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Unbiased draw from [0, n) that does not depend on the standard library's
// distribution implementations.
std::uint64_t draw_below(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

}  // namespace

void MqarConfig::validate(std::string_view prefix) const {
  using json_fields::join;
  if (num_kv == 0) throw ConfigError(join(prefix, "num_kv"), "num_kv >= 1 violated");
  if (4 * num_kv > seq_len) {
    throw ConfigError(join(prefix, "num_kv"), "4*num_kv <= seq_len violated (4*" + std::to_string(num_kv) +
                                                  " = " + std::to_string(4 * num_kv) + " > " +
                                                  std::to_string(seq_len) + ")");
  }
  if (vocab_size % 2 != 0) {
    throw ConfigError(join(prefix, "vocab_size"), "vocab_size must be even, got " + std::to_string(vocab_size));
  }
  // Keys come from [1, vocab/2) (0 is padding) and must be distinct.
  if (vocab_size < 4 || num_kv + 1 > vocab_size / 2) {
    throw ConfigError(join(prefix, "vocab_size"), "num_kv + 1 <= vocab_size/2 violated (" +
                                                      std::to_string(num_kv + 1) + " > " +
                                                      std::to_string(vocab_size / 2) + ")");
  }
  if (num_examples == 0) throw ConfigError(join(prefix, "num_examples"), "num_examples >= 1 violated");
}

MqarConfig mqar_config_from_json(const nlohmann::json& obj, std::string_view prefix) {
  using namespace json_fields;
  if (!obj.is_object()) throw ConfigError(std::string(prefix), "expected an object");
  MqarConfig c;
  c.num_kv = required<std::size_t>(obj, "num_kv", prefix);
  c.seq_len = required<std::size_t>(obj, "seq_len", prefix);
  c.vocab_size = required<std::size_t>(obj, "vocab_size", prefix);
  c.num_examples = optional<std::size_t>(obj, "num_examples", prefix, c.num_examples);
  c.seed = optional<std::uint64_t>(obj, "seed", prefix, c.seed);
  c.validate(prefix);
  return c;
}

nlohmann::json to_json(const MqarConfig& c) {
  return {{"num_kv", c.num_kv},
          {"seq_len", c.seq_len},
          {"vocab_size", c.vocab_size},
          {"num_examples", c.num_examples},
          {"seed", c.seed}};
}

MqarBatch MqarBatch::slice(std::size_t first, std::size_t count) const {
  if (first + count > batch) throw std::out_of_range("MqarBatch::slice: range exceeds batch");
  MqarBatch out;
  out.batch = count;
  out.len = len;
  out.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(first * len),
                    tokens.begin() + static_cast<std::ptrdiff_t>((first + count) * len));
  out.targets.assign(targets.begin() + static_cast<std::ptrdiff_t>(first * len),
                     targets.begin() + static_cast<std::ptrdiff_t>((first + count) * len));
  out.query_positions.assign(query_positions.begin() + static_cast<std::ptrdiff_t>(first),
                             query_positions.begin() + static_cast<std::ptrdiff_t>(first + count));
  return out;
}

std::span<const int> MqarBatch::sequence(std::size_t index) const {
  return std::span<const int>(tokens).subspan(index * len, len);
}

MqarBatch mqar_generate(const MqarConfig& config, std::size_t first, std::size_t count) {
  config.validate();
  const std::size_t n = config.num_kv;
  const std::size_t len = config.seq_len;
  const std::uint64_t half = config.vocab_size / 2;
  MqarBatch out;
  out.batch = count;
  out.len = len;
  out.tokens.assign(count * len, kPadToken);
  out.targets.assign(count * len, kIgnoreTarget);
  out.query_positions.resize(count);

  std::vector<int> pool(half - 1);
  for (std::size_t e = 0; e < count; ++e) {
    std::mt19937_64 rng(splitmix64(config.seed ^ splitmix64(first + e)));
    // Partial Fisher-Yates over [1, half) picks n distinct keys.
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + draw_below(rng, pool.size() - i);
      std::swap(pool[i], pool[j]);
    }
    std::vector<int> values(n);
    for (auto& v : values) v = static_cast<int>(half + draw_below(rng, half));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[draw_below(rng, i)]);

    int* tok = out.tokens.data() + e * len;
    int* tgt = out.targets.data() + e * len;
    for (std::size_t i = 0; i < n; ++i) {
      tok[2 * i] = pool[i];
      tok[2 * i + 1] = values[i];
    }
    for (std::size_t q = 0; q < n; ++q) {
      const std::size_t pos = 2 * n + 2 * q;
      tok[pos] = pool[order[q]];
      tgt[pos] = values[order[q]];
      out.query_positions[e].push_back(pos);
    }
  }
  return out;
}

MqarBatch mqar_generate(const MqarConfig& config) { return mqar_generate(config, 0, config.num_examples); }

MqarScore score(std::span<const double> logits, std::size_t vocab, const MqarBatch& batch) {
  if (logits.size() != batch.batch * batch.len * vocab) {
    throw std::invalid_argument("score: logits size " + std::to_string(logits.size()) + " does not match batch " +
                                std::to_string(batch.batch) + " x " + std::to_string(batch.len) + " x vocab " +
                                std::to_string(vocab));
  }
  MqarScore s;
  std::size_t correct = 0, perfect = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    bool all = true;
    for (std::size_t pos : batch.query_positions[b]) {
      const double* row = logits.data() + (b * batch.len + pos) * vocab;
      std::size_t best = 0;
      for (std::size_t v = 1; v < vocab; ++v) {
        if (row[v] > row[best]) best = v;
      }
      const bool ok = static_cast<int>(best) == batch.targets[b * batch.len + pos];
      correct += ok ? 1 : 0;
      all = all && ok;
      ++s.queries;
    }
    perfect += all ? 1 : 0;
  }
  s.sequences = batch.batch;
  s.per_query_accuracy = s.queries ? static_cast<double>(correct) / static_cast<double>(s.queries) : 0.0;
  s.full_sequence_accuracy = batch.batch ? static_cast<double>(perfect) / static_cast<double>(batch.batch) : 0.0;
  return s;
}

std::vector<std::string> verify_pairing(const MqarBatch& batch, std::size_t vocab_size) {
  std::vector<std::string> bad;
  const int half = static_cast<int>(vocab_size / 2);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const int* tok = batch.tokens.data() + b * batch.len;
    const int* tgt = batch.targets.data() + b * batch.len;
    const auto& queries = batch.query_positions[b];
    const std::string where = "sequence " + std::to_string(b) + ": ";
    if (queries.empty()) {
      bad.push_back(where + "no queries");
      continue;
    }
    // The prefix ends where the first query starts.
    std::size_t prefix = queries.front();
    for (std::size_t q : queries) prefix = std::min(prefix, q);
    if (prefix % 2 != 0) bad.push_back(where + "odd key-value prefix length");
    for (std::size_t i = 0; i + 1 < prefix; i += 2) {
      if (tok[i] < 1 || tok[i] >= half) bad.push_back(where + "key outside [1, vocab/2) at " + std::to_string(i));
      if (tok[i + 1] < half || tok[i + 1] >= static_cast<int>(vocab_size)) {
        bad.push_back(where + "value outside [vocab/2, vocab) at " + std::to_string(i + 1));
      }
      for (std::size_t j = 0; j < i; j += 2) {
        if (tok[j] == tok[i]) bad.push_back(where + "duplicate key " + std::to_string(tok[i]));
      }
    }
    std::vector<bool> is_query(batch.len, false);
    for (std::size_t q : queries) {
      if (q >= batch.len) {
        bad.push_back(where + "query position out of range");
        continue;
      }
      is_query[q] = true;
      int expected = kIgnoreTarget;
      for (std::size_t i = 0; i + 1 < prefix; i += 2) {
        if (tok[i] == tok[q]) expected = tok[i + 1];
      }
      if (expected == kIgnoreTarget) {
        bad.push_back(where + "query at " + std::to_string(q) + " re-presents no earlier key");
      } else if (tgt[q] != expected) {
        bad.push_back(where + "target at " + std::to_string(q) + " is " + std::to_string(tgt[q]) + ", paired value is " +
                      std::to_string(expected));
      }
    }
    for (std::size_t i = 0; i < batch.len; ++i) {
      if (!is_query[i] && tgt[i] != kIgnoreTarget) {
        bad.push_back(where + "target set at non-query position " + std::to_string(i));
      }
    }
  }
  return bad;
}

void write_jsonl(std::ostream& out, const MqarBatch& batch) {
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const auto tok = batch.sequence(b);
    const auto tgt = std::span<const int>(batch.targets).subspan(b * batch.len, batch.len);
    nlohmann::json line = {{"tokens", std::vector<int>(tok.begin(), tok.end())},
                           {"targets", std::vector<int>(tgt.begin(), tgt.end())},
                           {"query_positions", batch.query_positions[b]}};
    out << line.dump() << '\n';
  }
}

MqarBatch read_jsonl(std::istream& in) {
  MqarBatch out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto tok = j.at("tokens").get<std::vector<int>>();
      const auto tgt = j.at("targets").get<std::vector<int>>();
      if (out.batch == 0) out.len = tok.size();
      if (tok.size() != out.len || tgt.size() != out.len) throw std::invalid_argument("inconsistent sequence length");
      out.tokens.insert(out.tokens.end(), tok.begin(), tok.end());
      out.targets.insert(out.targets.end(), tgt.begin(), tgt.end());
      out.query_positions.push_back(j.at("query_positions").get<std::vector<std::size_t>>());
      ++out.batch;
    } catch (const std::exception& e) {
      throw std::invalid_argument("jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace spectra::task
