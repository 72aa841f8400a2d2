#include "spectra/dsf/spectrum.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "spectra/autodiff/ops.hpp"
#include "spectra/dsf/realization.hpp"

namespace spectra::dsf {

std::string_view to_string(Phase phase) { return phase == Phase::Init ? "init" : "trained"; }

std::optional<Phase> parse_phase(std::string_view name) {
  if (name == "init") return Phase::Init;
  if (name == "trained") return Phase::Trained;
  return std::nullopt;
}

std::string model_identity(const models::ModelConfig& c) {
  std::string id = std::string(models::to_string(c.mixer_kind));
  id += "_L" + std::to_string(c.depth) + "_d" + std::to_string(c.model_dim) + "_h" + std::to_string(c.heads);
  if (!models::is_attention(c.mixer_kind)) id += "_N" + std::to_string(c.state_dim);
  if (c.mixer_kind == models::MixerKind::NormAttn) id += "_" + std::string(models::to_string(c.norm_fn));
  if (c.use_conv) id += "+conv" + std::to_string(c.conv_kernel);
  if (c.use_gate) id += "+gate";
  if (c.use_pos_embed != models::protocol_pos_embed(c.mixer_kind)) id += c.use_pos_embed ? "+pos" : "-pos";
  return id;
}

namespace {

struct SequenceResult {
  // [layer * traces + head] -> magnitudes
  std::vector<std::vector<double>> panels;
  std::size_t clamped = 0;
  std::optional<std::string> drop_reason;
};

Eigen::MatrixXd sequence_input(const ad::Tensor& u, std::size_t seq) {
  const std::size_t len = u.dim(1), d = u.dim(2);
  const auto data = u.data();
  Eigen::MatrixXd out(len, d);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t c = 0; c < d; ++c) out(i, c) = data[(seq * len + i) * d + c];
  }
  return out;
}

SequenceResult extract_sequence(const models::SequenceModel& model, const models::ForwardProbe& probe,
                                std::size_t seq) {
  const auto& config = model.config();
  const std::size_t traces = traces_per_layer(config);
  SequenceResult res;
  res.panels.resize(model.depth() * traces);
  for (std::size_t l = 0; l < model.depth(); ++l) {
    const Eigen::MatrixXd u = sequence_input(probe.mixer_inputs[l], seq);
    for (std::size_t h = 0; h < traces; ++h) {
      LpvTrace t;
      try {
        t = build_realization(config, model.layer(l).mixer, h, u, Materialize::LambdaOnly);
      } catch (const NonFiniteEta& e) {
        res.drop_reason = "sequence " + std::to_string(seq) + ", layer " + std::to_string(l) + ", head " +
                          std::to_string(h) + ": " + e.what();
        return res;
      }
      res.clamped += t.clamped;
      auto& mags = res.panels[l * traces + h];
      if (t.time_invariant && !models::is_mamba2(config.mixer_kind)) {
        for (const auto& z : t.lambda.front()) mags.push_back(std::abs(z));
      } else {
        for (std::size_t i = t.first_spectral_step; i < t.len; ++i) mags.push_back(std::abs(t.lambda[i](0)));
      }
      for (std::size_t i = 0; i < mags.size(); ++i) {
        if (!std::isfinite(mags[i])) {
          res.drop_reason = "sequence " + std::to_string(seq) + ", layer " + std::to_string(l) + ", head " +
                            std::to_string(h) + ": non-finite transition magnitude";
          return res;
        }
      }
    }
  }
  return res;
}

}  // namespace

SpectrumRecord extract_spectrum(const models::SequenceModel& model, std::span<const int> tokens, std::size_t batch,
                                std::size_t len, Phase phase, std::size_t threads) {
  const auto& config = model.config();
  models::ForwardProbe probe;
  {
    ad::NoGradGuard guard;
    model.forward(tokens, batch, len, &probe);
  }

  std::vector<SequenceResult> results(batch);
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, batch));
  if (workers == 1) {
    for (std::size_t s = 0; s < batch; ++s) results[s] = extract_sequence(model, probe, s);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t s = w; s < batch; s += workers) results[s] = extract_sequence(model, probe, s);
      });
    }
    for (auto& t : pool) t.join();
  }

  SpectrumRecord rec;
  rec.model_id = model_identity(config);
  rec.mixer_kind = std::string(models::to_string(config.mixer_kind));
  rec.phase = phase;
  rec.eval_batch = batch;
  rec.seq_len = len;
  const std::size_t traces = traces_per_layer(config);
  for (std::size_t l = 0; l < model.depth(); ++l) {
    for (std::size_t h = 0; h < traces; ++h) rec.layers.push_back({l, h, {}});
  }
  for (auto& r : results) {
    if (r.drop_reason) {
      ++rec.dropped_sequences;
      rec.drop_reasons.push_back(*r.drop_reason);
      continue;
    }
    rec.norm_eta_clamps += r.clamped;
    for (std::size_t p = 0; p < rec.layers.size(); ++p) rec.layers[p].sequences.push_back(std::move(r.panels[p]));
  }
  return rec;
}

nlohmann::json to_json(const SpectrumRecord& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& p : r.layers) {
    layers.push_back({{"layer", p.layer}, {"head", p.head}, {"sequences", p.sequences}});
  }
  nlohmann::json j = {
      {"model_id", r.model_id},
      {"mixer_kind", r.mixer_kind},
      {"phase", to_string(r.phase)},
      {"eval_batch", r.eval_batch},
      {"seq_len", r.seq_len},
      {"layers", std::move(layers)},
      {"dropped_sequences", r.dropped_sequences},
      {"drop_reasons", r.drop_reasons},
      {"norm_eta_clamps", r.norm_eta_clamps},
  };
  j["performance"] = r.performance ? nlohmann::json(*r.performance) : nlohmann::json(nullptr);
  return j;
}

SpectrumRecord spectrum_from_json(const nlohmann::json& j) {
  try {
    SpectrumRecord r;
    r.model_id = j.at("model_id").get<std::string>();
    r.mixer_kind = j.value("mixer_kind", std::string());
    const auto phase = parse_phase(j.at("phase").get<std::string>());
    if (!phase) throw std::invalid_argument("phase must be 'init' or 'trained'");
    r.phase = *phase;
    r.eval_batch = j.at("eval_batch").get<std::size_t>();
    r.seq_len = j.value("seq_len", std::size_t{0});
    for (const auto& p : j.at("layers")) {
      SpectrumPanel panel;
      panel.layer = p.at("layer").get<std::size_t>();
      panel.head = p.at("head").get<std::size_t>();
      panel.sequences = p.at("sequences").get<std::vector<std::vector<double>>>();
      for (const auto& seq : panel.sequences) {
        for (double v : seq) {
          if (!(v >= 0.0)) throw std::invalid_argument("eigenvalue magnitudes must be non-negative");
        }
      }
      r.layers.push_back(std::move(panel));
    }
    r.dropped_sequences = j.value("dropped_sequences", std::size_t{0});
    r.drop_reasons = j.value("drop_reasons", std::vector<std::string>{});
    r.norm_eta_clamps = j.value("norm_eta_clamps", std::size_t{0});
    if (j.contains("performance") && !j["performance"].is_null()) r.performance = j["performance"].get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("spectrum record: ") + e.what());
  }
}

}  // namespace spectra::dsf
