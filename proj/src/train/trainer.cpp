#include "spectra/train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "spectra/autodiff/ops.hpp"
#include "spectra/config_json.hpp"

namespace spectra::train {

using json_fields::join;

void TrainConfig::validate(std::string_view prefix) const {
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError(join(prefix, "warmup_fraction"), "0 < warmup_fraction < 1 violated");
  }
  if (batch_size == 0) throw ConfigError(join(prefix, "batch_size"), "batch_size >= 1 violated");
  if (!(peak_lr > 0.0)) throw ConfigError(join(prefix, "peak_lr"), "peak_lr > 0 violated");
  for (std::size_t i = 0; i < lr_sweep.size(); ++i) {
    if (!(lr_sweep[i] > 0.0)) {
      throw ConfigError(join(join(prefix, "lr_sweep"), std::to_string(i)), "learning rates must be positive");
    }
  }
  if (weight_decay < 0.0) throw ConfigError(join(prefix, "weight_decay"), "weight_decay >= 0 violated");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError(join(prefix, "betas"), "0 <= beta1 < 1 violated");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError(join(prefix, "betas"), "0 <= beta2 < 1 violated");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError(join(prefix, "grad_clip"), "grad_clip > 0 violated");
  if (eval_every == 0) throw ConfigError(join(prefix, "eval_every"), "eval_every >= 1 violated");
  if (eval_chunk == 0) throw ConfigError(join(prefix, "eval_chunk"), "eval_chunk >= 1 violated");
  if (early_stop_patience == 0) {
    throw ConfigError(join(prefix, "early_stop_patience"), "early_stop_patience >= 1 violated");
  }
}

TrainConfig train_config_from_json(const nlohmann::json& obj, std::string_view prefix) {
  using namespace json_fields;
  if (!obj.is_object()) throw ConfigError(std::string(prefix), "expected an object");
  TrainConfig c;
  c.steps = required<std::size_t>(obj, "steps", prefix);
  c.batch_size = optional<std::size_t>(obj, "batch_size", prefix, c.batch_size);
  c.peak_lr = optional<double>(obj, "peak_lr", prefix, c.peak_lr);
  c.warmup_fraction = optional<double>(obj, "warmup_fraction", prefix, c.warmup_fraction);
  c.weight_decay = optional<double>(obj, "weight_decay", prefix, c.weight_decay);
  if (obj.contains("betas")) {
    const std::string ptr = join(prefix, "betas");
    const auto& b = obj.at("betas");
    if (!b.is_array() || b.size() != 2) throw ConfigError(ptr, "expected [beta1, beta2]");
    c.beta1 = read_as<double>(b[0], join(ptr, "0"));
    c.beta2 = read_as<double>(b[1], join(ptr, "1"));
  }
  c.adam_eps = optional<double>(obj, "adam_eps", prefix, c.adam_eps);
  if (obj.contains("grad_clip") && !obj.at("grad_clip").is_null()) {
    c.grad_clip = read_as<double>(obj.at("grad_clip"), join(prefix, "grad_clip"));
  }
  if (obj.contains("lr_sweep") && !obj.at("lr_sweep").is_null()) {
    const std::string ptr = join(prefix, "lr_sweep");
    const auto& s = obj.at("lr_sweep");
    if (!s.is_array()) throw ConfigError(ptr, "expected an array of learning rates");
    for (std::size_t i = 0; i < s.size(); ++i) c.lr_sweep.push_back(read_as<double>(s[i], join(ptr, std::to_string(i))));
  }
  c.seed = optional<std::uint64_t>(obj, "seed", prefix, c.seed);
  c.eval_every = optional<std::size_t>(obj, "eval_every", prefix, c.eval_every);
  c.eval_chunk = optional<std::size_t>(obj, "eval_chunk", prefix, c.eval_chunk);
  c.early_stop = optional<bool>(obj, "early_stop", prefix, c.early_stop);
  c.early_stop_accuracy = optional<double>(obj, "early_stop_accuracy", prefix, c.early_stop_accuracy);
  c.early_stop_patience = optional<std::size_t>(obj, "early_stop_patience", prefix, c.early_stop_patience);
  c.sweep_short_circuit = optional<bool>(obj, "sweep_short_circuit", prefix, c.sweep_short_circuit);
  c.validate(prefix);
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"steps", c.steps},
                      {"batch_size", c.batch_size},
                      {"peak_lr", c.peak_lr},
                      {"warmup_fraction", c.warmup_fraction},
                      {"weight_decay", c.weight_decay},
                      {"betas", {c.beta1, c.beta2}},
                      {"adam_eps", c.adam_eps},
                      {"lr_sweep", c.lr_sweep},
                      {"seed", c.seed},
                      {"eval_every", c.eval_every},
                      {"eval_chunk", c.eval_chunk},
                      {"early_stop", c.early_stop},
                      {"early_stop_accuracy", c.early_stop_accuracy},
                      {"early_stop_patience", c.early_stop_patience},
                      {"sweep_short_circuit", c.sweep_short_circuit}};
  j["grad_clip"] = c.grad_clip ? nlohmann::json(*c.grad_clip) : nlohmann::json(nullptr);
  return j;
}

MqarTask mqar_task_from_json(const nlohmann::json& obj, std::string_view prefix) {
  MqarTask t;
  t.train = task::mqar_config_from_json(obj, prefix);
  t.eval = t.train;
  t.eval.num_examples = json_fields::optional<std::size_t>(obj, "eval_examples", prefix, 2000);
  t.eval.seed = json_fields::optional<std::uint64_t>(obj, "eval_seed", prefix, t.train.seed + 1);
  t.eval.validate(prefix);
  return t;
}

nlohmann::json to_json(const MqarTask& t) {
  nlohmann::json j = task::to_json(t.train);
  j["eval_examples"] = t.eval.num_examples;
  j["eval_seed"] = t.eval.seed;
  return j;
}

double lr_at(std::size_t step, const TrainConfig& c) {
  if (step >= c.steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(c.steps) + ")");
  }
  const double steps = static_cast<double>(c.steps);
  const double warm = c.warmup_fraction * steps;
  const double s = static_cast<double>(step);
  if (s < warm) return c.peak_lr * s / warm;
  const double t = (s - warm) / (steps - warm);
  return c.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

struct ChunkResult {
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::size_t correct = 0;
  std::size_t queries = 0;
  std::size_t perfect = 0;
};

ChunkResult eval_chunk(const models::SequenceModel& model, const task::MqarBatch& chunk) {
  ad::NoGradGuard guard;
  const ad::Tensor logits = model.forward(chunk.tokens, chunk.batch, chunk.len);
  ChunkResult r;
  for (int t : chunk.targets) r.loss_count += t != task::kIgnoreTarget ? 1 : 0;
  if (r.loss_count > 0) {
    r.loss_sum = ad::cross_entropy(logits, chunk.targets, task::kIgnoreTarget).item() * static_cast<double>(r.loss_count);
  }
  const task::MqarScore s = task::score(logits.data(), model.config().vocab_size, chunk);
  r.queries = s.queries;
  r.correct = static_cast<std::size_t>(std::llround(s.per_query_accuracy * static_cast<double>(s.queries)));
  r.perfect = static_cast<std::size_t>(std::llround(s.full_sequence_accuracy * static_cast<double>(s.sequences)));
  return r;
}

std::uint64_t draw_below(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

// Epoch-wise shuffled example order.
class BatchSampler {
 public:
  BatchSampler(std::size_t examples, std::uint64_t seed) : order_(examples), rng_(seed) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[draw_below(rng_, i)]);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

struct SingleRun {
  LrRun run;
  std::vector<ad::NamedArray> best_arrays;
  EvalMetrics best_eval;
};

SingleRun run_one(const models::ModelConfig& model_config, const TrainConfig& config, double peak_lr,
                  const task::MqarBatch& train_data, const task::MqarBatch& eval_data, const TrainOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  models::SequenceModel model(model_config);
  TrainConfig cfg = config;
  cfg.peak_lr = peak_lr;
  AdamW opt(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  BatchSampler sampler(train_data.batch, cfg.seed);

  SingleRun out;
  out.run.peak_lr = peak_lr;
  auto record_eval = [&](std::size_t step, double lr, double train_loss) {
    HistoryPoint p;
    p.step = step;
    p.lr = lr;
    p.train_loss = train_loss;
    p.eval = evaluate(model, eval_data, cfg.eval_chunk, options.threads);
    out.run.history.push_back(p);
    if (out.run.history.size() == 1 || p.eval.per_query_accuracy > out.run.best_per_query) {
      out.run.best_per_query = p.eval.per_query_accuracy;
      out.run.best_step = step;
      out.best_arrays = model.params().export_arrays();
      out.best_eval = p.eval;
    }
    if (options.log) {
      options.log("lr " + fmt(peak_lr, 6) + " step " + std::to_string(step) + " train_loss " + fmt(train_loss) +
                  " eval_loss " + fmt(p.eval.loss) + " per_query " + fmt(p.eval.per_query_accuracy) +
                  " full_seq " + fmt(p.eval.full_sequence_accuracy));
    }
    return p.eval.per_query_accuracy;
  };

  record_eval(0, 0.0, std::numeric_limits<double>::quiet_NaN());
  std::size_t streak = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  const std::size_t len = train_data.len;
  std::vector<int> tokens(cfg.batch_size * len), targets(cfg.batch_size * len);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(cfg.batch_size);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::copy_n(train_data.tokens.begin() + static_cast<std::ptrdiff_t>(idx[b] * len), len, tokens.begin() + static_cast<std::ptrdiff_t>(b * len));
      std::copy_n(train_data.targets.begin() + static_cast<std::ptrdiff_t>(idx[b] * len), len, targets.begin() + static_cast<std::ptrdiff_t>(b * len));
    }
    const double lr = lr_at(step, cfg);
    model.params().zero_grad();
    const ad::Tensor loss =
        ad::cross_entropy(model.forward(tokens, cfg.batch_size, len), targets, task::kIgnoreTarget);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      out.run.abort = AbortRecord{step, lr, "non-finite training loss (" + std::to_string(value) + ")"};
      if (options.log) options.log("lr " + fmt(peak_lr, 6) + " aborted at step " + std::to_string(step));
      break;
    }
    loss.backward();
    if (cfg.grad_clip) clip_grad_norm(model.params(), *cfg.grad_clip);
    opt.step(lr);
    out.run.steps_run = step + 1;
    loss_sum += value;
    ++loss_count;

    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      const double acc = record_eval(step + 1, lr, loss_sum / static_cast<double>(loss_count));
      loss_sum = 0.0;
      loss_count = 0;
      streak = acc >= cfg.early_stop_accuracy ? streak + 1 : 0;
      if (cfg.early_stop && streak >= cfg.early_stop_patience) {
        out.run.early_stopped = true;
        break;
      }
    }
  }
  out.run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

EvalMetrics evaluate(const models::SequenceModel& model, const task::MqarBatch& data, std::size_t chunk,
                     std::size_t threads) {
  if (data.batch == 0) throw std::invalid_argument("evaluate: empty evaluation set");
  chunk = std::max<std::size_t>(1, chunk);
  const std::size_t chunks = (data.batch + chunk - 1) / chunk;
  std::vector<ChunkResult> results(chunks);
  auto work = [&](std::size_t c) {
    const std::size_t first = c * chunk;
    results[c] = eval_chunk(model, data.slice(first, std::min(chunk, data.batch - first)));
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) work(c);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < chunks; c += workers) work(c);
      });
    }
    for (auto& t : pool) t.join();
  }
  ChunkResult total;
  for (const auto& r : results) {
    total.loss_sum += r.loss_sum;
    total.loss_count += r.loss_count;
    total.correct += r.correct;
    total.queries += r.queries;
    total.perfect += r.perfect;
  }
  EvalMetrics m;
  m.loss = total.loss_count ? total.loss_sum / static_cast<double>(total.loss_count) : 0.0;
  m.per_query_accuracy = total.queries ? static_cast<double>(total.correct) / static_cast<double>(total.queries) : 0.0;
  m.full_sequence_accuracy = static_cast<double>(total.perfect) / static_cast<double>(data.batch);
  return m;
}

RunArtifacts train(const models::ModelConfig& model_config, const TrainConfig& config, const MqarTask& task,
                   const TrainOptions& options) {
  model_config.validate();
  config.validate();
  task.train.validate("/task");
  task.eval.validate("/task");
  if (task.train.vocab_size != model_config.vocab_size) {
    throw ConfigError("/task/vocab_size", "task vocabulary " + std::to_string(task.train.vocab_size) +
                                              " differs from model vocabulary " +
                                              std::to_string(model_config.vocab_size));
  }
  if (model_config.use_pos_embed && task.train.seq_len > model_config.max_seq_len) {
    throw ConfigError("/task/seq_len", "seq_len exceeds the model's positional table (" +
                                           std::to_string(model_config.max_seq_len) + ")");
  }
  const task::MqarBatch train_data = task::mqar_generate(task.train);
  const task::MqarBatch eval_data = task::mqar_generate(task.eval);

  RunArtifacts art;
  art.init_checkpoint = models::SequenceModel(model_config).params().export_arrays();
  const std::vector<double> candidates = config.lr_sweep.empty() ? std::vector<double>{config.peak_lr} : config.lr_sweep;

  std::optional<std::size_t> chosen;
  std::size_t aborted = 0;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    SingleRun r = run_one(model_config, config, candidates[c], train_data, eval_data, options);
    if (r.run.abort) ++aborted;
    if (!chosen || r.run.best_per_query > art.runs[*chosen].best_per_query) {
      chosen = c;
      art.trained_checkpoint = std::move(r.best_arrays);
      art.best = r.best_eval;
    }
    const bool stop = r.run.early_stopped && config.sweep_short_circuit;
    art.runs.push_back(std::move(r.run));
    if (stop) {
      art.skipped_lrs.assign(candidates.begin() + static_cast<std::ptrdiff_t>(c + 1), candidates.end());
      break;
    }
  }
  art.history = art.runs[*chosen].history;
  if (!config.lr_sweep.empty()) art.chosen_lr = art.runs[*chosen].peak_lr;
  if (aborted == art.runs.size()) art.abort = art.runs.back().abort;
  return art;
}

nlohmann::json to_json(const HistoryPoint& p) {
  return {{"step", p.step},
          {"lr", p.lr},
          {"train_loss", finite_or_null(p.train_loss)},
          {"eval_loss", finite_or_null(p.eval.loss)},
          {"per_query_accuracy", p.eval.per_query_accuracy},
          {"full_sequence_accuracy", p.eval.full_sequence_accuracy}};
}

nlohmann::json to_json(const LrRun& r) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& p : r.history) history.push_back(to_json(p));
  nlohmann::json j = {{"peak_lr", r.peak_lr},
                      {"steps_run", r.steps_run},
                      {"early_stopped", r.early_stopped},
                      {"best_per_query_accuracy", r.best_per_query},
                      {"best_step", r.best_step},
                      {"wall_seconds", r.wall_seconds},
                      {"history", std::move(history)}};
  if (r.abort) {
    j["abort"] = {{"step", r.abort->step}, {"lr", r.abort->lr}, {"reason", r.abort->reason}};
  } else {
    j["abort"] = nullptr;
  }
  return j;
}

AdamW::AdamW(models::ParamStore& params, double beta1, double beta2, double eps, double weight_decay)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& e : params_.entries()) {
    m_.emplace_back(e.tensor.numel(), 0.0);
    v_.emplace_back(e.tensor.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto& entries = params_.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& e = entries[p];
    if (!e.tensor.has_grad()) continue;
    const auto g = e.tensor.grad();
    auto w = e.tensor.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    const double decay = e.decay ? lr * weight_decay_ : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= decay * w[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

double global_grad_norm(const models::ParamStore& params) {
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    for (double g : e.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(models::ParamStore& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& e : params.entries()) {
      if (!e.tensor.has_grad()) continue;
      for (double& g : e.tensor.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace spectra::train
