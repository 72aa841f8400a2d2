#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "spectra/autodiff/checkpoint.hpp"
#include "spectra/models/model.hpp"
#include "spectra/task/mqar.hpp"

namespace spectra::train {

/// Peak learning rates of the default sweep: logspace(-4, -2, 4).
inline const std::vector<double> kDefaultLrSweep = {1e-4, 4.64e-4, 2.15e-3, 1e-2};

struct TrainConfig {
  std::size_t steps = 20000;
  std::size_t batch_size = 32;
  double peak_lr = 2.15e-3;
  double warmup_fraction = 0.10;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> grad_clip;
  /// When non-empty, the whole run repeats per candidate peak lr, in order.
  std::vector<double> lr_sweep;
  std::uint64_t seed = 0;
  std::size_t eval_every = 500;
  /// Sequences per evaluation forward pass.
  std::size_t eval_chunk = 200;
  bool early_stop = true;
  double early_stop_accuracy = 0.99;
  std::size_t early_stop_patience = 3;
  /// Skip the remaining sweep candidates once one run early-stops.
  bool sweep_short_circuit = true;

  /// steps = 0 is accepted (no optimizer step is taken).
  void validate(std::string_view prefix = "/train") const;
};

TrainConfig train_config_from_json(const nlohmann::json& obj, std::string_view prefix = "/train");
nlohmann::json to_json(const TrainConfig& config);

/// Training and evaluation splits of the associative-recall task.
struct MqarTask {
  task::MqarConfig train;
  task::MqarConfig eval;
};

/// Reads the task block; `eval_examples` (default 2000) and `eval_seed`
/// (default seed + 1) describe the evaluation split.
MqarTask mqar_task_from_json(const nlohmann::json& obj, std::string_view prefix = "/task");
nlohmann::json to_json(const MqarTask& task);

/// Linear warmup from 0 to peak_lr over warmup_fraction * steps, then cosine
/// decay towards 0 at `steps`. Throws std::out_of_range unless 0 <= step < steps.
double lr_at(std::size_t step, const TrainConfig& config);

struct EvalMetrics {
  double loss = 0.0;
  double per_query_accuracy = 0.0;
  double full_sequence_accuracy = 0.0;
};

/// Scores the model on `data` in chunks of `chunk` sequences without
/// recording gradients. Chunks fan out over up to `threads` threads; the
/// reduction order is fixed, so the result is independent of `threads`.
EvalMetrics evaluate(const models::SequenceModel& model, const task::MqarBatch& data, std::size_t chunk = 200,
                     std::size_t threads = 1);

struct HistoryPoint {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean over steps since the previous point
  EvalMetrics eval;
};

struct AbortRecord {
  std::size_t step = 0;
  double lr = 0.0;
  std::string reason;
};

struct LrRun {
  double peak_lr = 0.0;
  std::vector<HistoryPoint> history;
  std::size_t steps_run = 0;
  bool early_stopped = false;
  std::optional<AbortRecord> abort;
  /// Best evaluation accuracy over the history and the step it occurred at.
  double best_per_query = 0.0;
  std::size_t best_step = 0;
  double wall_seconds = 0.0;
};

struct RunArtifacts {
  std::vector<ad::NamedArray> init_checkpoint;
  /// Parameters at the best evaluation of the chosen run.
  std::vector<ad::NamedArray> trained_checkpoint;
  /// History of the chosen run.
  std::vector<HistoryPoint> history;
  std::optional<double> chosen_lr;
  std::vector<LrRun> runs;
  /// Candidates not run because an earlier one early-stopped.
  std::vector<double> skipped_lrs;
  std::optional<AbortRecord> abort;  // set when every candidate aborted
  EvalMetrics best;
};

struct TrainOptions {
  std::size_t threads = 1;
  std::function<void(const std::string&)> log;
};

/// Trains from the model config's initialization on the task's training
/// split. With an lr sweep every candidate starts from the same
/// initialization and the one with the best evaluation per-query accuracy is
/// kept (ties go to the earlier candidate).
RunArtifacts train(const models::ModelConfig& model_config, const TrainConfig& config, const MqarTask& task,
                   const TrainOptions& options = {});

nlohmann::json to_json(const HistoryPoint& point);
nlohmann::json to_json(const LrRun& run);

/// Decoupled-weight-decay Adam over a ParamStore. Decay applies only to
/// entries flagged `decay`.
class AdamW {
 public:
  AdamW(models::ParamStore& params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  models::ParamStore& params_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Global L2 norm over all populated gradients.
double global_grad_norm(const models::ParamStore& params);
/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_grad_norm(models::ParamStore& params, double max_norm);

}  // namespace spectra::train
