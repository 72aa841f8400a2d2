#include "spectra/cli/commands.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "spectra/autodiff/checkpoint.hpp"
#include "spectra/cli/repro.hpp"
#include "spectra/config_json.hpp"
#include "spectra/task/mqar.hpp"

#ifndef SPECTRA_VERSION
#define SPECTRA_VERSION "0.0.0"
#endif

namespace spectra::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kInitCheckpoint = "init.ckpt";
constexpr const char* kTrainedCheckpoint = "trained.ckpt";
constexpr const char* kManifest = "run.json";

const json& required_object(const json& obj, const char* key) {
  const std::string pointer = std::string("/") + key;
  if (!obj.contains(key)) throw ConfigError(pointer, "missing required field");
  if (!obj.at(key).is_object()) throw ConfigError(pointer, "expected an object");
  return obj.at(key);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw CliError(kExitMissingArtifact, what + " not found: " + path.string());
}

}  // namespace

RunConfig run_config_from_json(const json& obj) {
  if (!obj.is_object()) throw ConfigError("", "expected a JSON object");
  RunConfig c;
  c.model = models::model_config_from_json(required_object(obj, "model"), "/model", &c.notes);
  c.train = train::train_config_from_json(required_object(obj, "train"), "/train");
  c.task = train::mqar_task_from_json(required_object(obj, "task"), "/task");
  if (obj.contains("spectra")) {
    c.spectra_eval_batch = json_fields::optional<std::size_t>(obj.at("spectra"), "eval_batch", "/spectra", 64);
    if (c.spectra_eval_batch == 0) throw ConfigError("/spectra/eval_batch", "eval_batch >= 1 violated");
  }
  if (c.task.train.vocab_size != c.model.vocab_size) {
    throw ConfigError("/task/vocab_size", "task vocabulary " + std::to_string(c.task.train.vocab_size) +
                                              " differs from model vocab_size " + std::to_string(c.model.vocab_size));
  }
  if (c.model.use_pos_embed && c.task.train.seq_len > c.model.max_seq_len) {
    throw ConfigError("/task/seq_len", "seq_len " + std::to_string(c.task.train.seq_len) +
                                           " exceeds model max_seq_len " + std::to_string(c.model.max_seq_len));
  }
  if (c.spectra_eval_batch > c.task.eval.num_examples) {
    throw ConfigError("/spectra/eval_batch", "eval_batch exceeds the evaluation split (" +
                                                 std::to_string(c.task.eval.num_examples) + " examples)");
  }
  return c;
}

json to_json(const RunConfig& c) {
  return {{"model", models::to_json(c.model)},
          {"train", train::to_json(c.train)},
          {"task", train::to_json(c.task)},
          {"spectra", {{"eval_batch", c.spectra_eval_batch}}}};
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CliError(kExitMissingArtifact, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("", path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::size_t default_threads() {
  if (const char* env = std::getenv("SPECTRA_BENCH_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

TrainOutcome train_to_directory(const RunConfig& config, const fs::path& out_dir, std::size_t threads,
                                const std::vector<std::string>& command_line, const LogFn& log) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out_dir);
  train::TrainOptions opts;
  opts.threads = threads;
  opts.log = log;
  TrainOutcome out;
  out.artifacts = train::train(config.model, config.train, config.task, opts);
  const auto& art = out.artifacts;
  ad::save_checkpoint(out_dir / kInitCheckpoint, art.init_checkpoint);
  ad::save_checkpoint(out_dir / kTrainedCheckpoint, art.trained_checkpoint);

  json history = json::array();
  for (const auto& p : art.history) history.push_back(train::to_json(p));
  json runs = json::array();
  for (const auto& r : art.runs) runs.push_back(train::to_json(r));
  json& m = out.manifest;
  m["tool"] = "spectra-bench";
  m["version"] = SPECTRA_VERSION;
  m["command_line"] = command_line;
  m["config"] = to_json(config);
  m["notes"] = config.notes;
  m["seed"] = {{"model", config.model.seed}, {"train", config.train.seed}, {"task", config.task.train.seed},
               {"eval", config.task.eval.seed}};
  m["artifacts"] = {{"init_checkpoint", kInitCheckpoint},
                    {"trained_checkpoint", kTrainedCheckpoint},
                    {"manifest", kManifest}};
  m["chosen_lr"] = art.chosen_lr ? json(*art.chosen_lr) : json(nullptr);
  m["history"] = std::move(history);
  m["runs"] = std::move(runs);
  m["skipped_lrs"] = art.skipped_lrs;
  if (art.abort) {
    m["abort"] = {{"step", art.abort->step}, {"lr", art.abort->lr}, {"reason", art.abort->reason}};
  } else {
    m["abort"] = nullptr;
  }
  m["best"] = {{"per_query_accuracy", art.best.per_query_accuracy},
               {"full_sequence_accuracy", art.best.full_sequence_accuracy},
               {"eval_loss", art.best.loss}};
  m["complete"] = true;
  m["timings"] = {
      {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
  write_text_file(out_dir / kManifest, m.dump(2) + "\n");
  return out;
}

std::vector<dsf::SpectrumRecord> spectra_for_run(const fs::path& run_dir, const std::vector<dsf::Phase>& phases,
                                                 std::size_t threads) {
  require_file(run_dir / kManifest, "run manifest");
  const json manifest = read_json_file(run_dir / kManifest);
  if (!manifest.contains("config")) throw CliError(kExitIncompatible, "run manifest has no config block");
  const RunConfig config = run_config_from_json(manifest.at("config"));
  const task::MqarBatch batch = task::mqar_generate(config.task.eval, 0, config.spectra_eval_batch);

  std::vector<dsf::SpectrumRecord> out;
  for (dsf::Phase phase : phases) {
    const fs::path ckpt = run_dir / (phase == dsf::Phase::Init ? kInitCheckpoint : kTrainedCheckpoint);
    require_file(ckpt, std::string(dsf::to_string(phase)) + " checkpoint");
    models::SequenceModel model(config.model);
    try {
      model.params().import_arrays(ad::load_checkpoint(ckpt));
    } catch (const ad::CheckpointError& e) {
      throw CliError(kExitIncompatible, ckpt.string() + ": " + e.what());
    }
    dsf::SpectrumRecord rec = dsf::extract_spectrum(model, batch.tokens, batch.batch, batch.len, phase, threads);
    const auto& history = manifest.value("history", json::array());
    if (phase == dsf::Phase::Init && !history.empty()) {
      rec.performance = history.front().at("per_query_accuracy").get<double>();
    } else if (phase == dsf::Phase::Trained && manifest.contains("best")) {
      rec.performance = manifest.at("best").at("per_query_accuracy").get<double>();
    }
    out.push_back(std::move(rec));
  }
  return out;
}

json records_to_json(const std::vector<dsf::SpectrumRecord>& records) {
  json arr = json::array();
  for (const auto& r : records) arr.push_back(dsf::to_json(r));
  return {{"records", std::move(arr)}};
}

std::vector<dsf::SpectrumRecord> records_from_json(const json& obj) {
  std::vector<dsf::SpectrumRecord> out;
  if (!obj.contains("records") || !obj.at("records").is_array()) {
    throw std::invalid_argument("spectra file has no 'records' array");
  }
  for (const auto& r : obj.at("records")) out.push_back(dsf::spectrum_from_json(r));
  return out;
}

namespace {

int cmd_train(const std::string& config_path, const std::string& out_dir, bool sweep_lr,
              std::optional<std::uint64_t> seed, std::optional<std::size_t> steps, std::size_t threads,
              const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  json raw = read_json_file(config_path);
  RunConfig config = run_config_from_json(raw);
  if (sweep_lr && config.train.lr_sweep.empty()) config.train.lr_sweep = train::kDefaultLrSweep;
  if (seed) {
    config.model.seed = *seed;
    config.train.seed = *seed;
  }
  if (steps) config.train.steps = *steps;
  for (const auto& n : config.notes) err << "note: " << n << '\n';
  const TrainOutcome res = train_to_directory(config, out_dir, threads, argv, [&](const std::string& line) {
    err << line << '\n';
  });
  const auto& art = res.artifacts;
  if (art.abort) {
    err << "training aborted at step " << art.abort->step << " (lr " << art.abort->lr << "): " << art.abort->reason
        << '\n';
  }
  out << "run written to " << out_dir << "; per_query_accuracy " << art.best.per_query_accuracy
      << ", full_sequence_accuracy " << art.best.full_sequence_accuracy;
  if (art.chosen_lr) out << ", chosen_lr " << *art.chosen_lr;
  out << '\n';
  return kExitOk;
}

int cmd_spectra(const std::string& run_dir, const std::string& phase, const std::string& out_path,
                std::size_t threads, std::ostream& out) {
  std::vector<dsf::Phase> phases;
  if (phase == "both") {
    phases = {dsf::Phase::Init, dsf::Phase::Trained};
  } else if (auto p = dsf::parse_phase(phase)) {
    phases = {*p};
  } else {
    throw CliError(kExitConfig, "--phase must be init, trained or both");
  }
  const auto records = spectra_for_run(run_dir, phases, threads);
  write_text_file(out_path, records_to_json(records).dump() + "\n");
  for (const auto& r : records) {
    out << to_string(r.phase) << ": " << r.layers.size() << " panels over " << (r.eval_batch - r.dropped_sequences)
        << " sequences";
    if (r.dropped_sequences) out << " (" << r.dropped_sequences << " dropped)";
    out << '\n';
  }
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& bins_name, const std::string& svg_path,
               const std::string& json_path, const std::string& labels, std::ostream& out) {
  const auto mode = report::parse_bin_mode(bins_name);
  if (!mode) throw CliError(kExitConfig, "--bins must be 'default' or 'fine'");
  const report::BinSpec bins = report::bins_for(*mode);
  const auto names = split_csv(labels);
  std::vector<report::HistogramReport> reports;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const json doc = read_json_file(inputs[i]);
    report::HistogramReport rep;
    try {
      if (doc.contains("records")) {
        rep = report::aggregate(records_from_json(doc), bins);
      } else if (doc.contains("bin_edges")) {
        rep = report::report_from_json(doc);
        if (!(rep.bins == bins)) {
          throw report::IncompatibleInputs(inputs[i] + " uses bin edges that differ from --bins " + bins_name);
        }
      } else {
        throw report::IncompatibleInputs(inputs[i] + " is neither a spectra file nor a histogram report");
      }
    } catch (const report::IncompatibleInputs&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw report::IncompatibleInputs(inputs[i] + ": " + e.what());
    }
    if (i < names.size()) rep.label = names[i];
    reports.push_back(std::move(rep));
  }
  const std::string svg = report::render_svg(reports);
  if (!svg_path.empty()) write_text_file(svg_path, svg);
  if (!json_path.empty()) {
    json doc;
    if (reports.size() == 1) {
      doc = report::to_json(reports.front());
    } else {
      doc["reports"] = json::array();
      for (const auto& r : reports) doc["reports"].push_back(report::to_json(r));
    }
    write_text_file(json_path, doc.dump(2) + "\n");
  }
  out << reports.size() << " report(s), " << bins.size() << " bins\n";
  return kExitOk;
}

int cmd_mqar_gen(const std::string& config_path, const std::string& out_path, std::ostream& out) {
  const json raw = read_json_file(config_path);
  const bool nested = raw.is_object() && raw.contains("task");
  const task::MqarConfig config =
      task::mqar_config_from_json(nested ? raw.at("task") : raw, nested ? "/task" : "");
  const task::MqarBatch batch = task::mqar_generate(config);
  const auto violations = task::verify_pairing(batch, config.vocab_size);
  if (!violations.empty()) throw std::logic_error("generated data failed verification: " + violations.front());
  std::ostringstream os;
  task::write_jsonl(os, batch);
  write_text_file(out_path, os.str());
  out << batch.batch << " sequences written to " << out_path << " (pairing verified)\n";
  return kExitOk;
}

int cmd_repro(const std::string& out_dir, bool quick, const std::string& arms, bool no_reuse, std::size_t threads,
              std::ostream& out, std::ostream& err) {
  ReproOptions opts;
  opts.quick = quick;
  opts.only = split_csv(arms);
  opts.reuse = !no_reuse;
  const auto selected = repro_arms(opts);
  if (selected.empty()) throw CliError(kExitConfig, "--arms selects no known arm");
  std::map<std::string, ArmResult> results;
  json summary = {{"quick", quick}, {"arms", json::object()}};
  for (const auto& arm : selected) {
    err << "== arm " << arm.name << '\n';
    ArmResult r = run_arm(arm, out_dir, threads, opts.reuse, [&](const std::string& l) { err << arm.name << ": " << l << '\n'; });
    summary["arms"][arm.name] = {{"per_query_accuracy", r.per_query},
                                 {"full_sequence_accuracy", r.full_sequence},
                                 {"chosen_lr", r.chosen_lr ? json(*r.chosen_lr) : json(nullptr)},
                                 {"reused", r.reused},
                                 {"dir", r.dir.string()}};
    out << arm.name << ": per_query " << r.per_query << " full_sequence " << r.full_sequence << '\n';
    results.emplace(arm.name, std::move(r));
  }
  json crit = json::array();
  bool all = true;
  for (const auto& c : training_criteria(results)) {
    out << (c.passed ? "PASS " : "FAIL ") << c.id << " " << c.description
        << (c.gating ? "" : " [observation, not gating]") << " -- " << c.detail << '\n';
    crit.push_back({{"id", c.id},
                    {"passed", c.passed},
                    {"description", c.description},
                    {"detail", c.detail},
                    {"gating", c.gating}});
    if (c.gating) all = all && c.passed;
  }
  summary["criteria"] = std::move(crit);
  write_text_file(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");
  return all ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spectral-analysis workbench for sequence models", "spectra-bench"};
  app.set_version_flag("--version", SPECTRA_VERSION);
  app.require_subcommand(1);
  std::size_t threads = default_threads();
  app.add_option("--threads", threads, "Worker threads (default: SPECTRA_BENCH_THREADS or 1)")
      ->check(CLI::PositiveNumber);

  std::string config_path, out_path, run_dir, phase = "both", bins = "default", svg_path, json_path, labels, arms;
  std::vector<std::string> inputs;
  bool sweep_lr = false, quick = false, no_reuse = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;

  auto* train = app.add_subcommand("train", "Train a model on MQAR and write a run directory");
  train->add_option("--config", config_path, "Run config JSON")->required();
  train->add_option("--out", out_path, "Output run directory")->required();
  train->add_flag("--sweep-lr", sweep_lr, "Sweep the default learning rates when the config has no sweep");
  train->add_option("--seed", seed, "Override model and training seeds");
  train->add_option("--steps", steps, "Override the number of optimizer steps");
  train->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* spectra = app.add_subcommand("spectra", "Extract eigenvalue spectra from a run directory");
  spectra->add_option("--run", run_dir, "Run directory")->required();
  spectra->add_option("--phase", phase, "init, trained or both")->check(CLI::IsMember({"init", "trained", "both"}));
  spectra->add_option("--out", out_path, "Output spectra JSON")->required();
  spectra->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* rep = app.add_subcommand("report", "Bin spectra into histogram reports and figures");
  rep->add_option("--spectra", inputs, "Spectra files (or histogram report JSON)")->required()->expected(1, -1);
  rep->add_option("--bins", bins, "default or fine")->check(CLI::IsMember({"default", "fine"}));
  rep->add_option("--svg", svg_path, "Output SVG");
  rep->add_option("--json", json_path, "Output report JSON");
  rep->add_option("--labels", labels, "Comma-separated panel captions, one per input");

  auto* gen = app.add_subcommand("mqar-gen", "Generate an MQAR dataset as JSON lines");
  gen->add_option("--config", config_path, "Task config JSON")->required();
  gen->add_option("--out", out_path, "Output JSONL")->required();

  auto* repro = app.add_subcommand("repro-mqar", "Run the desk-scale MQAR experiments end to end");
  repro->add_option("--out", out_path, "Output directory")->default_val("repro-mqar");
  repro->add_flag("--quick", quick, "Short smoke schedule (not comparable to acceptance thresholds)");
  repro->add_option("--arms", arms, "Comma-separated subset of arms");
  repro->add_flag("--no-reuse", no_reuse, "Retrain even when a matching completed run exists");
  repro->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  const std::vector<std::string> command_line(argv, argv + argc);
  try {
    if (train->parsed()) {
      return cmd_train(config_path, out_path, sweep_lr, seed, steps, threads, command_line, out, err);
    }
    if (spectra->parsed()) return cmd_spectra(run_dir, phase, out_path, threads, out);
    if (rep->parsed()) return cmd_report(inputs, bins, svg_path, json_path, labels, out);
    if (gen->parsed()) return cmd_mqar_gen(config_path, out_path, out);
    if (repro->parsed()) return cmd_repro(out_path, quick, arms, no_reuse, threads, out, err);
  } catch (const ConfigError& e) {
    err << "config error at " << (e.pointer().empty() ? "/" : e.pointer()) << ": " << e.message() << '\n';
    return kExitConfig;
  } catch (const CliError& e) {
    err << "error: " << e.what() << '\n';
    return e.code();
  } catch (const report::IncompatibleInputs& e) {
    err << "incompatible inputs: " << e.what() << '\n';
    return kExitIncompatible;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace spectra::cli
