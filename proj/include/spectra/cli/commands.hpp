#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "spectra/dsf/spectrum.hpp"
#include "spectra/models/config.hpp"
#include "spectra/report/report.hpp"
#include "spectra/train/trainer.hpp"

namespace spectra::cli {

/// Process exit codes; stable across versions.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitMissingArtifact = 3,
  kExitIncompatible = 4,
};

class CliError : public std::runtime_error {
 public:
  CliError(int code, const std::string& message) : std::runtime_error(message), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

/// Everything a training run is configured by:
///   {"model": {...}, "train": {...}, "task": {...}, "spectra": {"eval_batch": n}}
struct RunConfig {
  models::ModelConfig model;
  train::TrainConfig train;
  train::MqarTask task;
  std::size_t spectra_eval_batch = 64;
  std::vector<std::string> notes;
};

/// Throws ConfigError with a JSON pointer into `obj`.
RunConfig run_config_from_json(const nlohmann::json& obj);
nlohmann::json to_json(const RunConfig& config);

/// Parses a JSON file; missing file -> CliError(3), syntax error -> CliError(2).
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

using LogFn = std::function<void(const std::string&)>;

struct TrainOutcome {
  train::RunArtifacts artifacts;
  nlohmann::json manifest;
};

/// Trains and writes init.ckpt, trained.ckpt and run.json into `out_dir`.
TrainOutcome train_to_directory(const RunConfig& config, const std::filesystem::path& out_dir, std::size_t threads,
                                const std::vector<std::string>& command_line, const LogFn& log = {});

/// Loads a run directory and extracts spectra for the requested phases on the
/// first `spectra.eval_batch` sequences of the evaluation split.
std::vector<dsf::SpectrumRecord> spectra_for_run(const std::filesystem::path& run_dir,
                                                 const std::vector<dsf::Phase>& phases, std::size_t threads);

nlohmann::json records_to_json(const std::vector<dsf::SpectrumRecord>& records);
std::vector<dsf::SpectrumRecord> records_from_json(const nlohmann::json& obj);

/// Thread default: SPECTRA_BENCH_THREADS when set and valid, else 1.
std::size_t default_threads();

/// Entry point of the spectra-bench executable; returns the exit code.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace spectra::cli
