#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spectra/cli/commands.hpp"

// Desk-scale associative-recall experiments: MQAR with 8 key-value pairs,
// length 64, vocabulary 128, 20k training and 2k evaluation examples,
// 20k steps at batch 32 with the four-point learning-rate sweep.
namespace spectra::cli {

struct ReproArm {
  std::string name;
  RunConfig config;
};

struct ReproOptions {
  /// Short schedule for smoke runs; results are not comparable to the
  /// acceptance thresholds.
  bool quick = false;
  /// Arm names to run; empty runs all.
  std::vector<std::string> only;
  /// Reuse a completed run directory whose recorded config matches exactly
  /// and whose trained checkpoint re-evaluates to the recorded accuracy.
  bool reuse = true;
};

/// softmax_2l, mamba2_2l, lti_2l, lru_2l, softmax_1l, softmax_1l_conv, mamba2_1l
std::vector<ReproArm> repro_arms(const ReproOptions& options);

struct ArmResult {
  std::string name;
  std::filesystem::path dir;
  double per_query = 0.0;
  double full_sequence = 0.0;
  std::optional<double> chosen_lr;
  bool reused = false;
  report::HistogramReport report;
};

ArmResult run_arm(const ReproArm& arm, const std::filesystem::path& root, std::size_t threads, bool reuse,
                  const LogFn& log = {});

struct CriterionResult {
  std::string id;
  std::string description;
  bool passed = false;
  std::string detail;
  /// False for observations reported alongside the criteria without affecting the exit status.
  bool gating = true;
};

/// Verdicts for the training criteria over whichever arms are present.
std::vector<CriterionResult> training_criteria(const std::map<std::string, ArmResult>& arms);

/// Percentage of eigenvalue mass in bins lying entirely below `limit`.
double mass_below(const report::BinStats& stats, const report::BinSpec& bins, double limit);

}  // namespace spectra::cli
