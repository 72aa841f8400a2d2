#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "spectra/dsf/spectrum.hpp"

namespace spectra::report {

enum class BinMode { Default, FineNearOne };

std::string_view to_string(BinMode mode);
std::optional<BinMode> parse_bin_mode(std::string_view name);

/// Half-open bins [e_k, e_{k+1}); the last bin [e_last, inf) is open-ended.
struct BinSpec {
  std::vector<double> edges;
  std::vector<std::string> labels;
  BinMode mode = BinMode::Default;

  std::size_t size() const { return edges.size(); }
  bool operator==(const BinSpec& other) const { return edges == other.edges; }
};

/// [0, 0.001, 0.1, 0.5, 0.9, 0.999, 1.001, inf)
BinSpec default_bins();
/// The default edges refined near one by 0.99, 0.9999 and 1.0001, so every
/// default bin is a union of consecutive fine bins.
BinSpec fine_bins();
BinSpec bins_for(BinMode mode);
/// Throws std::invalid_argument unless edges start at 0 and strictly increase.
BinSpec make_bins(std::vector<double> edges, BinMode mode);

/// Raised when inputs cannot be combined (different bin edges or models).
class IncompatibleInputs : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::vector<std::size_t> bin_counts(const std::vector<double>& magnitudes, const BinSpec& spec);
/// 100 * count / total per bin. Throws std::invalid_argument on an empty list
/// or a negative / NaN magnitude.
std::vector<double> bin_histogram(const std::vector<double>& magnitudes, const BinSpec& spec);
/// Sums fine-bin values into the bins of `coarse`; every coarse edge must be
/// a fine edge.
std::vector<double> coarsen(const std::vector<double>& fine_values, const BinSpec& fine, const BinSpec& coarse);
std::vector<std::size_t> coarsen(const std::vector<std::size_t>& fine_counts, const BinSpec& fine,
                                 const BinSpec& coarse);

struct BinStats {
  std::vector<double> mean;  // percent per bin
  std::vector<double> std;   // population standard deviation across sequences
  std::size_t sequences = 0;
};

/// Per-sequence histograms, then per-bin mean and population std.
BinStats aggregate_sequences(const std::vector<std::vector<double>>& sequences, const BinSpec& spec);

struct ReportPanel {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::optional<BinStats> init;
  std::optional<BinStats> trained;
};

struct HistogramReport {
  BinSpec bins;
  std::string model_id;
  std::string mixer_kind;
  std::vector<ReportPanel> panels;
  std::optional<double> performance;  // trained per-query accuracy
  std::size_t eval_batch = 0;
  std::size_t dropped_sequences = 0;
  std::string label;  // optional caption for side-by-side figures
};

/// Combines up to one init and one trained record of the same model.
HistogramReport aggregate(const std::vector<dsf::SpectrumRecord>& records, const BinSpec& spec);

nlohmann::json to_json(const HistogramReport& report);
HistogramReport report_from_json(const nlohmann::json& obj);

/// Grouped bar chart, one column per report and one row per (layer, head):
/// light bars at initialization, dark bars after training, error bars of one
/// standard deviation, performance in parentheses in each panel title.
/// Throws IncompatibleInputs when reports use different bin edges.
std::string render_svg(const std::vector<HistogramReport>& reports);

}  // namespace spectra::report
