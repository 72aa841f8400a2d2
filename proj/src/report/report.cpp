#include "spectra/report/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

namespace spectra::report {

std::string_view to_string(BinMode mode) { return mode == BinMode::Default ? "default" : "fine"; }

std::optional<BinMode> parse_bin_mode(std::string_view name) {
  if (name == "default") return BinMode::Default;
  if (name == "fine") return BinMode::FineNearOne;
  return std::nullopt;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string fixed(double v, int digits = 2) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::size_t bin_index(double v, const std::vector<double>& edges) {
  // Last edge <= v.
  const auto it = std::upper_bound(edges.begin(), edges.end(), v);
  return static_cast<std::size_t>(it - edges.begin()) - 1;
}

std::vector<std::size_t> coarse_map(const BinSpec& fine, const BinSpec& coarse) {
  std::vector<std::size_t> map(fine.size());
  for (double e : coarse.edges) {
    if (std::find(fine.edges.begin(), fine.edges.end(), e) == fine.edges.end()) {
      throw IncompatibleInputs("coarsen: coarse edge " + num(e) + " is not a fine edge");
    }
  }
  for (std::size_t k = 0; k < fine.size(); ++k) map[k] = bin_index(fine.edges[k], coarse.edges);
  return map;
}

nlohmann::json stats_json(const std::optional<BinStats>& s) {
  if (!s) return nullptr;
  return {{"mean", s->mean}, {"std", s->std}, {"sequences", s->sequences}};
}

std::optional<BinStats> stats_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  BinStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  s.sequences = j.value("sequences", std::size_t{0});
  return s;
}

}  // namespace

BinSpec make_bins(std::vector<double> edges, BinMode mode) {
  if (edges.empty() || edges.front() != 0.0) throw std::invalid_argument("bin edges must start at 0");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("bin edges must be strictly increasing");
  }
  BinSpec spec;
  spec.mode = mode;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (i + 1 < edges.size()) {
      spec.labels.push_back("[" + num(edges[i]) + ", " + num(edges[i + 1]) + ")");
    } else {
      spec.labels.push_back(">= " + num(edges[i]));
    }
  }
  spec.edges = std::move(edges);
  return spec;
}

BinSpec default_bins() { return make_bins({0.0, 0.001, 0.1, 0.5, 0.9, 0.999, 1.001}, BinMode::Default); }

BinSpec fine_bins() {
  return make_bins({0.0, 0.001, 0.1, 0.5, 0.9, 0.99, 0.999, 0.9999, 1.0001, 1.001}, BinMode::FineNearOne);
}

BinSpec bins_for(BinMode mode) { return mode == BinMode::Default ? default_bins() : fine_bins(); }

std::vector<std::size_t> bin_counts(const std::vector<double>& magnitudes, const BinSpec& spec) {
  if (magnitudes.empty()) throw std::invalid_argument("bin_histogram: empty magnitude list");
  std::vector<std::size_t> counts(spec.size(), 0);
  for (double v : magnitudes) {
    if (!(v >= 0.0)) throw std::invalid_argument("bin_histogram: magnitude " + num(v) + " is not >= 0");
    ++counts[bin_index(v, spec.edges)];
  }
  return counts;
}

std::vector<double> bin_histogram(const std::vector<double>& magnitudes, const BinSpec& spec) {
  const auto counts = bin_counts(magnitudes, spec);
  std::vector<double> pct(counts.size());
  const double total = static_cast<double>(magnitudes.size());
  for (std::size_t k = 0; k < counts.size(); ++k) pct[k] = 100.0 * static_cast<double>(counts[k]) / total;
  return pct;
}

std::vector<double> coarsen(const std::vector<double>& fine_values, const BinSpec& fine, const BinSpec& coarse) {
  const auto map = coarse_map(fine, coarse);
  std::vector<double> out(coarse.size(), 0.0);
  for (std::size_t k = 0; k < fine_values.size(); ++k) out[map[k]] += fine_values[k];
  return out;
}

std::vector<std::size_t> coarsen(const std::vector<std::size_t>& fine_counts, const BinSpec& fine,
                                 const BinSpec& coarse) {
  const auto map = coarse_map(fine, coarse);
  std::vector<std::size_t> out(coarse.size(), 0);
  for (std::size_t k = 0; k < fine_counts.size(); ++k) out[map[k]] += fine_counts[k];
  return out;
}

BinStats aggregate_sequences(const std::vector<std::vector<double>>& sequences, const BinSpec& spec) {
  if (sequences.empty()) throw std::invalid_argument("aggregate: no sequences");
  const std::size_t k = spec.size();
  std::vector<std::vector<double>> hist;
  hist.reserve(sequences.size());
  for (const auto& s : sequences) hist.push_back(bin_histogram(s, spec));
  const double n = static_cast<double>(hist.size());
  BinStats out;
  out.sequences = hist.size();
  out.mean.resize(k);
  out.std.resize(k);
  for (std::size_t b = 0; b < k; ++b) {
    // Shifted by the first value so identical inputs give exactly zero spread.
    const double x0 = hist.front()[b];
    double s1 = 0.0, s2 = 0.0;
    for (const auto& h : hist) {
      const double dx = h[b] - x0;
      s1 += dx;
      s2 += dx * dx;
    }
    out.mean[b] = x0 + s1 / n;
    out.std[b] = std::sqrt(std::max(0.0, (s2 - s1 * s1 / n) / n));
  }
  return out;
}

HistogramReport aggregate(const std::vector<dsf::SpectrumRecord>& records, const BinSpec& spec) {
  if (records.empty()) throw std::invalid_argument("aggregate: no spectrum records");
  HistogramReport rep;
  rep.bins = spec;
  rep.model_id = records.front().model_id;
  rep.mixer_kind = records.front().mixer_kind;
  rep.eval_batch = records.front().eval_batch;
  std::map<std::pair<std::size_t, std::size_t>, ReportPanel> panels;
  bool seen[2] = {false, false};
  for (const auto& r : records) {
    if (r.model_id != rep.model_id) {
      throw IncompatibleInputs("aggregate: records from different models ('" + rep.model_id + "' and '" +
                               r.model_id + "')");
    }
    const int slot = r.phase == dsf::Phase::Init ? 0 : 1;
    if (seen[slot]) throw IncompatibleInputs("aggregate: more than one '" + std::string(dsf::to_string(r.phase)) + "' record");
    seen[slot] = true;
    rep.dropped_sequences += r.dropped_sequences;
    if (r.phase == dsf::Phase::Trained) rep.performance = r.performance;
    for (const auto& p : r.layers) {
      auto& panel = panels[{p.layer, p.head}];
      panel.layer = p.layer;
      panel.head = p.head;
      auto stats = aggregate_sequences(p.sequences, spec);
      if (r.phase == dsf::Phase::Init) {
        panel.init = std::move(stats);
      } else {
        panel.trained = std::move(stats);
      }
    }
  }
  for (auto& [key, panel] : panels) rep.panels.push_back(std::move(panel));
  return rep;
}

nlohmann::json to_json(const HistogramReport& r) {
  nlohmann::json panels = nlohmann::json::array();
  for (const auto& p : r.panels) {
    panels.push_back({{"layer", p.layer}, {"head", p.head}, {"init", stats_json(p.init)}, {"trained", stats_json(p.trained)}});
  }
  nlohmann::json j = {{"bin_edges", r.bins.edges},
                      {"bin_labels", r.bins.labels},
                      {"panels", std::move(panels)},
                      {"metadata",
                       {{"model_id", r.model_id},
                        {"mixer_kind", r.mixer_kind},
                        {"bin_mode", to_string(r.bins.mode)},
                        {"std_convention", "population"},
                        {"eval_batch", r.eval_batch},
                        {"dropped_sequences", r.dropped_sequences},
                        {"label", r.label}}}};
  j["performance"] = r.performance ? nlohmann::json(*r.performance) : nlohmann::json(nullptr);
  return j;
}

HistogramReport report_from_json(const nlohmann::json& j) {
  try {
    HistogramReport r;
    const auto& meta = j.at("metadata");
    const auto mode = parse_bin_mode(meta.value("bin_mode", std::string("default")));
    r.bins = make_bins(j.at("bin_edges").get<std::vector<double>>(), mode.value_or(BinMode::Default));
    r.model_id = meta.value("model_id", std::string());
    r.mixer_kind = meta.value("mixer_kind", std::string());
    r.eval_batch = meta.value("eval_batch", std::size_t{0});
    r.dropped_sequences = meta.value("dropped_sequences", std::size_t{0});
    r.label = meta.value("label", std::string());
    for (const auto& p : j.at("panels")) {
      ReportPanel panel;
      panel.layer = p.at("layer").get<std::size_t>();
      panel.head = p.at("head").get<std::size_t>();
      panel.init = stats_from_json(p.at("init"));
      panel.trained = stats_from_json(p.at("trained"));
      r.panels.push_back(std::move(panel));
    }
    if (j.contains("performance") && !j["performance"].is_null()) r.performance = j["performance"].get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("histogram report: ") + e.what());
  }
}

std::string render_svg(const std::vector<HistogramReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("render_svg: no reports");
  for (const auto& r : reports) {
    if (!(r.bins == reports.front().bins)) throw IncompatibleInputs("render_svg: reports use different bin edges");
  }
  const BinSpec& bins = reports.front().bins;
  const std::size_t nbins = bins.size();
  std::size_t rows = 0;
  for (const auto& r : reports) rows = std::max(rows, r.panels.size());

  const double pw = 60.0 + 52.0 * static_cast<double>(nbins);  // panel width
  const double ph = 260.0;
  const double ml = 48.0, mr = 12.0, mt = 34.0, mb = 70.0;
  const double plot_w = pw - ml - mr, plot_h = ph - mt - mb;
  const double legend = 26.0;
  const double width = pw * static_cast<double>(reports.size());
  const double height = legend + ph * static_cast<double>(rows);
  const char* light = "#9ecae1";
  const char* dark = "#08519c";

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << fixed(width) << "\" height=\""
     << fixed(height) << "\" viewBox=\"0 0 " << fixed(width) << " " << fixed(height)
     << "\" font-family=\"Helvetica, Arial, sans-serif\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << fixed(width) << "\" height=\"" << fixed(height)
     << "\" fill=\"white\"/>\n";
  os << "<g font-size=\"11\">\n"
     << "<rect x=\"10\" y=\"8\" width=\"12\" height=\"12\" fill=\"" << light << "\"/>"
     << "<text x=\"26\" y=\"18\">initialization</text>\n"
     << "<rect x=\"120\" y=\"8\" width=\"12\" height=\"12\" fill=\"" << dark << "\"/>"
     << "<text x=\"136\" y=\"18\">trained</text>\n</g>\n";

  for (std::size_t c = 0; c < reports.size(); ++c) {
    const auto& rep = reports[c];
    const std::string perf = rep.performance ? fixed(100.0 * *rep.performance, 1) + "%" : std::string("n/a");
    const std::string name = rep.label.empty() ? rep.model_id : rep.label;
    for (std::size_t r = 0; r < rep.panels.size(); ++r) {
      const auto& panel = rep.panels[r];
      const double ox = pw * static_cast<double>(c) + ml;
      const double oy = legend + ph * static_cast<double>(r) + mt;
      auto ypos = [&](double pct) { return oy + plot_h * (1.0 - std::clamp(pct, 0.0, 100.0) / 100.0); };

      os << "<g>\n";
      os << "<text x=\"" << fixed(ox + plot_w / 2) << "\" y=\"" << fixed(oy - 14)
         << "\" font-size=\"12\" text-anchor=\"middle\">" << xml_escape(name) << " layer " << panel.layer
         << " head " << panel.head << " (" << perf << ")</text>\n";
      for (int t = 0; t <= 4; ++t) {
        const double y = ypos(25.0 * t);
        os << "<line x1=\"" << fixed(ox) << "\" y1=\"" << fixed(y) << "\" x2=\"" << fixed(ox + plot_w) << "\" y2=\""
           << fixed(y) << "\" stroke=\"#dddddd\" stroke-width=\"0.5\"/>"
           << "<text x=\"" << fixed(ox - 6) << "\" y=\"" << fixed(y + 3) << "\" font-size=\"9\" text-anchor=\"end\">"
           << 25 * t << "</text>\n";
      }
      os << "<text x=\"" << fixed(ox - 34) << "\" y=\"" << fixed(oy + plot_h / 2) << "\" font-size=\"10\" "
         << "text-anchor=\"middle\" transform=\"rotate(-90 " << fixed(ox - 34) << " " << fixed(oy + plot_h / 2)
         << ")\">% of eigenvalues</text>\n";
      os << "<line x1=\"" << fixed(ox) << "\" y1=\"" << fixed(oy + plot_h) << "\" x2=\"" << fixed(ox + plot_w)
         << "\" y2=\"" << fixed(oy + plot_h) << "\" stroke=\"black\"/>"
         << "<line x1=\"" << fixed(ox) << "\" y1=\"" << fixed(oy) << "\" x2=\"" << fixed(ox) << "\" y2=\""
         << fixed(oy + plot_h) << "\" stroke=\"black\"/>\n";

      const double gw = plot_w / static_cast<double>(nbins);
      const double bw = gw * 0.36;
      for (std::size_t k = 0; k < nbins; ++k) {
        const double gx = ox + gw * static_cast<double>(k);
        const std::optional<BinStats>* series[2] = {&panel.init, &panel.trained};
        const char* colors[2] = {light, dark};
        for (int s = 0; s < 2; ++s) {
          if (!*series[s]) continue;
          const double mean = (*series[s])->mean[k];
          const double sd = (*series[s])->std[k];
          const double x = gx + gw * 0.14 + bw * s;
          os << "<rect x=\"" << fixed(x) << "\" y=\"" << fixed(ypos(mean)) << "\" width=\"" << fixed(bw)
             << "\" height=\"" << fixed(oy + plot_h - ypos(mean)) << "\" fill=\"" << colors[s] << "\"/>";
          if (sd > 0.0) {
            const double cx = x + bw / 2;
            os << "<line x1=\"" << fixed(cx) << "\" y1=\"" << fixed(ypos(mean - sd)) << "\" x2=\"" << fixed(cx)
               << "\" y2=\"" << fixed(ypos(mean + sd)) << "\" stroke=\"black\" stroke-width=\"1\"/>";
          }
          os << '\n';
        }
        const double lx = gx + gw / 2;
        const double ly = oy + plot_h + 12;
        os << "<text x=\"" << fixed(lx) << "\" y=\"" << fixed(ly) << "\" font-size=\"9\" text-anchor=\"end\" "
           << "transform=\"rotate(-35 " << fixed(lx) << " " << fixed(ly) << ")\">" << xml_escape(bins.labels[k])
           << "</text>\n";
      }
      os << "<text x=\"" << fixed(ox + plot_w / 2) << "\" y=\"" << fixed(oy + plot_h + mb - 8)
         << "\" font-size=\"10\" text-anchor=\"middle\">|eigenvalue|</text>\n";
      os << "</g>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace spectra::report
