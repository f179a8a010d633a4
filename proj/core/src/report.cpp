#include "boundless/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>

#include "boundless/errors.hpp"

namespace boundless::report {

using nlohmann::json;

double iia_scaled(double iia, double task_accuracy, double base_rate) {
  const double span = task_accuracy - base_rate;
  if (!(span > 0.0)) return 0.0;
  return std::clamp((iia - base_rate) / span, 0.0, 1.0);
}

void write_heatmap_csv(std::ostream& out, const bdas::IIAHeatmap& map) {
  out << "hypothesis,layer,position,iia,iia_scaled,best_seed\n";
  for (const auto& c : map.cells) {
    out << map.hypothesis << ',' << c.site.layer << ',' << c.site.position << ',';
    if (c.iia) {
      out << bdas::format_double(*c.iia) << ','
          << bdas::format_double(iia_scaled(*c.iia, map.task_accuracy, map.base_rate)) << ','
          << *c.best_seed;
    } else {
      out << ",,";
    }
    out << '\n';
  }
}

bdas::IIAHeatmap read_heatmap_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "hypothesis,layer,position,iia,iia_scaled,best_seed") {
    throw ReportError("heatmap CSV: missing header hypothesis,layer,position,iia,iia_scaled,best_seed");
  }
  bdas::IIAHeatmap map;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    const std::string where = "heatmap CSV line " + std::to_string(line_no) + ": ";
    if (f.size() != 6) throw ReportError(where + "expected 6 fields");
    if (map.hypothesis.empty()) map.hypothesis = f[0];
    if (f[0] != map.hypothesis) throw ReportError(where + "mixes hypotheses");
    try {
      bdas::HeatmapCell cell;
      cell.site = {std::stoull(f[1]), std::stoull(f[2])};
      if (!f[3].empty()) {
        cell.iia = std::stod(f[3]);
        if (*cell.iia < 0.0 || *cell.iia > 1.0) throw ReportError("iia outside [0, 1]");
        cell.best_seed = std::stoull(f[5]);
      }
      map.cells.push_back(std::move(cell));
    } catch (const std::exception& e) {
      throw ReportError(where + e.what());
    }
  }
  std::sort(map.cells.begin(), map.cells.end(),
            [](const auto& a, const auto& b) { return a.site < b.site; });
  return map;
}

std::string heatmap_meta_json(const bdas::IIAHeatmap& map) {
  json missing = json::array();
  for (const auto& c : map.cells) {
    if (!c.iia) {
      missing.push_back({{"layer", c.site.layer}, {"position", c.site.position}, {"error", c.error}});
    }
  }
  const json meta = {{"hypothesis", map.hypothesis},
                     {"task_accuracy", map.task_accuracy},
                     {"base_rate", map.base_rate},
                     {"control_site", {{"layer", map.control_site.layer},
                                       {"position", map.control_site.position}}},
                     {"missing", missing}};
  return meta.dump(2) + "\n";
}

void apply_heatmap_meta(bdas::IIAHeatmap& map, std::string_view json_text) {
  try {
    const json meta = json::parse(json_text);
    map.task_accuracy = meta.at("task_accuracy").get<double>();
    map.base_rate = meta.at("base_rate").get<double>();
    const json& c = meta.at("control_site");
    map.control_site = {c.at("layer").get<std::size_t>(), c.at("position").get<std::size_t>()};
    for (const auto& m : meta.at("missing")) {
      const net::ActivationSite s{m.at("layer").get<std::size_t>(), m.at("position").get<std::size_t>()};
      for (auto& cell : map.cells) {
        if (cell.site == s) cell.error = m.at("error").get<std::string>();
      }
    }
  } catch (const json::exception& e) {
    throw ReportError("heatmap metadata: " + std::string(e.what()));
  }
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ReportError("correlation of vectors with different lengths");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  double ma = 0.0;
  double mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return std::nullopt;
  if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double population_variance(std::span<const double> v) {
  if (v.empty()) throw ReportError("variance of an empty heatmap");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size());
}

SummaryRow summarize(const std::string& experiment, const bdas::IIAHeatmap& map,
                     const bdas::IIAHeatmap* reference) {
  std::vector<double> present;
  for (const auto& c : map.cells) {
    if (c.iia) present.push_back(*c.iia);
  }
  if (present.empty()) throw ReportError("heatmap '" + experiment + "' has no present cells");
  SummaryRow row;
  row.experiment = experiment;
  row.task_accuracy = map.task_accuracy;
  row.iia_max = *std::max_element(present.begin(), present.end());
  row.variance_x100 = population_variance(present) * 100.0;
  if (reference != nullptr) {
    if (reference->cells.size() != map.cells.size()) {
      throw ReportError("heatmap '" + experiment + "' has " + std::to_string(map.cells.size()) +
                        " cells, reference has " + std::to_string(reference->cells.size()));
    }
    std::vector<double> a;
    std::vector<double> b;
    for (std::size_t i = 0; i < map.cells.size(); ++i) {
      const auto& x = map.cells[i];
      const auto& y = reference->cells[i];
      if (x.site != y.site) {
        throw ReportError("heatmap '" + experiment + "' and the reference cover different sites");
      }
      if (!x.iia || !y.iia) continue;
      a.push_back(*x.iia);
      b.push_back(*y.iia);
    }
    row.correlation = pearson(a, b);
  }
  return row;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  // Avoid "-0.00".
  if (std::string(buf) == "-0.00") return "0.00";
  return buf;
}

void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows) {
  out << "experiment,task_acc,iia_max,correlation,variance_x100\n";
  for (const auto& r : rows) {
    out << r.experiment << ',' << fixed2(r.task_accuracy) << ',' << fixed2(r.iia_max) << ','
        << (r.correlation ? fixed2(*r.correlation) : "n/a") << ',' << fixed2(r.variance_x100) << '\n';
  }
}

std::string format_summary_table(std::span<const SummaryRow> rows) {
  const std::vector<std::string> header = {"experiment", "task_acc", "iia_max", "correlation",
                                           "variance_x100"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({r.experiment, fixed2(r.task_accuracy), fixed2(r.iia_max),
                     r.correlation ? fixed2(*r.correlation) : "n/a", fixed2(r.variance_x100)});
  }
  std::vector<std::size_t> widths;
  for (const auto& h : header) widths.push_back(h.size());
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
  }
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i == 0) {
        out << row[i] << std::string(widths[i] - row[i].size(), ' ');
      } else {
        out << "  " << std::string(widths[i] - row[i].size(), ' ') << row[i];
      }
    }
    out << '\n';
  };
  emit(header);
  for (const auto& row : cells) emit(row);
  return out.str();
}

}  // namespace boundless::report
