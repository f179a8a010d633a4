#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "boundless/bdas.hpp"

namespace boundless::report {

/// clamp((iia - base_rate) / (task_acc - base_rate), 0, 1); 0 when the
/// network is no better than the dummy classifier.
double iia_scaled(double iia, double task_accuracy, double base_rate);

/// Columns hypothesis,layer,position,iia,iia_scaled,best_seed. Missing cells
/// leave the last three fields empty.
void write_heatmap_csv(std::ostream& out, const bdas::IIAHeatmap& map);
/// Reads cells only; metadata comes from the sidecar.
bdas::IIAHeatmap read_heatmap_csv(std::istream& in);

/// Sidecar with task accuracy, base rate, control site and missing-cell reasons.
std::string heatmap_meta_json(const bdas::IIAHeatmap& map);
void apply_heatmap_meta(bdas::IIAHeatmap& map, std::string_view json_text);

/// Pearson correlation; nullopt when either side has zero variance or fewer
/// than two points. Identical inputs give exactly 1.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

/// Population variance (divides by n). Throws ReportError on empty input.
double population_variance(std::span<const double> v);

struct SummaryRow {
  std::string experiment;
  double task_accuracy = 0.0;
  double iia_max = 0.0;
  std::optional<double> correlation;
  double variance_x100 = 0.0;
};

/// Statistics over present cells. With a reference, both heatmaps must cover
/// the same sites (ReportError otherwise); cells missing on either side are
/// skipped for the correlation.
SummaryRow summarize(const std::string& experiment, const bdas::IIAHeatmap& map,
                     const bdas::IIAHeatmap* reference);

/// Columns experiment,task_acc,iia_max,correlation,variance_x100 with two
/// decimals; an undefined correlation prints as n/a.
void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows);
std::string format_summary_table(std::span<const SummaryRow> rows);

std::string fixed2(double v);

}  // namespace boundless::report
