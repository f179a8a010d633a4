#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "boundless/causal.hpp"
#include "boundless/intervene.hpp"
#include "boundless/network.hpp"

namespace boundless::bdas {

/// A base input, one optional source per alignable variable, and the label
/// the high-level model predicts under the interchange.
struct CounterfactualExample {
  task::TaskInstance base;
  /// Indexed like CausalModel::alignable(); empty for variables left alone.
  std::vector<std::optional<task::TaskInstance>> sources;
  std::vector<std::string> intervened;
  Label label = Label::No;
};

enum class Sampling {
  /// Base and source drawn i.i.d. from the task generator.
  Iid,
  /// As Iid, then rejection-balanced over the four (base gold,
  /// counterfactual label) combinations so that any predictor ignoring the
  /// source scores exactly 0.5.
  Balanced,
};

/// Throws HypothesisError if the model has no alignable variable.
std::vector<CounterfactualExample> gen_counterfactual_dataset(const causal::CausalModel& hypothesis,
                                                              std::size_t n, std::uint64_t seed,
                                                              Sampling sampling = Sampling::Iid);

/// High-level label for a base with the given per-variable sources.
CounterfactualExample make_counterfactual(const causal::CausalModel& hypothesis,
                                          const task::TaskInstance& base,
                                          std::vector<std::optional<task::TaskInstance>> sources);

struct TrainConfig {
  double lr_rotation = 1e-3;
  double lr_boundary = 1e-2;
  std::size_t batch = 64;
  std::size_t epochs = 3;
  std::size_t eval_every = 200;
  double beta_start = 50.0;
  double beta_end = 0.1;
  std::size_t train_size = 20000;
  std::size_t eval_size = 200;
  std::size_t test_size = 1000;
  /// Seed of the shared test set, so cells and seeds are scored alike.
  std::uint64_t test_seed = 0;
};

/// Throws ConfigError naming the first offending field.
void validate(const TrainConfig& cfg);

std::size_t total_steps(const TrainConfig& cfg);

/// Temperature for optimizer step `step` of `total`: log-linear from
/// beta_start at step 0 to exactly beta_end at step total - 1.
double beta_at(const TrainConfig& cfg, std::size_t step, std::size_t total);

struct LogEntry {
  std::size_t step = 0;
  double beta = 0.0;
  double eval_iia = 0.0;
  /// Continuous boundary widths b_{j+1} - b_j.
  std::vector<double> widths;
  /// Mean training loss since the previous entry.
  double loss = 0.0;
};

struct TrainResult {
  /// Checkpoint with the best eval IIA (later steps win ties).
  intervene::AlignmentState state;
  std::vector<LogEntry> log;
  double best_eval_iia = 0.0;
  std::size_t best_step = 0;
  /// Every slot snapped to zero width at the end of training.
  bool unaligned = false;
};

/// One minibatch prepared for the alignment objective.
struct ObjectiveBatch {
  net::SiteState base;
  /// Site activations per slot: the example's source where that variable
  /// is intervened, the base otherwise.
  std::vector<num::Tensor> slot_acts;
  std::vector<std::size_t> targets;
};

/// Every intervened slot of an example shares one source.
ObjectiveBatch prepare_batch(const net::Network& network, const net::ActivationSite& site,
                             std::span<const CounterfactualExample> examples, std::size_t slots);

/// Mean cross entropy of the soft intervention against the counterfactual
/// labels, as a function of the skew row and raw boundary increments.
num::Var alignment_objective(num::Tape& tape, const net::Network& network, const ObjectiveBatch& batch,
                             num::Var skew_row, num::Var raw, double beta);

/// Minimizes the soft-intervention cross entropy against counterfactual
/// labels. Throws DivergenceError on a non-finite loss.
TrainResult train_alignment(const net::Network& network, const net::ActivationSite& site,
                            const causal::CausalModel& hypothesis, const TrainConfig& cfg,
                            std::uint64_t seed);

/// Fraction of examples whose hard-intervention argmax equals the
/// counterfactual label, using snapped masks. Throws EvaluationError on an
/// empty set.
double eval_iia(const net::Network& network, const net::ActivationSite& site,
                const causal::CausalModel& hypothesis, const intervene::AlignmentState& state,
                const std::vector<CounterfactualExample>& testset);

/// Hard-intervention IIA for an explicit rotation and binary partition.
double eval_iia(const net::Network& network, const net::ActivationSite& site,
                const num::Tensor& rotation, const intervene::MaskSet& partition,
                const std::vector<CounterfactualExample>& testset);

/// Majority-class rate of the counterfactual labels.
double dummy_rate(const std::vector<CounterfactualExample>& testset);

struct HeatmapCell {
  net::ActivationSite site;
  std::optional<double> iia;
  std::optional<std::uint64_t> best_seed;
  /// Why the cell is missing, if it is.
  std::string error;
};

struct IIAHeatmap {
  std::string hypothesis;
  /// Cells ordered by (layer, position).
  std::vector<HeatmapCell> cells;
  double task_accuracy = 0.0;
  double base_rate = 0.5;
  net::ActivationSite control_site;

  const HeatmapCell* find(const net::ActivationSite& site) const;
  /// Highest-IIA cell; nullptr if every cell is missing.
  const HeatmapCell* max_cell() const;
};

/// Callback invoked after each finished (site, seed) run.
struct RunRecord {
  net::ActivationSite site;
  std::uint64_t seed = 0;
  std::optional<TrainResult> result;
  std::optional<double> test_iia;
  std::string error;
  bool diverged = false;
};

/// Trains every (site, seed) pair independently using up to `jobs` threads
/// and keeps the max-over-seeds test IIA per site. The network's control
/// site is always included. Failed runs become missing cells.
IIAHeatmap sweep(const net::Network& network, std::vector<net::ActivationSite> sites,
                 const causal::CausalModel& hypothesis, const TrainConfig& cfg,
                 const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1,
                 std::vector<RunRecord>* runs = nullptr);

struct DynamicsPoint {
  std::size_t step = 0;
  /// Total boundary width divided by d / 2.
  double normalized_width = 0.0;
  double eval_iia = 0.0;
};

struct Dynamics {
  std::vector<DynamicsPoint> series;
  /// Total snapped width at the last entry.
  std::size_t final_snapped_width = 0;
  bool aligned = true;
};

/// Throws EvaluationError on an empty log.
Dynamics boundary_dynamics(const std::vector<LogEntry>& log, std::size_t d);

/// CSV: step,beta,eval_iia,width_slot_0..width_slot_{k-1},loss.
void write_log_csv(std::ostream& out, const std::vector<LogEntry>& log, std::size_t slots);
std::vector<LogEntry> read_log_csv(std::istream& in);

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace boundless::bdas
