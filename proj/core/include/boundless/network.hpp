#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "boundless/autodiff.hpp"
#include "boundless/causal.hpp"
#include "boundless/task.hpp"

namespace boundless::net {

using num::Tensor;
using task::EncodedInput;

/// Intervention location: a layer of the network and a token position (or
/// hidden-block id for planted networks).
struct ActivationSite {
  std::size_t layer = 0;
  std::size_t position = 0;

  friend auto operator<=>(const ActivationSite&, const ActivationSite&) = default;
};

std::string to_string(const ActivationSite& site);

enum class NetworkKind { PlantedMlp, SeqNet };

std::string_view to_string(NetworkKind kind);

/// Frozen snapshot of a batch at an activation site.
struct SiteState {
  ActivationSite site;
  /// batch x width activation at the site.
  Tensor activation;
  /// Network-specific resume data (full residual stream for seq-net).
  Tensor context;
  std::vector<EncodedInput> inputs;
};

/// A frozen low-level network with addressable activation sites.
///
/// Forward passes are pure; one instance may be shared across threads.
class Network {
 public:
  virtual ~Network() = default;

  virtual NetworkKind kind() const = 0;
  /// Number of site layers; valid layers are [0, num_layers()).
  virtual std::size_t num_layers() const = 0;
  /// Number of site positions; valid positions are [0, num_positions()).
  virtual std::size_t num_positions() const = 0;
  /// Representation width d at every site.
  virtual std::size_t width() const = 0;
  virtual std::uint64_t seed() const = 0;

  /// Throws SiteError when the site lies outside the network.
  void check_site(const ActivationSite& site) const;
  std::vector<ActivationSite> all_sites() const;
  /// Site where no causal variable is expected.
  virtual ActivationSite control_site() const = 0;

  /// Runs the batch up to `site` and captures its activation.
  virtual SiteState run_to(std::span<const EncodedInput> batch,
                           const ActivationSite& site) const = 0;

  /// Differentiable continuation from `state` with the site activation
  /// replaced by `activation` (batch x width). Returns batch x 2 logits.
  virtual num::Var resume(num::Tape& tape, const SiteState& state,
                          num::Var activation) const = 0;

  /// Plain forward pass, batch x 2 logits ordered (Yes, No).
  virtual Tensor forward(std::span<const EncodedInput> batch) const = 0;

  /// Writes `<stem>.bin` (flat little-endian float64 payload) and
  /// `<stem>.json` (kind, seed, shapes, configuration).
  virtual void save(const std::filesystem::path& stem) const = 0;
};

/// Label with the larger logit; ties resolve to Yes.
Label argmax_label(std::span<const double> logits_row);
std::vector<Label> predict(const Network& net, std::span<const EncodedInput> batch);
double task_accuracy(const Network& net, std::span<const task::TaskInstance> instances);

/// Logits and the activation captured at `site`.
std::pair<Tensor, Tensor> forward_with_capture(const Network& net,
                                               std::span<const EncodedInput> batch,
                                               const ActivationSite& site);

/// Resumes without recording gradients.
Tensor resume_plain(const Network& net, const SiteState& state, const Tensor& activation);

std::unique_ptr<Network> load_network(const std::filesystem::path& stem);

// ---------------------------------------------------------------------------
// Planted networks

/// Width of the code block assigned to each alignable variable.
inline constexpr std::size_t kPlantedBlockWidth = 4;
inline constexpr std::size_t kControlLayer = 0;
inline constexpr std::size_t kPlantedLayer = 1;

struct PlantedBlock {
  std::string variable;
  std::size_t start = 0;
  std::size_t size = 0;
};

/// Withheld ground truth of a planted network: the site activation is
/// `rotation * code` with the alignable variables at `blocks` of `code`.
struct PlantedTruth {
  Tensor rotation;
  std::vector<PlantedBlock> blocks;
  ActivationSite planted_site;
  ActivationSite control_site;
};

class PlantedNet final : public Network {
 public:
  struct Params {
    causal::Hypothesis hypothesis = causal::Hypothesis::LeftBoundary;
    std::size_t width = 16;
    std::uint64_t seed = 0;
    double gain = 4.0;
    double mismatch_penalty = 10.0;
  };

  /// Throws CapacityError if the width cannot hold the planted code.
  explicit PlantedNet(const Params& params);

  NetworkKind kind() const override { return NetworkKind::PlantedMlp; }
  std::size_t num_layers() const override { return 2; }
  std::size_t num_positions() const override { return 1; }
  std::size_t width() const override { return params_.width; }
  std::uint64_t seed() const override { return params_.seed; }
  ActivationSite control_site() const override { return {kControlLayer, 0}; }

  SiteState run_to(std::span<const EncodedInput> batch, const ActivationSite& site) const override;
  num::Var resume(num::Tape& tape, const SiteState& state, num::Var activation) const override;
  Tensor forward(std::span<const EncodedInput> batch) const override;
  void save(const std::filesystem::path& stem) const override;

  const Params& params() const noexcept { return params_; }
  PlantedTruth ground_truth() const;
  /// Pre-rotation code rows (batch x width) for a layer.
  Tensor code(std::span<const EncodedInput> batch, std::size_t layer) const;

  static std::unique_ptr<PlantedNet> from_saved(const std::filesystem::path& stem);

 private:
  // One scalar read from the code along a unit direction.
  struct Readout {
    std::size_t start = 0;
    std::size_t size = 0;
    std::vector<double> direction;  // size entries, unit norm
  };

  void layout();
  std::vector<double> scalars(const task::TaskInstance& i) const;

  Params params_;
  Tensor planted_rotation_;
  Tensor control_rotation_;
  std::vector<PlantedBlock> blocks_;
  // Readouts in the order produced by scalars(); block readouts first.
  std::vector<Readout> readouts_;
  // Code coordinates that carry checked noise on the planted layer.
  std::vector<std::size_t> noise_coords_;
};

/// Builds the planted network for one of the four Price Tagging hypotheses.
std::unique_ptr<PlantedNet> build_planted_net(const causal::CausalModel& hypothesis,
                                              std::size_t width, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Sequence network

/// Small autoregressive transformer over the 12-token task encoding.
struct SeqNetArch {
  std::size_t layers = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
};

struct SeqNetTraining {
  std::size_t train_examples = 50000;
  std::size_t test_examples = 2000;
  std::size_t epochs = 4;
  std::size_t batch = 64;
  double lr = 3e-3;
  double lr_final_fraction = 0.1;
  std::uint64_t seed = 0;
  /// Zero disables training entirely.
  std::optional<std::size_t> max_steps;
};

class SeqNet final : public Network {
 public:
  SeqNet(const SeqNetArch& arch, std::uint64_t seed);

  NetworkKind kind() const override { return NetworkKind::SeqNet; }
  /// Residual stream after the embedding (layer 0) and after each block.
  std::size_t num_layers() const override { return arch_.layers + 1; }
  std::size_t num_positions() const override { return task::kSeqLen; }
  std::size_t width() const override { return arch_.width; }
  std::uint64_t seed() const override { return seed_; }
  /// Separator before the query amount, after the first block.
  ActivationSite control_site() const override {
    return {std::min<std::size_t>(1, arch_.layers), task::kQueryPrefixPosition};
  }

  SiteState run_to(std::span<const EncodedInput> batch, const ActivationSite& site) const override;
  num::Var resume(num::Tape& tape, const SiteState& state, num::Var activation) const override;
  Tensor forward(std::span<const EncodedInput> batch) const override;
  void save(const std::filesystem::path& stem) const override;

  const SeqNetArch& arch() const noexcept { return arch_; }
  double recorded_accuracy() const noexcept { return recorded_accuracy_; }
  void set_recorded_accuracy(double acc) { recorded_accuracy_ = acc; }

  /// Named parameter tensors in serialization order.
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

  /// Embedding plus blocks [0, upto) on the tape; returns the residual stream.
  num::Var embed_and_run(num::Tape& tape, std::span<const num::Var> params,
                         std::span<const EncodedInput> batch, std::size_t upto) const;
  num::Var run_blocks(num::Tape& tape, std::span<const num::Var> params, num::Var stream,
                      std::size_t from) const;
  num::Var head(num::Tape& tape, std::span<const num::Var> params, num::Var stream) const;
  std::vector<num::Var> constants(num::Tape& tape) const;

  static std::unique_ptr<SeqNet> from_saved(const std::filesystem::path& stem);

 private:
  num::Var block(std::span<const num::Var> params, num::Var x, std::size_t l) const;

  SeqNetArch arch_;
  std::uint64_t seed_ = 0;
  double recorded_accuracy_ = 0.0;
  std::vector<std::pair<std::string, Tensor>> params_;
};

/// Trains a SeqNet on freshly generated task data. Throws TrainingError on
/// a non-finite loss. The held-out accuracy is recorded on the network.
std::unique_ptr<SeqNet> train_task_net(const SeqNetArch& arch, const SeqNetTraining& training);

}  // namespace boundless::net
