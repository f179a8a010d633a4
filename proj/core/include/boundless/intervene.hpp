#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "boundless/autodiff.hpp"
#include "boundless/network.hpp"

namespace boundless::intervene {

using num::Tensor;
using num::Var;

/// Skew-symmetric generator of an orthogonal rotation. Only the strict
/// upper triangle is stored, row by row.
struct RotationParams {
  std::size_t dim = 0;
  std::vector<double> skew;

  static RotationParams identity(std::size_t d);
  static std::size_t parameter_count(std::size_t d) { return d * (d - 1) / 2; }

  /// The full d x d skew matrix A.
  Tensor skew_matrix() const;
  Tensor as_row() const;
};

/// Cayley transform R = (I - A)(I + A)^-1. Throws ConditioningError when
/// I + A is numerically singular.
Tensor materialize_rotation(const RotationParams& p);

/// Differentiable Cayley transform of a 1 x d(d-1)/2 row of skew entries.
Var cayley(Var skew_row, std::size_t d);

/// Boundary indices b_0 = 0 <= b_1 <= ... <= b_k <= d, where b_j adds a
/// positive width for slot j. Slot j occupies (b_j, b_{j+1}).
struct BoundaryParams {
  std::size_t dim = 0;
  /// One unconstrained increment per slot.
  std::vector<double> raw;
  double beta = 50.0;

  /// All-zero increments: each of k slots gets d / (2k) dimensions.
  static BoundaryParams initial(std::size_t d, std::size_t k, double beta);

  std::size_t slots() const noexcept { return raw.size(); }
  /// b_0 .. b_k.
  std::vector<double> boundaries() const;
  /// b_{j+1} - b_j for every slot.
  std::vector<double> widths() const;
};

/// Multiplier on softplus so a zero increment yields d / (2k) dimensions.
double increment_scale(std::size_t d, std::size_t k);

/// Differentiable boundaries (1 x (k+1)) from raw increments (1 x k).
Var boundaries(Var raw, std::size_t d);

/// Differentiable masks (k x d) from boundaries (1 x (k+1)) and a 1 x 1
/// temperature. Entry (j, i) is
///   sigmoid((i + 0.5 - b_j) / beta) * sigmoid((b_{j+1} - i - 0.5) / beta),
/// evaluating index i at its bin centre.
Var interval_masks(Var boundaries, Var beta, std::size_t d);

/// k masks over d coordinates with values in [0, 1].
struct MaskSet {
  std::vector<std::vector<double>> masks;

  std::size_t slots() const noexcept { return masks.size(); }
  std::size_t dim() const noexcept { return masks.empty() ? 0 : masks.front().size(); }
  /// 1 - sum_j M_j.
  std::vector<double> residual() const;
  bool is_binary() const;
  /// Number of coordinates set in slot j (binary masks).
  std::size_t count(std::size_t slot) const;
  Tensor as_tensor() const;
  static MaskSet from_tensor(const Tensor& t);
};

MaskSet boundary_masks(const BoundaryParams& b);

/// Thresholds at 0.5; a coordinate claimed by several slots goes to the
/// lowest slot index.
MaskSet snap_masks(const MaskSet& m);

/// Binary partition whose slot j covers coordinates [start_j, start_j + size_j).
MaskSet block_partition(std::size_t d, std::span<const std::pair<std::size_t, std::size_t>> blocks);

/// Per-slot source batches. Every slot of the partition needs one; pass the
/// base batch for a slot that should not be intervened on.
using SlotSources = std::vector<std::vector<net::EncodedInput>>;

/// Hard distributed interchange intervention. Throws PartitionError for
/// non-binary or overlapping masks and ArityError for a source-count or
/// batch-size mismatch. Returns batch x 2 logits.
Tensor hard_dii(const net::Network& network, const net::ActivationSite& site, const Tensor& rotation,
                const MaskSet& partition, std::span<const net::EncodedInput> base,
                const SlotSources& sources);

/// The intervened site activation that hard_dii feeds forward.
Tensor hard_dii_activation(const Tensor& base_act, std::span<const Tensor> source_acts,
                           const Tensor& rotation, const MaskSet& partition);

/// Soft intervention on the tape: base_act + [sum_j M_j o ((src_j - base) R^T)] R
/// in row form. `masks` is k x d and `source_acts` holds one batch per slot.
Var soft_dii_activation(num::Tape& tape, const Tensor& base_act, std::span<const Tensor> source_acts,
                        Var rotation, Var masks);

/// Plain soft intervention (masks in [0, 1]); equals hard_dii for binary masks.
Tensor soft_dii(const net::Network& network, const net::ActivationSite& site, const Tensor& rotation,
                const MaskSet& masks, std::span<const net::EncodedInput> base,
                const SlotSources& sources);

/// Learnable alignment: rotation, boundaries and temperature, plus the map
/// from mask slot to high-level variable.
struct AlignmentState {
  RotationParams rotation;
  BoundaryParams boundaries;
  std::vector<std::string> slot_variables;
  std::uint64_t seed = 0;

  std::size_t dim() const noexcept { return rotation.dim; }
  std::size_t slots() const noexcept { return slot_variables.size(); }

  Tensor rotation_matrix() const { return materialize_rotation(rotation); }
  MaskSet masks() const { return boundary_masks(boundaries); }
  MaskSet snapped() const { return snap_masks(masks()); }

  /// Writes `<stem>.bin` (skew entries, raw increments, beta) and `<stem>.json`.
  void save(const std::filesystem::path& stem) const;
  static AlignmentState load(const std::filesystem::path& stem);
};

/// R = I with k = variables.size() slots sharing half of the space.
/// Throws CapacityError unless 1 <= k <= d / 2.
AlignmentState initial_state(std::size_t d, std::vector<std::string> variables, double beta,
                             std::uint64_t seed);

}  // namespace boundless::intervene
