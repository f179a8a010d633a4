#include "boundless/intervene.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <nlohmann/json.hpp>

#include "boundless/errors.hpp"
#include "boundless/io.hpp"

namespace boundless::intervene {

namespace {

using Matrix = Eigen::MatrixXd;
using nlohmann::json;

Matrix to_eigen(const Tensor& t) {
  Matrix m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t(r, c);
    }
  }
  return m;
}

Tensor from_eigen(const Matrix& m) {
  Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) {
      t(r, c) = m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
  }
  return t;
}

Matrix skew_from_row(std::span<const double> entries, std::size_t d) {
  if (entries.size() != RotationParams::parameter_count(d)) {
    throw DimensionError("rotation expects " + std::to_string(RotationParams::parameter_count(d)) +
                         " skew entries for d=" + std::to_string(d) + ", got " +
                         std::to_string(entries.size()));
  }
  Matrix a = Matrix::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < a.cols(); ++j) {
      a(i, j) = entries[k];
      a(j, i) = -entries[k];
      ++k;
    }
  }
  return a;
}

struct CayleyResult {
  Matrix r;
  Eigen::PartialPivLU<Matrix> lu;  // of I + A
};

CayleyResult cayley_factor(const Matrix& a) {
  const Matrix eye = Matrix::Identity(a.rows(), a.cols());
  CayleyResult out;
  out.lu.compute(eye + a);
  const double rcond = out.lu.rcond();
  if (!(rcond > 1e-12)) {
    throw ConditioningError("I + A is numerically singular (rcond " + std::to_string(rcond) + ")");
  }
  // (I - A) and (I + A)^-1 commute, so R = (I + A)^-1 (I - A).
  out.r = out.lu.solve(eye - a);
  if (!out.r.allFinite()) throw ConditioningError("Cayley transform produced non-finite entries");
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void require_partition(const MaskSet& m, std::size_t d) {
  if (m.slots() == 0) throw PartitionError("partition has no slots");
  if (m.dim() != d) {
    throw PartitionError("partition width " + std::to_string(m.dim()) + " != site width " +
                         std::to_string(d));
  }
  for (std::size_t i = 0; i < d; ++i) {
    int owners = 0;
    for (const auto& mask : m.masks) {
      if (mask.size() != d) throw PartitionError("ragged partition masks");
      if (mask[i] != 0.0 && mask[i] != 1.0) {
        throw PartitionError("partition mask entry " + std::to_string(mask[i]) + " is not binary");
      }
      owners += mask[i] == 1.0;
    }
    if (owners > 1) throw PartitionError("coordinate " + std::to_string(i) + " is in several slots");
  }
}

void require_sources(const SlotSources& sources, std::size_t slots, std::size_t batch) {
  if (sources.size() != slots) {
    throw ArityError("expected " + std::to_string(slots) + " source batches, got " +
                     std::to_string(sources.size()));
  }
  for (const auto& s : sources) {
    if (s.size() != batch) {
      throw ArityError("source batch of " + std::to_string(s.size()) + " for base batch of " +
                       std::to_string(batch));
    }
  }
}

void require_rotation(const Tensor& r, std::size_t d) {
  if (r.rows() != d || r.cols() != d) {
    throw DimensionError("rotation " + num::shape_string(r) + " for site width " + std::to_string(d));
  }
}

std::vector<Tensor> source_activations(const net::Network& network, const net::ActivationSite& site,
                                       const SlotSources& sources) {
  std::vector<Tensor> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back(network.run_to(s, site).activation);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Rotation

RotationParams RotationParams::identity(std::size_t d) {
  return RotationParams{d, std::vector<double>(parameter_count(d), 0.0)};
}

Tensor RotationParams::skew_matrix() const { return from_eigen(skew_from_row(skew, dim)); }

Tensor RotationParams::as_row() const { return Tensor(1, skew.size(), skew); }

Tensor materialize_rotation(const RotationParams& p) {
  return from_eigen(cayley_factor(skew_from_row(p.skew, p.dim)).r);
}

Var cayley(Var skew_row, std::size_t d) {
  const Tensor& in = skew_row.value();
  if (in.rows() != 1) throw DimensionError("cayley expects a 1 x n row of skew entries");
  auto factor = std::make_shared<CayleyResult>(cayley_factor(skew_from_row(in.data(), d)));
  Tensor r = from_eigen(factor->r);
  const std::size_t xi = skew_row.id;
  return skew_row.tape->record(std::move(r), {xi}, [xi, d, factor](num::Tape& t, std::size_t self) {
    if (!t.requires_grad(xi)) return;
    // dL/dA = -(I + R)^T G (I + A)^-T.
    const Matrix g = to_eigen(t.grad(self));
    const Matrix eye = Matrix::Identity(g.rows(), g.cols());
    const Matrix left = (eye + factor->r).transpose() * g;
    // X (I + A)^-T = Y  <=>  (I + A) X^T = Y^T.
    const Matrix ga = -factor->lu.solve(left.transpose()).transpose();
    Tensor& gx = t.grad_accumulator(xi);
    std::size_t k = 0;
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = i + 1; j < d; ++j) {
        const auto ii = static_cast<Eigen::Index>(i);
        const auto jj = static_cast<Eigen::Index>(j);
        gx[k++] += ga(ii, jj) - ga(jj, ii);
      }
    }
  }, "cayley");
}

// ---------------------------------------------------------------------------
// Boundaries and masks

double increment_scale(std::size_t d, std::size_t k) {
  return (static_cast<double>(d) / (2.0 * static_cast<double>(k))) / std::log(2.0);
}

BoundaryParams BoundaryParams::initial(std::size_t d, std::size_t k, double beta) {
  return BoundaryParams{d, std::vector<double>(k, 0.0), beta};
}

std::vector<double> BoundaryParams::boundaries() const {
  const double s = increment_scale(dim, slots());
  const double d = static_cast<double>(dim);
  std::vector<double> b{0.0};
  double cum = 0.0;
  for (double r : raw) {
    cum += s * softplus(r);
    b.push_back(std::min(cum, d));
  }
  return b;
}

std::vector<double> BoundaryParams::widths() const {
  const auto b = boundaries();
  std::vector<double> w;
  for (std::size_t j = 0; j + 1 < b.size(); ++j) w.push_back(b[j + 1] - b[j]);
  return w;
}

Var boundaries(Var raw, std::size_t d) {
  const Tensor& in = raw.value();
  if (in.rows() != 1 || in.cols() == 0) throw DimensionError("boundaries expects a 1 x k row");
  const std::size_t k = in.cols();
  const double s = increment_scale(d, k);
  const double cap = static_cast<double>(d);
  Tensor out(1, k + 1);
  double cum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    cum += s * softplus(in[j]);
    out[j + 1] = std::min(cum, cap);
  }
  const std::size_t xi = raw.id;
  return raw.tape->record(std::move(out), {xi}, [xi, s, cap, k](num::Tape& t, std::size_t self) {
    if (!t.requires_grad(xi)) return;
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(xi);
    Tensor& gx = t.grad_accumulator(xi);
    // b_j = min(sum_{i<j} s softplus(x_i), d); clipped entries pass no gradient.
    double cum = 0.0;
    std::vector<double> upstream(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      cum += s * softplus(x[j]);
      if (cum < cap) upstream[j] = g[j + 1];
    }
    double tail = 0.0;
    for (std::size_t j = k; j-- > 0;) {
      tail += upstream[j];
      gx[j] += tail * s * sigmoid(x[j]);
    }
  }, "boundaries");
}

Var interval_masks(Var bounds, Var beta, std::size_t d) {
  const Tensor& b = bounds.value();
  if (b.rows() != 1 || b.cols() < 2) throw DimensionError("interval_masks expects 1 x (k+1) boundaries");
  if (beta.value().size() != 1) throw DimensionError("interval_masks expects a 1 x 1 temperature");
  const double bt = beta.value().item();
  if (!(bt > 0.0)) throw NumericError("mask temperature must be positive");
  const std::size_t k = b.cols() - 1;
  Tensor out(k, d);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < d; ++i) {
      const double c = static_cast<double>(i) + 0.5;
      out(j, i) = sigmoid((c - b[j]) / bt) * sigmoid((b[j + 1] - c) / bt);
    }
  }
  const std::size_t bi = bounds.id;
  const std::size_t ti = beta.id;
  if (bounds.tape != beta.tape) throw Error("operands recorded on different tapes");
  return bounds.tape->record(std::move(out), {bi, ti}, [bi, ti, k, d](num::Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& b = t.value(bi);
    const double bt = t.value(ti).item();
    Tensor gb(1, k + 1);
    double gbeta = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t i = 0; i < d; ++i) {
        const double c = static_cast<double>(i) + 0.5;
        const double u = (c - b[j]) / bt;
        const double w = (b[j + 1] - c) / bt;
        const double p = sigmoid(u);
        const double q = sigmoid(w);
        const double dp = p * (1.0 - p);
        const double dq = q * (1.0 - q);
        const double gi = g(j, i);
        gb[j] += gi * (-dp * q / bt);
        gb[j + 1] += gi * (p * dq / bt);
        gbeta += gi * (-(dp * q * u + p * dq * w) / bt);
      }
    }
    if (t.requires_grad(bi)) {
      Tensor& acc = t.grad_accumulator(bi);
      for (std::size_t j = 0; j <= k; ++j) acc[j] += gb[j];
    }
    if (t.requires_grad(ti)) t.grad_accumulator(ti)[0] += gbeta;
  }, "interval_masks");
}

std::vector<double> MaskSet::residual() const {
  std::vector<double> r(dim(), 1.0);
  for (const auto& m : masks) {
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= m[i];
  }
  return r;
}

bool MaskSet::is_binary() const {
  for (const auto& m : masks) {
    for (double v : m) {
      if (v != 0.0 && v != 1.0) return false;
    }
  }
  return true;
}

std::size_t MaskSet::count(std::size_t slot) const {
  return static_cast<std::size_t>(std::count(masks.at(slot).begin(), masks.at(slot).end(), 1.0));
}

Tensor MaskSet::as_tensor() const {
  Tensor t(slots(), dim());
  for (std::size_t j = 0; j < slots(); ++j) {
    for (std::size_t i = 0; i < dim(); ++i) t(j, i) = masks[j][i];
  }
  return t;
}

MaskSet MaskSet::from_tensor(const Tensor& t) {
  MaskSet m;
  for (std::size_t j = 0; j < t.rows(); ++j) {
    auto row = t.row_span(j);
    m.masks.emplace_back(row.begin(), row.end());
  }
  return m;
}

MaskSet boundary_masks(const BoundaryParams& b) {
  num::Tape tape;
  const auto bounds = b.boundaries();
  Var bv = tape.constant(Tensor(1, bounds.size(), bounds));
  Var beta = tape.constant(Tensor::scalar(b.beta));
  return MaskSet::from_tensor(interval_masks(bv, beta, b.dim).value());
}

MaskSet snap_masks(const MaskSet& m) {
  MaskSet out = m;
  for (std::size_t i = 0; i < m.dim(); ++i) {
    bool taken = false;
    for (std::size_t j = 0; j < m.slots(); ++j) {
      const bool on = !taken && m.masks[j][i] >= 0.5;
      out.masks[j][i] = on ? 1.0 : 0.0;
      taken = taken || on;
    }
  }
  return out;
}

MaskSet block_partition(std::size_t d, std::span<const std::pair<std::size_t, std::size_t>> blocks) {
  MaskSet m;
  for (const auto& [start, size] : blocks) {
    if (start + size > d) throw PartitionError("block exceeds width " + std::to_string(d));
    std::vector<double> mask(d, 0.0);
    for (std::size_t i = start; i < start + size; ++i) mask[i] = 1.0;
    m.masks.push_back(std::move(mask));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Interventions

Tensor hard_dii_activation(const Tensor& base_act, std::span<const Tensor> source_acts,
                           const Tensor& rotation, const MaskSet& partition) {
  const std::size_t n = base_act.rows();
  const std::size_t d = base_act.cols();
  require_rotation(rotation, d);
  require_partition(partition, d);
  if (source_acts.size() != partition.slots()) {
    throw ArityError("expected " + std::to_string(partition.slots()) + " source activations, got " +
                     std::to_string(source_acts.size()));
  }
  // Rotate, substitute the partitioned coordinates, and add the change back
  // through R^T so untouched inputs pass through exactly.
  const Tensor y_base = num::matmul_transposed_b(base_act, rotation);
  Tensor delta(n, d);
  for (std::size_t j = 0; j < partition.slots(); ++j) {
    if (source_acts[j].rows() != n || source_acts[j].cols() != d) {
      throw ArityError("source activation " + num::shape_string(source_acts[j]) + " for base " +
                       num::shape_string(base_act));
    }
    const Tensor y_src = num::matmul_transposed_b(source_acts[j], rotation);
    for (std::size_t i = 0; i < d; ++i) {
      if (partition.masks[j][i] != 1.0) continue;
      for (std::size_t r = 0; r < n; ++r) delta(r, i) = y_src(r, i) - y_base(r, i);
    }
  }
  const Tensor back = num::matmul(delta, rotation);
  Tensor out = base_act;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += back[i];
  return out;
}

Tensor hard_dii(const net::Network& network, const net::ActivationSite& site, const Tensor& rotation,
                const MaskSet& partition, std::span<const net::EncodedInput> base,
                const SlotSources& sources) {
  network.check_site(site);
  require_partition(partition, network.width());
  require_sources(sources, partition.slots(), base.size());
  const net::SiteState state = network.run_to(base, site);
  const auto src = source_activations(network, site, sources);
  const Tensor act = hard_dii_activation(state.activation, src, rotation, partition);
  return net::resume_plain(network, state, act);
}

Var soft_dii_activation(num::Tape& tape, const Tensor& base_act, std::span<const Tensor> source_acts,
                        Var rotation, Var masks) {
  const std::size_t n = base_act.rows();
  const std::size_t d = base_act.cols();
  require_rotation(rotation.value(), d);
  if (masks.cols() != d || masks.rows() != source_acts.size()) {
    throw ArityError("masks " + num::shape_string(masks.value()) + " for " +
                     std::to_string(source_acts.size()) + " source batches of width " +
                     std::to_string(d));
  }
  Var mixed;
  for (std::size_t j = 0; j < source_acts.size(); ++j) {
    const Tensor& s = source_acts[j];
    if (s.rows() != n || s.cols() != d) {
      throw ArityError("source activation " + num::shape_string(s) + " for base " +
                       num::shape_string(base_act));
    }
    Tensor diff(n, d);
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = s[i] - base_act[i];
    Var term = num::mul_row(num::matmul_bt(tape.constant(std::move(diff)), rotation),
                            num::slice_rows(masks, j, 1));
    mixed = j == 0 ? term : num::add(mixed, term);
  }
  return num::add(tape.constant(base_act), num::matmul(mixed, rotation));
}

Tensor soft_dii(const net::Network& network, const net::ActivationSite& site, const Tensor& rotation,
                const MaskSet& masks, std::span<const net::EncodedInput> base,
                const SlotSources& sources) {
  network.check_site(site);
  if (masks.slots() == 0 || masks.dim() != network.width()) {
    throw DimensionError("mask set does not match site width " + std::to_string(network.width()));
  }
  require_sources(sources, masks.slots(), base.size());
  const net::SiteState state = network.run_to(base, site);
  const auto src = source_activations(network, site, sources);
  num::Tape tape;
  Var act = soft_dii_activation(tape, state.activation, src, tape.constant(rotation),
                                tape.constant(masks.as_tensor()));
  return network.resume(tape, state, act).value();
}

// ---------------------------------------------------------------------------
// Alignment state

AlignmentState initial_state(std::size_t d, std::vector<std::string> variables, double beta,
                             std::uint64_t seed) {
  const std::size_t k = variables.size();
  if (k == 0 || 2 * k > d) {
    throw CapacityError(std::to_string(k) + " mask slots do not fit width " + std::to_string(d) +
                        " (need 1 <= k <= d/2)");
  }
  AlignmentState s;
  s.rotation = RotationParams::identity(d);
  s.boundaries = BoundaryParams::initial(d, k, beta);
  s.slot_variables = std::move(variables);
  s.seed = seed;
  return s;
}

void AlignmentState::save(const std::filesystem::path& stem) const {
  std::vector<double> flat = rotation.skew;
  flat.insert(flat.end(), boundaries.raw.begin(), boundaries.raw.end());
  flat.push_back(boundaries.beta);
  json meta = {{"kind", "alignment-state"},
               {"d", dim()},
               {"k", slots()},
               {"slots", slot_variables},
               {"seed", seed}};
  io::write_doubles(io::payload_path(stem), flat);
  io::write_atomic(io::sidecar_path(stem), meta.dump(2) + "\n");
}

AlignmentState AlignmentState::load(const std::filesystem::path& stem) {
  AlignmentState s;
  try {
    const json meta = json::parse(io::read_text(io::sidecar_path(stem)));
    const auto d = meta.at("d").get<std::size_t>();
    const auto k = meta.at("k").get<std::size_t>();
    s.slot_variables = meta.at("slots").get<std::vector<std::string>>();
    s.seed = meta.at("seed").get<std::uint64_t>();
    if (s.slot_variables.size() != k) throw FormatError("alignment sidecar: slot count mismatch");
    const auto flat = io::read_doubles(io::payload_path(stem));
    const std::size_t m = RotationParams::parameter_count(d);
    if (flat.size() != m + k + 1) {
      throw FormatError("alignment payload holds " + std::to_string(flat.size()) +
                        " values, expected " + std::to_string(m + k + 1));
    }
    s.rotation = RotationParams{d, std::vector<double>(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(m))};
    s.boundaries.dim = d;
    s.boundaries.raw.assign(flat.begin() + static_cast<std::ptrdiff_t>(m),
                            flat.begin() + static_cast<std::ptrdiff_t>(m + k));
    s.boundaries.beta = flat.back();
  } catch (const json::exception& e) {
    throw FormatError("alignment sidecar: " + std::string(e.what()));
  }
  return s;
}

}  // namespace boundless::intervene
