#include "boundless/network.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "boundless/errors.hpp"
#include "boundless/io.hpp"
#include "boundless/optim.hpp"

namespace boundless::net {

using nlohmann::json;
using num::Tape;
using num::Var;

std::string to_string(const ActivationSite& site) {
  return "(layer " + std::to_string(site.layer) + ", position " + std::to_string(site.position) +
         ")";
}

std::string_view to_string(NetworkKind kind) {
  return kind == NetworkKind::PlantedMlp ? "planted-mlp" : "seq-net";
}

void Network::check_site(const ActivationSite& site) const {
  if (site.layer >= num_layers() || site.position >= num_positions()) {
    throw SiteError("site " + to_string(site) + " outside network with " +
                    std::to_string(num_layers()) + " layers and " +
                    std::to_string(num_positions()) + " positions");
  }
}

std::vector<ActivationSite> Network::all_sites() const {
  std::vector<ActivationSite> out;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    for (std::size_t p = 0; p < num_positions(); ++p) out.push_back({l, p});
  }
  return out;
}

Label argmax_label(std::span<const double> row) {
  if (row.size() != kNumLabels) throw DimensionError("logits row must have 2 entries");
  return row[1] > row[0] ? Label::No : Label::Yes;
}

std::vector<Label> predict(const Network& net, std::span<const EncodedInput> batch) {
  const Tensor logits = net.forward(batch);
  std::vector<Label> out;
  out.reserve(batch.size());
  for (std::size_t r = 0; r < logits.rows(); ++r) out.push_back(argmax_label(logits.row_span(r)));
  return out;
}

double task_accuracy(const Network& net, std::span<const task::TaskInstance> instances) {
  if (instances.empty()) throw EvaluationError("task accuracy of an empty set");
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < instances.size(); i += kChunk) {
    const auto part = instances.subspan(i, std::min(kChunk, instances.size() - i));
    const auto inputs = task::encode_all(part);
    const auto labels = predict(net, inputs);
    for (std::size_t j = 0; j < part.size(); ++j) correct += labels[j] == part[j].gold;
  }
  return static_cast<double>(correct) / static_cast<double>(instances.size());
}

std::pair<Tensor, Tensor> forward_with_capture(const Network& net,
                                               std::span<const EncodedInput> batch,
                                               const ActivationSite& site) {
  net.check_site(site);
  SiteState state = net.run_to(batch, site);
  Tensor logits = resume_plain(net, state, state.activation);
  return {std::move(logits), std::move(state.activation)};
}

Tensor resume_plain(const Network& net, const SiteState& state, const Tensor& activation) {
  Tape tape;
  Var act = tape.constant(activation);
  return net.resume(tape, state, act).value();
}

namespace {

Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      t(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
    }
  }
  return t;
}

// Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix).
Tensor random_orthogonal(std::size_t d, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < n; ++c) g(r, c) = rng.normal();
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd& packed = qr.matrixQR();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (packed(j, j) < 0) q.col(j) *= -1.0;
  }
  return from_eigen(q);
}

// `count` orthonormal vectors of length n (Gram-Schmidt on Gaussian draws).
std::vector<std::vector<double>> orthonormal_set(std::size_t count, std::size_t n, Rng& rng) {
  std::vector<std::vector<double>> out;
  while (out.size() < count) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    for (const auto& u : out) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += v[i] * u[i];
      for (std::size_t i = 0; i < n; ++i) v[i] -= dot * u[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    out.push_back(std::move(v));
  }
  return out;
}

constexpr double kCentre = 500.0;
double scaled(double cents) { return (cents - kCentre) / kCentre; }

std::uint64_t instance_key(const task::TaskInstance& i) {
  return static_cast<std::uint64_t>(i.lower) * 1000000ull +
         static_cast<std::uint64_t>(i.upper) * 1000ull + static_cast<std::uint64_t>(i.amount);
}

// Deterministic pseudo-random value in [-1, 1) keyed on the input.
double hashed_noise(std::uint64_t seed, std::uint64_t key, std::uint64_t coord) {
  const std::uint64_t h = derive_seed(derive_seed(seed, key), coord);
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
}

json shapes_json(const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  json shapes = json::array();
  for (const auto& [name, t] : tensors) {
    shapes.push_back({{"name", name}, {"rows", t->rows()}, {"cols", t->cols()}});
  }
  return shapes;
}

void save_payload(const std::filesystem::path& stem, json meta,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::vector<double> flat;
  for (const auto& [name, t] : tensors) flat.insert(flat.end(), t->values().begin(), t->values().end());
  meta["shapes"] = shapes_json(tensors);
  io::write_doubles(io::payload_path(stem), flat);
  io::write_atomic(io::sidecar_path(stem), meta.dump(2) + "\n");
}

std::vector<std::pair<std::string, Tensor>> load_payload(const std::filesystem::path& stem,
                                                         const json& meta) {
  const std::vector<double> flat = io::read_doubles(io::payload_path(stem));
  std::vector<std::pair<std::string, Tensor>> out;
  std::size_t offset = 0;
  for (const auto& s : meta.at("shapes")) {
    const auto rows = s.at("rows").get<std::size_t>();
    const auto cols = s.at("cols").get<std::size_t>();
    if (offset + rows * cols > flat.size()) throw FormatError("network payload is truncated");
    std::vector<double> data(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                             flat.begin() + static_cast<std::ptrdiff_t>(offset + rows * cols));
    out.emplace_back(s.at("name").get<std::string>(), Tensor(rows, cols, std::move(data)));
    offset += rows * cols;
  }
  if (offset != flat.size()) throw FormatError("network payload has trailing data");
  return out;
}

json read_sidecar(const std::filesystem::path& stem) {
  try {
    return json::parse(io::read_text(io::sidecar_path(stem)));
  } catch (const json::exception& e) {
    throw FormatError("network sidecar: " + std::string(e.what()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// PlantedNet

PlantedNet::PlantedNet(const Params& params) : params_(params) {
  layout();
  Rng rng(derive_seed(params_.seed, 0x51));
  planted_rotation_ = random_orthogonal(params_.width, rng);
  control_rotation_ = random_orthogonal(params_.width, rng);
}

void PlantedNet::layout() {
  using causal::Hypothesis;
  const causal::CausalModel model = causal::make_hypothesis(params_.hypothesis);
  const auto alignable = model.alignable();
  std::size_t context = 0;
  switch (params_.hypothesis) {
    case Hypothesis::LeftBoundary: context = 1; break;
    case Hypothesis::LeftAndRightBoundary: context = 0; break;
    case Hypothesis::MidpointDistance: context = 2; break;
    case Hypothesis::BracketIdentity: context = 1; break;
  }
  const std::size_t needed = kPlantedBlockWidth * alignable.size() + context;
  if (params_.width < needed) {
    throw CapacityError("planted " + std::string(causal::to_string(params_.hypothesis)) +
                        " needs width >= " + std::to_string(needed) + ", got " +
                        std::to_string(params_.width));
  }

  Rng rng(derive_seed(params_.seed, 0xC0DE));
  blocks_.clear();
  readouts_.clear();
  for (std::size_t j = 0; j < alignable.size(); ++j) {
    blocks_.push_back({alignable[j], j * kPlantedBlockWidth, kPlantedBlockWidth});
  }
  // One readout direction per scalar carried by a block.
  const std::size_t per_block = params_.hypothesis == Hypothesis::BracketIdentity ? 2 : 1;
  for (const auto& b : blocks_) {
    for (auto& dir : orthonormal_set(per_block, b.size, rng)) {
      readouts_.push_back({b.start, b.size, std::move(dir)});
    }
  }
  const std::size_t context_start = kPlantedBlockWidth * alignable.size();
  for (std::size_t c = 0; c < context; ++c) readouts_.push_back({context_start + c, 1, {1.0}});
  noise_coords_.clear();
  for (std::size_t i = context_start + context; i < params_.width; ++i) noise_coords_.push_back(i);
}

std::vector<double> PlantedNet::scalars(const task::TaskInstance& i) const {
  using causal::Hypothesis;
  const double x = i.amount;
  const double lo = i.lower;
  const double hi = i.upper;
  switch (params_.hypothesis) {
    case Hypothesis::LeftBoundary:
    case Hypothesis::LeftAndRightBoundary:
      return {x >= lo ? 1.0 : -1.0, x <= hi ? 1.0 : -1.0};
    case Hypothesis::MidpointDistance:
      return {scaled((lo + hi) / 2.0), scaled(x), (hi - lo) / 2.0 / kCentre};
    case Hypothesis::BracketIdentity:
      return {scaled(lo), scaled(hi), scaled(x)};
  }
  return {};
}

Tensor PlantedNet::code(std::span<const EncodedInput> batch, std::size_t layer) const {
  const std::size_t d = params_.width;
  Tensor z(batch.size(), d);
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const task::TaskInstance inst = task::decode(batch[r]);
    const std::uint64_t key = instance_key(inst);
    if (layer == kPlantedLayer) {
      const auto values = scalars(inst);
      for (std::size_t k = 0; k < readouts_.size(); ++k) {
        const Readout& ro = readouts_[k];
        for (std::size_t j = 0; j < ro.size; ++j) z(r, ro.start + j) += values[k] * ro.direction[j];
      }
      const std::uint64_t seed = derive_seed(params_.seed, 0x1A1);
      for (std::size_t c : noise_coords_) z(r, c) = hashed_noise(seed, key, c);
    } else {
      const std::uint64_t seed = derive_seed(params_.seed, 0x1A0);
      z(r, 0) = scaled(inst.lower);
      if (d > 1) z(r, 1) = scaled(inst.upper);
      for (std::size_t c = 2; c < d; ++c) z(r, c) = hashed_noise(seed, key, c);
    }
  }
  return z;
}

SiteState PlantedNet::run_to(std::span<const EncodedInput> batch, const ActivationSite& site) const {
  check_site(site);
  const Tensor& q = site.layer == kPlantedLayer ? planted_rotation_ : control_rotation_;
  SiteState state;
  state.site = site;
  // Row form of h = Q z.
  state.activation = num::matmul_transposed_b(code(batch, site.layer), q);
  state.inputs.assign(batch.begin(), batch.end());
  return state;
}

Var PlantedNet::resume(Tape& tape, const SiteState& state, Var activation) const {
  check_site(state.site);
  const std::size_t n = state.inputs.size();
  if (activation.rows() != n || activation.cols() != params_.width) {
    throw DimensionError("planted resume: activation " + num::shape_string(activation.value()) +
                         " for batch " + std::to_string(n));
  }
  const Tensor code1 = code(state.inputs, kPlantedLayer);
  const Tensor code0 = code(state.inputs, kControlLayer);

  Var h1 = state.site.layer == kPlantedLayer
               ? activation
               : tape.constant(num::matmul_transposed_b(code1, planted_rotation_));
  Var h0 = state.site.layer == kControlLayer
               ? activation
               : tape.constant(num::matmul_transposed_b(code0, control_rotation_));
  Var z1 = num::matmul(h1, tape.constant(planted_rotation_));
  Var z0 = num::matmul(h0, tape.constant(control_rotation_));

  std::vector<Var> v;
  for (const Readout& ro : readouts_) {
    Tensor dir(ro.size, 1, ro.direction);
    v.push_back(num::matmul(num::slice_cols(z1, ro.start, ro.size), tape.constant(dir)));
  }

  // The head recomputes the expected non-aligned coordinates from the input.
  // Any disagreement pushes the score towards an input-keyed random sign, so
  // under a convex loss every mismatch costs in expectation.
  Var e0 = num::sub(z0, tape.constant(code0));
  Var mismatch = num::sum_cols(num::mul(e0, e0));
  if (!noise_coords_.empty()) {
    const std::size_t start = noise_coords_.front();
    const std::size_t count = noise_coords_.size();
    Tensor expected(n, count);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < count; ++c) expected(r, c) = code1(r, start + c);
    }
    Var e1 = num::sub(num::slice_cols(z1, start, count), tape.constant(expected));
    mismatch = num::add(mismatch, num::sum_cols(num::mul(e1, e1)));
  }
  Tensor decoy(n, 1);
  const std::uint64_t decoy_seed = derive_seed(params_.seed, 0xDEC);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint64_t key = instance_key(task::decode(state.inputs[r]));
    decoy(r, 0) = hashed_noise(decoy_seed, key, 0) < 0.0 ? params_.mismatch_penalty
                                                          : -params_.mismatch_penalty;
  }
  Var distortion = num::mul(mismatch, tape.constant(std::move(decoy)));

  // Truth scores are positive for Yes with margin 0.25 cents or more; real
  // valued ones are expressed in units of 50 cents.
  using causal::Hypothesis;
  Var truth;
  switch (params_.hypothesis) {
    case Hypothesis::LeftBoundary:
    case Hypothesis::LeftAndRightBoundary:
      truth = num::minimum(v[0], v[1]);
      break;
    case Hypothesis::MidpointDistance: {
      Var dist = num::abs(num::sub(v[1], v[0]));
      truth = num::affine(num::sub(v[2], dist), kCentre / 50.0, 0.25 / 50.0);
      break;
    }
    case Hypothesis::BracketIdentity: {
      Var slack = num::minimum(num::sub(v[2], v[0]), num::sub(v[1], v[2]));
      truth = num::affine(slack, kCentre / 50.0, 0.5 / 50.0);
      break;
    }
  }
  Var score = num::affine(num::add(truth, distortion), params_.gain, 0.0);
  const Var parts[2] = {num::affine(score, 0.5, 0.0), num::affine(score, -0.5, 0.0)};
  return num::concat_cols(parts);
}

Tensor PlantedNet::forward(std::span<const EncodedInput> batch) const {
  SiteState state = run_to(batch, {kPlantedLayer, 0});
  return resume_plain(*this, state, state.activation);
}

PlantedTruth PlantedNet::ground_truth() const {
  return PlantedTruth{planted_rotation_, blocks_, {kPlantedLayer, 0}, {kControlLayer, 0}};
}

void PlantedNet::save(const std::filesystem::path& stem) const {
  json meta = {{"kind", to_string(kind())},
               {"seed", params_.seed},
               {"hypothesis", causal::to_string(params_.hypothesis)},
               {"width", params_.width},
               {"gain", params_.gain},
               {"mismatch_penalty", params_.mismatch_penalty}};
  save_payload(stem, std::move(meta),
               {{"planted_rotation", &planted_rotation_}, {"control_rotation", &control_rotation_}});
}

std::unique_ptr<PlantedNet> PlantedNet::from_saved(const std::filesystem::path& stem) {
  const json meta = read_sidecar(stem);
  try {
    Params p;
    p.seed = meta.at("seed").get<std::uint64_t>();
    p.hypothesis = causal::parse_hypothesis(meta.at("hypothesis").get<std::string>());
    p.width = meta.at("width").get<std::size_t>();
    p.gain = meta.at("gain").get<double>();
    p.mismatch_penalty = meta.at("mismatch_penalty").get<double>();
    auto net = std::make_unique<PlantedNet>(p);
    auto tensors = load_payload(stem, meta);
    if (tensors.size() != 2) throw FormatError("planted payload must hold two rotations");
    for (auto& [name, t] : tensors) {
      if (t.rows() != p.width || t.cols() != p.width) {
        throw FormatError("planted rotation '" + name + "' has shape " + num::shape_string(t));
      }
    }
    net->planted_rotation_ = std::move(tensors[0].second);
    net->control_rotation_ = std::move(tensors[1].second);
    return net;
  } catch (const json::exception& e) {
    throw FormatError("planted sidecar: " + std::string(e.what()));
  }
}

std::unique_ptr<PlantedNet> build_planted_net(const causal::CausalModel& hypothesis,
                                              std::size_t width, std::uint64_t seed) {
  PlantedNet::Params p;
  p.hypothesis = causal::parse_hypothesis(hypothesis.name());
  const auto reference = causal::make_hypothesis(p.hypothesis);
  if (causal::model_to_json(reference) != causal::model_to_json(hypothesis)) {
    throw HypothesisError("model '" + hypothesis.name() +
                          "' differs from the builtin hypothesis of that name");
  }
  p.width = width;
  p.seed = seed;
  return std::make_unique<PlantedNet>(p);
}

// ---------------------------------------------------------------------------
// SeqNet

namespace {

constexpr std::size_t kPerBlock = 8;

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t(rows, cols);
  for (double& x : t.data()) x = stddev * rng.normal();
  return t;
}

}  // namespace

SeqNet::SeqNet(const SeqNetArch& arch, std::uint64_t seed) : arch_(arch), seed_(seed) {
  if (arch.layers == 0 || arch.width == 0 || arch.heads == 0 || arch.mlp_ratio == 0) {
    throw TrainingError("seq-net architecture sizes must be positive");
  }
  if (arch.width % arch.heads != 0) {
    throw TrainingError("seq-net width " + std::to_string(arch.width) +
                        " is not divisible by heads " + std::to_string(arch.heads));
  }
  Rng rng(derive_seed(seed, 0x5E0));
  const std::size_t w = arch.width;
  const std::size_t hidden = arch.mlp_ratio * w;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(w));
  const double s_hidden = 1.0 / std::sqrt(static_cast<double>(hidden));
  const double s_out = 1.0 / std::sqrt(2.0 * static_cast<double>(arch.layers));
  params_.emplace_back("tok_emb", gaussian(task::kVocabSize, w, 1.0, rng));
  params_.emplace_back("pos_emb", gaussian(task::kSeqLen, w, 1.0, rng));
  for (std::size_t l = 0; l < arch.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    params_.emplace_back(p + "wq", gaussian(w, w, s_in, rng));
    params_.emplace_back(p + "wk", gaussian(w, w, s_in, rng));
    params_.emplace_back(p + "wv", gaussian(w, w, s_in, rng));
    params_.emplace_back(p + "wo", gaussian(w, w, s_in * s_out, rng));
    params_.emplace_back(p + "w1", gaussian(w, hidden, s_in, rng));
    params_.emplace_back(p + "b1", Tensor(1, hidden));
    params_.emplace_back(p + "w2", gaussian(hidden, w, s_hidden * s_out, rng));
    params_.emplace_back(p + "b2", Tensor(1, w));
  }
  // A zero head predicts Yes for every input until trained.
  params_.emplace_back("head.w", Tensor(w, kNumLabels));
  params_.emplace_back("head.b", Tensor(1, kNumLabels));
}

std::vector<Var> SeqNet::constants(Tape& tape) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(tape.constant(t));
  return out;
}

Var SeqNet::embed_and_run(Tape& tape, std::span<const Var> params,
                          std::span<const EncodedInput> batch, std::size_t upto) const {
  const std::size_t t_len = task::kSeqLen;
  std::vector<std::size_t> tokens(batch.size() * t_len);
  std::vector<std::size_t> positions(batch.size() * t_len);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      const std::uint8_t tok = batch[b].tokens[t];
      if (tok >= task::kVocabSize) throw FormatError("token " + std::to_string(tok) + " out of vocabulary");
      tokens[b * t_len + t] = tok;
      positions[b * t_len + t] = t;
    }
  }
  (void)tape;
  Var x = num::add(num::gather_rows(params[0], tokens), num::gather_rows(params[1], positions));
  for (std::size_t l = 0; l < upto; ++l) {
    x = block(params, x, l);
  }
  return x;
}

Var SeqNet::block(std::span<const Var> params, Var x, std::size_t l) const {
  // Pre-norm attention and ReLU MLP, both residual.
  const Var* p = params.data() + 2 + kPerBlock * l;
  Var h = num::rms_norm_rows(x);
  Var att = num::causal_attention(num::matmul(h, p[0]), num::matmul(h, p[1]),
                                  num::matmul(h, p[2]), task::kSeqLen, arch_.heads);
  x = num::add(x, num::matmul(att, p[3]));
  Var h2 = num::rms_norm_rows(x);
  Var mid = num::relu(num::add_row(num::matmul(h2, p[4]), p[5]));
  return num::add(x, num::add_row(num::matmul(mid, p[6]), p[7]));
}

Var SeqNet::run_blocks(Tape& tape, std::span<const Var> params, Var stream, std::size_t from) const {
  (void)tape;
  Var x = stream;
  for (std::size_t l = from; l < arch_.layers; ++l) {
    x = block(params, x, l);
  }
  return x;
}

Var SeqNet::head(Tape& tape, std::span<const Var> params, Var stream) const {
  (void)tape;
  const std::size_t t_len = task::kSeqLen;
  const std::size_t batch = stream.rows() / t_len;
  std::vector<std::size_t> last(batch);
  for (std::size_t b = 0; b < batch; ++b) last[b] = b * t_len + t_len - 1;
  const Var* p = params.data() + 2 + kPerBlock * arch_.layers;
  Var h = num::rms_norm_rows(num::gather_rows(stream, last));
  return num::add_row(num::matmul(h, p[0]), p[1]);
}

SiteState SeqNet::run_to(std::span<const EncodedInput> batch, const ActivationSite& site) const {
  check_site(site);
  Tape tape;
  const auto params = constants(tape);
  Var x = embed_and_run(tape, params, batch, site.layer);
  SiteState state;
  state.site = site;
  state.context = x.value();
  std::vector<std::size_t> rows(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) rows[b] = b * task::kSeqLen + site.position;
  state.activation = num::gather_rows(x, rows).value();
  state.inputs.assign(batch.begin(), batch.end());
  return state;
}

Var SeqNet::resume(Tape& tape, const SiteState& state, Var activation) const {
  check_site(state.site);
  const std::size_t n = state.inputs.size();
  if (activation.rows() != n || activation.cols() != arch_.width) {
    throw DimensionError("seq-net resume: activation " + num::shape_string(activation.value()) +
                         " for batch " + std::to_string(n));
  }
  std::vector<std::size_t> rows(n);
  for (std::size_t b = 0; b < n; ++b) rows[b] = b * task::kSeqLen + state.site.position;
  const auto params = constants(tape);
  Var x = num::scatter_rows(state.context, activation, rows);
  x = run_blocks(tape, params, x, state.site.layer);
  return head(tape, params, x);
}

Tensor SeqNet::forward(std::span<const EncodedInput> batch) const {
  Tape tape;
  const auto params = constants(tape);
  Var x = embed_and_run(tape, params, batch, arch_.layers);
  return head(tape, params, x).value();
}

void SeqNet::save(const std::filesystem::path& stem) const {
  json meta = {{"kind", to_string(kind())},
               {"seed", seed_},
               {"arch",
                {{"layers", arch_.layers},
                 {"width", arch_.width},
                 {"heads", arch_.heads},
                 {"mlp_ratio", arch_.mlp_ratio}}},
               {"task_accuracy", recorded_accuracy_}};
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& [name, t] : params_) tensors.emplace_back(name, &t);
  save_payload(stem, std::move(meta), tensors);
}

std::unique_ptr<SeqNet> SeqNet::from_saved(const std::filesystem::path& stem) {
  const json meta = read_sidecar(stem);
  try {
    SeqNetArch arch;
    const json& a = meta.at("arch");
    arch.layers = a.at("layers").get<std::size_t>();
    arch.width = a.at("width").get<std::size_t>();
    arch.heads = a.at("heads").get<std::size_t>();
    arch.mlp_ratio = a.at("mlp_ratio").get<std::size_t>();
    auto net = std::make_unique<SeqNet>(arch, meta.at("seed").get<std::uint64_t>());
    net->recorded_accuracy_ = meta.at("task_accuracy").get<double>();
    auto tensors = load_payload(stem, meta);
    if (tensors.size() != net->params_.size()) {
      throw FormatError("seq-net payload holds " + std::to_string(tensors.size()) +
                        " tensors, expected " + std::to_string(net->params_.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      auto& [name, t] = net->params_[i];
      if (tensors[i].first != name || tensors[i].second.rows() != t.rows() ||
          tensors[i].second.cols() != t.cols()) {
        throw FormatError("seq-net tensor '" + tensors[i].first + "' does not match '" + name + "'");
      }
      t = std::move(tensors[i].second);
    }
    return net;
  } catch (const json::exception& e) {
    throw FormatError("seq-net sidecar: " + std::string(e.what()));
  }
}

std::unique_ptr<Network> load_network(const std::filesystem::path& stem) {
  const json meta = read_sidecar(stem);
  const std::string kind = meta.value("kind", "");
  if (kind == "planted-mlp") return PlantedNet::from_saved(stem);
  if (kind == "seq-net") return SeqNet::from_saved(stem);
  throw FormatError("unknown network kind '" + kind + "'");
}

std::unique_ptr<SeqNet> train_task_net(const SeqNetArch& arch, const SeqNetTraining& training) {
  if (training.batch == 0) throw TrainingError("batch size must be positive");
  auto net = std::make_unique<SeqNet>(arch, training.seed);
  const auto train = task::gen_task_dataset(training.train_examples, derive_seed(training.seed, 1));
  const auto test = task::gen_task_dataset(training.test_examples, derive_seed(training.seed, 2));
  const auto inputs = task::encode_all(train);

  const std::size_t per_epoch = (train.size() + training.batch - 1) / training.batch;
  std::size_t total = per_epoch * training.epochs;
  if (training.max_steps) total = std::min(total, *training.max_steps);

  num::Adam adam({.lr = training.lr});
  Rng order_rng(derive_seed(training.seed, 3));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < training.epochs && step < total; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size() && step < total; start += training.batch) {
      const std::size_t count = std::min(training.batch, order.size() - start);
      std::vector<EncodedInput> batch(count);
      std::vector<std::size_t> targets(count);
      for (std::size_t i = 0; i < count; ++i) {
        batch[i] = inputs[order[start + i]];
        targets[i] = label_index(train[order[start + i]].gold);
      }
      Tape tape;
      std::vector<Var> leaves;
      for (const auto& [name, t] : net->parameters()) leaves.push_back(tape.leaf(t));
      double loss_value = 0.0;
      try {
        Var x = net->embed_and_run(tape, leaves, batch, arch.layers);
        Var loss = num::cross_entropy(net->head(tape, leaves, x), targets);
        loss_value = loss.value().item();
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw TrainingError("seq-net training diverged at step " + std::to_string(step) + ": " +
                            e.what());
      }
      if (!std::isfinite(loss_value)) {
        throw TrainingError("non-finite seq-net loss at step " + std::to_string(step));
      }
      // Global-norm clipping at 1.
      double norm2 = 0.0;
      for (const Var& v : leaves) {
        for (double g : v.grad().data()) norm2 += g * g;
      }
      const double clip = std::min(1.0, 1.0 / (std::sqrt(norm2) + 1e-12));
      std::vector<Tensor> grads;
      grads.reserve(leaves.size());
      for (const Var& v : leaves) {
        Tensor g = v.grad();
        for (double& x : g.data()) x *= clip;
        grads.push_back(std::move(g));
      }
      std::vector<Tensor*> ps;
      std::vector<const Tensor*> gs;
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        ps.push_back(&net->parameters()[i].second);
        gs.push_back(&grads[i]);
      }
      const double progress = total > 1 ? static_cast<double>(step) / static_cast<double>(total - 1) : 0.0;
      adam.set_lr(training.lr * (1.0 - (1.0 - training.lr_final_fraction) * progress));
      adam.step(ps, gs);
      ++step;
    }
  }
  net->set_recorded_accuracy(test.empty() ? 0.0 : task_accuracy(*net, test));
  return net;
}

}  // namespace boundless::net
