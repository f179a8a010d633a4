#include "boundless/bdas.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <thread>

#include "boundless/errors.hpp"
#include "boundless/optim.hpp"

namespace boundless::bdas {

using intervene::AlignmentState;
using intervene::MaskSet;
using net::EncodedInput;
using num::Tape;
using num::Tensor;
using num::Var;

// ---------------------------------------------------------------------------
// Counterfactual data

CounterfactualExample make_counterfactual(const causal::CausalModel& hypothesis,
                                          const task::TaskInstance& base,
                                          std::vector<std::optional<task::TaskInstance>> sources) {
  const auto alignable = hypothesis.alignable();
  if (sources.size() != alignable.size()) {
    throw ArityError("hypothesis " + hypothesis.name() + " has " + std::to_string(alignable.size()) +
                     " alignable variables, got " + std::to_string(sources.size()) + " sources");
  }
  CounterfactualExample ex;
  ex.base = base;
  causal::InterventionSpec spec;
  for (std::size_t j = 0; j < alignable.size(); ++j) {
    if (!sources[j]) continue;
    ex.intervened.push_back(alignable[j]);
    spec.push_back({{alignable[j]}, causal::tau(*sources[j])});
  }
  ex.sources = std::move(sources);
  ex.label = causal::interchange_intervene(hypothesis, causal::tau(base), spec);
  return ex;
}

std::vector<CounterfactualExample> gen_counterfactual_dataset(const causal::CausalModel& hypothesis,
                                                              std::size_t n, std::uint64_t seed,
                                                              Sampling sampling) {
  const std::size_t k = hypothesis.alignable().size();
  if (k == 0) throw HypothesisError("hypothesis " + hypothesis.name() + " has no alignable variable");
  if (k >= 63) throw HypothesisError("too many alignable variables");
  Rng rng(seed);
  std::size_t quota[4] = {n / 4, n / 4, n / 4, n / 4};
  for (std::size_t q = 0; q < n % 4; ++q) ++quota[q];
  std::size_t filled[4] = {0, 0, 0, 0};

  std::vector<CounterfactualExample> out;
  out.reserve(n);
  const std::size_t max_attempts = 1000 * n + 10000;
  for (std::size_t attempt = 0; out.size() < n; ++attempt) {
    if (attempt >= max_attempts) {
      throw EvaluationError("could not balance counterfactual labels for " + hypothesis.name());
    }
    const task::TaskInstance base = task::gen_task_instance(rng);
    const task::TaskInstance source = task::gen_task_instance(rng);
    // Uniform over the non-empty subsets of alignable variables.
    const std::uint64_t subset = 1 + rng.below((std::uint64_t{1} << k) - 1);
    std::vector<std::optional<task::TaskInstance>> sources(k);
    for (std::size_t j = 0; j < k; ++j) {
      if (subset & (std::uint64_t{1} << j)) sources[j] = source;
    }
    CounterfactualExample ex = make_counterfactual(hypothesis, base, std::move(sources));
    if (sampling == Sampling::Balanced) {
      const std::size_t q = 2 * label_index(base.gold) + label_index(ex.label);
      if (filled[q] >= quota[q]) continue;
      ++filled[q];
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

void validate(const TrainConfig& cfg) {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string(name) + " must be a positive finite number");
    }
  };
  positive(cfg.lr_rotation, "lr_rotation");
  positive(cfg.lr_boundary, "lr_boundary");
  positive(cfg.beta_start, "beta_start");
  positive(cfg.beta_end, "beta_end");
  if (!(cfg.beta_end < cfg.beta_start)) throw ConfigError("beta_end must be below beta_start");
  if (cfg.batch == 0) throw ConfigError("batch must be positive");
  if (cfg.epochs == 0) throw ConfigError("epochs must be positive");
  if (cfg.eval_every == 0) throw ConfigError("eval_every must be positive");
  if (cfg.train_size == 0) throw ConfigError("train_size must be positive");
  if (cfg.eval_size == 0) throw ConfigError("eval_size must be positive");
  if (cfg.test_size == 0) throw ConfigError("test_size must be positive");
}

std::size_t total_steps(const TrainConfig& cfg) {
  return cfg.epochs * ((cfg.train_size + cfg.batch - 1) / cfg.batch);
}

double beta_at(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  if (total <= 1 || step == 0) return cfg.beta_start;
  if (step + 1 >= total) return cfg.beta_end;
  const double frac = static_cast<double>(step) / static_cast<double>(total - 1);
  return std::exp(std::log(cfg.beta_start) + frac * (std::log(cfg.beta_end) - std::log(cfg.beta_start)));
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

constexpr std::size_t kEvalChunk = 256;

// Per-slot source inputs: the example's source for intervened slots and the
// base itself elsewhere.
intervene::SlotSources slot_sources(std::span<const CounterfactualExample> chunk, std::size_t slots) {
  intervene::SlotSources out(slots);
  for (std::size_t j = 0; j < slots; ++j) {
    out[j].reserve(chunk.size());
    for (const auto& ex : chunk) {
      if (ex.sources.size() != slots) throw ArityError("example does not match the slot count");
      out[j].push_back(task::encode(ex.sources[j] ? *ex.sources[j] : ex.base));
    }
  }
  return out;
}

void require_slots_match(const causal::CausalModel& hypothesis, const AlignmentState& state) {
  if (state.slot_variables != hypothesis.alignable()) {
    throw HypothesisError("alignment slots do not match the alignable variables of " +
                          hypothesis.name());
  }
}

}  // namespace

double eval_iia(const net::Network& network, const net::ActivationSite& site, const Tensor& rotation,
                const MaskSet& partition, const std::vector<CounterfactualExample>& testset) {
  if (testset.empty()) throw EvaluationError("IIA of an empty test set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < testset.size(); i += kEvalChunk) {
    const std::span<const CounterfactualExample> chunk(testset.data() + i,
                                                       std::min(kEvalChunk, testset.size() - i));
    std::vector<EncodedInput> base;
    base.reserve(chunk.size());
    for (const auto& ex : chunk) base.push_back(task::encode(ex.base));
    const Tensor logits = intervene::hard_dii(network, site, rotation, partition, base,
                                              slot_sources(chunk, partition.slots()));
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      hits += net::argmax_label(logits.row_span(r)) == chunk[r].label;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(testset.size());
}

double eval_iia(const net::Network& network, const net::ActivationSite& site,
                const causal::CausalModel& hypothesis, const AlignmentState& state,
                const std::vector<CounterfactualExample>& testset) {
  require_slots_match(hypothesis, state);
  return eval_iia(network, site, state.rotation_matrix(), state.snapped(), testset);
}

double dummy_rate(const std::vector<CounterfactualExample>& testset) {
  if (testset.empty()) throw EvaluationError("dummy rate of an empty test set");
  std::size_t yes = 0;
  for (const auto& ex : testset) yes += ex.label == Label::Yes;
  const std::size_t majority = std::max(yes, testset.size() - yes);
  return static_cast<double>(majority) / static_cast<double>(testset.size());
}

// ---------------------------------------------------------------------------
// Training

ObjectiveBatch prepare_batch(const net::Network& network, const net::ActivationSite& site,
                             std::span<const CounterfactualExample> examples, std::size_t slots) {
  const std::size_t count = examples.size();
  std::vector<EncodedInput> base(count);
  std::vector<EncodedInput> source(count);
  ObjectiveBatch out;
  out.targets.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& ex = examples[i];
    if (ex.sources.size() != slots) throw ArityError("example source count does not match slots");
    base[i] = task::encode(ex.base);
    const task::TaskInstance* src = &ex.base;
    for (const auto& s : ex.sources) {
      if (s) src = &*s;
    }
    source[i] = task::encode(*src);
    out.targets[i] = label_index(ex.label);
  }
  out.base = network.run_to(base, site);
  const Tensor src_act = network.run_to(source, site).activation;
  out.slot_acts.assign(slots, out.base.activation);
  for (std::size_t j = 0; j < slots; ++j) {
    for (std::size_t i = 0; i < count; ++i) {
      if (!examples[i].sources[j]) continue;
      auto row = src_act.row_span(i);
      std::copy(row.begin(), row.end(), out.slot_acts[j].row_span(i).begin());
    }
  }
  return out;
}

Var alignment_objective(Tape& tape, const net::Network& network, const ObjectiveBatch& batch,
                        Var skew_row, Var raw, double beta) {
  const std::size_t d = network.width();
  Var rot = intervene::cayley(skew_row, d);
  Var masks = intervene::interval_masks(intervene::boundaries(raw, d),
                                        tape.constant(Tensor::scalar(beta)), d);
  Var act = intervene::soft_dii_activation(tape, batch.base.activation, batch.slot_acts, rot, masks);
  return num::cross_entropy(network.resume(tape, batch.base, act), batch.targets);
}

TrainResult train_alignment(const net::Network& network, const net::ActivationSite& site,
                            const causal::CausalModel& hypothesis, const TrainConfig& cfg,
                            std::uint64_t seed) {
  validate(cfg);
  network.check_site(site);
  const auto alignable = hypothesis.alignable();
  if (alignable.empty()) throw HypothesisError(hypothesis.name() + " has no alignable variable");
  const std::size_t d = network.width();
  const std::size_t k = alignable.size();

  AlignmentState state = intervene::initial_state(d, alignable, cfg.beta_start, seed);
  const auto train = gen_counterfactual_dataset(hypothesis, cfg.train_size, derive_seed(seed, 101));
  const auto evalset = gen_counterfactual_dataset(hypothesis, cfg.eval_size, derive_seed(seed, 102),
                                                  Sampling::Balanced);
  const std::size_t total = total_steps(cfg);

  num::Adam rotation_opt({.lr = cfg.lr_rotation});
  num::Adam boundary_opt({.lr = cfg.lr_boundary});
  Rng order_rng(derive_seed(seed, 103));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  result.state = state;
  result.best_eval_iia = -1.0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - start);
      std::vector<CounterfactualExample> examples;
      examples.reserve(count);
      for (std::size_t i = 0; i < count; ++i) examples.push_back(train[order[start + i]]);
      const ObjectiveBatch batch = prepare_batch(network, site, examples, k);

      const double beta = beta_at(cfg, step, total);
      state.boundaries.beta = beta;
      double loss_value = 0.0;
      Tensor g_skew;
      Tensor g_raw;
      try {
        Tape tape;
        Var skew = tape.leaf(state.rotation.as_row());
        Var raw = tape.leaf(Tensor(1, k, state.boundaries.raw));
        Var loss = alignment_objective(tape, network, batch, skew, raw, beta);
        loss_value = loss.value().item();
        tape.backward(loss);
        g_skew = skew.grad();
        g_raw = raw.grad();
      } catch (const NumericError& e) {
        throw DivergenceError("alignment training diverged at step " + std::to_string(step) + ": " +
                              e.what());
      } catch (const ConditioningError& e) {
        throw DivergenceError("alignment training diverged at step " + std::to_string(step) + ": " +
                              e.what());
      }
      if (!std::isfinite(loss_value)) {
        throw DivergenceError("non-finite alignment loss at step " + std::to_string(step));
      }
      loss_sum += loss_value;
      ++loss_count;

      Tensor skew_t = state.rotation.as_row();
      Tensor raw_t(1, k, state.boundaries.raw);
      if (!skew_t.empty()) rotation_opt.step({&skew_t}, {&g_skew});
      boundary_opt.step({&raw_t}, {&g_raw});
      state.rotation.skew = skew_t.values();
      state.boundaries.raw = raw_t.values();
      ++step;

      if (step % cfg.eval_every == 0 || step == total) {
        const double iia = eval_iia(network, site, hypothesis, state, evalset);
        result.log.push_back({step, beta, iia, state.boundaries.widths(),
                              loss_sum / static_cast<double>(loss_count)});
        loss_sum = 0.0;
        loss_count = 0;
        if (iia >= result.best_eval_iia) {
          result.best_eval_iia = iia;
          result.best_step = step;
          result.state = state;
        }
      }
    }
  }
  result.unaligned = !boundary_dynamics(result.log, d).aligned;
  return result;
}

// ---------------------------------------------------------------------------
// Sweeps

const HeatmapCell* IIAHeatmap::find(const net::ActivationSite& site) const {
  for (const auto& c : cells) {
    if (c.site == site) return &c;
  }
  return nullptr;
}

const HeatmapCell* IIAHeatmap::max_cell() const {
  const HeatmapCell* best = nullptr;
  for (const auto& c : cells) {
    if (c.iia && (best == nullptr || *c.iia > *best->iia)) best = &c;
  }
  return best;
}

IIAHeatmap sweep(const net::Network& network, std::vector<net::ActivationSite> sites,
                 const causal::CausalModel& hypothesis, const TrainConfig& cfg,
                 const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                 std::vector<RunRecord>* runs) {
  validate(cfg);
  if (sites.empty()) throw ConfigError("sweep needs at least one site");
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  sites.push_back(network.control_site());
  std::sort(sites.begin(), sites.end());
  sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
  for (const auto& s : sites) network.check_site(s);

  const auto testset = gen_counterfactual_dataset(hypothesis, cfg.test_size, cfg.test_seed,
                                                  Sampling::Balanced);
  std::vector<RunRecord> records;
  for (const auto& s : sites) {
    for (std::uint64_t seed : seeds) records.push_back({s, seed, std::nullopt, std::nullopt, {}, false});
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      RunRecord& rec = records[i];
      try {
        rec.result = train_alignment(network, rec.site, hypothesis, cfg, rec.seed);
        rec.test_iia = eval_iia(network, rec.site, hypothesis, rec.result->state, testset);
      } catch (const DivergenceError& e) {
        rec.error = e.what();
        rec.diverged = true;
      } catch (const Error& e) {
        rec.error = e.what();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, records.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  IIAHeatmap map;
  map.hypothesis = hypothesis.name();
  map.control_site = network.control_site();
  map.base_rate = dummy_rate(testset);
  map.task_accuracy =
      net::task_accuracy(network, task::gen_task_dataset(cfg.test_size, derive_seed(cfg.test_seed, 7)));
  for (const auto& s : sites) {
    HeatmapCell cell{s, std::nullopt, std::nullopt, {}};
    for (const auto& rec : records) {
      if (rec.site != s) continue;
      if (!rec.test_iia) {
        cell.error += (cell.error.empty() ? "" : "; ") + std::string("seed ") +
                      std::to_string(rec.seed) + ": " + rec.error;
        continue;
      }
      if (!cell.iia || *rec.test_iia > *cell.iia) {
        cell.iia = rec.test_iia;
        cell.best_seed = rec.seed;
      }
    }
    if (cell.iia) cell.error.clear();
    map.cells.push_back(std::move(cell));
  }
  if (runs != nullptr) *runs = std::move(records);
  return map;
}

// ---------------------------------------------------------------------------
// Boundary dynamics and logs

Dynamics boundary_dynamics(const std::vector<LogEntry>& log, std::size_t d) {
  if (log.empty()) throw EvaluationError("boundary dynamics of an empty log");
  Dynamics out;
  const double half = static_cast<double>(d) / 2.0;
  for (const auto& e : log) {
    double total = 0.0;
    for (double w : e.widths) total += w;
    out.series.push_back({e.step, total / half, e.eval_iia});
  }
  const LogEntry& last = log.back();
  std::vector<double> bounds{0.0};
  for (double w : last.widths) bounds.push_back(std::min(bounds.back() + w, static_cast<double>(d)));
  Tape tape;
  Var masks = intervene::interval_masks(tape.constant(Tensor(1, bounds.size(), bounds)),
                                        tape.constant(Tensor::scalar(last.beta)), d);
  const MaskSet snapped = intervene::snap_masks(MaskSet::from_tensor(masks.value()));
  for (std::size_t j = 0; j < snapped.slots(); ++j) out.final_snapped_width += snapped.count(j);
  out.aligned = out.final_snapped_width >= 1;
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_log_csv(std::ostream& out, const std::vector<LogEntry>& log, std::size_t slots) {
  out << "step,beta,eval_iia";
  for (std::size_t j = 0; j < slots; ++j) out << ",width_slot_" << j;
  out << ",loss\n";
  for (const auto& e : log) {
    if (e.widths.size() != slots) throw FormatError("log entry width count does not match slots");
    out << e.step << ',' << format_double(e.beta) << ',' << format_double(e.eval_iia);
    for (double w : e.widths) out << ',' << format_double(w);
    out << ',' << format_double(e.loss) << '\n';
  }
}

std::vector<LogEntry> read_log_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("training log: empty file");
  std::vector<std::string> header;
  {
    std::istringstream h(line);
    std::string f;
    while (std::getline(h, f, ',')) header.push_back(f);
  }
  if (header.size() < 4 || header[0] != "step" || header[1] != "beta" || header[2] != "eval_iia" ||
      header.back() != "loss") {
    throw FormatError("training log: unexpected header '" + line + "'");
  }
  const std::size_t slots = header.size() - 4;
  for (std::size_t j = 0; j < slots; ++j) {
    if (header[3 + j] != "width_slot_" + std::to_string(j)) {
      throw FormatError("training log: unexpected column '" + header[3 + j] + "'");
    }
  }
  std::vector<LogEntry> log;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) f.push_back(cell);
    if (f.size() != header.size()) {
      throw FormatError("training log line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " fields");
    }
    try {
      LogEntry e;
      e.step = std::stoull(f[0]);
      e.beta = std::stod(f[1]);
      e.eval_iia = std::stod(f[2]);
      for (std::size_t j = 0; j < slots; ++j) e.widths.push_back(std::stod(f[3 + j]));
      e.loss = std::stod(f.back());
      log.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw FormatError("training log line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return log;
}

}  // namespace boundless::bdas
