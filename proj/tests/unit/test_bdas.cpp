#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "boundless/autodiff.hpp"
#include "boundless/bdas.hpp"
#include "boundless/errors.hpp"
#include "boundless/random.hpp"
#include "objective_oracle.hpp"
#include "oracles.hpp"

namespace bdas = boundless::bdas;
namespace iv = boundless::intervene;
namespace net = boundless::net;
namespace causal = boundless::causal;
namespace task = boundless::task;
using boundless::Label;
using boundless::Rng;
using boundless::num::Tape;
using boundless::num::Tensor;

namespace {

const net::PlantedNet& planted(causal::Hypothesis h) {
  static std::map<causal::Hypothesis, std::unique_ptr<net::PlantedNet>> cache;
  auto& slot = cache[h];
  if (!slot) slot = net::build_planted_net(causal::make_hypothesis(h), 16, 3);
  return *slot;
}

}  // namespace

TEST(Objective, GradientMatchesFiniteDifferencesOnPlantedWidth8) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto n = net::build_planted_net(model, 8, 1);
  for (auto [site, seed] : {std::pair{net::ActivationSite{1, 0}, 5u}, std::pair{net::ActivationSite{0, 0}, 6u}}) {
    const auto check = oracle::objective_gradient_check(*n, site, model, seed);
    EXPECT_LT(check.value_gap, 1e-12);
    EXPECT_LT(check.relative_error, 1e-4);
  }
}

TEST(Objective, GradientMatchesFiniteDifferencesOnSeqNetWidth8) {
  net::SeqNet n({.layers = 2, .width = 8, .heads = 2, .mlp_ratio = 2}, 2);
  Rng rng(4);
  for (auto& [name, t] : n.parameters()) {
    if (name.rfind("head.", 0) != 0) continue;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  }
  for (auto h : {causal::Hypothesis::LeftAndRightBoundary, causal::Hypothesis::MidpointDistance}) {
    const auto check = oracle::objective_gradient_check(n, {1, 11}, causal::make_hypothesis(h), 7);
    EXPECT_LT(check.value_gap, 1e-12);
    EXPECT_LT(check.relative_error, 1e-4);
  }
}

TEST(Config, ValidateNamesBadFields) {
  const bdas::TrainConfig ok;
  EXPECT_NO_THROW(bdas::validate(ok));
  auto bad = ok;
  bad.lr_rotation = -0.1;
  EXPECT_THROW(bdas::validate(bad), boundless::ConfigError);
  bad = ok;
  bad.batch = 0;
  EXPECT_THROW(bdas::validate(bad), boundless::ConfigError);
  bad = ok;
  bad.beta_end = 60.0;
  EXPECT_THROW(bdas::validate(bad), boundless::ConfigError);
  bad = ok;
  bad.lr_boundary = std::nan("");
  EXPECT_THROW(bdas::validate(bad), boundless::ConfigError);
}

TEST(Config, ScheduleHitsEndpointsAndIsLogLinear) {
  bdas::TrainConfig cfg;
  const std::size_t total = bdas::total_steps(cfg);
  EXPECT_EQ(total, 3u * 313u);
  EXPECT_EQ(bdas::beta_at(cfg, 0, total), 50.0);
  EXPECT_EQ(bdas::beta_at(cfg, total - 1, total), 0.1);
  for (std::size_t s = 1; s < total; ++s) EXPECT_LT(bdas::beta_at(cfg, s, total), bdas::beta_at(cfg, s - 1, total));
  cfg.train_size = 64 * 5;
  cfg.epochs = 1;
  EXPECT_NEAR(bdas::beta_at(cfg, 2, 5), std::sqrt(50.0 * 0.1), 1e-12);
}

TEST(Counterfactual, BalancedSetsHitEveryQuadrantQuota) {
  for (auto h : causal::all_hypotheses()) {
    const auto data = bdas::gen_counterfactual_dataset(causal::make_hypothesis(h), 1000, 3, bdas::Sampling::Balanced);
    std::array<int, 4> counts{};
    for (const auto& ex : data) ++counts[2 * boundless::label_index(ex.base.gold) + boundless::label_index(ex.label)];
    EXPECT_EQ(counts, (std::array<int, 4>{250, 250, 250, 250})) << causal::to_string(h);
    EXPECT_EQ(bdas::dummy_rate(data), 0.5);
  }
}

TEST(Counterfactual, IidSetsInterveneOnNonEmptySubsets) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftAndRightBoundary);
  std::set<std::pair<bool, bool>> seen;
  for (const auto& ex : bdas::gen_counterfactual_dataset(model, 300, 1)) {
    ASSERT_EQ(ex.sources.size(), 2u);
    const std::pair<bool, bool> used{ex.sources[0].has_value(), ex.sources[1].has_value()};
    EXPECT_TRUE(used.first || used.second);
    seen.insert(used);
    if (used.first && used.second) {
      EXPECT_EQ(*ex.sources[0], *ex.sources[1]);
    }
  }
  EXPECT_EQ(seen.size(), 3u);
}

TEST(Counterfactual, SeedDeterminism) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::MidpointDistance);
  const auto a = bdas::gen_counterfactual_dataset(model, 50, 9);
  const auto b = bdas::gen_counterfactual_dataset(model, 50, 9);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].base, b[i].base);
    EXPECT_EQ(a[i].label, b[i].label);
  }
}

TEST(Training, RecoversPlantedLeftBoundary) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  const bdas::TrainConfig cfg;
  const auto result = bdas::train_alignment(n, {1, 0}, model, cfg, 0);
  const auto test = bdas::gen_counterfactual_dataset(model, 1000, 0, bdas::Sampling::Balanced);
  EXPECT_GE(bdas::eval_iia(n, {1, 0}, model, result.state, test), 0.99);
  EXPECT_FALSE(result.unaligned);
  const Tensor r = result.state.rotation_matrix();
  const auto rtr = oracle::matmul(oracle::to_matrix(r.transposed()), oracle::to_matrix(r));
  EXPECT_LT(oracle::max_abs(rtr, oracle::identity(16)), 1e-5);
  // Logged every 200 steps plus the final step.
  ASSERT_EQ(result.log.size(), 5u);
  EXPECT_EQ(result.log.front().step, 200u);
  EXPECT_EQ(result.log.back().step, bdas::total_steps(cfg));
  EXPECT_EQ(result.log.back().beta, cfg.beta_end);
  const auto dyn = bdas::boundary_dynamics(result.log, 16);
  EXPECT_GE(dyn.final_snapped_width, 1u);
  EXPECT_LE(dyn.final_snapped_width, 4u);
}

TEST(Training, ControlSiteEndsUnaligned) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  const auto result = bdas::train_alignment(n, n.control_site(), model, bdas::TrainConfig{}, 1);
  EXPECT_TRUE(result.unaligned);
  EXPECT_EQ(bdas::boundary_dynamics(result.log, 16).final_snapped_width, 0u);
}

TEST(Training, IsDeterministic) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  bdas::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.train_size = 2000;
  const auto a = bdas::train_alignment(n, {1, 0}, model, cfg, 4);
  const auto b = bdas::train_alignment(n, {1, 0}, model, cfg, 4);
  EXPECT_EQ(a.state.rotation.skew, b.state.rotation.skew);
  EXPECT_EQ(a.state.boundaries.raw, b.state.boundaries.raw);
}

TEST(Training, RejectsBadInputs) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  EXPECT_THROW(bdas::train_alignment(n, {3, 0}, model, {}, 0), boundless::SiteError);
  bdas::TrainConfig bad;
  bad.epochs = 0;
  EXPECT_THROW(bdas::train_alignment(n, {1, 0}, model, bad, 0), boundless::ConfigError);
}

TEST(Training, OverflowingStepsDiverge) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  bdas::TrainConfig cfg;
  cfg.lr_boundary = 1e308;
  cfg.lr_rotation = 1e308;
  cfg.train_size = 640;
  EXPECT_THROW(bdas::train_alignment(n, {1, 0}, model, cfg, 0), boundless::DivergenceError);
}

TEST(Evaluation, RandomFrozenAlignmentSitsAtChance) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  const auto test = bdas::gen_counterfactual_dataset(model, 1000, 5, bdas::Sampling::Balanced);
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    auto s = iv::initial_state(16, model.alignable(), 1.0, 0);
    for (double& v : s.rotation.skew) v = rng.uniform(-2.0, 2.0);
    const double iia = bdas::eval_iia(n, {1, 0}, model, s, test);
    EXPECT_GE(iia, 0.4);
    EXPECT_LE(iia, 0.6);
  }
}

TEST(Evaluation, EmptyOrMismatchedSets) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  const auto s = iv::initial_state(16, model.alignable(), 1.0, 0);
  EXPECT_THROW(bdas::eval_iia(n, {1, 0}, model, s, {}), boundless::EvaluationError);
  const auto other = iv::initial_state(16, {"bracket"}, 1.0, 0);
  const auto test = bdas::gen_counterfactual_dataset(model, 10, 5);
  EXPECT_THROW(bdas::eval_iia(n, {1, 0}, model, other, test), boundless::Error);
  EXPECT_THROW(bdas::dummy_rate({}), boundless::EvaluationError);
}

TEST(Dynamics, SyntheticLogs) {
  std::vector<bdas::LogEntry> log{{200, 1.0, 0.7, {4.0}, 0.5}, {400, 0.1, 0.9, {2.0}, 0.3}};
  const auto d = bdas::boundary_dynamics(log, 8);
  ASSERT_EQ(d.series.size(), 2u);
  EXPECT_DOUBLE_EQ(d.series[0].normalized_width, 1.0);
  EXPECT_DOUBLE_EQ(d.series[1].normalized_width, 0.5);
  EXPECT_EQ(d.final_snapped_width, 2u);
  EXPECT_TRUE(d.aligned);
  log.back().widths = {0.3};
  EXPECT_FALSE(bdas::boundary_dynamics(log, 8).aligned);
  EXPECT_THROW(bdas::boundary_dynamics({}, 8), boundless::EvaluationError);
}

TEST(Dynamics, LogCsvRoundTrip) {
  const std::vector<bdas::LogEntry> log{{200, 12.5, 0.75, {1.25, 0.1}, 0.693}, {313, 0.1, 1.0, {1.0, 0.0}, 0.01}};
  std::stringstream s;
  bdas::write_log_csv(s, log, 2);
  EXPECT_EQ(s.str().substr(0, s.str().find('\n')), "step,beta,eval_iia,width_slot_0,width_slot_1,loss");
  const auto back = bdas::read_log_csv(s);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].widths, log[0].widths);
  EXPECT_EQ(back[1].loss, log[1].loss);
  EXPECT_EQ(back[1].step, 313u);
}

TEST(Sweep, CoversControlSiteAndPeaksAtThePlantedSite) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  std::vector<bdas::RunRecord> runs;
  const auto map = bdas::sweep(n, {{1, 0}}, model, {}, {0, 1}, 2, &runs);
  ASSERT_EQ(map.cells.size(), 2u);
  EXPECT_EQ(map.cells[0].site, n.control_site());
  EXPECT_EQ(map.max_cell()->site, (net::ActivationSite{1, 0}));
  EXPECT_LE(*map.find(n.control_site())->iia, 0.55);
  EXPECT_EQ(runs.size(), 4u);
  EXPECT_EQ(map.task_accuracy, 1.0);
  EXPECT_EQ(map.base_rate, 0.5);
  const auto serial = bdas::sweep(n, {{1, 0}}, model, {}, {0, 1}, 1);
  for (std::size_t i = 0; i < map.cells.size(); ++i) EXPECT_EQ(map.cells[i].iia, serial.cells[i].iia);
}

TEST(Sweep, FailedRunsBecomeMissingCells) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  bdas::TrainConfig cfg;
  cfg.lr_boundary = 1e308;
  cfg.lr_rotation = 1e308;
  cfg.train_size = 640;
  std::vector<bdas::RunRecord> runs;
  const auto map = bdas::sweep(n, {{1, 0}}, model, cfg, {0}, 1, &runs);
  for (const auto& c : map.cells) {
    EXPECT_FALSE(c.iia.has_value());
    EXPECT_FALSE(c.error.empty());
  }
  EXPECT_EQ(map.max_cell(), nullptr);
  EXPECT_TRUE(runs[0].diverged);
}

TEST(Sweep, RejectsEmptyInputs) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto& n = planted(causal::Hypothesis::LeftBoundary);
  EXPECT_THROW(bdas::sweep(n, {}, model, {}, {0}), boundless::ConfigError);
  EXPECT_THROW(bdas::sweep(n, {{1, 0}}, model, {}, {}), boundless::ConfigError);
  EXPECT_THROW(bdas::sweep(n, {{4, 0}}, model, {}, {0}), boundless::SiteError);
}
