#include <gtest/gtest.h>

#include <filesystem>

#include "boundless/autodiff.hpp"
#include "boundless/bdas.hpp"
#include "boundless/errors.hpp"
#include "boundless/io.hpp"
#include "boundless/intervene.hpp"
#include "boundless/network.hpp"
#include "boundless/random.hpp"
#include "oracles.hpp"

namespace iv = boundless::intervene;
namespace net = boundless::net;
namespace causal = boundless::causal;
namespace task = boundless::task;
using boundless::Label;
using boundless::num::Tape;
using boundless::num::Tensor;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("boundless_net_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

iv::MaskSet truth_partition(const net::PlantedNet& n) {
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  for (const auto& b : n.ground_truth().blocks) blocks.emplace_back(b.start, b.size);
  return iv::block_partition(n.width(), blocks);
}

}  // namespace

class PlantedEach : public ::testing::TestWithParam<causal::Hypothesis> {};

TEST_P(PlantedEach, SolvesTheTask) {
  const auto n = net::build_planted_net(causal::make_hypothesis(GetParam()), 16, 1);
  EXPECT_EQ(net::task_accuracy(*n, task::gen_task_dataset(3000, 5)), 1.0);
}

TEST_P(PlantedEach, GroundTruthAlignmentHasPerfectIia) {
  const auto model = causal::make_hypothesis(GetParam());
  const auto n = net::build_planted_net(model, 16, 2);
  const auto truth = n->ground_truth();
  EXPECT_EQ(truth.planted_site, (net::ActivationSite{net::kPlantedLayer, 0}));
  ASSERT_EQ(truth.blocks.size(), model.alignable().size());
  // Row-form activations are code * Q^T, so the rotation that recovers the
  // code is Q^T.
  const Tensor r = truth.rotation.transposed();
  const auto testset = boundless::bdas::gen_counterfactual_dataset(model, 1000, 3,
                                                                   boundless::bdas::Sampling::Balanced);
  EXPECT_EQ(boundless::bdas::eval_iia(*n, truth.planted_site, r, truth_partition(*n), testset), 1.0);
}

TEST_P(PlantedEach, SiteActivationIsRotatedCode) {
  const auto n = net::build_planted_net(causal::make_hypothesis(GetParam()), 16, 4);
  const auto batch = task::encode_all(task::gen_task_dataset(10, 1));
  const Tensor code = n->code(batch, net::kPlantedLayer);
  const Tensor act = n->run_to(batch, {net::kPlantedLayer, 0}).activation;
  const Tensor q = n->ground_truth().rotation;
  EXPECT_LT(boundless::num::max_abs_diff(act, boundless::num::matmul_transposed_b(code, q)), 1e-12);
  const auto qtq = oracle::matmul(oracle::to_matrix(q.transposed()), oracle::to_matrix(q));
  EXPECT_LT(oracle::max_abs(qtq, oracle::identity(16)), 1e-12);
}

TEST_P(PlantedEach, SaveLoadPreservesLogits) {
  const auto n = net::build_planted_net(causal::make_hypothesis(GetParam()), 20, 6);
  const auto dir = scratch("planted");
  n->save(dir / "net");
  const auto back = net::load_network(dir / "net");
  const auto batch = task::encode_all(task::gen_task_dataset(50, 2));
  EXPECT_EQ(back->forward(batch), n->forward(batch));
  EXPECT_EQ(back->kind(), net::NetworkKind::PlantedMlp);
  std::filesystem::remove_all(dir);
}

INSTANTIATE_TEST_SUITE_P(All, PlantedEach, ::testing::ValuesIn(causal::all_hypotheses()),
                         [](const auto& info) { return std::string(causal::to_string(info.param)); });

TEST(Planted, ControlSiteCarriesNoVariable) {
  const auto model = causal::make_hypothesis(causal::Hypothesis::LeftBoundary);
  const auto n = net::build_planted_net(model, 16, 2);
  const auto testset = boundless::bdas::gen_counterfactual_dataset(model, 1000, 9,
                                                                   boundless::bdas::Sampling::Balanced);
  boundless::Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    iv::RotationParams p = iv::RotationParams::identity(16);
    for (double& v : p.skew) v = rng.uniform(-1.0, 1.0);
    const std::vector<std::pair<std::size_t, std::size_t>> half{{0, 8}};
    const double iia = boundless::bdas::eval_iia(*n, n->control_site(), iv::materialize_rotation(p),
                                                 iv::block_partition(16, half), testset);
    EXPECT_LE(iia, 0.6);
  }
}

TEST(Planted, CapacityAndHypothesisChecks) {
  const auto lrb = causal::make_hypothesis(causal::Hypothesis::LeftAndRightBoundary);
  EXPECT_THROW(net::build_planted_net(lrb, 7, 0), boundless::CapacityError);
  EXPECT_NO_THROW(net::build_planted_net(lrb, 8, 0));
  const auto custom = causal::load_model_json(R"({"name":"custom","output":"output","variables":[
    {"name":"lower","domain":"real"},{"name":"upper","domain":"real"},{"name":"amount","domain":"real"},
    {"name":"output","domain":"label","mechanism":"interval-membership","parents":["amount","bracket"]},
    {"name":"bracket","domain":"interval","mechanism":"interval","parents":["lower","upper"],"alignable":true}]})");
  EXPECT_THROW(net::build_planted_net(custom, 16, 0), boundless::HypothesisError);
}

TEST(Planted, SitesOutsideTheNetwork) {
  const auto n = net::build_planted_net(causal::make_hypothesis(causal::Hypothesis::LeftBoundary), 16, 0);
  EXPECT_THROW(n->check_site({2, 0}), boundless::SiteError);
  EXPECT_THROW(n->check_site({0, 1}), boundless::SiteError);
  EXPECT_EQ(n->all_sites().size(), 2u);
}

TEST(SeqNet, UntrainedHeadPredictsYes) {
  const net::SeqNet n({.layers = 1, .width = 8, .heads = 2, .mlp_ratio = 2}, 0);
  for (Label l : net::predict(n, task::encode_all(task::gen_task_dataset(20, 0)))) EXPECT_EQ(l, Label::Yes);
}

TEST(SeqNet, RunToThenResumeEqualsForwardAtEverySite) {
  const net::SeqNet n({.layers = 2, .width = 8, .heads = 2, .mlp_ratio = 2}, 4);
  const auto trained = net::train_task_net({.layers = 2, .width = 8, .heads = 2, .mlp_ratio = 2},
                                           {.train_examples = 256, .test_examples = 64, .epochs = 1,
                                            .batch = 32, .lr = 1e-2, .lr_final_fraction = 0.1, .seed = 1,
                                            .max_steps = std::nullopt});
  const auto batch = task::encode_all(task::gen_task_dataset(9, 3));
  for (const net::Network* m : {static_cast<const net::Network*>(&n), static_cast<const net::Network*>(trained.get())}) {
    const Tensor full = m->forward(batch);
    for (const auto& site : m->all_sites()) {
      const auto state = m->run_to(batch, site);
      EXPECT_EQ(net::resume_plain(*m, state, state.activation), full) << net::to_string(site);
    }
  }
}

TEST(SeqNet, ResumeGradientMatchesCentralDifferences) {
  net::SeqNet n({.layers = 2, .width = 8, .heads = 2, .mlp_ratio = 2}, 7);
  // The head starts at zero; give it weights so gradients are non-trivial.
  boundless::Rng rng(2);
  for (auto& [name, t] : n.parameters()) {
    if (name.rfind("head.", 0) != 0) continue;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  }
  const auto batch = task::encode_all(task::gen_task_dataset(3, 8));
  const net::ActivationSite site{1, 5};
  const auto state = n.run_to(batch, site);
  const std::vector<std::size_t> targets{0, 1, 1};
  Tape tape;
  auto leaf = tape.leaf(state.activation);
  tape.backward(boundless::num::cross_entropy(n.resume(tape, state, leaf), targets));
  auto value = [&](const std::vector<double>& x) {
    const Tensor logits = net::resume_plain(n, state, Tensor(state.activation.rows(), state.activation.cols(), x));
    double s = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      s += oracle::cross_entropy({logits(r, 0), logits(r, 1)}, targets[r]);
    }
    return s / static_cast<double>(logits.rows());
  };
  EXPECT_LT(oracle::relative_error(leaf.grad().values(), oracle::central_gradient(value, state.activation.values())),
            1e-5);
}

TEST(SeqNet, TrainingIsDeterministicAndSaveLoadRoundTrips) {
  const net::SeqNetArch arch{.layers = 1, .width = 16, .heads = 2, .mlp_ratio = 2};
  const net::SeqNetTraining tr{.train_examples = 512, .test_examples = 128, .epochs = 1, .batch = 64,
                               .lr = 3e-3, .lr_final_fraction = 0.1, .seed = 9, .max_steps = std::nullopt};
  const auto a = net::train_task_net(arch, tr);
  const auto b = net::train_task_net(arch, tr);
  EXPECT_EQ(a->parameters(), b->parameters());
  EXPECT_EQ(a->recorded_accuracy(), b->recorded_accuracy());
  const auto dir = scratch("seq");
  a->save(dir / "net");
  const auto back = net::load_network(dir / "net");
  const auto batch = task::encode_all(task::gen_task_dataset(30, 1));
  EXPECT_EQ(back->forward(batch), a->forward(batch));
  EXPECT_EQ(static_cast<const net::SeqNet&>(*back).recorded_accuracy(), a->recorded_accuracy());
  std::filesystem::remove_all(dir);
}

TEST(SeqNet, ZeroStepsLeavesInitialization) {
  const net::SeqNetArch arch{.layers = 1, .width = 8, .heads = 2, .mlp_ratio = 2};
  const auto n = net::train_task_net(arch, {.train_examples = 64, .test_examples = 16, .epochs = 1, .batch = 8,
                                            .lr = 1e-2, .lr_final_fraction = 0.1, .seed = 3, .max_steps = 0});
  const net::SeqNet fresh(arch, 3);
  EXPECT_EQ(n->parameters(), fresh.parameters());
}

TEST(SeqNet, ControlSiteAndSiteGrid) {
  const net::SeqNet n({.layers = 3, .width = 8, .heads = 2, .mlp_ratio = 2}, 0);
  EXPECT_EQ(n.all_sites().size(), 4u * task::kSeqLen);
  EXPECT_EQ(n.control_site(), (net::ActivationSite{1, task::kQueryPrefixPosition}));
  EXPECT_THROW(n.check_site({4, 0}), boundless::SiteError);
  EXPECT_THROW(n.check_site({0, task::kSeqLen}), boundless::SiteError);
}

TEST(Network, LoadRejectsUnknownKind) {
  const auto dir = scratch("kind");
  boundless::io::write_atomic(dir / "x.json", R"({"kind":"lstm"})");
  boundless::io::write_atomic(dir / "x.bin", "");
  EXPECT_THROW(net::load_network(dir / "x"), boundless::FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Network, ArgmaxTiesGoToYes) {
  const std::vector<double> tie{0.5, 0.5};
  EXPECT_EQ(net::argmax_label(tie), Label::Yes);
  const std::vector<double> no{0.1, 0.2};
  EXPECT_EQ(net::argmax_label(no), Label::No);
}
