#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "mvcbm/error.hpp"
#include "mvcbm/training/training.hpp"
#include "test_util.hpp"

using namespace mvcbm;
using namespace mvcbm::train;
using model::FusionMode;
using num::Mode;
using num::Tape;
using testutil::tiny_config;
using testutil::tiny_dataset;

namespace {

MultiviewDataset hand_dataset(const std::vector<std::uint8_t>& labels, const std::vector<std::vector<std::uint8_t>>& c) {
  MultiviewDataset ds(1, 2, c.front().size());
  const std::vector<float> x{0.5f, -1.0f};
  for (std::size_t i = 0; i < labels.size(); ++i) ds.add_sample(x, 1, c[i], labels[i], Split::kTrain);
  return ds;
}

TrainConfig quick(int epochs_c, int epochs_y) {
  TrainConfig c;
  c.epochs_c = epochs_c;
  c.epochs_y = epochs_y;
  c.batch_size = 32;
  return c;
}

SsTrainConfig quick_ss(int iterations, double lambda) {
  SsTrainConfig c;
  c.base = quick(2, 2);
  c.iterations = iterations;
  c.epochs_z = 1;
  c.epochs_a = 1;
  c.lambda = lambda;
  c.rep_dim = 2;
  return c;
}

bool trees_equal(const model::Branch<float>& a, const model::Branch<float>& b) { return a.bit_equal(b); }

double max_abs(const num::ParamTree<float>& t) {
  double m = 0.0;
  for (const auto& leaf : t.leaves()) m = std::max(m, static_cast<double>(leaf.value.cwiseAbs().maxCoeff()));
  return m;
}

// max |a - b| over leaves, relative to the largest entry of a.
double rel_diff(const num::ParamTree<float>& a, const num::ParamTree<float>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d = std::max(d, static_cast<double>((a[i].value - b[i].value).cwiseAbs().maxCoeff()));
  }
  return d / std::max(max_abs(a), 1e-30);
}

num::ParamTree<float> sum_trees(num::ParamTree<float> a, const num::ParamTree<float>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i].value += b[i].value;
  return a;
}

}  // namespace

TEST(ClassWeightsTest, HandExamples) {
  const auto ds = hand_dataset({0, 0, 0, 1}, {{0}, {1}, {0}, {1}});
  const auto w = class_weights(ds);
  ASSERT_EQ(w.target.size(), 4u);
  EXPECT_NEAR(w.target[0], 1.0 / 6, 1e-15);
  EXPECT_NEAR(w.target[1], 1.0 / 6, 1e-15);
  EXPECT_NEAR(w.target[2], 1.0 / 6, 1e-15);
  EXPECT_NEAR(w.target[3], 1.0 / 2, 1e-15);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(w.concepts(i, 0), 0.25, 1e-15);

  const auto two = class_weights(hand_dataset({0, 1}, {{0}, {1}}));
  EXPECT_NEAR(two.concepts(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(two.concepts(1, 0), 0.5, 1e-15);
  EXPECT_NEAR(two.target[0], 0.5, 1e-15);
}

TEST(ClassWeightsTest, NormalizedOnGeneratedData) {
  const auto ds = tiny_dataset(3).only(Split::kTrain);
  const auto w = class_weights(ds);
  EXPECT_NEAR(std::accumulate(w.target.begin(), w.target.end(), 0.0), 1.0, 1e-9);
  EXPECT_NEAR(w.concepts.sum(), 1.0, 1e-9);
  EXPECT_GT(w.concepts.minCoeff(), 0.0);
  for (double v : w.target) EXPECT_GT(v, 0.0);
  // Within a column, weights are proportional to the inverse class count.
  const auto col = ds.concept_column(1);
  const double pos = std::accumulate(col.begin(), col.end(), 0.0);
  const double neg = static_cast<double>(ds.size()) - pos;
  const double scale = w.concepts(0, 1) * (col[0] != 0.0 ? pos : neg);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double count = col[i] != 0.0 ? pos : neg;
    EXPECT_NEAR(w.concepts(static_cast<Eigen::Index>(i), 1) * count, scale, 1e-12);
  }
}

TEST(ClassWeightsTest, SingleClassColumnIsNamed) {
  const auto ds = hand_dataset({0, 1, 1}, {{0, 1}, {1, 1}, {0, 1}});
  try {
    class_weights(ds);
    FAIL() << "expected an error";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("concept column 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(class_weights(hand_dataset({1, 1}, {{0}, {1}})), InvalidArgument);
  EXPECT_NO_THROW(target_weights(ds));
}

TEST(TrainConfigTest, ValidationAndJson) {
  TrainConfig c = preset(model::Family::kMvcbmJoint);
  EXPECT_EQ(c.mode, TrainMode::kJoint);
  nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>().lr_y, c.lr_y);
  c.alpha = -1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  SsTrainConfig s = ss_preset();
  nlohmann::json js = s;
  const auto back = js.get<SsTrainConfig>();
  EXPECT_EQ(back.iterations, 7);
  EXPECT_EQ(back.rep_dim, s.rep_dim);
  s.lambda = -0.1;
  EXPECT_THROW(s.validate(), InvalidArgument);
}

TEST(SequentialTrainingTest, ZeroEpochsReturnInitialization) {
  const auto ds = tiny_dataset(1).only(Split::kTrain);
  const Rng rng(5);
  const auto m = train_sequential(ds, tiny_config(), quick(0, 0), rng);
  const auto init = model::init_mvcbm(tiny_config(), rng.fork("init"));
  EXPECT_TRUE(trees_equal(m.phi, init.phi));
  EXPECT_TRUE(m.theta.bit_equal(init.theta));
}

TEST(SequentialTrainingTest, TargetPhaseLeavesConceptBranchUntouched) {
  const auto ds = tiny_dataset(2).only(Split::kTrain);
  const Rng rng(11);
  auto m = train_concepts(ds, tiny_config(), quick(3, 3), rng);
  const auto phi = m.phi;
  const auto theta = m.theta;
  train_target_head(m, ds, quick(3, 3), rng);
  EXPECT_TRUE(trees_equal(m.phi, phi));
  EXPECT_FALSE(m.theta.bit_equal(theta));
  const auto full = train_sequential(ds, tiny_config(), quick(3, 3), rng);
  EXPECT_TRUE(trees_equal(full.phi, phi));
  EXPECT_TRUE(full.theta.bit_equal(m.theta));
  EXPECT_EQ(full.meta.family, model::Family::kMvcbmSeq);
}

TEST(SequentialTrainingTest, LogsOneRecordPerEpochAndLossDecreases) {
  const auto ds = tiny_dataset(4).only(Split::kTrain);
  const auto path = std::filesystem::temp_directory_path() / "mvcbm_training_log_test.jsonl";
  std::filesystem::remove(path);
  {
    JsonlLogger logger(path);
    train_sequential(ds, tiny_config(), quick(12, 5), Rng(2), logger.sink());
  }
  std::ifstream in(path);
  std::vector<nlohmann::json> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(lines.size(), 17u);
  EXPECT_EQ(lines[0]["phase"], "concept");
  EXPECT_EQ(lines[12]["phase"], "target");
  EXPECT_EQ(lines[16]["epoch"], 4);
  EXPECT_EQ(lines[0]["steps"], 7);  // 200 samples, batches of 32
  EXPECT_LT(lines[11]["mean_loss"].get<double>(), lines[0]["mean_loss"].get<double>());
  std::filesystem::remove(path);
}

TEST(SequentialTrainingTest, NonFiniteLossAbortsWithStep) {
  auto ds = tiny_dataset(5).only(Split::kTrain);
  MultiviewDataset bad(ds.max_views(), ds.view_dim(), ds.concept_count());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<float> x(ds.padded_views(i).begin(),
                         ds.padded_views(i).begin() + static_cast<std::ptrdiff_t>(ds.view_count(i) * ds.view_dim()));
    if (i == 7) x[0] = std::numeric_limits<float>::quiet_NaN();
    bad.add_sample(x, ds.view_count(i), ds.concepts(i), ds.label(i), ds.split(i));
  }
  TrainConfig c = quick(1, 1);
  c.batch_size = static_cast<int>(bad.size());
  try {
    train_sequential(bad, tiny_config(), c, Rng(0));
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(e.where().find("concept step 0"), std::string::npos) << e.what();
  }
}

TEST(JointTrainingTest, LossGradientEqualsSumOfTermGradients) {
  const auto ds = tiny_dataset(6).only(Split::kTrain);
  const auto m = model::init_mvcbm(tiny_config(), Rng(3));
  const auto w = class_weights(ds);
  std::vector<std::size_t> rows(40);
  std::iota(rows.begin(), rows.end(), std::size_t{10});

  // Oracle: target and concept terms on separate tapes.
  const auto views = model::pack(ds, rows);
  Matrix<float> wt(static_cast<Eigen::Index>(rows.size()), 1);
  Matrix<float> wc(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    wt(i, 0) = static_cast<float>(w.target[rows[r]]);
    for (Eigen::Index k = 0; k < 3; ++k) {
      wc(i, k) = static_cast<float>(w.target[rows[r]] * w.concepts(static_cast<Eigen::Index>(rows[r]), k));
    }
  }
  Tape<float> tt(Mode::kEval);
  auto c1 = model::branch_forward(tt, m.phi, m.branch_specs(), tt.constant(views.rows), views.segments);
  auto y1 = num::forward_layers(tt, m.theta, m.theta_specs(), c1);
  tt.backward(num::weighted_bce(y1, model::label_column(ds, rows), wt));
  Tape<float> tc(Mode::kEval);
  auto c2 = model::branch_forward(tc, m.phi, m.branch_specs(), tc.constant(views.rows), views.segments);
  num::forward_layers(tc, m.theta, m.theta_specs(), c2);
  tc.backward(num::weighted_bce(c2, model::concept_matrix(ds, rows), wc));

  for (double alpha : {1.0, 0.0}) {
    Tape<float> tj(Mode::kEval);
    tj.backward(joint_loss(tj, m, ds, w, rows, alpha));
    for (const auto* tree : {&m.phi.psi, &m.phi.xi, &m.phi.zeta, &m.theta}) {
      if (tree->empty()) continue;
      auto expect = tt.gradients(*tree);
      if (alpha == 1.0) expect = sum_trees(expect, tc.gradients(*tree));
      EXPECT_LT(rel_diff(expect, tj.gradients(*tree)), 1e-6) << "alpha " << alpha;
    }
  }
}

TEST(JointTrainingTest, RunsAndUpdatesEveryGroup) {
  const auto ds = tiny_dataset(7).only(Split::kTrain);
  const Rng rng(8);
  TrainConfig c = preset(model::Family::kMvcbmJoint);
  c.epochs_y = 2;
  const auto m = train_joint(ds, tiny_config(FusionMode::kLstm), c, rng);
  const auto init = model::init_mvcbm(tiny_config(FusionMode::kLstm), rng.fork("init"));
  EXPECT_FALSE(m.phi.psi.bit_equal(init.phi.psi));
  EXPECT_FALSE(m.phi.xi.bit_equal(init.phi.xi));
  EXPECT_FALSE(m.theta.bit_equal(init.theta));
  EXPECT_TRUE(m.phi.psi.all_finite());
  EXPECT_EQ(m.meta.family, model::Family::kMvcbmJoint);
}

TEST(BlackBoxTrainingTest, ConceptsHaveNoInfluence) {
  const auto ds = tiny_dataset(9).only(Split::kTrain);
  const std::vector<std::size_t> flipped{2, 0, 1};
  const auto other = ds.select_concepts(flipped);
  ASSERT_FALSE(other == ds);
  for (auto kind : {BlackBoxKind::kMvbm, BlackBoxKind::kSingleViewMlp}) {
    const auto a = train_blackbox(ds, tiny_config(), quick(0, 2), Rng(4), kind);
    const auto b = train_blackbox(other, tiny_config(), quick(0, 2), Rng(4), kind);
    EXPECT_TRUE(trees_equal(a.phi, b.phi));
    EXPECT_TRUE(a.theta.bit_equal(b.theta));
    const auto terms = blackbox_loss_terms(a, ds, model::all_rows(ds));
    EXPECT_EQ(terms.concepts, 0.0);
    EXPECT_GT(terms.target, 0.0);
  }
}

TEST(BlackBoxTrainingTest, SingleViewIgnoresLaterViews) {
  const auto ds = tiny_dataset(10).only(Split::kTrain);
  const auto a = train_blackbox(ds, tiny_config(), quick(0, 1), Rng(4), BlackBoxKind::kSingleViewMlp);
  const auto b = train_blackbox(ds.truncate_views(1), tiny_config(), quick(0, 1), Rng(4), BlackBoxKind::kMvbm);
  EXPECT_TRUE(trees_equal(a.phi, b.phi));
  EXPECT_EQ(a.meta.family, model::Family::kMlp);
  EXPECT_EQ(b.meta.family, model::Family::kMvbm);
  const auto init = train_blackbox(ds, tiny_config(), quick(0, 0), Rng(4), BlackBoxKind::kMvbm);
  EXPECT_TRUE(trees_equal(init.phi, model::init_mvcbm(tiny_config(), Rng(4).fork("init")).phi));
}

TEST(SsmvcbmTrainingTest, PhasesTouchOnlyTheirParameters) {
  const auto ds = tiny_dataset(12).only(Split::kTrain);
  SsmvcbmTrainer t(ds, tiny_config(), quick_ss(1, 0.01), Rng(6));
  t.phase1();
  auto before = t.model();
  t.phase2a(0);
  EXPECT_TRUE(trees_equal(t.model().phi_c, before.phi_c));
  EXPECT_TRUE(t.model().tau.bit_equal(before.tau));
  EXPECT_FALSE(t.model().phi_z.psi.bit_equal(before.phi_z.psi));
  EXPECT_FALSE(t.model().theta.bit_equal(before.theta));
  before = t.model();
  t.phase2b(0);
  EXPECT_TRUE(trees_equal(t.model().phi_c, before.phi_c));
  EXPECT_TRUE(trees_equal(t.model().phi_z, before.phi_z));
  EXPECT_TRUE(t.model().theta.bit_equal(before.theta));
  EXPECT_FALSE(t.model().tau.bit_equal(before.tau));
  before = t.model();
  t.phase3();
  t.phase4();
  EXPECT_TRUE(trees_equal(t.model().phi_c, before.phi_c));
  EXPECT_TRUE(trees_equal(t.model().phi_z, before.phi_z));
  EXPECT_TRUE(t.model().tau.bit_equal(before.tau));
}

TEST(SsmvcbmTrainingTest, ConceptBranchEqualsPhaseOneAlone) {
  const auto ds = tiny_dataset(13).only(Split::kTrain);
  const Rng rng(21);
  const auto cfg = quick_ss(2, 0.01);
  const auto ss = train_ssmvcbm(ds, tiny_config(), cfg, rng);
  const auto mv = train_concepts(ds, tiny_config(), cfg.base, rng);
  EXPECT_TRUE(trees_equal(ss.phi_c, mv.phi));
  EXPECT_EQ(ss.meta.family, model::Family::kSsmvcbm);
}

TEST(SsmvcbmTrainingTest, ZeroIterationsLeaveRepresentationAtInitialization) {
  const auto ds = tiny_dataset(14).only(Split::kTrain);
  const Rng rng(3);
  SsmvcbmTrainer t(ds, tiny_config(), quick_ss(0, 0.01), rng);
  const auto init = t.model();
  const auto m = t.run();
  EXPECT_TRUE(trees_equal(m.phi_z, init.phi_z));
  EXPECT_TRUE(m.tau.bit_equal(init.tau));
  EXPECT_TRUE(m.theta.all_finite());
  const auto out = model::predict(model::AnyModel{m}, ds, model::all_rows(ds));
  EXPECT_EQ(out.y_hat.rows(), static_cast<Eigen::Index>(ds.size()));
}

TEST(SsmvcbmTrainingTest, AdversaryMattersOnlyWithPositiveLambda) {
  const auto ds = tiny_dataset(15).only(Split::kTrain);
  for (double lambda : {0.0, 0.5}) {
    SsmvcbmTrainer a(ds, tiny_config(), quick_ss(1, lambda), Rng(9));
    SsmvcbmTrainer b(ds, tiny_config(), quick_ss(1, lambda), Rng(9));
    a.phase1();
    b.phase1();
    for (auto& leaf : b.model().tau.leaves()) leaf.value.array() += 0.25f;
    a.phase2a(0);
    b.phase2a(0);
    const bool same = trees_equal(a.model().phi_z, b.model().phi_z) && a.model().theta.bit_equal(b.model().theta);
    EXPECT_EQ(same, lambda == 0.0) << "lambda " << lambda;
  }
}

TEST(SsmvcbmTrainingTest, ZeroRepresentationSkipsAdversarialPhases) {
  const auto ds = tiny_dataset(16).only(Split::kTrain);
  auto cfg = quick_ss(2, 0.01);
  cfg.rep_dim = 0;
  const auto m = train_ssmvcbm(ds, tiny_config(), cfg, Rng(1));
  EXPECT_EQ(m.rep_dim, 0);
  EXPECT_TRUE(m.phi_z.psi.empty());
  const auto out = model::predict(model::AnyModel{m}, ds, model::all_rows(ds));
  EXPECT_EQ(out.z_hat.cols(), 0);
}
