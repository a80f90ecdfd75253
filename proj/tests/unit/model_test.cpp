#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "mvcbm/model/model_io.hpp"
#include "mvcbm/model/models.hpp"
#include "mvcbm/numerics/gradcheck.hpp"
#include "test_util.hpp"

using namespace mvcbm;
using namespace mvcbm::model;
using num::Matrix;
using testutil::random_matrix;

namespace {

MvcbmConfig small_config(FusionMode fusion = FusionMode::kMean) {
  MvcbmConfig c;
  c.view_dim = 6;
  c.encoder_widths = {8, 8, 5};
  c.concept_head_widths = {7, 4};
  c.concept_count = 3;
  c.target_hidden = 5;
  c.fusion = fusion;
  return c;
}

// Runs the model once in training mode so batch-norm running statistics move
// away from their initial values.
void warm_up(MvcbmModel& m, const PackedViews& batch) {
  Tape<float> tape(Mode::kTrain, 1);
  branch_forward(tape, m.phi, m.branch_specs(), tape.constant(batch.rows), batch.segments);
  commit_buffers(tape, m.phi);
}

PackedViews random_views(const std::vector<int>& lengths, std::int64_t p, std::uint64_t seed) {
  PackedViews v;
  v.segments = num::Segments::from_lengths(lengths);
  v.rows = random_matrix<float>(v.segments.total(), p, seed);
  return v;
}

bool bit_equal(const Matrix<float>& a, const Matrix<float>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

// Swaps the rows of sample b's views according to `order`.
PackedViews permute_sample(const PackedViews& in, Eigen::Index b, const std::vector<int>& order) {
  PackedViews out = in;
  const auto start = in.segments.begin(b);
  for (std::size_t v = 0; v < order.size(); ++v) {
    out.rows.row(start + static_cast<Eigen::Index>(v)) = in.rows.row(start + order[v]);
  }
  return out;
}

}  // namespace

TEST(ModelConfigTest, DefaultEncoderMatchesTableShapes) {
  const MvcbmConfig c;
  const auto enc = encoder_specs(c);
  ASSERT_EQ(enc.size(), 13u);
  EXPECT_EQ(enc[0], LayerSpec::linear(500, 256));
  EXPECT_EQ(enc[1], LayerSpec::relu(256));
  EXPECT_EQ(enc[2], LayerSpec::dropout(256, 0.05));
  EXPECT_EQ(enc[3], LayerSpec::batch_norm(256));
  EXPECT_EQ(enc[12], LayerSpec::linear(256, 128));
  const auto head = concept_branch_specs(c).head;
  EXPECT_EQ(head.front(), LayerSpec::linear(128, 256));
  EXPECT_EQ(head.back(), LayerSpec::sigmoid(30));
  EXPECT_EQ(target_specs(30, 100).front(), LayerSpec::linear(30, 100));
  EXPECT_TRUE(fusion_specs(c).empty());
  MvcbmConfig l = c;
  l.fusion = FusionMode::kLstm;
  EXPECT_EQ(fusion_specs(l).front(), LayerSpec::lstm(128, 128));
  const auto adv = adversary_specs(c, 25);
  EXPECT_EQ(adv.front(), LayerSpec::linear(25, 256));
  EXPECT_EQ(adv.back(), LayerSpec::sigmoid(30));
}

TEST(ModelConfigTest, JsonRoundTripAndValidation) {
  MvcbmConfig c = small_config(FusionMode::kLstm);
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<MvcbmConfig>(), c);
  c.concept_count = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_THROW(fusion_from_string("max"), InvalidArgument);
  for (auto f : {Family::kMlp, Family::kMvbm, Family::kCbmSeq, Family::kCbmJoint, Family::kMvcbmSeq,
                 Family::kMvcbmJoint, Family::kSsmvcbm}) {
    EXPECT_EQ(family_from_string(to_string(f)), f);
  }
  EXPECT_TRUE(is_single_view(Family::kMlp));
  EXPECT_FALSE(has_concepts(Family::kMvbm));
}

TEST(FusionTest, MeanOfIdenticalViewsEqualsTheView) {
  Tape<float> tape;
  Matrix<float> one = random_matrix<float>(1, 4, 3);
  Matrix<float> rows = one.replicate(3, 1);
  const auto segs = num::Segments::from_lengths({3});
  const auto out = fuse(tape, tape.constant(rows), segs, FusionMode::kMean, ParamTree<float>{}, {});
  EXPECT_TRUE(bit_equal(out.value(), one));
}

TEST(FusionTest, ZeroLengthIsRejected) {
  EXPECT_THROW(num::Segments::from_lengths({2, 0}), InvalidArgument);
  ViewBatch b;
  b.view_dim = 2;
  b.values = Matrix<float>::Zero(1, 4);
  b.lengths = {0};
  EXPECT_THROW(b.pack(), ShapeError);
}

TEST(MvcbmForwardTest, MeanFusionIsPermutationInvariant) {
  auto m = init_mvcbm(small_config(), Rng(1));
  const auto batch = random_views({3, 2, 1}, 6, 2);
  warm_up(m, batch);
  const auto base = mvcbm_forward(m, batch);
  for (const auto& order : std::vector<std::vector<int>>{{1, 0, 2}, {2, 1, 0}, {1, 2, 0}}) {
    const auto out = mvcbm_forward(m, permute_sample(batch, 0, order));
    EXPECT_TRUE(bit_equal(out.c_hat, base.c_hat));
    EXPECT_TRUE(bit_equal(out.y_hat, base.y_hat));
  }
}

TEST(MvcbmForwardTest, PaddingIsIgnored) {
  auto m = init_mvcbm(small_config(), Rng(4));
  ViewBatch b;
  b.view_dim = 6;
  b.values = random_matrix<float>(2, 12, 5);
  b.lengths = {2, 1};
  b.values.row(1).tail(6).setZero();
  const auto base = mvcbm_forward(m, b);

  ViewBatch padded = b;
  padded.values.conservativeResize(2, 18);
  padded.values.rightCols(6).setZero();
  const auto out = mvcbm_forward(m, padded);
  EXPECT_TRUE(bit_equal(out.c_hat, base.c_hat));
  EXPECT_TRUE(bit_equal(out.y_hat, base.y_hat));

  // Garbage in a padded slot must not reach the output either.
  padded.values(1, 7) = 1e6f;
  EXPECT_TRUE(bit_equal(mvcbm_forward(m, padded).y_hat, base.y_hat));
}

TEST(MvcbmForwardTest, LstmFusionIsOrderSensitive) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = init_mvcbm(small_config(FusionMode::kLstm), Rng(seed));
    const auto specs = m.branch_specs();
    const auto batch = random_views({3}, 6, 100 + seed);
    auto fused = [&](const PackedViews& v) {
      Tape<float> tape;
      auto h = num::forward_layers(tape, m.phi.psi, specs.encoder, tape.constant(v.rows));
      return Matrix<float>(fuse(tape, h, v.segments, specs.fusion_mode, m.phi.xi, specs.fusion).value());
    };
    const Matrix<float> a = fused(batch);
    const Matrix<float> b = fused(permute_sample(batch, 0, {2, 1, 0}));
    EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 0.0f) << "seed " << seed;
  }
}

TEST(MvcbmForwardTest, OutputsLieInOpenUnitInterval) {
  for (auto fusion : {FusionMode::kMean, FusionMode::kLstm}) {
    auto m = init_mvcbm(small_config(fusion), Rng(7));
    const auto out = mvcbm_forward(m, random_views({1, 2, 3, 2}, 6, 8));
    EXPECT_EQ(out.c_hat.rows(), 4);
    EXPECT_EQ(out.c_hat.cols(), 3);
    EXPECT_EQ(out.y_hat.cols(), 1);
    EXPECT_GT(out.c_hat.minCoeff(), 0.0f);
    EXPECT_LT(out.c_hat.maxCoeff(), 1.0f);
    EXPECT_GT(out.y_hat.minCoeff(), 0.0f);
    EXPECT_LT(out.y_hat.maxCoeff(), 1.0f);
  }
}

TEST(MvcbmForwardTest, SingleViewEqualsPlainEncoderAndHeads) {
  auto m = init_mvcbm(small_config(), Rng(9));
  const auto batch = random_views({1, 1, 1, 1}, 6, 10);
  warm_up(m, batch);
  const auto out = mvcbm_forward(m, batch);
  const auto specs = m.branch_specs();
  const Matrix<float> h = num::apply_layers(m.phi.psi, specs.encoder, batch.rows);
  const Matrix<float> c = num::apply_layers(m.phi.zeta, specs.head, h);
  const Matrix<float> y = num::apply_layers(m.theta, m.theta_specs(), c);
  EXPECT_LT((out.c_hat - c).cwiseAbs().maxCoeff(), 1e-6f);
  EXPECT_LT((out.y_hat - y).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(MvcbmForwardTest, TargetDependsOnlyOnConcepts) {
  auto m = init_mvcbm(small_config(), Rng(11));
  const auto out = mvcbm_forward(m, random_views({2, 3}, 6, 12));
  const AnyModel any = m;
  EXPECT_TRUE(bit_equal(target_from_concepts(any, out.c_hat, Matrix<float>(2, 0)), out.y_hat));
}

TEST(MvcbmForwardTest, EvalModeIsPureAndTrainModeUsesDropout) {
  auto m = init_mvcbm(small_config(), Rng(13));
  const auto batch = random_views({2, 2, 3, 1}, 6, 14);
  EXPECT_TRUE(bit_equal(mvcbm_forward(m, batch).y_hat, mvcbm_forward(m, batch).y_hat));
  const auto a = mvcbm_forward(m, batch, Mode::kTrain, 1);
  const auto b = mvcbm_forward(m, batch, Mode::kTrain, 2);
  EXPECT_FALSE(bit_equal(a.c_hat, b.c_hat));
}

TEST(MvcbmForwardTest, ShapeMismatchThrows) {
  auto m = init_mvcbm(small_config(), Rng(15));
  EXPECT_THROW(mvcbm_forward(m, random_views({1}, 5, 1)), ShapeError);
  const AnyModel any = m;
  EXPECT_THROW(target_from_concepts(any, Matrix<float>::Zero(2, 4), Matrix<float>(2, 0)), ShapeError);
}

TEST(SsmvcbmForwardTest, RepresentationRangeAndShapes) {
  const auto m = init_ssmvcbm(small_config(), 4, Rng(16));
  const auto out = ssmvcbm_forward(m, random_views({1, 3, 2}, 6, 17));
  EXPECT_EQ(out.z_hat.rows(), 3);
  EXPECT_EQ(out.z_hat.cols(), 4);
  EXPECT_GT(out.z_hat.minCoeff(), -1.0f);
  EXPECT_LT(out.z_hat.maxCoeff(), 1.0f);
  EXPECT_EQ(m.theta[0].value.cols(), 3 + 4);
  const AnyModel any = m;
  EXPECT_TRUE(bit_equal(target_from_concepts(any, out.c_hat, out.z_hat), out.y_hat));
}

TEST(SsmvcbmForwardTest, ZeroRepresentationReducesToMvcbm) {
  const auto mv = init_mvcbm(small_config(), Rng(18));
  auto ss = init_ssmvcbm(small_config(), 0, Rng(19));
  ss.phi_c = mv.phi;
  ss.theta = mv.theta;
  const auto batch = random_views({2, 1, 3}, 6, 20);
  const auto a = mvcbm_forward(mv, batch);
  const auto b = ssmvcbm_forward(ss, batch);
  EXPECT_TRUE(bit_equal(a.c_hat, b.c_hat));
  EXPECT_TRUE(bit_equal(a.y_hat, b.y_hat));
  EXPECT_EQ(b.z_hat.cols(), 0);
}

TEST(SsmvcbmForwardTest, BranchesAreIndependent) {
  auto m = init_ssmvcbm(small_config(), 3, Rng(21));
  const auto batch = random_views({2, 2}, 6, 22);
  const auto base = ssmvcbm_forward(m, batch);
  m.phi_c.zeta[0].value.array() += 0.5f;
  const auto out = ssmvcbm_forward(m, batch);
  EXPECT_TRUE(bit_equal(out.z_hat, base.z_hat));
  EXPECT_FALSE(bit_equal(out.c_hat, base.c_hat));
}

TEST(AdversaryTest, RangeAndZeroInput) {
  const auto m = init_ssmvcbm(small_config(), 4, Rng(23));
  const auto specs = m.tau_specs();
  const Matrix<float> a = adversary_forward(m.tau, specs, random_matrix<float>(5, 4, 24));
  EXPECT_GT(a.minCoeff(), 0.0f);
  EXPECT_LT(a.maxCoeff(), 1.0f);

  // With z = 0 only the bias path contributes.
  Matrix<float> h = m.tau.at("layer0.bias").value.cwiseMax(0.0f);
  h = (h * m.tau.at("layer2.weight").value.transpose() + m.tau.at("layer2.bias").value).cwiseMax(0.0f);
  h = h * m.tau.at("layer4.weight").value.transpose() + m.tau.at("layer4.bias").value;
  const Matrix<float> expect = (1.0f / (1.0f + (-h.array()).exp())).matrix();
  const Matrix<float> got = adversary_forward(m.tau, specs, Matrix<float>::Zero(2, 4));
  EXPECT_TRUE(bit_equal(got.row(0), got.row(1)));
  EXPECT_LT((got.row(0) - expect).cwiseAbs().maxCoeff(), 1e-6f);
  EXPECT_THROW(adversary_forward(m.tau, specs, Matrix<float>::Zero(2, 3)), ShapeError);
}

TEST(AdversaryTest, GradientMatchesFiniteDifferences) {
  const auto cfg = small_config();
  const auto specs = adversary_specs(cfg, 4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto tau = num::build_mlp<double>(specs, rng);
    const Matrix<double> z = random_matrix<double>(6, 4, 30 + seed).array().tanh().matrix();
    const Matrix<double> c = (random_matrix<double>(6, 3, 40 + seed).array().tanh() * 0.45 + 0.5).matrix();
    const Matrix<double> w = Matrix<double>::Constant(6, 3, 1.0 / 18.0);
    // Small step: with 256 hidden ReLUs some pre-activation usually sits
    // within 1e-3 of the kink.
    const double err = num::finite_diff_check(
        tau,
        [&](Tape<double>& t, const ParamTree<double>& ps) {
          return num::weighted_bce(num::forward_layers(t, ps, std::span<const LayerSpec>(specs), t.constant(z)), c, w);
        },
        1e-5);
    EXPECT_LT(err, 1e-4) << "seed " << seed;
  }
}

TEST(BranchGradientTest, FullBranchMatchesFiniteDifferences) {
  for (auto fusion : {FusionMode::kMean, FusionMode::kLstm}) {
    MvcbmConfig cfg = small_config(fusion);
    cfg.encoder_widths = {5, 4};
    cfg.concept_head_widths = {4};
    const auto specs = concept_branch_specs(cfg);
    const auto br = init_branch<double>(specs, Rng(50));
    const auto views = random_views({2, 3, 1, 2}, 6, 51);
    const Matrix<double> rows = views.rows.cast<double>();
    const Matrix<double> c = testutil::random_bits<double>(4, 3, 52);
    const Matrix<double> w = Matrix<double>::Constant(4, 3, 1.0 / 12.0);
    for (int which = 0; which < 3; ++which) {
      const ParamTree<double>& target = which == 0 ? br.psi : which == 1 ? br.xi : br.zeta;
      if (target.empty()) continue;
      const auto report = num::finite_diff_report(
          target,
          [&](Tape<double>& t, const ParamTree<double>& ps) {
            auto out = branch_forward(t, which == 0 ? ps : br.psi, which == 1 ? ps : br.xi, which == 2 ? ps : br.zeta,
                                      specs, t.constant(rows), views.segments);
            return num::weighted_bce(out, c, w);
          },
          1e-3, 400, 7, Mode::kEval);
      EXPECT_LT(report.max_rel_error, 1e-4) << to_string(fusion) << " group " << which << " " << report.worst_leaf;
    }
  }
}

TEST(ModelIoTest, RoundTripIsBitExact) {
  const auto dir = std::filesystem::temp_directory_path() / "mvcbm_model_io";
  std::filesystem::create_directories(dir);
  const auto batch = random_views({2, 3, 1}, 6, 60);

  auto mv = init_mvcbm(small_config(FusionMode::kLstm), Rng(61));
  warm_up(mv, batch);
  mv.meta.family = Family::kMvcbmJoint;
  mv.meta.concept_columns = {4, 0, 2};
  save_model(dir / "mv.ckpt", mv);
  const auto loaded = load_model(dir / "mv.ckpt");
  ASSERT_TRUE(std::holds_alternative<MvcbmModel>(loaded));
  EXPECT_TRUE(bit_equal(forward(loaded, batch).y_hat, mvcbm_forward(mv, batch).y_hat));
  EXPECT_EQ(meta_of(loaded).concept_columns, mv.meta.concept_columns);
  EXPECT_EQ(meta_of(loaded).family, Family::kMvcbmJoint);
  EXPECT_EQ(config_digest(loaded), config_digest(mv));

  const auto ss = init_ssmvcbm(small_config(), 4, Rng(62));
  save_model(dir / "ss.ckpt", ss);
  const auto ls = load_model(dir / "ss.ckpt");
  ASSERT_TRUE(std::holds_alternative<SsmvcbmModel>(ls));
  const auto a = forward(ls, batch);
  const auto b = ssmvcbm_forward(ss, batch);
  EXPECT_TRUE(bit_equal(a.y_hat, b.y_hat));
  EXPECT_TRUE(bit_equal(a.z_hat, b.z_hat));
  EXPECT_TRUE(std::get<SsmvcbmModel>(ls).tau.bit_equal(ss.tau));
  EXPECT_NE(config_digest(ls), config_digest(mv));
  std::filesystem::remove_all(dir);
}

TEST(ModelIoTest, ManifestMismatchIsAnError) {
  const auto mv = init_mvcbm(small_config(FusionMode::kMean), Rng(63));
  const auto ckpt = to_checkpoint(mv);
  EXPECT_NO_THROW(from_checkpoint(ckpt, {3, FusionMode::kMean, 6}));
  EXPECT_THROW(from_checkpoint(ckpt, {4, std::nullopt, std::nullopt}), FormatError);
  EXPECT_THROW(from_checkpoint(ckpt, {std::nullopt, FusionMode::kLstm, std::nullopt}), FormatError);

  // Manifest claims lstm fusion but the stored trees are for mean fusion.
  auto bad = ckpt;
  bad.metadata["model"]["fusion"] = "lstm";
  bad.metadata["model"]["config"]["fusion"] = "lstm";
  EXPECT_THROW(from_checkpoint(bad), FormatError);

  auto wrong_k = ckpt;
  wrong_k.metadata["model"]["K"] = 4;
  wrong_k.metadata["model"]["config"]["concept_count"] = 4;
  EXPECT_THROW(from_checkpoint(wrong_k), FormatError);

  auto version = ckpt;
  version.metadata["model"]["version"] = 99;
  EXPECT_THROW(from_checkpoint(version), FormatError);

  num::Checkpoint empty;
  EXPECT_THROW(from_checkpoint(empty), FormatError);
}

TEST(ViewPackingTest, DatasetPackingFollowsViewOrder) {
  MultiviewDataset ds(3, 2, 1);
  const std::vector<float> a{1, 2, 3, 4, 5, 6};
  const std::vector<float> b{7, 8};
  const std::vector<std::uint8_t> c0{0};
  const std::vector<std::uint8_t> c1{1};
  ds.add_sample(a, 3, c0, 1, Split::kTrain);
  ds.add_sample(b, 1, c1, 0, Split::kTest);
  const std::vector<std::size_t> rows{1, 0};
  const auto packed = pack(ds, rows);
  EXPECT_EQ(packed.segments.offsets, (std::vector<Eigen::Index>{0, 1, 4}));
  EXPECT_EQ(packed.rows(0, 0), 7.0f);
  EXPECT_EQ(packed.rows(3, 1), 6.0f);
  const auto batch = make_batch(ds, rows);
  EXPECT_EQ(batch.values.cols(), 6);
  EXPECT_EQ(batch.values(0, 2), 0.0f);
  EXPECT_TRUE(bit_equal(batch.pack().rows, packed.rows));
  EXPECT_EQ((*batch.labels)[0], 0.0f);
  EXPECT_EQ((*batch.concepts)(0, 0), 1.0f);
}

TEST(PredictTest, ChunkedPredictionMatchesSingleBatch) {
  MultiviewDataset ds(3, 6, 3);
  std::mt19937_64 gen(70);
  std::uniform_int_distribution<int> views(1, 3);
  for (int i = 0; i < 23; ++i) {
    const int v = views(gen);
    const Matrix<float> x = random_matrix<float>(1, 6 * v, 71 + i);
    const std::vector<std::uint8_t> c{1, 0, 1};
    ds.add_sample(std::span<const float>(x.data(), x.size()), v, c, i % 2, Split::kTrain);
  }
  const AnyModel m = init_ssmvcbm(small_config(), 2, Rng(72));
  const auto rows = all_rows(ds);
  const auto whole = predict(m, ds, rows, 1000);
  const auto chunked = predict(m, ds, rows, 5);
  EXPECT_LT((whole.y_hat - chunked.y_hat).cwiseAbs().maxCoeff(), 1e-6f);
  EXPECT_LT((whole.z_hat - chunked.z_hat).cwiseAbs().maxCoeff(), 1e-6f);
}
