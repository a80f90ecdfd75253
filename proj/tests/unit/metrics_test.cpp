#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "mvcbm/error.hpp"
#include "mvcbm/metrics/metrics.hpp"
#include "metric_oracles.hpp"
#include "test_util.hpp"

using namespace mvcbm;
using namespace mvcbm::metrics;
using testutil::enumerated_ap;
using testutil::pairwise_auroc;

namespace {

using Vec = std::vector<double>;

double enumerated_fpr(const Vec& s, const Vec& y, double level) {
  std::set<double> thresholds(s.begin(), s.end());
  const double pos = std::count(y.begin(), y.end(), 1.0);
  const double neg = static_cast<double>(y.size()) - pos;
  double best = 1.0;
  for (double t : thresholds) {
    double tp = 0.0;
    double fp = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] == 1.0 ? tp : fp) += 1.0;
    }
    if (tp >= level * pos) best = std::min(best, fp / neg);
  }
  return best;
}

struct Instance {
  Vec scores;
  Vec labels;
};

// Integer-valued scores so ties are common.
Instance random_instance(std::mt19937_64& gen) {
  std::uniform_int_distribution<int> size(2, 12);
  std::uniform_int_distribution<int> value(0, 5);
  std::bernoulli_distribution coin(0.5);
  Instance in;
  const int n = size(gen);
  for (int i = 0; i < n; ++i) {
    in.scores.push_back(value(gen));
    in.labels.push_back(coin(gen) ? 1.0 : 0.0);
  }
  in.labels[0] = 1.0;
  in.labels[1] = 0.0;
  return in;
}

}  // namespace

TEST(AurocTest, Examples) {
  EXPECT_DOUBLE_EQ(auroc(Vec{0.1, 0.4, 0.35, 0.8}, Vec{0, 0, 1, 1}), 0.75);
  EXPECT_DOUBLE_EQ(auroc(Vec{0.1, 0.2, 0.7, 0.8}, Vec{0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(auroc(Vec{0.3, 0.3, 0.3, 0.3, 0.3}, Vec{0, 1, 0, 1, 1}), 0.5);
  EXPECT_THROW(auroc(Vec{0.1, 0.2}, Vec{1, 1}), InvalidArgument);
  EXPECT_THROW(auroc(Vec{0.1, 0.2}, Vec{1, 2}), InvalidArgument);
  EXPECT_THROW(auroc(Vec{0.1}, Vec{1, 0}), ShapeError);
}

TEST(AurocTest, MatchesPairwiseCounting) {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 1500; ++trial) {
    const auto in = random_instance(gen);
    ASSERT_EQ(auroc(in.scores, in.labels), pairwise_auroc(in.scores, in.labels)) << "trial " << trial;
  }
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 200; ++trial) {
    auto in = random_instance(gen);
    for (double& s : in.scores) s = normal(gen);
    ASSERT_NEAR(auroc(in.scores, in.labels), pairwise_auroc(in.scores, in.labels), 1e-12);
  }
}

TEST(AurocTest, InvariantUnderIncreasingTransforms) {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 300; ++trial) {
    const auto in = random_instance(gen);
    Vec t = in.scores;
    for (double& s : t) s = s * s * s + 2.0 * s - 7.0;
    ASSERT_EQ(auroc(in.scores, in.labels), auroc(t, in.labels));
  }
}

TEST(AuprTest, Examples) {
  EXPECT_NEAR(aupr(Vec{0.1, 0.4, 0.35, 0.8}, Vec{0, 0, 1, 1}), 0.5 + 0.5 * 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(aupr(Vec{0.1, 0.2, 0.7, 0.8}, Vec{0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(aupr(Vec{0.4, 0.4, 0.4, 0.4, 0.4}, Vec{0, 1, 0, 1, 1}), 0.6);
  EXPECT_THROW(aupr(Vec{0.1, 0.2}, Vec{0, 0}), InvalidArgument);
}

TEST(AuprTest, MatchesThresholdEnumeration) {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 1500; ++trial) {
    const auto in = random_instance(gen);
    ASSERT_NEAR(aupr(in.scores, in.labels), enumerated_ap(in.scores, in.labels), 1e-12) << "trial " << trial;
  }
}

TEST(BrierTest, Examples) {
  EXPECT_DOUBLE_EQ(brier(Vec{0.5, 0.5, 0.5}, Vec{0, 1, 1}), 0.25);
  EXPECT_DOUBLE_EQ(brier(Vec{0, 1, 1}, Vec{0, 1, 1}), 0.0);
  EXPECT_NEAR(brier(Vec{0.2, 0.9}, Vec{0, 1}), 0.025, 1e-15);
  EXPECT_THROW(brier(Vec{1.2}, Vec{1}), InvalidArgument);
  EXPECT_THROW(brier(Vec{-0.01}, Vec{0}), InvalidArgument);
}

TEST(BrierTest, ComplementSymmetry) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = random_instance(gen);
    Vec p;
    for (std::size_t i = 0; i < in.labels.size(); ++i) p.push_back(u(gen));
    Vec pc = p;
    Vec yc = in.labels;
    for (double& v : pc) v = 1.0 - v;
    for (double& v : yc) v = 1.0 - v;
    EXPECT_NEAR(brier(p, in.labels), brier(pc, yc), 1e-15);
  }
}

TEST(FprAtTprTest, Examples) {
  const Vec levels{0.25, 0.5, 0.9, 1.0};
  for (double f : fpr_at_tpr(Vec{0.1, 0.2, 0.7, 0.8}, Vec{0, 0, 1, 1}, levels)) EXPECT_EQ(f, 0.0);
  for (double f : fpr_at_tpr(Vec{0.5, 0.5, 0.5, 0.5}, Vec{0, 1, 0, 1}, levels)) EXPECT_EQ(f, 1.0);
  EXPECT_EQ(fpr_at_tpr(Vec{0.9, 0.8, 0.7, 0.6}, Vec{1, 0, 1, 0}, Vec{1.0}).front(), 0.5);
  EXPECT_EQ(fpr_at_tpr(Vec{0.9, 0.8, 0.7, 0.6}, Vec{1, 0, 1, 0}, Vec{0.5}).front(), 0.0);
  EXPECT_THROW(fpr_at_tpr(Vec{0.9, 0.8}, Vec{1, 0}, Vec{0.0}), InvalidArgument);
  EXPECT_THROW(fpr_at_tpr(Vec{0.9, 0.8}, Vec{1, 0}, Vec{1.5}), InvalidArgument);
}

TEST(FprAtTprTest, MatchesEnumerationAndIsMonotone) {
  std::mt19937_64 gen(5);
  const Vec levels{0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 1.0};
  for (int trial = 0; trial < 500; ++trial) {
    const auto in = random_instance(gen);
    const auto f = fpr_at_tpr(in.scores, in.labels, levels);
    for (std::size_t i = 0; i < levels.size(); ++i) {
      ASSERT_DOUBLE_EQ(f[i], enumerated_fpr(in.scores, in.labels, levels[i]));
      if (i > 0) ASSERT_LE(f[i - 1], f[i]);
    }
  }
}

TEST(CondCorrTest, SelfCorrelationIsOne) {
  Matrix<double> c(5, 1);
  c << 0.1, 0.5, 0.3, 0.9, 0.7;
  const auto r = median_abs_cond_corr(c, c, Vec(5, 1.0));
  EXPECT_NEAR(r.median, 1.0, 1e-12);
  EXPECT_EQ(r.pairs, 1u);
}

TEST(CondCorrTest, HandComputedPerClass) {
  Matrix<double> c(8, 1);
  Matrix<double> z(8, 1);
  c << 1, 2, 3, 4, 1, 2, 3, 4;
  z << 1, 3, 2, 4, 4, 3, 2, 1;
  // class 0: cov 4 / var 5 = 0.8; class 1: perfectly anti-correlated.
  const auto r = median_abs_cond_corr(c, z, Vec{0, 0, 0, 0, 1, 1, 1, 1});
  EXPECT_NEAR(r.median, 0.9, 1e-12);
  EXPECT_EQ(r.pairs, 2u);
}

TEST(CondCorrTest, IndependentColumnsAreNearZero) {
  const auto c = testutil::random_matrix<double>(10000, 3, 7);
  const auto z = testutil::random_matrix<double>(10000, 4, 8);
  Vec y(10000);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<double>(i % 2);
  const auto r = median_abs_cond_corr(c, z, y);
  EXPECT_LT(r.median, 0.05);
  EXPECT_EQ(r.pairs, 24u);
}

TEST(CondCorrTest, ZeroVarianceIsExcludedAndSmallClassesRejected) {
  Matrix<double> c(6, 2);
  c << 1, 5, 2, 5, 3, 5, 1, 5, 3, 5, 2, 5;
  Matrix<double> z(6, 1);
  z << 1, 2, 3, 1, 2, 3;
  const auto r = median_abs_cond_corr(c, z, Vec{0, 0, 0, 1, 1, 1});
  EXPECT_EQ(r.excluded, 2u);
  EXPECT_EQ(r.pairs, 2u);
  EXPECT_NEAR(r.median, 0.75, 1e-12);  // |1| and |0.5|
  EXPECT_THROW(median_abs_cond_corr(c, z, Vec{0, 0, 1, 1, 1, 1}), InvalidArgument);
}

TEST(EvaluateTest, ReportCoversTargetAndConcepts) {
  const auto ds = testutil::tiny_dataset(30).only(Split::kTest);
  model::MvcbmModel m = model::init_mvcbm(testutil::tiny_config(), Rng(1));
  m.meta.family = model::Family::kMvcbmSeq;
  const Vec levels{0.8, 0.9};
  const auto r = evaluate(model::AnyModel{m}, ds, levels);
  EXPECT_EQ(r.samples, ds.size());
  ASSERT_EQ(r.concepts.size(), 3u);
  ASSERT_EQ(r.fpr_at_tpr.size(), 2u);
  const auto out = model::predict(model::AnyModel{m}, ds, model::all_rows(ds));
  EXPECT_EQ(r.target.auroc, auroc(to_vector(out.y_hat), ds.label_vector()));
  EXPECT_EQ(r.concepts[2].brier, brier(to_vector(out.c_hat.col(2)), ds.concept_column(2)));
  const auto recs = r.records();
  EXPECT_EQ(recs.size(), 3u + 9u + 1u + 2u);
  for (const auto& rec : recs) {
    EXPECT_EQ(rec["family"], "mvcbm-seq");
    EXPECT_GE(rec["value"].get<double>(), 0.0);
    EXPECT_LE(rec["value"].get<double>(), 1.0);
  }

  m.meta.family = model::Family::kMvbm;
  EXPECT_TRUE(evaluate(model::AnyModel{m}, ds).concepts.empty());
}
