#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include <busu/busu.hpp>

#include "oracles.hpp"

using namespace busu;

namespace {

struct Instance {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Scores quantized to a coarse grid so ties are common.
Instance random_instance(Rng& rng, std::size_t n, int levels = 0) {
  Instance in;
  for (std::size_t i = 0; i < n; ++i) {
    double s = rng.uniform();
    if (levels > 0) s = std::floor(s * levels) / levels;
    in.scores.push_back(s);
    in.labels.push_back(rng.uniform() < 0.3 ? 1 : 0);
  }
  in.labels[0] = 1;
  in.labels[1] = 0;
  return in;
}

double auc_of(const std::vector<double>& s, const std::vector<int>& t) {
  return roc_auc<double, int>(s, t).auc;
}

MetricsReport table_row(double acc, double sens, double spec, double auc, double f1) {
  MetricsReport r;
  r.accuracy = acc, r.sensitivity = sens, r.specificity = spec, r.auc = auc, r.f1 = f1;
  return r;
}

}  // namespace

TEST(Confusion, PerfectAndInverted) {
  const std::vector<double> truth{1, 0, 0, 1, 1, 0};
  std::vector<double> inv;
  for (double t : truth) inv.push_back(1 - t);
  auto p = confusion<double, double>(truth, truth);
  EXPECT_EQ(p.fp + p.fn, 0u);
  auto q = confusion<double, double>(inv, truth);
  EXPECT_EQ(q.tp + q.tn, 0u);
}

TEST(Confusion, MatchesBruteForce) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    auto in = random_instance(rng, 1000);
    const double thr = rng.uniform(0.05, 0.95);
    auto c = confusion<double, int>(in.scores, in.labels, thr);
    auto o = oracle::count(in.scores, in.labels, thr);
    EXPECT_EQ(c.tp, o.tp);
    EXPECT_EQ(c.tn, o.tn);
    EXPECT_EQ(c.fp, o.fp);
    EXPECT_EQ(c.fn, o.fn);
    EXPECT_EQ(c.total(), 1000u);
  }
}

TEST(Confusion, ThresholdTieIsPositiveAndFovExcludes) {
  const std::vector<double> s{0.5, 0.49, 0.7, 0.1};
  const std::vector<int> t{1, 1, 0, 0}, fov{1, 1, 0, 1};
  auto c = confusion<double, int>(s, t, 0.5, fov);
  EXPECT_EQ(c, (ConfusionCounts{1, 1, 0, 1}));
  EXPECT_THROW((confusion<double, int>(s, std::vector<int>{1, 0})), ShapeError);
  EXPECT_THROW((confusion<double, int>(s, t, 1.0)), ParameterError);
  EXPECT_THROW(confusion(Tensor<double>({2, 2}), Tensor<double>({4})), ShapeError);
}

TEST(Derive, HandExample) {
  auto r = derive_metrics({8, 80, 2, 10});
  EXPECT_EQ(format_number(r.accuracy), "0.8800");
  EXPECT_EQ(format_number(r.sensitivity), "0.4444");
  EXPECT_EQ(format_number(r.specificity), "0.9756");
  EXPECT_EQ(format_number(r.precision), "0.8000");
  EXPECT_EQ(format_number(r.f1), "0.5714");
  // direct arithmetic
  EXPECT_DOUBLE_EQ(r.accuracy, 88.0 / 100.0);
  EXPECT_DOUBLE_EQ(r.sensitivity, 8.0 / 18.0);
  EXPECT_DOUBLE_EQ(r.specificity, 80.0 / 82.0);
  EXPECT_DOUBLE_EQ(r.f1, 2 * 0.8 * (8.0 / 18.0) / (0.8 + 8.0 / 18.0));
  EXPECT_EQ(r.sensitivity, r.recall);
}

TEST(Derive, PerfectAndDegenerate) {
  auto p = derive_metrics({5, 7, 0, 0});
  for (double v : {p.accuracy, p.sensitivity, p.specificity, p.precision, p.f1}) EXPECT_EQ(v, 1.0);
  auto d = derive_metrics({0, 9, 0, 3});
  EXPECT_EQ(d.precision, 0.0);
  EXPECT_TRUE(d.is_degenerate("precision"));
  EXPECT_EQ(d.specificity, 1.0);
  EXPECT_FALSE(d.is_degenerate("specificity"));
  EXPECT_THROW(derive_metrics({0, 0, 0, 0}), UsageError);
}

TEST(Derive, ConfusionPipelineMatchesSinglePass) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto in = random_instance(rng, 500);
    auto r = derive_metrics(confusion<double, int>(in.scores, in.labels));
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < in.scores.size(); ++i) {
      const bool p = in.scores[i] >= 0.5;
      tp += p && in.labels[i];
      fp += p && !in.labels[i];
      fn += !p && in.labels[i];
      tn += !p && !in.labels[i];
    }
    EXPECT_DOUBLE_EQ(r.accuracy, (tp + tn) / (tp + tn + fp + fn));
    EXPECT_DOUBLE_EQ(r.sensitivity, tp / (tp + fn));
    EXPECT_DOUBLE_EQ(r.specificity, tn / (tn + fp));
    for (double v : {r.accuracy, r.sensitivity, r.specificity, r.precision, r.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    if (r.precision + r.recall > 0) EXPECT_NEAR(r.f1, 2 * r.precision * r.recall / (r.precision + r.recall), 1e-15);
  }
}

TEST(Roc, SmallExamples) {
  EXPECT_NEAR(auc_of({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}), 0.75, 1e-15);
  EXPECT_NEAR(oracle::mann_whitney({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}), 0.75, 1e-15);
  EXPECT_EQ(auc_of({1, 0, 1, 0}, {1, 0, 1, 0}), 1.0);
  EXPECT_EQ(auc_of({0.3, 0.3, 0.3, 0.3}, {1, 0, 0, 1}), 0.5);
  EXPECT_THROW(auc_of({0.1, 0.2}, {1, 1}), UsageError);
}

TEST(Roc, CurveEndpoints) {
  auto r = roc_auc<double, int>(std::vector<double>{0.2, 0.9, 0.4}, std::vector<int>{0, 1, 1});
  EXPECT_EQ(r.points.front().x, 0.0);
  EXPECT_EQ(r.points.front().y, 0.0);
  EXPECT_EQ(r.points.back().x, 1.0);
  EXPECT_EQ(r.points.back().y, 1.0);
}

TEST(Roc, TrapezoidEqualsMannWhitneyWithTies) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto in = random_instance(rng, 2 + rng.below(499), trial % 2 ? 10 : 0);
    EXPECT_NEAR(auc_of(in.scores, in.labels), oracle::mann_whitney(in.scores, in.labels), 1e-9);
  }
}

TEST(Roc, InvariantUnderMonotoneTransforms) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto in = random_instance(rng, 300);
    const double base = auc_of(in.scores, in.labels);
    std::vector<double> cube, squash, flip;
    for (double s : in.scores) {
      cube.push_back(s * s * s);
      squash.push_back(oracle::sigmoid(5 * s));
      flip.push_back(1 - s);
    }
    EXPECT_NEAR(auc_of(cube, in.labels), base, 1e-12);
    EXPECT_NEAR(auc_of(squash, in.labels), base, 1e-12);
    EXPECT_NEAR(auc_of(flip, in.labels), 1 - base, 1e-12);
  }
}

TEST(Roc, FlipSwapsSensitivityAndSpecificity) {
  Rng rng(5);
  auto in = random_instance(rng, 400);
  for (auto& s : in.scores)
    if (s == 0.5) s = 0.51;
  std::vector<double> flip;
  std::vector<int> inv;
  for (std::size_t i = 0; i < in.scores.size(); ++i) flip.push_back(1 - in.scores[i]), inv.push_back(1 - in.labels[i]);
  auto a = derive_metrics(confusion<double, int>(in.scores, in.labels));
  auto b = derive_metrics(confusion<double, int>(flip, inv));
  EXPECT_DOUBLE_EQ(a.sensitivity, b.specificity);
  EXPECT_DOUBLE_EQ(a.specificity, b.sensitivity);
}

TEST(PrCurve, MatchesThresholdSweep) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto in = random_instance(rng, 60, trial % 2 ? 8 : 0);
    if (trial == 0) in = {{0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}};
    auto pts = pr_curve<double, int>(in.scores, in.labels);
    std::vector<double> thr = in.scores;
    std::sort(thr.begin(), thr.end());
    thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
    ASSERT_EQ(pts.size(), thr.size());
    double prev_recall = 2;
    for (std::size_t k = 0; k < thr.size(); ++k) {
      const auto o = oracle::count(in.scores, in.labels, thr[k]);
      EXPECT_EQ(pts[k].threshold, thr[k]);
      EXPECT_DOUBLE_EQ(pts[k].x, double(o.tp) / double(o.tp + o.fn));
      EXPECT_DOUBLE_EQ(pts[k].y, double(o.tp) / double(o.tp + o.fp));
      EXPECT_LE(pts[k].x, prev_recall);
      prev_recall = pts[k].x;
    }
  }
}

TEST(PrCurve, PerfectAndAllPositive) {
  auto perfect = pr_curve<double, int>(std::vector<double>{0.9, 0.1, 0.8}, std::vector<int>{1, 0, 1});
  bool hit = false;
  for (const auto& p : perfect) hit |= p.x == 1.0 && p.y == 1.0;
  EXPECT_TRUE(hit);
  auto allpos = pr_curve<double, int>(std::vector<double>{0.3, 0.6, 0.9}, std::vector<int>{1, 1, 1});
  for (const auto& p : allpos) EXPECT_EQ(p.y, 1.0);
  EXPECT_THROW((pr_curve<double, int>(std::vector<double>{0.3}, std::vector<int>{0})), UsageError);
}

TEST(Report, TableRows) {
  EXPECT_EQ(format_report("BUSU-Net", table_row(0.9560, 0.8113, 0.9771, 0.9799, 0.8243)),
            "BUSU-Net         0.9560 0.8113 0.9771 0.9799 0.8243");
  EXPECT_EQ(format_report("LightBUSU-Net", table_row(0.9539, 0.8281, 0.9723, 0.9781, 0.8207)),
            "LightBUSU-Net    0.9539 0.8281 0.9723 0.9781 0.8207");
  EXPECT_EQ(format_report("x", table_row(1, 1, 1, 1, 1)), "x                1.0000 1.0000 1.0000 1.0000 1.0000");
  EXPECT_EQ(format_report_header(), "Method           Acc    Sens   Spec   AUC    F1    ");
}

TEST(Report, CsvExports) {
  auto r = evaluate_scores<double, int>(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1});
  std::ostringstream roc, pr, rep;
  write_roc_csv(roc, r.roc_points);
  write_pr_csv(pr, r.pr_points);
  write_report_csv(rep, "m", r);
  EXPECT_EQ(roc.str(), "threshold,fpr,tpr\ninf,0,0\n0.8,0,0.5\n0.4,0.5,0.5\n0.35,0.5,1\n0.1,1,1\n");
  EXPECT_EQ(pr.str().substr(0, 27), "threshold,recall,precision\n");
  EXPECT_NE(rep.str().find("m,0.750000,0.500000,1.000000,1.000000,0.500000,0.666667,0.750000,1,2,0,1"),
            std::string::npos);
}

TEST(Report, FovMaskingInEvaluateScores) {
  const std::vector<double> s{0.9, 0.1, 0.9, 0.2};
  const std::vector<int> t{1, 0, 0, 1}, fov{1, 1, 0, 0};
  auto r = evaluate_scores<double, int>(s, t, 0.5, fov);
  EXPECT_EQ(r.counts.total(), 2u);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.auc, 1.0);
}
