// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "cleandift/analysis.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cleandift;

TEST(Matcher, AgreesWithExhaustiveSearch) {
  for (std::uint64_t i = 0; i < 200; ++i) {
    auto inst = oracles::random_match_instance(i);
    const auto [y, x] = oracles::best_cell(inst.query, inst.maps, 1);
    const int S = 4 * inst.maps.w(), H = 4 * inst.maps.h();
    auto p = match_keypoint(inst.query, inst.maps, 1, S, H);
    EXPECT_EQ(p.x, (x + 0.5) * 4) << i;
    EXPECT_EQ(p.y, (y + 0.5) * 4) << i;
  }
}

TEST(Matcher, TiesGoToLowestIndex) {
  Tensor<float> m(Shape{1, 2, 2, 2});
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      m.at(0, 0, y, x) = 1;
      m.at(0, 1, y, x) = 0;
    }
  auto p = match_keypoint({2.0f, 0.0f}, m, 0, 2, 2);
  EXPECT_EQ(p.x, 0.5);
  EXPECT_EQ(p.y, 0.5);
  EXPECT_THROW(match_keypoint({1.0f}, m, 0, 2, 2), ShapeError);
}

TEST(Pck, ThresholdIsInclusiveAndMatchesOracle) {
  CorrespondenceAnnotation a;
  a.width = a.height = 32;
  a.target_bbox = {4, 4, 10, 20};
  a.keypoints = {{"a", 0, 0, 10, 10}, {"b", 0, 0, 20, 20}, {"c", 0, 0, 5, 5}};
  // Distances 4 (= img threshold), 2.5 (= bbox threshold), 5.
  std::vector<Point2> pred{{14, 10}, {20, 22.5}, {8, 9}};
  auto r = compute_pck(pred, a, 0.125);
  EXPECT_EQ(r.count_img(), 2);
  EXPECT_EQ(r.count_bbox(), 1);
  EXPECT_FALSE(r.hits_bbox[0]);
  EXPECT_TRUE(r.hits_img[0]);
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    CorrespondenceAnnotation b = a;
    b.target_bbox = {0, 0, rng.uniform(1, 30), rng.uniform(1, 30)};
    b.keypoints.clear();
    std::vector<Point2> q;
    const int n = int(rng.uniform_int(1, 20));
    for (int k = 0; k < n; ++k) {
      b.keypoints.push_back({"k", 0, 0, rng.uniform(0, 32), rng.uniform(0, 32)});
      q.push_back({rng.uniform(0, 32), rng.uniform(0, 32)});
    }
    auto s = compute_pck(q, b, 0.15);
    EXPECT_DOUBLE_EQ(s.pck(PCKMode::img), oracles::pck(q, b, 0.15, false));
    EXPECT_DOUBLE_EQ(s.pck(PCKMode::bbox), oracles::pck(q, b, 0.15, true));
  }
  EXPECT_THROW(compute_pck({}, CorrespondenceAnnotation{}), std::invalid_argument);
}

TEST(Pck, AggregationCountsPoints) {
  PCKAggregate agg;
  PCKResult r1;
  r1.hits_img = {true, false, true};
  r1.hits_bbox = {false, false, true};
  PCKResult r2;
  r2.hits_img = {true};
  r2.hits_bbox = {true};
  agg.add(r1, 1);
  agg.add(r2, 2);
  EXPECT_DOUBLE_EQ(agg.all.pck_img(), 0.75);
  EXPECT_DOUBLE_EQ(agg.all.pck_bbox(), 0.5);
  EXPECT_DOUBLE_EQ(agg.per_category[1].pck_img(), 2.0 / 3);
  EXPECT_EQ(agg.per_category[2].total, 1);
}

TEST(Pck, PerfectFeaturesFindEveryKeypoint) {
  // Positional one-hot maps make source and target cells identical for an
  // identity transform.
  auto d = generate_split("pairs", 4, 3);
  const int S = d.canvas;
  Tensor<float> maps(Shape{d.size(), S * S, S, S});
  for (int n = 0; n < d.size(); ++n)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) maps.at(n, y * S + x, y, x) = 1;
  for (auto& a : d.pairs)
    for (auto& k : a.keypoints) {
      k.tx = k.sx;
      k.ty = k.sy;
    }
  auto agg = evaluate_pairs(d, maps, 0.1);
  EXPECT_EQ(agg.all.pck_img(), 1.0);
}

TEST(Knn, AgreesWithSortedOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(seed);
    const int N = int(r.uniform_int(10, 40)), C = int(r.uniform_int(2, 6)), k = int(r.uniform_int(1, 11));
    RowMatrixF X(N, C);
    std::vector<int> labels;
    for (int i = 0; i < N; ++i) {
      for (int c = 0; c < C; ++c) X(i, c) = float(r.uniform_int(-2, 3));
      labels.push_back(int(r.uniform_int(0, 4)));
    }
    std::vector<float> q(static_cast<std::size_t>(C));
    for (auto& v : q) v = float(r.uniform_int(-2, 3));
    EXPECT_EQ(knn_classify(X, labels, q, k), oracles::knn(X, labels, q, k)) << seed;
  }
  RowMatrixF X(2, 1);
  X << 1, 1;
  EXPECT_THROW(knn_classify(X, {0, 1}, {1.0f}, 3), std::invalid_argument);
}

TEST(Knn, AccuracyOnSeparableClusters) {
  RowMatrixF X(20, 2), Q(4, 2);
  std::vector<int> l, ql;
  for (int i = 0; i < 20; ++i) {
    X(i, 0) = i % 2 ? 1.0f : 0.0f;
    X(i, 1) = i % 2 ? 0.0f : 1.0f;
    l.push_back(i % 2);
  }
  Q << 1, 0.1f, 0.1f, 1, 2, 0, 0, 3;
  EXPECT_DOUBLE_EQ(knn_accuracy(X, l, Q, {1, 0, 1, 0}, 5), 1.0);
}

TEST(Miou, AgreesWithSetOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(seed);
    const int n = int(r.uniform_int(5, 200));
    std::vector<int> p, t;
    for (int i = 0; i < n; ++i) {
      p.push_back(int(r.uniform_int(0, kNumClasses)));
      t.push_back(int(r.uniform_int(0, seed % 2 ? 3 : kNumClasses)));
    }
    EXPECT_NEAR(segmentation_miou(p, t, kNumClasses).miou, oracles::miou(p, t, kNumClasses), 1e-12);
  }
  auto res = segmentation_miou({0, 1}, {0, 0}, 3);
  EXPECT_TRUE(std::isnan(res.iou[2]));
  EXPECT_DOUBLE_EQ(res.miou, 0.5);
  EXPECT_THROW(segmentation_miou({0}, {7}, 3), std::out_of_range);
}

TEST(Rmse, AgreesWithOracleOnMaskedSets) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(seed);
    std::vector<double> p, t;
    std::vector<bool> v;
    for (int i = 0; i < 50; ++i) {
      p.push_back(r.uniform(1, 10));
      t.push_back(r.uniform(1, 10));
      v.push_back(i == 0 || r.uniform() < 0.6);
    }
    EXPECT_NEAR(depth_rmse(p, t, v), oracles::rmse(p, t, v), 1e-12);
  }
  EXPECT_THROW(depth_rmse({1.0}, {1.0}, {false}), std::invalid_argument);
}

TEST(DepthBins, DecodeIsTheExpectedCentre) {
  DepthBinning b{4, 1.0, 9.0};
  Eigen::MatrixXd p(2, 4);
  p << 1, 0, 0, 0, 0.5, 0, 0, 0.5;
  auto d = depth_decode(p, b);
  EXPECT_DOUBLE_EQ(d[0], 2.0);
  EXPECT_DOUBLE_EQ(d[1], 5.0);
  EXPECT_EQ(b.bin_of(0.0), 0);
  EXPECT_EQ(b.bin_of(8.99), 3);
  EXPECT_EQ(b.bin_of(100), 3);
  p(0, 0) = 0.7;
  EXPECT_THROW(depth_decode(p, b), std::invalid_argument);
}

TEST(Resampling, LabelsAndDepths) {
  std::vector<int> m(16);
  std::iota(m.begin(), m.end(), 0);
  EXPECT_EQ(downsample_labels(m, 4, 2, 2), (std::vector<int>{5, 7, 13, 15}));
  std::vector<float> d(16);
  std::iota(d.begin(), d.end(), 0.0f);
  EXPECT_EQ(downsample_depth(d, 4, 2, 2), (std::vector<double>{2.5, 4.5, 10.5, 12.5}));
  EXPECT_EQ(upsample_nearest(std::vector<int>{1, 2, 3, 4}, 2, 2, 4, 4),
            (std::vector<int>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  EXPECT_THROW(downsample_depth(d, 4, 3, 3), ShapeError);
}

TEST(LinearProbe, LearnsSeparableClassesAndRoundTrips) {
  Rng r(4);
  const int N = 600;
  RowMatrixF x(N, 3);
  std::vector<int> y;
  for (int i = 0; i < N; ++i) {
    const int c = i % 3;
    for (int k = 0; k < 3; ++k) x(i, k) = float((k == c ? 4.0 : 0.0) + 10 + r.normal() * 0.5);
    y.push_back(c);
  }
  ProbeConfig cfg;
  cfg.epochs = 30;
  cfg.batch_positions = 64;
  cfg.learning_rate = 0.05;
  std::vector<double> losses;
  auto p = train_linear_probe(x, y, ProbeTask::segmentation, 3, cfg, &losses);
  EXPECT_LT(losses.back(), losses.front());
  EXPECT_EQ(probe_predict_labels(p, x), y);
  const auto dir = testing_support::temp_dir("probe");
  save_probe(dir / "p.cdft", p);
  auto q = load_probe(dir / "p.cdft");
  EXPECT_EQ(q.task, p.task);
  EXPECT_TRUE(q.weight == p.weight);
  EXPECT_TRUE(q.logits(x) == p.logits(x));
  std::filesystem::remove_all(dir);
  EXPECT_THROW(train_linear_probe(x, {0}, ProbeTask::segmentation, 3, cfg), std::invalid_argument);
}

TEST(Analysis, CoefficientAndExplainedFraction) {
  std::vector<double> N{1, 2, 3}, F{2, 4, 6.5};
  const double c = fit_scalar_coefficient(F, N);
  EXPECT_NEAR(c, (2 + 8 + 19.5) / 14.0, 1e-15);
  std::vector<double> A{c, 2 * c, 3 * c};
  double r = 0, f = 0;
  for (int i = 0; i < 3; ++i) {
    r += (F[std::size_t(i)] - A[std::size_t(i)]) * (F[std::size_t(i)] - A[std::size_t(i)]);
    f += F[std::size_t(i)] * F[std::size_t(i)];
  }
  EXPECT_NEAR(explained_fraction(F, A), 1 - r / f, 1e-15);
  EXPECT_EQ(explained_fraction(F, F), 1.0);
  EXPECT_EQ(explained_fraction(F, std::vector<double>{-2, -4, -6.5}), 0.0);
  EXPECT_THROW(fit_scalar_coefficient(F, std::vector<double>{0, 0, 0}), std::invalid_argument);
}

TEST(Analysis, DecompositionOfPureNoiseAndPureClean) {
  std::vector<double> N{1, -1, 2, 0.5}, C{0.3, 0.8, -0.2, 1};
  auto d = detail::decompose(N, N, C);
  EXPECT_NEAR(d.fn, 1.0, 1e-12);
  EXPECT_EQ(d.fc, 0.0);
  // Orthogonal clean component: noise explains nothing, clean explains it all.
  std::vector<double> n2{1, 0, 0, 0}, c2{0, 1, 1, 0};
  auto e = detail::decompose(c2, n2, c2);
  EXPECT_EQ(e.fn, 0.0);
  EXPECT_NEAR(e.fc, 1.0, 1e-12);
}

TEST(Analysis, SpearmanAgreesWithOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(seed);
    std::vector<double> a, b;
    for (int i = 0; i < 12; ++i) {
      a.push_back(double(r.uniform_int(0, 5)));
      b.push_back(r.uniform() < 0.5 ? a.back() : double(r.uniform_int(0, 5)));
    }
    if (std::adjacent_find(a.begin(), a.end(), std::not_equal_to<>()) == a.end()) continue;
    if (std::adjacent_find(b.begin(), b.end(), std::not_equal_to<>()) == b.end()) continue;
    EXPECT_NEAR(spearman(a, b), oracles::spearman(a, b), 1e-12);
  }
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3}, {10, 20, 30}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3}, {3, 2, 1}), -1.0);
}
