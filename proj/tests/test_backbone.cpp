// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "cleandift/backbone.hpp"
#include "cleandift/schedule.hpp"
#include "support.hpp"

using namespace cleandift;
using testing_support::random_tensor;
using testing_support::small_backbone;

TEST(BackboneConfig, TapGeometryCoarsestFirst) {
  BackboneConfig b;  // 32 px, multipliers 1,2,2, five taps
  b.validate();
  auto g = b.tap_geometry();
  ASSERT_EQ(g.size(), 5u);
  const int expect_size[] = {8, 8, 16, 16, 32};
  const int expect_ch[] = {32, 32, 32, 32, 16};
  for (int k = 0; k < 5; ++k) {
    EXPECT_EQ(g[std::size_t(k)].size, expect_size[k]) << k;
    EXPECT_EQ(g[std::size_t(k)].channels, expect_ch[k]) << k;
  }
}

TEST(BackboneConfig, RejectsInconsistentSettings) {
  BackboneConfig b;
  b.num_taps = 99;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = BackboneConfig{};
  b.norm_groups = 5;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = BackboneConfig{};
  b.image_size = 30;
  EXPECT_THROW(b.validate(), std::invalid_argument);
}

TEST(Denoiser, ShapesMatchTapGeometry) {
  Rng rng(1);
  auto cfg = small_backbone(8);
  auto m = Denoiser<float>::initialized(cfg, rng);
  auto x = random_tensor<float>({3, 3, 8, 8}, 2);
  auto r = denoise_forward(m, x, {5}, true, 1000);
  ASSERT_TRUE(r.features);
  EXPECT_EQ(r.eps_prediction.shape(), x.shape());
  auto g = cfg.tap_geometry();
  ASSERT_EQ(r.features->size(), g.size());
  for (std::size_t k = 0; k < g.size(); ++k) {
    const auto& v = r.features->entries[k].values;
    EXPECT_EQ(r.features->entries[k].stage_id, int(k));
    EXPECT_EQ(v.n(), 3);
    EXPECT_EQ(v.c(), g[k].channels);
    EXPECT_EQ(v.h(), g[k].size);
  }
  // Output convolution starts at zero.
  for (auto v : r.eps_prediction.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Denoiser, BatchCompositionDoesNotChangeOutputs) {
  Rng rng(1);
  auto m = Denoiser<float>::initialized(small_backbone(8), rng);
  auto x = random_tensor<float>({4, 3, 8, 8}, 2);
  auto all = denoise_forward(m, x, {0, 100, 200, 300}, true, 1000, {}, false);
  for (int i = 0; i < 4; ++i) {
    auto one = denoise_forward(m, slice_batch(x, i, 1), {100 * i}, true, 1000, {}, false);
    for (std::size_t k = 0; k < one.features->size(); ++k) {
      const auto a = slice_batch(all.features->entries[k].values, i, 1);
      const auto& b = one.features->entries[k].values;
      for (std::int64_t j = 0; j < a.numel(); ++j) EXPECT_NEAR(a[j], b[j], 1e-5f);
    }
  }
}

TEST(Denoiser, TimestepChangesFeatures) {
  Rng rng(1);
  auto m = Denoiser<float>::initialized(small_backbone(8), rng);
  auto x = random_tensor<float>({1, 3, 8, 8}, 2);
  auto a = denoise_forward(m, x, {0}, true, 1000, {}, false);
  auto b = denoise_forward(m, x, {500}, true, 1000, {}, false);
  EXPECT_FALSE(a.features->same_values(*b.features));
  EXPECT_THROW(denoise_forward(m, x, {1001}, true, 1000), std::out_of_range);
}

TEST(Denoiser, EpsilonLossGradients) {
  Rng rng(3);
  auto m = Denoiser<double>::initialized(small_backbone(8), rng);
  testing_support::randomize(m.params(), 4, 0.2);
  m.set_role(ParamRole::student_trainable);
  auto x = random_tensor<double>({2, 3, 8, 8}, 5);
  auto eps = random_tensor<double>({2, 3, 8, 8}, 6);
  auto run = [&](bool backward) {
    Tape<double> t;
    auto out = m.forward(t, t.constant(x), {10, 700}, false, true);
    Var l = ops::mse_mean(t, out.eps, t.constant(eps));
    if (backward) t.backward(l);
    return t.value(l)[0];
  };
  m.params().zero_grad();
  run(true);
  auto g = testing_support::check_gradients(m.params(), [&] { return run(false); }, 1, 1e-5);
  EXPECT_GE(g.checked, 20);
  EXPECT_LT(g.max_rel, 1e-4);
}

TEST(Denoiser, RolesControlTrainability) {
  Rng rng(1);
  auto m = Denoiser<float>::initialized(small_backbone(8), rng);
  m.set_role(ParamRole::teacher_frozen);
  for (const auto& p : m.params()) EXPECT_FALSE(p.trainable);
  auto s = m;
  s.set_role(ParamRole::student_trainable);
  for (const auto& p : s.params()) EXPECT_TRUE(p.trainable);
  for (const auto& p : m.params()) EXPECT_FALSE(p.trainable);
  EXPECT_EQ(m.params().checksum(), s.params().checksum());
}

TEST(TeacherTraining, LossDecreasesAndIsDeterministic) {
  const auto sched = build_schedule(1000, ScheduleFamily::cosine);
  auto images = random_tensor<float>({8, 3, 8, 8}, 1, 0.5);
  TeacherTrainConfig tc;
  tc.steps = 40;
  tc.batch_size = 4;
  tc.warmup_steps = 5;
  tc.seed = 3;
  auto a = train_teacher<float>(images, sched, small_backbone(8), tc);
  auto b = train_teacher<float>(images, sched, small_backbone(8), tc);
  EXPECT_EQ(a.model.params().checksum(), b.model.params().checksum());
  EXPECT_EQ(a.model.role(), ParamRole::teacher_frozen);
  ASSERT_EQ(a.loss_curve.size(), 40u);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += a.loss_curve[std::size_t(i)];
    last += a.loss_curve[std::size_t(30 + i)];
  }
  EXPECT_LT(last, first);
}
