// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "cleandift/autograd.hpp"
#include "cleandift/heads.hpp"
#include "support.hpp"

using namespace cleandift;
using testing_support::check_gradients;
using testing_support::random_tensor;

namespace {

using Builder = std::function<Var(Tape<double>&, ParamSet<double>&)>;

// Reduces the op output against a fixed random target so every output
// element carries a distinct upstream gradient.
double max_rel_error(ParamSet<double>& ps, const Builder& op, int per_param = 4) {
  Tensor<double> target;
  auto loss = [&](bool backward) {
    Tape<double> tape;
    Var y = op(tape, ps);
    if (target.empty()) target = random_tensor<double>(tape.shape(y), 77);
    Var l = ops::mse_mean(tape, y, tape.constant(target));
    if (backward) tape.backward(l);
    return tape.value(l)[0];
  };
  ps.zero_grad();
  loss(true);
  auto g = check_gradients(ps, [&] { return loss(false); }, per_param);
  EXPECT_GT(g.checked, 0);
  return g.max_rel;
}

Parameter<double>& add_random(ParamSet<double>& ps, const std::string& name, Shape s, std::uint64_t seed,
                              double scale = 1.0) {
  auto& p = ps.add(name, s);
  p.value = random_tensor<double>(s, seed, scale);
  return p;
}

}  // namespace

TEST(AutogradOps, Conv2dStrideAndPadding) {
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      ParamSet<double> ps;
      add_random(ps, "x", {2, 3, 6, 6}, 1);
      add_random(ps, "w", {4, 3, 3, 3}, 2, 0.3);
      add_random(ps, "b", {4, 1, 1, 1}, 3);
      EXPECT_LT(max_rel_error(ps, [&](auto& t, auto& p) {
                  return ops::conv2d(t, t.param(p.get("x")), t.param(p.get("w")), t.param(p.get("b")), stride, pad);
                }),
                1e-6);
    }
}

TEST(AutogradOps, Conv2dMatchesDirectSum) {
  auto x = random_tensor<double>({1, 2, 5, 5}, 4);
  auto w = random_tensor<double>({3, 2, 3, 3}, 5);
  auto b = random_tensor<double>({3, 1, 1, 1}, 6);
  Tape<double> tape(false);
  auto y = tape.value(ops::conv2d(tape, tape.constant(x), tape.constant(w), tape.constant(b), 2, 1));
  ASSERT_EQ(y.h(), 3);
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double s = b[o];
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy >= 0 && iy < 5 && ix >= 0 && ix < 5) s += w.at(o, c, ky, kx) * x.at(0, c, iy, ix);
            }
        EXPECT_NEAR(y.at(0, o, oy, ox), s, 1e-12);
      }
}

TEST(AutogradOps, GroupNorm) {
  ParamSet<double> ps;
  add_random(ps, "x", {2, 4, 3, 3}, 1);
  add_random(ps, "g", {4, 1, 1, 1}, 2);
  add_random(ps, "b", {4, 1, 1, 1}, 3);
  EXPECT_LT(max_rel_error(ps, [](auto& t, auto& p) {
              return ops::group_norm(t, t.param(p.get("x")), t.param(p.get("g")), t.param(p.get("b")), 2);
            }),
            1e-6);
}

TEST(AutogradOps, ElementwiseAndLayoutOps) {
  ParamSet<double> ps;
  add_random(ps, "a", {2, 3, 2, 2}, 1);
  add_random(ps, "b", {2, 3, 2, 2}, 2);
  add_random(ps, "v", {2, 3, 1, 1}, 3);
  add_random(ps, "m", {2, 6, 1, 1}, 4, 0.5);
  EXPECT_LT(max_rel_error(ps, [](auto& t, auto& p) {
              Var a = t.param(p.get("a")), b = t.param(p.get("b"));
              Var h = ops::mul(t, ops::silu(t, a), ops::add(t, b, ops::scale(t, a, -0.5)));
              h = ops::add_channel_bias(t, h, t.param(p.get("v")));
              h = ops::modulate(t, h, t.param(p.get("m")));
              h = ops::concat_channels(t, h, ops::rms_norm_channels(t, b));
              h = ops::upsample2x(t, h);
              return ops::repeat_interleave_batch(t, h, 2);
            }),
            1e-6);
}

TEST(AutogradOps, ReductionsAndWeightedSum) {
  ParamSet<double> ps;
  add_random(ps, "a", {2, 4, 3, 3}, 1);
  add_random(ps, "b", {2, 4, 3, 3}, 2);
  auto run = [&](bool backward) {
    Tape<double> t;
    Var a = t.param(ps.get("a")), b = t.param(ps.get("b"));
    Var l = ops::weighted_sum(t, {ops::cosine_similarity_mean(t, a, b), ops::mse_mean(t, a, b), ops::mae_mean(t, a, b)},
                              {-1.0, 0.5, 2.0});
    if (backward) t.backward(l);
    return t.value(l)[0];
  };
  ps.zero_grad();
  run(true);
  auto g = check_gradients(ps, [&] { return run(false); }, 8);
  EXPECT_LT(g.max_rel, 1e-6);
}

TEST(AutogradOps, CosineOfIdenticalInputsIsExactlyOne) {
  auto a = random_tensor<float>({3, 5, 4, 4}, 11);
  Tape<float> t(false);
  EXPECT_EQ(t.value(ops::cosine_similarity_mean(t, t.constant(a), t.constant(a)))[0], 1.0f);
  Tensor<float> z(a.shape());
  EXPECT_EQ(t.value(ops::cosine_similarity_mean(t, t.constant(z), t.constant(a)))[0], 0.0f);
}

// The fused head block must agree with its composition from elementary ops,
// both in value and in every parameter gradient.
TEST(AutogradOps, FusedFfnBlockMatchesReference) {
  for (auto cond : {Conditioning::film, Conditioning::adarms})
    for (auto gate : {Gating::swiglu, Gating::swish}) {
      Rng rng(5);
      auto heads = ProjectionHeads<double>::initialized(testing_support::small_heads(cond, gate), {6, 4}, rng);
      testing_support::randomize(heads.params(), 8, 0.4);
      auto x = random_tensor<double>({3, 6, 2, 2}, 9);
      auto target = random_tensor<double>({3, 6, 2, 2}, 10);
      auto run = [&](bool fused) {
        heads.params().zero_grad();
        Tape<double> t;
        Var temb = heads.time_embedding(t, {0, 400, 999});
        Var y = fused ? heads.project_stage(t, 0, t.constant(x), temb)
                      : heads.project_stage_reference(t, 0, t.constant(x), temb);
        Var l = ops::mse_mean(t, y, t.constant(target));
        t.backward(l);
        std::vector<Tensor<double>> grads;
        for (auto& p : heads.params()) grads.push_back(p.grad);
        return std::make_pair(t.value(y), grads);
      };
      auto [yf, gf] = run(true);
      auto [yr, gr] = run(false);
      for (std::int64_t i = 0; i < yf.numel(); ++i) EXPECT_NEAR(yf[i], yr[i], 1e-12);
      for (std::size_t k = 0; k < gf.size(); ++k)
        for (std::int64_t i = 0; i < gf[k].numel(); ++i) EXPECT_NEAR(gf[k][i], gr[k][i], 1e-10);
    }
}

TEST(AutogradTape, FrozenParametersReceiveNoGradient) {
  ParamSet<double> ps;
  auto& a = add_random(ps, "a", {1, 2, 2, 2}, 1);
  add_random(ps, "b", {1, 2, 2, 2}, 2);
  a.trainable = false;
  ps.zero_grad();
  Tape<double> t;
  Var l = ops::mse_mean(t, t.param(ps.get("a")), t.param(ps.get("b")));
  t.backward(l);
  for (auto v : ps.get("a").grad.values()) EXPECT_EQ(v, 0.0);
  double s = 0;
  for (auto v : ps.get("b").grad.values()) s += std::abs(v);
  EXPECT_GT(s, 0.0);
}

TEST(AutogradTape, BackwardRequiresScalarRoot) {
  Tape<double> t;
  ParamSet<double> ps;
  add_random(ps, "a", {1, 2, 2, 2}, 1);
  Var a = t.param(ps.get("a"));
  EXPECT_THROW(t.backward(a), std::invalid_argument);
}
