// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cleandift/backbone.hpp"
#include "cleandift/heads.hpp"
#include "cleandift/rng.hpp"

namespace testing_support {

using namespace cleandift;

inline BackboneConfig small_backbone(int size = 8) {
  BackboneConfig b;
  b.image_size = size;
  b.base_channels = 8;
  b.stage_multipliers = {1, 2};
  b.num_taps = 2;
  b.timestep_embed_dim = 8;
  b.norm_groups = 4;
  return b;
}

inline HeadConfig small_heads(Conditioning c = Conditioning::film, Gating g = Gating::swiglu) {
  HeadConfig h;
  h.conditioning = c;
  h.gating = g;
  h.blocks = 2;
  h.hidden_multiplier = 2;
  h.time_embed_dim = 8;
  return h;
}

template <class T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng r(seed);
  Tensor<T> t(s);
  for (auto& v : t.values()) v = T(r.normal() * scale);
  return t;
}

/// Overwrites every parameter with small noise so that zero-initialized
/// pieces (modulation, output projections) contribute to the gradient.
template <class T>
void randomize(ParamSet<T>& ps, std::uint64_t seed, double scale = 0.3) {
  Rng r(seed);
  for (auto& p : ps)
    for (auto& v : p.value.values()) v = T(r.normal() * scale);
}

struct GradCheck {
  double max_rel = 0;
  int checked = 0;
};

/// Central differences on `count` entries spread over every parameter of `ps`.
inline GradCheck check_gradients(ParamSet<double>& ps, const std::function<double()>& loss,
                                 int per_param = 2, double h = 1e-6) {
  GradCheck g;
  for (auto& p : ps) {
    if (!p.trainable) continue;
    const std::int64_t n = p.value.numel();
    for (int k = 0; k < per_param && k < n; ++k) {
      const std::int64_t i = (k * 7919 + 13) % n;
      const double analytic = p.grad[i];
      const double v0 = p.value[i];
      p.value[i] = v0 + h;
      const double lp = loss();
      p.value[i] = v0 - h;
      const double lm = loss();
      p.value[i] = v0;
      const double numeric = (lp - lm) / (2 * h);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      g.max_rel = std::max(g.max_rel, std::abs(analytic - numeric) / denom);
      ++g.checked;
    }
  }
  return g;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cleandift_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
