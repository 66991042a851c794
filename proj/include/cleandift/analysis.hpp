// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/backbone.hpp"
#include "cleandift/rng.hpp"
#include "cleandift/schedule.hpp"
#include "cleandift/tensor.hpp"

namespace cleandift {

/// Least-squares scalar c minimising ||F - c N||^2 (no intercept).
inline double fit_scalar_coefficient(std::span<const double> F, std::span<const double> N) {
  if (F.size() != N.size()) throw ShapeError("fit_scalar_coefficient: length mismatch");
  double fn = 0, nn = 0;
  for (std::size_t i = 0; i < F.size(); ++i) {
    fn += F[i] * N[i];
    nn += N[i] * N[i];
  }
  if (nn == 0) throw std::invalid_argument("fit_scalar_coefficient: zero basis");
  return fn / nn;
}

/// 1 - ||F - A||^2 / ||F||^2, uncentered, clamped to [0, 1].
inline double explained_fraction(std::span<const double> F, std::span<const double> A) {
  if (F.size() != A.size()) throw ShapeError("explained_fraction: length mismatch");
  double r = 0, f = 0;
  for (std::size_t i = 0; i < F.size(); ++i) {
    r += (F[i] - A[i]) * (F[i] - A[i]);
    f += F[i] * F[i];
  }
  if (f == 0) throw std::invalid_argument("explained_fraction: zero target");
  return std::clamp(1.0 - r / f, 0.0, 1.0);
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need >= 2 paired values");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto i, auto j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * double(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / double(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / double(rb.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

struct VarianceRecord {
  int t = 0;
  double fraction_noise = 0;
  double fraction_clean_of_residual = 0;
  double fraction_unexplained = 0;
  int n_images = 0;
};

struct VarianceReport {
  std::vector<VarianceRecord> records;
  std::vector<int> stages;
  bool global_fit = false;
};

struct DecompositionOptions {
  std::vector<int> timesteps;
  std::vector<int> stages{2};
  bool global_fit = false;  // one coefficient over all images instead of per image
  std::uint64_t seed = 0;
  int batch_size = 64;
};

namespace detail {

/// Per-image flattened features of the selected stages, in double.
inline std::vector<std::vector<double>> flat_features(Denoiser<float>& m, const Tensor<float>& x,
                                                      int t, int max_t,
                                                      const std::vector<int>& stages, int batch) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(x.n()));
  for (int b = 0; b < x.n(); b += batch) {
    const int cnt = std::min(batch, x.n() - b);
    auto r = denoise_forward(m, slice_batch(x, b, cnt), {t}, true, max_t, {}, false);
    for (int s : stages) {
      const auto& v = r.features->stage(s).values;
      for (int i = 0; i < cnt; ++i) {
        auto& o = out[std::size_t(b + i)];
        o.insert(o.end(), v.sample(i), v.sample(i) + v.sample_size());
      }
    }
  }
  return out;
}

struct Decomposition {
  double fn, fc;
};

inline Decomposition decompose(std::span<const double> F, std::span<const double> N,
                               std::span<const double> C0) {
  const double c = fit_scalar_coefficient(F, N);
  std::vector<double> A(F.size()), R(F.size());
  for (std::size_t i = 0; i < F.size(); ++i) {
    A[i] = c * N[i];
    R[i] = F[i] - A[i];
  }
  const double fn = explained_fraction(F, A);
  double rr = 0;
  for (double v : R) rr += v * v;
  double fc = 0;
  if (rr > 0) {
    const double c2 = fit_scalar_coefficient(R, C0);
    std::vector<double> B(F.size());
    for (std::size_t i = 0; i < F.size(); ++i) B[i] = c2 * C0[i];
    fc = explained_fraction(R, B);
  }
  return {fn, fc};
}

}  // namespace detail

/// For each t: features of x_t at t are fit by one scalar against features of
/// the pure noise eps at T (the same eps), and the residual is fit against the
/// clean features at t = 0. Fractions are averaged over images, or computed
/// once over the concatenation when global_fit is set.
inline VarianceReport noise_decomposition_sweep(Denoiser<float>& teacher, const NoiseSchedule& sched,
                                                const Tensor<float>& images,
                                                const DecompositionOptions& o) {
  if (images.n() == 0 || o.timesteps.empty() || o.stages.empty())
    throw std::invalid_argument("noise_decomposition_sweep: empty inputs");
  VarianceReport rep;
  rep.stages = o.stages;
  rep.global_fit = o.global_fit;
  Tensor<float> eps(images.shape());
  for (int i = 0; i < images.n(); ++i) {
    Rng rng(derive_seed(o.seed, 0xa9a1, std::uint64_t(i)));
    float* e = eps.sample(i);
    for (std::int64_t j = 0; j < images.sample_size(); ++j) e[j] = float(rng.normal());
  }
  const auto clean = detail::flat_features(teacher, images, 0, sched.T, o.stages, o.batch_size);
  const auto noise = detail::flat_features(teacher, eps, sched.T, sched.T, o.stages, o.batch_size);
  for (int t : o.timesteps) {
    Tensor<float> xt =
        forward_noise_batch(images, eps, std::vector<int>(std::size_t(images.n()), t), sched);
    const auto F = detail::flat_features(teacher, xt, t, sched.T, o.stages, o.batch_size);
    VarianceRecord r;
    r.t = t;
    r.n_images = images.n();
    if (o.global_fit) {
      std::vector<double> f, n, c;
      for (int i = 0; i < images.n(); ++i) {
        f.insert(f.end(), F[std::size_t(i)].begin(), F[std::size_t(i)].end());
        n.insert(n.end(), noise[std::size_t(i)].begin(), noise[std::size_t(i)].end());
        c.insert(c.end(), clean[std::size_t(i)].begin(), clean[std::size_t(i)].end());
      }
      auto d = detail::decompose(f, n, c);
      r.fraction_noise = d.fn;
      r.fraction_clean_of_residual = d.fc;
      r.fraction_unexplained = (1 - d.fn) * (1 - d.fc);
    } else {
      for (int i = 0; i < images.n(); ++i) {
        auto d = detail::decompose(F[std::size_t(i)], noise[std::size_t(i)], clean[std::size_t(i)]);
        r.fraction_noise += d.fn;
        r.fraction_clean_of_residual += d.fc;
        r.fraction_unexplained += (1 - d.fn) * (1 - d.fc);
      }
      r.fraction_noise /= images.n();
      r.fraction_clean_of_residual /= images.n();
      r.fraction_unexplained /= images.n();
    }
    rep.records.push_back(r);
  }
  return rep;
}

}  // namespace cleandift
