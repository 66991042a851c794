// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/rng.hpp"
#include "cleandift/tensor.hpp"

namespace cleandift {

enum class ScheduleFamily { cosine, linear };

inline ScheduleFamily parse_schedule_family(const std::string& s) {
  if (s == "cosine") return ScheduleFamily::cosine;
  if (s == "linear") return ScheduleFamily::linear;
  throw std::invalid_argument("unknown schedule family '" + s + "'");
}
inline std::string to_string(ScheduleFamily f) {
  return f == ScheduleFamily::cosine ? "cosine" : "linear";
}

/// Cumulative signal coefficients alpha_bar[t], t = 0..T.
struct NoiseSchedule {
  int T = 0;
  ScheduleFamily family = ScheduleFamily::cosine;
  std::vector<double> alpha_bar;

  double signal(int t) const { return std::sqrt(alpha_bar.at(std::size_t(t))); }
  double noise(int t) const { return std::sqrt(1.0 - alpha_bar.at(std::size_t(t))); }

  void validate() const {
    if (T < 1 || alpha_bar.size() != std::size_t(T) + 1)
      throw std::invalid_argument("NoiseSchedule: alpha_bar must have T+1 entries");
    for (std::size_t t = 0; t < alpha_bar.size(); ++t) {
      if (!(alpha_bar[t] > 0.0 && alpha_bar[t] <= 1.0))
        throw std::invalid_argument("NoiseSchedule: alpha_bar out of (0, 1]");
      if (t > 0 && alpha_bar[t] > alpha_bar[t - 1])
        throw std::invalid_argument("NoiseSchedule: alpha_bar must be non-increasing");
    }
    if (alpha_bar.front() < 1.0 - 1e-6 || alpha_bar.back() > 1e-3)
      throw std::invalid_argument("NoiseSchedule: endpoint conditions violated");
  }
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kAlphaBarFloor = 1e-4;
inline constexpr double kAlphaBarTerminalMax = 1e-3;

/// Squared-cosine cumulative form, normalized so that the value at 0 is 1:
///   f(u) = cos^2(((u + s) / (1 + s)) * pi / 2),  alpha_bar = f(t/T) / f(0).
inline double cosine_alpha_bar(double u, double offset = kCosineOffset) {
  auto f = [offset](double v) {
    const double c = std::cos((v + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  return f(u) / f(0.0);
}

/// Builds a schedule. Entries are floored at 1e-4 so every coefficient stays
/// strictly positive, and alpha_bar[T] is capped at 1e-3 so x_T is nearly pure
/// noise. The linear family uses DDPM betas (1e-4 .. 0.02) rescaled by 1000/T.
inline NoiseSchedule build_schedule(int num_timesteps, ScheduleFamily family) {
  if (num_timesteps < 2) throw std::invalid_argument("build_schedule: need T >= 2");
  NoiseSchedule s;
  s.T = num_timesteps;
  s.family = family;
  s.alpha_bar.resize(std::size_t(num_timesteps) + 1);
  const double T = num_timesteps;
  if (family == ScheduleFamily::cosine) {
    for (int t = 0; t <= num_timesteps; ++t) s.alpha_bar[t] = cosine_alpha_bar(t / T);
  } else {
    const double scale = 1000.0 / T;
    double prod = 1.0;
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= num_timesteps; ++t) {
      const double beta = std::min(
          0.999, scale * (1e-4 + (0.02 - 1e-4) * double(t - 1) / std::max(1.0, T - 1)));
      prod *= 1.0 - beta;
      s.alpha_bar[t] = prod;
    }
  }
  for (double& a : s.alpha_bar) a = std::clamp(a, kAlphaBarFloor, 1.0);
  s.alpha_bar.back() = std::min(s.alpha_bar.back(), kAlphaBarTerminalMax);
  s.validate();
  return s;
}

template <class T>
struct NoisySample {
  Tensor<T> x0;
  Tensor<T> eps;
  int t = 0;
  Tensor<T> xt;
};

/// sqrt(a) * x0 + sqrt(1 - a) * eps for an explicit coefficient a in [0, 1].
template <class T>
Tensor<T> mix_signal_noise(const Tensor<T>& x0, const Tensor<T>& eps, double alpha_bar) {
  require_same_shape(x0.shape(), eps.shape(), "forward_noise");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0))
    throw std::invalid_argument("forward_noise: alpha_bar outside [0, 1]");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor<T> xt(x0.shape());
  for (std::int64_t i = 0; i < xt.numel(); ++i)
    xt[i] = T(a * double(x0[i]) + b * double(eps[i]));
  return xt;
}

template <class T>
NoisySample<T> forward_noise(const Tensor<T>& x0, const Tensor<T>& eps, int t,
                             const NoiseSchedule& schedule) {
  if (t < 0 || t > schedule.T)
    throw std::out_of_range("forward_noise: t=" + std::to_string(t) + " outside [0, " +
                            std::to_string(schedule.T) + "]");
  Tensor<T> xt = mix_signal_noise(x0, eps, schedule.alpha_bar[std::size_t(t)]);
  return NoisySample<T>{x0, eps, t, std::move(xt)};
}

/// Per-sample timesteps for a batch: each sample n uses ts[n].
template <class T>
Tensor<T> forward_noise_batch(const Tensor<T>& x0, const Tensor<T>& eps,
                              const std::vector<int>& ts, const NoiseSchedule& schedule) {
  require_same_shape(x0.shape(), eps.shape(), "forward_noise_batch");
  if (int(ts.size()) != x0.n()) throw std::invalid_argument("forward_noise_batch: ts size");
  Tensor<T> xt(x0.shape());
  const std::int64_t ss = x0.sample_size();
  for (int n = 0; n < x0.n(); ++n) {
    const int t = ts[std::size_t(n)];
    if (t < 0 || t > schedule.T) throw std::out_of_range("forward_noise_batch: t");
    const double a = schedule.signal(t), b = schedule.noise(t);
    for (std::int64_t i = 0; i < ss; ++i)
      xt.sample(n)[i] = T(a * double(x0.sample(n)[i]) + b * double(eps.sample(n)[i]));
  }
  return xt;
}

template <class T>
Tensor<T> gaussian_like(Shape s, Rng& rng) {
  Tensor<T> out(s);
  for (auto& v : out.values()) v = T(rng.normal());
  return out;
}

struct StratifiedDraw {
  int bins = 0;
  std::vector<int> timesteps;
};

/// Bin i covers integer timesteps [floor(i*T/I), floor((i+1)*T/I)).
inline std::pair<int, int> stratum_bounds(int i, int bins, int T) {
  const auto lo = int((std::int64_t(i) * T) / bins);
  const auto hi = int((std::int64_t(i + 1) * T) / bins);
  return {lo, hi};
}

/// One timestep drawn uniformly from each of `bins` contiguous strata of [0, T).
inline StratifiedDraw sample_stratified_timesteps(int bins, int T, Rng& rng) {
  if (bins < 1 || bins > T)
    throw std::invalid_argument("sample_stratified_timesteps: bins must be in [1, T]");
  StratifiedDraw d;
  d.bins = bins;
  d.timesteps.reserve(std::size_t(bins));
  for (int i = 0; i < bins; ++i) {
    const auto [lo, hi] = stratum_bounds(i, bins, T);
    d.timesteps.push_back(int(rng.uniform_int(lo, hi)));
  }
  return d;
}

}  // namespace cleandift
