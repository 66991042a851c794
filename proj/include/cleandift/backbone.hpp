// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/autograd.hpp"
#include "cleandift/params.hpp"
#include "cleandift/rng.hpp"
#include "cleandift/schedule.hpp"

namespace cleandift {

/// U-Net layout. Level l runs at image_size / 2^l with
/// base_channels * stage_multipliers[l] channels. The encoder has one residual
/// block per level; the decoder has (levels - l) blocks at level l, the first
/// of which consumes the encoder skip. Feature taps are, in order, the middle
/// block and the decoder blocks, excluding the final two decoder blocks.
struct BackboneConfig {
  int image_size = 32;
  int in_channels = 3;
  int base_channels = 16;
  std::vector<int> stage_multipliers{1, 2, 2};
  int num_taps = 5;
  int timestep_embed_dim = 64;
  int norm_groups = 8;

  int levels() const { return int(stage_multipliers.size()); }
  int channels(int level) const { return base_channels * stage_multipliers.at(std::size_t(level)); }
  int decoder_blocks() const { return levels() * (levels() + 1) / 2; }
  int max_taps() const { return 1 + decoder_blocks() - 2; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("BackboneConfig: " + m); };
    if (levels() < 1) fail("need at least one level");
    if (image_size <= 0 || image_size % (1 << (levels() - 1)) != 0)
      fail("image_size must be divisible by 2^(levels-1)");
    if (in_channels <= 0 || base_channels <= 0) fail("channel counts must be positive");
    for (int m : stage_multipliers)
      if (m <= 0) fail("stage multipliers must be positive");
    if (timestep_embed_dim <= 0 || timestep_embed_dim % 2 != 0)
      fail("timestep_embed_dim must be positive and even");
    if (num_taps < 2 || num_taps > max_taps())
      fail("num_taps must be in [2, " + std::to_string(max_taps()) + "]");
    for (int c : normalized_channel_counts())
      if (c % norm_groups != 0)
        fail("norm_groups=" + std::to_string(norm_groups) + " does not divide " +
             std::to_string(c) + " channels");
  }

  /// Every channel count that passes through a group norm.
  std::vector<int> normalized_channel_counts() const {
    std::vector<int> out;
    int prev = channels(0);
    for (int l = 0; l < levels(); ++l) {
      out.push_back(prev);
      out.push_back(channels(l));
      prev = channels(l);
    }
    int cur = channels(levels() - 1);
    out.push_back(cur);
    for (int l = levels() - 1; l >= 0; --l) {
      out.push_back(cur + channels(l));
      out.push_back(channels(l));
      cur = channels(l);
    }
    return out;
  }

  /// (resolution, channels) of each candidate tap, coarsest first.
  struct TapGeometry {
    int size;
    int channels;
  };
  std::vector<TapGeometry> tap_geometry() const {
    std::vector<TapGeometry> all;
    const int L = levels();
    all.push_back({image_size >> (L - 1), channels(L - 1)});
    for (int l = L - 1; l >= 0; --l)
      for (int b = 0; b < L - l; ++b) all.push_back({image_size >> l, channels(l)});
    all.resize(std::size_t(num_taps));
    return all;
  }
};

enum class ParamRole { teacher_frozen, student_trainable };

enum class InputKind { clean, noisy };

struct Provenance {
  InputKind kind = InputKind::clean;
  int t = 0;
  std::optional<std::uint64_t> noise_seed;
  /// Timestep of the projection heads, when the stack was projected.
  std::optional<int> projected_t;
};

template <class T>
struct FeatureMap {
  int stage_id = 0;
  Tensor<T> values;  // [N, C, H, W]
};

/// Tapped feature maps of one forward pass, ordered by stage id.
template <class T>
struct FeatureStack {
  std::vector<FeatureMap<T>> entries;
  Provenance provenance;

  std::size_t size() const { return entries.size(); }
  const FeatureMap<T>& stage(int id) const {
    for (const auto& e : entries)
      if (e.stage_id == id) return e;
    throw std::out_of_range("FeatureStack: no stage " + std::to_string(id));
  }
  bool has_stage(int id) const {
    for (const auto& e : entries)
      if (e.stage_id == id) return true;
    return false;
  }
  bool all_finite() const {
    for (const auto& e : entries)
      if (!e.values.all_finite()) return false;
    return true;
  }
  bool same_values(const FeatureStack& o) const {
    if (entries.size() != o.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].stage_id != o.entries[i].stage_id ||
          !(entries[i].values == o.entries[i].values))
        return false;
    return true;
  }
};

/// Sinusoidal timestep embedding, [N, dim, 1, 1].
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& ts, int dim) {
  Tensor<T> e(Shape{int(ts.size()), dim, 1, 1});
  const int half = dim / 2;
  for (std::size_t n = 0; n < ts.size(); ++n)
    for (int j = 0; j < half; ++j) {
      const double f = std::exp(-std::log(10000.0) * double(j) / double(half));
      e.at(int(n), j, 0, 0) = T(std::sin(ts[n] * f));
      e.at(int(n), half + j, 0, 0) = T(std::cos(ts[n] * f));
    }
  return e;
}

/// Small pixel-space epsilon-prediction U-Net with feature taps.
template <class T>
class Denoiser {
 public:
  struct Output {
    Var eps;
    std::vector<Var> taps;
  };

  Denoiser() = default;
  explicit Denoiser(BackboneConfig cfg) : config_(std::move(cfg)) {
    config_.validate();
    build_layout();
  }

  /// LeCun-normal conv/linear weights, zero biases, unit norm gains; the
  /// output convolution starts at zero so the initial prediction is 0.
  static Denoiser initialized(const BackboneConfig& cfg, Rng& rng) {
    Denoiser d(cfg);
    for (auto& p : d.params_) {
      const std::string& n = p.name;
      if (ends_with(n, ".gamma")) {
        p.value.fill(T(1));
      } else if (ends_with(n, ".w") && n.rfind("out.conv", 0) != 0) {
        const Shape s = p.value.shape();
        const double std = 1.0 / std::sqrt(double(s.c) * s.h * s.w);
        for (auto& v : p.value.values()) v = T(rng.normal() * std);
      }
    }
    return d;
  }

  const BackboneConfig& config() const { return config_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  ParamRole role() const { return role_; }
  void set_role(ParamRole r) {
    role_ = r;
    params_.set_trainable(r == ParamRole::student_trainable);
  }

  template <class U>
  Denoiser<U> cast() const {
    Denoiser<U> d(config_);
    d.params() = params_.template cast<U>();
    d.set_role(role_);
    return d;
  }

  /// Records a forward pass. `ts` holds one timestep per batch sample. With
  /// want_eps false the pass stops after the last tap and `eps` is invalid.
  Output forward(Tape<T>& tape, Var x, const std::vector<int>& ts, bool want_taps,
                 bool want_eps = true) {
    const Tensor<T>& X = tape.value(x);
    if (X.c() != config_.in_channels || X.h() != config_.image_size ||
        X.w() != config_.image_size)
      throw ShapeError("Denoiser: input " + X.shape().str() + " does not match image_size " +
                       std::to_string(config_.image_size));
    if (int(ts.size()) != X.n()) throw std::invalid_argument("Denoiser: one timestep per sample");
    const int L = config_.levels();

    Var temb = tape.constant(timestep_embedding<T>(ts, config_.timestep_embed_dim));
    temb = ops::silu(tape, linear(tape, "time.fc", temb));

    Var h = conv(tape, "in.conv", x, 1, 1);
    std::vector<Var> skips;
    for (int l = 0; l < L; ++l) {
      h = resblock(tape, "enc" + std::to_string(l), h, temb);
      skips.push_back(h);
      if (l + 1 < L) h = conv(tape, "down" + std::to_string(l), h, 2, 1);
    }
    h = resblock(tape, "mid", h, temb);

    Output out;
    const int tap_count = want_taps ? config_.num_taps : 0;
    if (!want_eps && tap_count == 0) throw std::invalid_argument("Denoiser: nothing requested");
    if (tap_count > 0) out.taps.push_back(h);
    int block = 0;
    for (int l = L - 1; l >= 0; --l) {
      for (int b = 0; b < L - l; ++b, ++block) {
        if (b == 0) h = ops::concat_channels(tape, h, skips[std::size_t(l)]);
        h = resblock(tape, "dec" + std::to_string(block), h, temb);
        if (int(out.taps.size()) < tap_count) out.taps.push_back(h);
        if (!want_eps && int(out.taps.size()) == tap_count) return out;
      }
      if (l > 0) h = ops::upsample2x(tape, h);
    }
    h = ops::silu(tape, norm(tape, "out.norm", h));
    out.eps = conv(tape, "out.conv", h, 1, 1);
    return out;
  }

 private:
  static bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  }

  void add_conv(const std::string& name, int cin, int cout, int k) {
    params_.add(name + ".w", Shape{cout, cin, k, k});
    params_.add(name + ".b", Shape{cout, 1, 1, 1});
  }
  void add_norm(const std::string& name, int c) {
    params_.add(name + ".gamma", Shape{c, 1, 1, 1});
    params_.add(name + ".beta", Shape{c, 1, 1, 1});
  }
  void add_resblock(const std::string& name, int cin, int cout) {
    const int d = config_.timestep_embed_dim;
    add_norm(name + ".norm1", cin);
    add_conv(name + ".conv1", cin, cout, 3);
    add_conv(name + ".temb", d, cout, 1);
    add_norm(name + ".norm2", cout);
    add_conv(name + ".conv2", cout, cout, 3);
    if (cin != cout) add_conv(name + ".skip", cin, cout, 1);
  }

  void build_layout() {
    const int L = config_.levels();
    const int d = config_.timestep_embed_dim;
    add_conv("time.fc", d, d, 1);
    add_conv("in.conv", config_.in_channels, config_.channels(0), 3);
    int prev = config_.channels(0);
    for (int l = 0; l < L; ++l) {
      add_resblock("enc" + std::to_string(l), prev, config_.channels(l));
      prev = config_.channels(l);
      if (l + 1 < L) add_conv("down" + std::to_string(l), prev, prev, 3);
    }
    add_resblock("mid", prev, prev);
    int block = 0;
    for (int l = L - 1; l >= 0; --l)
      for (int b = 0; b < L - l; ++b, ++block) {
        const int cin = b == 0 ? prev + config_.channels(l) : config_.channels(l);
        add_resblock("dec" + std::to_string(block), cin, config_.channels(l));
        prev = config_.channels(l);
      }
    add_norm("out.norm", prev);
    add_conv("out.conv", prev, config_.in_channels, 3);
  }

  Var conv(Tape<T>& tape, const std::string& name, Var x, int stride, int pad) {
    return ops::conv2d(tape, x, tape.param(params_.get(name + ".w")),
                       tape.param(params_.get(name + ".b")), stride, pad);
  }
  Var linear(Tape<T>& tape, const std::string& name, Var x) { return conv(tape, name, x, 1, 0); }
  Var norm(Tape<T>& tape, const std::string& name, Var x) {
    return ops::group_norm(tape, x, tape.param(params_.get(name + ".gamma")),
                           tape.param(params_.get(name + ".beta")), config_.norm_groups);
  }
  Var resblock(Tape<T>& tape, const std::string& name, Var x, Var temb) {
    Var h = ops::silu(tape, norm(tape, name + ".norm1", x));
    h = conv(tape, name + ".conv1", h, 1, 1);
    h = ops::add_channel_bias(tape, h, linear(tape, name + ".temb", temb));
    h = ops::silu(tape, norm(tape, name + ".norm2", h));
    h = conv(tape, name + ".conv2", h, 1, 1);
    Var skip = params_.contains(name + ".skip.w") ? linear_skip(tape, name + ".skip", x) : x;
    return ops::add(tape, h, skip);
  }
  Var linear_skip(Tape<T>& tape, const std::string& name, Var x) { return conv(tape, name, x, 1, 0); }

  BackboneConfig config_;
  ParamSet<T> params_;
  ParamRole role_ = ParamRole::student_trainable;
};

template <class T>
struct DenoiseResult {
  Tensor<T> eps_prediction;  // empty when only features were requested
  std::optional<FeatureStack<T>> features;
};

/// Gradient-free forward pass. `ts` has one entry per sample or a single
/// entry applied to all samples.
template <class T>
DenoiseResult<T> denoise_forward(Denoiser<T>& model, const Tensor<T>& x, std::vector<int> ts,
                                 bool want_features, int max_t,
                                 Provenance provenance = {}, bool want_eps = true) {
  if (ts.size() == 1 && x.n() > 1) ts.assign(std::size_t(x.n()), ts.front());
  for (int t : ts)
    if (t < 0 || t > max_t)
      throw std::out_of_range("denoise_forward: t=" + std::to_string(t) + " outside [0, " +
                              std::to_string(max_t) + "]");
  Tape<T> tape(false);
  auto out = model.forward(tape, tape.constant(x), ts, want_features, want_eps);
  DenoiseResult<T> r;
  if (want_eps) r.eps_prediction = tape.value(out.eps);
  if (want_features) {
    FeatureStack<T> fs;
    fs.provenance = provenance;
    for (std::size_t k = 0; k < out.taps.size(); ++k)
      fs.entries.push_back({int(k), tape.value(out.taps[k])});
    r.features = std::move(fs);
  }
  return r;
}

struct TeacherTrainConfig {
  int steps = 3000;
  int batch_size = 16;
  double learning_rate = 2e-3;
  int warmup_steps = 100;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

template <class T>
struct TeacherTrainResult {
  Denoiser<T> model;
  std::vector<double> loss_curve;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Epsilon-prediction training with uniform t in [1, T]. The returned model
/// carries the teacher_frozen role.
template <class T>
TeacherTrainResult<T> train_teacher(const Tensor<T>& images, const NoiseSchedule& schedule,
                                    const BackboneConfig& backbone, const TeacherTrainConfig& cfg,
                                    const std::function<void(int, double)>& on_step = {}) {
  if (images.n() == 0) throw std::invalid_argument("train_teacher: empty dataset");
  Rng rng(derive_seed(cfg.seed, 0x7eac4e));
  TeacherTrainResult<T> r{Denoiser<T>::initialized(backbone, rng), {}};
  r.model.set_role(ParamRole::student_trainable);
  Adam<T> opt(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.warmup_steps, cfg.grad_clip});
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor<T>> batch;
    std::vector<int> ts;
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(slice_batch(images, int(rng.uniform_int(0, images.n())), 1));
      ts.push_back(int(rng.uniform_int(1, schedule.T + 1)));
    }
    Tensor<T> x0 = stack_batch<T>(batch);
    Tensor<T> eps = gaussian_like<T>(x0.shape(), rng);
    Tensor<T> xt = forward_noise_batch(x0, eps, ts, schedule);
    r.model.params().zero_grad();
    Tape<T> tape;
    auto out = r.model.forward(tape, tape.constant(std::move(xt)), ts, false);
    Var loss = ops::mse_mean(tape, out.eps, tape.constant(std::move(eps)));
    const double lv = double(tape.value(loss)[0]);
    if (!std::isfinite(lv)) {
      std::ostringstream os;
      os << "train_teacher: non-finite loss at step " << step;
      throw DivergenceError(os.str());
    }
    tape.backward(loss);
    opt.step({&r.model.params()});
    r.loss_curve.push_back(lv);
    if (on_step) on_step(step, lv);
  }
  r.model.set_role(ParamRole::teacher_frozen);
  return r;
}

/// Ancestral sampling over `steps` evenly spaced timesteps from T down to 0.
/// Predicted clean images are clamped to [-1, 1] at every step.
template <class T>
Tensor<T> ancestral_sample(Denoiser<T>& model, const NoiseSchedule& schedule, int count,
                           int steps, Rng& rng) {
  if (steps < 1) throw std::invalid_argument("ancestral_sample: steps >= 1");
  const auto& cfg = model.config();
  Tensor<T> x =
      gaussian_like<T>(Shape{count, cfg.in_channels, cfg.image_size, cfg.image_size}, rng);
  std::vector<int> seq;
  for (int i = 0; i < steps; ++i)
    seq.push_back(std::max(1, int(std::lround(schedule.T - double(i) * (schedule.T - 1) /
                                                               std::max(1, steps - 1)))));
  if (steps == 1) seq = {schedule.T};
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const int t = seq[i];
    const int tp = i + 1 < seq.size() ? seq[i + 1] : 0;
    const double ab = schedule.alpha_bar[std::size_t(t)];
    const double abp = schedule.alpha_bar[std::size_t(tp)];
    auto res = denoise_forward(model, x, {t}, false, schedule.T);
    Tensor<T> x0(x.shape());
    for (std::int64_t k = 0; k < x.numel(); ++k) {
      const double v = (double(x[k]) - std::sqrt(1.0 - ab) * double(res.eps_prediction[k])) /
                       std::sqrt(ab);
      x0[k] = T(std::clamp(v, -1.0, 1.0));
    }
    if (tp == 0) {
      x = std::move(x0);
      break;
    }
    const double beta = 1.0 - ab / abp;
    const double c0 = std::sqrt(abp) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - abp) / (1.0 - ab);
    const double sigma = std::sqrt(std::max(0.0, beta * (1.0 - abp) / (1.0 - ab)));
    for (std::int64_t k = 0; k < x.numel(); ++k)
      x[k] = T(c0 * double(x0[k]) + ct * double(x[k]) + sigma * rng.normal());
  }
  for (auto& v : x.values()) v = std::clamp(v, T(-1), T(1));
  return x;
}

}  // namespace cleandift
