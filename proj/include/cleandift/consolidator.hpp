// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/autograd.hpp"
#include "cleandift/backbone.hpp"
#include "cleandift/heads.hpp"
#include "cleandift/params.hpp"
#include "cleandift/rng.hpp"
#include "cleandift/schedule.hpp"

namespace cleandift {

enum class Metric { cosine, l2, l1 };
enum class HeadPretraining { none, joint, frozen_after_pretrain };

inline Metric parse_metric(const std::string& s) {
  if (s == "cosine") return Metric::cosine;
  if (s == "l2") return Metric::l2;
  if (s == "l1") return Metric::l1;
  throw std::invalid_argument("unknown metric '" + s + "'");
}
inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::cosine: return "cosine";
    case Metric::l2: return "l2";
    case Metric::l1: return "l1";
  }
  return "?";
}
inline HeadPretraining parse_head_pretraining(const std::string& s) {
  if (s == "none") return HeadPretraining::none;
  if (s == "joint") return HeadPretraining::joint;
  if (s == "frozen_after_pretrain") return HeadPretraining::frozen_after_pretrain;
  throw std::invalid_argument("unknown head_pretraining '" + s + "'");
}
inline std::string to_string(HeadPretraining p) {
  switch (p) {
    case HeadPretraining::none: return "none";
    case HeadPretraining::joint: return "joint";
    case HeadPretraining::frozen_after_pretrain: return "frozen_after_pretrain";
  }
  return "?";
}

struct AlignmentConfig {
  Metric metric = Metric::cosine;
  bool use_heads = true;
  int bins = 3;
  int steps = 2000;
  int batch_size = 8;
  double learning_rate = 1e-4;
  int warmup_steps = 100;
  double grad_clip = 1.0;
  Conditioning head_conditioning = Conditioning::film;
  Gating head_gating = Gating::swiglu;
  HeadPretraining head_pretraining = HeadPretraining::none;
  int pretrain_steps = 200;
  /// Per-stage loss weights; empty means all ones.
  std::vector<double> stage_weights;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("AlignmentConfig: " + m); };
    if (steps < 0) fail("steps must be >= 0");
    if (bins < 1) fail("bins must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (warmup_steps < 0) fail("warmup_steps must be >= 0");
    if (pretrain_steps < 0) fail("pretrain_steps must be >= 0");
    if (head_pretraining != HeadPretraining::none && !use_heads)
      fail("head pretraining requires use_heads");
  }

  HeadConfig head_config() const {
    HeadConfig h;
    h.conditioning = head_conditioning;
    h.gating = head_gating;
    return h;
  }
};

inline std::vector<double> resolve_stage_weights(const std::vector<double>& w, std::size_t k) {
  if (w.empty()) return std::vector<double>(k, 1.0);
  if (w.size() != k)
    throw std::invalid_argument("stage_weights has " + std::to_string(w.size()) +
                                " entries for " + std::to_string(k) + " stages");
  return w;
}

struct AlignmentTerms {
  Var loss;
  std::vector<double> stage_terms;
  /// Mean per-position cosine similarity per stage, whatever the metric.
  std::vector<double> stage_similarity;
};

/// Recorded loss: cosine gives -sum_k w_k * mean cos, l2/l1 give
/// sum_k w_k * mean squared/absolute error.
template <class T>
AlignmentTerms alignment_loss(Tape<T>& tape, const std::vector<Var>& projected,
                              const std::vector<Var>& teacher, Metric metric,
                              const std::vector<double>& stage_weights = {}) {
  if (projected.size() != teacher.size() || projected.empty())
    throw ShapeError("alignment_loss: stage count mismatch");
  auto w = resolve_stage_weights(stage_weights, projected.size());
  AlignmentTerms r;
  std::vector<Var> terms;
  for (std::size_t k = 0; k < projected.size(); ++k) {
    require_same_shape(tape.shape(projected[k]), tape.shape(teacher[k]), "alignment_loss");
    Var term;
    switch (metric) {
      case Metric::cosine: term = ops::cosine_similarity_mean(tape, projected[k], teacher[k]); break;
      case Metric::l2: term = ops::mse_mean(tape, projected[k], teacher[k]); break;
      case Metric::l1: term = ops::mae_mean(tape, projected[k], teacher[k]); break;
    }
    const double v = double(tape.value(term)[0]);
    r.stage_terms.push_back(metric == Metric::cosine ? -v : v);
    if (metric == Metric::cosine) {
      r.stage_similarity.push_back(v);
    } else {
      Tape<T> probe(false);
      Var c = ops::cosine_similarity_mean(probe, probe.constant(tape.value(projected[k])),
                                          probe.constant(tape.value(teacher[k])));
      r.stage_similarity.push_back(double(probe.value(c)[0]));
    }
    terms.push_back(term);
    if (metric == Metric::cosine) w[k] = -w[k];
  }
  r.loss = ops::weighted_sum(tape, terms, w);
  return r;
}

struct AlignmentValue {
  double loss = 0.0;
  std::vector<double> stage_similarity;
  std::vector<double> stage_terms;
};

template <class T>
AlignmentValue alignment_loss(const FeatureStack<T>& projected, const FeatureStack<T>& teacher,
                              Metric metric, const std::vector<double>& stage_weights = {}) {
  if (projected.size() != teacher.size())
    throw ShapeError("alignment_loss: stage count mismatch");
  Tape<T> tape(false);
  std::vector<Var> a, b;
  for (std::size_t k = 0; k < projected.size(); ++k) {
    a.push_back(tape.constant(projected.entries[k].values));
    b.push_back(tape.constant(teacher.entries[k].values));
  }
  auto terms = alignment_loss(tape, a, b, metric, stage_weights);
  return {double(tape.value(terms.loss)[0]), terms.stage_similarity, terms.stage_terms};
}

/// Trainable copy of a frozen teacher.
template <class T>
Denoiser<T> init_student_from_teacher(const Denoiser<T>& teacher) {
  if (teacher.role() != ParamRole::teacher_frozen)
    throw std::invalid_argument("init_student_from_teacher: teacher must be frozen");
  Denoiser<T> s = teacher;
  s.set_role(ParamRole::student_trainable);
  return s;
}

template <class T>
ProjectionHeads<T> init_heads(const BackboneConfig& backbone, const HeadConfig& cfg, Rng& rng) {
  std::vector<int> ch;
  for (const auto& g : backbone.tap_geometry()) ch.push_back(g.channels);
  return ProjectionHeads<T>::initialized(cfg, ch, rng);
}

struct DistillLogRow {
  int step = 0;
  std::string phase;  // "pretrain" or "distill"
  double loss = 0.0;
  double learning_rate = 0.0;
  std::vector<double> stage_similarity;
};

class AlignmentDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// Student tap stack on clean images, fed the constant t = 0 embedding.
template <class T>
std::vector<Var> student_stack(Tape<T>& tape, Denoiser<T>& student, const Tensor<T>& x0) {
  auto out = student.forward(tape, tape.constant(x0), std::vector<int>(std::size_t(x0.n()), 0),
                             true, false);
  return out.taps;
}

/// Teacher tap stack on noisy inputs, no gradients.
template <class T>
std::vector<Tensor<T>> teacher_stack(Denoiser<T>& teacher, const Tensor<T>& xt,
                                     const std::vector<int>& ts) {
  Tape<T> tape(false);
  auto out = teacher.forward(tape, tape.constant(xt), ts, true, false);
  std::vector<Tensor<T>> r;
  for (Var v : out.taps) r.push_back(tape.value(v));
  return r;
}

struct AlignmentBatch {
  std::vector<int> image_index;
  std::vector<int> ts;  // batch * bins, sample-major
};

template <class T>
struct NoisyBatch {
  Tensor<T> x0;
  Tensor<T> xt;  // x0 repeated per bin, noised at ts
};

template <class T>
NoisyBatch<T> make_noisy_batch(const Tensor<T>& images, const AlignmentBatch& b, int bins,
                               const NoiseSchedule& schedule, Rng& rng) {
  std::vector<Tensor<T>> x0s, reps;
  for (int idx : b.image_index) {
    x0s.push_back(slice_batch(images, idx, 1));
    for (int i = 0; i < bins; ++i) reps.push_back(x0s.back());
  }
  NoisyBatch<T> nb;
  nb.x0 = stack_batch<T>(x0s);
  Tensor<T> rep = stack_batch<T>(reps);
  Tensor<T> eps = gaussian_like<T>(rep.shape(), rng);
  nb.xt = forward_noise_batch(rep, eps, b.ts, schedule);
  return nb;
}

inline AlignmentBatch draw_batch(int n_images, int batch_size, int bins, int T, Rng& rng) {
  AlignmentBatch b;
  for (int i = 0; i < batch_size; ++i) {
    b.image_index.push_back(int(rng.uniform_int(0, n_images)));
    auto d = sample_stratified_timesteps(bins, T, rng);
    b.ts.insert(b.ts.end(), d.timesteps.begin(), d.timesteps.end());
  }
  return b;
}

/// Shared optimization loop for joint distillation and head pretraining.
template <class T>
std::vector<DistillLogRow> align_loop(Denoiser<T>& teacher, Denoiser<T>& student,
                                      ProjectionHeads<T>& heads, const Tensor<T>& images,
                                      const NoiseSchedule& schedule, const AlignmentConfig& cfg,
                                      int steps, bool train_student, bool train_heads,
                                      const std::string& phase, Rng& rng,
                                      const std::function<void(const DistillLogRow&)>& on_step) {
  if (images.n() == 0) throw std::invalid_argument("alignment: empty dataset");
  if (teacher.role() != ParamRole::teacher_frozen)
    throw std::invalid_argument("alignment: teacher must be frozen");
  student.params().set_trainable(train_student);
  heads.params().set_trainable(train_heads && cfg.use_heads);
  Adam<T> opt(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.warmup_steps, cfg.grad_clip});
  const std::size_t K = std::size_t(student.config().num_taps);
  const auto weights = resolve_stage_weights(cfg.stage_weights, K);
  std::vector<DistillLogRow> log;
  for (int step = 0; step < steps; ++step) {
    const auto b = draw_batch(images.n(), cfg.batch_size, cfg.bins, schedule.T, rng);
    auto nb = make_noisy_batch(images, b, cfg.bins, schedule, rng);
    auto target = teacher_stack(teacher, nb.xt, b.ts);

    student.params().zero_grad();
    heads.params().zero_grad();
    Tape<T> tape;
    std::vector<Var> s;
    if (train_student) {
      s = student_stack(tape, student, nb.x0);
    } else {
      Tape<T> frozen(false);
      for (Var v : student_stack(frozen, student, nb.x0)) s.push_back(tape.constant(frozen.value(v)));
    }
    for (Var& v : s) v = ops::repeat_interleave_batch(tape, v, cfg.bins);
    std::vector<Var> projected = cfg.use_heads ? heads.project(tape, s, b.ts) : s;
    std::vector<Var> tv;
    for (auto& t : target) tv.push_back(tape.constant(std::move(t)));
    auto terms = alignment_loss(tape, projected, tv, cfg.metric, weights);
    // Per-image sum over the bins, mean over the batch.
    Var loss = ops::scale(tape, terms.loss, double(cfg.bins));
    const double lv = double(tape.value(loss)[0]);
    if (!std::isfinite(lv)) {
      std::ostringstream os;
      os << phase << ": non-finite loss at step " << step;
      for (std::size_t k = 0; k < terms.stage_terms.size(); ++k)
        if (!std::isfinite(terms.stage_terms[k])) {
          os << ", stage " << k;
          break;
        }
      throw AlignmentDivergence(os.str());
    }
    tape.backward(loss);
    const double lr = opt.learning_rate_at(opt.steps_taken());
    if (train_student && train_heads && cfg.use_heads)
      opt.step({&student.params(), &heads.params()});
    else if (train_student)
      opt.step({&student.params()});
    else if (train_heads && cfg.use_heads)
      opt.step({&heads.params()});
    DistillLogRow row{step, phase, lv, lr, terms.stage_similarity};
    if (on_step) on_step(row);
    log.push_back(std::move(row));
  }
  return log;
}

}  // namespace detail

template <class T>
struct DistillResult {
  Denoiser<T> student;
  ProjectionHeads<T> heads;
  std::vector<DistillLogRow> log;
};

/// Joint alignment: each image draws `bins` stratified timesteps with fresh
/// noise per timestep; the teacher sees x_t, the student sees x_0 once and its
/// stack is reused across the draws. Heads are trained only when use_heads.
template <class T>
DistillResult<T> run_distillation(Denoiser<T>& teacher, Denoiser<T> student,
                                  ProjectionHeads<T> heads, const Tensor<T>& images,
                                  const NoiseSchedule& schedule, const AlignmentConfig& cfg,
                                  Rng& rng, bool train_heads = true,
                                  const std::function<void(const DistillLogRow&)>& on_step = {}) {
  cfg.validate();
  DistillResult<T> r{std::move(student), std::move(heads), {}};
  r.log = detail::align_loop(teacher, r.student, r.heads, images, schedule, cfg, cfg.steps, true,
                             train_heads, "distill", rng, on_step);
  r.student.set_role(ParamRole::student_trainable);
  return r;
}

/// Trains only the heads against a frozen student.
template <class T>
ProjectionHeads<T> pretrain_heads(Denoiser<T>& teacher, Denoiser<T>& student,
                                  ProjectionHeads<T> heads, const Tensor<T>& images,
                                  const NoiseSchedule& schedule, const AlignmentConfig& cfg,
                                  Rng& rng, std::vector<DistillLogRow>* log = nullptr) {
  cfg.validate();
  if (!cfg.use_heads) throw std::invalid_argument("pretrain_heads: use_heads is off");
  const bool was_trainable = student.role() == ParamRole::student_trainable;
  auto rows = detail::align_loop(teacher, student, heads, images, schedule, cfg,
                                 cfg.pretrain_steps, false, true, "pretrain", rng, {});
  student.params().set_trainable(was_trainable);
  if (log) log->insert(log->end(), rows.begin(), rows.end());
  return heads;
}

/// Full consolidation: student copy, fresh heads, optional head pretraining,
/// then joint distillation.
template <class T>
DistillResult<T> consolidate(Denoiser<T>& teacher, const Tensor<T>& images,
                             const NoiseSchedule& schedule, const AlignmentConfig& cfg,
                             std::uint64_t seed,
                             const std::function<void(const DistillLogRow&)>& on_step = {}) {
  cfg.validate();
  Rng init_rng(derive_seed(seed, 0x4eadu));
  Rng train_rng(derive_seed(seed, 0xd157u));
  Denoiser<T> student = init_student_from_teacher(teacher);
  ProjectionHeads<T> heads = init_heads<T>(teacher.config(), cfg.head_config(), init_rng);
  std::vector<DistillLogRow> pre;
  if (cfg.head_pretraining != HeadPretraining::none)
    heads = pretrain_heads(teacher, student, std::move(heads), images, schedule, cfg, train_rng, &pre);
  const bool train_heads = cfg.head_pretraining != HeadPretraining::frozen_after_pretrain;
  auto r = run_distillation(teacher, std::move(student), std::move(heads), images, schedule, cfg,
                            train_rng, train_heads, on_step);
  r.heads.params().set_trainable(train_heads);
  r.log.insert(r.log.begin(), pre.begin(), pre.end());
  return r;
}

/// Held-out alignment per stratification bin: for each bin every image gets
/// a timestep and noise draw from a fixed seed; returns, per bin, the mean over
/// stages of the mean per-position cosine between (projected) student and
/// teacher features.
template <class T>
std::vector<double> heldout_bin_similarity(Denoiser<T>& teacher, Denoiser<T>& student,
                                           ProjectionHeads<T>* heads, const Tensor<T>& images,
                                           const NoiseSchedule& schedule, int bins,
                                           std::uint64_t seed, int chunk = 32) {
  std::vector<double> out(std::size_t(bins), 0.0);
  for (int bin = 0; bin < bins; ++bin) {
    Rng rng(derive_seed(seed, 0xb1, std::uint64_t(bin)));
    const auto [lo, hi] = stratum_bounds(bin, bins, schedule.T);
    double acc = 0.0;
    for (int start = 0; start < images.n(); start += chunk) {
      const int n = std::min(chunk, images.n() - start);
      Tensor<T> x0 = slice_batch(images, start, n);
      std::vector<int> ts;
      for (int i = 0; i < n; ++i) ts.push_back(int(rng.uniform_int(lo, hi)));
      Tensor<T> eps = gaussian_like<T>(x0.shape(), rng);
      auto target = detail::teacher_stack(teacher, forward_noise_batch(x0, eps, ts, schedule), ts);
      Tape<T> tape(false);
      auto s = detail::student_stack(tape, student, x0);
      std::vector<Var> p = heads ? heads->project(tape, s, ts) : s;
      for (std::size_t k = 0; k < p.size(); ++k) {
        Var c = ops::cosine_similarity_mean(tape, p[k], tape.constant(target[k]));
        acc += double(tape.value(c)[0]) * n / double(p.size());
      }
    }
    out[std::size_t(bin)] = acc / images.n();
  }
  return out;
}

}  // namespace cleandift
