// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/backbone.hpp"
#include "cleandift/container.hpp"
#include "cleandift/hash.hpp"
#include "cleandift/heads.hpp"
#include "cleandift/rng.hpp"
#include "cleandift/schedule.hpp"
#include "cleandift/tensor.hpp"

namespace cleandift {

enum class ModelRef { teacher, student };
enum class InputMode { clean_student, noisy_teacher, clean_teacher };

inline std::string to_string(ModelRef m) { return m == ModelRef::teacher ? "teacher" : "student"; }
inline std::string to_string(InputMode m) {
  switch (m) {
    case InputMode::clean_student: return "clean_student";
    case InputMode::noisy_teacher: return "noisy_teacher";
    default: return "clean_teacher";
  }
}

/// What to extract. Ensemble member k of a noisy request draws its noise from
/// seed noise_seed + k, so an n-member ensemble is the mean of the single-draw
/// stacks with seeds noise_seed .. noise_seed + n - 1. Per image, the noise is
/// further keyed by the image digest, so it does not depend on batch layout.
struct ExtractionRequest {
  ModelRef model = ModelRef::teacher;
  InputMode mode = InputMode::noisy_teacher;
  int t = 0;
  std::uint64_t noise_seed = 0;
  std::vector<int> stages;  // empty: every tap
  int ensemble_n = 1;

  static ExtractionRequest student(std::vector<int> stages = {}) {
    return {ModelRef::student, InputMode::clean_student, 0, 0, std::move(stages), 1};
  }
  static ExtractionRequest noisy(int t, std::uint64_t seed, int ensemble_n = 1,
                                 std::vector<int> stages = {}) {
    return {ModelRef::teacher, InputMode::noisy_teacher, t, seed, std::move(stages), ensemble_n};
  }
  static ExtractionRequest clean_control(int t, std::vector<int> stages = {}) {
    return {ModelRef::teacher, InputMode::clean_teacher, t, 0, std::move(stages), 1};
  }

  void validate(int max_t) const {
    if (mode == InputMode::clean_student && model != ModelRef::student)
      throw std::invalid_argument("clean_student mode requires the student model");
    if (mode != InputMode::clean_student && model != ModelRef::teacher)
      throw std::invalid_argument(to_string(mode) + " mode requires the teacher model");
    if (ensemble_n < 1) throw std::invalid_argument("ensemble_n must be >= 1");
    if (ensemble_n > 1 && mode != InputMode::noisy_teacher)
      throw std::invalid_argument("ensembling applies to noisy_teacher extraction only");
    if (mode != InputMode::clean_student && (t < 0 || t > max_t))
      throw std::out_of_range("extraction t=" + std::to_string(t) + " outside [0, " +
                              std::to_string(max_t) + "]");
  }

  json to_json() const {
    return {{"model", to_string(model)},
            {"mode", to_string(mode)},
            {"t", mode == InputMode::clean_student ? 0 : t},
            {"noise_seed", mode == InputMode::noisy_teacher ? noise_seed : 0},
            {"stages", stages},
            {"ensemble_n", ensemble_n}};
  }
};

inline std::string image_digest(const float* data, std::int64_t count) {
  return Sha256().update(data, std::size_t(count) * sizeof(float)).hex();
}

inline std::uint64_t digest_prefix(const std::string& hex) {
  return std::stoull(hex.substr(0, 16), nullptr, 16);
}

/// Instrumentation: per-image backbone forward passes and head evaluations.
struct FeatureCounters {
  std::atomic<std::int64_t> backbone_forwards{0};
  std::atomic<std::int64_t> head_evals{0};
  std::atomic<std::int64_t> cache_hits{0};
  std::atomic<std::int64_t> cache_misses{0};

  void reset() {
    backbone_forwards = 0;
    head_evals = 0;
    cache_hits = 0;
    cache_misses = 0;
  }
};

/// Bilinear lookup with align_corners=false: cell (i, j) has its centre at
/// ((j + 0.5) / W, (i + 0.5) / H); coordinates outside the outermost centres
/// clamp to the edge cells.
template <class T>
std::vector<float> sample_at_point(const Tensor<T>& map, int n, double u, double v) {
  if (!(u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0))
    throw std::out_of_range("sample_at_point: (u, v) must lie in [0, 1]");
  const int H = map.h(), W = map.w(), C = map.c();
  const double fx = std::clamp(u * W - 0.5, 0.0, double(W - 1));
  const double fy = std::clamp(v * H - 0.5, 0.0, double(H - 1));
  const int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
  const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  const double ax = fx - x0, ay = fy - y0;
  std::vector<float> out(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    const double top = (1 - ax) * double(map.at(n, c, y0, x0)) + ax * double(map.at(n, c, y0, x1));
    const double bot = (1 - ax) * double(map.at(n, c, y1, x0)) + ax * double(map.at(n, c, y1, x1));
    out[std::size_t(c)] = float((1 - ay) * top + ay * bot);
  }
  return out;
}

enum class PoolMethod { mean, max };

inline PoolMethod parse_pool_method(const std::string& s) {
  if (s == "mean") return PoolMethod::mean;
  if (s == "max") return PoolMethod::max;
  throw std::invalid_argument("unknown pool method '" + s + "'");
}

/// Spatial mean or max of one stage for sample n.
template <class T>
std::vector<float> pool(const FeatureStack<T>& stack, int stage_id, PoolMethod method, int n = 0) {
  const auto& m = stack.stage(stage_id).values;
  const std::int64_t P = m.shape().plane();
  std::vector<float> out(static_cast<std::size_t>(m.c()));
  for (int c = 0; c < m.c(); ++c) {
    const T* p = m.sample(n) + std::int64_t(c) * P;
    if (method == PoolMethod::mean) {
      double s = 0;
      for (std::int64_t i = 0; i < P; ++i) s += double(p[i]);
      out[std::size_t(c)] = float(s / double(P));
    } else {
      out[std::size_t(c)] = float(*std::max_element(p, p + P));
    }
  }
  return out;
}

/// Keeps only the listed stages (all when `stages` is empty).
template <class T>
FeatureStack<T> select_stages(FeatureStack<T> s, const std::vector<int>& stages) {
  if (stages.empty()) return s;
  FeatureStack<T> r;
  r.provenance = s.provenance;
  for (int id : stages) {
    auto it = std::find_if(s.entries.begin(), s.entries.end(),
                           [&](const FeatureMap<T>& e) { return e.stage_id == id; });
    if (it == s.entries.end()) throw std::out_of_range("no stage " + std::to_string(id));
    r.entries.push_back(std::move(*it));
  }
  return r;
}

/// Batch slice of every stage.
template <class T>
FeatureStack<T> slice_stack(const FeatureStack<T>& s, int begin, int count) {
  FeatureStack<T> r;
  r.provenance = s.provenance;
  for (const auto& e : s.entries) r.entries.push_back({e.stage_id, slice_batch(e.values, begin, count)});
  return r;
}

template <class T>
FeatureStack<T> concat_stacks(const std::vector<FeatureStack<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_stacks: nothing to concatenate");
  FeatureStack<T> r;
  r.provenance = parts.front().provenance;
  for (std::size_t k = 0; k < parts.front().entries.size(); ++k) {
    std::vector<Tensor<T>> v;
    for (const auto& p : parts) v.push_back(p.entries[k].values);
    r.entries.push_back({parts.front().entries[k].stage_id, stack_batch<T>(v)});
  }
  return r;
}

/// Content-addressed disk cache, one container file per entry. Writes go
/// through a temporary file and a rename; concurrent requests for one key
/// compute it once.
class FeatureCache {
 public:
  explicit FeatureCache(std::filesystem::path dir, std::ostream& warn = std::cerr)
      : dir_(std::move(dir)), warn_(&warn) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path_for(const std::string& key) const { return dir_ / (key + ".cdft"); }

  /// Keys touched since construction, for run manifests.
  std::vector<std::string> touched() const {
    std::lock_guard lk(mu_);
    return {touched_.begin(), touched_.end()};
  }

  FeatureStack<float> get_or_compute(const std::string& key, const json& meta,
                                     const std::function<FeatureStack<float>()>& compute,
                                     FeatureCounters* counters = nullptr) {
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] { return !in_flight_.count(key); });
      in_flight_.insert(key);
      touched_.insert(key);
    }
    struct Release {
      FeatureCache* c;
      const std::string& k;
      ~Release() {
        {
          std::lock_guard lk(c->mu_);
          c->in_flight_.erase(k);
        }
        c->cv_.notify_all();
      }
    } release{this, key};
    const auto path = path_for(key);
    if (std::filesystem::exists(path)) {
      try {
        FeatureStack<float> s = decode(read_container(path), key);
        if (counters) ++counters->cache_hits;
        return s;
      } catch (const std::exception& e) {
        *warn_ << "warning: corrupt feature cache entry " << path.string() << " (" << e.what()
               << "); recomputing\n";
      }
    }
    if (counters) ++counters->cache_misses;
    FeatureStack<float> s = compute();
    std::vector<NamedTensor> ts;
    json stages = json::array();
    for (const auto& e : s.entries) {
      ts.push_back({"stage" + std::to_string(e.stage_id), e.values});
      stages.push_back(e.stage_id);
    }
    json m = meta;
    m["key"] = key;
    m["stages"] = stages;
    m["provenance"] = provenance_json(s.provenance);
    write_container(path, "features", m, ts);
    return s;
  }

  static json provenance_json(const Provenance& p) {
    json j{{"kind", p.kind == InputKind::clean ? "clean" : "noisy"}, {"t", p.t}};
    j["noise_seed"] = p.noise_seed ? json(*p.noise_seed) : json(nullptr);
    j["projected_t"] = p.projected_t ? json(*p.projected_t) : json(nullptr);
    return j;
  }

 private:
  static FeatureStack<float> decode(const Container& c, const std::string& key) {
    if (c.component != "features" || c.header.value("key", "") != key)
      throw ContainerError("entry does not match its key");
    FeatureStack<float> s;
    const json& p = c.header.at("provenance");
    s.provenance.kind = p.at("kind") == "clean" ? InputKind::clean : InputKind::noisy;
    s.provenance.t = p.at("t");
    if (!p.at("noise_seed").is_null()) s.provenance.noise_seed = p.at("noise_seed").get<std::uint64_t>();
    if (!p.at("projected_t").is_null()) s.provenance.projected_t = p.at("projected_t").get<int>();
    for (int id : c.header.at("stages").get<std::vector<int>>())
      s.entries.push_back({id, c.get("stage" + std::to_string(id))});
    return s;
  }

  std::filesystem::path dir_;
  std::ostream* warn_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::set<std::string> in_flight_;
  std::set<std::string> touched_;
};

/// Uniform extraction over a frozen teacher and a student (plus optional
/// projection heads), with optional caching keyed per image.
class FeatureService {
 public:
  FeatureService(Denoiser<float>* teacher, Denoiser<float>* student, NoiseSchedule schedule,
                 FeatureCache* cache = nullptr, ProjectionHeads<float>* heads = nullptr)
      : teacher_(teacher), student_(student), heads_(heads), schedule_(std::move(schedule)),
        cache_(cache) {
    if (teacher_) teacher_sum_ = teacher_->params().checksum();
    if (student_) student_sum_ = student_->params().checksum();
    if (heads_) heads_sum_ = heads_->params().checksum();
  }

  FeatureCounters& counters() { return counters_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// Features for every image of `images` ([N, C, S, S]).
  FeatureStack<float> extract(const ExtractionRequest& req, const Tensor<float>& images) {
    req.validate(schedule_.T);
    model_for(req);
    if (!cache_) return extract_uncached(req, images);
    std::vector<FeatureStack<float>> parts;
    for (int i = 0; i < images.n(); ++i) {
      Tensor<float> one = slice_batch(images, i, 1);
      const std::string digest = image_digest(one.data(), one.numel());
      const json rq = req.to_json();
      const std::string key = cache_key(rq, digest, model_checksum(req.model));
      parts.push_back(cache_->get_or_compute(
          key, {{"request", rq}, {"image", digest}, {"model", model_checksum(req.model)}},
          [&] { return extract_uncached(req, one); }, &counters_));
    }
    return concat_stacks(parts);
  }

  /// Projects a student stack at timestep t through the heads.
  FeatureStack<float> project_at_timestep(const FeatureStack<float>& student_stack, int t) {
    if (!heads_) throw std::logic_error("project_at_timestep: no projection heads loaded");
    if (t < 0 || t > schedule_.T) throw std::out_of_range("project_at_timestep: t out of range");
    counters_.head_evals += student_stack.entries.front().values.n();
    return project_features(*heads_, student_stack, t);
  }

  static std::string cache_key(const json& request, const std::string& digest,
                               const std::string& model_sum) {
    return Sha256().update(request.dump()).update(digest).update(model_sum).hex();
  }

  std::string model_checksum(ModelRef m) const {
    return m == ModelRef::teacher ? teacher_sum_ : student_sum_;
  }

 private:
  Denoiser<float>& model_for(const ExtractionRequest& req) {
    Denoiser<float>* m = req.model == ModelRef::teacher ? teacher_ : student_;
    if (!m) throw std::logic_error("extract: " + to_string(req.model) + " model not loaded");
    return *m;
  }

  FeatureStack<float> forward(Denoiser<float>& m, const Tensor<float>& x, int t, Provenance p,
                              const std::vector<int>& stages) {
    // One image per pass: vectorized kernels round differently at different
    // offsets inside a batch, and cached and uncached paths must agree exactly.
    std::vector<FeatureStack<float>> parts;
    for (int b = 0; b < x.n(); ++b) {
      auto r = denoise_forward(m, slice_batch(x, b, 1), {t}, true, schedule_.T, p, false);
      ++counters_.backbone_forwards;
      parts.push_back(select_stages(std::move(*r.features), stages));
    }
    return concat_stacks(parts);
  }

  FeatureStack<float> extract_uncached(const ExtractionRequest& req, const Tensor<float>& images) {
    Denoiser<float>& m = model_for(req);
    if (req.mode == InputMode::clean_student)
      return forward(m, images, 0, Provenance{InputKind::clean, 0, std::nullopt, std::nullopt},
                     req.stages);
    if (req.mode == InputMode::clean_teacher)
      return forward(m, images, req.t, Provenance{InputKind::clean, req.t, std::nullopt, std::nullopt},
                     req.stages);
    std::vector<std::uint64_t> digests;
    for (int i = 0; i < images.n(); ++i)
      digests.push_back(digest_prefix(image_digest(images.sample(i), images.sample_size())));
    FeatureStack<float> acc;
    for (int k = 0; k < req.ensemble_n; ++k) {
      const std::uint64_t seed = req.noise_seed + std::uint64_t(k);
      Tensor<float> eps(images.shape(), Tensor<float>::Uninitialized{});
      for (int i = 0; i < images.n(); ++i) {
        Rng rng(derive_seed(seed, digests[std::size_t(i)]));
        float* e = eps.sample(i);
        for (std::int64_t j = 0; j < images.sample_size(); ++j) e[j] = float(rng.normal());
      }
      Tensor<float> xt = forward_noise_batch(images, eps, std::vector<int>(std::size_t(images.n()), req.t),
                                             schedule_);
      FeatureStack<float> s =
          forward(m, xt, req.t, Provenance{InputKind::noisy, req.t, seed, std::nullopt}, req.stages);
      if (k == 0) {
        acc = std::move(s);
      } else {
        for (std::size_t e = 0; e < acc.entries.size(); ++e) {
          auto& a = acc.entries[e].values;
          const auto& b = s.entries[e].values;
          for (std::int64_t j = 0; j < a.numel(); ++j) a[j] += b[j];
        }
      }
    }
    if (req.ensemble_n > 1) {
      const float n = float(req.ensemble_n);
      for (auto& e : acc.entries)
        for (auto& v : e.values.values()) v /= n;
    }
    acc.provenance.noise_seed = req.noise_seed;
    return acc;
  }

  Denoiser<float>* teacher_;
  Denoiser<float>* student_;
  ProjectionHeads<float>* heads_;
  NoiseSchedule schedule_;
  FeatureCache* cache_;
  FeatureCounters counters_;
  std::string teacher_sum_, student_sum_, heads_sum_;
};

}  // namespace cleandift
