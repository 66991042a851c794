// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/data.hpp"
#include "cleandift/features.hpp"

namespace cleandift {

struct Point2 {
  double x = 0, y = 0;
};

/// Cosine-similarity argmax of `source` over the positions of sample n of
/// `target`. Ties go to the lowest row-major index; zero vectors score 0. The
/// winning cell maps to its pixel centre at image resolution.
inline Point2 match_keypoint(const std::vector<float>& source, const Tensor<float>& target, int n,
                             int image_w, int image_h) {
  const int C = target.c(), H = target.h(), W = target.w();
  if (int(source.size()) != C) throw ShapeError("match_keypoint: channel mismatch");
  const std::int64_t P = std::int64_t(H) * W;
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> M(
      target.sample(n), C, P);
  const Eigen::VectorXd s = Eigen::Map<const Eigen::VectorXf>(source.data(), C).cast<double>();
  const Eigen::MatrixXd Md = M.cast<double>();
  const Eigen::RowVectorXd dots = s.transpose() * Md;
  const Eigen::RowVectorXd norms = Md.colwise().norm();
  const double sn = s.norm();
  std::int64_t best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::int64_t p = 0; p < P; ++p) {
    const double d = sn * norms(p);
    const double sim = d > 0 ? dots(p) / d : 0.0;
    if (sim > best_sim) {
      best_sim = sim;
      best = p;
    }
  }
  const int gy = int(best / W), gx = int(best % W);
  return {(gx + 0.5) * image_w / W, (gy + 0.5) * image_h / H};
}

enum class PCKMode { img, bbox };

inline PCKMode parse_pck_mode(const std::string& s) {
  if (s == "img") return PCKMode::img;
  if (s == "bbox") return PCKMode::bbox;
  throw std::invalid_argument("unknown PCK mode '" + s + "'");
}

struct PCKResult {
  std::vector<bool> hits_img, hits_bbox;
  double threshold_img = 0, threshold_bbox = 0;
  double alpha = 0.1;
  std::int64_t n() const { return std::int64_t(hits_img.size()); }
  std::int64_t count_img() const { return std::count(hits_img.begin(), hits_img.end(), true); }
  std::int64_t count_bbox() const { return std::count(hits_bbox.begin(), hits_bbox.end(), true); }
  double pck(PCKMode m) const {
    return double(m == PCKMode::img ? count_img() : count_bbox()) / double(n());
  }
};

/// A hit is a Euclidean distance <= alpha * max(H, W) of the image (img) or
/// of the target bounding box (bbox).
inline PCKResult compute_pck(const std::vector<Point2>& predictions,
                             const CorrespondenceAnnotation& a, double alpha = 0.1) {
  if (a.keypoints.empty()) throw std::invalid_argument("compute_pck: empty keypoint set");
  if (predictions.size() != a.keypoints.size())
    throw std::invalid_argument("compute_pck: prediction count differs from keypoint count");
  PCKResult r;
  r.alpha = alpha;
  r.threshold_img = alpha * std::max(a.width, a.height);
  r.threshold_bbox = alpha * std::max(a.target_bbox.w, a.target_bbox.h);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = std::hypot(predictions[i].x - a.keypoints[i].tx, predictions[i].y - a.keypoints[i].ty);
    r.hits_img.push_back(d <= r.threshold_img);
    r.hits_bbox.push_back(d <= r.threshold_bbox);
  }
  return r;
}

/// Per-point aggregation over many annotations, overall and per category.
struct PCKAggregate {
  struct Counts {
    std::int64_t hits_img = 0, hits_bbox = 0, total = 0;
    double pck_img() const { return total ? double(hits_img) / double(total) : 0.0; }
    double pck_bbox() const { return total ? double(hits_bbox) / double(total) : 0.0; }
  };
  Counts all;
  std::map<int, Counts> per_category;

  void add(const PCKResult& r, int category) {
    for (Counts* c : {&all, &per_category[category]}) {
      c->hits_img += r.count_img();
      c->hits_bbox += r.count_bbox();
      c->total += r.n();
    }
  }
};

/// Predicted target locations for every keypoint of `a`, given per-image
/// feature maps of the chosen stage.
inline std::vector<Point2> predict_keypoints(const CorrespondenceAnnotation& a,
                                             const Tensor<float>& maps, int src_index,
                                             int tgt_index) {
  std::vector<Point2> out;
  for (const auto& k : a.keypoints) {
    auto v = sample_at_point(maps, src_index, std::clamp(k.sx / a.width, 0.0, 1.0),
                             std::clamp(k.sy / a.height, 0.0, 1.0));
    out.push_back(match_keypoint(v, maps, tgt_index, a.width, a.height));
  }
  return out;
}

/// Scores every pair of `pairs` against a stage map holding all its images.
inline PCKAggregate evaluate_pairs(const Dataset& pairs, const Tensor<float>& maps, double alpha) {
  if (pairs.pairs.empty()) throw std::invalid_argument("evaluate_pairs: dataset has no pairs");
  if (maps.n() != pairs.size()) throw ShapeError("evaluate_pairs: one map per image expected");
  PCKAggregate agg;
  for (const auto& a : pairs.pairs) {
    if (a.keypoints.empty()) continue;
    auto pred = predict_keypoints(a, maps, pairs.index_of(a.source), pairs.index_of(a.target));
    agg.add(compute_pck(pred, a, alpha), a.category);
  }
  return agg;
}

struct SweepRow {
  std::string mode;
  int t = 0;
  double pck_img = 0, pck_bbox = 0;
  std::int64_t n_keypoints = 0;
};

struct CategoryRow {
  std::string mode;
  int t = 0;
  int category = 0;
  double pck_img = 0, pck_bbox = 0;
  std::int64_t n_keypoints = 0;
};

struct SweepOptions {
  std::vector<int> timesteps;
  int stage = 2;
  double alpha = 0.1;
  std::uint64_t noise_seed = 0;
  int ensemble_n = 1;
  bool include_student = true;
  bool include_control = true;
};

/// Noisy teacher, clean-input teacher control and the (timestep-free)
/// student over a list of timesteps. The student is evaluated once and its
/// row repeated per t.
inline std::vector<SweepRow> timestep_sweep(FeatureService& svc, const Dataset& pairs,
                                            const SweepOptions& o,
                                            std::vector<CategoryRow>* per_category = nullptr) {
  if (o.timesteps.empty()) throw std::invalid_argument("timestep_sweep: no timesteps");
  std::vector<SweepRow> rows;
  auto score = [&](const ExtractionRequest& rq) {
    auto stack = svc.extract(rq, pairs.images);
    return evaluate_pairs(pairs, stack.stage(o.stage).values, o.alpha);
  };
  auto emit = [&](const std::string& mode, int t, const PCKAggregate& a) {
    rows.push_back({mode, t, a.all.pck_img(), a.all.pck_bbox(), a.all.total});
    if (per_category)
      for (const auto& [c, n] : a.per_category)
        per_category->push_back({mode, t, c, n.pck_img(), n.pck_bbox(), n.total});
  };
  PCKAggregate student;
  if (o.include_student) student = score(ExtractionRequest::student({o.stage}));
  for (int t : o.timesteps) {
    emit("noisy_teacher", t, score(ExtractionRequest::noisy(t, o.noise_seed, o.ensemble_n, {o.stage})));
    if (o.include_control) emit("clean_teacher_control", t, score(ExtractionRequest::clean_control(t, {o.stage})));
    if (o.include_student) emit("student", t, student);
  }
  return rows;
}

}  // namespace cleandift
