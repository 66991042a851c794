// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/container.hpp"
#include "cleandift/data.hpp"
#include "cleandift/features.hpp"
#include "cleandift/rng.hpp"

namespace cleandift {

// ---- kNN -------------------------------------------------------------------

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline int knn_vote(const std::vector<std::pair<double, int>>& neighbours) {
  std::map<int, std::pair<int, double>> votes;  // label -> (count, summed similarity)
  for (const auto& [sim, label] : neighbours) {
    auto& v = votes[label];
    ++v.first;
    v.second += sim;
  }
  int best = votes.begin()->first;
  for (const auto& [label, v] : votes) {
    const auto& b = votes[best];
    if (v.first > b.first || (v.first == b.first && v.second > b.second)) best = label;
  }
  return best;
}

}  // namespace detail

/// Majority label among the k training rows most cosine-similar to `query`.
/// Neighbour ranking breaks similarity ties by lower row index; vote ties go
/// to the larger summed similarity, then the lower label.
inline int knn_classify(const RowMatrixF& train, const std::vector<int>& labels,
                        const std::vector<float>& query, int k = 10) {
  if (train.rows() == 0) throw std::invalid_argument("knn_classify: empty training set");
  if (int(labels.size()) != train.rows()) throw std::invalid_argument("knn_classify: label count");
  if (k < 1 || k > train.rows()) throw std::invalid_argument("knn_classify: k out of range");
  if (int(query.size()) != train.cols()) throw ShapeError("knn_classify: dimension mismatch");
  const Eigen::VectorXd q = Eigen::Map<const Eigen::VectorXf>(query.data(), train.cols()).cast<double>();
  const Eigen::MatrixXd X = train.cast<double>();
  const Eigen::VectorXd dots = X * q;
  const Eigen::VectorXd norms = X.rowwise().norm();
  const double qn = q.norm();
  std::vector<std::pair<double, int>> sims(static_cast<std::size_t>(train.rows()));
  for (Eigen::Index i = 0; i < train.rows(); ++i) {
    const double d = qn * norms(i);
    sims[std::size_t(i)] = {d > 0 ? dots(i) / d : 0.0, int(i)};
  }
  std::partial_sort(sims.begin(), sims.begin() + k, sims.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  std::vector<std::pair<double, int>> nb;
  for (int i = 0; i < k; ++i) nb.push_back({sims[std::size_t(i)].first, labels[std::size_t(sims[std::size_t(i)].second)]});
  return detail::knn_vote(nb);
}

inline double knn_accuracy(const RowMatrixF& train, const std::vector<int>& train_labels,
                           const RowMatrixF& test, const std::vector<int>& test_labels, int k = 10) {
  if (test.rows() == 0) throw std::invalid_argument("knn_accuracy: empty test set");
  int correct = 0;
  for (Eigen::Index i = 0; i < test.rows(); ++i) {
    std::vector<float> q(test.row(i).data(), test.row(i).data() + test.cols());
    correct += knn_classify(train, train_labels, q, k) == test_labels[std::size_t(i)];
  }
  return double(correct) / double(test.rows());
}

/// Pooled vectors of one stage, one row per image.
inline RowMatrixF pooled_rows(const FeatureStack<float>& stack, int stage, PoolMethod m) {
  const auto& v = stack.stage(stage).values;
  RowMatrixF out(v.n(), v.c());
  for (int n = 0; n < v.n(); ++n) {
    auto p = pool(stack, stage, m, n);
    for (int c = 0; c < v.c(); ++c) out(n, c) = p[std::size_t(c)];
  }
  return out;
}

// ---- depth binning and metrics ---------------------------------------------

struct DepthBinning {
  int num_bins = 256;
  double depth_min = kDepthMin;
  double depth_max = kDepthMax;

  double width() const { return (depth_max - depth_min) / num_bins; }
  double center(int j) const { return depth_min + (j + 0.5) * width(); }
  int bin_of(double d) const {
    return std::clamp(int(std::floor((d - depth_min) / width())), 0, num_bins - 1);
  }
  void validate() const {
    if (num_bins < 1 || !(depth_max > depth_min)) throw std::invalid_argument("DepthBinning: bad range");
  }
};

/// Expected depth under each row of `probs` ([positions, bins]).
inline std::vector<double> depth_decode(const Eigen::MatrixXd& probs, const DepthBinning& b) {
  if (probs.cols() != b.num_bins) throw ShapeError("depth_decode: bin count mismatch");
  std::vector<double> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double s = 0, e = 0;
    for (int j = 0; j < b.num_bins; ++j) {
      const double p = probs(i, j);
      if (!(p >= 0.0)) throw std::invalid_argument("depth_decode: negative or non-finite probability");
      s += p;
      e += p * b.center(j);
    }
    if (std::abs(s - 1.0) > 1e-5) throw std::invalid_argument("depth_decode: row does not sum to 1");
    out[std::size_t(i)] = e;
  }
  return out;
}

inline double depth_rmse(const std::vector<double>& pred, const std::vector<double>& truth,
                         const std::vector<bool>& valid) {
  if (pred.size() != truth.size() || pred.size() != valid.size())
    throw ShapeError("depth_rmse: misaligned inputs");
  double s = 0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (valid[i]) {
      const double d = pred[i] - truth[i];
      s += d * d;
      ++n;
    }
  if (n == 0) throw std::invalid_argument("depth_rmse: empty mask");
  return std::sqrt(s / double(n));
}

struct MIoUResult {
  double miou = 0;
  std::vector<double> iou;      // per class; NaN when absent from ground truth
  std::vector<bool> present;
};

/// Accumulates intersections and unions over a whole evaluation set.
struct IoUAccumulator {
  int num_classes;
  std::vector<std::int64_t> inter, uni, gt_count;
  explicit IoUAccumulator(int k) : num_classes(k), inter(std::size_t(k)), uni(std::size_t(k)), gt_count(std::size_t(k)) {}

  void add(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size()) throw ShapeError("segmentation_miou: misaligned inputs");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int p = pred[i], g = truth[i];
      if (p < 0 || p >= num_classes || g < 0 || g >= num_classes)
        throw std::out_of_range("segmentation_miou: class id out of range");
      ++gt_count[std::size_t(g)];
      if (p == g) {
        ++inter[std::size_t(g)];
        ++uni[std::size_t(g)];
      } else {
        ++uni[std::size_t(g)];
        ++uni[std::size_t(p)];
      }
    }
  }

  MIoUResult result() const {
    MIoUResult r;
    double s = 0;
    int n = 0;
    for (int c = 0; c < num_classes; ++c) {
      const bool pres = gt_count[std::size_t(c)] > 0;
      r.present.push_back(pres);
      r.iou.push_back(pres ? double(inter[std::size_t(c)]) / double(uni[std::size_t(c)])
                           : std::numeric_limits<double>::quiet_NaN());
      if (pres) {
        s += r.iou.back();
        ++n;
      }
    }
    if (n == 0) throw std::invalid_argument("segmentation_miou: no ground truth");
    r.miou = s / n;
    return r;
  }
};

inline MIoUResult segmentation_miou(const std::vector<int>& pred, const std::vector<int>& truth,
                                    int num_classes) {
  IoUAccumulator acc(num_classes);
  acc.add(pred, truth);
  return acc.result();
}

/// Nearest-neighbour upsampling of an h x w grid to H x W.
template <class V>
std::vector<V> upsample_nearest(const std::vector<V>& grid, int h, int w, int H, int W) {
  std::vector<V> out(std::size_t(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      out[std::size_t(y) * W + x] = grid[std::size_t(y * h / H) * w + std::size_t(x * w / W)];
  return out;
}

/// Target resampling to feature resolution: class ids take the pixel at each
/// cell's centre, depths average over the cell.
inline std::vector<int> downsample_labels(const std::vector<int>& m, int S, int h, int w) {
  std::vector<int> out(std::size_t(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const int y = std::min(S - 1, int((i + 0.5) * S / h)), x = std::min(S - 1, int((j + 0.5) * S / w));
      out[std::size_t(i) * w + j] = m[std::size_t(y) * S + x];
    }
  return out;
}

inline std::vector<double> downsample_depth(const std::vector<float>& d, int S, int h, int w) {
  if (S % h || S % w) throw ShapeError("downsample_depth: feature grid must divide the image");
  const int fy = S / h, fx = S / w;
  std::vector<double> out(std::size_t(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double s = 0;
      for (int y = 0; y < fy; ++y)
        for (int x = 0; x < fx; ++x) s += d[std::size_t(i * fy + y) * S + std::size_t(j * fx + x)];
      out[std::size_t(i) * w + j] = s / (fx * fy);
    }
  return out;
}

// ---- linear probes ---------------------------------------------------------

enum class ProbeTask { depth, segmentation };

inline std::string to_string(ProbeTask t) { return t == ProbeTask::depth ? "depth" : "segmentation"; }
inline ProbeTask parse_probe_task(const std::string& s) {
  if (s == "depth") return ProbeTask::depth;
  if (s == "seg" || s == "segmentation") return ProbeTask::segmentation;
  throw std::invalid_argument("unknown probe task '" + s + "'");
}

struct ProbeConfig {
  int epochs = 4;
  int batch_positions = 2048;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
};

/// Per-position linear classifier over standardized channels.
struct LinearProbe {
  ProbeTask task = ProbeTask::segmentation;
  DepthBinning binning;
  Eigen::VectorXf mean, inv_std;  // per channel
  Eigen::MatrixXf weight;         // [outputs, channels]
  Eigen::VectorXf bias;           // [outputs]

  int outputs() const { return int(weight.rows()); }
  int channels() const { return int(weight.cols()); }

  /// Logits for positions given as rows of raw features.
  Eigen::MatrixXf logits(const RowMatrixF& x) const {
    if (x.cols() != channels())
      throw ShapeError("probe expects " + std::to_string(channels()) + " channels, got " +
                       std::to_string(x.cols()));
    RowMatrixF z = (x.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
    Eigen::MatrixXf l = z * weight.transpose();
    l.rowwise() += bias.transpose();
    return l;
  }
};

/// Rows are positions (n, y, x) in that order; columns are channels.
inline RowMatrixF positions_matrix(const Tensor<float>& maps) {
  const std::int64_t P = maps.shape().plane();
  RowMatrixF out(maps.n() * P, maps.c());
  for (int n = 0; n < maps.n(); ++n)
    for (int c = 0; c < maps.c(); ++c) {
      const float* src = maps.sample(n) + c * P;
      for (std::int64_t p = 0; p < P; ++p) out(n * P + p, c) = src[p];
    }
  return out;
}

inline Eigen::MatrixXf softmax_rows(const Eigen::MatrixXf& l) {
  Eigen::MatrixXf p = (l.colwise() - l.rowwise().maxCoeff()).array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

class ProbeDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Softmax cross-entropy on integer targets per position, mini-batch Adam with
/// a fixed budget. Returns the probe and the mean loss of each epoch.
inline LinearProbe train_linear_probe(const RowMatrixF& x, const std::vector<int>& targets,
                                      ProbeTask task, int num_outputs, const ProbeConfig& cfg,
                                      std::vector<double>* epoch_loss = nullptr) {
  if (x.rows() == 0 || x.rows() != Eigen::Index(targets.size()))
    throw std::invalid_argument("train_linear_probe: features and targets misaligned");
  for (int t : targets)
    if (t < 0 || t >= num_outputs) throw std::out_of_range("train_linear_probe: target id");
  const Eigen::Index N = x.rows(), C = x.cols();
  LinearProbe pr;
  pr.task = task;
  pr.mean = x.colwise().mean().transpose();
  pr.inv_std.resize(C);
  for (Eigen::Index c = 0; c < C; ++c) {
    const double v = (x.col(c).array() - pr.mean(c)).square().mean();
    pr.inv_std(c) = float(1.0 / std::sqrt(v + 1e-6));
  }
  pr.weight = Eigen::MatrixXf::Zero(num_outputs, C);
  pr.bias = Eigen::VectorXf::Zero(num_outputs);
  Eigen::MatrixXf mw = pr.weight, vw = pr.weight;
  Eigen::VectorXf mb = pr.bias, vb = pr.bias;
  const RowMatrixF z = (x.rowwise() - pr.mean.transpose()).array().rowwise() * pr.inv_std.transpose().array();
  Rng rng(derive_seed(cfg.seed, 0x9b0be));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  const int B = std::max(1, cfg.batch_positions);
  std::int64_t step = 0;
  const double b1 = 0.9, b2 = 0.999;
  for (int e = 0; e < cfg.epochs; ++e) {
    for (Eigen::Index i = N - 1; i > 0; --i)
      std::swap(order[std::size_t(i)], order[std::size_t(rng.uniform_int(0, i + 1))]);
    double loss_sum = 0;
    for (Eigen::Index s = 0; s < N; s += B) {
      const Eigen::Index nb = std::min<Eigen::Index>(B, N - s);
      RowMatrixF xb(nb, C);
      for (Eigen::Index r = 0; r < nb; ++r) xb.row(r) = z.row(order[std::size_t(s + r)]);
      Eigen::MatrixXf l = xb * pr.weight.transpose();
      l.rowwise() += pr.bias.transpose();
      Eigen::MatrixXf p = softmax_rows(l);
      double lb = 0;
      for (Eigen::Index r = 0; r < nb; ++r) {
        const int t = targets[std::size_t(order[std::size_t(s + r)])];
        lb -= std::log(std::max(1e-30, double(p(r, t))));
        p(r, t) -= 1.0f;
      }
      if (!std::isfinite(lb)) throw ProbeDivergence("train_linear_probe: non-finite loss");
      loss_sum += lb;
      p /= float(nb);
      const Eigen::MatrixXf gw = p.transpose() * xb;
      const Eigen::VectorXf gb = p.colwise().sum().transpose();
      ++step;
      const double c1 = 1 - std::pow(b1, double(step)), c2 = 1 - std::pow(b2, double(step));
      const float lr = float(cfg.learning_rate * std::sqrt(c2) / c1);
      mw = b1 * mw + (1 - b1) * gw;
      vw = b2 * vw + (1 - b2) * gw.cwiseAbs2();
      mb = b1 * mb + (1 - b1) * gb;
      vb = b2 * vb + (1 - b2) * gb.cwiseAbs2();
      pr.weight.array() -= lr * mw.array() / (vw.array().sqrt() + 1e-8f);
      pr.bias.array() -= lr * mb.array() / (vb.array().sqrt() + 1e-8f);
    }
    if (epoch_loss) epoch_loss->push_back(loss_sum / double(N));
  }
  return pr;
}

/// Mean cross-entropy of a probe on labelled positions.
inline double probe_loss(const LinearProbe& pr, const RowMatrixF& x, const std::vector<int>& targets) {
  Eigen::MatrixXf p = softmax_rows(pr.logits(x));
  double s = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) s -= std::log(std::max(1e-30, double(p(r, targets[std::size_t(r)]))));
  return s / double(x.rows());
}

/// Per-position argmax class (ties to the lower id) or decoded depth.
inline std::vector<int> probe_predict_labels(const LinearProbe& pr, const RowMatrixF& x) {
  Eigen::MatrixXf l = pr.logits(x);
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Eigen::Index j;
    l.row(r).maxCoeff(&j);
    out[std::size_t(r)] = int(j);
  }
  return out;
}

inline std::vector<double> probe_predict_depth(const LinearProbe& pr, const RowMatrixF& x) {
  return depth_decode(softmax_rows(pr.logits(x)).cast<double>(), pr.binning);
}

/// Probe targets for every image of `d` at an h x w feature grid.
inline std::vector<int> probe_targets(const Dataset& d, ProbeTask task, int h, int w,
                                      const DepthBinning& b) {
  std::vector<int> out;
  out.reserve(std::size_t(d.size()) * h * w);
  for (int i = 0; i < d.size(); ++i) {
    if (task == ProbeTask::segmentation) {
      auto m = downsample_labels(d.masks[std::size_t(i)], d.canvas, h, w);
      out.insert(out.end(), m.begin(), m.end());
    } else {
      for (double v : downsample_depth(d.depths[std::size_t(i)], d.canvas, h, w)) out.push_back(b.bin_of(v));
    }
  }
  return out;
}

inline LinearProbe fit_probe(const Tensor<float>& maps, const Dataset& d, ProbeTask task,
                             const ProbeConfig& cfg, const DepthBinning& b = {}) {
  if (maps.n() != d.size()) throw ShapeError("fit_probe: one map per image expected");
  auto targets = probe_targets(d, task, maps.h(), maps.w(), b);
  LinearProbe p = train_linear_probe(positions_matrix(maps), targets, task,
                                     task == ProbeTask::depth ? b.num_bins : kNumClasses, cfg);
  p.binning = b;
  return p;
}

/// mIoU (segmentation) or RMSE (depth) at ground-truth resolution, with
/// predictions upsampled by nearest neighbour.
inline double evaluate_probe(const LinearProbe& pr, const Tensor<float>& maps, const Dataset& d) {
  if (maps.n() != d.size()) throw ShapeError("evaluate_probe: one map per image expected");
  const int h = maps.h(), w = maps.w(), S = d.canvas;
  const std::int64_t P = std::int64_t(h) * w;
  const RowMatrixF x = positions_matrix(maps);
  if (pr.task == ProbeTask::segmentation) {
    auto labels = probe_predict_labels(pr, x);
    IoUAccumulator acc(kNumClasses);
    for (int i = 0; i < d.size(); ++i) {
      std::vector<int> g(labels.begin() + i * P, labels.begin() + (i + 1) * P);
      acc.add(upsample_nearest(g, h, w, S, S), d.masks[std::size_t(i)]);
    }
    return acc.result().miou;
  }
  auto depth = probe_predict_depth(pr, x);
  std::vector<double> pred, truth;
  for (int i = 0; i < d.size(); ++i) {
    std::vector<double> g(depth.begin() + i * P, depth.begin() + (i + 1) * P);
    auto up = upsample_nearest(g, h, w, S, S);
    pred.insert(pred.end(), up.begin(), up.end());
    truth.insert(truth.end(), d.depths[std::size_t(i)].begin(), d.depths[std::size_t(i)].end());
  }
  return depth_rmse(pred, truth, std::vector<bool>(pred.size(), true));
}

inline std::vector<NamedTensor> probe_tensors(const LinearProbe& p) {
  auto vec = [](const Eigen::VectorXf& v) {
    return Tensor<float>(Shape{int(v.size()), 1, 1, 1}, std::vector<float>(v.data(), v.data() + v.size()));
  };
  Tensor<float> w(Shape{p.outputs(), p.channels(), 1, 1});
  for (int o = 0; o < p.outputs(); ++o)
    for (int c = 0; c < p.channels(); ++c) w.at(o, c, 0, 0) = p.weight(o, c);
  return {{"mean", vec(p.mean)}, {"inv_std", vec(p.inv_std)}, {"weight", w}, {"bias", vec(p.bias)}};
}

inline void save_probe(const std::filesystem::path& path, const LinearProbe& p, json extra = json::object()) {
  extra["task"] = to_string(p.task);
  extra["binning"] = {{"num_bins", p.binning.num_bins}, {"depth_min", p.binning.depth_min},
                      {"depth_max", p.binning.depth_max}};
  write_container(path, "probe", extra, probe_tensors(p));
}

inline LinearProbe load_probe(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.component != "probe") throw ContainerError(path.string() + ": not a probe container");
  LinearProbe p;
  p.task = parse_probe_task(c.header.at("task"));
  const json& b = c.header.at("binning");
  p.binning = {b.at("num_bins"), b.at("depth_min"), b.at("depth_max")};
  auto vec = [&](const std::string& n) {
    const auto& t = c.get(n);
    return Eigen::VectorXf(Eigen::Map<const Eigen::VectorXf>(t.data(), t.numel()));
  };
  p.mean = vec("mean");
  p.inv_std = vec("inv_std");
  p.bias = vec("bias");
  const auto& w = c.get("weight");
  p.weight.resize(w.n(), w.c());
  for (int o = 0; o < w.n(); ++o)
    for (int ch = 0; ch < w.c(); ++ch) p.weight(o, ch) = w.at(o, ch, 0, 0);
  return p;
}

// ---- sweeps ----------------------------------------------------------------

enum class FeatureSource { noisy_teacher, student, projected_student };

inline std::string to_string(FeatureSource s) {
  switch (s) {
    case FeatureSource::noisy_teacher: return "noisy_teacher";
    case FeatureSource::student: return "student";
    default: return "projected_student";
  }
}

enum class ProbeKind { depth, seg, knn };

inline ProbeKind parse_probe_kind(const std::string& s) {
  if (s == "depth") return ProbeKind::depth;
  if (s == "seg") return ProbeKind::seg;
  if (s == "knn") return ProbeKind::knn;
  throw std::invalid_argument("unknown probe task '" + s + "' (expected depth, seg or knn)");
}
inline std::string to_string(ProbeKind k) {
  return k == ProbeKind::depth ? "depth" : k == ProbeKind::seg ? "seg" : "knn";
}
inline std::string metric_name(ProbeKind k) {
  return k == ProbeKind::depth ? "rmse" : k == ProbeKind::seg ? "miou" : "knn_accuracy";
}

struct ProbeSweepRow {
  std::string source;
  int t = 0;
  int feature_map = 0;
  std::string metric_name;
  double metric_value = 0;
  std::uint64_t seed = 0;
};

struct ProbeSweepOptions {
  std::vector<int> timesteps;
  std::vector<int> feature_maps;
  ProbeConfig probe;
  DepthBinning binning;
  int knn_k = 10;
  PoolMethod pool_method = PoolMethod::mean;
  std::uint64_t noise_seed = 0;
};

/// Metric of one cell: a probe (or kNN) fit on `train` maps, scored on `test`.
inline double probe_cell(ProbeKind kind, const FeatureStack<float>& train, const Dataset& dtrain,
                         const FeatureStack<float>& test, const Dataset& dtest, int stage,
                         const ProbeSweepOptions& o) {
  if (kind == ProbeKind::knn) {
    std::vector<int> ltr, lte;
    for (const auto& r : dtrain.records) ltr.push_back(r.class_label);
    for (const auto& r : dtest.records) lte.push_back(r.class_label);
    return knn_accuracy(pooled_rows(train, stage, o.pool_method), ltr,
                        pooled_rows(test, stage, o.pool_method), lte,
                        std::min(o.knn_k, dtrain.size()));
  }
  const ProbeTask task = kind == ProbeKind::depth ? ProbeTask::depth : ProbeTask::segmentation;
  auto pr = fit_probe(train.stage(stage).values, dtrain, task, o.probe, o.binning);
  return evaluate_probe(pr, test.stage(stage).values, dtest);
}

/// One row per (t, feature_map). Student cells are computed once and repeated
/// over t.
inline std::vector<ProbeSweepRow> probe_timestep_sweep(FeatureService& svc, const Dataset& train,
                                                       const Dataset& test, ProbeKind kind,
                                                       FeatureSource source,
                                                       const ProbeSweepOptions& o) {
  if (o.timesteps.empty() || o.feature_maps.empty())
    throw std::invalid_argument("probe_timestep_sweep: empty timestep or feature-map list");
  std::vector<ProbeSweepRow> rows;
  const std::string mname = metric_name(kind);
  auto emit = [&](int t, const FeatureStack<float>& tr, const FeatureStack<float>& te) {
    for (int fm : o.feature_maps)
      rows.push_back({to_string(source), t, fm, mname, probe_cell(kind, tr, train, te, test, fm, o),
                      o.probe.seed});
  };
  if (source == FeatureSource::noisy_teacher) {
    for (int t : o.timesteps) {
      auto rq = ExtractionRequest::noisy(t, o.noise_seed, 1, o.feature_maps);
      emit(t, svc.extract(rq, train.images), svc.extract(rq, test.images));
    }
    return rows;
  }
  const auto rq = ExtractionRequest::student(o.feature_maps);
  const auto tr = svc.extract(rq, train.images), te = svc.extract(rq, test.images);
  if (source == FeatureSource::student) {
    std::vector<ProbeSweepRow> once;
    std::swap(rows, once);
    emit(o.timesteps.front(), tr, te);
    std::swap(rows, once);
    for (int t : o.timesteps)
      for (auto r : once) {
        r.t = t;
        rows.push_back(r);
      }
    return rows;
  }
  // Projected features need every stage present for the heads.
  const auto full_tr = svc.extract(ExtractionRequest::student(), train.images);
  const auto full_te = svc.extract(ExtractionRequest::student(), test.images);
  for (int t : o.timesteps)
    emit(t, svc.project_at_timestep(full_tr, t), svc.project_at_timestep(full_te, t));
  return rows;
}

struct TransferRow {
  std::string probe_source;
  std::string feature_source;
  std::string metric_name;
  double metric_value = 0;
};

/// Probe trained on noisy-teacher features at t, scored on teacher features
/// and on student features, next to a probe trained on student features.
inline std::vector<TransferRow> probe_transfer(FeatureService& svc, const Dataset& train,
                                               const Dataset& test, ProbeKind kind, int t, int stage,
                                               const ProbeSweepOptions& o) {
  if (kind == ProbeKind::knn) throw std::invalid_argument("probe_transfer: needs a linear probe task");
  const ProbeTask task = kind == ProbeKind::depth ? ProbeTask::depth : ProbeTask::segmentation;
  auto nrq = ExtractionRequest::noisy(t, o.noise_seed, 1, {stage});
  auto srq = ExtractionRequest::student({stage});
  const auto ttr = svc.extract(nrq, train.images), tte = svc.extract(nrq, test.images);
  const auto str = svc.extract(srq, train.images), ste = svc.extract(srq, test.images);
  auto tprobe = fit_probe(ttr.stage(stage).values, train, task, o.probe, o.binning);
  auto sprobe = fit_probe(str.stage(stage).values, train, task, o.probe, o.binning);
  const std::string m = metric_name(kind);
  return {{"noisy_teacher", "noisy_teacher", m, evaluate_probe(tprobe, tte.stage(stage).values, test)},
          {"student", "student", m, evaluate_probe(sprobe, ste.stage(stage).values, test)},
          {"noisy_teacher", "student", m, evaluate_probe(tprobe, ste.stage(stage).values, test)}};
}

}  // namespace cleandift
