// SPDX-License-Identifier: Apache-2.0
// Slow, literal reference implementations used to check the library metrics.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "cleandift/correspondence.hpp"
#include "cleandift/probes.hpp"

namespace oracles {

using cleandift::Tensor;

// Exhaustive argmax with plain loops; first strict maximum wins.
inline std::pair<int, int> best_cell(const std::vector<float>& q, const Tensor<float>& m, int n) {
  double qn = 0;
  for (float v : q) qn += double(v) * v;
  qn = std::sqrt(qn);
  int by = 0, bx = 0;
  double best = -2;
  for (int y = 0; y < m.h(); ++y)
    for (int x = 0; x < m.w(); ++x) {
      double dot = 0, nn = 0;
      for (int c = 0; c < m.c(); ++c) {
        dot += double(q[std::size_t(c)]) * m.at(n, c, y, x);
        nn += double(m.at(n, c, y, x)) * m.at(n, c, y, x);
      }
      const double sim = qn > 0 && nn > 0 ? dot / (qn * std::sqrt(nn)) : 0.0;
      if (sim > best) {
        best = sim;
        by = y;
        bx = x;
      }
    }
  return {by, bx};
}

inline double pck(const std::vector<cleandift::Point2>& pred, const cleandift::CorrespondenceAnnotation& a,
                  double alpha, bool bbox) {
  const double thr = alpha * (bbox ? std::max(a.target_bbox.w, a.target_bbox.h) : double(std::max(a.width, a.height)));
  int hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i].x - a.keypoints[i].tx, dy = pred[i].y - a.keypoints[i].ty;
    if (std::sqrt(dx * dx + dy * dy) <= thr) ++hits;
  }
  return double(hits) / double(pred.size());
}

// Per-class IoU from explicit pixel index sets.
inline double miou(const std::vector<int>& pred, const std::vector<int>& truth, int K) {
  double s = 0;
  int n = 0;
  for (int c = 0; c < K; ++c) {
    std::set<std::size_t> P, G;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == c) P.insert(i);
      if (truth[i] == c) G.insert(i);
    }
    if (G.empty()) continue;
    std::size_t inter = 0;
    for (auto i : P) inter += G.count(i);
    std::set<std::size_t> U = P;
    U.insert(G.begin(), G.end());
    s += double(inter) / double(U.size());
    ++n;
  }
  return s / n;
}

inline double rmse(const std::vector<double>& p, const std::vector<double>& t, const std::vector<bool>& valid) {
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (valid[i]) {
      s += (p[i] - t[i]) * (p[i] - t[i]);
      ++n;
    }
  return std::sqrt(s / n);
}

// Full sort of every training row, then a vote counted by hand.
inline int knn(const cleandift::RowMatrixF& X, const std::vector<int>& labels, const std::vector<float>& q, int k) {
  struct Cand {
    double sim;
    int row;
  };
  std::vector<Cand> all;
  for (int r = 0; r < X.rows(); ++r) {
    double dot = 0, a = 0, b = 0;
    for (int c = 0; c < X.cols(); ++c) {
      dot += double(X(r, c)) * q[std::size_t(c)];
      a += double(X(r, c)) * X(r, c);
      b += double(q[std::size_t(c)]) * q[std::size_t(c)];
    }
    all.push_back({a > 0 && b > 0 ? dot / (std::sqrt(b) * std::sqrt(a)) : 0.0, r});
  }
  std::stable_sort(all.begin(), all.end(), [](const Cand& x, const Cand& y) { return x.sim > y.sim; });
  std::map<int, int> count;
  std::map<int, double> mass;
  for (int i = 0; i < k; ++i) {
    ++count[labels[std::size_t(all[std::size_t(i)].row)]];
    mass[labels[std::size_t(all[std::size_t(i)].row)]] += all[std::size_t(i)].sim;
  }
  int best = -1;
  for (auto [label, c] : count)
    if (best < 0 || c > count[best] || (c == count[best] && mass[label] > mass[best])) best = label;
  return best;
}

inline double spearman(std::vector<double> a, std::vector<double> b) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, eq = 0;
      for (double w : v) {
        less += w < v[i];
        eq += w == v[i];
      }
      r[i] = less + (eq + 1) / 2;
    }
    return r;
  };
  auto ra = rank(a), rb = rank(b);
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i] / n;
    mb += rb[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Random instances shared by the unit and acceptance tests.
struct MatchInstance {
  Tensor<float> maps;  // [2, C, h, w]
  std::vector<float> query;
};

inline MatchInstance random_match_instance(std::uint64_t seed) {
  cleandift::Rng r(seed);
  const int C = int(r.uniform_int(1, 9)), h = int(r.uniform_int(1, 7)), w = int(r.uniform_int(1, 7));
  MatchInstance m{Tensor<float>(cleandift::Shape{2, C, h, w}), std::vector<float>(std::size_t(C))};
  // Coarse values so exact ties occur.
  for (auto& v : m.maps.values()) v = float(r.uniform_int(-2, 3));
  for (auto& v : m.query) v = float(r.uniform_int(-2, 3));
  return m;
}

}  // namespace oracles
