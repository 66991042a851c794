// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include "cleandift/params.hpp"
#include "cleandift/tensor.hpp"

namespace cleandift {

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Values are recorded in creation order; backward()
/// walks them in reverse and calls each node's pullback. With gradients
/// disabled the tape only holds forward values.
template <class T>
class Tape {
 public:
  using Pullback = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor<T> v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr, false, {}});
    return Var{int(nodes_.size()) - 1};
  }

  /// Binds a parameter; gradients accumulate directly into `p.grad`.
  Var param(Parameter<T>& p) {
    const bool ng = grad_enabled_ && p.trainable;
    if (ng && !(p.grad.shape() == p.value.shape())) p.grad = Tensor<T>(p.value.shape());
    nodes_.push_back(Node{{}, {}, &p, ng, {}});
    return Var{int(nodes_.size()) - 1};
  }

  Var record(Tensor<T> value, std::initializer_list<Var> inputs, Pullback pb) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(pb));
  }
  Var record(Tensor<T> value, std::span<const Var> inputs, Pullback pb) {
    bool ng = false;
    if (grad_enabled_)
      for (Var v : inputs)
        if (v.valid() && node(v).needs_grad) ng = true;
    nodes_.push_back(Node{std::move(value), {}, nullptr, ng, ng ? std::move(pb) : Pullback{}});
    return Var{int(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = node(v);
    return n.param ? n.param->value : n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool needs_grad(Var v) const { return v.valid() && node(v).needs_grad; }

  /// Gradient accumulator for `v`, or nullptr when `v` needs none.
  Tensor<T>* grad(Var v) {
    Node& n = node(v);
    if (!n.needs_grad) return nullptr;
    if (n.param) return &n.param->grad;
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  /// Seeds d(root)/d(root) = 1 for a single-element root and back-propagates.
  void backward(Var root) {
    if (value(root).numel() != 1)
      throw std::invalid_argument("backward: root must be a scalar");
    if (!needs_grad(root)) return;
    (*grad(root))[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[std::size_t(i)];
      if (!n.pullback || n.grad.empty()) continue;
      n.pullback(*this, n.grad);
      n.grad = Tensor<T>();  // release
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param;
    bool needs_grad;
    Pullback pullback;
  };
  Node& node(Var v) {
    if (!v.valid() || std::size_t(v.id) >= nodes_.size())
      throw std::out_of_range("invalid Var");
    return nodes_[std::size_t(v.id)];
  }
  const Node& node(Var v) const {
    if (!v.valid() || std::size_t(v.id) >= nodes_.size())
      throw std::out_of_range("invalid Var");
    return nodes_[std::size_t(v.id)];
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

namespace ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

struct ConvGeom {
  int cin, h, w, k, stride, pad, ho, wo;
  std::int64_t cols() const { return std::int64_t(ho) * wo; }
  std::int64_t rows() const { return std::int64_t(cin) * k * k; }
};

/// Single-sample im2col into `col` ([Cin*k*k, Ho*Wo], row-major): row
/// (ci*k+ky)*k+kx, column oy*Wo + ox.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + ((std::int64_t(ci) * g.k + ky) * g.k + kx) * g.cols();
        const T* src = x + std::int64_t(ci) * g.h * g.w;
        // Output columns whose input column lies inside the image.
        const int ox_lo = std::clamp((g.pad - kx + g.stride - 1) / g.stride, 0, g.wo);
        const int ox_hi = std::clamp((g.w + g.pad - kx + g.stride - 1) / g.stride, ox_lo, g.wo);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* drow = row + std::int64_t(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            for (int ox = 0; ox < g.wo; ++ox) drow[ox] = T(0);
            continue;
          }
          const T* srow = src + std::int64_t(iy) * g.w;
          for (int ox = 0; ox < ox_lo; ++ox) drow[ox] = T(0);
          for (int ox = ox_hi; ox < g.wo; ++ox) drow[ox] = T(0);
          if (g.stride == 1) {
            const T* s = srow - g.pad + kx;
            for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox] = s[ox];
          } else {
            for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox] = srow[ox * g.stride - g.pad + kx];
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  for (int ci = 0; ci < g.cin; ++ci)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((std::int64_t(ci) * g.k + ky) * g.k + kx) * g.cols();
        T* dst = dx + std::int64_t(ci) * g.h * g.w;
        const int ox_lo = std::clamp((g.pad - kx + g.stride - 1) / g.stride, 0, g.wo);
        const int ox_hi = std::clamp((g.w + g.pad - kx + g.stride - 1) / g.stride, ox_lo, g.wo);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* drow = dst + std::int64_t(iy) * g.w;
          const T* srow = row + std::int64_t(oy) * g.wo;
          if (g.stride == 1) {
            T* d = drow - g.pad + kx;
            for (int ox = ox_lo; ox < ox_hi; ++ox) d[ox] += srow[ox];
          } else {
            for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox * g.stride - g.pad + kx] += srow[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution, square kernel. `w` is [Cout, Cin, k, k]; `b` is
/// [Cout, 1, 1, 1] or invalid. A 1x1 convolution over [N, Cin, 1, 1] is a
/// batched linear layer.
template <class T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b, int stride = 1, int pad = 0) {
  using Mat = RowMat<T>;
  using MapC = Eigen::Map<const Mat>;
  using MapM = Eigen::Map<Mat>;
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& W = tape.value(w);
  if (W.c() != X.c() || W.h() != W.w())
    throw ShapeError("conv2d: weight " + W.shape().str() + " vs input " +
                     X.shape().str());
  const int k = W.h();
  const int cout = W.n();
  const detail::ConvGeom g{X.c(), X.h(), X.w(), k, stride, pad,
                           (X.h() + 2 * pad - k) / stride + 1,
                           (X.w() + 2 * pad - k) / stride + 1};
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const bool vector_input = pointwise && X.h() == 1 && X.w() == 1;
  if (b.valid() && tape.value(b).numel() != cout) throw ShapeError("conv2d: bias size");
  MapC Wm(W.data(), cout, g.rows());
  Tensor<T> Y(Shape{X.n(), cout, g.ho, g.wo}, typename Tensor<T>::Uninitialized{});
  const std::int64_t hw = g.cols();
  if (vector_input) {
    // Row by row so a sample's output does not depend on its batch.
    using VecC = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
    for (int n = 0; n < X.n(); ++n)
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(Y.sample(n), cout).noalias() =
          Wm * VecC(X.sample(n), g.cin);
    if (b.valid())
      MapM(Y.data(), X.n(), cout).rowwise() +=
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(tape.value(b).data(), cout);
  } else {
    Mat col(pointwise ? 0 : g.rows(), pointwise ? 0 : hw);
    for (int n = 0; n < X.n(); ++n) {
      MapM Yn(Y.sample(n), cout, hw);
      if (pointwise) {
        Yn.noalias() = Wm * MapC(X.sample(n), g.cin, hw);
      } else {
        detail::im2col(X.sample(n), g, col.data());
        Yn.noalias() = Wm * col;
      }
      if (b.valid())
        Yn.colwise() +=
            Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(tape.value(b).data(), cout);
    }
  }
  return tape.record(std::move(Y), {x, w, b}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    const Tensor<T>& Xv = tp.value(x);
    const Tensor<T>& Wv = tp.value(w);
    MapC Wm2(Wv.data(), cout, g.rows());
    Tensor<T>* dx = tp.grad(x);
    Tensor<T>* dw = tp.grad(w);
    Tensor<T>* db = b.valid() ? tp.grad(b) : nullptr;
    if (vector_input) {
      MapC G(gy.data(), Xv.n(), cout);
      if (dw) MapM(dw->data(), cout, g.cin).noalias() += G.transpose() * MapC(Xv.data(), Xv.n(), g.cin);
      if (dx) MapM(dx->data(), Xv.n(), g.cin).noalias() += G * Wm2;
      if (db)
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db->data(), cout) += G.colwise().sum();
      return;
    }
    Mat col(pointwise ? 0 : g.rows(), pointwise ? 0 : hw);
    Mat dcol;
    for (int n = 0; n < Xv.n(); ++n) {
      MapC G(gy.sample(n), cout, hw);
      if (db) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(db->data(), cout) += G.rowwise().sum();
      if (pointwise) {
        if (dw) MapM(dw->data(), cout, g.cin).noalias() += G * MapC(Xv.sample(n), g.cin, hw).transpose();
        if (dx) MapM(dx->sample(n), g.cin, hw).noalias() += Wm2.transpose() * G;
        continue;
      }
      if (dw) {
        detail::im2col(Xv.sample(n), g, col.data());
        MapM(dw->data(), cout, g.rows()).noalias() += G * col.transpose();
      }
      if (dx) {
        dcol.noalias() = Wm2.transpose() * G;
        detail::col2im_add(dcol.data(), g, dx->sample(n));
      }
    }
  });
}

template <class T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

/// Group normalization over (C/groups, H, W) with per-channel affine.
template <class T>
Var group_norm(Tape<T>& tape, Var x, Var gamma, Var beta, int groups,
               double eps = 1e-5) {
  const Tensor<T>& X = tape.value(x);
  if (groups <= 0 || X.c() % groups != 0)
    throw ShapeError("group_norm: channels not divisible by groups");
  const Tensor<T>& Gm = tape.value(gamma);
  const Tensor<T>& Bt = tape.value(beta);
  const int cpg = X.c() / groups;
  const std::int64_t hw = X.shape().plane();
  const std::int64_t gsize = cpg * hw;
  Tensor<T> xhat(X.shape(), typename Tensor<T>::Uninitialized{});
  std::vector<T> rstd(std::size_t(X.n()) * groups);
  Tensor<T> Y(X.shape(), typename Tensor<T>::Uninitialized{});
  for (int n = 0; n < X.n(); ++n)
    for (int g = 0; g < groups; ++g) {
      const std::int64_t off = (std::int64_t(n) * X.c() + g * cpg) * hw;
      ConstArrayMap<T> xs(X.data() + off, gsize);
      const double mean = double(xs.sum()) / double(gsize);
      const double var = double((xs - T(mean)).square().sum()) / double(gsize);
      const double r = 1.0 / std::sqrt(var + eps);
      rstd[std::size_t(n) * groups + g] = T(r);
      ArrayMap<T> xh(xhat.data() + off, gsize);
      xh = (xs - T(mean)) * T(r);
      for (int cc = 0; cc < cpg; ++cc) {
        const int c = g * cpg + cc;
        ArrayMap<T>(Y.data() + off + cc * hw, hw) = xh.segment(cc * hw, hw) * Gm[c] + Bt[c];
      }
    }
  return tape.record(std::move(Y), {x, gamma, beta},
                     [=, xhat = std::move(xhat), rstd = std::move(rstd)](
                         Tape<T>& tp, const Tensor<T>& gy) {
    const Tensor<T>& Gv = tp.value(gamma);
    const int C = xhat.c();
    Tensor<T>* dg = tp.grad(gamma);
    Tensor<T>* db = tp.grad(beta);
    Tensor<T>* dx = tp.grad(x);
    std::vector<double> sg(static_cast<std::size_t>(cpg)), sb(static_cast<std::size_t>(cpg));
    for (int n = 0; n < xhat.n(); ++n)
      for (int g = 0; g < groups; ++g) {
        const std::int64_t off = (std::int64_t(n) * C + g * cpg) * hw;
        double m1 = 0.0, m2 = 0.0;
        for (int cc = 0; cc < cpg; ++cc) {
          ConstArrayMap<T> gs(gy.data() + off + cc * hw, hw);
          ConstArrayMap<T> xs(xhat.data() + off + cc * hw, hw);
          sb[cc] = double(gs.sum());
          sg[cc] = double((gs * xs).sum());
          const double gam = Gv[g * cpg + cc];
          m1 += gam * sb[cc];
          m2 += gam * sg[cc];
          if (dg) (*dg)[g * cpg + cc] += T(sg[cc]);
          if (db) (*db)[g * cpg + cc] += T(sb[cc]);
        }
        if (!dx) continue;
        m1 /= double(gsize);
        m2 /= double(gsize);
        const double r = rstd[std::size_t(n) * groups + g];
        for (int cc = 0; cc < cpg; ++cc) {
          const T gam = Gv[g * cpg + cc];
          ConstArrayMap<T> gs(gy.data() + off + cc * hw, hw);
          ConstArrayMap<T> xs(xhat.data() + off + cc * hw, hw);
          ArrayMap<T>(dx->data() + off + cc * hw, hw) +=
              T(r) * (gs * gam - T(m1) - xs * T(m2));
        }
      }
  });
}

template <class T>
Var silu(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> Y(X.shape(), typename Tensor<T>::Uninitialized{});
  ConstArrayMap<T> xa(X.data(), X.numel());
  ArrayMap<T>(Y.data(), Y.numel()) = xa / (T(1) + (-xa).exp());
  return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    const Tensor<T>& Xv = tp.value(x);
    Tensor<T>& dx = *tp.grad(x);
    ConstArrayMap<T> xv(Xv.data(), Xv.numel());
    const Eigen::Array<T, Eigen::Dynamic, 1> s = T(1) / (T(1) + (-xv).exp());
    ArrayMap<T>(dx.data(), dx.numel()) +=
        ConstArrayMap<T>(gy.data(), gy.numel()) * s * (T(1) + xv * (T(1) - s));
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  require_same_shape(A.shape(), B.shape(), "add");
  Tensor<T> Y = A;
  for (std::int64_t i = 0; i < Y.numel(); ++i) Y[i] += B[i];
  return tape.record(std::move(Y), {a, b}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    for (Var v : {a, b})
      if (Tensor<T>* d = tp.grad(v))
        for (std::int64_t i = 0; i < gy.numel(); ++i) (*d)[i] += gy[i];
  });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  require_same_shape(A.shape(), B.shape(), "mul");
  Tensor<T> Y = A;
  for (std::int64_t i = 0; i < Y.numel(); ++i) Y[i] *= B[i];
  return tape.record(std::move(Y), {a, b}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    const Tensor<T>& Av = tp.value(a);
    const Tensor<T>& Bv = tp.value(b);
    if (Tensor<T>* da = tp.grad(a))
      for (std::int64_t i = 0; i < gy.numel(); ++i) (*da)[i] += gy[i] * Bv[i];
    if (Tensor<T>* db = tp.grad(b))
      for (std::int64_t i = 0; i < gy.numel(); ++i) (*db)[i] += gy[i] * Av[i];
  });
}

/// x[N,C,H,W] + v[N,C,1,1] broadcast over positions.
template <class T>
Var add_channel_bias(Tape<T>& tape, Var x, Var v) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& V = tape.value(v);
  if (V.n() != X.n() || V.c() != X.c() || V.h() != 1 || V.w() != 1)
    throw ShapeError("add_channel_bias: " + V.shape().str() + " vs " + X.shape().str());
  const std::int64_t hw = X.shape().plane();
  Tensor<T> Y = X;
  for (std::int64_t nc = 0; nc < std::int64_t(X.n()) * X.c(); ++nc)
    for (std::int64_t p = 0; p < hw; ++p) Y[nc * hw + p] += V[nc];
  return tape.record(std::move(Y), {x, v}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    if (Tensor<T>* dx = tp.grad(x))
      for (std::int64_t i = 0; i < gy.numel(); ++i) (*dx)[i] += gy[i];
    if (Tensor<T>* dv = tp.grad(v))
      for (std::int64_t nc = 0; nc < dv->numel(); ++nc) {
        T s = 0;
        for (std::int64_t p = 0; p < hw; ++p) s += gy[nc * hw + p];
        (*dv)[nc] += s;
      }
  });
}

template <class T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  if (A.n() != B.n() || A.h() != B.h() || A.w() != B.w())
    throw ShapeError("concat_channels: " + A.shape().str() + " vs " + B.shape().str());
  const std::int64_t sa = A.sample_size(), sb = B.sample_size();
  Tensor<T> Y(Shape{A.n(), A.c() + B.c(), A.h(), A.w()}, typename Tensor<T>::Uninitialized{});
  for (int n = 0; n < A.n(); ++n) {
    std::copy_n(A.sample(n), sa, Y.sample(n));
    std::copy_n(B.sample(n), sb, Y.sample(n) + sa);
  }
  return tape.record(std::move(Y), {a, b}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    const int N = gy.n();
    if (Tensor<T>* da = tp.grad(a))
      for (int n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < sa; ++i) da->sample(n)[i] += gy.sample(n)[i];
    if (Tensor<T>* db = tp.grad(b))
      for (int n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < sb; ++i) db->sample(n)[i] += gy.sample(n)[sa + i];
  });
}

/// Nearest-neighbour 2x spatial upsampling.
template <class T>
Var upsample2x(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  Tensor<T> Y(Shape{X.n(), X.c(), 2 * X.h(), 2 * X.w()}, typename Tensor<T>::Uninitialized{});
  const int H = X.h(), W = X.w();
  for (std::int64_t nc = 0; nc < std::int64_t(X.n()) * X.c(); ++nc)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        Y[(nc * 2 * H + y) * 2 * W + xx] = X[(nc * H + y / 2) * W + xx / 2];
  return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    Tensor<T>& dx = *tp.grad(x);
    for (std::int64_t nc = 0; nc < std::int64_t(dx.n()) * dx.c(); ++nc)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx)
          dx[(nc * H + y / 2) * W + xx / 2] += gy[(nc * 2 * H + y) * 2 * W + xx];
  });
}

/// Feature-wise modulation (1 + scale) * x + shift; `mod` is [N, 2C, 1, 1]
/// holding scale in the first C channels and shift in the last C.
template <class T>
Var modulate(Tape<T>& tape, Var x, Var mod) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& M = tape.value(mod);
  const int C = X.c();
  if (M.n() != X.n() || M.c() != 2 * C || M.h() != 1 || M.w() != 1)
    throw ShapeError("modulate: " + M.shape().str() + " vs " + X.shape().str());
  const std::int64_t hw = X.shape().plane();
  Tensor<T> Y(X.shape(), typename Tensor<T>::Uninitialized{});
  for (int n = 0; n < X.n(); ++n)
    for (int c = 0; c < C; ++c) {
      const T s = T(1) + M.at(n, c, 0, 0), b = M.at(n, C + c, 0, 0);
      const std::int64_t off = (std::int64_t(n) * C + c) * hw;
      for (std::int64_t p = 0; p < hw; ++p) Y[off + p] = s * X[off + p] + b;
    }
  return tape.record(std::move(Y), {x, mod}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    const Tensor<T>& Xv = tp.value(x);
    const Tensor<T>& Mv = tp.value(mod);
    Tensor<T>* dx = tp.grad(x);
    Tensor<T>* dm = tp.grad(mod);
    for (int n = 0; n < Xv.n(); ++n)
      for (int c = 0; c < C; ++c) {
        const std::int64_t off = (std::int64_t(n) * C + c) * hw;
        const T s = T(1) + Mv.at(n, c, 0, 0);
        T ds = 0, db = 0;
        for (std::int64_t p = 0; p < hw; ++p) {
          if (dx) (*dx)[off + p] += gy[off + p] * s;
          ds += gy[off + p] * Xv[off + p];
          db += gy[off + p];
        }
        if (dm) {
          dm->at(n, c, 0, 0) += ds;
          dm->at(n, C + c, 0, 0) += db;
        }
      }
  });
}

/// Fused point-wise FFN block with residual, evaluated one sample at a time:
///   xn = rmsnorm(x) if rms else x
///   u  = (1 + scale) * xn + shift          (mod = [N, 2C, 1, 1])
///   z  = silu(W1 u + b1) * (W2 u + b2)     (gated; W2/b2 invalid otherwise)
///   z  = silu(W1 u + b1)                   (ungated)
///   y  = x + W3 z + b3
/// The backward pass recomputes the per-sample intermediates.
template <class T>
Var ffn_block(Tape<T>& tape, Var x, Var mod, Var w1, Var b1, Var w2, Var b2, Var w3, Var b3,
              bool rms, double rms_eps = 1e-6) {
  using Mat = RowMat<T>;
  using MapC = Eigen::Map<const Mat>;
  using MapM = Eigen::Map<Mat>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  using VecC = Eigen::Map<const Vec>;
  const Tensor<T>& X = tape.value(x);
  const int C = X.c();
  const std::int64_t hw = X.shape().plane();
  const int H = tape.value(w1).n();
  const bool gated = w2.valid();
  const Tensor<T>& M = tape.value(mod);
  if (M.n() != X.n() || M.c() != 2 * C || M.h() != 1 || M.w() != 1)
    throw ShapeError("ffn_block: modulation " + M.shape().str() + " vs " + X.shape().str());
  if (tape.value(w1).c() != C || tape.value(w3).n() != C || tape.value(w3).c() != H ||
      (gated && (tape.value(w2).n() != H || tape.value(w2).c() != C)))
    throw ShapeError("ffn_block: weight widths do not match " + X.shape().str());

  struct Fwd {
    Mat xn, u, a1, a2, z;
    Eigen::Array<T, 1, Eigen::Dynamic> rinv;
  };
  // Intermediates of sample n given the current parameter values.
  auto forward_sample = [=](const Tape<T>& tp, int n, Fwd& f) {
    const Tensor<T>& Xv = tp.value(x);
    const Tensor<T>& Mv = tp.value(mod);
    MapC xs(Xv.sample(n), C, hw);
    if (rms) {
      f.rinv = (xs.array().square().colwise().sum() / T(C) + T(rms_eps)).rsqrt();
      f.xn = (xs.array().rowwise() * f.rinv).matrix();
    } else {
      f.xn = xs;
    }
    VecC sc(Mv.sample(n), C), sh(Mv.sample(n) + C, C);
    f.u = ((f.xn.array().colwise() * (sc.array() + T(1))).colwise() + sh.array()).matrix();
    f.a1.noalias() = MapC(tp.value(w1).data(), H, C) * f.u;
    f.a1.colwise() += VecC(tp.value(b1).data(), H);
    f.z = (f.a1.array() / (T(1) + (-f.a1.array()).exp())).matrix();
    if (gated) {
      f.a2.noalias() = MapC(tp.value(w2).data(), H, C) * f.u;
      f.a2.colwise() += VecC(tp.value(b2).data(), H);
      f.z.array() *= f.a2.array();
    }
  };

  Tensor<T> Y(X.shape(), typename Tensor<T>::Uninitialized{});
  {
    Fwd f;
    for (int n = 0; n < X.n(); ++n) {
      forward_sample(tape, n, f);
      MapM ys(Y.sample(n), C, hw);
      ys.noalias() = MapC(tape.value(w3).data(), C, H) * f.z;
      ys.colwise() += VecC(tape.value(b3).data(), C);
      ys += MapC(X.sample(n), C, hw);
    }
  }
  const std::array<Var, 8> inputs{x, mod, w1, b1, w2, b2, w3, b3};
  return tape.record(std::move(Y), std::span<const Var>(inputs), [=](Tape<T>& tp,
                                                                      const Tensor<T>& gy) {
    auto grad_map = [&](Var v, int rows, std::int64_t cols) -> std::optional<MapM> {
      if (!v.valid()) return std::nullopt;
      Tensor<T>* g = tp.grad(v);
      if (!g) return std::nullopt;
      return MapM(g->data(), rows, cols);
    };
    auto dW1 = grad_map(w1, H, C), dB1 = grad_map(b1, H, 1);
    auto dW2 = grad_map(w2, H, C), dB2 = grad_map(b2, H, 1);
    auto dW3 = grad_map(w3, C, H), dB3 = grad_map(b3, C, 1);
    Tensor<T>* dx = tp.grad(x);
    Tensor<T>* dm = tp.grad(mod);
    MapC W1(tp.value(w1).data(), H, C), W3(tp.value(w3).data(), C, H);
    Fwd f;
    Mat dz, da1, da2, du;
    for (int n = 0; n < gy.n(); ++n) {
      forward_sample(tp, n, f);
      MapC dy(gy.sample(n), C, hw);
      if (dW3) dW3->noalias() += dy * f.z.transpose();
      if (dB3) *dB3 += dy.rowwise().sum();
      dz.noalias() = W3.transpose() * dy;
      const auto s = (T(1) / (T(1) + (-f.a1.array()).exp())).eval();
      const auto dsilu = (s * (T(1) + f.a1.array() * (T(1) - s))).eval();
      if (gated) {
        da1 = (dz.array() * f.a2.array() * dsilu).matrix();
        da2 = (dz.array() * f.a1.array() * s).matrix();
      } else {
        da1 = (dz.array() * dsilu).matrix();
      }
      if (dW1) dW1->noalias() += da1 * f.u.transpose();
      if (dB1) *dB1 += da1.rowwise().sum();
      du.noalias() = W1.transpose() * da1;
      if (gated) {
        if (dW2) dW2->noalias() += da2 * f.u.transpose();
        if (dB2) *dB2 += da2.rowwise().sum();
        du.noalias() += MapC(tp.value(w2).data(), H, C).transpose() * da2;
      }
      VecC sc(tp.value(mod).sample(n), C);
      if (dm) {
        Eigen::Map<Vec>(dm->sample(n), C) += (du.array() * f.xn.array()).rowwise().sum().matrix();
        Eigen::Map<Vec>(dm->sample(n) + C, C) += du.rowwise().sum();
      }
      if (dx) {
        MapM dxs(dx->sample(n), C, hw);
        dxs += dy;
        Mat dxn = (du.array().colwise() * (sc.array() + T(1))).matrix();
        if (rms) {
          const auto m = ((dxn.array() * f.xn.array()).colwise().sum() / T(C)).eval();
          dxs += ((dxn.array() - f.xn.array().rowwise() * m).rowwise() * f.rinv).matrix();
        } else {
          dxs += dxn;
        }
      }
    }
  });
}

/// Per-position RMS normalization across channels (no affine).
template <class T>
Var rms_norm_channels(Tape<T>& tape, Var x, double eps = 1e-6) {
  const Tensor<T>& X = tape.value(x);
  const int C = X.c();
  const std::int64_t hw = X.shape().plane();
  Tensor<T> Y(X.shape(), typename Tensor<T>::Uninitialized{});
  std::vector<T> inv(std::size_t(X.n()) * hw);
  for (int n = 0; n < X.n(); ++n)
    for (std::int64_t p = 0; p < hw; ++p) {
      double ms = 0.0;
      for (int c = 0; c < C; ++c) {
        const double v = X[(std::int64_t(n) * C + c) * hw + p];
        ms += v * v;
      }
      const T r = T(1.0 / std::sqrt(ms / C + eps));
      inv[std::size_t(n) * hw + p] = r;
      for (int c = 0; c < C; ++c) {
        const std::int64_t i = (std::int64_t(n) * C + c) * hw + p;
        Y[i] = X[i] * r;
      }
    }
  Tensor<T> Ycopy = Y;
  return tape.record(std::move(Y), {x},
                     [=, inv = std::move(inv), Yv = std::move(Ycopy)](
                         Tape<T>& tp, const Tensor<T>& gy) {
    Tensor<T>& dx = *tp.grad(x);
    for (int n = 0; n < Yv.n(); ++n)
      for (std::int64_t p = 0; p < hw; ++p) {
        double m = 0.0;
        for (int c = 0; c < C; ++c) {
          const std::int64_t i = (std::int64_t(n) * C + c) * hw + p;
          m += double(gy[i]) * Yv[i];
        }
        m /= C;
        const T r = inv[std::size_t(n) * hw + p];
        for (int c = 0; c < C; ++c) {
          const std::int64_t i = (std::int64_t(n) * C + c) * hw + p;
          dx[i] += r * T(double(gy[i]) - Yv[i] * m);
        }
      }
  });
}

namespace detail {
/// Cosine from raw dot products, clamped to [-1, 1]. Equal vectors give
/// exactly 1 and near-zero vectors give 0.
inline double cosine_from_sums(double dot, double na2, double nb2, double zero_norm) {
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  if (na < zero_norm || nb < zero_norm) return 0.0;
  if (dot == na2 && dot == nb2) return 1.0;
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}
}  // namespace detail

/// Mean over (N, H, W) positions of the channel-vector cosine similarity.
/// Positions where either vector has norm below `zero_norm` contribute 0.
template <class T>
Var cosine_similarity_mean(Tape<T>& tape, Var a, Var b, double zero_norm = 1e-8) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  require_same_shape(A.shape(), B.shape(), "cosine_similarity_mean");
  const int C = A.c();
  const std::int64_t hw = A.shape().plane();
  const double count = double(A.n()) * double(hw);
  double total = 0.0;
  for (int n = 0; n < A.n(); ++n)
    for (std::int64_t p = 0; p < hw; ++p) {
      double dot = 0, na2 = 0, nb2 = 0;
      for (int c = 0; c < C; ++c) {
        const std::int64_t i = (std::int64_t(n) * C + c) * hw + p;
        dot += double(A[i]) * B[i];
        na2 += double(A[i]) * A[i];
        nb2 += double(B[i]) * B[i];
      }
      total += detail::cosine_from_sums(dot, na2, nb2, zero_norm);
    }
  Tensor<T> Y(Shape{1, 1, 1, 1}, T(total / count));
  return tape.record(std::move(Y), {a, b}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    const Tensor<T>& Av = tp.value(a);
    const Tensor<T>& Bv = tp.value(b);
    Tensor<T>* da = tp.grad(a);
    Tensor<T>* db = tp.grad(b);
    const double scale = double(gy[0]) / count;
    for (int n = 0; n < Av.n(); ++n)
      for (std::int64_t p = 0; p < hw; ++p) {
        double dot = 0, na = 0, nb = 0;
        for (int c = 0; c < C; ++c) {
          const std::int64_t i = (std::int64_t(n) * C + c) * hw + p;
          dot += double(Av[i]) * Bv[i];
          na += double(Av[i]) * Av[i];
          nb += double(Bv[i]) * Bv[i];
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        if (na < zero_norm || nb < zero_norm) continue;
        const double s = dot / (na * nb);
        for (int c = 0; c < C; ++c) {
          const std::int64_t i = (std::int64_t(n) * C + c) * hw + p;
          if (da) (*da)[i] += T(scale * (Bv[i] / (na * nb) - s * Av[i] / (na * na)));
          if (db) (*db)[i] += T(scale * (Av[i] / (na * nb) - s * Bv[i] / (nb * nb)));
        }
      }
  });
}

/// Mean element-wise squared error.
template <class T>
Var mse_mean(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  require_same_shape(A.shape(), B.shape(), "mse_mean");
  double s = 0;
  for (std::int64_t i = 0; i < A.numel(); ++i) {
    const double d = double(A[i]) - B[i];
    s += d * d;
  }
  const double count = double(A.numel());
  Tensor<T> Y(Shape{1, 1, 1, 1}, T(s / count));
  return tape.record(std::move(Y), {a, b}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    const Tensor<T>& Av = tp.value(a);
    const Tensor<T>& Bv = tp.value(b);
    const T k = T(2.0 * double(gy[0]) / count);
    Tensor<T>* da = tp.grad(a);
    Tensor<T>* db = tp.grad(b);
    for (std::int64_t i = 0; i < Av.numel(); ++i) {
      const T d = Av[i] - Bv[i];
      if (da) (*da)[i] += k * d;
      if (db) (*db)[i] -= k * d;
    }
  });
}

/// Mean element-wise absolute error; subgradient 0 at equality.
template <class T>
Var mae_mean(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  const Tensor<T>& B = tape.value(b);
  require_same_shape(A.shape(), B.shape(), "mae_mean");
  double s = 0;
  for (std::int64_t i = 0; i < A.numel(); ++i) s += std::abs(double(A[i]) - B[i]);
  const double count = double(A.numel());
  Tensor<T> Y(Shape{1, 1, 1, 1}, T(s / count));
  return tape.record(std::move(Y), {a, b}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    const Tensor<T>& Av = tp.value(a);
    const Tensor<T>& Bv = tp.value(b);
    const T k = T(double(gy[0]) / count);
    Tensor<T>* da = tp.grad(a);
    Tensor<T>* db = tp.grad(b);
    for (std::int64_t i = 0; i < Av.numel(); ++i) {
      const T d = Av[i] - Bv[i];
      const T sg = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
      if (da) (*da)[i] += k * sg;
      if (db) (*db)[i] -= k * sg;
    }
  });
}

/// sum_i weights[i] * terms[i] over scalar terms.
template <class T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& terms,
                 const std::vector<double>& weights) {
  if (terms.size() != weights.size() || terms.empty())
    throw std::invalid_argument("weighted_sum: term/weight count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (tape.value(terms[i]).numel() != 1)
      throw ShapeError("weighted_sum: terms must be scalars");
    s += weights[i] * double(tape.value(terms[i])[0]);
  }
  Tensor<T> Y(Shape{1, 1, 1, 1}, T(s));
  return tape.record(std::move(Y), std::span<const Var>(terms),
                     [terms, weights](Tape<T>& tp, const Tensor<T>& gy) {
    for (std::size_t i = 0; i < terms.size(); ++i)
      if (Tensor<T>* d = tp.grad(terms[i])) (*d)[0] += T(weights[i]) * gy[0];
  });
}

/// Repeats every sample `reps` times consecutively: out[n*reps + r] = x[n].
template <class T>
Var repeat_interleave_batch(Tape<T>& tape, Var x, int reps) {
  const Tensor<T>& X = tape.value(x);
  if (reps < 1) throw std::invalid_argument("repeat_interleave_batch: reps >= 1");
  const std::int64_t ss = X.sample_size();
  Tensor<T> Y(Shape{X.n() * reps, X.c(), X.h(), X.w()}, typename Tensor<T>::Uninitialized{});
  for (int n = 0; n < X.n(); ++n)
    for (int r = 0; r < reps; ++r) std::copy_n(X.sample(n), ss, Y.sample(n * reps + r));
  return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    Tensor<T>& dx = *tp.grad(x);
    for (int n = 0; n < dx.n(); ++n)
      for (int r = 0; r < reps; ++r) {
        ArrayMap<T>(dx.sample(n), ss) += ConstArrayMap<T>(gy.sample(n * reps + r), ss);
      }
  });
}

template <class T>
Var scale(Tape<T>& tape, Var x, double k) {
  Tensor<T> Y = tape.value(x);
  for (auto& v : Y.values()) v = T(double(v) * k);
  return tape.record(std::move(Y), {x}, [=](Tape<T>& tp, const Tensor<T>& gy) {
    Tensor<T>& dx = *tp.grad(x);
    for (std::int64_t i = 0; i < gy.numel(); ++i) dx[i] += T(double(gy[i]) * k);
  });
}

}  // namespace ops
}  // namespace cleandift
