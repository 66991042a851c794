// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstring>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/hash.hpp"
#include "cleandift/tensor.hpp"

namespace cleandift {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Named parameter collection with stable element addresses and insertion
/// order. Insertion order is the serialization and checksum order.
template <class T>
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const ParamSet& o) { *this = o; }
  ParamSet& operator=(const ParamSet& o) {
    if (this == &o) return *this;
    items_.clear();
    index_.clear();
    for (const auto& p : o.items_) {
      auto& q = add(p.name, p.value.shape());
      q.value = p.value;
      q.trainable = p.trainable;
    }
    return *this;
  }
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.push_back(Parameter<T>{name, Tensor<T>(shape), Tensor<T>(shape), true});
    return items_.back();
  }

  Parameter<T>& get(const std::string& name) { return items_.at(lookup(name)); }
  const Parameter<T>& get(const std::string& name) const {
    return items_.at(lookup(name));
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& p : items_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p.grad.fill(T(0));
  }

  void set_trainable(bool on) {
    for (auto& p : items_) p.trainable = on;
  }

  /// SHA-256 over names, shapes and raw values in insertion order.
  std::string checksum() const {
    Sha256 h;
    for (const auto& p : items_) {
      h.update(p.name);
      const Shape s = p.value.shape();
      const int dims[4] = {s.n, s.c, s.h, s.w};
      h.update(dims, sizeof dims);
      h.update(p.value.data(), std::size_t(p.value.numel()) * sizeof(T));
    }
    return h.hex();
  }

  bool values_equal(const ParamSet& o) const {
    if (size() != o.size()) return false;
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].name != o.items_[i].name) return false;
      if (!(items_[i].value == o.items_[i].value)) return false;
    }
    return true;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : items_) {
      auto& q = out.add(p.name, p.value.shape());
      q.value = p.value.template cast<U>();
      q.trainable = p.trainable;
    }
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }

  std::deque<Parameter<T>> items_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 0;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

/// Adam with linear warmup. Only trainable parameters are updated; moment
/// buffers are keyed by parameter name.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  double learning_rate_at(int step) const {
    if (cfg_.warmup_steps <= 0) return cfg_.learning_rate;
    return cfg_.learning_rate *
           std::min(1.0, double(step + 1) / double(cfg_.warmup_steps));
  }

  /// Global gradient norm over the given trainable sets.
  static double grad_norm(std::initializer_list<ParamSet<T>*> sets) {
    double sq = 0.0;
    for (auto* s : sets)
      for (auto& p : *s)
        if (p.trainable)
          for (T g : p.grad.values()) sq += double(g) * double(g);
    return std::sqrt(sq);
  }

  void step(std::initializer_list<ParamSet<T>*> sets) {
    double clip_scale = 1.0;
    if (cfg_.grad_clip > 0.0) {
      const double norm = grad_norm(sets);
      if (norm > cfg_.grad_clip) clip_scale = cfg_.grad_clip / norm;
    }
    const double lr = learning_rate_at(t_);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    int set_id = 0;
    for (auto* s : sets) {
      for (auto& p : *s) {
        if (!p.trainable) continue;
        auto& st = state_[std::to_string(set_id) + "/" + p.name];
        if (st.m.empty()) {
          st.m.assign(std::size_t(p.value.numel()), 0.0);
          st.v.assign(std::size_t(p.value.numel()), 0.0);
        }
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
          const double g = double(p.grad[i]) * clip_scale;
          st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
          st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
          const double mh = st.m[i] / bc1;
          const double vh = st.v[i] / bc2;
          p.value[i] -= T(lr * mh / (std::sqrt(vh) + cfg_.eps));
        }
      }
      ++set_id;
    }
  }

  int steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  int t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace cleandift
