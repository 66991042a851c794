// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/autograd.hpp"
#include "cleandift/backbone.hpp"
#include "cleandift/params.hpp"
#include "cleandift/rng.hpp"

namespace cleandift {

enum class Conditioning { film, adarms };
enum class Gating { swiglu, swish };

inline Conditioning parse_conditioning(const std::string& s) {
  if (s == "film") return Conditioning::film;
  if (s == "adarms") return Conditioning::adarms;
  throw std::invalid_argument("unknown head conditioning '" + s + "'");
}
inline std::string to_string(Conditioning c) { return c == Conditioning::film ? "film" : "adarms"; }

inline Gating parse_gating(const std::string& s) {
  if (s == "swiglu") return Gating::swiglu;
  if (s == "swish") return Gating::swish;
  throw std::invalid_argument("unknown head gating '" + s + "'");
}
inline std::string to_string(Gating g) { return g == Gating::swiglu ? "swiglu" : "swish"; }

struct HeadConfig {
  Conditioning conditioning = Conditioning::film;
  Gating gating = Gating::swiglu;
  int blocks = 3;
  int hidden_multiplier = 2;
  int time_embed_dim = 64;

  void validate() const {
    if (blocks < 1) throw std::invalid_argument("HeadConfig: blocks >= 1");
    if (hidden_multiplier < 1) throw std::invalid_argument("HeadConfig: hidden_multiplier >= 1");
    if (time_embed_dim <= 0 || time_embed_dim % 2)
      throw std::invalid_argument("HeadConfig: time_embed_dim must be positive and even");
  }
};

/// One point-wise FFN stack per tapped stage, conditioned on t through a
/// shared sinusoidal -> linear -> SiLU map. Block j of head k computes
///   u = (1 + scale) * x + shift                     (film)
///   u = (1 + scale) * rmsnorm(x) + shift            (adarms)
///   z = silu(W1 u) * (W2 u)  |  silu(W1 u)          (swiglu | swish)
///   y = x + W3 z
/// with (scale, shift) a linear map of the time embedding. Modulation and W3
/// start at zero, so every head is the identity at initialization.
template <class T>
class ProjectionHeads {
 public:
  ProjectionHeads() = default;
  ProjectionHeads(HeadConfig cfg, std::vector<int> stage_channels)
      : config_(cfg), channels_(std::move(stage_channels)) {
    config_.validate();
    if (channels_.empty()) throw std::invalid_argument("ProjectionHeads: no stages");
    const int d = config_.time_embed_dim;
    add_linear("time.fc", d, d);
    for (std::size_t k = 0; k < channels_.size(); ++k) {
      const int c = channels_[k];
      const int h = c * config_.hidden_multiplier;
      for (int j = 0; j < config_.blocks; ++j) {
        const std::string b = block_name(int(k), j);
        add_linear(b + ".mod", d, 2 * c);
        add_linear(b + ".w1", c, h);
        if (config_.gating == Gating::swiglu) add_linear(b + ".w2", c, h);
        add_linear(b + ".w3", h, c);
      }
    }
  }

  static ProjectionHeads initialized(HeadConfig cfg, std::vector<int> stage_channels, Rng& rng) {
    ProjectionHeads hd(cfg, std::move(stage_channels));
    for (auto& p : hd.params_) {
      const std::string& n = p.name;
      const bool zero = n.find(".mod.") != std::string::npos || n.find(".w3.") != std::string::npos;
      if (n.size() > 2 && n.compare(n.size() - 2, 2, ".w") == 0 && !zero) {
        const double std = 1.0 / std::sqrt(double(p.value.c()));
        for (auto& v : p.value.values()) v = T(rng.normal() * std);
      }
    }
    return hd;
  }

  const HeadConfig& config() const { return config_; }
  const std::vector<int>& stage_channels() const { return channels_; }
  std::size_t num_stages() const { return channels_.size(); }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  template <class U>
  ProjectionHeads<U> cast() const {
    ProjectionHeads<U> h(config_, channels_);
    h.params() = params_.template cast<U>();
    return h;
  }

  Var time_embedding(Tape<T>& tape, const std::vector<int>& ts) {
    Var e = tape.constant(timestep_embedding<T>(ts, config_.time_embed_dim));
    return ops::silu(tape, linear(tape, "time.fc", e));
  }

  /// Projects stage k; `temb` is [N, D, 1, 1] with one row per sample of x.
  Var project_stage(Tape<T>& tape, int k, Var x, Var temb) {
    const Shape s = tape.shape(x);
    if (k < 0 || k >= int(channels_.size()) || s.c != channels_[std::size_t(k)])
      throw ShapeError("ProjectionHeads: stage " + std::to_string(k) + " width mismatch for " +
                       s.str());
    Var h = x;
    const bool gated = config_.gating == Gating::swiglu;
    for (int j = 0; j < config_.blocks; ++j) {
      const std::string b = block_name(k, j);
      Var mod = linear(tape, b + ".mod", temb);
      h = ops::ffn_block(tape, h, mod, p(tape, b + ".w1.w"), p(tape, b + ".w1.b"),
                         gated ? p(tape, b + ".w2.w") : Var{}, gated ? p(tape, b + ".w2.b") : Var{},
                         p(tape, b + ".w3.w"), p(tape, b + ".w3.b"),
                         config_.conditioning == Conditioning::adarms);
    }
    return h;
  }

  /// Reference composition of the same block from elementary ops.
  Var project_stage_reference(Tape<T>& tape, int k, Var x, Var temb) {
    Var h = x;
    for (int j = 0; j < config_.blocks; ++j) {
      const std::string b = block_name(k, j);
      Var mod = linear(tape, b + ".mod", temb);
      Var u = config_.conditioning == Conditioning::adarms ? ops::rms_norm_channels(tape, h) : h;
      u = ops::modulate(tape, u, mod);
      Var z = ops::silu(tape, linear(tape, b + ".w1", u));
      if (config_.gating == Gating::swiglu) z = ops::mul(tape, z, linear(tape, b + ".w2", u));
      h = ops::add(tape, h, linear(tape, b + ".w3", z));
    }
    return h;
  }

  std::vector<Var> project(Tape<T>& tape, const std::vector<Var>& stack,
                           const std::vector<int>& ts) {
    if (stack.size() != channels_.size())
      throw ShapeError("ProjectionHeads: expected " + std::to_string(channels_.size()) +
                       " stages, got " + std::to_string(stack.size()));
    Var temb = time_embedding(tape, ts);
    std::vector<Var> out;
    for (std::size_t k = 0; k < stack.size(); ++k)
      out.push_back(project_stage(tape, int(k), stack[k], temb));
    return out;
  }

 private:
  static std::string block_name(int k, int j) {
    return "head" + std::to_string(k) + ".block" + std::to_string(j);
  }
  void add_linear(const std::string& name, int in, int out) {
    params_.add(name + ".w", Shape{out, in, 1, 1});
    params_.add(name + ".b", Shape{out, 1, 1, 1});
  }
  Var p(Tape<T>& tape, const std::string& name) { return tape.param(params_.get(name)); }
  Var linear(Tape<T>& tape, const std::string& name, Var x) {
    return ops::conv2d(tape, x, tape.param(params_.get(name + ".w")),
                       tape.param(params_.get(name + ".b")), 1, 0);
  }

  HeadConfig config_;
  std::vector<int> channels_;
  ParamSet<T> params_;
};

/// Projects every stage of a stack at timestep t without recording gradients.
template <class T>
FeatureStack<T> project_features(ProjectionHeads<T>& heads, const FeatureStack<T>& stack, int t) {
  if (stack.size() != heads.num_stages())
    throw ShapeError("project_features: stack has " + std::to_string(stack.size()) +
                     " stages, heads expect " + std::to_string(heads.num_stages()));
  Tape<T> tape(false);
  std::vector<Var> in;
  for (const auto& e : stack.entries) in.push_back(tape.constant(e.values));
  const int n = stack.entries.front().values.n();
  auto out = heads.project(tape, in, std::vector<int>(std::size_t(n), t));
  FeatureStack<T> r;
  r.provenance = stack.provenance;
  r.provenance.projected_t = t;
  for (std::size_t k = 0; k < out.size(); ++k)
    r.entries.push_back({stack.entries[k].stage_id, tape.value(out[k])});
  return r;
}

}  // namespace cleandift
