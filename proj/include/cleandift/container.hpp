// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <unistd.h>
#include <vector>

#include "cleandift/backbone.hpp"
#include "cleandift/heads.hpp"
#include "cleandift/params.hpp"
#include "cleandift/schedule.hpp"
#include "cleandift/tensor.hpp"

namespace cleandift {

using json = nlohmann::json;

/// Tensor container: 8-byte magic, u64 little-endian header length, a JSON
/// header, then raw little-endian f32 blobs at the offsets the header lists
/// (relative to the start of the blob section).
inline constexpr char kContainerMagic[8] = {'C', 'D', 'F', 'T', 'C', 'N', 'T', '1'};

class ContainerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Container {
  json header;  // the "meta" object supplied by the writer
  std::string component;
  std::vector<NamedTensor> tensors;

  const Tensor<float>& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw ContainerError("container has no tensor '" + name + "'");
  }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void append_f32_le(std::string& out, const float* src, std::int64_t n) {
  const std::size_t bytes = std::size_t(n) * 4;
  const std::size_t at = out.size();
  out.resize(at + bytes);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + at, src, bytes);
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, src + i, 4);
      for (int b = 0; b < 4; ++b) out[at + std::size_t(i) * 4 + b] = char((u >> (8 * b)) & 0xff);
    }
  }
}

inline void read_f32_le(const unsigned char* p, float* dst, std::int64_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, p, std::size_t(n) * 4);
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 3; b >= 0; --b) u = (u << 8) | p[i * 4 + b];
      std::memcpy(dst + i, &u, 4);
    }
  }
}

}  // namespace detail

/// Writes atomically: the bytes go to a sibling temporary file that is then
/// renamed over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ContainerError("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw ContainerError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string encode_container(const std::string& component, const json& meta,
                                    const std::vector<NamedTensor>& tensors) {
  json h;
  h["format"] = "cleandift-container";
  h["version"] = 1;
  h["component"] = component;
  h["meta"] = meta;
  h["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const Shape s = t.value.shape();
    const std::uint64_t nbytes = std::uint64_t(t.value.numel()) * 4;
    h["tensors"].push_back({{"name", t.name},
                            {"shape", {s.n, s.c, s.h, s.w}},
                            {"dtype", "f32"},
                            {"offset", offset},
                            {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string hs = h.dump();
  std::string out(kContainerMagic, 8);
  detail::put_u64_le(out, hs.size());
  out += hs;
  out.reserve(out.size() + offset);
  for (const auto& t : tensors) detail::append_f32_le(out, t.value.data(), t.value.numel());
  return out;
}

inline void write_container(const std::filesystem::path& path, const std::string& component,
                            const json& meta, const std::vector<NamedTensor>& tensors) {
  write_file_atomic(path, encode_container(component, meta, tensors));
}

inline Container decode_container(const std::string& bytes, const std::string& origin = "buffer") {
  auto fail = [&](const std::string& m) { throw ContainerError(origin + ": " + m); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic, 8) != 0)
    fail("not a container (bad magic)");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = detail::get_u64_le(p + 8);
  if (hlen > bytes.size() - 16) fail("truncated header");
  json h;
  try {
    h = json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(hlen));
  } catch (const json::exception& e) {
    fail(std::string("malformed header: ") + e.what());
  }
  const std::uint64_t base = 16 + hlen;
  Container c;
  c.component = h.value("component", "");
  c.header = h.value("meta", json::object());
  for (const auto& e : h.at("tensors")) {
    if (e.at("dtype") != "f32") fail("unsupported dtype");
    const auto sh = e.at("shape").get<std::vector<int>>();
    if (sh.size() != 4) fail("tensor shape must have 4 extents");
    Shape s{sh[0], sh[1], sh[2], sh[3]};
    const auto off = e.at("offset").get<std::uint64_t>();
    const auto nb = e.at("nbytes").get<std::uint64_t>();
    if (nb != std::uint64_t(s.numel()) * 4 || base + off + nb > bytes.size())
      fail("tensor '" + e.at("name").get<std::string>() + "' out of bounds");
    Tensor<float> t(s);
    detail::read_f32_le(p + base + off, t.data(), t.numel());
    c.tensors.push_back({e.at("name").get<std::string>(), std::move(t)});
  }
  return c;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContainerError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline Container read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path), path.string());
}

// ---- typed payloads --------------------------------------------------------

inline json to_json(const BackboneConfig& c) {
  return {{"image_size", c.image_size},
          {"in_channels", c.in_channels},
          {"base_channels", c.base_channels},
          {"stage_multipliers", c.stage_multipliers},
          {"num_taps", c.num_taps},
          {"timestep_embed_dim", c.timestep_embed_dim},
          {"norm_groups", c.norm_groups}};
}

inline BackboneConfig backbone_from_json(const json& j) {
  BackboneConfig c;
  c.image_size = j.at("image_size");
  c.in_channels = j.at("in_channels");
  c.base_channels = j.at("base_channels");
  c.stage_multipliers = j.at("stage_multipliers").get<std::vector<int>>();
  c.num_taps = j.at("num_taps");
  c.timestep_embed_dim = j.at("timestep_embed_dim");
  c.norm_groups = j.at("norm_groups");
  c.validate();
  return c;
}

inline json to_json(const NoiseSchedule& s) {
  return {{"T", s.T}, {"family", to_string(s.family)}, {"alpha_bar", s.alpha_bar}};
}

inline NoiseSchedule schedule_from_json(const json& j) {
  NoiseSchedule s;
  s.T = j.at("T");
  s.family = parse_schedule_family(j.at("family"));
  s.alpha_bar = j.at("alpha_bar").get<std::vector<double>>();
  s.validate();
  return s;
}

inline json to_json(const HeadConfig& h) {
  return {{"conditioning", to_string(h.conditioning)},
          {"gating", to_string(h.gating)},
          {"blocks", h.blocks},
          {"hidden_multiplier", h.hidden_multiplier},
          {"time_embed_dim", h.time_embed_dim}};
}

inline HeadConfig head_config_from_json(const json& j) {
  HeadConfig h;
  h.conditioning = parse_conditioning(j.at("conditioning"));
  h.gating = parse_gating(j.at("gating"));
  h.blocks = j.at("blocks");
  h.hidden_multiplier = j.at("hidden_multiplier");
  h.time_embed_dim = j.at("time_embed_dim");
  h.validate();
  return h;
}

inline std::vector<NamedTensor> param_tensors(const ParamSet<float>& ps) {
  std::vector<NamedTensor> out;
  for (const auto& p : ps) out.push_back({p.name, p.value});
  return out;
}

inline void load_params(ParamSet<float>& ps, const Container& c) {
  if (c.tensors.size() != ps.size())
    throw ContainerError("parameter count mismatch: file has " + std::to_string(c.tensors.size()) +
                         ", model has " + std::to_string(ps.size()));
  for (const auto& t : c.tensors) {
    if (!ps.contains(t.name)) throw ContainerError("unexpected parameter " + t.name);
    auto& p = ps.get(t.name);
    if (!(p.value.shape() == t.value.shape()))
      throw ContainerError("shape mismatch for " + t.name);
    p.value = t.value;
  }
}

inline void save_denoiser(const std::filesystem::path& path, const Denoiser<float>& model,
                          const NoiseSchedule& schedule, json extra = json::object()) {
  json meta = std::move(extra);
  meta["backbone"] = to_json(model.config());
  meta["schedule"] = to_json(schedule);
  meta["role"] = model.role() == ParamRole::teacher_frozen ? "teacher_frozen" : "student_trainable";
  meta["checksum"] = model.params().checksum();
  write_container(path, "backbone", meta, param_tensors(model.params()));
}

struct LoadedDenoiser {
  Denoiser<float> model;
  NoiseSchedule schedule;
  json meta;
};

inline LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.component != "backbone")
    throw ContainerError(path.string() + ": expected a backbone container, found '" +
                         c.component + "'");
  LoadedDenoiser r{Denoiser<float>(backbone_from_json(c.header.at("backbone"))),
                   schedule_from_json(c.header.at("schedule")), c.header};
  load_params(r.model.params(), c);
  r.model.set_role(c.header.value("role", "teacher_frozen") == "teacher_frozen"
                       ? ParamRole::teacher_frozen
                       : ParamRole::student_trainable);
  return r;
}

inline void save_heads(const std::filesystem::path& path, const ProjectionHeads<float>& heads,
                       json extra = json::object()) {
  json meta = std::move(extra);
  meta["heads"] = to_json(heads.config());
  meta["stage_channels"] = heads.stage_channels();
  meta["checksum"] = heads.params().checksum();
  write_container(path, "heads", meta, param_tensors(heads.params()));
}

inline ProjectionHeads<float> load_heads(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.component != "heads")
    throw ContainerError(path.string() + ": expected a heads container, found '" + c.component +
                         "'");
  ProjectionHeads<float> h(head_config_from_json(c.header.at("heads")),
                           c.header.at("stage_channels").get<std::vector<int>>());
  load_params(h.params(), c);
  return h;
}

}  // namespace cleandift
