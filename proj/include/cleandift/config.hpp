// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cleandift {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class KeyType { integer, real, boolean, text, int_list, real_list };

struct KeySpec {
  const char* key;
  KeyType type;
  const char* fallback;
  const char* help;
};

/// Every recognised key with its default. Keys are `section.name`; `seed`
/// sits outside any section.
inline const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys{
      {"seed", KeyType::integer, "0", "base seed for every derived random stream"},
      {"schedule.family", KeyType::text, "cosine", "noise schedule: cosine or linear"},
      {"schedule.T", KeyType::integer, "1000", "number of diffusion timesteps"},
      {"backbone.image_size", KeyType::integer, "32", "input resolution"},
      {"backbone.base_channels", KeyType::integer, "16", "channels of the first level"},
      {"backbone.stage_multipliers", KeyType::int_list, "1,2,2", "channel multiplier per level"},
      {"backbone.num_taps", KeyType::integer, "5", "feature taps exported, coarsest first"},
      {"backbone.timestep_embed_dim", KeyType::integer, "64", "sinusoidal embedding width"},
      {"backbone.norm_groups", KeyType::integer, "8", "group-norm groups"},
      {"backbone.train_steps", KeyType::integer, "1000", "teacher training steps"},
      {"backbone.train_batch_size", KeyType::integer, "16", "teacher batch size"},
      {"backbone.train_lr", KeyType::real, "0.002", "teacher peak learning rate"},
      {"backbone.train_warmup", KeyType::integer, "100", "teacher warmup steps"},
      {"distill.metric", KeyType::text, "cosine", "alignment metric: cosine, l2 or l1"},
      {"distill.use_heads", KeyType::boolean, "true", "train with projection heads"},
      {"distill.bins", KeyType::integer, "3", "timestep strata per image (I)"},
      {"distill.steps", KeyType::integer, "2000", "optimizer steps"},
      {"distill.batch_size", KeyType::integer, "8", "images per step"},
      {"distill.lr", KeyType::real, "0.0001", "peak learning rate"},
      {"distill.warmup_steps", KeyType::integer, "100", "linear warmup steps"},
      {"distill.grad_clip", KeyType::real, "1.0", "global gradient-norm clip"},
      {"distill.stage_weights", KeyType::real_list, "", "per-stage loss weights (empty: all ones)"},
      {"distill.head_conditioning", KeyType::text, "film", "film or adarms"},
      {"distill.head_gating", KeyType::text, "swiglu", "swiglu or swish"},
      {"distill.head_pretraining", KeyType::text, "none", "none, joint or frozen_after_pretrain"},
      {"distill.pretrain_steps", KeyType::integer, "200", "head-only steps before distillation"},
      {"distill.heldout_images", KeyType::integer, "256", "held-out images for alignment tracking"},
      {"distill.ablation_steps", KeyType::integer, "200", "distillation steps per ablation cell"},
      {"distill.ablation_pretrain_steps", KeyType::integer, "50", "head pretraining steps per ablation cell"},
      {"eval.stage", KeyType::integer, "2", "feature map used for matching and analysis"},
      {"eval.alpha", KeyType::real, "0.1", "PCK threshold factor"},
      {"eval.timesteps", KeyType::int_list, "0,100,200,300,400,500,600,700,800,900", "sweep timesteps"},
      {"eval.ensemble_n", KeyType::integer, "1", "noise draws averaged for the noisy teacher"},
      {"eval.baseline_ensemble_n", KeyType::integer, "8", "ensemble size of the ensembled baseline row"},
      {"eval.noise_seed", KeyType::integer, "0", "noise seed for teacher extraction"},
      {"eval.feature_maps", KeyType::int_list, "0,1,2,3,4", "feature maps swept by probes"},
      {"eval.probe_timesteps", KeyType::int_list, "0,100,300,500,700,900", "probe sweep timesteps"},
      {"eval.probe_epochs", KeyType::integer, "4", "linear probe epochs"},
      {"eval.probe_batch", KeyType::integer, "2048", "positions per probe step"},
      {"eval.probe_lr", KeyType::real, "0.01", "probe learning rate"},
      {"eval.probe_seeds", KeyType::integer, "3", "probe seeds per noisy-teacher cell"},
      {"eval.knn_k", KeyType::integer, "10", "neighbours for kNN"},
      {"eval.pool", KeyType::text, "mean", "pooling for kNN: mean or max"},
      {"eval.transfer_t", KeyType::integer, "100", "teacher timestep of the transferred probe"},
      {"eval.analysis_timesteps", KeyType::int_list, "0,100,200,300,400,500,600,700,800,900,1000",
       "noise decomposition timesteps"},
      {"eval.analysis_images", KeyType::integer, "64", "images in the noise decomposition"},
      {"eval.analysis_global_fit", KeyType::boolean, "false", "one coefficient over all images"},
      {"eval.analysis_stages", KeyType::int_list, "2", "stages concatenated in the decomposition"},
      {"eval.cache", KeyType::boolean, "false", "use the on-disk feature cache"},
      {"data.canvas", KeyType::integer, "32", "scene size in pixels"},
      {"data.distill", KeyType::integer, "4096", "distillation images"},
      {"data.teacher_extra", KeyType::integer, "512", "extra teacher-training images"},
      {"data.pairs", KeyType::integer, "256", "correspondence pairs"},
      {"data.probe_train", KeyType::integer, "512", "probe training scenes"},
      {"data.probe_test", KeyType::integer, "256", "probe test scenes"},
      {"data.ingest_dir", KeyType::text, "", "optional image folder used for distillation"},
      {"paths.data", KeyType::text, "", "dataset root (empty: latest gen-data run)"},
      {"paths.teacher", KeyType::text, "", "teacher checkpoint (empty: latest train-teacher run)"},
      {"paths.student", KeyType::text, "", "student checkpoint (empty: latest distill run)"},
      {"paths.heads", KeyType::text, "", "heads checkpoint (empty: latest distill run)"},
      {"paths.cache", KeyType::text, "", "feature cache directory (empty: <out>/feature_cache)"},
  };
  return keys;
}

inline const KeySpec* find_key(const std::string& k) {
  for (const auto& s : config_keys())
    if (k == s.key) return &s;
  return nullptr;
}

/// Preset overrides applied on top of the defaults.
inline std::map<std::string, std::string> preset_values(const std::string& name) {
  if (name == "default") return {};
  if (name == "tiny")
    return {{"backbone.train_steps", "120"},   {"data.distill", "128"},
            {"data.teacher_extra", "32"},      {"data.pairs", "24"},
            {"data.probe_train", "48"},        {"data.probe_test", "24"},
            {"distill.steps", "30"},           {"distill.warmup_steps", "5"},
            {"distill.heldout_images", "16"},  {"distill.ablation_steps", "4"},
            {"distill.ablation_pretrain_steps", "2"}, {"distill.pretrain_steps", "10"},
            {"eval.timesteps", "0,500,900"},   {"eval.probe_timesteps", "0,500"},
            {"eval.feature_maps", "2,4"},      {"eval.probe_epochs", "1"},
            {"eval.probe_seeds", "2"},         {"eval.baseline_ensemble_n", "2"},
            {"eval.analysis_timesteps", "0,250,500,750,1000"}, {"eval.analysis_images", "8"}, {"eval.cache", "true"}};
  if (name == "paper_scale")
    return {{"distill.batch_size", "8"}, {"distill.lr", "2e-6"}, {"distill.steps", "400"},
            {"distill.bins", "3"}, {"distill.warmup_steps", "0"}};
  throw ConfigError("unknown preset '" + name + "' (expected tiny, default or paper_scale)");
}

class Config {
 public:
  Config() {
    for (const auto& k : config_keys()) values_[k.key] = k.fallback;
  }

  /// Defaults, then preset, then file, then overrides.
  static Config resolve(const std::string& preset, const std::filesystem::path& file,
                        const std::map<std::string, std::string>& overrides) {
    Config c;
    c.preset_ = preset;
    for (const auto& [k, v] : preset_values(preset)) c.set(k, v);
    if (!file.empty()) c.merge_file(file);
    for (const auto& [k, v] : overrides) c.set(k, v);
    c.validate();
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    const KeySpec* s = find_key(key);
    if (!s) throw ConfigError("unknown config key '" + key + "'");
    check_type(*s, value);
    values_[key] = value;
  }

  void merge_file(const std::filesystem::path& file) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
      pt::read_ini(file.string(), tree);
    } catch (const pt::ini_parser_error& e) {
      throw ConfigError("cannot read config " + file.string() + ": " + e.what());
    }
    for (const auto& [name, node] : tree) {
      if (node.empty()) {
        set(name, node.data());
      } else {
        for (const auto& [k, v] : node) set(name + "." + k, v.data());
      }
    }
  }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  std::int64_t integer(const std::string& key) const { return std::stoll(raw(key)); }
  double real(const std::string& key) const { return std::stod(raw(key)); }
  bool boolean(const std::string& key) const { return parse_bool(raw(key)); }
  std::string text(const std::string& key) const { return raw(key); }
  std::vector<int> int_list(const std::string& key) const { return parse_int_list(raw(key)); }
  std::vector<double> real_list(const std::string& key) const { return parse_real_list(raw(key)); }
  const std::string& preset() const { return preset_; }

  /// INI rendering of every resolved key, grouped by section.
  std::string to_ini() const {
    std::ostringstream os;
    os << "# resolved configuration (preset " << preset_ << ")\n";
    os << "seed = " << raw("seed") << "\n";
    std::string section;
    for (const auto& k : config_keys()) {
      const std::string key = k.key;
      const auto dot = key.find('.');
      if (dot == std::string::npos) continue;
      if (key.substr(0, dot) != section) {
        section = key.substr(0, dot);
        os << "\n[" << section << "]\n";
      }
      os << key.substr(dot + 1) << " = " << raw(key) << "\n";
    }
    return os.str();
  }

  void validate() const {
    auto positive = [&](const char* k) {
      if (integer(k) <= 0) throw ConfigError(std::string(k) + " must be positive");
    };
    for (const char* k : {"schedule.T", "backbone.train_steps", "backbone.train_batch_size",
                          "distill.bins", "distill.batch_size", "data.canvas", "data.distill",
                          "data.teacher_extra", "data.pairs", "data.probe_train", "data.probe_test",
                          "eval.probe_epochs", "eval.probe_batch", "eval.probe_seeds", "eval.knn_k",
                          "eval.ensemble_n", "eval.baseline_ensemble_n", "eval.analysis_images",
                          "distill.heldout_images"})
      positive(k);
    for (const char* k : {"distill.steps", "distill.warmup_steps", "distill.pretrain_steps",
                          "distill.ablation_steps", "distill.ablation_pretrain_steps",
                          "backbone.train_warmup"})
      if (integer(k) < 0) throw ConfigError(std::string(k) + " must be >= 0");
    const int T = int(integer("schedule.T"));
    for (const char* k : {"eval.timesteps", "eval.probe_timesteps", "eval.analysis_timesteps"}) {
      const auto ts = int_list(k);
      if (ts.empty()) throw ConfigError(std::string(k) + " must not be empty");
      for (int t : ts)
        if (t < 0 || t > T) throw ConfigError(std::string(k) + ": timestep outside [0, T]");
    }
    const int tt = int(integer("eval.transfer_t"));
    if (tt < 0 || tt > T) throw ConfigError("eval.transfer_t outside [0, T]");
    const auto sw = real_list("distill.stage_weights");
    if (!sw.empty() && std::int64_t(sw.size()) != integer("backbone.num_taps"))
      throw ConfigError("distill.stage_weights needs one weight per feature tap");
    for (double w : sw)
      if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("distill.stage_weights must be finite and >= 0");
    if (real("eval.alpha") <= 0) throw ConfigError("eval.alpha must be positive");
    if (real("distill.lr") <= 0 || real("backbone.train_lr") <= 0)
      throw ConfigError("learning rates must be positive");
    if (real("eval.probe_lr") <= 0) throw ConfigError("eval.probe_lr must be positive");
    const std::string pool = text("eval.pool");
    if (pool != "mean" && pool != "max") throw ConfigError("eval.pool must be mean or max");
    const std::string fam = text("schedule.family");
    if (fam != "cosine" && fam != "linear") throw ConfigError("schedule.family must be cosine or linear");
    const std::string m = text("distill.metric");
    if (m != "cosine" && m != "l2" && m != "l1") throw ConfigError("distill.metric must be cosine, l2 or l1");
    const std::string hc = text("distill.head_conditioning"), hg = text("distill.head_gating"),
                      hp = text("distill.head_pretraining");
    if (hc != "film" && hc != "adarms") throw ConfigError("distill.head_conditioning must be film or adarms");
    if (hg != "swiglu" && hg != "swish") throw ConfigError("distill.head_gating must be swiglu or swish");
    if (hp != "none" && hp != "joint" && hp != "frozen_after_pretrain")
      throw ConfigError("distill.head_pretraining must be none, joint or frozen_after_pretrain");
  }

  static bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("not a boolean: '" + v + "'");
  }

  /// Comma-separated reals; the empty string is the empty list.
  static std::vector<double> parse_real_list(const std::string& v) {
    std::vector<double> out;
    if (v.find_first_not_of(" \t") == std::string::npos) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
      if (b == std::string::npos) throw ConfigError("empty element in list '" + v + "'");
      const std::string s = item.substr(b, e - b + 1);
      std::size_t used = 0;
      double x = 0;
      try {
        x = std::stod(s, &used);
      } catch (const std::exception&) {
        throw ConfigError("not a real list: '" + v + "'");
      }
      if (used != s.size()) throw ConfigError("not a real list: '" + v + "'");
      out.push_back(x);
    }
    return out;
  }

  static std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
      if (b == std::string::npos) throw ConfigError("empty element in list '" + v + "'");
      std::size_t used = 0;
      const std::string s = item.substr(b, e - b + 1);
      int x = 0;
      try {
        x = std::stoi(s, &used);
      } catch (const std::exception&) {
        throw ConfigError("not an integer list: '" + v + "'");
      }
      if (used != s.size()) throw ConfigError("not an integer list: '" + v + "'");
      out.push_back(x);
    }
    return out;
  }

 private:
  static void check_type(const KeySpec& s, const std::string& v) {
    const std::string what = std::string(s.key) + " = '" + v + "'";
    try {
      std::size_t used = 0;
      switch (s.type) {
        case KeyType::integer:
          std::stoll(v, &used);
          if (used != v.size()) throw ConfigError("");
          break;
        case KeyType::real:
          std::stod(v, &used);
          if (used != v.size()) throw ConfigError("");
          break;
        case KeyType::boolean: parse_bool(v); break;
        case KeyType::int_list: parse_int_list(v); break;
        case KeyType::real_list: parse_real_list(v); break;
        case KeyType::text: break;
      }
    } catch (const std::exception&) {
      throw ConfigError("invalid value for " + what);
    }
  }

  std::map<std::string, std::string> values_;
  std::string preset_ = "default";
};

}  // namespace cleandift
