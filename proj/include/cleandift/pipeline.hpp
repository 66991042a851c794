// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/analysis.hpp"
#include "cleandift/config.hpp"
#include "cleandift/consolidator.hpp"
#include "cleandift/container.hpp"
#include "cleandift/correspondence.hpp"
#include "cleandift/data.hpp"
#include "cleandift/features.hpp"
#include "cleandift/hash.hpp"
#include "cleandift/plot.hpp"
#include "cleandift/probes.hpp"

namespace cleandift {

namespace fs = std::filesystem;

// ---- CSV -------------------------------------------------------------------

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.8g", v);
  return buf;
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}
  template <class... A>
  void row(const A&... cells) {
    std::vector<std::string> r{cell(cells)...};
    if (r.size() != header_.size()) throw std::logic_error("CsvTable: row width mismatch");
    rows_.push_back(std::move(r));
  }
  std::string str() const {
    std::string s = join(header_);
    for (const auto& r : rows_) s += join(r);
    return s;
  }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return fmt_num(v); }
  static std::string cell(float v) { return fmt_num(v); }
  template <class I>
    requires std::is_integral_v<I>
  static std::string cell(I v) {
    if constexpr (std::is_same_v<I, bool>) return v ? "true" : "false";
    else return std::to_string(v);
  }
  static std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s + "\n";
  }
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

struct CsvData {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    return -1;
  }
};

inline CsvData read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  CsvData d;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, ',')) out.push_back(c);
    return out;
  };
  if (std::getline(in, line)) d.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) d.rows.push_back(split(line));
  return d;
}

// ---- run directories -------------------------------------------------------

class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One command invocation: a fresh directory holding the resolved config,
/// outputs and a manifest with input and output checksums.
class RunDir {
 public:
  RunDir(const fs::path& out_root, const std::string& command, const Config& cfg)
      : command_(command) {
    fs::create_directories(out_root);
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%S", &tm);
    for (int k = 0;; ++k) {
      char name[96];
      std::snprintf(name, sizeof name, "%s-%s-%02d", command.c_str(), stamp, k);
      dir_ = out_root / name;
      if (fs::create_directory(dir_)) break;
      if (k > 99) throw ArtifactError("cannot allocate a run directory under " + out_root.string());
    }
    write_file_atomic(dir_ / "config.ini", cfg.to_ini());
    manifest_ = {{"command", command},
                 {"created_utc", stamp},
                 {"preset", cfg.preset()},
                 {"seed", cfg.integer("seed")},
                 {"status", "running"},
                 {"inputs", json::array()},
                 {"outputs", json::array()},
                 {"warnings", json::array()}};
    manifest_["config_sha256"] = sha256_hex(cfg.to_ini());
    flush();
  }

  const fs::path& path() const { return dir_; }
  fs::path operator/(const std::string& rel) const { return dir_ / rel; }

  void add_input(const fs::path& p, const std::string& role) {
    manifest_["inputs"].push_back({{"role", role}, {"path", fs::absolute(p).string()}, {"sha256", sha256_file(p)}});
  }
  void add_input_digest(const fs::path& p, const std::string& role, const std::string& digest) {
    manifest_["inputs"].push_back({{"role", role}, {"path", fs::absolute(p).string()}, {"sha256", digest}});
  }
  void write_text(const std::string& rel, const std::string& content) {
    write_file_atomic(dir_ / rel, content);
    add_output(rel);
  }
  void add_output(const std::string& rel) {
    manifest_["outputs"].push_back({{"path", rel}, {"sha256", sha256_file(dir_ / rel)}});
  }
  void add_output_digest(const std::string& rel, const std::string& digest) {
    manifest_["outputs"].push_back({{"path", rel}, {"sha256", digest}});
  }
  void warn(const std::string& w) {
    std::cerr << "warning: " << w << "\n";
    manifest_["warnings"].push_back(w);
  }
  json& manifest() { return manifest_; }
  void complete() {
    manifest_["status"] = "complete";
    flush();
  }
  void flush() { write_file_atomic(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

 private:
  std::string command_;
  fs::path dir_;
  json manifest_;
};

/// Most recent completed run of `command` under `out_root`.
inline std::optional<fs::path> latest_run(const fs::path& out_root, const std::string& command) {
  if (!fs::is_directory(out_root)) return std::nullopt;
  std::optional<fs::path> best;
  for (const auto& e : fs::directory_iterator(out_root)) {
    const std::string name = e.path().filename().string();
    if (!e.is_directory() || name.rfind(command + "-", 0) != 0) continue;
    if (!fs::exists(e.path() / "manifest.json")) continue;
    try {
      if (json::parse(read_file_bytes(e.path() / "manifest.json")).value("status", "") != "complete")
        continue;
    } catch (const std::exception&) {
      continue;
    }
    if (!best || name > best->filename().string()) best = e.path();
  }
  return best;
}

/// Hash over the sorted relative paths and contents of every file in `dir`.
inline std::string directory_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& f : files) {
    h.update(f.generic_string());
    h.update(read_file_bytes(dir / f));
  }
  return h.hex();
}

// ---- pipeline --------------------------------------------------------------

struct PipelineEnv {
  Config cfg;
  fs::path out = "runs";
  std::ostream* log = &std::cerr;
};

namespace detail {

inline fs::path resolve_artifact(const PipelineEnv& env, const std::string& key,
                                 const std::string& producer, const std::string& rel) {
  const std::string explicit_path = env.cfg.text(key);
  fs::path p;
  if (!explicit_path.empty()) {
    p = explicit_path;
  } else {
    auto run = latest_run(env.out, producer);
    if (!run)
      throw ArtifactError("no completed '" + producer + "' run under " + env.out.string() + "; run `cleandift " +
                          producer + "` first or set " + key);
    p = *run / rel;
  }
  if (!fs::exists(p)) throw ArtifactError("missing input " + p.string() + " (" + key + ")");
  return p;
}

inline fs::path data_root(const PipelineEnv& env) { return resolve_artifact(env, "paths.data", "gen-data", "data"); }

inline Dataset load_split(const PipelineEnv& env, RunDir& run, const std::string& split) {
  const fs::path dir = data_root(env) / split;
  if (!fs::exists(dir / "annotations.json"))
    throw ArtifactError("dataset split '" + split + "' missing under " + dir.parent_path().string());
  run.add_input(dir / "annotations.json", "data." + split);
  return load_dataset(dir);
}

inline NoiseSchedule schedule_from(const Config& c) {
  return build_schedule(int(c.integer("schedule.T")), parse_schedule_family(c.text("schedule.family")));
}

inline BackboneConfig backbone_from(const Config& c) {
  BackboneConfig b;
  b.image_size = int(c.integer("backbone.image_size"));
  b.base_channels = int(c.integer("backbone.base_channels"));
  b.stage_multipliers = c.int_list("backbone.stage_multipliers");
  b.num_taps = int(c.integer("backbone.num_taps"));
  b.timestep_embed_dim = int(c.integer("backbone.timestep_embed_dim"));
  b.norm_groups = int(c.integer("backbone.norm_groups"));
  try {
    b.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return b;
}

inline AlignmentConfig alignment_from(const Config& c) {
  AlignmentConfig a;
  a.metric = parse_metric(c.text("distill.metric"));
  a.use_heads = c.boolean("distill.use_heads");
  a.bins = int(c.integer("distill.bins"));
  a.steps = int(c.integer("distill.steps"));
  a.batch_size = int(c.integer("distill.batch_size"));
  a.learning_rate = c.real("distill.lr");
  a.warmup_steps = int(c.integer("distill.warmup_steps"));
  a.grad_clip = c.real("distill.grad_clip");
  a.stage_weights = c.real_list("distill.stage_weights");
  a.head_conditioning = parse_conditioning(c.text("distill.head_conditioning"));
  a.head_gating = parse_gating(c.text("distill.head_gating"));
  a.head_pretraining = parse_head_pretraining(c.text("distill.head_pretraining"));
  a.pretrain_steps = int(c.integer("distill.pretrain_steps"));
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return a;
}

/// Loads a checkpoint and checks the recorded parameter checksum.
inline LoadedDenoiser load_checked(const fs::path& p) {
  auto ld = load_denoiser(p);
  if (ld.meta.contains("checksum") && ld.meta.at("checksum") != ld.model.params().checksum())
    throw ArtifactError("checksum mismatch in " + p.string());
  return ld;
}

inline ProjectionHeads<float> load_heads_checked(const fs::path& p) {
  auto h = load_heads(p);
  if (read_container(p).header.value("checksum", "") != h.params().checksum())
    throw ArtifactError("checksum mismatch in " + p.string());
  return h;
}

struct Models {
  LoadedDenoiser teacher;
  std::optional<LoadedDenoiser> student;
  std::optional<ProjectionHeads<float>> heads;
};

inline Models load_models(const PipelineEnv& env, RunDir& run, bool want_student, bool want_heads) {
  const fs::path tp = resolve_artifact(env, "paths.teacher", "train-teacher", "teacher.cdft");
  run.add_input(tp, "teacher");
  Models m{load_checked(tp), std::nullopt, std::nullopt};
  m.teacher.model.set_role(ParamRole::teacher_frozen);
  if (want_student) {
    const fs::path sp = resolve_artifact(env, "paths.student", "distill", "student.cdft");
    run.add_input(sp, "student");
    m.student = load_checked(sp);
    if (m.student->schedule.alpha_bar != m.teacher.schedule.alpha_bar)
      throw ArtifactError("student and teacher were built with different schedules");
  }
  if (want_heads) {
    fs::path hp;
    const std::string explicit_path = env.cfg.text("paths.heads");
    if (!explicit_path.empty()) {
      hp = explicit_path;
    } else if (want_student) {
      hp = fs::path(run.manifest()["inputs"].back()["path"].get<std::string>()).parent_path() / "heads.cdft";
    }
    if (!hp.empty() && fs::exists(hp)) {
      run.add_input(hp, "heads");
      m.heads = load_heads_checked(hp);
    }
  }
  return m;
}

inline std::unique_ptr<FeatureCache> make_cache(const PipelineEnv& env, RunDir& run) {
  if (!env.cfg.boolean("eval.cache")) return nullptr;
  const std::string c = env.cfg.text("paths.cache");
  auto cache = std::make_unique<FeatureCache>(c.empty() ? env.out / "feature_cache" : fs::path(c));
  run.manifest()["feature_cache"] = {{"dir", fs::absolute(cache->dir()).string()}};
  return cache;
}

inline void record_cache(RunDir& run, const FeatureCache* cache) {
  if (cache) run.manifest()["feature_cache"]["entries"] = cache->touched();
}

template <class F>
void try_plot(RunDir& run, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    run.warn(std::string("plotting failed: ") + e.what());
  }
}

inline void log_line(const PipelineEnv& env, const std::string& s) { *env.log << s << std::endl; }

}  // namespace detail

// ---- plotting of CSV kinds -------------------------------------------------

/// Renders every recognised CSV of `src` into `dst` (SVG and PNG). Returns the
/// stems written.
inline std::vector<std::string> plot_directory(const fs::path& src, const fs::path& dst) {
  std::vector<std::string> written;
  fs::create_directories(dst);
  std::vector<fs::path> csvs;
  for (const auto& e : fs::directory_iterator(src))
    if (e.path().extension() == ".csv") csvs.push_back(e.path());
  std::sort(csvs.begin(), csvs.end());
  auto num = [](const std::string& s) { return std::stod(s); };
  for (const auto& p : csvs) {
    const CsvData d = read_csv(p);
    const std::string stem = p.stem().string();
    auto emit = [&](const std::string& name, const Chart& c) {
      write_chart(dst / name, c);
      written.push_back(name);
    };
    auto grouped_lines = [&](const std::vector<int>& key_cols, int xc, int yc) {
      std::map<std::string, std::map<double, std::pair<double, int>>> g;
      for (const auto& r : d.rows) {
        std::string k;
        for (int c : key_cols) k += (k.empty() ? "" : " ") + r[std::size_t(c)];
        auto& cell = g[k][num(r[std::size_t(xc)])];
        cell.first += num(r[std::size_t(yc)]);
        ++cell.second;
      }
      std::vector<Series> out;
      for (const auto& [k, pts] : g) {
        Series s{k, {}, {}};
        for (const auto& [x, v] : pts) {
          s.x.push_back(x);
          s.y.push_back(v.first / v.second);
        }
        out.push_back(std::move(s));
      }
      return out;
    };
    if (d.col("pck_img") >= 0 && d.col("mode") >= 0 && d.col("category") < 0) {
      for (const char* m : {"pck_img", "pck_bbox"}) {
        Chart c;
        c.title = std::string(m) + " vs timestep";
        c.xlabel = "t";
        c.ylabel = m;
        c.series = grouped_lines({d.col("mode")}, d.col("t"), d.col(m));
        emit(stem + "_" + m, c);
      }
    } else if (d.col("metric_value") >= 0 && d.col("source") >= 0) {
      Chart c;
      c.title = stem + " (mean over seeds)";
      c.xlabel = "t";
      c.ylabel = d.rows.empty() ? "metric" : d.rows.front()[std::size_t(d.col("metric_name"))];
      c.series = grouped_lines({d.col("source"), d.col("feature_map")}, d.col("t"), d.col("metric_value"));
      for (auto& s : c.series) s.name = s.name.substr(0, s.name.rfind(' ')) + " map " + s.name.substr(s.name.rfind(' ') + 1);
      emit(stem, c);
    } else if (d.col("fraction_noise") >= 0) {
      Chart c;
      c.title = "explained variance fractions";
      c.xlabel = "t";
      c.ylabel = "fraction";
      for (const char* m : {"fraction_noise", "fraction_clean_of_residual", "fraction_unexplained"}) {
        Series s{m, {}, {}};
        for (const auto& r : d.rows) {
          s.x.push_back(num(r[std::size_t(d.col("t"))]));
          s.y.push_back(num(r[std::size_t(d.col(m))]));
        }
        c.series.push_back(s);
      }
      emit(stem, c);
    } else if (d.col("loss") >= 0 && d.col("step") >= 0) {
      Chart c;
      c.title = stem;
      c.xlabel = "step";
      c.ylabel = "loss";
      const int pc = d.col("phase");
      c.series = pc >= 0 ? grouped_lines({pc}, d.col("step"), d.col("loss"))
                         : grouped_lines({}, d.col("step"), d.col("loss"));
      emit(stem, c);
    } else if (d.col("cell") >= 0 && d.col("pck_img") >= 0) {
      Chart c;
      c.kind = Chart::Kind::bar;
      c.title = "ablation PCK_img";
      c.ylabel = "pck_img";
      for (const auto& r : d.rows) {
        c.bar_labels.push_back(r[std::size_t(d.col("cell"))]);
        c.bar_values.push_back(num(r[std::size_t(d.col("pck_img"))]));
      }
      emit(stem, c);
    } else if (d.col("probe_source") >= 0) {
      Chart c;
      c.kind = Chart::Kind::bar;
      c.title = stem;
      c.ylabel = d.rows.empty() ? "metric" : d.rows.front()[std::size_t(d.col("metric_name"))];
      for (const auto& r : d.rows) {
        c.bar_labels.push_back(r[std::size_t(d.col("probe_source"))] + " probe / " +
                               r[std::size_t(d.col("feature_source"))]);
        c.bar_values.push_back(num(r[std::size_t(d.col("metric_value"))]));
      }
      emit(stem, c);
    } else if (d.col("similarity_final") >= 0) {
      Chart c;
      c.kind = Chart::Kind::bar;
      c.title = "held-out cosine per bin";
      c.ylabel = "cosine";
      for (const auto& r : d.rows)
        for (const char* m : {"similarity_step0", "similarity_final"}) {
          c.bar_labels.push_back("bin " + r[0] + " " + m);
          c.bar_values.push_back(num(r[std::size_t(d.col(m))]));
        }
      emit(stem, c);
    }
  }
  return written;
}

// ---- commands --------------------------------------------------------------

inline fs::path cmd_gen_data(const PipelineEnv& env) {
  RunDir run(env.out, "gen-data", env.cfg);
  const auto& c = env.cfg;
  const std::uint64_t seed = std::uint64_t(c.integer("seed"));
  const int canvas = int(c.integer("data.canvas"));
  const std::map<std::string, int> sizes{{"distill", int(c.integer("data.distill"))},
                                         {"teacher_extra", int(c.integer("data.teacher_extra"))},
                                         {"pairs", int(c.integer("data.pairs"))},
                                         {"probe_train", int(c.integer("data.probe_train"))},
                                         {"probe_test", int(c.integer("data.probe_test"))}};
  json summary = json::object();
  for (const auto& split : split_names()) {
    Dataset d = generate_split(split, sizes.at(split), seed, canvas);
    const fs::path dir = run.path() / "data" / split;
    save_dataset(dir, d);
    std::size_t kp = 0;
    for (const auto& p : d.pairs) kp += p.keypoints.size();
    summary[split] = {{"images", d.size()}, {"pairs", d.pairs.size()}, {"keypoints", kp}};
    run.add_output("data/" + split + "/annotations.json");
    run.add_output_digest("data/" + split, directory_digest(dir));
    detail::log_line(env, "gen-data: " + split + " " + std::to_string(d.size()) + " images");
  }
  run.manifest()["datasets"] = summary;
  run.complete();
  return run.path();
}

inline fs::path cmd_train_teacher(const PipelineEnv& env) {
  RunDir run(env.out, "train-teacher", env.cfg);
  const auto& c = env.cfg;
  Dataset a = detail::load_split(env, run, "distill");
  Dataset b = detail::load_split(env, run, "teacher_extra");
  Tensor<float> images = stack_batch<float>(std::vector<Tensor<float>>{a.images, b.images});
  const auto sched = detail::schedule_from(c);
  TeacherTrainConfig tc;
  tc.steps = int(c.integer("backbone.train_steps"));
  tc.batch_size = int(c.integer("backbone.train_batch_size"));
  tc.learning_rate = c.real("backbone.train_lr");
  tc.warmup_steps = int(c.integer("backbone.train_warmup"));
  tc.seed = std::uint64_t(c.integer("seed"));
  auto r = train_teacher<float>(images, sched, detail::backbone_from(c), tc, [&](int s, double l) {
    if (s % 100 == 0) detail::log_line(env, "train-teacher: step " + std::to_string(s) + " loss " + fmt_num(l));
  });
  save_denoiser(run / "teacher.cdft", r.model, sched, {{"steps", tc.steps}});
  run.add_output("teacher.cdft");
  CsvTable t({"step", "loss"});
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) t.row(int(i), r.loss_curve[i]);
  run.write_text("teacher_loss.csv", t.str());
  detail::try_plot(run, [&] { plot_directory(run.path(), run / "plots"); });
  run.complete();
  return run.path();
}

inline fs::path cmd_distill(const PipelineEnv& env) {
  RunDir run(env.out, "distill", env.cfg);
  const auto& c = env.cfg;
  auto models = detail::load_models(env, run, false, false);
  auto& teacher = models.teacher.model;
  const auto& sched = models.teacher.schedule;
  Tensor<float> images;
  const std::string ingest = c.text("data.ingest_dir");
  if (!ingest.empty()) {
    auto ing = ingest_folder(ingest, teacher.config().image_size);
    for (const auto& s : ing.skipped) run.warn("ingest skipped " + s);
    run.add_input_digest(ingest, "data.ingest", directory_digest(ingest));
    images = std::move(ing.images);
  } else {
    images = detail::load_split(env, run, "distill").images;
  }
  Dataset held = detail::load_split(env, run, "probe_test");
  const int nh = std::min(held.size(), int(c.integer("distill.heldout_images")));
  Tensor<float> hx = slice_batch(held.images, 0, nh);
  const auto cfg = detail::alignment_from(c);
  const std::uint64_t seed = std::uint64_t(c.integer("seed"));
  const std::uint64_t hseed = derive_seed(seed, 0x4e1d);

  // Step-0 reference: the untrained student and freshly initialised heads.
  Denoiser<float> s0 = init_student_from_teacher(teacher);
  Rng ir(derive_seed(seed, 0x4eadu));
  auto h0 = init_heads<float>(teacher.config(), cfg.head_config(), ir);
  const auto before = heldout_bin_similarity(teacher, s0, cfg.use_heads ? &h0 : nullptr, hx, sched, cfg.bins, hseed);

  const std::size_t K = std::size_t(teacher.config().num_taps);
  std::vector<std::string> hdr{"step", "phase", "loss", "learning_rate"};
  for (std::size_t k = 0; k < K; ++k) hdr.push_back("similarity_stage" + std::to_string(k));
  std::string log_csv;
  auto r = consolidate(teacher, images, sched, cfg, seed, [&](const DistillLogRow& row) {
    if (row.step % 100 == 0)
      detail::log_line(env, "distill: step " + std::to_string(row.step) + " loss " + fmt_num(row.loss));
  });
  {
    std::string s;
    for (std::size_t i = 0; i < hdr.size(); ++i) s += (i ? "," : "") + hdr[i];
    s += "\n";
    for (const auto& row : r.log) {
      s += std::to_string(row.step) + "," + row.phase + "," + fmt_num(row.loss) + "," + fmt_num(row.learning_rate);
      for (double v : row.stage_similarity) s += "," + fmt_num(v);
      s += "\n";
    }
    log_csv = s;
  }
  run.write_text("distill_log.csv", log_csv);
  const auto after =
      heldout_bin_similarity(teacher, r.student, cfg.use_heads ? &r.heads : nullptr, hx, sched, cfg.bins, hseed);
  CsvTable hb({"bin", "t_lo", "t_hi", "similarity_step0", "similarity_final"});
  for (int b = 0; b < cfg.bins; ++b) {
    const auto [lo, hi] = stratum_bounds(b, cfg.bins, sched.T);
    hb.row(b, lo, hi - 1, before[std::size_t(b)], after[std::size_t(b)]);
  }
  run.write_text("heldout_bins.csv", hb.str());
  save_denoiser(run / "student.cdft", r.student, sched, {{"teacher_checksum", teacher.params().checksum()}});
  run.add_output("student.cdft");
  if (cfg.use_heads) {
    save_heads(run / "heads.cdft", r.heads);
    run.add_output("heads.cdft");
  }
  detail::try_plot(run, [&] { plot_directory(run.path(), run / "plots"); });
  run.complete();
  return run.path();
}

inline fs::path cmd_eval_pck(const PipelineEnv& env) {
  RunDir run(env.out, "eval-pck", env.cfg);
  const auto& c = env.cfg;
  auto m = detail::load_models(env, run, true, false);
  Dataset pairs = detail::load_split(env, run, "pairs");
  auto cache = detail::make_cache(env, run);
  FeatureService svc(&m.teacher.model, &m.student->model, m.teacher.schedule, cache.get());
  SweepOptions o;
  o.timesteps = c.int_list("eval.timesteps");
  o.stage = int(c.integer("eval.stage"));
  o.alpha = c.real("eval.alpha");
  o.noise_seed = std::uint64_t(c.integer("eval.noise_seed"));
  o.ensemble_n = int(c.integer("eval.ensemble_n"));
  std::vector<CategoryRow> cats;
  const auto rows = timestep_sweep(svc, pairs, o, &cats);
  CsvTable sweep({"mode", "t", "pck_img", "pck_bbox", "n_keypoints"});
  for (const auto& r : rows) sweep.row(r.mode, r.t, r.pck_img, r.pck_bbox, r.n_keypoints);
  run.write_text("pck_sweep.csv", sweep.str());
  CsvTable cat({"mode", "t", "category", "pck_img", "pck_bbox", "n_keypoints"});
  for (const auto& r : cats) cat.row(r.mode, r.t, std::string(category_name(r.category)), r.pck_img, r.pck_bbox, r.n_keypoints);
  run.write_text("pck_per_category.csv", cat.str());

  // Baseline table: student, single-draw noisy teacher, and the ensembled one.
  const int en = int(c.integer("eval.baseline_ensemble_n"));
  CsvTable summary({"mode", "t", "pck_img", "pck_bbox", "n_keypoints"});
  SweepOptions eo = o;
  eo.ensemble_n = en;
  eo.include_control = false;
  eo.include_student = false;
  const auto ens = timestep_sweep(svc, pairs, eo);
  for (const auto& r : rows)
    if (r.mode == "student" && r.t == o.timesteps.front()) summary.row("student", 0, r.pck_img, r.pck_bbox, r.n_keypoints);
  for (const auto& r : rows)
    if (r.mode == "noisy_teacher") summary.row("noisy_teacher", r.t, r.pck_img, r.pck_bbox, r.n_keypoints);
  for (const auto& r : ens)
    summary.row("noisy_teacher_ensemble" + std::to_string(en), r.t, r.pck_img, r.pck_bbox, r.n_keypoints);
  run.write_text("pck_baselines.csv", summary.str());

  // Seed band of the single-draw noisy teacher.
  CsvTable band({"t", "seed", "pck_img", "pck_bbox", "n_keypoints"});
  const int seeds = int(c.integer("eval.probe_seeds"));
  for (int s = 0; s < seeds; ++s) {
    SweepOptions so = o;
    so.noise_seed = o.noise_seed + 7919ull * std::uint64_t(s);
    so.ensemble_n = 1;
    so.include_control = false;
    so.include_student = false;
    for (const auto& r : timestep_sweep(svc, pairs, so)) band.row(r.t, so.noise_seed, r.pck_img, r.pck_bbox, r.n_keypoints);
  }
  run.write_text("pck_noise_seeds.csv", band.str());
  detail::record_cache(run, cache.get());
  run.manifest()["counters"] = {{"backbone_forwards", svc.counters().backbone_forwards.load()},
                                {"cache_hits", svc.counters().cache_hits.load()},
                                {"cache_misses", svc.counters().cache_misses.load()}};
  detail::try_plot(run, [&] { plot_directory(run.path(), run / "plots"); });
  run.complete();
  return run.path();
}

inline fs::path cmd_eval_probe(const PipelineEnv& env, ProbeKind kind) {
  RunDir run(env.out, "eval-probe-" + to_string(kind), env.cfg);
  const auto& c = env.cfg;
  auto m = detail::load_models(env, run, true, true);
  Dataset train = detail::load_split(env, run, "probe_train");
  Dataset test = detail::load_split(env, run, "probe_test");
  auto cache = detail::make_cache(env, run);
  FeatureService svc(&m.teacher.model, &m.student->model, m.teacher.schedule, cache.get(),
                     m.heads ? &*m.heads : nullptr);
  ProbeSweepOptions o;
  o.timesteps = c.int_list("eval.probe_timesteps");
  o.feature_maps = c.int_list("eval.feature_maps");
  for (int fm : o.feature_maps)
    if (fm < 0 || fm >= m.teacher.model.config().num_taps)
      throw ConfigError("eval.feature_maps: no feature map " + std::to_string(fm));
  o.probe.epochs = int(c.integer("eval.probe_epochs"));
  o.probe.batch_positions = int(c.integer("eval.probe_batch"));
  o.probe.learning_rate = c.real("eval.probe_lr");
  o.knn_k = int(c.integer("eval.knn_k"));
  o.pool_method = parse_pool_method(c.text("eval.pool"));
  const std::uint64_t seed = std::uint64_t(c.integer("seed"));
  const std::uint64_t noise0 = std::uint64_t(c.integer("eval.noise_seed"));
  CsvTable t({"source", "t", "feature_map", "metric_name", "metric_value", "seed"});
  auto add = [&](const std::vector<ProbeSweepRow>& rows) {
    for (const auto& r : rows) t.row(r.source, r.t, r.feature_map, r.metric_name, r.metric_value, r.seed);
  };
  const int seeds = int(c.integer("eval.probe_seeds"));
  for (int s = 0; s < seeds; ++s) {
    ProbeSweepOptions so = o;
    so.probe.seed = seed + std::uint64_t(s);
    so.noise_seed = noise0 + 7919ull * std::uint64_t(s);
    add(probe_timestep_sweep(svc, train, test, kind, FeatureSource::noisy_teacher, so));
    detail::log_line(env, "eval-probe: noisy teacher seed " + std::to_string(s) + " done");
  }
  o.probe.seed = seed;
  o.noise_seed = noise0;
  add(probe_timestep_sweep(svc, train, test, kind, FeatureSource::student, o));
  if (m.heads)
    add(probe_timestep_sweep(svc, train, test, kind, FeatureSource::projected_student, o));
  else
    run.warn("no projection heads found; projected_student rows skipped");
  run.write_text("probe_sweep_" + to_string(kind) + ".csv", t.str());
  if (kind != ProbeKind::knn) {
    const int tt = int(c.integer("eval.transfer_t"));
    const int stage = int(c.integer("eval.stage"));
    auto rows = probe_transfer(svc, train, test, kind, tt, stage, o);
    CsvTable tr({"probe_source", "feature_source", "t", "feature_map", "metric_name", "metric_value"});
    for (const auto& r : rows) tr.row(r.probe_source, r.feature_source, tt, stage, r.metric_name, r.metric_value);
    run.write_text("transfer_" + to_string(kind) + ".csv", tr.str());
    const ProbeTask task = kind == ProbeKind::depth ? ProbeTask::depth : ProbeTask::segmentation;
    auto nrq = ExtractionRequest::noisy(tt, noise0, 1, {stage});
    save_probe(run / "teacher_probe.cdft",
               fit_probe(svc.extract(nrq, train.images).stage(stage).values, train, task, o.probe, o.binning),
               {{"t", tt}, {"feature_map", stage}});
    run.add_output("teacher_probe.cdft");
  }
  detail::record_cache(run, cache.get());
  detail::try_plot(run, [&] { plot_directory(run.path(), run / "plots"); });
  run.complete();
  return run.path();
}

inline fs::path cmd_analyze_noise(const PipelineEnv& env) {
  RunDir run(env.out, "analyze-noise", env.cfg);
  const auto& c = env.cfg;
  auto m = detail::load_models(env, run, false, false);
  Dataset d = detail::load_split(env, run, "probe_test");
  DecompositionOptions o;
  o.timesteps = c.int_list("eval.analysis_timesteps");
  o.stages = c.int_list("eval.analysis_stages");
  for (int s : o.stages)
    if (s < 0 || s >= m.teacher.model.config().num_taps)
      throw ConfigError("eval.analysis_stages: no feature map " + std::to_string(s));
  o.global_fit = c.boolean("eval.analysis_global_fit");
  o.seed = std::uint64_t(c.integer("seed"));
  const int n = std::min(d.size(), int(c.integer("eval.analysis_images")));
  auto rep = noise_decomposition_sweep(m.teacher.model, m.teacher.schedule, slice_batch(d.images, 0, n), o);
  CsvTable t({"t", "fraction_noise", "fraction_clean_of_residual", "fraction_unexplained", "n_images"});
  std::vector<double> ts, fn;
  for (const auto& r : rep.records) {
    t.row(r.t, r.fraction_noise, r.fraction_clean_of_residual, r.fraction_unexplained, r.n_images);
    ts.push_back(r.t);
    fn.push_back(r.fraction_noise);
  }
  run.write_text("variance_report.csv", t.str());
  run.manifest()["analysis"] = {{"fit", o.global_fit ? "global" : "per_image"},
                                {"stages", o.stages},
                                {"spearman_fraction_noise_vs_t", ts.size() >= 2 ? spearman(ts, fn) : 0.0}};
  detail::try_plot(run, [&] { plot_directory(run.path(), run / "plots"); });
  run.complete();
  return run.path();
}

struct AblationCell {
  std::string grid;
  std::string name;
  AlignmentConfig cfg;
};

/// The objective x heads grid (6 cells) and the head-architecture grid
/// (conditioning x gating x pretraining, 8 cells).
inline std::vector<AblationCell> ablation_cells(const AlignmentConfig& base) {
  std::vector<AblationCell> cells;
  for (Metric mt : {Metric::cosine, Metric::l2, Metric::l1})
    for (bool heads : {true, false}) {
      AlignmentConfig a = base;
      a.metric = mt;
      a.use_heads = heads;
      a.head_pretraining = HeadPretraining::none;
      a.head_conditioning = Conditioning::film;
      a.head_gating = Gating::swiglu;
      cells.push_back({"objective", to_string(mt) + (heads ? "+heads" : "-heads"), a});
    }
  for (Conditioning cd : {Conditioning::film, Conditioning::adarms})
    for (Gating g : {Gating::swiglu, Gating::swish})
      for (HeadPretraining p : {HeadPretraining::joint, HeadPretraining::frozen_after_pretrain}) {
        AlignmentConfig a = base;
        a.metric = Metric::cosine;
        a.use_heads = true;
        a.head_conditioning = cd;
        a.head_gating = g;
        a.head_pretraining = p;
        cells.push_back({"head_architecture", to_string(cd) + "/" + to_string(g) + "/" + to_string(p), a});
      }
  return cells;
}

inline fs::path cmd_ablate(const PipelineEnv& env) {
  RunDir run(env.out, "ablate", env.cfg);
  const auto& c = env.cfg;
  auto m = detail::load_models(env, run, false, false);
  auto& teacher = m.teacher.model;
  const auto& sched = m.teacher.schedule;
  Dataset distill = detail::load_split(env, run, "distill");
  Dataset pairs = detail::load_split(env, run, "pairs");
  AlignmentConfig base = detail::alignment_from(c);
  base.steps = int(c.integer("distill.ablation_steps"));
  base.pretrain_steps = int(c.integer("distill.ablation_pretrain_steps"));
  const int stage = int(c.integer("eval.stage"));
  const double alpha = c.real("eval.alpha");
  const std::uint64_t seed = std::uint64_t(c.integer("seed"));
  struct Result {
    AblationCell cell;
    PCKAggregate::Counts pck;
  };
  std::vector<Result> results;
  for (const auto& cell : ablation_cells(base)) {
    auto r = consolidate(teacher, distill.images, sched, cell.cfg, seed);
    FeatureService svc(&teacher, &r.student, sched);
    auto st = svc.extract(ExtractionRequest::student({stage}), pairs.images);
    results.push_back({cell, evaluate_pairs(pairs, st.stage(stage).values, alpha).all});
    detail::log_line(env, "ablate: " + cell.grid + " " + cell.name + " pck_img " + fmt_num(results.back().pck.pck_img()));
  }
  CsvTable t({"grid", "cell", "metric", "use_heads", "conditioning", "gating", "pretraining", "steps",
              "pck_img", "pck_bbox", "n_keypoints", "rank_in_grid"});
  for (const auto& r : results) {
    int rank = 1;
    for (const auto& o : results)
      if (o.cell.grid == r.cell.grid && o.pck.pck_img() > r.pck.pck_img()) ++rank;
    const auto& a = r.cell.cfg;
    t.row(r.cell.grid, r.cell.name, to_string(a.metric), a.use_heads, to_string(a.head_conditioning),
          to_string(a.head_gating), to_string(a.head_pretraining), a.steps, r.pck.pck_img(), r.pck.pck_bbox(),
          r.pck.total, rank);
  }
  run.write_text("ablation.csv", t.str());
  detail::try_plot(run, [&] { plot_directory(run.path(), run / "plots"); });
  run.complete();
  return run.path();
}

inline fs::path cmd_plot(const PipelineEnv& env, const fs::path& src) {
  if (!fs::is_directory(src)) throw ArtifactError("plot: not a run directory: " + src.string());
  RunDir run(env.out, "plot", env.cfg);
  run.manifest()["source_run"] = fs::absolute(src).string();
  for (const auto& e : fs::directory_iterator(src))
    if (e.path().extension() == ".csv") run.add_input(e.path(), "csv");
  detail::try_plot(run, [&] {
    for (const auto& s : plot_directory(src, run.path())) {
      run.add_output(s + ".svg");
      run.add_output(s + ".png");
    }
  });
  run.complete();
  return run.path();
}

/// Every stage in order, each in its own run directory, wired explicitly to
/// the artifacts of the previous stages.
inline std::vector<fs::path> cmd_run_all(const PipelineEnv& env, bool with_ablation = true) {
  std::vector<fs::path> runs;
  PipelineEnv e = env;
  runs.push_back(cmd_gen_data(e));
  e.cfg.set("paths.data", (runs.back() / "data").string());
  runs.push_back(cmd_train_teacher(e));
  e.cfg.set("paths.teacher", (runs.back() / "teacher.cdft").string());
  runs.push_back(cmd_distill(e));
  e.cfg.set("paths.student", (runs.back() / "student.cdft").string());
  if (fs::exists(runs.back() / "heads.cdft")) e.cfg.set("paths.heads", (runs.back() / "heads.cdft").string());
  runs.push_back(cmd_eval_pck(e));
  for (ProbeKind k : {ProbeKind::seg, ProbeKind::depth, ProbeKind::knn}) runs.push_back(cmd_eval_probe(e, k));
  runs.push_back(cmd_analyze_noise(e));
  if (with_ablation) runs.push_back(cmd_ablate(e));
  return runs;
}

}  // namespace cleandift
