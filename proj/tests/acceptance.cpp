// SPDX-License-Identifier: Apache-2.0
// Acceptance gate: one PASS/FAIL line per criterion. Criteria 6-10 run the
// default-preset pipeline once; 11 runs the tiny preset twice.
#include <malloc.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>

#include "cleandift/pipeline.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cleandift;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  char b[48];
  std::snprintf(b, sizeof b, "%.*g", prec, v);
  return b;
}

// ---- 1 ---------------------------------------------------------------------

Outcome forward_statistics() {
  const auto s = build_schedule(1000, ScheduleFamily::cosine);
  const int n = 10000;
  const double var0 = 0.3;
  Outcome o{true, ""};
  for (int t : {0, s.T / 4, s.T / 2, 3 * s.T / 4, s.T}) {
    Rng r(derive_seed(17, std::uint64_t(t)));
    Tensor<double> x0({n, 1, 1, 1}), eps({n, 1, 1, 1});
    for (int i = 0; i < n; ++i) {
      x0[i] = std::sqrt(var0) * r.normal();
      eps[i] = r.normal();
    }
    const auto xt = forward_noise(x0, eps, t, s).xt;
    double m = 0, m2 = 0, m4 = 0;
    for (int i = 0; i < n; ++i) m += xt[i];
    m /= n;
    for (int i = 0; i < n; ++i) {
      const double d = xt[i] - m;
      m2 += d * d;
      m4 += d * d * d * d;
    }
    m2 /= n - 1;
    m4 /= n;
    const double ab = s.alpha_bar[std::size_t(t)];
    const double expected = ab * var0 + (1 - ab);
    const double se = std::sqrt((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n);
    const double z = std::abs(m2 - expected) / se;
    o.pass = o.pass && z < 3;
    o.detail += "t=" + std::to_string(t) + " z=" + fmt(z, 3) + " ";
  }
  return o;
}

// ---- 2 ---------------------------------------------------------------------

Outcome gradient_checks() {
  Rng rng(1);
  auto cfg = testing_support::small_backbone(8);
  auto student = Denoiser<double>::initialized(cfg, rng);
  testing_support::randomize(student.params(), 2, 0.2);
  student.set_role(ParamRole::student_trainable);
  const auto x = testing_support::random_tensor<double>({2, 3, 8, 8}, 3);
  std::vector<Tensor<double>> targets;
  for (const auto& g : cfg.tap_geometry())
    targets.push_back(testing_support::random_tensor<double>({2, g.channels, g.size, g.size}, 4 + targets.size()));
  const std::vector<int> ts{30, 800};
  Outcome o{true, ""};
  double worst = 0;
  int fewest = 1 << 30;
  for (Metric metric : {Metric::cosine, Metric::l1, Metric::l2})
    for (bool use_heads : {true, false}) {
      auto heads = init_heads<double>(cfg, testing_support::small_heads(), rng);
      testing_support::randomize(heads.params(), 5, 0.3);
      auto run = [&](bool backward) {
        Tape<double> t;
        auto out = student.forward(t, t.constant(x), {0, 0}, true, false);
        std::vector<Var> p = use_heads ? heads.project(t, out.taps, ts) : out.taps;
        std::vector<Var> tv;
        for (const auto& tg : targets) tv.push_back(t.constant(tg));
        auto terms = alignment_loss(t, p, tv, metric, {1.0, 0.5});
        if (backward) t.backward(terms.loss);
        return t.value(terms.loss)[0];
      };
      student.params().zero_grad();
      heads.params().zero_grad();
      run(true);
      auto g = testing_support::check_gradients(student.params(), [&] { return run(false); }, 1);
      int checked = g.checked;
      double rel = g.max_rel;
      if (use_heads) {
        auto gh = testing_support::check_gradients(heads.params(), [&] { return run(false); }, 1);
        checked += gh.checked;
        rel = std::max(rel, gh.max_rel);
      }
      worst = std::max(worst, rel);
      fewest = std::min(fewest, checked);
      o.pass = o.pass && checked >= 20 && rel < 1e-4;
    }
  o.detail = "max_rel=" + fmt(worst, 3) + " min_params_checked=" + std::to_string(fewest);
  return o;
}

// ---- 3 ---------------------------------------------------------------------

FeatureStack<float> random_stack(const BackboneConfig& b, int n, std::uint64_t seed) {
  FeatureStack<float> s;
  int k = 0;
  for (const auto& g : b.tap_geometry()) {
    s.entries.push_back({k, testing_support::random_tensor<float>({n, g.channels, g.size, g.size},
                                                                  seed * 31 + std::uint64_t(k))});
    ++k;
  }
  return s;
}

Outcome loss_exactness() {
  BackboneConfig cfg;
  const double K = cfg.num_taps;
  Outcome o{true, ""};
  for (int i = 0; i < 5; ++i) {
    auto s = random_stack(cfg, 2, std::uint64_t(1000 + i));
    o.pass = o.pass && alignment_loss(s, s, Metric::cosine).loss == -K;
    o.pass = o.pass && alignment_loss(s, s, Metric::l1).loss == 0.0;
    o.pass = o.pass && alignment_loss(s, s, Metric::l2).loss == 0.0;
  }
  const bool exact = o.pass;
  double lo = 1e9, hi = -1e9;
  for (int i = 0; i < 1000; ++i) {
    auto a = random_stack(cfg, 1, std::uint64_t(2 * i));
    auto b = random_stack(cfg, 1, std::uint64_t(2 * i + 1));
    if (i % 4 == 0)
      for (auto& e : b.entries) {
        e.values = a.stage(e.stage_id).values;
        for (auto& v : e.values.values()) v = -v;
      }
    const double l = alignment_loss(a, b, Metric::cosine).loss;
    lo = std::min(lo, l);
    hi = std::max(hi, l);
  }
  o.pass = o.pass && lo >= -K && hi <= K;
  o.detail = std::string("identical exact=") + (exact ? "yes" : "no") + " random range [" + fmt(lo) + ", " + fmt(hi) + "]";
  return o;
}

// ---- 4 ---------------------------------------------------------------------

Outcome oracle_equivalence() {
  int match_ok = 0, pck_ok = 0, miou_ok = 0, rmse_ok = 0, knn_ok = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    auto inst = oracles::random_match_instance(5000 + i);
    const auto [y, x] = oracles::best_cell(inst.query, inst.maps, 1);
    auto p = match_keypoint(inst.query, inst.maps, 1, 4 * inst.maps.w(), 4 * inst.maps.h());
    match_ok += p.x == (x + 0.5) * 4 && p.y == (y + 0.5) * 4;
  }
  for (std::uint64_t i = 0; i < 100; ++i) {
    Rng r(9000 + i);
    CorrespondenceAnnotation a;
    a.width = a.height = 32;
    a.target_bbox = {0, 0, r.uniform(1, 30), r.uniform(1, 30)};
    std::vector<Point2> q;
    const int n = int(r.uniform_int(1, 25));
    for (int k = 0; k < n; ++k) {
      a.keypoints.push_back({"k", 0, 0, r.uniform(0, 32), r.uniform(0, 32)});
      // Some predictions land exactly on the threshold.
      if (k % 5 == 0) q.push_back({a.keypoints.back().tx + 3.0, a.keypoints.back().ty + 4.0});
      else q.push_back({r.uniform(0, 32), r.uniform(0, 32)});
    }
    const double alpha = 5.0 / 32;
    auto res = compute_pck(q, a, alpha);
    pck_ok += std::abs(res.pck(PCKMode::img) - oracles::pck(q, a, alpha, false)) < 1e-10 &&
              std::abs(res.pck(PCKMode::bbox) - oracles::pck(q, a, alpha, true)) < 1e-10;

    std::vector<int> pl, tl;
    const int np = int(r.uniform_int(5, 300));
    for (int k = 0; k < np; ++k) {
      pl.push_back(int(r.uniform_int(0, kNumClasses)));
      tl.push_back(int(r.uniform_int(0, i % 2 ? 3 : kNumClasses)));
    }
    miou_ok += std::abs(segmentation_miou(pl, tl, kNumClasses).miou - oracles::miou(pl, tl, kNumClasses)) < 1e-10;

    std::vector<double> pd, td;
    std::vector<bool> valid;
    for (int k = 0; k < 64; ++k) {
      pd.push_back(r.uniform(1, 10));
      td.push_back(r.uniform(1, 10));
      valid.push_back(k == 0 || r.uniform() < 0.7);
    }
    rmse_ok += std::abs(depth_rmse(pd, td, valid) - oracles::rmse(pd, td, valid)) < 1e-10;

    const int N = int(r.uniform_int(10, 50)), C = int(r.uniform_int(2, 8)), k = int(r.uniform_int(1, 11));
    RowMatrixF X(N, C);
    std::vector<int> labels;
    for (int row = 0; row < N; ++row) {
      for (int c = 0; c < C; ++c) X(row, c) = float(r.uniform_int(-2, 3));
      labels.push_back(int(r.uniform_int(0, 4)));
    }
    std::vector<float> query(static_cast<std::size_t>(C));
    for (auto& v : query) v = float(r.uniform_int(-2, 3));
    knn_ok += knn_classify(X, labels, query, k) == oracles::knn(X, labels, query, k);
  }
  Outcome o;
  o.pass = match_ok == 200 && pck_ok == 100 && miou_ok == 100 && rmse_ok == 100 && knn_ok == 100;
  o.detail = "matcher " + std::to_string(match_ok) + "/200, pck " + std::to_string(pck_ok) + "/100, miou " +
             std::to_string(miou_ok) + "/100, rmse " + std::to_string(rmse_ok) + "/100, knn " +
             std::to_string(knn_ok) + "/100";
  return o;
}

// ---- 5 ---------------------------------------------------------------------

Outcome stratified_sampler() {
  const int T = 1000, draws = 100000;
  // Nine stratum tests (1 + 3 + 5) at a family-wise level of 0.01: the
  // 1 - 0.01/9 quantile of chi-square with 9 degrees of freedom.
  const double critical = 27.603;
  Outcome o{true, ""};
  double worst = 0;
  std::int64_t outside = 0;
  for (int I : {1, 3, 5}) {
    Rng rng(derive_seed(23, std::uint64_t(I)));
    std::vector<std::vector<std::int64_t>> counts(static_cast<std::size_t>(I));
    for (int i = 0; i < I; ++i) {
      auto [lo, hi] = stratum_bounds(i, I, T);
      counts[std::size_t(i)].assign(std::size_t(hi - lo), 0);
    }
    for (int d = 0; d < draws; ++d) {
      auto s = sample_stratified_timesteps(I, T, rng);
      if (int(s.timesteps.size()) != I) {
        ++outside;
        continue;
      }
      for (int i = 0; i < I; ++i) {
        auto [lo, hi] = stratum_bounds(i, I, T);
        const int t = s.timesteps[std::size_t(i)];
        if (t < lo || t >= hi) {
          ++outside;
          continue;
        }
        ++counts[std::size_t(i)][std::size_t(t - lo)];
      }
    }
    for (int i = 0; i < I; ++i) {
      const auto& c = counts[std::size_t(i)];
      const int w = int(c.size());
      std::vector<double> obs(10, 0.0), width(10, 0.0);
      for (int k = 0; k < w; ++k) {
        obs[std::size_t(k * 10 / w)] += double(c[std::size_t(k)]);
        width[std::size_t(k * 10 / w)] += 1;
      }
      double chi = 0;
      for (int b = 0; b < 10; ++b) {
        const double e = double(draws) * width[std::size_t(b)] / w;
        chi += (obs[std::size_t(b)] - e) * (obs[std::size_t(b)] - e) / e;
      }
      worst = std::max(worst, chi);
      o.pass = o.pass && chi < critical;
    }
  }
  o.pass = o.pass && outside == 0;
  o.detail = "out_of_bin=" + std::to_string(outside) + " max_chi2=" + fmt(worst) + " (crit " + fmt(critical) + ")";
  return o;
}

// ---- pipeline helpers ------------------------------------------------------

CsvData csv(const fs::path& p) { return read_csv(p); }

double num(const CsvData& d, const std::vector<std::string>& row, const std::string& col) {
  const int c = d.col(col);
  if (c < 0) throw std::runtime_error("missing column " + col);
  return std::stod(row[std::size_t(c)]);
}
std::string str(const CsvData& d, const std::vector<std::string>& row, const std::string& col) {
  const int c = d.col(col);
  if (c < 0) throw std::runtime_error("missing column " + col);
  return row[std::size_t(c)];
}

struct DefaultRuns {
  fs::path data, teacher, distill, pck, seg, depth, knn, noise, ablate;
  double t_gen = 0, t_teacher = 0, t_distill = 0, t_pck = 0, t_seg = 0, t_depth = 0, t_knn = 0, t_noise = 0,
         t_ablate = 0;
  std::string error;
};

template <class F>
fs::path timed(double& secs, F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::path p = f();
  secs = seconds_since(t0);
  return p;
}

DefaultRuns run_default(const fs::path& out, std::ostream& log) {
  DefaultRuns r;
  PipelineEnv e;
  e.cfg = Config::resolve("default", {}, {});
  e.out = out;
  e.log = &log;
  try {
    r.data = timed(r.t_gen, [&] { return cmd_gen_data(e); });
    e.cfg.set("paths.data", (r.data / "data").string());
    r.teacher = timed(r.t_teacher, [&] { return cmd_train_teacher(e); });
    e.cfg.set("paths.teacher", (r.teacher / "teacher.cdft").string());
    r.distill = timed(r.t_distill, [&] { return cmd_distill(e); });
    e.cfg.set("paths.student", (r.distill / "student.cdft").string());
    e.cfg.set("paths.heads", (r.distill / "heads.cdft").string());
    r.pck = timed(r.t_pck, [&] { return cmd_eval_pck(e); });
    r.noise = timed(r.t_noise, [&] { return cmd_analyze_noise(e); });
    r.seg = timed(r.t_seg, [&] { return cmd_eval_probe(e, ProbeKind::seg); });
    r.depth = timed(r.t_depth, [&] { return cmd_eval_probe(e, ProbeKind::depth); });
    r.knn = timed(r.t_knn, [&] { return cmd_eval_probe(e, ProbeKind::knn); });
    r.ablate = timed(r.t_ablate, [&] { return cmd_ablate(e); });
  } catch (const std::exception& ex) {
    r.error = ex.what();
  }
  return r;
}

// ---- 6 ---------------------------------------------------------------------

Outcome variance_endpoints(const DefaultRuns& r) {
  if (r.noise.empty()) return {false, "analyze-noise did not run: " + r.error};
  auto d = csv(r.noise / "variance_report.csv");
  std::vector<double> ts, fn;
  for (const auto& row : d.rows) {
    ts.push_back(num(d, row, "t"));
    fn.push_back(num(d, row, "fraction_noise"));
  }
  if (ts.size() < 8) return {false, "fewer than 8 timesteps"};
  const auto lo = std::min_element(ts.begin(), ts.end()) - ts.begin();
  const auto hi = std::max_element(ts.begin(), ts.end()) - ts.begin();
  const double rho = spearman(fn, ts);
  Outcome o;
  o.pass = ts[std::size_t(lo)] == 0 && ts[std::size_t(hi)] == 1000 && fn[std::size_t(hi)] >= 0.95 &&
           fn[std::size_t(lo)] <= 0.3 && rho >= 0.9 && r.t_noise < 300;
  o.detail = "fraction_noise(T)=" + fmt(fn[std::size_t(hi)]) + " fraction_noise(0)=" + fmt(fn[std::size_t(lo)]) +
             " spearman=" + fmt(rho) + " n_t=" + std::to_string(ts.size()) + " runtime=" + fmt(r.t_noise, 3) + "s";
  return o;
}

// ---- 7 ---------------------------------------------------------------------

Outcome distillation_effect(const DefaultRuns& r) {
  if (r.pck.empty()) return {false, "pipeline stopped early: " + r.error};
  Outcome o{true, ""};
  auto hb = csv(r.distill / "heldout_bins.csv");
  for (const auto& row : hb.rows) {
    const double a = num(hb, row, "similarity_step0"), b = num(hb, row, "similarity_final");
    o.pass = o.pass && b > a;
    o.detail += "bin" + str(hb, row, "bin") + " " + fmt(a, 3) + "->" + fmt(b, 3) + "; ";
  }
  auto sw = csv(r.pck / "pck_sweep.csv");
  std::map<int, double> noisy, student;
  for (const auto& row : sw.rows) {
    const std::string mode = str(sw, row, "mode");
    const int t = int(num(sw, row, "t"));
    if (mode == "noisy_teacher") noisy[t] = num(sw, row, "pck_img");
    if (mode == "student") student[t] = num(sw, row, "pck_img");
  }
  if (!noisy.count(0) || !noisy.count(900) || student.empty()) return {false, "sweep lacks t=0 or t=900 rows"};
  const double s = student.begin()->second;
  const double total = r.t_gen + r.t_teacher + r.t_distill + r.t_pck;
  o.pass = o.pass && s >= noisy[0] && s >= noisy[900] && total < 900;
  o.detail += "student=" + fmt(s) + " noisy(0)=" + fmt(noisy[0]) + " noisy(0.9T)=" + fmt(noisy[900]) +
              " runtime=" + fmt(total, 4) + "s";
  return o;
}

// ---- 8 ---------------------------------------------------------------------

// Spread of the per-t seed means against the widest per-t seed range.
struct Band {
  double mean_range = 0, max_band = 0;
};

Band seed_band(const std::map<int, std::vector<double>>& by_t) {
  double lo = 1e30, hi = -1e30, band = 0;
  for (const auto& [t, v] : by_t) {
    double m = 0;
    for (double x : v) m += x / double(v.size());
    lo = std::min(lo, m);
    hi = std::max(hi, m);
    band = std::max(band, *std::max_element(v.begin(), v.end()) - *std::min_element(v.begin(), v.end()));
  }
  return {hi - lo, band};
}

bool student_rows_constant(const CsvData& d, const std::string& value_col, const std::string& key_col) {
  std::map<std::string, std::string> first;
  for (const auto& row : d.rows) {
    if (str(d, row, d.col("source") >= 0 ? "source" : "mode") != "student") continue;
    const std::string key = key_col.empty() ? "" : str(d, row, key_col);
    auto [it, fresh] = first.emplace(key, str(d, row, value_col));
    if (!fresh && it->second != str(d, row, value_col)) return false;
  }
  return !first.empty();
}

Outcome sweep_structure(const DefaultRuns& r, const Config& cfg) {
  if (r.knn.empty()) return {false, "pipeline stopped early: " + r.error};
  Outcome o{true, ""};
  auto sw = csv(r.pck / "pck_sweep.csv");
  const bool pck_const = student_rows_constant(sw, "pck_img", "") && student_rows_constant(sw, "pck_bbox", "");
  bool probe_const = true;
  for (auto [dir, kind] : {std::pair{r.seg, "seg"}, {r.depth, "depth"}, {r.knn, "knn"}})
    probe_const = probe_const &&
                  student_rows_constant(csv(dir / ("probe_sweep_" + std::string(kind) + ".csv")), "metric_value", "feature_map");

  std::map<int, std::vector<double>> pck_seeds;
  auto ns = csv(r.pck / "pck_noise_seeds.csv");
  for (const auto& row : ns.rows) pck_seeds[int(num(ns, row, "t"))].push_back(num(ns, row, "pck_img"));
  const Band pb = seed_band(pck_seeds);

  const int stage = int(cfg.integer("eval.stage"));
  auto seg = csv(r.seg / "probe_sweep_seg.csv");
  std::map<int, std::vector<double>> seg_seeds;
  std::set<std::pair<int, int>> projected;
  int projected_rows = 0;
  for (const auto& row : seg.rows) {
    const std::string src = str(seg, row, "source");
    const int t = int(num(seg, row, "t")), fm = int(num(seg, row, "feature_map"));
    if (src == "noisy_teacher" && fm == stage) seg_seeds[t].push_back(num(seg, row, "metric_value"));
    if (src == "projected_student") {
      projected.insert({t, fm});
      ++projected_rows;
    }
  }
  const Band sb = seed_band(seg_seeds);
  const std::size_t cells = cfg.int_list("eval.probe_timesteps").size() * cfg.int_list("eval.feature_maps").size();
  const bool proj_ok = projected.size() == cells && std::size_t(projected_rows) == cells;
  o.pass = pck_const && probe_const && pb.mean_range > pb.max_band && sb.mean_range > sb.max_band && proj_ok;
  o.detail = std::string("student constant: pck=") + (pck_const ? "yes" : "no") + " probes=" +
             (probe_const ? "yes" : "no") + "; pck range " + fmt(pb.mean_range) + " vs band " + fmt(pb.max_band) +
             "; seg range " + fmt(sb.mean_range) + " vs band " + fmt(sb.max_band) + "; projected rows " +
             std::to_string(projected_rows) + "/" + std::to_string(cells);
  return o;
}

// ---- 9 ---------------------------------------------------------------------

Outcome ablation_grid(const DefaultRuns& r) {
  if (r.ablate.empty()) return {false, "ablate did not run: " + r.error};
  auto d = csv(r.ablate / "ablation.csv");
  std::map<std::string, int> per_grid;
  bool finite = true;
  std::string best;
  double best_v = -1;
  for (const auto& row : d.rows) {
    ++per_grid[str(d, row, "grid")];
    const double a = num(d, row, "pck_img"), b = num(d, row, "pck_bbox");
    finite = finite && std::isfinite(a) && std::isfinite(b);
    if (a > best_v) {
      best_v = a;
      best = str(d, row, "cell");
    }
  }
  Outcome o;
  o.pass = finite && per_grid["objective"] == 6 && per_grid["head_architecture"] == 8;
  o.detail = "objective cells " + std::to_string(per_grid["objective"]) + "/6, head cells " +
             std::to_string(per_grid["head_architecture"]) + "/8, finite=" + (finite ? "yes" : "no") + ", best " +
             best + " (" + fmt(best_v) + "), runtime=" + fmt(r.t_ablate, 4) + "s";
  return o;
}

// ---- 10 --------------------------------------------------------------------

Outcome probe_transfer_table(const DefaultRuns& r) {
  if (r.depth.empty()) return {false, "probe runs did not complete: " + r.error};
  Outcome o{true, ""};
  const std::set<std::pair<std::string, std::string>> want{
      {"noisy_teacher", "noisy_teacher"}, {"student", "student"}, {"noisy_teacher", "student"}};
  for (auto [dir, kind] : {std::pair{r.seg, "seg"}, {r.depth, "depth"}}) {
    auto d = csv(dir / ("transfer_" + std::string(kind) + ".csv"));
    std::set<std::pair<std::string, std::string>> got;
    std::string cells;
    for (const auto& row : d.rows) {
      const double v = num(d, row, "metric_value");
      if (std::isfinite(v)) got.insert({str(d, row, "probe_source"), str(d, row, "feature_source")});
      cells += str(d, row, "probe_source") + "/" + str(d, row, "feature_source") + "=" + fmt(v, 3) + " ";
    }
    o.pass = o.pass && got == want;
    o.detail += std::string(kind) + ": " + cells + "; ";
  }
  return o;
}

// ---- 11 --------------------------------------------------------------------

std::map<std::string, std::string> csv_files(const std::vector<fs::path>& runs) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (const auto& e : fs::recursive_directory_iterator(runs[i]))
      if (e.is_regular_file() && e.path().extension() == ".csv")
        out[std::to_string(i) + "/" + fs::relative(e.path(), runs[i]).generic_string()] = read_file_bytes(e.path());
  return out;
}

// Re-encoding a decoded container must reproduce the file, and typed loading
// followed by saving must too.
bool round_trips(const fs::path& p, const fs::path& scratch) {
  const std::string bytes = read_file_bytes(p);
  const Container c = decode_container(bytes);
  if (encode_container(c.component, c.header, c.tensors) != bytes) return false;
  const fs::path q = scratch / ("rt_" + p.filename().string());
  if (c.component == "backbone") {
    auto m = load_denoiser(p);
    json extra = c.header;
    save_denoiser(q, m.model, m.schedule, extra);
  } else if (c.component == "heads") {
    save_heads(q, load_heads(p), c.header);
  } else if (c.component == "probe") {
    save_probe(q, load_probe(p), c.header);
  } else {
    return true;
  }
  const bool same = read_file_bytes(q) == bytes;
  fs::remove(q);
  return same;
}

Outcome determinism(const fs::path& root, const std::vector<fs::path>& extra_containers, std::ostream& log) {
  std::vector<std::vector<fs::path>> runs;
  for (const char* name : {"tiny_a", "tiny_b"}) {
    PipelineEnv e;
    e.cfg = Config::resolve("tiny", {}, {{"seed", "3"}});
    e.out = root / name;
    e.log = &log;
    runs.push_back(cmd_run_all(e, true));
  }
  const auto a = csv_files(runs[0]), b = csv_files(runs[1]);
  int differing = 0;
  std::string first_diff;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    if (it == b.end() || it->second != v) {
      ++differing;
      if (first_diff.empty()) first_diff = k;
    }
  }
  differing += int(b.size() > a.size() ? b.size() - a.size() : 0);
  std::vector<fs::path> containers = extra_containers;
  for (const auto& run : runs[0])
    for (const auto& e : fs::directory_iterator(run))
      if (e.path().extension() == ".cdft") containers.push_back(e.path());
  int rt_fail = 0;
  const fs::path scratch = root / "scratch";
  fs::create_directories(scratch);
  for (const auto& p : containers)
    if (fs::exists(p) && !round_trips(p, scratch)) ++rt_fail;
  Outcome o;
  o.pass = differing == 0 && !a.empty() && rt_fail == 0;
  o.detail = std::to_string(a.size()) + " metric CSVs compared, " + std::to_string(differing) + " differ" +
             (first_diff.empty() ? "" : " (first: " + first_diff + ")") + "; " + std::to_string(containers.size()) +
             " containers, " + std::to_string(rt_fail) + " failed round trip";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  CLI::App app{"acceptance gate"};
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "scratch directory (recreated)");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path root = fs::absolute(workdir);
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream log(root / "pipeline.log");
  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };

  int failures = 0;
  auto report = [&](int k, const std::string& name, const std::function<Outcome()>& f) {
    if (!wanted(k)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = seconds_since(t0);
    failures += !o.pass;
    std::cout << "criterion " << k << " [" << name << "]: " << (o.pass ? "PASS" : "FAIL") << " (" << fmt(s, 3)
              << " s) " << o.detail << std::endl;
  };

  report(1, "forward-process statistics", [] {
    const auto t0 = std::chrono::steady_clock::now();
    auto o = forward_statistics();
    const double s = seconds_since(t0);
    o.pass = o.pass && s < 10;
    return o;
  });
  report(2, "gradient correctness", [] {
    const auto t0 = std::chrono::steady_clock::now();
    auto o = gradient_checks();
    const double s = seconds_since(t0);
    o.pass = o.pass && s < 60;
    return o;
  });
  report(3, "loss exactness", loss_exactness);
  report(4, "oracle equivalence", oracle_equivalence);
  report(5, "stratified sampler", stratified_sampler);

  DefaultRuns dr;
  const auto cfg = Config::resolve("default", {}, {});
  if (wanted(6) || wanted(7) || wanted(8) || wanted(9) || wanted(10) || wanted(11)) {
    const auto t0 = std::chrono::steady_clock::now();
    dr = run_default(root / "default", log);
    std::cout << "default pipeline: " << fmt(seconds_since(t0), 4) << " s (gen " << fmt(dr.t_gen, 3) << ", teacher "
              << fmt(dr.t_teacher, 4) << ", distill " << fmt(dr.t_distill, 4) << ", eval-pck " << fmt(dr.t_pck, 4)
              << ", analyze " << fmt(dr.t_noise, 3) << ", seg " << fmt(dr.t_seg, 4) << ", depth " << fmt(dr.t_depth, 4)
              << ", knn " << fmt(dr.t_knn, 3) << ", ablate " << fmt(dr.t_ablate, 4) << ")"
              << (dr.error.empty() ? "" : " error: " + dr.error) << std::endl;
  }
  report(6, "variance-analysis endpoints", [&] { return variance_endpoints(dr); });
  report(7, "distillation effectiveness", [&] { return distillation_effect(dr); });
  report(8, "timestep-sweep structure", [&] { return sweep_structure(dr, cfg); });
  report(9, "ablation grid", [&] { return ablation_grid(dr); });
  report(10, "probe-transfer harness", [&] { return probe_transfer_table(dr); });
  report(11, "determinism and persistence", [&] {
    std::vector<fs::path> extra;
    for (const auto& d : {dr.teacher, dr.distill, dr.seg, dr.depth})
      if (!d.empty())
        for (const auto& e : fs::directory_iterator(d))
          if (e.path().extension() == ".cdft") extra.push_back(e.path());
    return determinism(root, extra, log);
  });
  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criterion(s) failed" : "acceptance: all criteria passed")
            << std::endl;
  return failures ? 1 : 0;
}
