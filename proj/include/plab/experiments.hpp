#pragma once

// Experiment arms and sweeps. An arm is one full training run (model init,
// deficit window, optional information probes); sweeps fan arms out over a
// grid, optionally in parallel, and record everything in a JSON manifest from
// which any single arm can be re-run bit for bit.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "plab/config.hpp"
#include "plab/deficit.hpp"
#include "plab/fisher.hpp"
#include "plab/fit.hpp"

namespace plab {

inline constexpr const char* kToolVersion = "0.1.0";

struct ArmSpec {
  std::string name;
  DeficitSchedule deficit;
  int epochs = 0;
  std::uint64_t seed = 1;
};

struct ArmResult {
  ArmSpec spec;
  std::string status = "ok";  // ok | diverged
  double final_acc = 0;
  std::vector<EpochMetrics> metrics;
  FisherTimeline fisher;
  std::string dir;  // subdirectory under out_dir, empty when nothing written
};

// ---------------------------------------------------------------------------
// Probes. Inputs are drawn from the training set as the network currently
// sees it: while a deficit window is active the probe batch goes through the
// same corruption, afterwards it is clean. Labels never enter the estimate.

namespace detail {

inline Dataset probe_view(const Dataset& train, const DeficitSchedule& sched,
                          const DeficitContext& ctx, int epoch, int n_x,
                          std::uint64_t seed) {
  const int n = std::min(n_x, train.size());
  std::vector<int> rows = sample_rows(train.size(), n, seed);
  Batch b = gather_batch(train, rows.data(), n);
  if (sched.active(epoch)) apply_deficit(sched.kind, ctx, b);
  Dataset view;
  view.channels = train.channels;
  view.height = train.height;
  view.width = train.width;
  view.classes = train.classes;
  view.images = b.x->values;
  view.labels = b.labels;
  return view;
}

}  // namespace detail

inline FisherProbe probe_fisher(ModelState& st, const Dataset& train,
                                const NormStats& norm,
                                const DeficitSchedule& sched,
                                const DeficitContext& ctx, int epoch,
                                const ProbeConfig& pc, std::uint64_t seed) {
  const std::uint64_t probe_seed = derive_seed(seed, "probe", epoch);
  Dataset view =
      detail::probe_view(train, sched, ctx, epoch, pc.n_x, probe_seed);
  FisherProbe probe;
  if (pc.estimator == "mc") {
    FisherConfig fc;
    fc.n_x = view.size();
    fc.n_y = pc.n_y;
    fc.seed = probe_seed;
    probe = fim_trace_mc(st, view, norm, fc);
  } else if (pc.estimator == "variational") {
    ModelObjective obj(st, view, norm,
                       std::min(pc.var_batch, view.size()));
    VariationalConfig vc;
    vc.beta = pc.beta;
    vc.steps = pc.var_steps;
    vc.lr = pc.var_lr;
    vc.seed = probe_seed;
    VariationalResult vr = fit_diagonal_posterior(obj, vc);
    const std::vector<double> h = vr.h_diag();
    std::size_t at = 0;
    for (const ParamInfo& p : st.params) {
      if (!p.trainable || p.buffer) continue;
      double s = 0;
      const std::size_t n = std::size_t(p.tensor->size());
      for (std::size_t i = 0; i < n; ++i) s += h[at + i];
      probe.trace_by_group[p.group] += s;
      at += n;
    }
    require(at == h.size(), "probe_fisher: parameter span mismatch");
    for (const auto& [g, v] : probe.trace_by_group) probe.total += v;
    probe.n_x = view.size();
    probe.n_y = 0;
    probe.seed = probe_seed;
  } else {
    fail(msg("probe_fisher: unknown estimator '", pc.estimator, "'"));
  }
  probe.epoch = epoch;
  return probe;
}

// ---------------------------------------------------------------------------
// Single arm

inline ArmResult run_arm(const RunConfig& cfg, const DatasetPair& data,
                         const ArmSpec& arm, bool with_probes) {
  ArmResult res;
  res.spec = arm;
  TrainConfig tc = cfg.train;
  tc.deficit = arm.deficit;
  tc.epochs = arm.epochs;
  tc.seed = arm.seed;
  tc.probe_epochs.clear();
  std::string dir;
  if (!cfg.out_dir.empty()) {
    dir = cfg.out_dir + "/" + arm.name;
    std::filesystem::create_directories(dir);
    tc.metrics_csv = dir + "/metrics.csv";
    tc.checkpoint_dir = dir;
    res.dir = arm.name;
  }
  const ModelSpec spec = build_model(cfg.model, data.train);
  ModelState st = init_model(spec, arm.seed);

  ProbeHook hook;
  NormStats norm;
  DeficitContext dctx;
  if (with_probes && !cfg.probe.epochs.empty()) {
    for (int e : cfg.probe.epochs)
      if (e >= 0 && e <= tc.epochs) tc.probe_epochs.push_back(e);
    std::sort(tc.probe_epochs.begin(), tc.probe_epochs.end());
    tc.probe_epochs.erase(
        std::unique(tc.probe_epochs.begin(), tc.probe_epochs.end()),
        tc.probe_epochs.end());
    norm = compute_norm_stats(data.train);
    dctx = make_deficit_context(tc.deficit.kind, data.train, tc.seed);
    hook = [&](int epoch, ModelState& state) {
      res.fisher.push_back(probe_fisher(state, data.train, norm, tc.deficit,
                                        dctx, epoch, cfg.probe, arm.seed));
    };
  }

  try {
    TrainResult tr = train(st, data.train, data.test, tc, hook);
    res.metrics = tr.metrics;
    res.final_acc = tr.final_test_acc;
  } catch (const DivergenceError&) {
    res.status = "diverged";
    res.final_acc = 0;
  }
  if (!dir.empty() && !res.fisher.empty())
    write_fisher_csv(dir + "/fisher.csv", res.fisher);
  return res;
}

// ---------------------------------------------------------------------------
// Parallel arm execution. Each arm owns its model and output directory, so
// jobs only share read-only datasets; results land by index.

template <class Fn>
inline void run_parallel(int jobs, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, jobs));
  if (workers <= 1) {
    for (int i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  pool.reserve(std::size_t(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = next++; i < jobs; i = next++) fn(i);
      } catch (...) {
        errors[std::size_t(w)] = std::current_exception();
      }
    });
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<ArmResult> run_arms(const RunConfig& cfg,
                                       const DatasetPair& data,
                                       const std::vector<ArmSpec>& arms,
                                       const std::vector<bool>& with_probes) {
  require(arms.size() == with_probes.size(), "run_arms: size mismatch");
  std::vector<ArmResult> results(arms.size());
  run_parallel(int(arms.size()), cfg.workers, [&](int i) {
    results[std::size_t(i)] =
        run_arm(cfg, data, arms[std::size_t(i)], with_probes[std::size_t(i)]);
  });
  return results;
}

// ---------------------------------------------------------------------------
// Manifest

inline Json arm_to_json(const ArmResult& r) {
  Json a;
  a["name"] = r.spec.name;
  a["deficit"] = to_json(r.spec.deficit);
  a["epochs"] = r.spec.epochs;
  a["seed"] = r.spec.seed;
  a["probed"] = !r.fisher.empty();
  a["status"] = r.status;
  a["final_acc"] = r.final_acc;
  if (!r.dir.empty()) {
    a["files"] = Json{{"metrics", r.dir + "/metrics.csv"},
                      {"checkpoint", r.dir + "/final.plab"}};
    if (!r.fisher.empty()) a["files"]["fisher"] = r.dir + "/fisher.csv";
  }
  return a;
}

inline void write_manifest(const std::string& experiment,
                           const RunConfig& cfg,
                           const std::vector<ArmResult>& arms,
                           const std::map<std::string, std::string>& files =
                               {}) {
  if (cfg.out_dir.empty()) return;
  Json m;
  m["experiment"] = experiment;
  m["tool_version"] = kToolVersion;
  std::ostringstream hx;
  hx << "0x" << std::hex << config_hash(cfg);
  m["config_hash"] = hx.str();
  m["config"] = to_json(cfg);
  m["arms"] = Json::array();
  for (const ArmResult& a : arms) m["arms"].push_back(arm_to_json(a));
  for (const auto& [k, v] : files) m["files"][k] = v;
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream os(cfg.out_dir + "/manifest.json");
  require(bool(os), msg("cannot write '", cfg.out_dir, "/manifest.json'"));
  os << m.dump(2) << "\n";
}

inline ArmResult rerun_arm_from_manifest(const std::string& manifest_path,
                                         const std::string& arm_name,
                                         const std::string& out_dir) {
  std::ifstream is(manifest_path);
  require(bool(is), msg("cannot open manifest '", manifest_path, "'"));
  Json m;
  try {
    is >> m;
  } catch (const std::exception& e) {
    fail(msg("manifest '", manifest_path, "': ", e.what()));
  }
  require(m.contains("config") && m.contains("arms"),
          msg("manifest '", manifest_path, "' lacks config or arms"));
  RunConfig cfg = run_config_from_json(m["config"]);
  cfg.out_dir = out_dir;
  cfg.workers = 1;
  for (const Json& a : m["arms"]) {
    if (a.value("name", "") != arm_name) continue;
    ArmSpec spec;
    spec.name = arm_name;
    spec.deficit = deficit_from_json(a.at("deficit"));
    spec.epochs = a.at("epochs").get<int>();
    spec.seed = a.at("seed").get<std::uint64_t>();
    DatasetPair data = build_datasets(cfg.data, cfg.train.seed);
    return run_arm(cfg, data, spec, a.value("probed", false));
  }
  fail(msg("manifest has no arm named '", arm_name, "'"));
}

// ---------------------------------------------------------------------------
// Sweeps

inline void write_arm_summary_csv(const std::string& path,
                                  const std::vector<ArmResult>& arms) {
  std::ofstream os(path);
  require(bool(os), msg("cannot write '", path, "'"));
  os << "name,kind,start,end,epochs,status,final_acc,final_err\n";
  os.precision(17);
  for (const ArmResult& a : arms)
    os << a.spec.name << ',' << deficit_name(a.spec.deficit.kind) << ','
       << a.spec.deficit.start << ',' << a.spec.deficit.end << ','
       << a.spec.epochs << ',' << a.status << ',' << a.final_acc << ','
       << 1.0 - a.final_acc << "\n";
}

// Deficit until t0, then clean recovery for a fixed number of epochs, so every
// arm sees the same number of clean epochs after removal.
inline std::vector<ArmResult> deficit_removal_sweep(const RunConfig& cfg,
                                                    const DatasetPair& data) {
  require(!cfg.sweep.t0_list.empty(), "removal sweep: t0_list is empty");
  require(cfg.sweep.post_epochs > 0, "removal sweep: post_epochs must be > 0");
  require(cfg.train.deficit.kind != DeficitKind::None,
          "removal sweep: configure a deficit kind");
  std::vector<ArmSpec> arms;
  for (int t0 : cfg.sweep.t0_list) {
    require(t0 >= 0, "removal sweep: negative onset");
    ArmSpec a;
    a.name = msg("t0_", t0);
    a.deficit = t0 > 0 ? DeficitSchedule{cfg.train.deficit.kind, 0, t0}
                       : DeficitSchedule{DeficitKind::None, 0, 0};
    a.epochs = t0 + cfg.sweep.post_epochs;
    a.seed = cfg.train.seed;
    arms.push_back(a);
  }
  std::vector<ArmResult> results =
      run_arms(cfg, data, arms, std::vector<bool>(arms.size(), false));
  if (!cfg.out_dir.empty()) {
    write_arm_summary_csv(cfg.out_dir + "/summary.csv", results);
    write_manifest("sweep-removal", cfg, results,
                   {{"summary", "summary.csv"}});
  }
  return results;
}

struct WindowSweepResult {
  ArmResult baseline;
  std::vector<ArmResult> arms;        // one per onset
  std::vector<FitPoint> sensitivity;  // x = onset, y = test error increase
                                      // over baseline, in accuracy points
};

inline WindowSweepResult sliding_window_sweep(const RunConfig& cfg,
                                              const DatasetPair& data) {
  require(cfg.sweep.k > 0, "window sweep: k must be > 0");
  require(!cfg.sweep.onsets.empty(), "window sweep: onsets is empty");
  require(cfg.train.epochs > 0, "window sweep: train.epochs must be > 0");
  require(cfg.train.deficit.kind != DeficitKind::None,
          "window sweep: configure a deficit kind");
  std::vector<ArmSpec> arms;
  std::vector<bool> probes;
  ArmSpec base;
  base.name = "baseline";
  base.deficit = {DeficitKind::None, 0, 0};
  base.epochs = cfg.train.epochs;
  base.seed = cfg.train.seed;
  arms.push_back(base);
  probes.push_back(!cfg.probe.epochs.empty());
  for (int t : cfg.sweep.onsets) {
    require(t >= 0 && t + cfg.sweep.k <= cfg.train.epochs,
            msg("window sweep: window [", t, ",", t + cfg.sweep.k,
                ") exceeds budget ", cfg.train.epochs));
    ArmSpec a;
    a.name = msg("onset_", t);
    a.deficit = {cfg.train.deficit.kind, t, t + cfg.sweep.k};
    a.epochs = cfg.train.epochs;
    a.seed = cfg.train.seed;
    arms.push_back(a);
    probes.push_back(false);
  }
  std::vector<ArmResult> results = run_arms(cfg, data, arms, probes);
  WindowSweepResult out;
  out.baseline = results.front();
  out.arms.assign(results.begin() + 1, results.end());
  for (const ArmResult& a : out.arms)
    out.sensitivity.push_back(
        {double(a.spec.deficit.start),
         (out.baseline.final_acc - a.final_acc) * 100.0});
  if (!cfg.out_dir.empty()) {
    write_arm_summary_csv(cfg.out_dir + "/summary.csv", results);
    std::ofstream os(cfg.out_dir + "/sensitivity.csv");
    require(bool(os), msg("cannot write '", cfg.out_dir, "/sensitivity.csv'"));
    os << "onset,k,sensitivity\n";
    os.precision(17);
    for (const FitPoint& p : out.sensitivity)
      os << int(p.x) << ',' << cfg.sweep.k << ',' << p.y << "\n";
    write_manifest("sweep-window", cfg, results,
                   {{"summary", "summary.csv"},
                    {"sensitivity", "sensitivity.csv"}});
  }
  return out;
}

inline std::vector<FitPoint> read_sensitivity_csv(const std::string& path) {
  std::ifstream is(path);
  require(bool(is), msg("cannot open '", path, "'"));
  std::string line;
  require(bool(std::getline(is, line)) && line == "onset,k,sensitivity",
          msg("'", path, "': bad sensitivity header"));
  std::vector<FitPoint> pts;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    double onset = 0, k = 0, s = 0;
    char c1 = 0, c2 = 0;
    require(bool(ls >> onset >> c1 >> k >> c2 >> s) && c1 == ',' && c2 == ',',
            msg("'", path, "': bad row '", line, "'"));
    pts.push_back({onset, s});
  }
  return pts;
}

struct DepthSweepRow {
  int depth = 0;
  double acc_clean = 0, acc_deficit = 0;
  double drop_points = 0;
};

// Same deficit window at every depth; reports the accuracy cost of the
// deficit as network depth grows.
inline std::vector<DepthSweepRow> depth_sweep(const RunConfig& cfg,
                                              const DatasetPair& data) {
  require(!cfg.sweep.depths.empty(), "depth sweep: depths is empty");
  require(cfg.model.kind == "vardepth",
          "depth sweep: model.kind must be vardepth");
  require(cfg.train.deficit.kind != DeficitKind::None &&
              cfg.train.deficit.end > cfg.train.deficit.start,
          "depth sweep: configure a deficit window");
  require(cfg.train.epochs > 0, "depth sweep: train.epochs must be > 0");
  struct Job {
    RunConfig cfg;
    ArmSpec arm;
  };
  std::vector<Job> jobs;
  for (int n : cfg.sweep.depths) {
    require(n >= 1, "depth sweep: depth must be >= 1");
    RunConfig dc = cfg;
    dc.model.depth_n = n;
    ArmSpec clean;
    clean.name = msg("depth_", n, "_clean");
    clean.deficit = {DeficitKind::None, 0, 0};
    clean.epochs = cfg.train.epochs;
    clean.seed = cfg.train.seed;
    jobs.push_back({dc, clean});
    ArmSpec def;
    def.name = msg("depth_", n, "_deficit");
    def.deficit = cfg.train.deficit;
    def.epochs = cfg.train.epochs;
    def.seed = cfg.train.seed;
    jobs.push_back({dc, def});
  }
  std::vector<ArmResult> results(jobs.size());
  run_parallel(int(jobs.size()), cfg.workers, [&](int i) {
    results[std::size_t(i)] = run_arm(jobs[std::size_t(i)].cfg, data,
                                      jobs[std::size_t(i)].arm, false);
  });
  std::vector<DepthSweepRow> rows;
  for (std::size_t i = 0; i + 1 < results.size(); i += 2) {
    DepthSweepRow r;
    r.depth = cfg.sweep.depths[i / 2];
    r.acc_clean = results[i].final_acc;
    r.acc_deficit = results[i + 1].final_acc;
    r.drop_points = (r.acc_clean - r.acc_deficit) * 100.0;
    rows.push_back(r);
  }
  if (!cfg.out_dir.empty()) {
    write_arm_summary_csv(cfg.out_dir + "/summary.csv", results);
    std::ofstream os(cfg.out_dir + "/depth_summary.csv");
    require(bool(os), msg("cannot write '", cfg.out_dir,
                          "/depth_summary.csv'"));
    os << "depth,acc_clean,acc_deficit,drop_points\n";
    os.precision(17);
    for (const DepthSweepRow& r : rows)
      os << r.depth << ',' << r.acc_clean << ',' << r.acc_deficit << ','
         << r.drop_points << "\n";
    write_manifest("sweep-depth", cfg, results,
                   {{"summary", "summary.csv"},
                    {"depth_summary", "depth_summary.csv"}});
  }
  return rows;
}

struct WdSweepRow {
  double weight_decay = 0;
  double acc_clean = 0, acc_deficit = 0;
  double sensitivity_points = 0;
};

// Clean/deficit pair per weight decay value, same deficit window throughout.
inline std::vector<WdSweepRow> weight_decay_sweep(const RunConfig& cfg,
                                                  const DatasetPair& data) {
  require(!cfg.sweep.wd_list.empty(), "wd sweep: wd_list is empty");
  require(cfg.train.deficit.kind != DeficitKind::None &&
              cfg.train.deficit.end > cfg.train.deficit.start,
          "wd sweep: configure a deficit window");
  require(cfg.train.epochs > 0, "wd sweep: train.epochs must be > 0");
  struct Job {
    RunConfig cfg;
    ArmSpec arm;
  };
  std::vector<Job> jobs;
  int idx = 0;
  for (double wd : cfg.sweep.wd_list) {
    require(wd >= 0, "wd sweep: negative weight decay");
    RunConfig wc = cfg;
    wc.train.weight_decay = wd;
    ArmSpec clean;
    clean.name = msg("wd", idx, "_clean");
    clean.deficit = {DeficitKind::None, 0, 0};
    clean.epochs = cfg.train.epochs;
    clean.seed = cfg.train.seed;
    jobs.push_back({wc, clean});
    ArmSpec def;
    def.name = msg("wd", idx, "_deficit");
    def.deficit = cfg.train.deficit;
    def.epochs = cfg.train.epochs;
    def.seed = cfg.train.seed;
    jobs.push_back({wc, def});
    ++idx;
  }
  std::vector<ArmResult> results(jobs.size());
  run_parallel(int(jobs.size()), cfg.workers, [&](int i) {
    results[std::size_t(i)] = run_arm(jobs[std::size_t(i)].cfg, data,
                                      jobs[std::size_t(i)].arm, false);
  });
  std::vector<WdSweepRow> rows;
  for (std::size_t i = 0; i + 1 < results.size(); i += 2) {
    WdSweepRow r;
    r.weight_decay = cfg.sweep.wd_list[i / 2];
    r.acc_clean = results[i].final_acc;
    r.acc_deficit = results[i + 1].final_acc;
    r.sensitivity_points = (r.acc_clean - r.acc_deficit) * 100.0;
    rows.push_back(r);
  }
  if (!cfg.out_dir.empty()) {
    write_arm_summary_csv(cfg.out_dir + "/summary.csv", results);
    std::ofstream os(cfg.out_dir + "/wd_summary.csv");
    require(bool(os), msg("cannot write '", cfg.out_dir, "/wd_summary.csv'"));
    os << "weight_decay,acc_clean,acc_deficit,sensitivity_points\n";
    os.precision(17);
    for (const WdSweepRow& r : rows)
      os << r.weight_decay << ',' << r.acc_clean << ',' << r.acc_deficit
         << ',' << r.sensitivity_points << "\n";
    write_manifest("sweep-wd", cfg, results,
                   {{"summary", "summary.csv"},
                    {"wd_summary", "wd_summary.csv"}});
  }
  return rows;
}

// One probed arm: train with the configured deficit window and record the
// information timeline at the configured probe epochs.
inline ArmResult fim_timeline(const RunConfig& cfg, const DatasetPair& data,
                              const std::string& arm_name = "timeline") {
  require(!cfg.probe.epochs.empty(), "fim-timeline: probe.epochs is empty");
  require(cfg.train.epochs > 0, "fim-timeline: train.epochs must be > 0");
  ArmSpec arm;
  arm.name = arm_name;
  arm.deficit = cfg.train.deficit;
  arm.epochs = cfg.train.epochs;
  arm.seed = cfg.train.seed;
  ArmResult res = run_arm(cfg, data, arm, true);
  if (!cfg.out_dir.empty())
    write_manifest("fim-timeline", cfg, {res});
  return res;
}

// ---------------------------------------------------------------------------
// Sensitivity / information correlation

struct CorrelateResult {
  std::vector<FitPoint> pairs;  // x = sensitivity at onset t, y = trace(t)
  ExpLinkFit fit;
  int argmax_sensitivity = 0;  // onset with the largest sensitivity
  int argmax_trace = 0;        // probe epoch with the largest total trace
};

inline CorrelateResult correlate_sensitivity_fisher(
    const std::vector<FitPoint>& sensitivity, const FisherTimeline& timeline) {
  require(sensitivity.size() >= 2, "correlate: need at least two onsets");
  require(timeline.size() >= 2, "correlate: need at least two probes");
  CorrelateResult out;
  double best_s = sensitivity.front().y;
  out.argmax_sensitivity = int(sensitivity.front().x);
  for (const FitPoint& p : sensitivity)
    if (p.y > best_s) {
      best_s = p.y;
      out.argmax_sensitivity = int(p.x);
    }
  double best_f = timeline.front().total;
  out.argmax_trace = timeline.front().epoch;
  for (const FisherProbe& p : timeline)
    if (p.total > best_f) {
      best_f = p.total;
      out.argmax_trace = p.epoch;
    }
  std::map<int, double> trace_at;
  for (const FisherProbe& p : timeline) trace_at[p.epoch] = p.total;
  for (const FitPoint& p : sensitivity) {
    auto it = trace_at.find(int(p.x));
    if (it != trace_at.end()) out.pairs.push_back({p.y, it->second});
  }
  require(out.pairs.size() >= 3,
          msg("correlate: only ", out.pairs.size(),
              " onsets have matching probes, need 3"));
  out.fit = fit_exp_link(out.pairs);
  return out;
}

inline Json correlate_to_json(const CorrelateResult& r) {
  Json j;
  j["argmax_sensitivity"] = r.argmax_sensitivity;
  j["argmax_trace"] = r.argmax_trace;
  j["pairs"] = Json::array();
  for (const FitPoint& p : r.pairs)
    j["pairs"].push_back(Json{{"sensitivity", p.x}, {"trace", p.y}});
  j["fit"] = Json{{"a", r.fit.a},     {"b", r.fit.b},
                  {"c", r.fit.c},     {"rms", r.fit.rms},
                  {"converged", r.fit.converged},
                  {"degenerate", r.fit.degenerate}};
  return j;
}

}  // namespace plab
