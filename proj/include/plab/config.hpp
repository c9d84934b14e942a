#pragma once

// JSON run configuration: one document describes dataset, model, training,
// deficit, probes, and sweep grids. The same structs feed the CLI, the sweep
// manifest, and arm reproduction, so a stored manifest is enough to rebuild
// any arm exactly.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/data.hpp"
#include "plab/model.hpp"
#include "plab/synthdata.hpp"
#include "plab/train.hpp"

namespace plab {

using Json = nlohmann::json;

struct DatasetConfig {
  std::string kind = "synth_glyphs";  // synth_glyphs|mnist_idx|cifar10_bin|noise
  std::string path;                   // data directory (or synth cache)
  int train_subset = 0;               // 0 = all
  int test_subset = 0;
  int synth_train = 12000;
  int synth_test = 2000;
  std::uint64_t corpus_seed = 7;
};

struct ModelConfig {
  std::string kind = "fc";  // fc|allcnn|vardepth|reslite
  std::vector<int> hidden = {256, 128, 64};
  double width_scale = 1.0;
  int depth_n = 1;
  std::vector<int> blocks_per_stage = {2, 2, 2, 2};
  int classes = 10;
};

struct ProbeConfig {
  std::vector<int> epochs;
  int n_x = 512;
  int n_y = 1;
  std::string estimator = "mc";  // mc | variational
  double beta = 0.01;
  int var_steps = 400;
  double var_lr = 0.001;
  int var_batch = 64;
};

struct SweepConfig {
  std::vector<int> t0_list;
  int post_epochs = 0;
  int k = 0;
  std::vector<int> onsets;
  std::vector<double> wd_list;
  std::vector<int> depths;
};

struct RunConfig {
  DatasetConfig data;
  ModelConfig model;
  TrainConfig train;
  ProbeConfig probe;
  SweepConfig sweep;
  std::string out_dir = "out";
  int workers = 1;
  double scale = 1.0;
};

// ---------------------------------------------------------------------------
// JSON round trip. Unknown keys are rejected so config typos fail loudly.

namespace detail {

inline void check_keys(const Json& j, const char* where,
                       std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    require(ok, msg("config: unknown key '", it.key(), "' in ", where));
  }
}

}  // namespace detail

inline Json to_json(const DeficitSchedule& d) {
  return Json{{"kind", deficit_name(d.kind)},
              {"start", d.start},
              {"end", d.end}};
}

inline DeficitSchedule deficit_from_json(const Json& j) {
  detail::check_keys(j, "deficit", {"kind", "start", "end"});
  DeficitSchedule d;
  d.kind = deficit_from_name(j.value("kind", "none"));
  d.start = j.value("start", 0);
  d.end = j.value("end", 0);
  return d;
}

inline Json to_json(const RunConfig& c) {
  Json j;
  j["dataset"] = {{"kind", c.data.kind},
                  {"path", c.data.path},
                  {"train_subset", c.data.train_subset},
                  {"test_subset", c.data.test_subset},
                  {"synth_train", c.data.synth_train},
                  {"synth_test", c.data.synth_test},
                  {"corpus_seed", c.data.corpus_seed}};
  j["model"] = {{"kind", c.model.kind},
                {"hidden", c.model.hidden},
                {"width_scale", c.model.width_scale},
                {"depth_n", c.model.depth_n},
                {"blocks_per_stage", c.model.blocks_per_stage},
                {"classes", c.model.classes}};
  j["train"] = {{"optimizer", c.train.optimizer},
                {"lr0", c.train.lr0},
                {"lr_decay", c.train.lr_decay},
                {"weight_decay", c.train.weight_decay},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"seed", c.train.seed},
                {"augment", {{"translate", c.train.augment.max_shift},
                             {"hflip", c.train.augment.hflip}}}};
  j["deficit"] = to_json(c.train.deficit);
  j["probe"] = {{"epochs", c.probe.epochs},
                {"n_x", c.probe.n_x},
                {"n_y", c.probe.n_y},
                {"estimator", c.probe.estimator},
                {"beta", c.probe.beta},
                {"var_steps", c.probe.var_steps},
                {"var_lr", c.probe.var_lr},
                {"var_batch", c.probe.var_batch}};
  j["sweep"] = {{"t0_list", c.sweep.t0_list},
                {"post_epochs", c.sweep.post_epochs},
                {"k", c.sweep.k},
                {"onsets", c.sweep.onsets},
                {"wd_list", c.sweep.wd_list},
                {"depths", c.sweep.depths}};
  j["out_dir"] = c.out_dir;
  j["workers"] = c.workers;
  j["scale"] = c.scale;
  return j;
}

inline RunConfig run_config_from_json(const Json& j) {
  detail::check_keys(j, "config root",
                     {"dataset", "model", "train", "deficit", "probe", "sweep",
                      "out_dir", "workers", "scale"});
  RunConfig c;
  if (j.contains("dataset")) {
    const Json& d = j["dataset"];
    detail::check_keys(d, "dataset",
                       {"kind", "path", "train_subset", "test_subset",
                        "synth_train", "synth_test", "corpus_seed"});
    c.data.kind = d.value("kind", c.data.kind);
    c.data.path = d.value("path", c.data.path);
    c.data.train_subset = d.value("train_subset", c.data.train_subset);
    c.data.test_subset = d.value("test_subset", c.data.test_subset);
    c.data.synth_train = d.value("synth_train", c.data.synth_train);
    c.data.synth_test = d.value("synth_test", c.data.synth_test);
    c.data.corpus_seed = d.value("corpus_seed", c.data.corpus_seed);
  }
  if (j.contains("model")) {
    const Json& m = j["model"];
    detail::check_keys(m, "model",
                       {"kind", "hidden", "width_scale", "depth_n",
                        "blocks_per_stage", "classes"});
    c.model.kind = m.value("kind", c.model.kind);
    if (m.contains("hidden"))
      c.model.hidden = m["hidden"].get<std::vector<int>>();
    c.model.width_scale = m.value("width_scale", c.model.width_scale);
    c.model.depth_n = m.value("depth_n", c.model.depth_n);
    if (m.contains("blocks_per_stage"))
      c.model.blocks_per_stage =
          m["blocks_per_stage"].get<std::vector<int>>();
    c.model.classes = m.value("classes", c.model.classes);
  }
  if (j.contains("train")) {
    const Json& t = j["train"];
    detail::check_keys(t, "train",
                       {"optimizer", "lr0", "lr_decay", "weight_decay",
                        "batch_size", "epochs", "seed", "augment"});
    c.train.optimizer = t.value("optimizer", c.train.optimizer);
    c.train.lr0 = t.value("lr0", c.train.lr0);
    c.train.lr_decay = t.value("lr_decay", c.train.lr_decay);
    c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.seed = t.value("seed", c.train.seed);
    if (t.contains("augment")) {
      detail::check_keys(t["augment"], "train.augment",
                         {"translate", "hflip"});
      c.train.augment.max_shift = t["augment"].value("translate", 0);
      c.train.augment.hflip = t["augment"].value("hflip", false);
    }
  }
  if (j.contains("deficit")) c.train.deficit = deficit_from_json(j["deficit"]);
  if (j.contains("probe")) {
    const Json& p = j["probe"];
    detail::check_keys(p, "probe",
                       {"epochs", "n_x", "n_y", "estimator", "beta",
                        "var_steps", "var_lr", "var_batch"});
    if (p.contains("epochs"))
      c.probe.epochs = p["epochs"].get<std::vector<int>>();
    c.probe.n_x = p.value("n_x", c.probe.n_x);
    c.probe.n_y = p.value("n_y", c.probe.n_y);
    c.probe.estimator = p.value("estimator", c.probe.estimator);
    require(c.probe.estimator == "mc" || c.probe.estimator == "variational",
            msg("config: unknown probe estimator '", c.probe.estimator, "'"));
    c.probe.beta = p.value("beta", c.probe.beta);
    c.probe.var_steps = p.value("var_steps", c.probe.var_steps);
    c.probe.var_lr = p.value("var_lr", c.probe.var_lr);
    c.probe.var_batch = p.value("var_batch", c.probe.var_batch);
  }
  if (j.contains("sweep")) {
    const Json& s = j["sweep"];
    detail::check_keys(s, "sweep",
                       {"t0_list", "post_epochs", "k", "onsets", "wd_list",
                        "depths"});
    if (s.contains("t0_list"))
      c.sweep.t0_list = s["t0_list"].get<std::vector<int>>();
    c.sweep.post_epochs = s.value("post_epochs", 0);
    c.sweep.k = s.value("k", 0);
    if (s.contains("onsets"))
      c.sweep.onsets = s["onsets"].get<std::vector<int>>();
    if (s.contains("wd_list"))
      c.sweep.wd_list = s["wd_list"].get<std::vector<double>>();
    if (s.contains("depths"))
      c.sweep.depths = s["depths"].get<std::vector<int>>();
  }
  c.out_dir = j.value("out_dir", c.out_dir);
  c.workers = j.value("workers", c.workers);
  c.scale = j.value("scale", c.scale);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  require(bool(is), msg("cannot open config '", path, "'"));
  Json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    fail(msg("config '", path, "': ", e.what()));
  }
  return run_config_from_json(j);
}

inline std::uint64_t config_hash(const RunConfig& c) {
  return fnv1a(to_json(c).dump());
}

// Desk-scale knob: scale > 1 stretches schedules and shrinks data, scale < 1
// the reverse. Epoch-valued fields multiply by `scale`; dataset subsets divide
// by it. Applied once, then cleared so reproduction is not double-scaled.
inline void apply_scale(RunConfig& c) {
  if (c.scale == 1.0) return;
  require(c.scale > 0, "config: scale must be positive");
  const double s = c.scale;
  auto ep = [&](int e) { return int(std::lround(e * s)); };
  c.train.epochs = std::max(c.train.epochs > 0 ? 1 : 0, ep(c.train.epochs));
  c.train.deficit.start = ep(c.train.deficit.start);
  c.train.deficit.end = ep(c.train.deficit.end);
  for (int& e : c.probe.epochs) e = ep(e);
  for (int& e : c.sweep.t0_list) e = ep(e);
  c.sweep.post_epochs = ep(c.sweep.post_epochs);
  c.sweep.k = std::max(c.sweep.k > 0 ? 1 : 0, ep(c.sweep.k));
  for (int& e : c.sweep.onsets) e = ep(e);
  auto ds = [&](int n) {
    return n > 0 ? std::max(1, int(std::lround(n / s))) : 0;
  };
  c.data.train_subset = ds(c.data.train_subset);
  c.data.test_subset = ds(c.data.test_subset);
  c.scale = 1.0;
}

// ---------------------------------------------------------------------------
// Dataset and model construction

struct DatasetPair {
  Dataset train, test;
};

inline DatasetPair build_datasets(const DatasetConfig& cfg,
                                  std::uint64_t subset_seed) {
  DatasetPair out;
  if (cfg.kind == "synth_glyphs") {
    std::string dir = cfg.path.empty() ? "glyph-cache" : cfg.path;
    GlyphCorpusConfig gc;
    gc.train_n = cfg.synth_train;
    gc.test_n = cfg.synth_test;
    gc.seed = cfg.corpus_seed;
    const std::string stamp =
        dir + msg("/corpus-", gc.seed, "-", gc.train_n, "-", gc.test_n,
                  ".stamp");
    if (!std::filesystem::exists(stamp)) {
      std::filesystem::create_directories(dir);
      write_glyph_corpus_idx(dir, gc);
      std::ofstream(stamp) << "ok\n";
    }
    out.train = load_mnist_idx(dir + "/train-images-idx3-ubyte",
                               dir + "/train-labels-idx1-ubyte");
    out.test = load_mnist_idx(dir + "/t10k-images-idx3-ubyte",
                              dir + "/t10k-labels-idx1-ubyte");
  } else if (cfg.kind == "mnist_idx") {
    require(!cfg.path.empty(), "config: mnist_idx needs dataset.path");
    out.train = load_mnist_idx(cfg.path + "/train-images-idx3-ubyte",
                               cfg.path + "/train-labels-idx1-ubyte");
    out.test = load_mnist_idx(cfg.path + "/t10k-images-idx3-ubyte",
                              cfg.path + "/t10k-labels-idx1-ubyte");
  } else if (cfg.kind == "cifar10_bin") {
    require(!cfg.path.empty(), "config: cifar10_bin needs dataset.path");
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) {
      const std::string f = cfg.path + msg("/data_batch_", i, ".bin");
      if (std::filesystem::exists(f)) train_files.push_back(f);
    }
    require(!train_files.empty(),
            msg("config: no data_batch_*.bin under '", cfg.path, "'"));
    out.train = load_cifar10_bin(train_files);
    out.test = load_cifar10_bin({cfg.path + "/test_batch.bin"});
  } else if (cfg.kind == "noise") {
    out.train = make_noise_dataset(cfg.synth_train, 1, 32, 32, 10,
                                   derive_seed(cfg.corpus_seed, "train"));
    out.test = make_noise_dataset(cfg.synth_test, 1, 32, 32, 10,
                                  derive_seed(cfg.corpus_seed, "test"));
  } else {
    fail(msg("config: unknown dataset kind '", cfg.kind, "'"));
  }
  if (cfg.train_subset > 0 && cfg.train_subset < out.train.size())
    out.train = stratified_subset(out.train, cfg.train_subset,
                                  derive_seed(subset_seed, "train-subset"));
  if (cfg.test_subset > 0 && cfg.test_subset < out.test.size())
    out.test = stratified_subset(out.test, cfg.test_subset,
                                 derive_seed(subset_seed, "test-subset"));
  return out;
}

inline ModelSpec build_model(const ModelConfig& cfg, const Dataset& sample) {
  const Shape input{sample.channels, sample.height, sample.width};
  if (cfg.kind == "fc") return build_fc(input, cfg.hidden, cfg.classes);
  if (cfg.kind == "allcnn")
    return build_allcnn(input, cfg.width_scale, cfg.classes);
  if (cfg.kind == "vardepth")
    return build_vardepth(input, cfg.depth_n, cfg.width_scale, cfg.classes);
  if (cfg.kind == "reslite")
    return build_reslite(input, cfg.blocks_per_stage, cfg.width_scale,
                         cfg.classes);
  fail(msg("config: unknown model kind '", cfg.kind, "'"));
}

}  // namespace plab
