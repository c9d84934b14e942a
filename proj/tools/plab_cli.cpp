// Command line front end: training runs, deficit sweeps, information
// timelines, curve fits, and corpus/filter export, all driven by a JSON
// config plus a few overrides.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <plab/plab.hpp>

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  int workers = 0;
  std::int64_t seed = -1;
  double scale = 0;
};

void add_common(CLI::App* sub, CommonFlags& f, bool config_required = true) {
  auto* c = sub->add_option("--config", f.config, "JSON run config");
  if (config_required) c->required()->check(CLI::ExistingFile);
  sub->add_option("--out", f.out, "output directory (overrides config)");
  sub->add_option("--workers", f.workers, "parallel arms (overrides config)");
  sub->add_option("--seed", f.seed, "base seed (overrides config)");
  sub->add_option("--scale", f.scale, "schedule scale (overrides config)");
}

plab::RunConfig load_cfg(const CommonFlags& f) {
  plab::RunConfig cfg = plab::load_run_config(f.config);
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (f.workers > 0) cfg.workers = f.workers;
  if (f.seed >= 0) cfg.train.seed = std::uint64_t(f.seed);
  if (f.scale > 0) cfg.scale = f.scale;
  plab::apply_scale(cfg);
  return cfg;
}

void print_arm(const plab::ArmResult& a) {
  std::cout << "arm " << a.spec.name << ": status=" << a.status
            << " final_acc=" << a.final_acc;
  if (!a.fisher.empty())
    std::cout << " probes=" << a.fisher.size()
              << " final_trace=" << a.fisher.back().total;
  std::cout << "\n";
}

std::vector<plab::FitPoint> read_xy_csv(const std::string& path) {
  std::ifstream is(path);
  plab::require(bool(is), plab::msg("cannot open '", path, "'"));
  std::string line;
  plab::require(bool(std::getline(is, line)) && line == "x,y",
                plab::msg("'", path, "': expected header 'x,y'"));
  std::vector<plab::FitPoint> pts;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    double x = 0, y = 0;
    char c = 0;
    plab::require(bool(ls >> x >> c >> y) && c == ',',
                  plab::msg("'", path, "': bad row '", line, "'"));
    pts.push_back({x, y});
  }
  return pts;
}

plab::Shape input_shape_for(const plab::DatasetConfig& d) {
  if (d.kind == "cifar10_bin") return {3, 32, 32};
  return {1, 32, 32};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"critical-period training experiments"};
  app.require_subcommand(1);

  CommonFlags f_train, f_rem, f_win, f_depth, f_wd, f_tl, f_exp;
  auto* sc_train = app.add_subcommand("train", "single training run");
  add_common(sc_train, f_train);

  auto* sc_rem = app.add_subcommand(
      "sweep-removal", "deficit-until-t0 arms with fixed clean recovery");
  add_common(sc_rem, f_rem);

  auto* sc_win = app.add_subcommand(
      "sweep-window", "k-epoch deficit windows over onset grid");
  add_common(sc_win, f_win);

  auto* sc_depth =
      app.add_subcommand("sweep-depth", "deficit cost across network depths");
  add_common(sc_depth, f_depth);

  auto* sc_wd = app.add_subcommand(
      "sweep-wd", "deficit cost across weight decay values");
  add_common(sc_wd, f_wd);

  auto* sc_tl = app.add_subcommand(
      "fim-timeline", "train one arm and probe information at set epochs");
  add_common(sc_tl, f_tl);

  auto* sc_corr = app.add_subcommand(
      "correlate", "pair a sensitivity curve with an information timeline");
  std::string corr_sens, corr_fisher, corr_out;
  sc_corr->add_option("--sensitivity", corr_sens, "sensitivity.csv")
      ->required()
      ->check(CLI::ExistingFile);
  sc_corr->add_option("--fisher", corr_fisher, "fisher.csv")
      ->required()
      ->check(CLI::ExistingFile);
  sc_corr->add_option("--out", corr_out, "write result JSON here");

  auto* sc_fit = app.add_subcommand("fit", "fit a named curve to x,y points");
  std::string fit_kind, fit_points, fit_out;
  sc_fit->add_option("--kind", fit_kind, "double_exp | exp_link")->required();
  sc_fit->add_option("--points", fit_points, "CSV with header x,y")
      ->required()
      ->check(CLI::ExistingFile);
  sc_fit->add_option("--out", fit_out, "write result JSON here");

  auto* sc_exp = app.add_subcommand(
      "export-filters", "render first-layer filters from a checkpoint");
  std::string exp_ckpt, exp_out;
  int exp_group = 0;
  add_common(sc_exp, f_exp);
  sc_exp->add_option("--checkpoint", exp_ckpt, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  sc_exp->add_option("--group", exp_group, "parameter group to render");
  sc_exp->add_option("--image", exp_out, "output .pgm/.ppm path")->required();

  auto* sc_synth = app.add_subcommand(
      "synth-data", "write the synthetic glyph corpus to disk");
  std::string synth_out, synth_format = "idx";
  int synth_train = 12000, synth_test = 2000;
  std::int64_t synth_seed = 7;
  sc_synth->add_option("--out", synth_out, "output directory")->required();
  sc_synth->add_option("--format", synth_format, "idx | cifar");
  sc_synth->add_option("--train", synth_train, "training samples");
  sc_synth->add_option("--test", synth_test, "test samples");
  sc_synth->add_option("--seed", synth_seed, "corpus seed");

  auto* sc_rerun = app.add_subcommand(
      "rerun-arm", "re-run one arm recorded in a sweep manifest");
  std::string rr_manifest, rr_arm, rr_out;
  sc_rerun->add_option("--manifest", rr_manifest, "manifest.json")
      ->required()
      ->check(CLI::ExistingFile);
  sc_rerun->add_option("--arm", rr_arm, "arm name")->required();
  sc_rerun->add_option("--out", rr_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (sc_train->parsed()) {
      plab::RunConfig cfg = load_cfg(f_train);
      plab::DatasetPair data =
          plab::build_datasets(cfg.data, cfg.train.seed);
      plab::ArmSpec arm;
      arm.name = "train";
      arm.deficit = cfg.train.deficit;
      arm.epochs = cfg.train.epochs;
      arm.seed = cfg.train.seed;
      plab::ArmResult res =
          plab::run_arm(cfg, data, arm, !cfg.probe.epochs.empty());
      plab::write_manifest("train", cfg, {res});
      print_arm(res);
    } else if (sc_rem->parsed()) {
      plab::RunConfig cfg = load_cfg(f_rem);
      plab::DatasetPair data =
          plab::build_datasets(cfg.data, cfg.train.seed);
      for (const plab::ArmResult& a :
           plab::deficit_removal_sweep(cfg, data))
        print_arm(a);
    } else if (sc_win->parsed()) {
      plab::RunConfig cfg = load_cfg(f_win);
      plab::DatasetPair data =
          plab::build_datasets(cfg.data, cfg.train.seed);
      plab::WindowSweepResult res = plab::sliding_window_sweep(cfg, data);
      print_arm(res.baseline);
      for (std::size_t i = 0; i < res.arms.size(); ++i) {
        print_arm(res.arms[i]);
        std::cout << "  sensitivity(" << int(res.sensitivity[i].x)
                  << ") = " << res.sensitivity[i].y << " points\n";
      }
    } else if (sc_depth->parsed()) {
      plab::RunConfig cfg = load_cfg(f_depth);
      plab::DatasetPair data =
          plab::build_datasets(cfg.data, cfg.train.seed);
      for (const plab::DepthSweepRow& r : plab::depth_sweep(cfg, data))
        std::cout << "depth " << r.depth << ": clean=" << r.acc_clean
                  << " deficit=" << r.acc_deficit
                  << " drop=" << r.drop_points << " points\n";
    } else if (sc_wd->parsed()) {
      plab::RunConfig cfg = load_cfg(f_wd);
      plab::DatasetPair data =
          plab::build_datasets(cfg.data, cfg.train.seed);
      for (const plab::WdSweepRow& r : plab::weight_decay_sweep(cfg, data))
        std::cout << "wd " << r.weight_decay << ": clean=" << r.acc_clean
                  << " deficit=" << r.acc_deficit
                  << " sensitivity=" << r.sensitivity_points << " points\n";
    } else if (sc_tl->parsed()) {
      plab::RunConfig cfg = load_cfg(f_tl);
      plab::DatasetPair data =
          plab::build_datasets(cfg.data, cfg.train.seed);
      plab::ArmResult res = plab::fim_timeline(cfg, data);
      print_arm(res);
      for (const plab::FisherProbe& p : res.fisher)
        std::cout << "  probe epoch " << p.epoch << ": trace=" << p.total
                  << "\n";
    } else if (sc_corr->parsed()) {
      std::vector<plab::FitPoint> sens =
          plab::read_sensitivity_csv(corr_sens);
      plab::FisherTimeline tl = plab::read_fisher_csv(corr_fisher);
      plab::CorrelateResult res =
          plab::correlate_sensitivity_fisher(sens, tl);
      plab::Json j = plab::correlate_to_json(res);
      std::cout << j.dump(2) << "\n";
      if (!corr_out.empty()) {
        std::ofstream os(corr_out);
        plab::require(bool(os), plab::msg("cannot write '", corr_out, "'"));
        os << j.dump(2) << "\n";
      }
    } else if (sc_fit->parsed()) {
      std::vector<plab::FitPoint> pts = read_xy_csv(fit_points);
      plab::Json j;
      if (fit_kind == "double_exp") {
        plab::DoubleExpFit r = plab::fit_double_exp(pts);
        j = plab::Json{{"kind", "double_exp"},   {"tau1", r.tau1},
                       {"tau2", r.tau2},         {"k", r.k},
                       {"delay", r.d},           {"rms", r.rms},
                       {"converged", r.converged},
                       {"degenerate", r.degenerate},
                       {"non_physical", r.non_physical}};
      } else if (fit_kind == "exp_link") {
        plab::ExpLinkFit r = plab::fit_exp_link(pts);
        j = plab::Json{{"kind", "exp_link"}, {"a", r.a},
                       {"b", r.b},           {"c", r.c},
                       {"rms", r.rms},       {"converged", r.converged},
                       {"degenerate", r.degenerate}};
      } else {
        plab::fail(plab::msg("fit: unknown kind '", fit_kind, "'"));
      }
      std::cout << j.dump(2) << "\n";
      if (!fit_out.empty()) {
        std::ofstream os(fit_out);
        plab::require(bool(os), plab::msg("cannot write '", fit_out, "'"));
        os << j.dump(2) << "\n";
      }
    } else if (sc_exp->parsed()) {
      plab::RunConfig cfg = plab::load_run_config(f_exp.config);
      plab::ModelSpec spec;
      {
        plab::Dataset shape_only;
        shape_only.channels = input_shape_for(cfg.data)[0];
        shape_only.height = input_shape_for(cfg.data)[1];
        shape_only.width = input_shape_for(cfg.data)[2];
        shape_only.classes = cfg.model.classes;
        spec = plab::build_model(cfg.model, shape_only);
      }
      plab::ModelState st = plab::init_model(spec, 1);
      plab::load_checkpoint(exp_ckpt, st);
      plab::FilterImage img = plab::export_filters(st, exp_group, exp_out);
      std::cout << "wrote " << exp_out << " (" << img.width << "x"
                << img.height << ")\n";
    } else if (sc_synth->parsed()) {
      plab::GlyphCorpusConfig gc;
      gc.train_n = synth_train;
      gc.test_n = synth_test;
      gc.seed = std::uint64_t(synth_seed);
      std::filesystem::create_directories(synth_out);
      if (synth_format == "idx")
        plab::write_glyph_corpus_idx(synth_out, gc);
      else if (synth_format == "cifar")
        plab::write_glyph_corpus_cifar(synth_out, gc);
      else
        plab::fail(plab::msg("synth-data: unknown format '", synth_format,
                             "'"));
      std::cout << "wrote glyph corpus (" << gc.train_n << " train, "
                << gc.test_n << " test) to " << synth_out << "\n";
    } else if (sc_rerun->parsed()) {
      plab::ArmResult res =
          plab::rerun_arm_from_manifest(rr_manifest, rr_arm, rr_out);
      print_arm(res);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
