#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "testutil.hpp"

using namespace plab;

namespace {

// p(y=1|x) = sigmoid(w x) via a trainable 1->1 linear feeding a frozen
// 1->2 head with rows (0) and (1); the only trainable parameter is w.
struct ScalarLogistic {
  ModelSpec spec;
  ModelState st;
  Dataset ds;
  NormStats norm;

  explicit ScalarLogistic(double w) : spec(make_spec()), st(init_model(spec, 1)) {
    st.find("g0.linear1.w")->tensor->values = {w};
    st.find("g1.linear2.w")->tensor->values = {0.0, 1.0};
    set_trainable(st, "g1.linear2.w", false);
    ds.channels = 1;
    ds.height = 1;
    ds.width = 1;
    ds.classes = 2;
    ds.images = {1.0, -1.0};
    ds.labels = {0, 1};
    norm = compute_norm_stats(ds);  // mean 0, std 1: identity
  }

  static ModelSpec make_spec() {
    ModelSpec s;
    s.kind = "fc";
    s.input = {1, 1, 1};
    s.classes = 2;
    s.layers.push_back({LayerKind::Flatten});
    s.layers.push_back({LayerKind::Linear, 1, 0, 1, 0, false, false, 0});
    s.layers.push_back({LayerKind::Linear, 2, 0, 1, 0, false, false, 1});
    s.num_groups = 2;
    validate(s);
    return s;
  }
};

Dataset separable(int n, std::uint64_t seed) {
  Dataset ds;
  ds.channels = 1;
  ds.height = 4;
  ds.width = 4;
  ds.classes = 2;
  ds.images.assign(std::size_t(n) * 16, 0.0);
  ds.labels.resize(std::size_t(n));
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    ds.labels[std::size_t(i)] = y;
    double* img = &ds.images[std::size_t(i) * 16];
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        const bool lit = y == 0 ? c < 2 : c >= 2;
        img[r * 4 + c] = (lit ? 0.8 : 0.1) + rng.uniform(-0.05, 0.05);
      }
  }
  return ds;
}

std::vector<double> all_values(const ModelState& st) {
  std::vector<double> out;
  for (const ParamInfo& p : st.params)
    out.insert(out.end(), p.tensor->values.begin(), p.tensor->values.end());
  return out;
}

}  // namespace

TEST_CASE("scalar logistic trace matches the closed form") {
  // At w=0 every sampled score is exactly (x/2)^2 = 1/4, so the Monte-Carlo
  // estimate is the analytic trace with zero variance.
  ScalarLogistic m(0.0);
  FisherConfig cfg;
  cfg.n_x = 2;
  cfg.n_y = 2048;
  cfg.seed = 17;
  FisherProbe p = fim_trace_mc(m.st, m.ds, m.norm, cfg);
  REQUIRE(p.n_x == 2);
  REQUIRE(p.total == Catch::Approx(0.25).margin(1e-12));
  REQUIRE(p.trace_by_group.at(0) == Catch::Approx(0.25).margin(1e-12));
  REQUIRE(p.trace_by_group.at(1) == 0.0);  // frozen head contributes nothing

  // At w=1/2 the trace is sigmoid(1/2)sigmoid(-1/2); label sampling now
  // matters, so allow three standard errors at 8192 draws.
  ScalarLogistic m2(0.5);
  FisherConfig cfg2;
  cfg2.n_x = 2;
  cfg2.n_y = 4096;
  cfg2.seed = 18;
  const double s = 1.0 / (1.0 + std::exp(-0.5));
  const double expect = s * (1.0 - s);
  FisherProbe p2 = fim_trace_mc(m2.st, m2.ds, m2.norm, cfg2);
  REQUIRE(p2.total == Catch::Approx(expect).margin(0.004));
}

TEST_CASE("trace probe is deterministic and leaves the model untouched") {
  Dataset ds = separable(32, 5);
  ModelState st = init_model(build_fc({1, 4, 4}, {8}, 2), 4);
  NormStats norm = compute_norm_stats(ds);
  const std::vector<double> before = all_values(st);
  FisherConfig cfg;
  cfg.n_x = 16;
  cfg.n_y = 4;
  cfg.seed = 3;
  FisherProbe a = fim_trace_mc(st, ds, norm, cfg);
  REQUIRE(all_values(st) == before);
  FisherProbe b = fim_trace_mc(st, ds, norm, cfg);
  REQUIRE(a.total == b.total);
  REQUIRE(a.trace_by_group == b.trace_by_group);
  cfg.seed = 4;
  FisherProbe c = fim_trace_mc(st, ds, norm, cfg);
  REQUIRE(a.total != c.total);
  REQUIRE(a.total > 0);
  double sum = 0;
  for (const auto& [g, t] : a.trace_by_group) {
    REQUIRE(t >= 0);
    sum += t;
  }
  REQUIRE(sum == Catch::Approx(a.total));
}

TEST_CASE("kl matches half the fisher quadratic form") {
  Dataset tr = separable(64, 15);
  ModelState st = init_model(build_fc({1, 4, 4}, {8}, 2), 6);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 16;
  TrainResult res = train(st, tr, tr, tc);

  const std::vector<double> delta = random_perturbation(st, 1e-2, 21);
  FisherConfig cfg;
  cfg.n_x = 64;
  cfg.n_y = 16;
  cfg.seed = 9;
  KlCheckResult r1 = kl_quadratic_check(st, tr, res.norm, delta, cfg);
  REQUIRE(r1.kl > 0);
  REQUIRE(r1.quad > 0);
  REQUIRE(r1.ratio > 0.8);
  REQUIRE(r1.ratio < 1.25);

  // halving the perturbation kills the cubic remainder; with the same label
  // draws the quadratic form scales exactly, so the ratio tightens
  std::vector<double> half = delta;
  for (double& d : half) d *= 0.5;
  KlCheckResult r2 = kl_quadratic_check(st, tr, res.norm, half, cfg);
  REQUIRE(r2.quad == Catch::Approx(0.25 * r1.quad).epsilon(1e-9));
  REQUIRE(std::abs(r2.ratio - 1.0) <= std::abs(r1.ratio - 1.0) + 0.02);

  // doubling scales the quadratic form by four with the same draws
  std::vector<double> twice = delta;
  for (double& d : twice) d *= 2.0;
  KlCheckResult r4 = kl_quadratic_check(st, tr, res.norm, twice, cfg);
  REQUIRE(r4.quad == Catch::Approx(4.0 * r1.quad).epsilon(1e-9));

  std::vector<double> bad(delta.size() + 1, 0.0);
  REQUIRE_THROWS(kl_quadratic_check(st, tr, res.norm, bad, cfg));
}

TEST_CASE("perturbation rms tracks the requested scale") {
  ModelState st = init_model(build_fc({1, 4, 4}, {8}, 2), 6);
  const std::vector<double> w = flatten_trainable_values(st);
  double wrms = 0;
  for (double v : w) wrms += v * v;
  wrms = std::sqrt(wrms / double(w.size()));
  const std::vector<double> d = random_perturbation(st, 1e-2, 33);
  REQUIRE(d.size() == w.size());
  double drms = 0;
  for (double v : d) drms += v * v;
  drms = std::sqrt(drms / double(d.size()));
  REQUIRE(drms == Catch::Approx(1e-2 * wrms).epsilon(0.25));
  REQUIRE(random_perturbation(st, 1e-2, 33) == d);
}

TEST_CASE("variational fit recovers a diagonal quadratic") {
  Rng rng(derive_seed(50, "quad"));
  const int n = 50;
  std::vector<double> h(n), c(n, 0.0);
  for (double& v : h)
    v = std::exp(rng.uniform(std::log(0.1), std::log(10.0)));

  QuadraticObjective obj(h, c);
  VariationalConfig cfg;
  cfg.beta = 0.01;
  cfg.steps = 2000;
  cfg.seed = 2;
  VariationalResult res = fit_diagonal_posterior(obj, cfg);
  REQUIRE(res.clamped == 0);
  const std::vector<double> s2 = res.sigma2();
  const std::vector<double> hd = res.h_diag();
  for (int i = 0; i < n; ++i) {
    const double want = cfg.beta / h[std::size_t(i)];
    REQUIRE(s2[std::size_t(i)] ==
            Catch::Approx(want).epsilon(0.05));
    REQUIRE(hd[std::size_t(i)] ==
            Catch::Approx(h[std::size_t(i)]).epsilon(0.06));
  }
  double tr = 0;
  for (double v : h) tr += v;
  REQUIRE(res.trace() == Catch::Approx(tr).epsilon(0.05));

  // doubling beta doubles every sigma^2
  VariationalConfig cfg2 = cfg;
  cfg2.beta = 0.02;
  VariationalResult res2 = fit_diagonal_posterior(obj, cfg2);
  const std::vector<double> s2b = res2.sigma2();
  for (int i = 0; i < n; ++i)
    REQUIRE(s2b[std::size_t(i)] ==
            Catch::Approx(2.0 * s2[std::size_t(i)]).epsilon(0.1));
}

TEST_CASE("model objective is a pure function of the weight vector") {
  Dataset ds = separable(32, 25);
  ModelState st = init_model(build_fc({1, 4, 4}, {4}, 2), 8);
  NormStats norm = compute_norm_stats(ds);
  ModelObjective obj(st, ds, norm, 8);
  const std::vector<double> before = all_values(st);
  std::vector<double> w = obj.base_point();
  for (double& v : w) v += 0.01;
  std::vector<double> g1, g2;
  Rng r1(derive_seed(7, "mo"));
  Rng r2(derive_seed(7, "mo"));
  const double l1 = obj.loss_grad(w, g1, r1);
  const double l2 = obj.loss_grad(w, g2, r2);
  REQUIRE(l1 == l2);
  REQUIRE(g1 == g2);
  REQUIRE(std::int64_t(g1.size()) == trainable_count(st));
  REQUIRE(all_values(st) == before);  // weights restored after every call
  double gn = 0;
  for (double v : g1) gn += v * v;
  REQUIRE(gn > 0);
}

TEST_CASE("gradient statistics are per group and leave buffers alone") {
  Dataset ds = separable(64, 35);
  ModelState st = init_model(build_fc({1, 4, 4}, {8, 4}, 2), 9);
  NormStats norm = compute_norm_stats(ds);
  const std::vector<double> before = all_values(st);
  GradStats gs = grad_stats(st, ds, norm, 4, 16, 11);
  REQUIRE(all_values(st) == before);
  REQUIRE(gs.mean_norm.size() == 3);
  REQUIRE(gs.std_norm.size() == 3);
  for (const auto& [g, v] : gs.mean_norm) {
    REQUIRE(v > 0);
    REQUIRE(gs.std_norm.at(g) > 0);
  }
  REQUIRE_THROWS(grad_stats(st, ds, norm, 1, 16, 11));
}

TEST_CASE("layer-wise normalization modes") {
  FisherTimeline tl;
  FisherProbe p1;
  p1.epoch = 0;
  p1.trace_by_group = {{0, 1.0}, {1, 3.0}};
  p1.total = 4.0;
  FisherProbe p2;
  p2.epoch = 5;
  p2.trace_by_group = {{0, 2.0}, {1, 2.0}};
  p2.total = 4.0;
  tl = {p1, p2};

  auto share = normalize_layerwise(tl, LayerNorm::ShareOfTotal);
  REQUIRE(share[0].at(0) == Catch::Approx(0.25));
  REQUIRE(share[0].at(1) == Catch::Approx(0.75));
  REQUIRE(share[1].at(0) == Catch::Approx(0.5));

  auto peak = normalize_layerwise(tl, LayerNorm::PerLayerPeak);
  REQUIRE(peak[0].at(0) == Catch::Approx(0.5));
  REQUIRE(peak[0].at(1) == Catch::Approx(1.0));
  REQUIRE(peak[1].at(0) == Catch::Approx(1.0));
  REQUIRE(peak[1].at(1) == Catch::Approx(2.0 / 3.0));

  REQUIRE_THROWS(normalize_layerwise({}, LayerNorm::ShareOfTotal));
  FisherProbe zero;
  zero.trace_by_group = {{0, 0.0}};
  zero.total = 0.0;
  REQUIRE_THROWS(normalize_layerwise({zero}, LayerNorm::ShareOfTotal));
}

TEST_CASE("fisher csv round trips") {
  FisherTimeline tl;
  for (int e : {0, 3, 9}) {
    FisherProbe p;
    p.epoch = e;
    p.trace_by_group = {{0, 0.125 + e}, {1, 1.0 / 3.0 + e}, {2, 2e-17}};
    p.total = p.trace_by_group[0] + p.trace_by_group[1] + p.trace_by_group[2];
    p.n_x = 512;
    p.n_y = 1;
    p.seed = 123456789012345ull;
    tl.push_back(p);
  }
  const std::string path =
      (std::filesystem::temp_directory_path() / "plab_fisher_test.csv")
          .string();
  write_fisher_csv(path, tl);
  FisherTimeline back = read_fisher_csv(path);
  REQUIRE(back.size() == tl.size());
  for (std::size_t i = 0; i < tl.size(); ++i) {
    REQUIRE(back[i].epoch == tl[i].epoch);
    REQUIRE(back[i].trace_by_group == tl[i].trace_by_group);
    REQUIRE(back[i].total == tl[i].total);
    REQUIRE(back[i].n_x == tl[i].n_x);
    REQUIRE(back[i].n_y == tl[i].n_y);
    REQUIRE(back[i].seed == tl[i].seed);
  }
  REQUIRE_THROWS(read_fisher_csv(path + ".missing"));
}
