#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "testutil.hpp"

using namespace plab;

namespace {

std::string temp_dir(const std::string& leaf) {
  auto d = std::filesystem::temp_directory_path() / "plab_train_test" / leaf;
  std::filesystem::create_directories(d);
  return d.string();
}

// Two linearly separable blobs on 1x4x4 images: class 0 lights the left
// columns, class 1 the right, plus mild seeded jitter.
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

ModelSpec tiny_fc() { return build_fc({1, 4, 4}, {8}, 2); }

std::vector<double> flat_params(ModelState& st) {
  std::vector<double> out;
  for (ParamInfo& p : st.params)
    out.insert(out.end(), p.tensor->values.begin(), p.tensor->values.end());
  return out;
}

}  // namespace

TEST_CASE("learning rate schedule is exponential decay") {
  REQUIRE(lr_at(0, 0.05, 0.97) == Catch::Approx(0.05));
  REQUIRE(lr_at(1, 0.05, 0.97) == Catch::Approx(0.05 * 0.97));
  REQUIRE(lr_at(10, 0.05, 0.97) ==
          Catch::Approx(0.05 * std::pow(0.97, 10)));
  REQUIRE_THROWS(lr_at(-1, 0.05, 0.97));
  REQUIRE_THROWS(lr_at(0, 0.0, 0.97));
}

TEST_CASE("sgd step matches the closed form and skips frozen tensors") {
  ModelState st = init_model(tiny_fc(), 5);
  // plant known grads on every trainable tensor
  std::vector<std::vector<double>> w0, g0;
  Rng rng(derive_seed(5, "sgd"));
  for (ParamInfo& p : st.params) {
    w0.push_back(p.tensor->values);
    if (!p.trainable || p.buffer) {
      g0.emplace_back();
      continue;
    }
    p.tensor->ensure_grad();
    for (double& g : p.tensor->grad) g = rng.uniform(-1, 1);
    g0.push_back(p.tensor->grad);
  }
  const double lr = 0.1, wd = 0.01;
  sgd_step(st, lr, wd);
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    ParamInfo& p = st.params[i];
    if (!p.trainable || p.buffer) {
      REQUIRE(p.tensor->values == w0[i]);
      continue;
    }
    for (std::size_t k = 0; k < p.tensor->values.size(); ++k) {
      const double want = w0[i][k] - lr * (g0[i][k] + wd * w0[i][k]);
      REQUIRE(p.tensor->values[k] == Catch::Approx(want).margin(1e-15));
    }
  }

  // frozen parameters do not move either
  ModelState st2 = init_model(tiny_fc(), 5);
  set_trainable(st2, "g0.linear1.w", false);
  const std::vector<double> frozen =
      st2.find("g0.linear1.w")->tensor->values;
  for (ParamInfo& p : st2.params) {
    if (!p.trainable || p.buffer) continue;
    p.tensor->ensure_grad();
    for (double& g : p.tensor->grad) g = 0.5;
  }
  sgd_step(st2, lr, wd);
  REQUIRE(st2.find("g0.linear1.w")->tensor->values == frozen);
}

TEST_CASE("adam first step matches the closed form") {
  ModelState st = init_model(tiny_fc(), 6);
  AdamState as = make_adam_state(st);
  std::vector<std::vector<double>> w0, g0;
  Rng rng(derive_seed(6, "adam"));
  for (ParamInfo& p : st.params) {
    w0.push_back(p.tensor->values);
    if (!p.trainable || p.buffer) {
      g0.emplace_back();
      continue;
    }
    p.tensor->ensure_grad();
    for (double& g : p.tensor->grad) g = rng.uniform(-1, 1);
    g0.push_back(p.tensor->grad);
  }
  const double lr = 0.002, wd = 0.01;
  adam_step(st, as, lr, wd);
  REQUIRE(as.t == 1);
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    ParamInfo& p = st.params[i];
    if (!p.trainable || p.buffer) continue;
    for (std::size_t k = 0; k < p.tensor->values.size(); ++k) {
      // at t=1 the bias corrections cancel the (1-beta) factors exactly
      const double g = g0[i][k] + wd * w0[i][k];
      const double want = w0[i][k] - lr * g / (std::abs(g) + as.eps);
      REQUIRE(p.tensor->values[k] == Catch::Approx(want).margin(1e-12));
    }
  }

  // a second step uses accumulated moments: same grad keeps the sign
  ModelState st3 = init_model(tiny_fc(), 6);
  AdamState as3 = make_adam_state(st3);
  TensorPtr w = st3.find("g0.linear1.w")->tensor;
  const double before = w->values[0];
  for (int step = 0; step < 2; ++step) {
    for (ParamInfo& p : st3.params) {
      if (!p.trainable || p.buffer) continue;
      p.tensor->ensure_grad();
      for (double& g : p.tensor->grad) g = 1.0;
    }
    adam_step(st3, as3, lr, 0.0);
  }
  REQUIRE(w->values[0] < before);
  REQUIRE(w->values[0] == Catch::Approx(before - 2 * lr).margin(1e-6));
}

TEST_CASE("training a tiny net on separable data learns it") {
  Dataset tr = separable(64, 31);
  Dataset te = separable(32, 32);
  ModelState st = init_model(tiny_fc(), 7);
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 16;
  cfg.lr0 = 0.1;
  cfg.weight_decay = 0.0005;
  const std::string dir = temp_dir("learn");
  cfg.metrics_csv = dir + "/metrics.csv";
  cfg.checkpoint_dir = dir;
  TrainResult res = train(st, tr, te, cfg);
  REQUIRE(res.final_test_acc > 0.9);
  REQUIRE(res.metrics.size() == 12);
  REQUIRE(res.metrics.front().train_loss > res.metrics.back().train_loss);

  std::ifstream is(cfg.metrics_csv);
  std::string header;
  std::getline(is, header);
  REQUIRE(header == "epoch,lr,train_loss,test_acc");
  int rows = 0;
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) ++rows;
  REQUIRE(rows == 12);

  ModelState st2 = init_model(tiny_fc(), 99);
  CheckpointMeta meta = load_checkpoint(dir + "/final.plab", st2);
  REQUIRE(meta.epoch == 12);
  REQUIRE(flat_params(st2) == flat_params(st));
}

TEST_CASE("same seed reproduces the run bit for bit") {
  Dataset tr = separable(48, 41);
  Dataset te = separable(16, 42);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.augment.max_shift = 1;
  cfg.seed = 12;
  ModelState a = init_model(tiny_fc(), cfg.seed);
  ModelState b = init_model(tiny_fc(), cfg.seed);
  TrainResult ra = train(a, tr, te, cfg);
  TrainResult rb = train(b, tr, te, cfg);
  REQUIRE(flat_params(a) == flat_params(b));
  REQUIRE(ra.final_test_acc == rb.final_test_acc);
  for (std::size_t i = 0; i < ra.metrics.size(); ++i)
    REQUIRE(ra.metrics[i].train_loss == rb.metrics[i].train_loss);

  ModelState c = init_model(tiny_fc(), 13);
  TrainConfig cfg2 = cfg;
  cfg2.seed = 13;
  train(c, tr, te, cfg2);
  REQUIRE(flat_params(a) != flat_params(c));
}

TEST_CASE("a deficit window changes training, clean epochs do not") {
  Dataset tr = separable(48, 51);
  Dataset te = separable(16, 52);
  TrainConfig clean;
  clean.epochs = 3;
  clean.batch_size = 16;
  clean.seed = 3;

  TrainConfig windowed = clean;
  windowed.deficit = {DeficitKind::NoiseReplace, 1, 2};

  ModelState a = init_model(tiny_fc(), 3);
  ModelState b = init_model(tiny_fc(), 3);
  train(a, tr, te, clean);
  train(b, tr, te, windowed);
  REQUIRE(flat_params(a) != flat_params(b));

  // a window that never activates within the run leaves it untouched
  TrainConfig late = clean;
  late.deficit = {DeficitKind::VFlip, 10, 20};
  ModelState c = init_model(tiny_fc(), 3);
  train(c, tr, te, late);
  REQUIRE(flat_params(a) == flat_params(c));
}

TEST_CASE("probe hook fires at requested epochs including init") {
  Dataset tr = separable(32, 61);
  Dataset te = separable(16, 62);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.probe_epochs = {0, 2, 4};
  ModelState st = init_model(tiny_fc(), 8);
  std::vector<int> fired;
  train(st, tr, te, cfg,
        [&](int k, ModelState&) { fired.push_back(k); });
  REQUIRE(fired == std::vector<int>{0, 2, 4});
}

TEST_CASE("divergence raises after dumping state") {
  Dataset tr = separable(32, 71);
  Dataset te = separable(16, 72);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 16;
  // batch norm keeps the loss finite under any uniform rescaling, so the
  // run only diverges once the weights themselves overflow
  cfg.lr0 = 1e100;
  cfg.weight_decay = 1.0;
  cfg.checkpoint_dir = temp_dir("diverge");
  ModelState st = init_model(tiny_fc(), 9);
  REQUIRE_THROWS_AS(train(st, tr, te, cfg), DivergenceError);
  REQUIRE(std::filesystem::exists(cfg.checkpoint_dir + "/diverged.plab"));
}

TEST_CASE("config validation") {
  Dataset tr = separable(8, 81);
  Dataset te = separable(8, 82);
  ModelState st = init_model(tiny_fc(), 1);
  TrainConfig bad;
  bad.epochs = 1;
  bad.batch_size = 1;
  REQUIRE_THROWS(train(st, tr, te, bad));
  TrainConfig bad2;
  bad2.epochs = 1;
  bad2.deficit = {DeficitKind::Blur, 3, 3};
  REQUIRE_THROWS(train(st, tr, te, bad2));
  TrainConfig bad3;
  bad3.epochs = 1;
  bad3.optimizer = "rmsprop";
  REQUIRE_THROWS(train(st, tr, te, bad3));
}

TEST_CASE("periodic checkpoints appear on schedule") {
  Dataset tr = separable(32, 91);
  Dataset te = separable(16, 92);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 16;
  cfg.checkpoint_dir = temp_dir("periodic");
  cfg.checkpoint_every = 2;
  ModelState st = init_model(tiny_fc(), 2);
  train(st, tr, te, cfg);
  REQUIRE(std::filesystem::exists(cfg.checkpoint_dir + "/epoch_2.plab"));
  REQUIRE(std::filesystem::exists(cfg.checkpoint_dir + "/epoch_4.plab"));
  REQUIRE(!std::filesystem::exists(cfg.checkpoint_dir + "/epoch_3.plab"));
  REQUIRE(std::filesystem::exists(cfg.checkpoint_dir + "/final.plab"));
}
