#pragma once

// The training loop. Single-threaded, deterministic: batch order, parameter
// init, augmentation, and deficit fixtures all derive from the run seed, so a
// config reproduces its run bit for bit within a build. Deficits apply to
// training batches inside their epoch window; evaluation data is never
// touched. Normalization statistics come from the clean training set and are
// applied after deficit and augmentation.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "plab/checkpoint.hpp"
#include "plab/data.hpp"
#include "plab/deficit.hpp"
#include "plab/model.hpp"
#include "plab/optim.hpp"

namespace plab {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AugmentConfig {
  int max_shift = 0;
  bool hflip = false;
  bool enabled() const { return max_shift > 0 || hflip; }
};

struct TrainConfig {
  std::string optimizer = "sgd";  // sgd | adam
  double lr0 = 0.05;
  double lr_decay = 0.97;
  double weight_decay = 0.001;
  int batch_size = 128;
  int epochs = 0;
  std::uint64_t seed = 1;
  AugmentConfig augment;
  DeficitSchedule deficit;
  std::vector<int> probe_epochs;  // "after k completed epochs"; 0 = at init
  std::string metrics_csv;        // written per epoch when set
  std::string checkpoint_dir;     // final.plab written there when set
  int checkpoint_every = 0;       // additional periodic checkpoints when > 0
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double test_acc = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  double final_test_acc = 0;
  NormStats norm;
};

using ProbeHook = std::function<void(int epochs_done, ModelState& state)>;

inline double evaluate(ModelState& st, const Dataset& test,
                       const NormStats& norm, int batch_size = 256) {
  require(test.size() > 0, "evaluate: empty dataset");
  int correct = 0;
  std::vector<int> rows(std::size_t(test.size()));
  for (int i = 0; i < test.size(); ++i) rows[std::size_t(i)] = i;
  for (int at = 0; at < test.size(); at += batch_size) {
    const int n = std::min(batch_size, test.size() - at);
    Batch b = gather_batch(test, rows.data() + at, n);
    normalize_batch(*b.x, norm);
    TensorPtr logits = forward(st, nullptr, b.x, /*training=*/false);
    const int C = logits->dim(1);
    for (int i = 0; i < n; ++i) {
      const double* row = logits->data() + std::size_t(i) * C;
      int best = 0;
      for (int c = 1; c < C; ++c)
        if (row[c] > row[best]) best = c;
      if (best == b.labels[std::size_t(i)]) ++correct;
    }
  }
  return double(correct) / double(test.size());
}

namespace detail {

inline void write_metrics_csv(const std::string& path,
                              const std::vector<EpochMetrics>& rows) {
  std::ofstream os(path);
  require(bool(os), msg("cannot open '", path, "' for writing"));
  os << "epoch,lr,train_loss,test_acc\n";
  os.precision(17);
  for (const EpochMetrics& r : rows)
    os << r.epoch << "," << r.lr << "," << r.train_loss << "," << r.test_acc
       << "\n";
  require(bool(os), msg("write to '", path, "' failed"));
}

}  // namespace detail

inline TrainResult train(ModelState& st, const Dataset& train_set,
                         const Dataset& test_set, const TrainConfig& cfg,
                         const ProbeHook& probe = {}) {
  require(cfg.epochs >= 0, "train: negative epoch count");
  require(cfg.batch_size >= 2, "train: batch size must be at least 2");
  require(cfg.optimizer == "sgd" || cfg.optimizer == "adam",
          msg("train: unknown optimizer '", cfg.optimizer, "'"));
  require(train_set.size() >= 2, "train: need at least 2 training rows");
  require(cfg.deficit.kind == DeficitKind::None ||
              cfg.deficit.end > cfg.deficit.start,
          "train: empty deficit window on a non-trivial deficit");

  TrainResult result;
  result.norm = compute_norm_stats(train_set);
  const DeficitContext deficit_ctx =
      make_deficit_context(cfg.deficit.kind, train_set, cfg.seed);

  AdamState adam;
  const bool use_adam = cfg.optimizer == "adam";
  if (use_adam) adam = make_adam_state(st);

  auto probe_wanted = [&](int k) {
    for (int p : cfg.probe_epochs)
      if (p == k) return true;
    return false;
  };
  if (probe && probe_wanted(0)) probe(0, st);

  std::vector<int> order(std::size_t(train_set.size()));
  for (int i = 0; i < train_set.size(); ++i) order[std::size_t(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg.lr0, cfg.lr_decay);
    const bool deficit_on = cfg.deficit.active(epoch);
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    std::int64_t seen = 0;
    int batch_index = 0;
    for (int at = 0; at < train_set.size(); at += cfg.batch_size) {
      const int n = std::min(cfg.batch_size, train_set.size() - at);
      if (n < 2) break;  // batch-norm needs 2+ rows; drop the singleton tail
      Batch b = gather_batch(train_set, order.data() + at, n);
      if (deficit_on) apply_deficit(cfg.deficit.kind, deficit_ctx, b);
      if (cfg.augment.enabled()) {
        Rng aug_rng(derive_seed(cfg.seed, "augment", std::uint64_t(epoch),
                                std::uint64_t(batch_index)));
        augment_batch(*b.x, cfg.augment.max_shift, cfg.augment.hflip, aug_rng);
      }
      normalize_batch(*b.x, result.norm);

      Tape tape;
      TensorPtr logits = forward(st, &tape, b.x, /*training=*/true);
      LossResult lr_out = softmax_cross_entropy(&tape, logits, b.labels);
      const double loss = lr_out.loss->values[0];
      if (!std::isfinite(loss)) {
        if (!cfg.checkpoint_dir.empty()) {
          std::filesystem::create_directories(cfg.checkpoint_dir);
          save_checkpoint(cfg.checkpoint_dir + "/diverged.plab", st, epoch);
        }
        throw DivergenceError(msg("non-finite loss at epoch ", epoch,
                                  ", batch ", batch_index,
                                  cfg.checkpoint_dir.empty()
                                      ? ""
                                      : " (state dumped to diverged.plab)"));
      }
      tape.backward(lr_out.loss);
      if (use_adam)
        adam_step(st, adam, lr, cfg.weight_decay);
      else
        sgd_step(st, lr, cfg.weight_decay);
      zero_grads(st);

      loss_sum += loss * n;
      seen += n;
      ++batch_index;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.train_loss = seen > 0 ? loss_sum / double(seen) : 0.0;
    em.test_acc = evaluate(st, test_set, result.norm);
    result.metrics.push_back(em);
    if (!cfg.metrics_csv.empty())
      detail::write_metrics_csv(cfg.metrics_csv, result.metrics);

    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      save_checkpoint(cfg.checkpoint_dir + msg("/epoch_", epoch + 1, ".plab"),
                      st, epoch + 1);
    }
    if (probe && probe_wanted(epoch + 1)) probe(epoch + 1, st);
  }

  result.final_test_acc =
      result.metrics.empty() ? evaluate(st, test_set, result.norm)
                             : result.metrics.back().test_acc;
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    save_checkpoint(cfg.checkpoint_dir + "/final.plab", st, cfg.epochs);
  }
  return result;
}

}  // namespace plab
