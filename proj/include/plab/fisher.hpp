#pragma once

// Fisher Information instrumentation. The Monte-Carlo trace probe samples
// inputs from the dataset and labels from the model's own posterior, so it
// measures the information the network actually uses, not agreement with the
// dataset labels. The variational estimator recovers an implied diagonal
// curvature from the optimal per-parameter noise a network tolerates.
// Probes never mutate the model: weights are restored and batch-norm running
// buffers are snapshotted around train-mode passes.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "plab/data.hpp"
#include "plab/model.hpp"
#include "plab/optim.hpp"

namespace plab {

struct FisherProbe {
  int epoch = 0;
  std::map<int, double> trace_by_group;
  double total = 0;
  int n_x = 0, n_y = 0;
  std::uint64_t seed = 0;
};

using FisherTimeline = std::vector<FisherProbe>;

struct FisherConfig {
  int n_x = 512;
  int n_y = 1;
  std::uint64_t seed = 1;
};

namespace detail {

// First n_x dataset rows of a seeded shuffle; all rows when n_x >= size.
inline std::vector<int> sample_rows(int total, int n_x, std::uint64_t seed) {
  std::vector<int> rows(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) rows[std::size_t(i)] = i;
  if (n_x >= total) return rows;
  Rng rng(derive_seed(seed, "fisher-x"));
  rng.shuffle(rows);
  rows.resize(std::size_t(n_x));
  return rows;
}

inline int sample_from_posterior(const double* p, int C, double u) {
  double acc = 0;
  for (int c = 0; c < C; ++c) {
    acc += p[c];
    if (u < acc) return c;
  }
  return C - 1;
}

}  // namespace detail

// Monte-Carlo estimate of the FIM trace, partitioned by parameter group:
// mean over (x, y~p_w(.|x)) of ||d log p_w(y|x) / dw||^2 for trainable
// parameters. Inputs are normalized with `norm` exactly as evaluation data.
inline FisherProbe fim_trace_mc(ModelState& st, const Dataset& ds,
                                const NormStats& norm,
                                const FisherConfig& cfg) {
  require(ds.size() > 0, "fim_trace_mc: empty dataset");
  require(cfg.n_x >= 1 && cfg.n_y >= 1, "fim_trace_mc: need n_x, n_y >= 1");

  FisherProbe probe;
  probe.n_x = std::min(cfg.n_x, ds.size());
  probe.n_y = cfg.n_y;
  probe.seed = cfg.seed;
  for (const auto& [g, idxs] : group_params(st)) {
    (void)idxs;
    probe.trace_by_group[g] = 0.0;
  }

  const std::vector<int> rows =
      detail::sample_rows(ds.size(), cfg.n_x, cfg.seed);
  const auto groups = group_params(st);

  for (int row : rows) {
    Batch b = gather_batch(ds, &row, 1);
    normalize_batch(*b.x, norm);
    Tape tape;
    TensorPtr logits = forward(st, &tape, b.x, /*training=*/false);
    TensorPtr post = softmax(logits);
    const int C = logits->dim(1);
    Rng yrng(derive_seed(cfg.seed, "fisher-y", std::uint64_t(row)));
    for (int j = 0; j < cfg.n_y; ++j) {
      const int y =
          detail::sample_from_posterior(post->data(), C, yrng.uniform());
      TensorPtr lp = log_prob(&tape, logits, {y});
      zero_grads(st);
      tape.backward(lp);
      for (const auto& [g, idxs] : groups) {
        double s = 0;
        for (int pi : idxs) {
          const ParamInfo& p = st.params[std::size_t(pi)];
          if (!p.trainable || !p.tensor->has_grad()) continue;
          for (double gv : p.tensor->grad) s += gv * gv;
        }
        probe.trace_by_group[g] += s;
      }
    }
  }
  zero_grads(st);

  const double denom = double(rows.size()) * double(cfg.n_y);
  for (auto& [g, v] : probe.trace_by_group) {
    (void)g;
    v /= denom;
    probe.total += v;
  }
  return probe;
}

// ---------------------------------------------------------------------------
// KL quadratic form check: empirical E_x KL(p_{w+d} || p_w) against the
// Fisher quadratic form d'Fd estimated with the same input sample.

struct KlCheckResult {
  double kl = 0;     // mean KL over the input sample
  double quad = 0;   // mean over (x,y) of (d . grad log p)^2, estimates d'Fd
  double ratio = 0;  // kl / (0.5 * quad): the one-sided KL expands to
                     // 0.5 d'Fd + o(|d|^2), so a correct estimator drives
                     // this to 1 as |d| -> 0
};

// Perturbation with RMS = rel_scale * RMS(trainable weights).
inline std::vector<double> random_perturbation(const ModelState& st,
                                               double rel_scale,
                                               std::uint64_t seed) {
  const std::vector<double> w = flatten_trainable_values(st);
  require(!w.empty(), "random_perturbation: model has no trainable weights");
  double rms = 0;
  for (double v : w) rms += v * v;
  rms = std::sqrt(rms / double(w.size()));
  Rng rng(derive_seed(seed, "perturbation"));
  std::vector<double> d(w.size());
  for (double& v : d) v = rng.normal(0.0, rel_scale * rms);
  return d;
}

inline KlCheckResult kl_quadratic_check(ModelState& st, const Dataset& ds,
                                        const NormStats& norm,
                                        const std::vector<double>& delta,
                                        const FisherConfig& cfg) {
  require(std::int64_t(delta.size()) == trainable_count(st),
          msg("kl_quadratic_check: perturbation has ", delta.size(),
              " entries for ", trainable_count(st), " trainable parameters"));
  const std::vector<int> rows =
      detail::sample_rows(ds.size(), cfg.n_x, cfg.seed);

  const std::vector<double> w0 = flatten_trainable_values(st);

  // Log-posteriors at w0 and w0 + delta over the sample.
  auto log_posteriors = [&](std::vector<double>& out) {
    int C = 0;
    for (std::size_t at = 0; at < rows.size(); at += 256) {
      const std::size_t n = std::min<std::size_t>(256, rows.size() - at);
      std::vector<int> chunk(rows.begin() + std::ptrdiff_t(at),
                             rows.begin() + std::ptrdiff_t(at + n));
      Batch b = gather_batch(ds, chunk.data(), int(n));
      normalize_batch(*b.x, norm);
      TensorPtr logits = forward(st, nullptr, b.x, false);
      C = logits->dim(1);
      std::vector<double> post(std::size_t(logits->size()));
      std::vector<double> logz(n);
      detail::softmax_rows(logits->data(), int(n), C, post.data(),
                           logz.data());
      for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < C; ++c)
          out.push_back(logits->values[i * std::size_t(C) + std::size_t(c)] -
                        logz[i]);
    }
    return C;
  };

  std::vector<double> lp0, lp1;
  const int C = log_posteriors(lp0);
  std::vector<double> w1(w0.size());
  for (std::size_t i = 0; i < w0.size(); ++i) w1[i] = w0[i] + delta[i];
  scatter_trainable_values(st, w1);
  log_posteriors(lp1);
  scatter_trainable_values(st, w0);

  KlCheckResult res;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double kl = 0;
    for (int c = 0; c < C; ++c) {
      const double l1 = lp1[i * std::size_t(C) + std::size_t(c)];
      const double l0 = lp0[i * std::size_t(C) + std::size_t(c)];
      kl += std::exp(l1) * (l1 - l0);
    }
    res.kl += kl;
  }
  res.kl /= double(rows.size());

  // Quadratic form via sampled label gradients at w0.
  double quad = 0;
  for (int row : rows) {
    Batch b = gather_batch(ds, &row, 1);
    normalize_batch(*b.x, norm);
    Tape tape;
    TensorPtr logits = forward(st, &tape, b.x, false);
    TensorPtr post = softmax(logits);
    Rng yrng(derive_seed(cfg.seed, "fisher-y", std::uint64_t(row)));
    for (int j = 0; j < cfg.n_y; ++j) {
      const int y =
          detail::sample_from_posterior(post->data(), C, yrng.uniform());
      TensorPtr lp = log_prob(&tape, logits, {y});
      zero_grads(st);
      tape.backward(lp);
      const std::vector<double> g = flatten_trainable_grads(st);
      double dot = 0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * delta[i];
      quad += dot * dot;
    }
  }
  zero_grads(st);
  res.quad = quad / (double(rows.size()) * double(cfg.n_y));
  require(res.quad > 0, "kl_quadratic_check: quadratic form vanished");
  res.ratio = res.kl / (0.5 * res.quad);
  return res;
}

// ---------------------------------------------------------------------------
// Variational diagonal-curvature estimator. Minimizes
//   E_{w ~ N(w0, Sigma)} L(w) - beta * log |Sigma|
// over diagonal Sigma via rho = log sigma, with antithetic reparameterized
// samples and Adam on rho. At the optimum Sigma_ii = beta / H_ii, so the
// implied curvature is H_ii = beta / Sigma_ii.

struct StochasticObjective {
  virtual ~StochasticObjective() = default;
  virtual std::int64_t dim() const = 0;
  virtual const std::vector<double>& base_point() const = 0;
  // Returns loss at w; fills grad (same length as w).
  virtual double loss_grad(const std::vector<double>& w,
                           std::vector<double>& grad, Rng& rng) = 0;
};

struct VariationalConfig {
  double beta = 0.01;
  int steps = 2000;
  double lr = 0.001;        // Adam on rho
  int pairs_per_step = 1;   // antithetic (+eps, -eps) pairs
  double rho_max = 5.0;
  double init_sigma2 = -1;  // < 0 means "use beta"
  std::uint64_t seed = 1;
};

struct VariationalResult {
  std::vector<double> rho;
  int clamped = 0;  // directions pinned at rho_max: effectively unconstrained
  double beta = 0;

  std::vector<double> sigma2() const {
    std::vector<double> s(rho.size());
    for (std::size_t i = 0; i < rho.size(); ++i) s[i] = std::exp(2 * rho[i]);
    return s;
  }
  // Implied diagonal curvature.
  std::vector<double> h_diag() const {
    std::vector<double> h(rho.size());
    for (std::size_t i = 0; i < rho.size(); ++i)
      h[i] = beta * std::exp(-2 * rho[i]);
    return h;
  }
  double trace() const {
    double t = 0;
    for (double h : h_diag()) t += h;
    return t;
  }
};

inline VariationalResult fit_diagonal_posterior(StochasticObjective& obj,
                                                const VariationalConfig& cfg) {
  require(cfg.beta > 0, "fit_diagonal_posterior: beta must be positive");
  require(cfg.steps >= 1 && cfg.pairs_per_step >= 1,
          "fit_diagonal_posterior: steps and pairs must be >= 1");
  const std::size_t n = std::size_t(obj.dim());
  require(n > 0, "fit_diagonal_posterior: empty objective");

  const double init_s2 = cfg.init_sigma2 > 0 ? cfg.init_sigma2 : cfg.beta;
  VariationalResult res;
  res.beta = cfg.beta;
  res.rho.assign(n, 0.5 * std::log(init_s2));

  std::vector<double> m(n, 0.0), v(n, 0.0);
  // short second-moment horizon: once the control variate strips the
  // sampling noise the gradient decays quickly, and a long v-memory would
  // throttle the step size mid-approach
  const double b1 = 0.9, b2 = 0.99, eps = 1e-8;
  std::vector<double> w(n), eps_vec(n), gplus(n), gminus(n), rho_grad(n),
      raw(n), cv(n, 0.0);
  const std::vector<double>& w0 = obj.base_point();
  require(w0.size() == n, "fit_diagonal_posterior: base point size mismatch");

  // The first steps estimate each direction's curvature at the initial sigma
  // (E[x_i] = H_ii sigma^2 to leading order) and jump rho to the implied
  // optimum; the fixed learning rate alone could not cover the dynamic range
  // of rho within the step budget. Remaining steps are Adam refinement, and
  // the reported rho is the average over the final quarter so the answer does
  // not depend on where in Adam's terminal cycle the loop stops.
  const int warmup = std::min(50, std::max(1, cfg.steps / 4));
  const int tail_start = cfg.steps - std::max(1, cfg.steps / 4);
  std::vector<double> warm_sum(n, 0.0), tail_sum(n, 0.0);
  int tail_count = 0, adam_t = 0;

  Rng rng(derive_seed(cfg.seed, "variational"));
  for (int step = 1; step <= cfg.steps; ++step) {
    std::fill(rho_grad.begin(), rho_grad.end(), -2.0 * cfg.beta);
    std::fill(raw.begin(), raw.end(), 0.0);
    for (int pair = 0; pair < cfg.pairs_per_step; ++pair) {
      for (std::size_t i = 0; i < n; ++i) eps_vec[i] = rng.normal();
      for (std::size_t i = 0; i < n; ++i)
        w[i] = w0[i] + std::exp(res.rho[i]) * eps_vec[i];
      obj.loss_grad(w, gplus, rng);
      for (std::size_t i = 0; i < n; ++i)
        w[i] = w0[i] - std::exp(res.rho[i]) * eps_vec[i];
      obj.loss_grad(w, gminus, rng);
      const double scale = 0.5 / double(cfg.pairs_per_step);
      for (std::size_t i = 0; i < n; ++i) {
        const double x = scale * (gplus[i] - gminus[i]) * eps_vec[i] *
                         std::exp(res.rho[i]);
        raw[i] += x;
        // cv holds yesterday's mean of x, so cv*(eps^2 - 1) has zero mean;
        // on a locally quadratic loss x ~ 2 h sigma^2 eps^2 and the
        // subtraction cancels nearly all sampling noise (chi-square skew
        // would otherwise bias Adam's equilibrium)
        rho_grad[i] += x - cv[i] * (eps_vec[i] * eps_vec[i] - 1.0) * scale *
                               2.0;
      }
    }

    if (step <= warmup) {
      for (std::size_t i = 0; i < n; ++i) warm_sum[i] += raw[i];
      if (step == warmup) {
        for (std::size_t i = 0; i < n; ++i) {
          const double mean_x = warm_sum[i] / double(warmup);
          const double h_est = 0.5 * mean_x * std::exp(-2.0 * res.rho[i]);
          res.rho[i] = h_est > 0
                           ? std::min(0.5 * std::log(cfg.beta / h_est),
                                      cfg.rho_max)
                           : cfg.rho_max;
          cv[i] = 2.0 * cfg.beta;  // raw mean at the new equilibrium
        }
      }
      continue;
    }

    ++adam_t;
    const double bc1 = 1.0 - std::pow(b1, double(adam_t));
    const double bc2 = 1.0 - std::pow(b2, double(adam_t));
    for (std::size_t i = 0; i < n; ++i) {
      cv[i] = 0.9 * cv[i] + 0.1 * raw[i];
      m[i] = b1 * m[i] + (1 - b1) * rho_grad[i];
      v[i] = b2 * v[i] + (1 - b2) * rho_grad[i] * rho_grad[i];
      res.rho[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      if (res.rho[i] > cfg.rho_max) res.rho[i] = cfg.rho_max;
    }
    if (step > tail_start) {
      for (std::size_t i = 0; i < n; ++i) tail_sum[i] += res.rho[i];
      ++tail_count;
    }
  }
  if (tail_count > 0)
    for (std::size_t i = 0; i < n; ++i)
      res.rho[i] = std::min(tail_sum[i] / double(tail_count), cfg.rho_max);
  for (double r : res.rho)
    if (r >= cfg.rho_max) ++res.clamped;
  return res;
}

// Exact diagonal quadratic L(w) = sum_i h_i (w_i - c_i)^2; the closed-form
// optimum sigma_i^2 = beta / h_i makes it the estimator's oracle.
struct QuadraticObjective : StochasticObjective {
  std::vector<double> h, c, w0;

  QuadraticObjective(std::vector<double> h_in, std::vector<double> c_in)
      : h(std::move(h_in)), c(std::move(c_in)), w0(h.size(), 0.0) {
    require(h.size() == c.size(), "QuadraticObjective: size mismatch");
    for (double hv : h)
      require(hv > 0, "QuadraticObjective: curvature must be positive");
  }

  std::int64_t dim() const override { return std::int64_t(h.size()); }
  const std::vector<double>& base_point() const override { return w0; }
  double loss_grad(const std::vector<double>& w, std::vector<double>& grad,
                   Rng&) override {
    grad.resize(w.size());
    double loss = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double d = w[i] - c[i];
      loss += h[i] * d * d;
      grad[i] = 2 * h[i] * d;
    }
    return loss;
  }
};

// Cross-entropy of the model on seeded minibatches as a function of the flat
// trainable weight vector. Evaluation-mode forward so the loss is a pure
// function of w; weights are restored by the caller via base_point().
struct ModelObjective : StochasticObjective {
  ModelState& st;
  const Dataset& ds;
  NormStats norm;
  int batch_size;
  std::vector<double> w0;

  ModelObjective(ModelState& state, const Dataset& data,
                 const NormStats& norm_stats, int batch)
      : st(state), ds(data), norm(norm_stats), batch_size(batch),
        w0(flatten_trainable_values(state)) {
    require(batch_size >= 1 && batch_size <= ds.size(),
            "ModelObjective: bad batch size");
  }

  std::int64_t dim() const override { return std::int64_t(w0.size()); }
  const std::vector<double>& base_point() const override { return w0; }

  double loss_grad(const std::vector<double>& w, std::vector<double>& grad,
                   Rng& rng) override {
    scatter_trainable_values(st, w);
    std::vector<int> rows(static_cast<std::size_t>(batch_size));
    for (int& r : rows) r = int(rng.uniform_int(0, ds.size()));
    Batch b = gather_batch(ds, rows.data(), batch_size);
    normalize_batch(*b.x, norm);
    Tape tape;
    TensorPtr logits = forward(st, &tape, b.x, /*training=*/false);
    LossResult out = softmax_cross_entropy(&tape, logits, b.labels);
    zero_grads(st);
    tape.backward(out.loss);
    grad = flatten_trainable_grads(st);
    zero_grads(st);
    scatter_trainable_values(st, w0);
    return out.loss->values[0];
  }
};

// ---------------------------------------------------------------------------
// Per-group gradient statistics over ground-truth-label minibatches: the L2
// norm of the mean batch gradient and of its elementwise standard deviation.

struct GradStats {
  std::map<int, double> mean_norm;
  std::map<int, double> std_norm;
};

inline GradStats grad_stats(ModelState& st, const Dataset& ds,
                            const NormStats& norm, int n_batches,
                            int batch_size, std::uint64_t seed) {
  require(n_batches >= 2, "grad_stats: need at least 2 batches");
  require(batch_size >= 2 && batch_size <= ds.size(),
          "grad_stats: bad batch size");

  // Snapshot running buffers; train-mode forwards would otherwise leak EMA
  // updates out of a probe.
  std::vector<std::vector<double>> buffers;
  for (const ParamInfo& p : st.params)
    if (p.buffer) buffers.push_back(p.tensor->values);

  std::vector<std::vector<double>> grads;
  Rng rng(derive_seed(seed, "grad-stats"));
  for (int bi = 0; bi < n_batches; ++bi) {
    std::vector<int> rows(static_cast<std::size_t>(batch_size));
    for (int& r : rows) r = int(rng.uniform_int(0, ds.size()));
    Batch b = gather_batch(ds, rows.data(), batch_size);
    normalize_batch(*b.x, norm);
    Tape tape;
    TensorPtr logits = forward(st, &tape, b.x, /*training=*/true);
    LossResult out = softmax_cross_entropy(&tape, logits, b.labels);
    zero_grads(st);
    tape.backward(out.loss);
    grads.push_back(flatten_trainable_grads(st));
  }
  zero_grads(st);

  std::size_t bi = 0;
  for (ParamInfo& p : st.params)
    if (p.buffer) p.tensor->values = buffers[bi++];

  // Flat offsets per group, trainable tensors in parameter order.
  GradStats out;
  const auto groups = group_params(st);
  std::vector<std::pair<std::size_t, std::size_t>> spans(st.params.size());
  std::size_t off = 0;
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    const ParamInfo& p = st.params[i];
    if (!p.trainable || p.buffer) continue;
    spans[i] = {off, off + p.tensor->values.size()};
    off += p.tensor->values.size();
  }
  for (const auto& [g, idxs] : groups) {
    double mean_sq = 0, std_sq = 0;
    for (int pi : idxs) {
      const ParamInfo& p = st.params[std::size_t(pi)];
      if (!p.trainable || p.buffer) continue;
      for (std::size_t t = spans[std::size_t(pi)].first;
           t < spans[std::size_t(pi)].second; ++t) {
        double mean = 0;
        for (const auto& gv : grads) mean += gv[t];
        mean /= double(n_batches);
        double var = 0;
        for (const auto& gv : grads) var += (gv[t] - mean) * (gv[t] - mean);
        var /= double(n_batches);
        mean_sq += mean * mean;
        std_sq += var;
      }
    }
    out.mean_norm[g] = std::sqrt(mean_sq);
    out.std_norm[g] = std::sqrt(std_sq);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer-wise normalization of a probe timeline.

enum class LayerNorm { ShareOfTotal, PerLayerPeak };

inline std::vector<std::map<int, double>> normalize_layerwise(
    const FisherTimeline& timeline, LayerNorm mode) {
  require(!timeline.empty(), "normalize_layerwise: empty timeline");
  double grand_total = 0;
  for (const FisherProbe& p : timeline) grand_total += p.total;
  require(grand_total > 0, "normalize_layerwise: all probes are zero");

  std::vector<std::map<int, double>> out;
  if (mode == LayerNorm::ShareOfTotal) {
    for (const FisherProbe& p : timeline) {
      require(p.total > 0,
              msg("normalize_layerwise: probe at epoch ", p.epoch,
                  " has zero total"));
      std::map<int, double> row;
      for (const auto& [g, t] : p.trace_by_group) row[g] = t / p.total;
      out.push_back(std::move(row));
    }
  } else {
    std::map<int, double> peak;
    for (const FisherProbe& p : timeline)
      for (const auto& [g, t] : p.trace_by_group)
        peak[g] = std::max(peak[g], t);
    for (const FisherProbe& p : timeline) {
      std::map<int, double> row;
      for (const auto& [g, t] : p.trace_by_group) {
        require(peak[g] > 0, msg("normalize_layerwise: group ", g,
                                 " is zero across the timeline"));
        row[g] = t / peak[g];
      }
      out.push_back(std::move(row));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report CSV: epoch,layer_id,trace,total,n_x,n_y,seed (one row per group per
// probe, epochs ascending, groups ascending within an epoch).

inline void write_fisher_csv(const std::string& path,
                             const FisherTimeline& timeline) {
  std::ofstream os(path);
  require(bool(os), msg("cannot open '", path, "' for writing"));
  os << "epoch,layer_id,trace,total,n_x,n_y,seed\n";
  os.precision(17);
  for (const FisherProbe& p : timeline)
    for (const auto& [g, t] : p.trace_by_group)
      os << p.epoch << "," << g << "," << t << "," << p.total << "," << p.n_x
         << "," << p.n_y << "," << p.seed << "\n";
  require(bool(os), msg("write to '", path, "' failed"));
}

inline FisherTimeline read_fisher_csv(const std::string& path) {
  std::ifstream is(path);
  require(bool(is), msg("cannot open '", path, "'"));
  std::string line;
  require(bool(std::getline(is, line)),
          msg("'", path, "': empty fisher report"));
  require(line == "epoch,layer_id,trace,total,n_x,n_y,seed",
          msg("'", path, "': unexpected header '", line, "'"));
  FisherTimeline timeline;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    FisherProbe row;
    int layer = 0;
    double trace = 0;
    char comma = 0;
    ss >> row.epoch >> comma >> layer >> comma >> trace >> comma >>
        row.total >> comma >> row.n_x >> comma >> row.n_y >> comma >>
        row.seed;
    require(bool(ss), msg("'", path, "': malformed row at line ", lineno));
    if (timeline.empty() || timeline.back().epoch != row.epoch) {
      timeline.push_back(row);
    }
    timeline.back().trace_by_group[layer] = trace;
    timeline.back().total = row.total;
  }
  return timeline;
}

}  // namespace plab
