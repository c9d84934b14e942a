#pragma once

// Reverse-mode autodiff over a flat tape of backward closures. Every op does
// its forward work eagerly, then (when a tape is supplied) records a closure
// that scatters gradients back into its inputs with +=. Parameter gradients
// accumulate across backward calls until zeroed; intermediate gradients are
// zeroed by the tape at the start of each backward pass.

#include <algorithm>
#include <cstring>
#include <functional>
#include <vector>

#include "plab/gemm.hpp"
#include "plab/tensor.hpp"

namespace plab {

class Tape {
 public:
  const TensorPtr& track(const TensorPtr& t) {
    intermediates_.push_back(t);
    return t;
  }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  bool empty() const { return nodes_.empty(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Intermediate
  // gradients are reset first so repeated calls double parameter gradients
  // exactly instead of compounding stale activation gradients.
  void backward(const TensorPtr& loss) {
    require(!nodes_.empty(), "backward called with no recorded forward ops");
    require(loss->size() == 1,
            msg("backward expects a scalar loss, got ", shape_str(loss->shape)));
    for (auto& t : intermediates_) {
      t->ensure_grad();
      t->zero_grad();
    }
    loss->ensure_grad();
    std::fill(loss->grad.begin(), loss->grad.end(), 0.0);
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() {
    nodes_.clear();
    intermediates_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<TensorPtr> intermediates_;
};

namespace detail {

inline void im2col(const double* x, int C, int H, int W, int kh, int kw,
                   int stride, int pad, int Ho, int Wo, double* col) {
  for (int c = 0; c < C; ++c) {
    for (int di = 0; di < kh; ++di) {
      for (int dj = 0; dj < kw; ++dj) {
        double* dst =
            col + std::size_t((c * kh + di) * kw + dj) * std::size_t(Ho * Wo);
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi * stride + di - pad;
          double* drow = dst + std::size_t(oi) * Wo;
          if (ii < 0 || ii >= H) {
            std::fill(drow, drow + Wo, 0.0);
            continue;
          }
          const double* srow = x + std::size_t(c * H + ii) * W;
          for (int oj = 0; oj < Wo; ++oj) {
            const int jj = oj * stride + dj - pad;
            drow[oj] = (jj >= 0 && jj < W) ? srow[jj] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw,
                       int stride, int pad, int Ho, int Wo, double* x) {
  for (int c = 0; c < C; ++c) {
    for (int di = 0; di < kh; ++di) {
      for (int dj = 0; dj < kw; ++dj) {
        const double* src =
            col + std::size_t((c * kh + di) * kw + dj) * std::size_t(Ho * Wo);
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi * stride + di - pad;
          if (ii < 0 || ii >= H) continue;
          double* xrow = x + std::size_t(c * H + ii) * W;
          const double* srow = src + std::size_t(oi) * Wo;
          for (int oj = 0; oj < Wo; ++oj) {
            const int jj = oj * stride + dj - pad;
            if (jj >= 0 && jj < W) xrow[jj] += srow[oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

// in [N,C,H,W], w [K,C,kh,kw], optional b [K]. Zero padding, floor output
// sizing: Ho = (H + 2*pad - kh)/stride + 1.
inline TensorPtr conv2d(Tape* tape, const TensorPtr& in, const TensorPtr& w,
                        const TensorPtr& b, int stride, int pad) {
  require(in && w, "conv2d: null input or weight");
  require(in->ndim() == 4, msg("conv2d: input must be 4-d, got ",
                               shape_str(in->shape)));
  require(w->ndim() == 4, msg("conv2d: weight must be 4-d, got ",
                              shape_str(w->shape)));
  const int N = in->dim(0), C = in->dim(1), H = in->dim(2), W = in->dim(3);
  const int K = w->dim(0), kh = w->dim(2), kw = w->dim(3);
  require(w->dim(1) == C, msg("conv2d: weight expects ", w->dim(1),
                              " input channels, input has ", C));
  require((kh == 1 || kh == 3) && (kw == 1 || kw == 3),
          msg("conv2d: kernel must be 1 or 3, got ", kh, "x", kw));
  require(stride == 1 || stride == 2,
          msg("conv2d: stride must be 1 or 2, got ", stride));
  require(pad >= 0, "conv2d: negative padding");
  if (b) require(b->ndim() == 1 && b->dim(0) == K,
                 msg("conv2d: bias shape ", shape_str(b->shape),
                     " does not match ", K, " output channels"));
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  require(Ho >= 1 && Wo >= 1,
          msg("conv2d: output would be empty for input ", shape_str(in->shape),
              " kernel ", kh, "x", kw, " stride ", stride, " pad ", pad));

  auto out = make_tensor({N, K, Ho, Wo});
  const int ckk = C * kh * kw;
  const int hw = Ho * Wo;
  std::vector<double> col(std::size_t(ckk) * hw);
  for (int n = 0; n < N; ++n) {
    detail::im2col(in->data() + std::size_t(n) * C * H * W, C, H, W, kh, kw,
                   stride, pad, Ho, Wo, col.data());
    double* o = out->data() + std::size_t(n) * K * hw;
    gemm(Trans::N, Trans::N, K, hw, ckk, 1.0, w->data(), col.data(), 0.0, o);
    if (b) {
      for (int k = 0; k < K; ++k) {
        const double bk = b->values[std::size_t(k)];
        double* row = o + std::size_t(k) * hw;
        for (int t = 0; t < hw; ++t) row[t] += bk;
      }
    }
  }

  if (tape) {
    tape->track(out);
    tape->record([=]() {
      in->ensure_grad();
      w->ensure_grad();
      if (b) b->ensure_grad();
      std::vector<double> colb(std::size_t(ckk) * hw);
      std::vector<double> dcol(std::size_t(ckk) * hw);
      for (int n = 0; n < N; ++n) {
        const double* go = out->grad.data() + std::size_t(n) * K * hw;
        detail::im2col(in->data() + std::size_t(n) * C * H * W, C, H, W, kh,
                       kw, stride, pad, Ho, Wo, colb.data());
        gemm(Trans::N, Trans::T, K, ckk, hw, 1.0, go, colb.data(), 1.0,
             w->grad.data());
        gemm(Trans::T, Trans::N, ckk, hw, K, 1.0, w->data(), go, 0.0,
             dcol.data());
        detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                           in->grad.data() + std::size_t(n) * C * H * W);
        if (b) {
          for (int k = 0; k < K; ++k) {
            double s = 0;
            const double* row = go + std::size_t(k) * hw;
            for (int t = 0; t < hw; ++t) s += row[t];
            b->grad[std::size_t(k)] += s;
          }
        }
      }
    });
  }
  return out;
}

// in [N,D], w [M,D], optional b [M] -> out [N,M]
inline TensorPtr linear(Tape* tape, const TensorPtr& in, const TensorPtr& w,
                        const TensorPtr& b) {
  require(in && w, "linear: null input or weight");
  require(in->ndim() == 2, msg("linear: input must be 2-d, got ",
                               shape_str(in->shape)));
  require(w->ndim() == 2, msg("linear: weight must be 2-d, got ",
                              shape_str(w->shape)));
  const int N = in->dim(0), D = in->dim(1), M = w->dim(0);
  require(w->dim(1) == D, msg("linear: weight expects ", w->dim(1),
                              " features, input has ", D));
  if (b) require(b->ndim() == 1 && b->dim(0) == M,
                 msg("linear: bias shape ", shape_str(b->shape),
                     " does not match ", M, " outputs"));

  auto out = make_tensor({N, M});
  gemm(Trans::N, Trans::T, N, M, D, 1.0, in->data(), w->data(), 0.0,
       out->data());
  if (b) {
    for (int n = 0; n < N; ++n) {
      double* row = out->data() + std::size_t(n) * M;
      for (int m = 0; m < M; ++m) row[m] += b->values[std::size_t(m)];
    }
  }

  if (tape) {
    tape->track(out);
    tape->record([=]() {
      in->ensure_grad();
      w->ensure_grad();
      if (b) b->ensure_grad();
      gemm(Trans::N, Trans::N, N, D, M, 1.0, out->grad.data(), w->data(), 1.0,
           in->grad.data());
      gemm(Trans::T, Trans::N, M, D, N, 1.0, out->grad.data(), in->data(), 1.0,
           w->grad.data());
      if (b) {
        for (int n = 0; n < N; ++n) {
          const double* row = out->grad.data() + std::size_t(n) * M;
          for (int m = 0; m < M; ++m) b->grad[std::size_t(m)] += row[m];
        }
      }
    });
  }
  return out;
}

inline TensorPtr relu(Tape* tape, const TensorPtr& in) {
  auto out = make_tensor(in->shape);
  const std::int64_t n = in->size();
  for (std::int64_t i = 0; i < n; ++i)
    out->values[std::size_t(i)] = std::max(0.0, in->values[std::size_t(i)]);
  if (tape) {
    tape->track(out);
    tape->record([=]() {
      in->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        if (in->values[std::size_t(i)] > 0.0)
          in->grad[std::size_t(i)] += out->grad[std::size_t(i)];
    });
  }
  return out;
}

// Per-channel batch normalization over [N,C,H,W] (reduce N,H,W) or [N,C]
// (reduce N). Biased variance is used both for normalization and for the
// running-variance EMA; running buffers are updated in place in training mode
// and never differentiated through.
inline TensorPtr batchnorm(Tape* tape, const TensorPtr& in,
                           const TensorPtr& gamma, const TensorPtr& beta,
                           const TensorPtr& running_mean,
                           const TensorPtr& running_var, bool training,
                           double momentum = 0.1, double eps = 1e-5) {
  require(in->ndim() == 2 || in->ndim() == 4,
          msg("batchnorm: input must be 2-d or 4-d, got ",
              shape_str(in->shape)));
  const int N = in->dim(0);
  const int C = in->dim(1);
  const int HW = in->ndim() == 4 ? in->dim(2) * in->dim(3) : 1;
  for (const TensorPtr& t : {gamma, beta, running_mean, running_var})
    require(t->ndim() == 1 && t->dim(0) == C,
            msg("batchnorm: per-channel tensor shape ", shape_str(t->shape),
                " does not match ", C, " channels"));
  const std::int64_t nred = std::int64_t(N) * HW;
  require(!training || nred >= 2,
          msg("batchnorm: training mode needs at least 2 values per channel, "
              "got ", nred));

  std::vector<double> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (int n = 0; n < N; ++n) {
        const double* x = in->data() + (std::size_t(n) * C + c) * HW;
        for (int t = 0; t < HW; ++t) s += x[t];
      }
      const double m = s / double(nred);
      double v = 0;
      for (int n = 0; n < N; ++n) {
        const double* x = in->data() + (std::size_t(n) * C + c) * HW;
        for (int t = 0; t < HW; ++t) {
          const double d = x[t] - m;
          v += d * d;
        }
      }
      mean[std::size_t(c)] = m;
      var[std::size_t(c)] = v / double(nred);
    }
    for (int c = 0; c < C; ++c) {
      running_mean->values[std::size_t(c)] =
          (1.0 - momentum) * running_mean->values[std::size_t(c)] +
          momentum * mean[std::size_t(c)];
      running_var->values[std::size_t(c)] =
          (1.0 - momentum) * running_var->values[std::size_t(c)] +
          momentum * var[std::size_t(c)];
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[std::size_t(c)] = running_mean->values[std::size_t(c)];
      var[std::size_t(c)] = running_var->values[std::size_t(c)];
    }
  }

  auto out = make_tensor(in->shape);
  for (int c = 0; c < C; ++c) {
    const double m = mean[std::size_t(c)];
    const double inv = 1.0 / std::sqrt(var[std::size_t(c)] + eps);
    const double g = gamma->values[std::size_t(c)];
    const double bta = beta->values[std::size_t(c)];
    for (int n = 0; n < N; ++n) {
      const double* x = in->data() + (std::size_t(n) * C + c) * HW;
      double* y = out->data() + (std::size_t(n) * C + c) * HW;
      for (int t = 0; t < HW; ++t) y[t] = g * (x[t] - m) * inv + bta;
    }
  }

  if (tape) {
    tape->track(out);
    tape->record([=]() {
      in->ensure_grad();
      gamma->ensure_grad();
      beta->ensure_grad();
      for (int c = 0; c < C; ++c) {
        const double m = mean[std::size_t(c)];
        const double v = var[std::size_t(c)];
        const double inv = 1.0 / std::sqrt(v + eps);
        const double g = gamma->values[std::size_t(c)];
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int n = 0; n < N; ++n) {
          const double* x = in->data() + (std::size_t(n) * C + c) * HW;
          const double* dy = out->grad.data() + (std::size_t(n) * C + c) * HW;
          for (int t = 0; t < HW; ++t) {
            sum_dy += dy[t];
            sum_dy_xhat += dy[t] * (x[t] - m) * inv;
          }
        }
        gamma->grad[std::size_t(c)] += sum_dy_xhat;
        beta->grad[std::size_t(c)] += sum_dy;
        if (training) {
          const double nr = double(nred);
          for (int n = 0; n < N; ++n) {
            const double* x = in->data() + (std::size_t(n) * C + c) * HW;
            const double* dy =
                out->grad.data() + (std::size_t(n) * C + c) * HW;
            double* dx = in->grad.data() + (std::size_t(n) * C + c) * HW;
            for (int t = 0; t < HW; ++t) {
              const double xhat = (x[t] - m) * inv;
              dx[t] += g * inv / nr *
                       (nr * dy[t] - sum_dy - xhat * sum_dy_xhat);
            }
          }
        } else {
          for (int n = 0; n < N; ++n) {
            const double* dy =
                out->grad.data() + (std::size_t(n) * C + c) * HW;
            double* dx = in->grad.data() + (std::size_t(n) * C + c) * HW;
            for (int t = 0; t < HW; ++t) dx[t] += dy[t] * g * inv;
          }
        }
      }
    });
  }
  return out;
}

// [N,C,H,W] -> [N,C]
inline TensorPtr global_avg_pool(Tape* tape, const TensorPtr& in) {
  require(in->ndim() == 4, msg("global_avg_pool: input must be 4-d, got ",
                               shape_str(in->shape)));
  const int N = in->dim(0), C = in->dim(1), HW = in->dim(2) * in->dim(3);
  auto out = make_tensor({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* x = in->data() + (std::size_t(n) * C + c) * HW;
      double s = 0;
      for (int t = 0; t < HW; ++t) s += x[t];
      out->values[std::size_t(n) * C + c] = s / double(HW);
    }
  if (tape) {
    tape->track(out);
    tape->record([=]() {
      in->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double d =
              out->grad[std::size_t(n) * C + c] / double(HW);
          double* dx = in->grad.data() + (std::size_t(n) * C + c) * HW;
          for (int t = 0; t < HW; ++t) dx[t] += d;
        }
    });
  }
  return out;
}

// [N,...] -> [N,D]; row-major layout is preserved so this is a copy.
inline TensorPtr flatten(Tape* tape, const TensorPtr& in) {
  require(in->ndim() >= 2, "flatten: input must have a batch dimension");
  const int N = in->dim(0);
  const int D = int(in->size() / N);
  auto out = make_tensor({N, D});
  out->values = in->values;
  if (tape) {
    tape->track(out);
    tape->record([=]() {
      in->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i)
        in->grad[i] += out->grad[i];
    });
  }
  return out;
}

inline TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
  require(a->shape == b->shape, msg("add: shape mismatch ",
                                    shape_str(a->shape), " vs ",
                                    shape_str(b->shape)));
  auto out = make_tensor(a->shape);
  for (std::size_t i = 0; i < out->values.size(); ++i)
    out->values[i] = a->values[i] + b->values[i];
  if (tape) {
    tape->track(out);
    tape->record([=]() {
      a->ensure_grad();
      b->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) {
        a->grad[i] += out->grad[i];
        b->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

namespace detail {
// Row-wise softmax with max subtraction; returns log-normalizers.
inline void softmax_rows(const double* logits, int N, int C, double* post,
                         double* logz) {
  for (int n = 0; n < N; ++n) {
    const double* row = logits + std::size_t(n) * C;
    double mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double s = 0;
    for (int c = 0; c < C; ++c) s += std::exp(row[c] - mx);
    const double lz = mx + std::log(s);
    double* p = post + std::size_t(n) * C;
    for (int c = 0; c < C; ++c) p[c] = std::exp(row[c] - lz);
    if (logz) logz[n] = lz;
  }
}
}  // namespace detail

struct LossResult {
  TensorPtr loss;       // scalar
  TensorPtr posterior;  // [N,C], detached
};

// Mean cross-entropy over the batch. The posterior is exposed for probes and
// evaluation; gradients flow only through the loss.
inline LossResult softmax_cross_entropy(Tape* tape, const TensorPtr& logits,
                                        const std::vector<int>& labels) {
  require(logits->ndim() == 2, msg("softmax_cross_entropy: logits must be "
                                   "2-d, got ", shape_str(logits->shape)));
  const int N = logits->dim(0), C = logits->dim(1);
  require(int(labels.size()) == N,
          msg("softmax_cross_entropy: ", labels.size(), " labels for batch ",
              N));
  for (int n = 0; n < N; ++n)
    require(labels[std::size_t(n)] >= 0 && labels[std::size_t(n)] < C,
            msg("softmax_cross_entropy: label ", labels[std::size_t(n)],
                " out of range [0,", C, ")"));

  auto posterior = make_tensor({N, C});
  std::vector<double> logz(static_cast<std::size_t>(N));
  detail::softmax_rows(logits->data(), N, C, posterior->data(), logz.data());
  auto loss = make_tensor({1});
  double total = 0;
  for (int n = 0; n < N; ++n)
    total += logz[std::size_t(n)] -
             logits->values[std::size_t(n) * C + labels[std::size_t(n)]];
  loss->values[0] = total / double(N);

  if (tape) {
    tape->track(loss);
    tape->record([=]() {
      logits->ensure_grad();
      const double d = loss->grad[0] / double(N);
      for (int n = 0; n < N; ++n) {
        const double* p = posterior->data() + std::size_t(n) * C;
        double* g = logits->grad.data() + std::size_t(n) * C;
        for (int c = 0; c < C; ++c) g[c] += d * p[c];
        g[labels[std::size_t(n)]] -= d;
      }
    });
  }
  return {loss, posterior};
}

// Sum over the batch of log p(y_n | x_n); the per-sample building block for
// Fisher probes (probes run it with N = 1).
inline TensorPtr log_prob(Tape* tape, const TensorPtr& logits,
                          const std::vector<int>& labels) {
  require(logits->ndim() == 2, msg("log_prob: logits must be 2-d, got ",
                                   shape_str(logits->shape)));
  const int N = logits->dim(0), C = logits->dim(1);
  require(int(labels.size()) == N,
          msg("log_prob: ", labels.size(), " labels for batch ", N));
  for (int n = 0; n < N; ++n)
    require(labels[std::size_t(n)] >= 0 && labels[std::size_t(n)] < C,
            msg("log_prob: label ", labels[std::size_t(n)], " out of range [0,",
                C, ")"));

  auto posterior = make_tensor({N, C});
  std::vector<double> logz(static_cast<std::size_t>(N));
  detail::softmax_rows(logits->data(), N, C, posterior->data(), logz.data());
  auto out = make_tensor({1});
  double total = 0;
  for (int n = 0; n < N; ++n)
    total += logits->values[std::size_t(n) * C + labels[std::size_t(n)]] -
             logz[std::size_t(n)];
  out->values[0] = total;

  if (tape) {
    tape->track(out);
    tape->record([=]() {
      logits->ensure_grad();
      const double d = out->grad[0];
      for (int n = 0; n < N; ++n) {
        const double* p = posterior->data() + std::size_t(n) * C;
        double* g = logits->grad.data() + std::size_t(n) * C;
        for (int c = 0; c < C; ++c) g[c] -= d * p[c];
        g[labels[std::size_t(n)]] += d;
      }
    });
  }
  return out;
}

// Row-wise softmax as a plain value transform (no tape participation).
inline TensorPtr softmax(const TensorPtr& logits) {
  require(logits->ndim() == 2, "softmax: logits must be 2-d");
  auto out = make_tensor(logits->shape);
  detail::softmax_rows(logits->data(), logits->dim(0), logits->dim(1),
                       out->data(), nullptr);
  return out;
}

}  // namespace plab
