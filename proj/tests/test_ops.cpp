#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "testutil.hpp"

using namespace plab;

namespace {

// Reference convolution: plain nested loops, no im2col, written against the
// definition rather than the implementation.
std::vector<double> conv_ref(const Tensor& x, const Tensor& w,
                             const Tensor* b, int stride, int pad) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(std::size_t(N) * K * Ho * Wo, 0.0);
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = b ? b->values[std::size_t(k)] : 0.0;
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int iy = oy * stride - pad + i;
                const int ix = ox * stride - pad + j;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.values[((std::size_t(n) * C + c) * H + iy) * W +
                                ix] *
                       w.values[((std::size_t(k) * C + c) * kh + i) * kw + j];
              }
          out[((std::size_t(n) * K + k) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

std::vector<double> gemm_ref(Trans ta, Trans tb, int M, int N, int K,
                             double alpha, const double* A, const double* B,
                             double beta, const std::vector<double>& C0) {
  std::vector<double> C = C0;
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0;
      for (int k = 0; k < K; ++k) {
        const double a = ta == Trans::N ? A[std::size_t(i) * K + k]
                                        : A[std::size_t(k) * M + i];
        const double b = tb == Trans::N ? B[std::size_t(k) * N + j]
                                        : B[std::size_t(j) * K + k];
        acc += a * b;
      }
      C[std::size_t(i) * N + j] =
          alpha * acc + beta * C0[std::size_t(i) * N + j];
    }
  return C;
}

}  // namespace

TEST_CASE("gemm matches nested-loop reference in all layouts") {
  Rng rng(derive_seed(5, "gemm-test"));
  for (int cs = 0; cs < 8; ++cs) {
    const int M = 1 + int(rng.uniform_int(1, 9));
    const int N = 1 + int(rng.uniform_int(1, 9));
    const int K = 1 + int(rng.uniform_int(1, 9));
    const Trans ta = (cs & 1) ? Trans::T : Trans::N;
    const Trans tb = (cs & 2) ? Trans::T : Trans::N;
    const double alpha = (cs & 4) ? 0.7 : 1.0;
    const double beta = (cs & 4) ? -0.3 : 0.0;
    std::vector<double> A(std::size_t(M) * K), B(std::size_t(K) * N),
        C(std::size_t(M) * N);
    for (double& v : A) v = rng.uniform(-1, 1);
    for (double& v : B) v = rng.uniform(-1, 1);
    for (double& v : C) v = rng.uniform(-1, 1);
    std::vector<double> want =
        gemm_ref(ta, tb, M, N, K, alpha, A.data(), B.data(), beta, C);
    std::vector<double> got = C;
    gemm(ta, tb, M, N, K, alpha, A.data(), B.data(), beta, got.data());
    for (std::size_t i = 0; i < got.size(); ++i)
      REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
  }
}

TEST_CASE("conv2d forward matches nested-loop reference") {
  Rng rng(derive_seed(5, "conv-test"));
  struct Cfg {
    int N, C, H, W, K, k, stride, pad;
  };
  const Cfg cfgs[] = {
      {2, 3, 8, 8, 4, 3, 1, 1}, {1, 2, 7, 5, 3, 3, 2, 1},
      {3, 1, 4, 4, 2, 1, 1, 0}, {2, 4, 6, 6, 5, 1, 2, 0},
      {1, 3, 9, 9, 2, 3, 2, 1}, {2, 2, 5, 7, 3, 3, 1, 1},
  };
  for (const Cfg& c : cfgs) {
    TensorPtr x = make_tensor({c.N, c.C, c.H, c.W});
    TensorPtr w = make_tensor({c.K, c.C, c.k, c.k});
    TensorPtr b = make_tensor({c.K});
    testutil::fill_uniform(*x, rng, -1, 1);
    testutil::fill_uniform(*w, rng, -1, 1);
    testutil::fill_uniform(*b, rng, -0.5, 0.5);
    TensorPtr got = conv2d(nullptr, x, w, b, c.stride, c.pad);
    std::vector<double> want = conv_ref(*x, *w, b.get(), c.stride, c.pad);
    REQUIRE(got->values.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
      REQUIRE(got->values[i] == Catch::Approx(want[i]).margin(1e-12));
  }
}

TEST_CASE("conv2d rejects unsupported geometry") {
  TensorPtr x = make_tensor({1, 2, 6, 6});
  TensorPtr w5 = make_tensor({2, 2, 5, 5});
  REQUIRE_THROWS(conv2d(nullptr, x, w5, nullptr, 1, 2));
  TensorPtr w3 = make_tensor({2, 2, 3, 3});
  REQUIRE_THROWS(conv2d(nullptr, x, w3, nullptr, 3, 1));
  TensorPtr wc = make_tensor({2, 3, 3, 3});
  REQUIRE_THROWS(conv2d(nullptr, x, wc, nullptr, 1, 1));
}

TEST_CASE("softmax cross entropy matches direct computation") {
  Rng rng(derive_seed(5, "ce-test"));
  const int N = 5, C = 7;
  TensorPtr z = make_tensor({N, C});
  testutil::fill_uniform(*z, rng, -3, 3);
  std::vector<int> y = testutil::random_labels(N, C, rng);
  double want = 0;
  for (int n = 0; n < N; ++n) {
    double mx = z->values[std::size_t(n) * C];
    for (int c = 1; c < C; ++c)
      mx = std::max(mx, z->values[std::size_t(n) * C + c]);
    double sum = 0;
    for (int c = 0; c < C; ++c)
      sum += std::exp(z->values[std::size_t(n) * C + c] - mx);
    want -= z->values[std::size_t(n) * C + y[std::size_t(n)]] - mx -
            std::log(sum);
  }
  want /= N;

  Tape tape;
  z->is_param = true;
  LossResult res = softmax_cross_entropy(&tape, z, y);
  REQUIRE(res.loss->values[0] == Catch::Approx(want).epsilon(1e-12));

  z->ensure_grad();
  tape.backward(res.loss);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double p = res.posterior->values[std::size_t(n) * C + c];
      const double g = (p - (y[std::size_t(n)] == c ? 1.0 : 0.0)) / N;
      REQUIRE(z->grad[std::size_t(n) * C + c] ==
              Catch::Approx(g).margin(1e-12));
    }
}

TEST_CASE("log_prob sums per-sample log posterior of given labels") {
  Rng rng(derive_seed(5, "lp-test"));
  const int N = 4, C = 5;
  TensorPtr z = make_tensor({N, C});
  testutil::fill_uniform(*z, rng, -2, 2);
  std::vector<int> y = testutil::random_labels(N, C, rng);
  double want = 0;
  for (int n = 0; n < N; ++n) {
    double mx = z->values[std::size_t(n) * C];
    for (int c = 1; c < C; ++c)
      mx = std::max(mx, z->values[std::size_t(n) * C + c]);
    double sum = 0;
    for (int c = 0; c < C; ++c)
      sum += std::exp(z->values[std::size_t(n) * C + c] - mx);
    want += z->values[std::size_t(n) * C + y[std::size_t(n)]] - mx -
            std::log(sum);
  }
  TensorPtr lp = log_prob(nullptr, z, y);
  REQUIRE(lp->values[0] == Catch::Approx(want).epsilon(1e-12));
}

TEST_CASE("batch norm training statistics and EMA update") {
  const int N = 4, C = 2, H = 2, W = 2;
  TensorPtr x = make_tensor({N, C, H, W});
  Rng rng(derive_seed(5, "bn-test"));
  testutil::fill_uniform(*x, rng, -2, 2);
  TensorPtr g = make_tensor({C});
  TensorPtr b = make_tensor({C});
  g->values = {1.3, 0.7};
  b->values = {0.1, -0.2};
  TensorPtr rm = make_tensor({C});
  TensorPtr rv = make_tensor({C});
  rv->values = {1.0, 1.0};

  // direct per-channel statistics
  std::vector<double> mean(C, 0.0), var(C, 0.0);
  const int nred = N * H * W;
  for (int c = 0; c < C; ++c) {
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H * W; ++i)
        mean[std::size_t(c)] +=
            x->values[(std::size_t(n) * C + c) * H * W + i];
    mean[std::size_t(c)] /= nred;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H * W; ++i) {
        const double d = x->values[(std::size_t(n) * C + c) * H * W + i] -
                         mean[std::size_t(c)];
        var[std::size_t(c)] += d * d;
      }
    var[std::size_t(c)] /= nred;  // biased, matches normalization and EMA
  }

  TensorPtr out = batchnorm(nullptr, x, g, b, rm, rv, true);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H * W; ++i) {
        const double xn =
            (x->values[(std::size_t(n) * C + c) * H * W + i] -
             mean[std::size_t(c)]) /
            std::sqrt(var[std::size_t(c)] + 1e-5);
        const double want = g->values[std::size_t(c)] * xn +
                            b->values[std::size_t(c)];
        REQUIRE(out->values[(std::size_t(n) * C + c) * H * W + i] ==
                Catch::Approx(want).margin(1e-12));
      }
  for (int c = 0; c < C; ++c) {
    REQUIRE(rm->values[std::size_t(c)] ==
            Catch::Approx(0.1 * mean[std::size_t(c)]).margin(1e-12));
    REQUIRE(rv->values[std::size_t(c)] ==
            Catch::Approx(0.9 * 1.0 + 0.1 * var[std::size_t(c)])
                .margin(1e-12));
  }

  // eval mode uses the running buffers, does not update them
  const std::vector<double> rm_keep = rm->values, rv_keep = rv->values;
  TensorPtr oe = batchnorm(nullptr, x, g, b, rm, rv, false);
  REQUIRE(rm->values == rm_keep);
  REQUIRE(rv->values == rv_keep);
  const double xn0 = (x->values[0] - rm_keep[0]) / std::sqrt(rv_keep[0] + 1e-5);
  REQUIRE(oe->values[0] ==
          Catch::Approx(g->values[0] * xn0 + b->values[0]).margin(1e-12));
}

TEST_CASE("batch norm rejects single-sample training batches") {
  TensorPtr x = make_tensor({1, 2, 1, 1});
  TensorPtr g = make_tensor({2});
  TensorPtr b = make_tensor({2});
  TensorPtr rm = make_tensor({2});
  TensorPtr rv = make_tensor({2});
  REQUIRE_THROWS(batchnorm(nullptr, x, g, b, rm, rv, true));
  TensorPtr x2 = make_tensor({1, 2, 2, 2});  // 4 values per channel is fine
  REQUIRE_NOTHROW(batchnorm(nullptr, x2, g, b, rm, rv, true));
}

TEST_CASE("relu is strict at zero") {
  TensorPtr x = make_tensor({1, 3});
  x->is_param = true;
  x->values = {-1.0, 0.0, 2.0};
  Tape tape;
  TensorPtr out = relu(&tape, x);
  REQUIRE(out->values == std::vector<double>{0.0, 0.0, 2.0});
  TensorPtr w = make_tensor({1, 3});  // sum via linear with ones
  w->values = {1, 1, 1};
  TensorPtr lo = linear(&tape, out, w, nullptr);
  x->ensure_grad();
  tape.backward(lo);
  REQUIRE(x->grad == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("backward accumulates into parameter gradients") {
  TensorPtr x = make_tensor({2, 3});
  TensorPtr w = make_tensor({2, 3});
  w->is_param = true;
  Rng rng(derive_seed(5, "acc-test"));
  testutil::fill_uniform(*x, rng, -1, 1);
  testutil::fill_uniform(*w, rng, -1, 1);
  std::vector<int> y{0, 1};

  Tape tape;
  LossResult res = softmax_cross_entropy(&tape, linear(&tape, x, w, nullptr),
                                         y);
  w->ensure_grad();
  tape.backward(res.loss);
  const std::vector<double> once = w->grad;
  tape.backward(res.loss);
  for (std::size_t i = 0; i < once.size(); ++i)
    REQUIRE(w->grad[i] == Catch::Approx(2 * once[i]).margin(1e-14));
}

TEST_CASE("backward on an empty tape is an error") {
  Tape tape;
  TensorPtr loss = make_tensor({1});
  REQUIRE_THROWS(tape.backward(loss));
}

TEST_CASE("finite-difference battery passes at stated tolerances") {
  const std::vector<testutil::FdCaseResult> cases = testutil::run_fd_battery();
  REQUIRE(cases.size() == 20);
  for (const testutil::FdCaseResult& c : cases) {
    INFO(c.name << ": max rel " << c.report.max_rel << " at "
                << c.report.worst << " (" << c.report.checked
                << " elements)");
    REQUIRE(c.report.checked > 0);
    REQUIRE(c.report.max_rel <= c.tol);
  }
}
