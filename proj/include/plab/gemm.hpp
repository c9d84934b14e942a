#pragma once

// Row-major double GEMM, the only compute kernel in the library. Blocked just
// enough that conv/linear layers run at a useful fraction of peak on one core;
// no threading here by design (parallelism lives at the experiment level).

#include "plab/tensor.hpp"

namespace plab {

enum class Trans { N, T };

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(int M, int N, int K, const double* A, const double* B,
                    double* C) {
  int i = 0;
  for (; i + 4 <= M; i += 4) {
    const double* __restrict a0 = A + std::size_t(i) * K;
    const double* __restrict a1 = a0 + K;
    const double* __restrict a2 = a1 + K;
    const double* __restrict a3 = a2 + K;
    double* __restrict c0 = C + std::size_t(i) * N;
    double* __restrict c1 = c0 + N;
    double* __restrict c2 = c1 + N;
    double* __restrict c3 = c2 + N;
    for (int k = 0; k < K; ++k) {
      const double* __restrict b = B + std::size_t(k) * N;
      const double v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
      for (int j = 0; j < N; ++j) {
        const double bj = b[j];
        c0[j] += v0 * bj;
        c1[j] += v1 * bj;
        c2[j] += v2 * bj;
        c3[j] += v3 * bj;
      }
    }
  }
  for (; i < M; ++i) {
    double* __restrict c = C + std::size_t(i) * N;
    const double* __restrict a = A + std::size_t(i) * K;
    for (int k = 0; k < K; ++k) {
      const double v = a[k];
      const double* __restrict b = B + std::size_t(k) * N;
      for (int j = 0; j < N; ++j) c[j] += v * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T  (rows of A dot rows of B)
inline void gemm_nt(int M, int N, int K, const double* A, const double* B,
                    double* C) {
  int i = 0;
  for (; i + 4 <= M; i += 4) {
    const double* __restrict a0 = A + std::size_t(i) * K;
    const double* __restrict a1 = a0 + K;
    const double* __restrict a2 = a1 + K;
    const double* __restrict a3 = a2 + K;
    double* c = C + std::size_t(i) * N;
    for (int j = 0; j < N; ++j) {
      const double* __restrict b = B + std::size_t(j) * K;
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (int k = 0; k < K; ++k) {
        const double bk = b[k];
        s0 += a0[k] * bk;
        s1 += a1[k] * bk;
        s2 += a2[k] * bk;
        s3 += a3[k] * bk;
      }
      c[j] += s0;
      c[j + N] += s1;
      c[j + 2 * N] += s2;
      c[j + 3 * N] += s3;
    }
  }
  for (; i < M; ++i) {
    const double* __restrict a = A + std::size_t(i) * K;
    double* c = C + std::size_t(i) * N;
    for (int j = 0; j < N; ++j) {
      const double* __restrict b = B + std::size_t(j) * K;
      double s = 0;
      for (int k = 0; k < K; ++k) s += a[k] * b[k];
      c[j] += s;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]  (rank-1 updates, k blocked by 4)
inline void gemm_tn(int M, int N, int K, const double* A, const double* B,
                    double* C) {
  int k = 0;
  for (; k + 4 <= K; k += 4) {
    const double* __restrict ar0 = A + std::size_t(k) * M;
    const double* __restrict ar1 = ar0 + M;
    const double* __restrict ar2 = ar1 + M;
    const double* __restrict ar3 = ar2 + M;
    const double* __restrict b0 = B + std::size_t(k) * N;
    const double* __restrict b1 = b0 + N;
    const double* __restrict b2 = b1 + N;
    const double* __restrict b3 = b2 + N;
    for (int i = 0; i < M; ++i) {
      double* __restrict c = C + std::size_t(i) * N;
      const double v0 = ar0[i], v1 = ar1[i], v2 = ar2[i], v3 = ar3[i];
      for (int j = 0; j < N; ++j)
        c[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
    }
  }
  for (; k < K; ++k) {
    const double* __restrict ar = A + std::size_t(k) * M;
    const double* __restrict b = B + std::size_t(k) * N;
    for (int i = 0; i < M; ++i) {
      double* __restrict c = C + std::size_t(i) * N;
      const double v = ar[i];
      for (int j = 0; j < N; ++j) c[j] += v * b[j];
    }
  }
}

}  // namespace detail

// C = alpha * op(A) * op(B) + beta * C with op(A): M x K and op(B): K x N.
// Leading dimensions are implied by the operand shapes (tight packing).
inline void gemm(Trans ta, Trans tb, int M, int N, int K, double alpha,
                 const double* A, const double* B, double beta, double* C) {
  require(M >= 0 && N >= 0 && K >= 0, "gemm: negative dimension");
  const std::size_t cn = std::size_t(M) * std::size_t(N);
  if (beta == 0.0) {
    std::fill(C, C + cn, 0.0);
  } else if (beta != 1.0) {
    for (std::size_t t = 0; t < cn; ++t) C[t] *= beta;
  }
  if (M == 0 || N == 0 || K == 0) return;

  std::vector<double> scaled;
  const double* Aeff = A;
  if (alpha != 1.0) {
    const std::size_t an = std::size_t(M) * std::size_t(K);
    scaled.resize(an);
    for (std::size_t t = 0; t < an; ++t) scaled[t] = alpha * A[t];
    Aeff = scaled.data();
  }

  if (ta == Trans::N && tb == Trans::N) {
    detail::gemm_nn(M, N, K, Aeff, B, C);
  } else if (ta == Trans::N && tb == Trans::T) {
    detail::gemm_nt(M, N, K, Aeff, B, C);
  } else if (ta == Trans::T && tb == Trans::N) {
    detail::gemm_tn(M, N, K, Aeff, B, C);
  } else {
    // T,T is never hit by the layer lowerings; keep a plain reference loop.
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) {
        double s = 0;
        for (int kk = 0; kk < K; ++kk)
          s += Aeff[std::size_t(kk) * M + i] * B[std::size_t(j) * K + kk];
        C[std::size_t(i) * N + j] += s;
      }
  }
}

}  // namespace plab
