// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace adafm::detail {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
// Backed by single-threaded OpenBLAS; bit-deterministic for a fixed build.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);

}  // namespace adafm::detail
