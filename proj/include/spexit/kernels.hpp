#pragma once

#include <cstddef>

// Dense float32 kernels with a fixed accumulation order. vec_mat and
// mat_mat_tn_acc keep one accumulator per output element and add terms in
// ascending reduction index; dot keeps eight lane accumulators (lane = index
// mod 8) combined pairwise. Batched variants run the per-row code of the
// single-row variant, so their results are bitwise equal. The build disables
// floating-point contraction (-ffp-contract=off).
namespace spexit::kernels {

/// y[0..n) = x[0..m) * w, with w row-major m x n.
void vec_mat(const float* x, const float* w, std::size_t m, std::size_t n, float* y);

/// Row-wise vec_mat over `rows` rows of x (rows x m) into y (rows x n).
void mat_mat(const float* x, std::size_t rows, const float* w, std::size_t m, std::size_t n,
             float* y);

/// dx (rows x m) = dy (rows x n) * w^T, with w row-major m x n.
void mat_mat_nt(const float* dy, std::size_t rows, const float* w, std::size_t m, std::size_t n,
                float* dx);

/// dw (m x n) += x^T (rows x m) * dy (rows x n).
void mat_mat_tn_acc(const float* x, std::size_t rows, const float* dy, std::size_t m,
                    std::size_t n, float* dw);

float dot(const float* a, const float* b, std::size_t n);

/// y = gain * x / rms(x); returns 1/rms(x).
float rms_norm(const float* x, const float* gain, std::size_t n, float eps, float* y);


}  // namespace spexit::kernels
