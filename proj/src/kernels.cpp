#include "spexit/kernels.hpp"

#include <cmath>

namespace spexit::kernels {

void vec_mat(const float* __restrict x, const float* __restrict w, std::size_t m, std::size_t n,
             float* __restrict y) {
  for (std::size_t j = 0; j < n; ++j) y[j] = 0.0f;
  for (std::size_t i = 0; i < m; ++i) {
    const float xi = x[i];
    const float* __restrict row = w + i * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += xi * row[j];
  }
}

void mat_mat(const float* x, std::size_t rows, const float* w, std::size_t m, std::size_t n,
             float* y) {
  for (std::size_t r = 0; r < rows; ++r) vec_mat(x + r * m, w, m, n, y + r * n);
}

void mat_mat_nt(const float* __restrict dy, std::size_t rows, const float* __restrict w,
                std::size_t m, std::size_t n, float* __restrict dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* g = dy + r * n;
    float* out = dx + r * m;
    for (std::size_t i = 0; i < m; ++i) out[i] = dot(g, w + i * n, n);
  }
}

void mat_mat_tn_acc(const float* __restrict x, std::size_t rows, const float* __restrict dy,
                    std::size_t m, std::size_t n, float* __restrict dw) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * m;
    const float* __restrict g = dy + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const float xi = xr[i];
      if (xi == 0.0f) continue;
      float* __restrict row = dw + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += xi * g[j];
    }
  }
}

float dot(const float* a, const float* b, std::size_t n) {
  // Eight interleaved partial sums, combined pairwise at the end.
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  for (std::size_t k = 0; i < n; ++i, ++k) acc[k] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

float rms_norm(const float* x, const float* gain, std::size_t n, float eps, float* y) {
  float ss = 0.0f;
  for (std::size_t i = 0; i < n; ++i) ss += x[i] * x[i];
  const float inv = 1.0f / std::sqrt(ss / static_cast<float>(n) + eps);
  for (std::size_t i = 0; i < n; ++i) y[i] = gain[i] * (x[i] * inv);
  return inv;
}

}  // namespace spexit::kernels
