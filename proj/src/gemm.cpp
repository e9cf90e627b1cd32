#include "gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#include "matchformer/parallel.hpp"

namespace matchformer::detail {

namespace {

constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 8;

// Full kMr x kNr tile against a packed k x kNr panel of B.
inline void micro_kernel(std::size_t k, const double* a, std::size_t lda, const double* bp,
                         double* c, std::size_t ldc, bool accumulate) {
  double acc[kMr][kNr];
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t j = 0; j < kNr; ++j) acc[r][j] = accumulate ? c[r * ldc + j] : 0.0;
  const double* a0 = a;
  const double* a1 = a + lda;
  const double* a2 = a + 2 * lda;
  const double* a3 = a + 3 * lda;
  for (std::size_t p = 0; p < k; ++p) {
    const double* b = bp + p * kNr;
    const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
    for (std::size_t j = 0; j < kNr; ++j) {
      acc[0][j] += x0 * b[j];
      acc[1][j] += x1 * b[j];
      acc[2][j] += x2 * b[j];
      acc[3][j] += x3 * b[j];
    }
  }
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t j = 0; j < kNr; ++j) c[r * ldc + j] = acc[r][j];
}

// Ragged edge, same per-element accumulation order as the micro kernel.
inline void edge_kernel(std::size_t rows, std::size_t cols, std::size_t k, const double* a,
                        std::size_t lda, const double* bp, std::size_t ldb, double* c,
                        std::size_t ldc, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      double s = accumulate ? c[r * ldc + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[r * lda + p] * bp[p * ldb + j];
      c[r * ldc + j] = s;
    }
  }
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }
  const std::size_t panels = (n + kNr - 1) / kNr;
  parallel_for(panels, std::max<std::size_t>(1, 4096 / std::max<std::size_t>(1, m)),
               [&](std::size_t pb, std::size_t pe) {
                 std::vector<double> packed(k * kNr);
                 for (std::size_t panel = pb; panel < pe; ++panel) {
                   const std::size_t j0 = panel * kNr;
                   const std::size_t nc = std::min(kNr, n - j0);
                   if (nc == kNr) {
                     for (std::size_t p = 0; p < k; ++p)
                       std::memcpy(&packed[p * kNr], b + p * n + j0, kNr * sizeof(double));
                     std::size_t i = 0;
                     for (; i + kMr <= m; i += kMr)
                       micro_kernel(k, a + i * k, k, packed.data(), c + i * n + j0, n, accumulate);
                     if (i < m)
                       edge_kernel(m - i, kNr, k, a + i * k, k, packed.data(), kNr, c + i * n + j0, n,
                                   accumulate);
                   } else {
                     edge_kernel(m, nc, k, a, k, b + j0, n, c + j0, n, accumulate);
                   }
                 }
               });
}

void transpose_copy(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock)
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t ie = std::min(rows, i0 + kBlock);
      const std::size_t je = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < ie; ++i)
        for (std::size_t j = j0; j < je; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

}  // namespace matchformer::detail
