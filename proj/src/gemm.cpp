#include "gemm.hpp"

#include <vector>

namespace tinylm::detail {

namespace {

// Four output rows per pass so each row of B is streamed once per block.
void gemm_nn_block(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                   const float* b, float* c) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        float* __restrict c0 = c + (i + 0) * n;
        float* __restrict c1 = c + (i + 1) * n;
        float* __restrict c2 = c + (i + 2) * n;
        float* __restrict c3 = c + (i + 3) * n;
        const float* a0 = a + (i + 0) * lda;
        const float* a1 = a + (i + 1) * lda;
        const float* a2 = a + (i + 2) * lda;
        const float* a3 = a + (i + 3) * lda;
        for (std::size_t p = 0; p < k; ++p) {
            const float* __restrict brow = b + p * n;
            const float x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
            for (std::size_t j = 0; j < n; ++j) {
                const float bv = brow[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        float* __restrict crow = c + i * n;
        const float* arow = a + i * lda;
        for (std::size_t p = 0; p < k; ++p) {
            const float* __restrict brow = b + p * n;
            const float x = arow[p];
            for (std::size_t j = 0; j < n; ++j) crow[j] += x * brow[j];
        }
    }
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    if (m == 0 || n == 0 || k == 0) return;
    gemm_nn_block(m, n, k, a, k, b, c);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    if (m == 0 || n == 0 || k == 0) return;
    // Transpose A into a k-contiguous panel so the nn kernel applies.
    std::vector<float> at(m * k);
    for (std::size_t p = 0; p < k; ++p) {
        const float* arow = a + p * m;
        for (std::size_t i = 0; i < m; ++i) at[i * k + p] = arow[i];
    }
    gemm_nn_block(m, n, k, at.data(), k, b, c);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    if (m == 0 || n == 0 || k == 0) return;
    std::vector<float> bt(k * n);
    for (std::size_t j = 0; j < n; ++j) {
        const float* brow = b + j * k;
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = brow[p];
    }
    gemm_nn_block(m, n, k, a, k, bt.data(), c);
}

}  // namespace tinylm::detail
