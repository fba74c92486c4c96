#pragma once

#include <cstddef>

// Row-major single-precision kernels. All of them accumulate into C and sum
// over the shared dimension in ascending order, so results do not depend on
// how callers batch their work.
namespace tinylm::detail {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);

}  // namespace tinylm::detail
