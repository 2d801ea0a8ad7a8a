#pragma once

// Dense matrix-product kernels shared by the tensor ops. All operands are
// row-major contiguous. Every call reports the exact multiply-accumulate
// count it executes to the MacCounter, which is what the analytic cost model
// is reconciled against.

#include <Eigen/Core>

#include "tst/common.hpp"

namespace tst::detail {

template <typename T>
using EMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// C[M,N] = (or +=) A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool accumulate = false) {
  ECMap<T> A(a, m, k);
  ECMap<T> B(b, k, n);
  EMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
  MacCounter::add(uint64_t(m) * uint64_t(n) * uint64_t(k));
}

// C[M,N] = (or +=) A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool accumulate = false) {
  ECMap<T> A(a, m, k);
  ECMap<T> B(b, n, k);
  EMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
  MacCounter::add(uint64_t(m) * uint64_t(n) * uint64_t(k));
}

// C[M,N] = (or +=) A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
             bool accumulate = false) {
  ECMap<T> A(a, k, m);
  ECMap<T> B(b, k, n);
  EMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
  MacCounter::add(uint64_t(m) * uint64_t(n) * uint64_t(k));
}

// Grow-only scratch buffer, one per thread and element type.
template <typename T>
std::vector<T>& scratch(size_t which) {
  static thread_local std::vector<T> bufs[4];
  return bufs[which];
}

}  // namespace tst::detail
