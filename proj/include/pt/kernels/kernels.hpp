#pragma once

// Dense inner-loop kernels used by the differentiation engine.
//
// Every kernel exists as a portable scalar reference and, where the target
// supports it, an AVX2+FMA (x86-64) or NEON (aarch64) variant. The variant is
// chosen once at runtime from CPU feature detection; PT_KERNELS=scalar in the
// environment forces the reference path. Vector variants reassociate sums, so
// they agree with the reference to rounding, not bit-for-bit.

#include <cstddef>
#include <string_view>

namespace pt::kernels {

enum class Backend { kScalar, kAvx2, kNeon };

std::string_view backend_name(Backend b);

/// Backend picked by feature detection (or the PT_KERNELS override).
Backend detected_backend();

/// Backend currently in use.
Backend active_backend();

/// Switch backends; returns false if `b` is not supported on this CPU.
bool set_backend(Backend b);

bool backend_supported(Backend b);

template <typename T>
struct Table {
  T (*dot)(const T* a, const T* b, std::size_t n);
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  void (*scale)(T alpha, T* x, std::size_t n);
  T (*sum)(const T* x, std::size_t n);
};

template <typename T>
const Table<T>& table();

template <typename T>
const Table<T>& table_for(Backend b);

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  return table<T>().dot(a, b, n);
}

/// y += alpha * x
template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  table<T>().axpy(alpha, x, y, n);
}

template <typename T>
inline void scale(T alpha, T* x, std::size_t n) {
  table<T>().scale(alpha, x, n);
}

template <typename T>
inline T sum(const T* x, std::size_t n) {
  return table<T>().sum(x, n);
}

// Row-major GEMM variants, all accumulating into C.
//   gemm_nn: C[m,n] += A[m,k] * B[k,n]
//   gemm_nt: C[m,n] += A[m,k] * B[n,k]^T
//   gemm_tn: C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);

namespace detail {
template <typename T>
const Table<T>& scalar_table();
template <typename T>
const Table<T>* avx2_table();  // nullptr when not compiled in
template <typename T>
const Table<T>* neon_table();
}  // namespace detail

}  // namespace pt::kernels
