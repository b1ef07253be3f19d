#include <atomic>
#include <cstdlib>
#include <cstring>

#include "pt/kernels/kernels.hpp"

namespace pt::kernels {
namespace {

bool cpu_has_avx2() {
#if (defined(__x86_64__) || defined(_M_X64)) && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend detect() {
  if (const char* env = std::getenv("PT_KERNELS"); env != nullptr && std::strcmp(env, "scalar") == 0) {
    return Backend::kScalar;
  }
  if (detail::avx2_table<float>() != nullptr && cpu_has_avx2()) return Backend::kAvx2;
  if (detail::neon_table<float>() != nullptr) return Backend::kNeon;
  return Backend::kScalar;
}

std::atomic<Backend>& current() {
  static std::atomic<Backend> b{detect()};
  return b;
}

}  // namespace

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::kScalar: return "scalar";
    case Backend::kAvx2: return "avx2";
    case Backend::kNeon: return "neon";
  }
  return "unknown";
}

Backend detected_backend() { return detect(); }

Backend active_backend() { return current().load(std::memory_order_relaxed); }

bool backend_supported(Backend b) {
  switch (b) {
    case Backend::kScalar: return true;
    case Backend::kAvx2: return detail::avx2_table<float>() != nullptr && cpu_has_avx2();
    case Backend::kNeon: return detail::neon_table<float>() != nullptr;
  }
  return false;
}

bool set_backend(Backend b) {
  if (!backend_supported(b)) return false;
  current().store(b, std::memory_order_relaxed);
  return true;
}

template <typename T>
const Table<T>& table_for(Backend b) {
  switch (b) {
    case Backend::kAvx2:
      if (auto* t = detail::avx2_table<T>()) return *t;
      break;
    case Backend::kNeon:
      if (auto* t = detail::neon_table<T>()) return *t;
      break;
    case Backend::kScalar: break;
  }
  return detail::scalar_table<T>();
}

template <typename T>
const Table<T>& table() {
  return table_for<T>(active_backend());
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto& t = table<T>();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av != T(0)) t.axpy(av, b + p * n, crow, n);
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto& t = table<T>();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += t.dot(arow, b + j * k, k);
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto& t = table<T>();
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av != T(0)) t.axpy(av, brow, c + i * n, n);
    }
  }
}

template const Table<float>& table<float>();
template const Table<double>& table<double>();
template const Table<float>& table_for<float>(Backend);
template const Table<double>& table_for<double>(Backend);
template void gemm_nn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);

}  // namespace pt::kernels
