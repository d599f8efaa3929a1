#include "cdef/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace cdef::kernels {

namespace {

bool cpu_has_avx2() noexcept {
#if defined(CDEF_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* initial_table() {
  if (const char* env = std::getenv("CDEF_SIMD")) {
    const Backend b = parse_backend(env);
    if (!available(b)) throw std::invalid_argument(std::string("CDEF_SIMD backend unavailable: ") + env);
    return &table(b);
  }
  return available(Backend::avx2) ? &table(Backend::avx2) : &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> ptr{initial_table()};
  return ptr;
}

}  // namespace

#ifndef CDEF_HAVE_AVX2
const KernelTable& avx2_table() noexcept { return scalar_table(); }
#endif

bool available(Backend b) noexcept {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2: {
      static const bool has = cpu_has_avx2();
      return has;
    }
  }
  return false;
}

const KernelTable& table(Backend b) {
  if (!available(b)) throw std::invalid_argument("SIMD backend not available on this CPU");
  return b == Backend::avx2 ? avx2_table() : scalar_table();
}

const KernelTable& active() noexcept { return *current().load(std::memory_order_acquire); }

void select(Backend b) { current().store(&table(b), std::memory_order_release); }

Backend parse_backend(std::string_view name) {
  if (name == "scalar") return Backend::scalar;
  if (name == "avx2") return Backend::avx2;
  if (name == "auto") return available(Backend::avx2) ? Backend::avx2 : Backend::scalar;
  throw std::invalid_argument("unknown SIMD backend '" + std::string(name) + "'");
}

std::string_view backend_name(Backend b) noexcept {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

}  // namespace cdef::kernels
