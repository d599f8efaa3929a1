#pragma once

// Data-parallel inner loops of the model: tied (convolutional) mat-vec,
// per-cell Poisson and gamma log terms, and the two gather patterns used by
// Markov-blanket sums. Each kernel has a scalar reference implementation and
// an AVX2+FMA variant; the variant is chosen once at startup from CPUID and
// can be overridden with CDEF_SIMD=scalar|avx2 or kernels::select().

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace cdef::kernels {

enum class Backend { scalar, avx2 };

struct KernelTable {
  Backend backend;
  const char* name;

  // out[i] = log(in[i]); inputs must be positive normal doubles.
  void (*log)(const double* in, double* out, std::size_t n);

  // out[r] = max(floor, sum_c upper[c] * filter[r - c*stride]) over the
  // columns c whose window [c*stride, c*stride + filter_size) contains r.
  void (*tied_matvec)(const double* upper, std::size_t cols, const double* filter,
                      std::size_t filter_size, std::size_t stride, double* out,
                      std::size_t rows, double floor);

  // out[i] = visible[i] ? x[i]*log(rate[i]) - rate[i] - log_factorial[i] : 0.
  void (*poisson_terms)(const double* x, const double* log_factorial,
                        const std::uint8_t* visible, const double* rate, double* out,
                        std::size_t n);

  // Gamma conditional log density of z[i] given its linked mean[i]:
  // rate_i = max(shape/mean[i], rate_floor),
  // out[i] = shape*log(rate_i) - lgamma_shape + (shape-1)*log(z[i]) - rate_i*z[i].
  void (*gamma_terms)(const double* z, const double* mean, double shape,
                      double lgamma_shape, double rate_floor, double* out, std::size_t n);

  // out[c] = sum_{j < filter_size} terms[c*stride + j] for c in [0, cols).
  void (*window_sums)(const double* terms, std::size_t cols, std::size_t filter_size,
                      std::size_t stride, double* out);

  // acc[j] += sum_c terms[c*stride + j] for j in [0, filter_size).
  void (*tied_accumulate)(const double* terms, std::size_t cols, std::size_t filter_size,
                          std::size_t stride, double* acc);

  double (*sum)(const double* in, std::size_t n);
};

const KernelTable& scalar_table() noexcept;
// Only valid when available(Backend::avx2).
const KernelTable& avx2_table() noexcept;

bool available(Backend b) noexcept;
const KernelTable& table(Backend b);

/// The table used by the model code.
const KernelTable& active() noexcept;

/// Force a backend; throws std::invalid_argument if it is not available.
void select(Backend b);

Backend parse_backend(std::string_view name);
std::string_view backend_name(Backend b) noexcept;

}  // namespace cdef::kernels
