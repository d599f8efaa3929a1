#include <algorithm>
#include <cmath>

#include "cdef/kernels.hpp"

namespace cdef::kernels {

namespace {

void log_scalar(const double* in, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::log(in[i]);
}

void tied_matvec_scalar(const double* upper, std::size_t cols, const double* filter,
                        std::size_t filter_size, std::size_t stride, double* out,
                        std::size_t rows, double floor) {
  std::fill(out, out + rows, 0.0);
  for (std::size_t c = 0; c < cols; ++c) {
    const double u = upper[c];
    double* dst = out + c * stride;
    for (std::size_t j = 0; j < filter_size; ++j) dst[j] += u * filter[j];
  }
  for (std::size_t r = 0; r < rows; ++r) out[r] = std::max(out[r], floor);
}

void poisson_terms_scalar(const double* x, const double* log_factorial,
                          const std::uint8_t* visible, const double* rate, double* out,
                          std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = visible[i] ? x[i] * std::log(rate[i]) - rate[i] - log_factorial[i] : 0.0;
  }
}

void gamma_terms_scalar(const double* z, const double* mean, double shape,
                        double lgamma_shape, double rate_floor, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double rate = std::max(shape / mean[i], rate_floor);
    out[i] = shape * std::log(rate) - lgamma_shape + (shape - 1.0) * std::log(z[i]) -
             rate * z[i];
  }
}

void window_sums_scalar(const double* terms, std::size_t cols, std::size_t filter_size,
                        std::size_t stride, double* out) {
  for (std::size_t c = 0; c < cols; ++c) {
    const double* src = terms + c * stride;
    double acc = 0.0;
    for (std::size_t j = 0; j < filter_size; ++j) acc += src[j];
    out[c] = acc;
  }
}

void tied_accumulate_scalar(const double* terms, std::size_t cols, std::size_t filter_size,
                            std::size_t stride, double* acc) {
  for (std::size_t c = 0; c < cols; ++c) {
    const double* src = terms + c * stride;
    for (std::size_t j = 0; j < filter_size; ++j) acc[j] += src[j];
  }
}

double sum_scalar(const double* in, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += in[i];
  return acc;
}

constexpr KernelTable kScalar{
    Backend::scalar,        "scalar",           log_scalar,
    tied_matvec_scalar,     poisson_terms_scalar, gamma_terms_scalar,
    window_sums_scalar,     tied_accumulate_scalar, sum_scalar,
};

}  // namespace

const KernelTable& scalar_table() noexcept { return kScalar; }

}  // namespace cdef::kernels
