// Compiled with -mavx2 -mfma; only reached through the dispatch table after a
// CPUID check.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cdef/kernels.hpp"

namespace cdef::kernels {

namespace {

// Cephes log(x) for double: x = m * 2^e, m in [sqrt(1/2), sqrt(2)), then a
// (5,5) rational approximation of log(1 + f). Max error near 1 ulp for
// positive normal inputs; zero, negative and subnormal inputs are not handled.
inline __m256d log_pd(__m256d x) {
  const __m256i bits = _mm256_castpd_si256(x);
  const __m256i mant_mask = _mm256_set1_epi64x(0x000FFFFFFFFFFFFFLL);
  const __m256i half_bits = _mm256_set1_epi64x(0x3FE0000000000000LL);
  const __m256d two52 = _mm256_set1_pd(4503599627370496.0);

  const __m256i biased = _mm256_srli_epi64(bits, 52);
  __m256d e = _mm256_sub_pd(
      _mm256_castsi256_pd(_mm256_or_si256(biased, _mm256_castpd_si256(two52))), two52);
  e = _mm256_sub_pd(e, _mm256_set1_pd(1022.0));
  __m256d m = _mm256_castsi256_pd(_mm256_or_si256(_mm256_and_si256(bits, mant_mask), half_bits));

  const __m256d one = _mm256_set1_pd(1.0);
  const __m256d below = _mm256_cmp_pd(m, _mm256_set1_pd(0.70710678118654752440), _CMP_LT_OQ);
  e = _mm256_sub_pd(e, _mm256_and_pd(below, one));
  const __m256d f = _mm256_blendv_pd(_mm256_sub_pd(m, one),
                                     _mm256_sub_pd(_mm256_add_pd(m, m), one), below);
  const __m256d z = _mm256_mul_pd(f, f);

  __m256d p = _mm256_set1_pd(1.01875663804580931796E-4);
  p = _mm256_fmadd_pd(p, f, _mm256_set1_pd(4.97494994976747001425E-1));
  p = _mm256_fmadd_pd(p, f, _mm256_set1_pd(4.70579119878881725854E0));
  p = _mm256_fmadd_pd(p, f, _mm256_set1_pd(1.44989225341610930846E1));
  p = _mm256_fmadd_pd(p, f, _mm256_set1_pd(1.79368678507819816313E1));
  p = _mm256_fmadd_pd(p, f, _mm256_set1_pd(7.70838733755885391666E0));

  __m256d q = _mm256_add_pd(f, _mm256_set1_pd(1.12873587189167450590E1));
  q = _mm256_fmadd_pd(q, f, _mm256_set1_pd(4.52279145837532221105E1));
  q = _mm256_fmadd_pd(q, f, _mm256_set1_pd(8.29875266912776603211E1));
  q = _mm256_fmadd_pd(q, f, _mm256_set1_pd(7.11544750618563894466E1));
  q = _mm256_fmadd_pd(q, f, _mm256_set1_pd(2.31251620126765340583E1));

  __m256d y = _mm256_mul_pd(f, _mm256_div_pd(_mm256_mul_pd(z, p), q));
  y = _mm256_fnmadd_pd(e, _mm256_set1_pd(2.121944400546905827679e-4), y);
  y = _mm256_fnmadd_pd(_mm256_set1_pd(0.5), z, y);
  __m256d r = _mm256_add_pd(f, y);
  return _mm256_fmadd_pd(e, _mm256_set1_pd(0.693359375), r);
}

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

// Expand 4 mask bytes to a 4-lane all-ones/all-zeros double mask.
inline __m256d visible_mask(const std::uint8_t* v) {
  std::int32_t word;
  std::memcpy(&word, v, sizeof word);
  const __m256i wide = _mm256_cvtepu8_epi64(_mm_cvtsi32_si128(word));
  const __m256i hidden = _mm256_cmpeq_epi64(wide, _mm256_setzero_si256());
  return _mm256_castsi256_pd(_mm256_xor_si256(hidden, _mm256_set1_epi64x(-1)));
}

void log_avx2(const double* in, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, log_pd(_mm256_loadu_pd(in + i)));
  for (; i < n; ++i) out[i] = std::log(in[i]);
}

void tied_matvec_avx2(const double* upper, std::size_t cols, const double* filter,
                      std::size_t filter_size, std::size_t stride, double* out,
                      std::size_t rows, double floor) {
  std::fill(out, out + rows, 0.0);
  for (std::size_t c = 0; c < cols; ++c) {
    const double u = upper[c];
    const __m256d uv = _mm256_set1_pd(u);
    double* dst = out + c * stride;
    std::size_t j = 0;
    for (; j + 4 <= filter_size; j += 4) {
      _mm256_storeu_pd(dst + j,
                       _mm256_fmadd_pd(uv, _mm256_loadu_pd(filter + j), _mm256_loadu_pd(dst + j)));
    }
    for (; j < filter_size; ++j) dst[j] = std::fma(u, filter[j], dst[j]);
  }
  const __m256d fv = _mm256_set1_pd(floor);
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) _mm256_storeu_pd(out + r, _mm256_max_pd(_mm256_loadu_pd(out + r), fv));
  for (; r < rows; ++r) out[r] = std::max(out[r], floor);
}

void poisson_terms_avx2(const double* x, const double* log_factorial,
                        const std::uint8_t* visible, const double* rate, double* out,
                        std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d r = _mm256_loadu_pd(rate + i);
    const __m256d xv = _mm256_loadu_pd(x + i);
    __m256d t = _mm256_fmsub_pd(xv, log_pd(r), r);
    t = _mm256_sub_pd(t, _mm256_loadu_pd(log_factorial + i));
    _mm256_storeu_pd(out + i, _mm256_and_pd(t, visible_mask(visible + i)));
  }
  for (; i < n; ++i) {
    out[i] = visible[i] ? x[i] * std::log(rate[i]) - rate[i] - log_factorial[i] : 0.0;
  }
}

void gamma_terms_avx2(const double* z, const double* mean, double shape, double lgamma_shape,
                      double rate_floor, double* out, std::size_t n) {
  const __m256d a = _mm256_set1_pd(shape);
  const __m256d am1 = _mm256_set1_pd(shape - 1.0);
  const __m256d lg = _mm256_set1_pd(lgamma_shape);
  const __m256d fl = _mm256_set1_pd(rate_floor);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d zv = _mm256_loadu_pd(z + i);
    const __m256d rate = _mm256_max_pd(_mm256_div_pd(a, _mm256_loadu_pd(mean + i)), fl);
    __m256d t = _mm256_mul_pd(a, log_pd(rate));
    t = _mm256_sub_pd(t, lg);
    t = _mm256_fmadd_pd(am1, log_pd(zv), t);
    t = _mm256_fnmadd_pd(rate, zv, t);
    _mm256_storeu_pd(out + i, t);
  }
  for (; i < n; ++i) {
    const double rate = std::max(shape / mean[i], rate_floor);
    out[i] = shape * std::log(rate) - lgamma_shape + (shape - 1.0) * std::log(z[i]) -
             rate * z[i];
  }
}

void window_sums_avx2(const double* terms, std::size_t cols, std::size_t filter_size,
                      std::size_t stride, double* out) {
  for (std::size_t c = 0; c < cols; ++c) {
    const double* src = terms + c * stride;
    __m256d acc = _mm256_setzero_pd();
    std::size_t j = 0;
    for (; j + 4 <= filter_size; j += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(src + j));
    double s = hsum(acc);
    for (; j < filter_size; ++j) s += src[j];
    out[c] = s;
  }
}

void tied_accumulate_avx2(const double* terms, std::size_t cols, std::size_t filter_size,
                          std::size_t stride, double* acc) {
  for (std::size_t c = 0; c < cols; ++c) {
    const double* src = terms + c * stride;
    std::size_t j = 0;
    for (; j + 4 <= filter_size; j += 4) {
      _mm256_storeu_pd(acc + j, _mm256_add_pd(_mm256_loadu_pd(acc + j), _mm256_loadu_pd(src + j)));
    }
    for (; j < filter_size; ++j) acc[j] += src[j];
  }
}

double sum_avx2(const double* in, std::size_t n) {
  __m256d a0 = _mm256_setzero_pd();
  __m256d a1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    a0 = _mm256_add_pd(a0, _mm256_loadu_pd(in + i));
    a1 = _mm256_add_pd(a1, _mm256_loadu_pd(in + i + 4));
  }
  double s = hsum(_mm256_add_pd(a0, a1));
  for (; i < n; ++i) s += in[i];
  return s;
}

constexpr KernelTable kAvx2{
    Backend::avx2,        "avx2",             log_avx2,
    tied_matvec_avx2,     poisson_terms_avx2, gamma_terms_avx2,
    window_sums_avx2,     tied_accumulate_avx2, sum_avx2,
};

}  // namespace

const KernelTable& avx2_table() noexcept { return kAvx2; }

}  // namespace cdef::kernels
