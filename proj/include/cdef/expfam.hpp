#pragma once

#include <cmath>
#include <utility>

#include "cdef/errors.hpp"
#include "cdef/random.hpp"

namespace cdef {

/// Floor applied to every gamma shape/rate before density evaluation.
inline constexpr double kParamFloor = 1e-10;

/// Smallest value a gamma draw is allowed to take. Shapes well below one
/// otherwise underflow to zero, where log-densities are undefined.
inline constexpr double kSampleFloor = 1e-300;

/// Gamma distribution in (shape, rate) form: p(z) ∝ z^(shape-1) exp(-rate z).
struct GammaParams {
  double shape = 1.0;
  double rate = 1.0;

  GammaParams() = default;
  GammaParams(double shape_, double rate_);

  double mean() const noexcept { return shape / rate; }
  double variance() const noexcept { return shape / (rate * rate); }

  /// Shape and rate clamped at kParamFloor.
  GammaParams floored() const noexcept;
};

struct PoissonParams {
  double rate = 1.0;

  PoissonParams() = default;
  explicit PoissonParams(double rate_);
};

/// d/d shape and d/d rate of log q(z).
struct GammaScore {
  double d_shape = 0.0;
  double d_rate = 0.0;
};

// Special functions. Accurate to 1e-10 relative (absolute near roots) on [1e-4, 1e7].
double log_gamma(double x);
double digamma(double x);

double gamma_log_density(double z, const GammaParams& p);
GammaScore gamma_score(double z, const GammaParams& p);

/// log p(z) with the normalising terms supplied by the caller; no validation.
/// log_norm must equal shape*log(rate) - log_gamma(shape).
inline double gamma_log_density_unchecked(double z, double shape, double rate,
                                          double log_norm) noexcept {
  return log_norm + (shape - 1.0) * std::log(z) - rate * z;
}

double poisson_log_pmf(long long x, const PoissonParams& p);

namespace detail {

// Marsaglia-Tsang for shape >= 1, unit rate.
template <class Rng>
double standard_gamma_ge1(double shape, Rng& rng) {
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      // Box-Muller on the open unit interval; one normal per pass.
      const double u1 = rng.uniform_open();
      const double u2 = rng.uniform_open();
      x = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_open();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

}  // namespace detail

/// One gamma draw. Shapes below one use the boost transform
/// G(a) = G(a + 1) * U^(1/a), evaluated in log space.
template <class Rng>
double gamma_sample(const GammaParams& p, Rng& rng) {
  const GammaParams q = p.floored();
  double draw;
  if (q.shape >= 1.0) {
    draw = detail::standard_gamma_ge1(q.shape, rng) / q.rate;
  } else {
    const double g = detail::standard_gamma_ge1(q.shape + 1.0, rng);
    const double log_u = std::log(rng.uniform_open());
    draw = std::exp(std::log(g) + log_u / q.shape - std::log(q.rate));
  }
  return draw < kSampleFloor ? kSampleFloor : draw;
}

}  // namespace cdef
