#include "cdef/expfam.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <sstream>

namespace cdef {

namespace {

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

[[noreturn]] void domain_fail(const char* what, double v) {
  std::ostringstream os;
  os << what << " (got " << v << ")";
  throw DomainError(os.str());
}

}  // namespace

GammaParams::GammaParams(double shape_, double rate_) : shape(shape_), rate(rate_) {
  if (!positive_finite(shape)) domain_fail("gamma shape must be positive and finite", shape);
  if (!positive_finite(rate)) domain_fail("gamma rate must be positive and finite", rate);
}

GammaParams GammaParams::floored() const noexcept {
  GammaParams out;
  out.shape = shape < kParamFloor ? kParamFloor : shape;
  out.rate = rate < kParamFloor ? kParamFloor : rate;
  return out;
}

PoissonParams::PoissonParams(double rate_) : rate(rate_) {
  if (!positive_finite(rate)) domain_fail("poisson rate must be positive and finite", rate);
}

double log_gamma(double x) { return boost::math::lgamma(x); }

double digamma(double x) { return boost::math::digamma(x); }

double gamma_log_density(double z, const GammaParams& p) {
  if (!positive_finite(z)) domain_fail("gamma density needs z > 0", z);
  if (!positive_finite(p.shape) || !positive_finite(p.rate))
    domain_fail("invalid gamma parameters, shape", p.shape);
  const GammaParams q = p.floored();
  return -std::log(z) + q.shape * std::log(z) - q.rate * z - log_gamma(q.shape) +
         q.shape * std::log(q.rate);
}

GammaScore gamma_score(double z, const GammaParams& p) {
  if (!positive_finite(z)) domain_fail("gamma score needs z > 0", z);
  if (!positive_finite(p.shape) || !positive_finite(p.rate))
    domain_fail("invalid gamma parameters, shape", p.shape);
  const GammaParams q = p.floored();
  return {std::log(z) - digamma(q.shape) + std::log(q.rate), -z + q.shape / q.rate};
}

double poisson_log_pmf(long long x, const PoissonParams& p) {
  if (x < 0) domain_fail("poisson count must be non-negative", static_cast<double>(x));
  if (!positive_finite(p.rate)) domain_fail("poisson rate must be positive", p.rate);
  const double xd = static_cast<double>(x);
  // x log(rate) is 0 for x = 0 even when the rate is tiny.
  const double head = x == 0 ? 0.0 : xd * std::log(p.rate);
  return head - p.rate - log_gamma(xd + 1.0);
}

}  // namespace cdef
