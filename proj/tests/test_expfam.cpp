#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "cdef/expfam.hpp"

using namespace cdef;

namespace {

struct SpecialRow {
  double x, lgamma, digamma;
};
const SpecialRow kSpecial[] = {
#include "data/special_values.inc"
};

// Trapezoid rule in u = log z; the integrand decays doubly exponentially on
// the right and like exp(shape * u) on the left.
double integrate_gamma(const GammaParams& p) {
  const double lo = -40.0 / p.shape - 5.0, hi = std::log(80.0 / p.rate + 1.0) + 3.0;
  const std::size_t n = 400000;
  const double h = (hi - lo) / static_cast<double>(n);
  double s = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double u = lo + h * static_cast<double>(i);
    const double z = std::exp(u);
    const double f = std::exp(gamma_log_density(z, p) + u);
    s += (i == 0 || i == n) ? 0.5 * f : f;
  }
  return s * h;
}

}  // namespace

TEST_CASE("log_gamma and digamma agree with a high-precision table") {
  for (const auto& r : kSpecial) {
    CAPTURE(r.x);
    CHECK(std::abs(log_gamma(r.x) - r.lgamma) <= 1e-10 * std::max(1.0, std::abs(r.lgamma)));
    CHECK(std::abs(digamma(r.x) - r.digamma) <= 1e-10 * std::max(1.0, std::abs(r.digamma)));
  }
}

TEST_CASE("gamma density closed-form points") {
  CHECK(gamma_log_density(1.0, {1.0, 1.0}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(gamma_log_density(2.0, {1.0, 0.5}) == doctest::Approx(std::log(0.5) - 1.0).epsilon(1e-15));
  // Independent evaluation: log(z^(a-1) b^a e^(-bz) / Gamma(a)).
  const double z = 0.3, a = 0.1, b = 0.1;
  const double expected = std::log(std::pow(z, a - 1.0) * std::pow(b, a) * std::exp(-b * z) / std::tgamma(a));
  CHECK(gamma_log_density(z, {a, b}) == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("gamma density normalises") {
  for (double a : {0.1, 0.5, 1.0, 2.0})
    for (double b : {0.5, 1.0, 3.0}) {
      CAPTURE(a);
      CAPTURE(b);
      CHECK(std::abs(integrate_gamma({a, b}) - 1.0) < 1e-6);
    }
}

TEST_CASE("gamma score closed-form points") {
  const double psi1 = -0.57721566490153286;
  GammaScore s = gamma_score(1.0, {1.0, 1.0});
  CHECK(s.d_shape == doctest::Approx(-psi1).epsilon(1e-14));
  CHECK(s.d_rate == doctest::Approx(0.0));
  s = gamma_score(2.0, {1.0, 1.0});
  CHECK(s.d_shape == doctest::Approx(std::log(2.0) - psi1).epsilon(1e-14));
  CHECK(s.d_rate == doctest::Approx(-1.0).epsilon(1e-14));
}

TEST_CASE("gamma score matches central differences on a 5x5 grid") {
  const double h = 1e-6;
  for (double a : {0.1, 0.3, 1.0, 3.0, 10.0})
    for (double b : {0.1, 0.5, 1.0, 2.0, 10.0})
      for (double z : {0.5, a / b}) {
        const GammaScore s = gamma_score(z, {a, b});
        const double fa = (gamma_log_density(z, {a + h, b}) - gamma_log_density(z, {a - h, b})) / (2 * h);
        const double fb = (gamma_log_density(z, {a, b + h}) - gamma_log_density(z, {a, b - h})) / (2 * h);
        CAPTURE(a);
        CAPTURE(b);
        CAPTURE(z);
        CHECK(std::abs(s.d_shape - fa) <= 1e-4 * std::max(std::abs(fa), 1e-2));
        CHECK(std::abs(s.d_rate - fb) <= 1e-4 * std::max(std::abs(fb), 1e-2));
      }
}

TEST_CASE("invalid arguments are domain errors") {
  CHECK_THROWS_AS(GammaParams(0.0, 1.0), DomainError);
  CHECK_THROWS_AS(GammaParams(1.0, -1.0), DomainError);
  CHECK_THROWS_AS(GammaParams(std::numeric_limits<double>::quiet_NaN(), 1.0), DomainError);
  CHECK_THROWS_AS(GammaParams(1.0, std::numeric_limits<double>::infinity()), DomainError);
  CHECK_THROWS_AS(gamma_log_density(0.0, {1.0, 1.0}), DomainError);
  CHECK_THROWS_AS(gamma_score(-1.0, {1.0, 1.0}), DomainError);
  CHECK_THROWS_AS(PoissonParams(0.0), DomainError);
  CHECK_THROWS_AS(poisson_log_pmf(-1, PoissonParams(1.0)), DomainError);
}

TEST_CASE("poisson pmf") {
  CHECK(poisson_log_pmf(0, PoissonParams(1.0)) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(poisson_log_pmf(3, PoissonParams(2.0)) == doctest::Approx(-1.712317).epsilon(1e-6));
  CHECK(poisson_log_pmf(3, PoissonParams(2.0)) ==
        doctest::Approx(3 * std::log(2.0) - 2.0 - std::log(6.0)).epsilon(1e-14));
  CHECK(poisson_log_pmf(0, PoissonParams(1e-300)) == doctest::Approx(-1e-300));
  CHECK(std::isfinite(poisson_log_pmf(1000000, PoissonParams(1e6))));

  double total = 0.0;
  for (long long x = 0; x <= 200; ++x) total += std::exp(poisson_log_pmf(x, PoissonParams(5.0)));
  CHECK(std::abs(total - 1.0) < 1e-12);
  for (double lam : {0.01, 1.0, 7.5, 100.0, 2500.0}) {
    double s = 0.0;
    const auto top = static_cast<long long>(lam + 20.0 * std::sqrt(lam) + 20.0);
    for (long long x = 0; x <= top; ++x) s += std::exp(poisson_log_pmf(x, PoissonParams(lam)));
    CAPTURE(lam);
    CHECK(std::abs(s - 1.0) < 1e-10);
  }
}

TEST_CASE("gamma sampler moments") {
  const std::size_t n = 100000;
  for (double a : {0.1, 0.5, 1.0, 3.0})
    for (double b : {0.1, 1.0, 4.0}) {
      RandomStream rng(17);
      double s = 0.0, slog = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double z = gamma_sample({a, b}, rng);
        REQUIRE(z > 0.0);
        s += z;
        slog += std::log(z);
      }
      const double mean = s / n;
      const double se = std::sqrt(a / (b * b) / n);
      CAPTURE(a);
      CAPTURE(b);
      CHECK(std::abs(mean - a / b) < 3.0 * se);
      // E[log z] = psi(a) - log b; Var[log z] = trigamma(a) <= 1/a^2 + 1/a.
      const double se_log = std::sqrt((1.0 / (a * a) + 1.0 / a) / n);
      CHECK(std::abs(slog / n - (digamma(a) - std::log(b))) < 3.0 * se_log);
    }
}

TEST_CASE("score has zero expectation") {
  const std::size_t n = 100000;
  for (const GammaParams p : {GammaParams(0.3, 2.0), GammaParams(1.0, 1.0), GammaParams(5.0, 0.5)}) {
    RandomStream rng(99);
    double m1 = 0, m2 = 0, v1 = 0, v2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const GammaScore s = gamma_score(gamma_sample(p, rng), p);
      m1 += s.d_shape;
      m2 += s.d_rate;
      v1 += s.d_shape * s.d_shape;
      v2 += s.d_rate * s.d_rate;
    }
    m1 /= n;
    m2 /= n;
    CHECK(std::abs(m1) < 3.0 * std::sqrt((v1 / n - m1 * m1) / n));
    CHECK(std::abs(m2) < 3.0 * std::sqrt((v2 / n - m2 * m2) / n));
  }
}

TEST_CASE("sampler is a pure function of the stream") {
  RandomStream a(5), b(5);
  for (int i = 0; i < 1000; ++i) CHECK(gamma_sample({0.2, 1.0}, a) == gamma_sample({0.2, 1.0}, b));
  RandomStream c = RandomStream::derive(1, 2, 3), d = RandomStream::derive(1, 2, 3), e = RandomStream::derive(1, 2, 4);
  CHECK(c.uniform_open() == d.uniform_open());
  CHECK(c.uniform_open() != e.uniform_open());
}

TEST_CASE("tiny shapes stay positive") {
  RandomStream rng(3);
  for (int i = 0; i < 10000; ++i) CHECK(gamma_sample({1e-3, 1.0}, rng) >= kSampleFloor);
}
