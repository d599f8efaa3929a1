#include <doctest.h>

#include <cmath>
#include <random>

#include "cdef/graph.hpp"
#include "oracles.hpp"

using namespace cdef;

namespace {

struct LibView {
  std::vector<TiedWeightMatrix> weights;
  std::vector<LatentState> states;
  std::vector<std::vector<std::uint32_t>> counts;
  std::vector<std::vector<std::uint8_t>> vis;
  std::vector<ObservedRow> rows;

  explicit LibView(const oracle::TinyModel& t) {
    for (std::size_t m = 0; m < t.w.size(); ++m) weights.emplace_back(t.spec.weight_tyings[m], t.w[m]);
    for (std::size_t n = 0; n < t.z.size(); ++n) {
      states.push_back(LatentState{t.z[n]});
      counts.emplace_back(t.x[n].begin(), t.x[n].end());
      vis.emplace_back(t.vis[n].begin(), t.vis[n].end());
    }
    for (std::size_t n = 0; n < t.z.size(); ++n) rows.push_back({counts[n], vis[n]});
  }
};

}  // namespace

TEST_CASE("tying reproduces the 5x3 filter-3 pattern") {
  const TyingMap t = build_tying(5, 3, 1);
  CHECK(t.cols == 3);
  // Rows of the pattern, entries as free-parameter index + 1, 0 for structural zeros.
  const int expected[5][3] = {{1, 0, 0}, {2, 1, 0}, {3, 2, 1}, {0, 3, 2}, {0, 0, 3}};
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      CAPTURE(i);
      CAPTURE(j);
      CHECK(t.nonzero(i, j) == (expected[i][j] != 0));
      if (expected[i][j]) CHECK(t.param_index(i, j) == static_cast<std::size_t>(expected[i][j] - 1));
    }
  CHECK_THROWS_AS(t.param_index(0, 1), std::out_of_range);
  const TiedWeightMatrix w(t, {0.1, 0.2, 0.3});
  const auto d = w.materialize();
  std::size_t nz = 0;
  for (double v : d) nz += v != 0.0;
  CHECK(nz == t.nonzero_count());
}

TEST_CASE("tying shape law on the experiment configurations") {
  CHECK(build_tying(27489, 539, 539).cols == 51);
  CHECK(build_tying(51, 3, 3).cols == 17);
  CHECK(build_tying(51, 3, 2).cols == 25);
  CHECK(build_tying(51, 3, 1).cols == 49);
  CHECK(build_tying(27489, 1617, 1617).cols == 17);
  CHECK(build_tying(27489, 1617, 1078).cols == 25);
  CHECK(build_tying(27489, 1617, 539).cols == 49);
}

TEST_CASE("tying rejects indivisible or oversized filters and names the layer") {
  try {
    build_tying(10, 3, 2, "W1");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("W1") != std::string::npos);
  }
  CHECK_THROWS_AS(build_tying(3, 4, 1), ConfigError);
  CHECK_THROWS_AS(build_tying(3, 1, 0), ConfigError);
}

TEST_CASE("tying laws hold on random shapes") {
  std::mt19937_64 g(11);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t rows = 1 + g() % 40, f = 1 + g() % rows, s = 1 + g() % rows;
    if ((rows - f) % s != 0) {
      CHECK_THROWS_AS(build_tying(rows, f, s), ConfigError);
      continue;
    }
    const TyingMap t = build_tying(rows, f, s);
    CHECK(t.cols == (rows - f) / s + 1);
    std::vector<double> free(f);
    for (std::size_t k = 0; k < f; ++k) free[k] = 1.0 + static_cast<double>(k);
    const TiedWeightMatrix w(t, free);
    const auto d = w.materialize();
    const auto ref = oracle::dense(rows, f, s, free);
    std::size_t nz = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      const auto [first, last] = t.columns_of_row(i);
      for (std::size_t j = 0; j < t.cols; ++j) {
        CHECK(d[i * t.cols + j] == ref[i][j]);
        CHECK(w.at(i, j) == ref[i][j]);
        CHECK(t.nonzero(i, j) == (j >= first && j < last));
        nz += ref[i][j] != 0.0;
      }
    }
    CHECK(nz == t.nonzero_count());
  }
}

TEST_CASE("single-column tying is the fully connected layer") {
  const TyingMap t = build_tying(6, 6, 4);
  CHECK(t.cols == 1);
  const TiedWeightMatrix w(t, {1, 2, 3, 4, 5, 6});
  const std::vector<double> z = {2.0};
  for (std::size_t i = 0; i < 6; ++i) CHECK(w.row_dot(i, z) == 2.0 * static_cast<double>(i + 1));
}

TEST_CASE("link function") {
  GammaParams p = linked_params(1.0, 0.5);
  CHECK(p.shape == 0.5);
  CHECK(p.rate == 0.5);
  CHECK(p.mean() == doctest::Approx(1.0));
  p = linked_params(4.0, 0.1);
  CHECK(p.rate == doctest::Approx(0.025));
  const std::vector<double> z = {1, 2, 3}, w = {0.1, 0.2, 0.3};
  p = linked_params(z, w, 0.7);
  CHECK(p.rate == doctest::Approx(0.7 / 1.4));
  CHECK(p.mean() == doctest::Approx(1.4));
  CHECK(linked_params(0.0, 0.5).rate == doctest::Approx(0.5 / kRateFloor));
}

TEST_CASE("observation rate") {
  const TiedWeightMatrix w0(build_tying(3, 1, 1), {0.5});
  const std::vector<double> ones = {1, 1, 1};
  for (std::size_t i = 0; i < 3; ++i) CHECK(obs_rate(ones, w0, i).rate == doctest::Approx(0.5));
  // Rows 2..3 of a filter-2 stride-2 layer never meet column 0.
  const TiedWeightMatrix w1(build_tying(4, 2, 2), {1.0, 1.0});
  const std::vector<double> z = {1.0, 0.0};
  CHECK(obs_rate(z, w1, 3).rate == kRateFloor);
  std::mt19937_64 g(4);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  const TyingMap t = build_tying(9, 3, 2);
  std::vector<double> free(3), z1(t.cols);
  for (auto& v : free) v = u(g);
  for (auto& v : z1) v = u(g);
  const auto ref = oracle::dense(9, 3, 2, free);
  const TiedWeightMatrix w(t, free);
  for (std::size_t i = 0; i < 9; ++i) {
    double lam = 0.0;
    for (std::size_t j = 0; j < t.cols; ++j) lam += ref[i][j] * z1[j];
    CHECK(obs_rate(z1, w, i).rate == doctest::Approx(lam).epsilon(1e-14));
  }
}

TEST_CASE("one-node blanket is the whole joint") {
  ModelSpec spec;
  const LayerGeometry geo[] = {{1, 1, 0.5}};
  spec = make_model_spec(1, geo, GammaParams(0.7, 0.4), GammaParams(0.1, 0.3));
  const std::vector<TiedWeightMatrix> w = {TiedWeightMatrix(spec.weight_tyings[0], {1.3})};
  const LatentState st{{{0.8}}};
  const std::vector<std::uint32_t> x = {3};
  const std::vector<std::uint8_t> vis = {1};
  const ObservedRow row{x, vis};
  const double expected = oracle::gamma_logpdf(0.8, 0.7, 0.4) + oracle::poisson_logpmf(3, 0.8 * 1.3);
  CHECK(blanket_logp_z(spec, st, w, row, 0, 0) == doctest::Approx(expected).epsilon(1e-13));
  CHECK(log_joint(spec, st, w, row) ==
        doctest::Approx(expected + oracle::gamma_logpdf(1.3, 0.1, 0.3)).epsilon(1e-13));
  const std::vector<std::uint8_t> hidden = {0};
  CHECK(log_joint(spec, st, w, {x, hidden}) ==
        doctest::Approx(oracle::gamma_logpdf(0.8, 0.7, 0.4) + oracle::gamma_logpdf(1.3, 0.1, 0.3)).epsilon(1e-13));
}

TEST_CASE("filter-3 blanket of the middle node touches rows 1..3") {
  const LayerGeometry geo[] = {{3, 1, 0.5}};
  const ModelSpec spec = make_model_spec(5, geo, GammaParams(1, 1), GammaParams(1, 1));
  const std::vector<TiedWeightMatrix> w = {TiedWeightMatrix(spec.weight_tyings[0], {0.5, 1.0, 1.5})};
  const LatentState st{{{1.0, 2.0, 3.0}}};
  const std::vector<std::uint32_t> x = {1, 2, 3, 4, 5};
  // Changing the count of a row outside the window leaves the blanket unchanged.
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<std::uint32_t> x2 = x;
    x2[i] += 7;
    const std::vector<std::uint8_t> vis(5, 1);
    const double a = blanket_logp_z(spec, st, w, {x, vis}, 0, 1);
    const double b = blanket_logp_z(spec, st, w, {x2, vis}, 0, 1);
    CAPTURE(i);
    CHECK((a != b) == (i >= 1 && i <= 3));
  }
  // The tied parameter 0 sits in cells (0,0), (1,1), (2,2): its blanket covers rows 0..2.
  const std::vector<std::uint8_t> vis(5, 1);
  const std::vector<LatentState> states = {st};
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<std::uint32_t> x2 = x;
    x2[i] += 7;
    const std::vector<ObservedRow> r1 = {{x, vis}}, r2 = {{x2, vis}};
    CAPTURE(i);
    CHECK((blanket_logp_w(spec, states, w, r1, 0, 0) != blanket_logp_w(spec, states, w, r2, 0, 0)) == (i <= 2));
  }
}

TEST_CASE("log_joint matches the dense oracle") {
  std::mt19937_64 g(21);
  for (int rep = 0; rep < 50; ++rep) {
    const auto t = oracle::random_model(g, 8, 3, 5, 1);
    const LibView v(t);
    CHECK(log_joint(t.spec, v.states[0], v.weights, v.rows[0]) == doctest::Approx(oracle::joint(t)).epsilon(1e-12));
  }
}

TEST_CASE("blanket deltas equal joint deltas") {
  std::mt19937_64 g(7);
  std::uniform_real_distribution<double> u(0.3, 3.0);
  int checked = 0;
  for (int rep = 0; rep < 40; ++rep) {
    auto t = oracle::random_model(g, 8, 3, 5, 3);
    for (int p = 0; p < 100; ++p) {
      const bool weight = g() % 2;
      if (weight) {
        const std::size_t m = g() % t.w.size(), k = g() % t.w[m].size();
        const LibView before(t);
        const double j0 = oracle::joint(t);
        const double b0 = blanket_logp_w(t.spec, before.states, before.weights, before.rows, m, k);
        const double keep = t.w[m][k];
        t.w[m][k] *= u(g);
        const LibView after(t);
        const double j1 = oracle::joint(t);
        const double b1 = blanket_logp_w(t.spec, after.states, after.weights, after.rows, m, k);
        t.w[m][k] = keep;
        CHECK(std::abs((j1 - j0) - (b1 - b0)) < 1e-9);
      } else {
        const std::size_t n = g() % t.z.size(), l = g() % t.z[n].size(), k = g() % t.z[n][l].size();
        const LibView before(t);
        const double j0 = oracle::joint(t);
        const double b0 = blanket_logp_z(t.spec, before.states[n], before.weights, before.rows[n], l, k);
        const double keep = t.z[n][l][k];
        t.z[n][l][k] *= u(g);
        const LibView after(t);
        const double j1 = oracle::joint(t);
        const double b1 = blanket_logp_z(t.spec, after.states[n], after.weights, after.rows[n], l, k);
        t.z[n][l][k] = keep;
        CHECK(std::abs((j1 - j0) - (b1 - b0)) < 1e-9);
      }
      ++checked;
    }
  }
  CHECK(checked == 4000);
}

TEST_CASE("model config round trip and validation") {
  const LayerGeometry geo[] = {{49 * 3, 49, 0.3}, {3, 2, 0.4}};
  const ModelSpec spec = make_model_spec(2499, geo, GammaParams(0.1, 0.1), GammaParams(0.1, 0.3));
  CHECK(spec.describe_chain() == "V=2499 -> K1=49 -> K2=24");
  const ModelSpec back = parse_model_spec(model_spec_to_json(spec));
  CHECK(back.describe_chain() == spec.describe_chain());
  CHECK(back.layers[1].fixed_shape == 0.4);
  CHECK(back.weight_tyings == spec.weight_tyings);
  CHECK_THROWS_AS(parse_model_spec(R"({"obs_dim": 10, "layers": [{"filter": 3, "stride": 2}], "bogus": 1})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_model_spec(R"({"obs_dim": 10, "layers": [{"filter": 3, "stride": 2}]})"), ConfigError);
  CHECK_THROWS_AS(parse_model_spec(R"({"obs_dim": 10, "layers": [{"filter": 4, "stride": 2, "fixed_shape": 3}]})"),
                  ConfigError);
  CHECK_NOTHROW(parse_model_spec(
      R"({"obs_dim": 10, "layers": [{"filter": 4, "stride": 2, "fixed_shape": 3}], "soft_gamma": false})"));
}
