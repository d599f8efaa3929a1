// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance            run every criterion
//   acceptance 1 3 8      run a subset

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cdef/harness.hpp"
#include "oracles.hpp"

using namespace cdef;

namespace {

struct Verdict {
  bool pass = false;
  std::string summary;
};

void note(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct MeanSe {
  double mean = 0.0, se = 0.0;
};

MeanSe mean_se(const std::vector<double>& v) {
  MeanSe r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  return r;
}

// One-sided P(X >= k) for X ~ Binomial(n, 1/2).
double sign_test_p(int k, int n) {
  double p = 0.0;
  for (int i = k; i <= n; ++i) p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0));
  return p * std::pow(0.5, n);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig seeded(const std::string& file, std::uint64_t seed) {
  ExperimentConfig cfg = load_experiment_config(std::filesystem::path(CDEF_CONFIG_DIR) / file);
  std::get<SynthSpec>(cfg.data).seed = seed;
  cfg.seed = seed;
  cfg.folds = {static_cast<std::size_t>(seed % 14)};
  cfg.threads = 1;
  return cfg;
}

// 1 -------------------------------------------------------------------------

Verdict tying_structure() {
  const TyingMap t = build_tying(5, 3, 1);
  const int expected[5][3] = {{1, 0, 0}, {2, 1, 0}, {3, 2, 1}, {0, 3, 2}, {0, 0, 3}};
  bool pattern = t.rows == 5 && t.cols == 3;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      pattern = pattern && t.nonzero(i, j) == (expected[i][j] != 0);
      if (expected[i][j]) pattern = pattern && t.param_index(i, j) == static_cast<std::size_t>(expected[i][j] - 1);
    }
  const std::size_t cfgs[7][3] = {{27489, 539, 539},   {51, 3, 3},          {51, 3, 2},        {51, 3, 1},
                                  {27489, 1617, 1617}, {27489, 1617, 1078}, {27489, 1617, 539}};
  const std::size_t want[7] = {51, 17, 25, 49, 17, 25, 49};
  std::string got;
  bool counts = true;
  for (int c = 0; c < 7; ++c) {
    const std::size_t k = build_tying(cfgs[c][0], cfgs[c][1], cfgs[c][2]).cols;
    counts = counts && k == want[c];
    got += (c ? "," : "") + std::to_string(k);
  }
  return {pattern && counts, fmt("5x3 pattern %s; hidden-node counts {%s}", pattern ? "exact" : "WRONG", got.c_str())};
}

// 2 -------------------------------------------------------------------------

double integrate_gamma(const GammaParams& p) {
  const double lo = -40.0 / p.shape - 5.0, hi = std::log(80.0 / p.rate + 1.0) + 3.0;
  const std::size_t n = 400000;
  const double h = (hi - lo) / static_cast<double>(n);
  double s = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double u = lo + h * static_cast<double>(i);
    const double f = std::exp(gamma_log_density(std::exp(u), p) + u);
    s += (i == 0 || i == n) ? 0.5 * f : f;
  }
  return s * h;
}

Verdict density_oracles() {
  double gamma_err = 0.0;
  for (double a : {0.1, 0.5, 1.0, 2.0})
    for (double b : {0.5, 1.0, 3.0}) gamma_err = std::max(gamma_err, std::abs(integrate_gamma({a, b}) - 1.0));

  double pois_err = 0.0;
  for (double lam : {0.01, 1.0, 7.5, 100.0, 2500.0}) {
    double s = 0.0;
    const auto top = static_cast<long long>(lam + 20.0 * std::sqrt(lam) + 20.0);
    for (long long x = 0; x <= top; ++x) s += std::exp(poisson_log_pmf(x, PoissonParams(lam)));
    pois_err = std::max(pois_err, std::abs(s - 1.0));
  }

  double score_err = 0.0;
  const double h = 1e-6;
  for (double a : {0.1, 0.3, 1.0, 3.0, 10.0})
    for (double b : {0.1, 0.5, 1.0, 2.0, 10.0})
      for (double z : {0.5, a / b}) {
        const GammaScore s = gamma_score(z, {a, b});
        const double fa = (gamma_log_density(z, {a + h, b}) - gamma_log_density(z, {a - h, b})) / (2 * h);
        const double fb = (gamma_log_density(z, {a, b + h}) - gamma_log_density(z, {a, b - h})) / (2 * h);
        score_err = std::max(score_err, std::abs(s.d_shape - fa) / std::max(std::abs(fa), 1e-2));
        score_err = std::max(score_err, std::abs(s.d_rate - fb) / std::max(std::abs(fb), 1e-2));
      }
  return {gamma_err < 1e-6 && pois_err < 1e-10 && score_err < 1e-4,
          fmt("gamma mass error %.2e (<1e-6), poisson mass error %.2e (<1e-10), score rel. error %.2e (<1e-4)",
              gamma_err, pois_err, score_err)};
}

// 3 -------------------------------------------------------------------------

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

Verdict blanket_consistency() {
  std::mt19937_64 g(2024);
  std::uniform_real_distribution<double> u(0.3, 3.0);
  double worst = 0.0;
  int z_checks = 0, w_checks = 0, models = 0, max_v = 0, max_l = 0;
  for (; models < 30; ++models) {
    auto t = oracle::random_model(g, 8, 3, 5, 3);
    max_v = std::max<int>(max_v, t.spec.obs_dim);
    max_l = std::max<int>(max_l, t.spec.num_layers());
    for (int p = 0; p < 60; ++p) {
      const bool weight = p % 2;
      const LibView before(t);
      const double j0 = oracle::joint(t);
      double b0, b1, keep;
      if (weight) {
        const std::size_t m = g() % t.w.size(), k = g() % t.w[m].size();
        b0 = blanket_logp_w(t.spec, before.states, before.weights, before.rows, m, k);
        keep = t.w[m][k];
        t.w[m][k] *= u(g);
        const LibView after(t);
        b1 = blanket_logp_w(t.spec, after.states, after.weights, after.rows, m, k);
        worst = std::max(worst, std::abs((oracle::joint(t) - j0) - (b1 - b0)));
        t.w[m][k] = keep;
        ++w_checks;
      } else {
        const std::size_t n = g() % t.z.size(), l = g() % t.z[n].size(), k = g() % t.z[n][l].size();
        b0 = blanket_logp_z(t.spec, before.states[n], before.weights, before.rows[n], l, k);
        keep = t.z[n][l][k];
        t.z[n][l][k] *= u(g);
        const LibView after(t);
        b1 = blanket_logp_z(t.spec, after.states[n], after.weights, after.rows[n], l, k);
        worst = std::max(worst, std::abs((oracle::joint(t) - j0) - (b1 - b0)));
        t.z[n][l][k] = keep;
        ++z_checks;
      }
    }
  }
  return {worst < 1e-9, fmt("%d random models (V<=%d, L<=%d), %d z and %d tied-W perturbations, worst |delta| gap %.2e "
                            "(<1e-9)",
                            models, max_v, max_l, z_checks, w_checks, worst)};
}

// 4 -------------------------------------------------------------------------

VariationalState random_state(const ModelSpec& spec, std::size_t n_samples, std::uint64_t seed) {
  VariationalState vs(spec, n_samples);
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> shape(1.5, 4.0), mean(0.5, 2.0);
  for (std::size_t n = 0; n < n_samples; ++n)
    for (std::size_t l = 0; l < spec.num_layers(); ++l)
      for (std::size_t k = 0; k < spec.layers[l].size; ++k) {
        const double a = shape(g);
        vs.set_z_params(n, l, k, GammaParams(a, a / mean(g)));
      }
  for (std::size_t m = 0; m < spec.weight_tyings.size(); ++m)
    for (std::size_t t = 0; t < spec.weight_tyings[m].filter_size; ++t) {
      const double a = shape(g);
      vs.set_w_params(m, t, GammaParams(a, a / mean(g)));
    }
  return vs;
}

MeanSe fd_gradient(const ModelSpec& spec, VariationalState vs, const CountMatrix& data, const EstimatorConfig& cfg,
                   bool weight, std::size_t index, double h) {
  auto& coords = weight ? vs.w_coords() : vs.z_coords();
  const double keep = coords[index];
  coords[index] = keep + h;
  const auto up = elbo_samples(spec, vs, data, cfg);
  coords[index] = keep - h;
  const auto down = elbo_samples(spec, vs, data, cfg);
  std::vector<double> d(up.size());
  for (std::size_t s = 0; s < d.size(); ++s) d[s] = (up[s] - down[s]) / (2.0 * h);
  return mean_se(d);
}

Verdict gradient_unbiasedness() {
  // V = 4, K = (3, 2).
  const LayerGeometry geo[] = {{2, 1, 0.6}, {2, 1, 0.8}};
  const ModelSpec spec = make_model_spec(4, geo, GammaParams(1.5, 1.0), GammaParams(2.0, 2.0));
  CountMatrix data(Layout{4, 1}, 2);
  std::mt19937_64 g(3);
  std::poisson_distribution<int> p(2.0);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i) data.count(n, i) = p(g);
  data.set_visible(0, 2, false);
  const VariationalState vs = random_state(spec, 2, 8);

  EstimatorConfig cfg;
  cfg.mc_samples = 100000;
  cfg.seed = 41;
  cfg.clip_norm.reset();
  const GradientEstimate est = estimate_gradients(spec, vs, data, cfg);
  int coords = 0, within = 0;
  double worst = 0.0;
  for (int weight = 0; weight < 2; ++weight) {
    const auto& gv = weight ? est.w : est.z;
    const auto& se = weight ? est.w_se : est.z_se;
    for (std::size_t i = 0; i < gv.size(); ++i) {
      const MeanSe fd = fd_gradient(spec, vs, data, cfg, weight, i, 1e-3);
      const double z = std::abs(gv[i] - fd.mean) / std::hypot(se[i], fd.se);
      worst = std::max(worst, z);
      within += z < 3.0;
      ++coords;
    }
  }
  return {within == coords, fmt("%d/%d coordinates within 3 MC standard errors (S=1e5, CRN), worst %.2f SE", within,
                                coords, worst)};
}

// 5 -------------------------------------------------------------------------

Verdict conjugate_recovery() {
  const LayerGeometry geo[] = {{3, 3, 0.5}};
  const double a = 2.0, b = 1.5;
  const ModelSpec spec = make_model_spec(3, geo, GammaParams(a, b), GammaParams(1.0, 1.0));
  CountMatrix data(Layout{3, 1}, 1);
  const std::uint32_t x[3] = {4, 0, 7};
  const double w[3] = {0.5, 1.2, 2.0};
  double sx = 0, sw = 0, logm = 0;
  for (int i = 0; i < 3; ++i) {
    data.count(0, i) = x[i];
    sx += x[i];
    sw += w[i];
    logm += x[i] * std::log(w[i]) - std::lgamma(x[i] + 1.0);
  }
  logm += a * std::log(b) - std::lgamma(a) + std::lgamma(a + sx) - (a + sx) * std::log(b + sw);
  const double post_mean = (a + sx) / (b + sw);

  VariationalState vs(spec, 1);
  for (int i = 0; i < 3; ++i) vs.set_w_params(0, i, GammaParams(1e6, 1e6 / w[i]));
  EstimatorConfig cfg;
  cfg.weights = WeightMode::mean;
  cfg.mc_samples = 256;
  cfg.seed = 2;
  OptimizerState opt;
  opt.settings.step_halflife = 50;
  const TrainResult r = train_from(spec, data, cfg, vs, opt, 10000, false);
  const double trained = r.state.z_params(0, 0, 0).mean();
  const double rel = std::abs(trained / post_mean - 1.0);

  VariationalState exact = vs;
  exact.set_z_params(0, 0, 0, GammaParams(a + sx, b + sw));
  cfg.mc_samples = 10000;
  const MeanSe elbo = mean_se(elbo_samples(spec, exact, data, cfg));
  // Every draw equals the log marginal at the exact posterior, so the SE is
  // zero up to rounding; allow rounding on top of 3 SE.
  const double tol = 3.0 * elbo.se + 1e-9 * std::abs(logm);
  const double gap = std::abs(elbo.mean - logm);
  return {rel < 0.05 && gap <= tol,
          fmt("trained mean %.4f vs posterior %.4f (rel %.2f%% < 5%%); exact-posterior ELBO %.10f vs log marginal "
              "%.10f (gap %.1e, 3SE %.1e)",
              trained, post_mean, 100 * rel, elbo.mean, logm, gap, 3.0 * elbo.se)};
}

// 6 -------------------------------------------------------------------------

Verdict two_layer_claim() {
  const std::vector<NamedModel> two = {NamedModel::CDEF_1_51_2_17, NamedModel::CDEF_1_51_2_25,
                                       NamedModel::CDEF_1_51_2_49};
  const int seeds = 10;
  int wins = 0;
  std::map<std::string, std::vector<double>> all;
  for (int s = 0; s < seeds; ++s) {
    ExperimentConfig cfg = seeded("weekly_synth.json", s);
    auto score = [&](NamedModel m, double* hp) {
      cfg.model.named = m;
      const EvalReport r = run_experiment(cfg);
      if (r.partial) throw std::runtime_error(model_name(m) + ": " + r.rows[0].error);
      if (hp) *hp = r.rows[0].hp_loglik;
      all[model_name(m)].push_back(r.rows[0].heldout_loglik);
      return r.rows[0].heldout_loglik;
    };
    double hp = 0.0;
    const double one = score(NamedModel::CDEF_1_51, &hp);
    all["HP"].push_back(hp);
    bool deeper = true;
    double best = -INFINITY;
    std::string line = fmt("seed %d fold %d: HP %.1f  1_51 %.1f", s, s % 14, hp, one);
    for (NamedModel m : two) {
      const double v = score(m, nullptr);
      deeper = deeper && v > one;
      best = std::max(best, v);
      line += fmt("  %s %.1f", model_name(m).substr(5).c_str(), v);
    }
    const bool ok = deeper && best > hp;
    wins += ok;
    note("%s  -> %s", line.c_str(), ok ? "yes" : "no");
  }
  std::string means;
  for (const auto& [name, v] : all) means += fmt(" %s %.1f", name.c_str(), mean_se(v).mean);
  note("means over seeds:%s", means.c_str());
  const double p = sign_test_p(wins, seeds);
  return {wins >= 8 && p < 0.05,
          fmt("2-layer > 1-layer and best 2-layer > HP in %d/%d seeds (need >= 8), sign test p = %.4f", wins, seeds, p)};
}

// 7 -------------------------------------------------------------------------

Verdict overlap_claim() {
  const int seeds = 10;
  // h[model][reveal][seed]
  std::map<std::string, std::map<std::size_t, std::vector<double>>> h;
  std::vector<std::size_t> grid;
  for (int s = 0; s < seeds; ++s) {
    const ExperimentConfig cfg = seeded("block_synth.json", s);
    const CountMatrix data = load_data(cfg.data);
    const EvalReport r = run_sweep(cfg, data);
    if (r.partial) throw std::runtime_error("sweep run failed");
    for (const auto& row : r.rows) h[row.model][row.reveal_count].push_back(row.heldout_loglik);
    if (grid.empty())
      for (const auto& row : r.rows)
        if (std::find(grid.begin(), grid.end(), row.reveal_count) == grid.end()) grid.push_back(row.reveal_count);
    note("seed %d reveal 0: 1_17 %.1f  1_25 %.1f  1_49 %.1f", s, h["CDEF_1_17"][0].back(), h["CDEF_1_25"][0].back(),
         h["CDEF_1_49"][0].back());
  }
  int wins = 0;
  for (int s = 0; s < seeds; ++s)
    wins += h["CDEF_1_25"][0][s] > h["CDEF_1_17"][0][s] && h["CDEF_1_49"][0][s] > h["CDEF_1_17"][0][s];
  const double p = sign_test_p(wins, seeds);

  auto paired = [&](const std::string& o, std::size_t r) {
    std::vector<double> d(seeds);
    for (int s = 0; s < seeds; ++s) d[s] = h["CDEF_1_17"][r][s] - h[o][r][s];
    return mean_se(d);
  };
  for (std::size_t r : grid) {
    const MeanSe d25 = paired("CDEF_1_25", r), d49 = paired("CDEF_1_49", r);
    note("reveal %4zu: 1_17 minus 1_25 %+9.2f (SE %.2f), 1_17 minus 1_49 %+9.2f (SE %.2f)", r, d25.mean, d25.se,
         d49.mean, d49.se);
  }
  const std::size_t top = grid.back();
  const MeanSe d25 = paired("CDEF_1_25", top), d49 = paired("CDEF_1_49", top);
  const bool close = std::abs(d25.mean) <= 2 * d25.se && std::abs(d49.mean) <= 2 * d49.se;
  return {wins >= 8 && p < 0.05 && close,
          fmt("reveal 0: overlapping > non-overlapping in %d/%d seeds (sign test p = %.4f); reveal %zu: |paired diff| "
              "%.2f <= 2SE %.2f and %.2f <= 2SE %.2f: %s",
              wins, seeds, p, top, std::abs(d25.mean), 2 * d25.se, std::abs(d49.mean), 2 * d49.se,
              close ? "yes" : "no")};
}

// 8 -------------------------------------------------------------------------

Verdict determinism() {
  ExperimentConfig cfg = seeded("weekly_synth.json", 5);
  cfg.model.named = NamedModel::CDEF_1_51_2_17;
  cfg.folds = {0, 7};
  cfg.inference.train_iterations = 300;
  cfg.inference.test_iterations = 100;
  const auto base = std::filesystem::temp_directory_path() / "cdef_acceptance_determinism";
  std::filesystem::remove_all(base);
  std::vector<std::string> files[2];
  for (int run = 0; run < 2; ++run) {
    const EvalReport r = run_experiment(cfg);
    for (auto f : {ReportFormat::csv, ReportFormat::json_lines})
      for (const auto& p : emit_report(r, base / std::to_string(run), {f, false})) files[run].push_back(slurp(p));
  }
  const bool same = files[0] == files[1] && !files[0].empty();
  return {same, fmt("two runs, %zu report files each, %s", files[0].size(), same ? "byte-identical" : "DIFFER")};
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "tying structure", 1, tying_structure},
      {2, "density oracles", 10, density_oracles},
      {3, "blanket-joint consistency", 30, blanket_consistency},
      {4, "gradient unbiasedness", 300, gradient_unbiasedness},
      {5, "conjugate recovery", 120, conjugate_recovery},
      {6, "2-layer CDEFs vs 1-layer and HP", 1800, two_layer_claim},
      {7, "overlapping vs non-overlapping filters", 2700, overlap_claim},
      {8, "determinism", 60, determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.contains(c.id)) continue;
    std::printf("[%d] %s\n", c.id, c.name);
    std::fflush(stdout);
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.limit_seconds;
    const bool pass = v.pass && in_time;
    failures += !pass;
    std::printf("%s criterion %d: %s (%.1f s, limit %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, v.summary.c_str(), secs,
                c.limit_seconds, in_time ? "" : ", OVER TIME");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
