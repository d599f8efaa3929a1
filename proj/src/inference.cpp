#include "cdef/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "cdef/kernels.hpp"
#include "cdef/random.hpp"

namespace cdef {

namespace {

// Unconstrained coordinates are kept where exp() stays inside [1e-10, 1e10].
constexpr double kCoordMin = -23.025850929940457;
constexpr double kCoordMax = 23.025850929940457;

// Stream domains.
constexpr std::uint64_t kTagZ = 1;
constexpr std::uint64_t kTagW = 2;
constexpr std::uint64_t kPhaseTest = 0x74657374ULL;
constexpr std::uint64_t kPhaseEval = 0x6576616cULL;

std::uint64_t phase_seed(std::uint64_t seed, std::uint64_t phase) {
  RandomStream r = RandomStream::derive(seed, phase);
  return r();
}

template <class Fn>
void parallel_for(std::size_t threads, std::size_t count, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i, 0);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += threads) fn(i, w);
    });
  }
}

// Counts as doubles plus log(x!) so the kernels never touch integers.
struct PreparedData {
  std::size_t n = 0;
  std::size_t v = 0;
  std::vector<double> x;
  std::vector<double> log_factorial;
  std::vector<std::uint8_t> visible;

  PreparedData(const CountMatrix& data, bool invert_mask)
      : n(data.n_samples()), v(data.dim()), x(n * v), log_factorial(n * v), visible(n * v) {
    for (std::size_t i = 0; i < n * v; ++i) {
      const auto c = data.counts()[i];
      x[i] = static_cast<double>(c);
      log_factorial[i] = log_gamma(x[i] + 1.0);
      const bool vis = data.mask()[i] != 0;
      visible[i] = (vis != invert_mask) ? 1 : 0;
    }
  }
};

// Cached per-factor constants of q.
struct FactorCache {
  double shape = 1.0;
  double rate = 1.0;
  double log_rate = 0.0;
  double digamma_shape = 0.0;
  double log_norm = 0.0;  // shape*log(rate) - lgamma(shape)

  explicit FactorCache(const GammaParams& p)
      : shape(p.shape),
        rate(p.rate),
        log_rate(std::log(p.rate)),
        digamma_shape(digamma(p.shape)),
        log_norm(p.shape * std::log(p.rate) - log_gamma(p.shape)) {}

  double log_q(double z, double log_z) const noexcept {
    return log_norm + (shape - 1.0) * log_z - rate * z;
  }
  // Score with respect to (log shape, log rate).
  void score(double z, double log_z, double* out) const noexcept {
    out[0] = shape * (log_z - digamma_shape + log_rate);
    out[1] = shape - rate * z;
  }
};

struct WeightDraw {
  std::vector<std::vector<double>> values;  // [m][t]
  std::vector<double> log_q;                // flat over (m, t)
  std::vector<double> log_prior;
  std::vector<double> score;                // 2 per coordinate
};

struct Workspace {
  std::vector<std::vector<double>> z;      // [layer][k]
  std::vector<double> log_z;               // flat over nodes
  std::vector<std::vector<double>> means;  // [m][row]
  std::vector<std::vector<double>> terms;  // [m][row]
  std::vector<double> top_terms;
  std::vector<double> window;
  std::vector<double> node_score;          // 2 per node
  std::vector<double> node_log_q;
  std::vector<double> node_blanket;
};

class Engine {
 public:
  Engine(const ModelSpec& spec, const VariationalState& vs, const PreparedData& data,
         const EstimatorConfig& cfg, std::uint64_t iteration)
      : spec_(spec), vs_(vs), data_(data), cfg_(cfg), iteration_(iteration),
        kt_(kernels::active()) {
    if (!vs.conforms_to(spec)) throw std::invalid_argument("variational state does not match model");
    if (vs.n_samples() != data.n) throw std::invalid_argument("variational state / data sample count mismatch");
    if (data.v != spec.obs_dim) throw std::invalid_argument("data dimension does not match model obs_dim");
    if (cfg.mc_samples == 0) throw std::invalid_argument("mc_samples must be at least 1");

    for (std::size_t n = 0; n < vs.n_samples(); ++n)
      for (std::size_t l = 0; l < vs.num_layers(); ++l)
        for (std::size_t k = 0; k < vs.layer_size(l); ++k) z_cache_.emplace_back(vs.z_params(n, l, k));
    for (std::size_t m = 0; m < vs.num_weight_layers(); ++m)
      for (std::size_t t = 0; t < vs.weight_size(m); ++t) w_cache_.emplace_back(vs.w_params(m, t));

    const GammaParams top = spec.top_prior.floored();
    top_prior_ = FactorCache(top);
    weight_prior_ = FactorCache(spec.weight_prior.floored());
    for (const LayerSpec& layer : spec.layers) lgamma_shape_.push_back(log_gamma(layer.fixed_shape));
  }

  struct Output {
    GradientEstimate grad;
    std::vector<double> elbo_draws;
  };

  Output run(bool want_z, bool want_w) {
    const std::size_t S = cfg_.mc_samples;
    const std::size_t N = vs_.n_samples();
    const std::size_t nodes = vs_.nodes_per_sample();
    const std::size_t n_w = w_cache_.size();
    const bool sample_w = cfg_.weights == WeightMode::sample;
    const bool full = cfg_.blanket == BlanketMode::full_joint;
    want_w = want_w && sample_w;

    std::vector<WeightDraw> wdraws(S);
    for (std::size_t s = 0; s < S; ++s) draw_weights(s, wdraws[s]);

    // Per (s, n) results.
    std::vector<double> joint(S * N, 0.0);
    std::vector<double> zlogq_total(S * N, 0.0);
    std::vector<double> wacc(want_w ? S * N * n_w : 0, 0.0);
    std::vector<double> full_score(full && want_z ? S * N * nodes * 2 : 0);
    std::vector<double> full_logq(full && want_z ? S * N * nodes : 0);

    Output out;
    out.grad.z.assign(want_z ? vs_.z_coords().size() : 0, 0.0);
    out.grad.z_se.assign(out.grad.z.size(), 0.0);
    out.grad.w.assign(want_w ? vs_.w_coords().size() : 0, 0.0);
    out.grad.w_se.assign(out.grad.w.size(), 0.0);
    std::vector<double> z_sq(out.grad.z.size(), 0.0);

    const std::size_t threads = std::max<std::size_t>(1, cfg_.threads);
    std::vector<Workspace> spaces(std::min(threads, std::max<std::size_t>(N, 1)));
    for (Workspace& ws : spaces) init_workspace(ws);

    parallel_for(threads, N, [&](std::size_t n, std::size_t worker) {
      Workspace& ws = spaces[worker];
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t sn = s * N + n;
        joint[sn] = evaluate_sample(s, n, wdraws[s], ws, want_w ? &wacc[sn * n_w] : nullptr);
        double lq = 0.0;
        for (std::size_t i = 0; i < nodes; ++i) lq += ws.node_log_q[i];
        zlogq_total[sn] = lq;
        if (!want_z) continue;
        if (full) {
          std::copy(ws.node_score.begin(), ws.node_score.end(), full_score.begin() + sn * nodes * 2);
          std::copy(ws.node_log_q.begin(), ws.node_log_q.end(), full_logq.begin() + sn * nodes);
          continue;
        }
        double* g = &out.grad.z[2 * n * nodes];
        double* g2 = &z_sq[2 * n * nodes];
        for (std::size_t i = 0; i < nodes; ++i) {
          const double f = ws.node_blanket[i] - ws.node_log_q[i];
          const double a = ws.node_score[2 * i] * f;
          const double b = ws.node_score[2 * i + 1] * f;
          g[2 * i] += a;
          g[2 * i + 1] += b;
          g2[2 * i] += a * a;
          g2[2 * i + 1] += b * b;
        }
      }
    });

    std::vector<double> w_sq(out.grad.w.size(), 0.0);
    std::vector<double> blanket_w(n_w);
    out.elbo_draws.resize(S);
    for (std::size_t s = 0; s < S; ++s) {
      const WeightDraw& wd = wdraws[s];
      double log_p = 0.0;
      double log_q = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        log_p += joint[s * N + n];
        log_q += zlogq_total[s * N + n];
      }
      if (sample_w) {
        for (std::size_t c = 0; c < n_w; ++c) {
          log_p += wd.log_prior[c];
          log_q += wd.log_q[c];
        }
      }
      const double elbo = log_p - log_q;
      if (!std::isfinite(elbo)) {
        std::ostringstream os;
        os << "non-finite ELBO at Monte Carlo draw " << s << " (iteration " << iteration_ << ")";
        throw NumericalError(os.str());
      }
      out.elbo_draws[s] = elbo;

      if (want_w) {
        for (std::size_t c = 0; c < n_w; ++c) blanket_w[c] = wd.log_prior[c];
        for (std::size_t n = 0; n < N; ++n) {
          const double* acc = &wacc[(s * N + n) * n_w];
          for (std::size_t c = 0; c < n_w; ++c) blanket_w[c] += acc[c];
        }
        for (std::size_t c = 0; c < n_w; ++c) {
          const double f = (full ? log_p : blanket_w[c]) - wd.log_q[c];
          const double a = wd.score[2 * c] * f;
          const double b = wd.score[2 * c + 1] * f;
          out.grad.w[2 * c] += a;
          out.grad.w[2 * c + 1] += b;
          w_sq[2 * c] += a * a;
          w_sq[2 * c + 1] += b * b;
        }
      }
      if (want_z && full) {
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t sn = s * N + n;
          for (std::size_t i = 0; i < nodes; ++i) {
            const double f = log_p - full_logq[sn * nodes + i];
            const double a = full_score[(sn * nodes + i) * 2] * f;
            const double b = full_score[(sn * nodes + i) * 2 + 1] * f;
            const std::size_t idx = 2 * (n * nodes + i);
            out.grad.z[idx] += a;
            out.grad.z[idx + 1] += b;
            z_sq[idx] += a * a;
            z_sq[idx + 1] += b * b;
          }
        }
      }
    }

    finish(out.grad.z, z_sq, out.grad.z_se, S);
    finish(out.grad.w, w_sq, out.grad.w_se, S);
    double mean = 0.0;
    for (double e : out.elbo_draws) mean += e;
    mean /= static_cast<double>(S);
    double var = 0.0;
    for (double e : out.elbo_draws) var += (e - mean) * (e - mean);
    out.grad.elbo = mean;
    out.grad.elbo_se = S > 1 ? std::sqrt(var / static_cast<double>(S - 1) / static_cast<double>(S)) : 0.0;
    return out;
  }

 private:
  static void finish(std::vector<double>& sum, const std::vector<double>& sq,
                     std::vector<double>& se, std::size_t S) {
    const double s = static_cast<double>(S);
    for (std::size_t i = 0; i < sum.size(); ++i) {
      const double mean = sum[i] / s;
      const double var = S > 1 ? std::max(0.0, (sq[i] - s * mean * mean) / (s - 1.0)) : 0.0;
      sum[i] = mean;
      se[i] = std::sqrt(var / s);
    }
  }

  void draw_weights(std::size_t s, WeightDraw& wd) const {
    const std::size_t n_w = w_cache_.size();
    wd.values.resize(vs_.num_weight_layers());
    wd.log_q.assign(n_w, 0.0);
    wd.log_prior.assign(n_w, 0.0);
    wd.score.assign(2 * n_w, 0.0);
    std::size_t c = 0;
    for (std::size_t m = 0; m < vs_.num_weight_layers(); ++m) {
      wd.values[m].resize(vs_.weight_size(m));
      for (std::size_t t = 0; t < vs_.weight_size(m); ++t, ++c) {
        const FactorCache& f = w_cache_[c];
        if (cfg_.weights == WeightMode::mean) {
          wd.values[m][t] = f.shape / f.rate;
          continue;
        }
        RandomStream rng = RandomStream::derive(cfg_.seed, iteration_, s, kTagW, c);
        const double w = gamma_sample(GammaParams{f.shape, f.rate}, rng);
        const double lw = std::log(w);
        wd.values[m][t] = w;
        wd.log_q[c] = f.log_q(w, lw);
        wd.log_prior[c] = weight_prior_.log_q(w, lw);
        f.score(w, lw, &wd.score[2 * c]);
      }
    }
  }

  void init_workspace(Workspace& ws) const {
    const std::size_t L = spec_.num_layers();
    ws.z.resize(L);
    for (std::size_t l = 0; l < L; ++l) ws.z[l].resize(spec_.layers[l].size);
    ws.means.resize(L);
    ws.terms.resize(L);
    for (std::size_t m = 0; m < L; ++m) {
      ws.means[m].resize(spec_.weight_tyings[m].rows);
      ws.terms[m].resize(spec_.weight_tyings[m].rows);
    }
    ws.top_terms.resize(spec_.layers.back().size);
    std::size_t widest = 0;
    for (const LayerSpec& l : spec_.layers) widest = std::max(widest, l.size);
    ws.window.resize(widest);
    const std::size_t nodes = vs_.nodes_per_sample();
    ws.log_z.resize(nodes);
    ws.node_score.resize(2 * nodes);
    ws.node_log_q.resize(nodes);
    ws.node_blanket.resize(nodes);
  }

  // Draws z for sample n, evaluates every conditional term, fills the
  // per-node score / log q / blanket arrays and returns log p(x_n, z_n | W).
  double evaluate_sample(std::size_t s, std::size_t n, const WeightDraw& wd, Workspace& ws,
                         double* wacc) const {
    const std::size_t L = spec_.num_layers();
    const std::size_t nodes = vs_.nodes_per_sample();
    const std::size_t base = n * nodes;

    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t off = vs_.layer_offset(l);
      for (std::size_t k = 0; k < vs_.layer_size(l); ++k) {
        const std::size_t i = off + k;
        const FactorCache& f = z_cache_[base + i];
        RandomStream rng = RandomStream::derive(cfg_.seed, iteration_, s, kTagZ, base + i);
        const double z = gamma_sample(GammaParams{f.shape, f.rate}, rng);
        const double lz = std::log(z);
        ws.z[l][k] = z;
        ws.log_z[i] = lz;
        ws.node_log_q[i] = f.log_q(z, lz);
        f.score(z, lz, &ws.node_score[2 * i]);
      }
    }

    const double* x = &data_.x[n * data_.v];
    const double* lf = &data_.log_factorial[n * data_.v];
    const std::uint8_t* vis = &data_.visible[n * data_.v];
    double total = 0.0;
    for (std::size_t m = 0; m < L; ++m) {
      const TyingMap& t = spec_.weight_tyings[m];
      kt_.tied_matvec(ws.z[m].data(), t.cols, wd.values[m].data(), t.filter_size, t.stride,
                      ws.means[m].data(), t.rows, kRateFloor);
      if (m == 0) {
        kt_.poisson_terms(x, lf, vis, ws.means[0].data(), ws.terms[0].data(), t.rows);
      } else {
        kt_.gamma_terms(ws.z[m - 1].data(), ws.means[m].data(), spec_.layers[m - 1].fixed_shape,
                        lgamma_shape_[m - 1], kParamFloor, ws.terms[m].data(), t.rows);
      }
      total += kt_.sum(ws.terms[m].data(), t.rows);
    }
    const std::size_t top = L - 1;
    const std::size_t top_off = vs_.layer_offset(top);
    for (std::size_t k = 0; k < vs_.layer_size(top); ++k) {
      ws.top_terms[k] = top_prior_.log_q(ws.z[top][k], ws.log_z[top_off + k]);
      total += ws.top_terms[k];
    }

    // Blankets: own conditional + children in the window of column k.
    for (std::size_t l = 0; l < L; ++l) {
      const TyingMap& below = spec_.weight_tyings[l];
      kt_.window_sums(ws.terms[l].data(), below.cols, below.filter_size, below.stride, ws.window.data());
      const double* own = l == top ? ws.top_terms.data() : ws.terms[l + 1].data();
      const std::size_t off = vs_.layer_offset(l);
      for (std::size_t k = 0; k < below.cols; ++k) ws.node_blanket[off + k] = own[k] + ws.window[k];
    }

    if (wacc != nullptr) {
      std::size_t off = 0;
      for (std::size_t m = 0; m < L; ++m) {
        const TyingMap& t = spec_.weight_tyings[m];
        std::fill(wacc + off, wacc + off + t.filter_size, 0.0);
        kt_.tied_accumulate(ws.terms[m].data(), t.cols, t.filter_size, t.stride, wacc + off);
        off += t.filter_size;
      }
    }
    return total;
  }

  const ModelSpec& spec_;
  const VariationalState& vs_;
  const PreparedData& data_;
  const EstimatorConfig& cfg_;
  std::uint64_t iteration_;
  const kernels::KernelTable& kt_;
  std::vector<FactorCache> z_cache_;
  std::vector<FactorCache> w_cache_;
  FactorCache top_prior_{GammaParams{}};
  FactorCache weight_prior_{GammaParams{}};
  std::vector<double> lgamma_shape_;
};

void clip_block(double* g, std::size_t len, double limit) {
  double sq = 0.0;
  for (std::size_t i = 0; i < len; ++i) sq += g[i] * g[i];
  const double norm = std::sqrt(sq);
  if (norm > limit) {
    const double scale = limit / norm;
    for (std::size_t i = 0; i < len; ++i) g[i] *= scale;
  }
}

void rmsprop(std::vector<double>& coords, std::vector<double>& sq, const std::vector<double>& grad,
             const OptimizerSettings& s, double step) {
  for (std::size_t i = 0; i < coords.size(); ++i) {
    sq[i] = s.decay * sq[i] + (1.0 - s.decay) * grad[i] * grad[i];
    const double denom = std::max(std::sqrt(sq[i]), s.denom_floor);
    coords[i] = std::clamp(coords[i] + step * grad[i] / denom, kCoordMin, kCoordMax);
  }
}

std::string locate_nonfinite(const VariationalState& vs, const GradientEstimate& g) {
  std::ostringstream os;
  for (std::size_t i = 0; i < g.z.size(); ++i) {
    if (std::isfinite(g.z[i])) continue;
    const std::size_t node = i / 2;
    const std::size_t n = node / vs.nodes_per_sample();
    const std::size_t within = node % vs.nodes_per_sample();
    std::size_t l = 0;
    while (l + 1 < vs.num_layers() && vs.layer_offset(l + 1) <= within) ++l;
    os << "z block (sample " << n << ", layer " << l + 1 << ")";
    return os.str();
  }
  for (std::size_t i = 0; i < g.w.size(); ++i) {
    if (std::isfinite(g.w[i])) continue;
    const std::size_t c = i / 2;
    std::size_t m = 0;
    while (m + 1 < vs.num_weight_layers() && vs.weight_offset(m + 1) <= c) ++m;
    os << "weight block W" << m;
    return os.str();
  }
  return "ELBO";
}

}  // namespace

VariationalState VariationalState::from_layout(std::size_t n_samples, std::vector<std::size_t> layer_sizes,
                                               std::vector<std::size_t> weight_sizes) {
  VariationalState vs;
  vs.n_samples_ = n_samples;
  vs.layer_size_ = std::move(layer_sizes);
  vs.weight_size_ = std::move(weight_sizes);
  std::size_t off = 0;
  for (std::size_t size : vs.layer_size_) {
    vs.layer_offset_.push_back(off);
    off += size;
  }
  vs.nodes_per_sample_ = off;
  off = 0;
  for (std::size_t size : vs.weight_size_) {
    vs.weight_offset_.push_back(off);
    off += size;
  }
  vs.z_.assign(2 * n_samples * vs.nodes_per_sample_, 0.0);
  vs.w_.assign(2 * off, 0.0);
  return vs;
}

VariationalState::VariationalState(const ModelSpec& spec, std::size_t n_samples) {
  std::vector<std::size_t> layers;
  std::vector<std::size_t> weights;
  for (const LayerSpec& l : spec.layers) layers.push_back(l.size);
  for (const TyingMap& t : spec.weight_tyings) weights.push_back(t.filter_size);
  *this = from_layout(n_samples, std::move(layers), std::move(weights));
  // z factors start at Gamma(1, 1): log shape = log rate = 0.
  const double ls = std::log(spec.weight_prior.shape);
  const double lr = std::log(spec.weight_prior.rate);
  for (std::size_t i = 0; i < w_.size(); i += 2) {
    w_[i] = ls;
    w_[i + 1] = lr;
  }
}

GammaParams VariationalState::constrain(const double* c) noexcept {
  GammaParams p;
  p.shape = std::max(std::exp(c[0]), kParamFloor);
  p.rate = std::max(std::exp(c[1]), kParamFloor);
  return p;
}

void VariationalState::set_z_params(std::size_t n, std::size_t layer, std::size_t k, const GammaParams& p) {
  double* c = &z_[z_index(n, layer, k)];
  c[0] = std::log(p.shape);
  c[1] = std::log(p.rate);
}

void VariationalState::set_w_params(std::size_t m, std::size_t t, const GammaParams& p) {
  double* c = &w_[w_index(m, t)];
  c[0] = std::log(p.shape);
  c[1] = std::log(p.rate);
}

VariationalState VariationalState::with_samples(std::size_t n_samples) const {
  VariationalState out = from_layout(n_samples, layer_size_, weight_size_);
  out.w_ = w_;
  if (n_samples_ == 0) return out;
  const std::size_t per = 2 * nodes_per_sample_;
  std::vector<double> avg(per, 0.0);
  for (std::size_t n = 0; n < n_samples_; ++n)
    for (std::size_t i = 0; i < per; ++i) avg[i] += z_[n * per + i];
  for (double& a : avg) a /= static_cast<double>(n_samples_);
  for (std::size_t n = 0; n < n_samples; ++n) std::copy(avg.begin(), avg.end(), out.z_.begin() + n * per);
  return out;
}

std::vector<TiedWeightMatrix> VariationalState::weight_means(const ModelSpec& spec) const {
  std::vector<TiedWeightMatrix> out;
  for (std::size_t m = 0; m < num_weight_layers(); ++m) {
    std::vector<double> free(weight_size(m));
    for (std::size_t t = 0; t < free.size(); ++t) free[t] = w_params(m, t).mean();
    out.emplace_back(spec.weight_tyings[m], std::move(free));
  }
  return out;
}

bool VariationalState::conforms_to(const ModelSpec& spec) const noexcept {
  if (layer_size_.size() != spec.num_layers() || weight_size_.size() != spec.weight_tyings.size()) return false;
  for (std::size_t l = 0; l < layer_size_.size(); ++l)
    if (layer_size_[l] != spec.layers[l].size) return false;
  for (std::size_t m = 0; m < weight_size_.size(); ++m)
    if (weight_size_[m] != spec.weight_tyings[m].filter_size) return false;
  return true;
}

GradientEstimate estimate_gradients(const ModelSpec& spec, const VariationalState& vstate,
                                    const CountMatrix& data, const EstimatorConfig& config,
                                    const GradientRequest& request) {
  const PreparedData prepared(data, false);
  Engine engine(spec, vstate, prepared, config, request.iteration);
  return engine.run(request.z, request.w).grad;
}

std::vector<double> elbo_samples(const ModelSpec& spec, const VariationalState& vstate,
                                 const CountMatrix& data, const EstimatorConfig& config) {
  const PreparedData prepared(data, false);
  Engine engine(spec, vstate, prepared, config, 0);
  return engine.run(false, false).elbo_draws;
}

double elbo_estimate(const ModelSpec& spec, const VariationalState& vstate, const CountMatrix& data,
                     const EstimatorConfig& config) {
  const auto draws = elbo_samples(spec, vstate, data, config);
  return std::accumulate(draws.begin(), draws.end(), 0.0) / static_cast<double>(draws.size());
}

std::pair<double, double> grad_z(const ModelSpec& spec, const VariationalState& vstate,
                                 const CountMatrix& data, std::size_t n, std::size_t layer,
                                 std::size_t k, const EstimatorConfig& config) {
  if (n >= vstate.n_samples() || layer >= vstate.num_layers() || k >= vstate.layer_size(layer))
    throw std::out_of_range("grad_z: index out of range");
  const GradientEstimate g = estimate_gradients(spec, vstate, data, config, {true, false, 0});
  const std::size_t i = vstate.z_index(n, layer, k);
  if (!std::isfinite(g.z[i]) || !std::isfinite(g.z[i + 1])) throw NumericalError("grad_z: non-finite gradient");
  return {g.z[i], g.z[i + 1]};
}

std::pair<double, double> grad_w(const ModelSpec& spec, const VariationalState& vstate,
                                 const CountMatrix& data, std::size_t m, std::size_t t,
                                 const EstimatorConfig& config) {
  if (m >= vstate.num_weight_layers() || t >= vstate.weight_size(m))
    throw std::out_of_range("grad_w: index out of range");
  if (config.weights != WeightMode::sample) throw std::invalid_argument("grad_w needs WeightMode::sample");
  const GradientEstimate g = estimate_gradients(spec, vstate, data, config, {false, true, 0});
  const std::size_t i = vstate.w_index(m, t);
  if (!std::isfinite(g.w[i]) || !std::isfinite(g.w[i + 1])) throw NumericalError("grad_w: non-finite gradient");
  return {g.w[i], g.w[i + 1]};
}

TrainResult train_from(const ModelSpec& spec, const CountMatrix& data, const EstimatorConfig& config,
                       VariationalState state, OptimizerState optimizer, std::size_t iterations,
                       bool update_weights) {
  const auto start = std::chrono::steady_clock::now();
  if (optimizer.z_sq.size() != state.z_coords().size()) optimizer.z_sq.assign(state.z_coords().size(), 0.0);
  if (optimizer.w_sq.size() != state.w_coords().size()) optimizer.w_sq.assign(state.w_coords().size(), 0.0);
  update_weights = update_weights && config.weights == WeightMode::sample;

  const PreparedData prepared(data, false);
  TrainReport report;
  report.elbo_trace.reserve(iterations);
  const std::size_t block = 2 * state.nodes_per_sample();

  for (std::size_t it = 0; it < iterations; ++it) {
    GradientEstimate g;
    try {
      Engine engine(spec, state, prepared, config, optimizer.iteration);
      g = engine.run(true, update_weights).grad;
    } catch (const NumericalError& e) {
      std::ostringstream os;
      os << "diverged at iteration " << optimizer.iteration << ": " << e.what();
      throw NumericalError(os.str());
    }
    const bool finite_grad = std::all_of(g.z.begin(), g.z.end(), [](double v) { return std::isfinite(v); }) &&
                             std::all_of(g.w.begin(), g.w.end(), [](double v) { return std::isfinite(v); });
    if (!finite_grad) {
      std::ostringstream os;
      os << "diverged at iteration " << optimizer.iteration << ": non-finite gradient in "
         << locate_nonfinite(state, g);
      throw NumericalError(os.str());
    }
    if (config.clip_norm) {
      for (std::size_t n = 0; n < state.n_samples(); ++n) clip_block(&g.z[n * block], block, *config.clip_norm);
      for (std::size_t m = 0; m < state.num_weight_layers() && update_weights; ++m)
        clip_block(&g.w[2 * state.weight_offset(m)], 2 * state.weight_size(m), *config.clip_norm);
    }
    const OptimizerSettings& s = optimizer.settings;
    double step = s.step_size;
    if (s.step_halflife > 0.0)
      step /= std::sqrt(1.0 + static_cast<double>(optimizer.iteration) / s.step_halflife);
    rmsprop(state.z_coords(), optimizer.z_sq, g.z, s, step);
    if (update_weights) rmsprop(state.w_coords(), optimizer.w_sq, g.w, s, step);
    report.elbo_trace.push_back(g.elbo);
    ++optimizer.iteration;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return TrainResult{std::move(state), std::move(optimizer), std::move(report)};
}

TrainResult train(const ModelSpec& spec, const CountMatrix& data, const EstimatorConfig& config,
                  const TrainOptions& options) {
  VariationalState state(spec, data.n_samples());
  OptimizerState opt;
  opt.settings = options.optimizer;
  return train_from(spec, data, config, std::move(state), std::move(opt), options.iterations,
                    options.update_weights);
}

VariationalState fit_test(const ModelSpec& spec, const VariationalState& trained, const CountMatrix& test,
                          const EstimatorConfig& config, std::size_t iterations,
                          const OptimizerSettings& optimizer) {
  EstimatorConfig cfg = config;
  cfg.seed = phase_seed(config.seed, kPhaseTest);
  OptimizerState opt;
  opt.settings = optimizer;
  return train_from(spec, test, cfg, trained.with_samples(test.n_samples()), std::move(opt), iterations, false)
      .state;
}

HeldoutEstimate heldout_loglik_detail(const ModelSpec& spec, const VariationalState& fitted,
                                      const CountMatrix& test, std::size_t eval_samples,
                                      std::uint64_t seed, WeightMode weights) {
  if (!fitted.conforms_to(spec) || fitted.n_samples() != test.n_samples())
    throw std::invalid_argument("heldout_loglik: state does not match model/data");
  if (eval_samples == 0) throw std::invalid_argument("heldout_loglik: eval_samples must be positive");
  const std::size_t hidden = test.hidden_count();
  if (hidden == 0) throw DataError("heldout_loglik: nothing to evaluate (no hidden cells)");

  const PreparedData prepared(test, true);
  const kernels::KernelTable& kt = kernels::active();
  const TyingMap& t0 = spec.weight_tyings[0];
  const std::uint64_t s_seed = phase_seed(seed, kPhaseEval);
  std::vector<double> w0(t0.filter_size);
  std::vector<double> z1(t0.cols);
  std::vector<double> rates(t0.rows);
  std::vector<double> terms(t0.rows);
  std::vector<double> draws(eval_samples, 0.0);

  for (std::size_t s = 0; s < eval_samples; ++s) {
    for (std::size_t t = 0; t < t0.filter_size; ++t) {
      const GammaParams p = fitted.w_params(0, t);
      if (weights == WeightMode::mean) {
        w0[t] = p.mean();
      } else {
        RandomStream rng = RandomStream::derive(s_seed, 0, s, kTagW, t);
        w0[t] = gamma_sample(p, rng);
      }
    }
    double total = 0.0;
    for (std::size_t n = 0; n < test.n_samples(); ++n) {
      for (std::size_t k = 0; k < t0.cols; ++k) {
        RandomStream rng = RandomStream::derive(s_seed, 1, s, kTagZ, n * t0.cols + k);
        z1[k] = gamma_sample(fitted.z_params(n, 0, k), rng);
      }
      kt.tied_matvec(z1.data(), t0.cols, w0.data(), t0.filter_size, t0.stride, rates.data(), t0.rows,
                     kRateFloor);
      const std::size_t off = n * prepared.v;
      kt.poisson_terms(&prepared.x[off], &prepared.log_factorial[off], &prepared.visible[off], rates.data(),
                       terms.data(), t0.rows);
      total += kt.sum(terms.data(), t0.rows);
    }
    if (!std::isfinite(total)) throw NumericalError("heldout_loglik: non-finite draw");
    draws[s] = total;
  }
  HeldoutEstimate out;
  out.hidden_cells = hidden;
  const double S = static_cast<double>(eval_samples);
  out.mean = std::accumulate(draws.begin(), draws.end(), 0.0) / S;
  double var = 0.0;
  for (double d : draws) var += (d - out.mean) * (d - out.mean);
  out.se = eval_samples > 1 ? std::sqrt(var / (S - 1.0) / S) : 0.0;
  return out;
}

double heldout_loglik(const ModelSpec& spec, const VariationalState& fitted, const CountMatrix& test,
                      std::size_t eval_samples, std::uint64_t seed, WeightMode weights) {
  return heldout_loglik_detail(spec, fitted, test, eval_samples, seed, weights).mean;
}

}  // namespace cdef
