#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "cdef/data.hpp"
#include "cdef/graph.hpp"

namespace cdef {

/// Mean-field gamma posterior over every latent z[n][layer][k] and every free
/// weight parameter. Coordinates are stored unconstrained as
/// (log shape, log rate); constrained values are exp() floored at kParamFloor.
class VariationalState {
 public:
  VariationalState() = default;
  /// z factors at Gamma(1, 1), weight factors at the weight prior.
  VariationalState(const ModelSpec& spec, std::size_t n_samples);
  /// Zero-filled coordinates for the given layer and weight sizes.
  static VariationalState from_layout(std::size_t n_samples, std::vector<std::size_t> layer_sizes,
                                      std::vector<std::size_t> weight_sizes);

  std::size_t n_samples() const noexcept { return n_samples_; }
  std::size_t nodes_per_sample() const noexcept { return nodes_per_sample_; }
  std::size_t num_layers() const noexcept { return layer_offset_.size(); }
  std::size_t layer_offset(std::size_t layer) const noexcept { return layer_offset_[layer]; }
  std::size_t weight_offset(std::size_t m) const noexcept { return weight_offset_[m]; }
  std::size_t layer_size(std::size_t layer) const noexcept { return layer_size_[layer]; }
  std::size_t weight_size(std::size_t m) const noexcept { return weight_size_[m]; }
  std::size_t num_weight_layers() const noexcept { return weight_offset_.size(); }

  /// Index of the (log shape) coordinate; (log rate) follows it.
  std::size_t z_index(std::size_t n, std::size_t layer, std::size_t k) const noexcept {
    return 2 * (n * nodes_per_sample_ + layer_offset_[layer] + k);
  }
  std::size_t w_index(std::size_t m, std::size_t t) const noexcept {
    return 2 * (weight_offset_[m] + t);
  }

  GammaParams z_params(std::size_t n, std::size_t layer, std::size_t k) const noexcept {
    return constrain(&z_[z_index(n, layer, k)]);
  }
  GammaParams w_params(std::size_t m, std::size_t t) const noexcept {
    return constrain(&w_[w_index(m, t)]);
  }
  void set_z_params(std::size_t n, std::size_t layer, std::size_t k, const GammaParams& p);
  void set_w_params(std::size_t m, std::size_t t, const GammaParams& p);

  std::vector<double>& z_coords() noexcept { return z_; }
  const std::vector<double>& z_coords() const noexcept { return z_; }
  std::vector<double>& w_coords() noexcept { return w_; }
  const std::vector<double>& w_coords() const noexcept { return w_; }

  /// Same weights; every new sample's z factors start at the per-node average
  /// of this state's coordinates (Gamma(1, 1) when this state has no samples).
  VariationalState with_samples(std::size_t n_samples) const;

  /// Mean of every weight factor, as tied matrices.
  std::vector<TiedWeightMatrix> weight_means(const ModelSpec& spec) const;

  bool conforms_to(const ModelSpec& spec) const noexcept;

  friend bool operator==(const VariationalState&, const VariationalState&) = default;

 private:
  static GammaParams constrain(const double* c) noexcept;

  std::size_t n_samples_ = 0;
  std::size_t nodes_per_sample_ = 0;
  std::vector<std::size_t> layer_offset_;
  std::vector<std::size_t> layer_size_;
  std::vector<std::size_t> weight_offset_;
  std::vector<std::size_t> weight_size_;
  std::vector<double> z_;
  std::vector<double> w_;
};

struct OptimizerSettings {
  double step_size = 0.1;
  double decay = 0.9;
  double denom_floor = 1e-16;
  /// Step multiplier (1 + t / step_halflife)^(-1/2); 0 keeps the step constant.
  double step_halflife = 0.0;

  friend bool operator==(const OptimizerSettings&, const OptimizerSettings&) = default;
};

/// RMSProp running mean of squared gradients, per unconstrained coordinate.
struct OptimizerState {
  OptimizerSettings settings;
  std::vector<double> z_sq;
  std::vector<double> w_sq;
  std::uint64_t iteration = 0;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

enum class BlanketMode {
  markov,     // Rao-Blackwellised: each coordinate sees its Markov blanket only
  full_joint  // each coordinate sees the whole log joint (test reference)
};

enum class WeightMode {
  sample,  // W drawn from q(W) on every Monte Carlo draw
  mean     // W fixed at the mean of q(W); weight terms leave the ELBO
};

struct EstimatorConfig {
  std::size_t mc_samples = 8;
  std::uint64_t seed = 0;
  std::optional<double> clip_norm = 10.0;
  std::size_t threads = 1;
  BlanketMode blanket = BlanketMode::markov;
  WeightMode weights = WeightMode::sample;
};

/// All score-function gradients of one estimator call, in unconstrained
/// coordinates, with Monte Carlo standard errors and the ELBO estimate from
/// the same draws.
struct GradientEstimate {
  std::vector<double> z;
  std::vector<double> w;
  std::vector<double> z_se;
  std::vector<double> w_se;
  double elbo = 0.0;
  double elbo_se = 0.0;
};

struct GradientRequest {
  bool z = true;
  bool w = true;
  /// Mixed into every stream key; the optimiser passes its iteration count.
  std::uint64_t iteration = 0;
};

GradientEstimate estimate_gradients(const ModelSpec& spec, const VariationalState& vstate,
                                    const CountMatrix& data, const EstimatorConfig& config,
                                    const GradientRequest& request = {});

/// Per-draw ELBO values log p(x, z, W) - log q(z, W) (W terms omitted in
/// WeightMode::mean). Deterministic in config.seed.
std::vector<double> elbo_samples(const ModelSpec& spec, const VariationalState& vstate,
                                 const CountMatrix& data, const EstimatorConfig& config);

/// Monte Carlo ELBO. Throws NumericalError naming the first non-finite draw.
double elbo_estimate(const ModelSpec& spec, const VariationalState& vstate,
                     const CountMatrix& data, const EstimatorConfig& config);

std::pair<double, double> grad_z(const ModelSpec& spec, const VariationalState& vstate,
                                 const CountMatrix& data, std::size_t n, std::size_t layer,
                                 std::size_t k, const EstimatorConfig& config);
std::pair<double, double> grad_w(const ModelSpec& spec, const VariationalState& vstate,
                                 const CountMatrix& data, std::size_t m, std::size_t t,
                                 const EstimatorConfig& config);

struct TrainReport {
  std::vector<double> elbo_trace;
  double seconds = 0.0;
};

struct TrainResult {
  VariationalState state;
  OptimizerState optimizer;
  TrainReport report;
};

struct TrainOptions {
  std::size_t iterations = 3000;
  bool update_weights = true;
  OptimizerSettings optimizer;
};

/// Adaptive gradient ascent on every z and weight factor.
TrainResult train(const ModelSpec& spec, const CountMatrix& data, const EstimatorConfig& config,
                  const TrainOptions& options);

/// Continue from an explicit state (initial or checkpointed). Iteration
/// numbering continues from optimizer.iteration, so a resumed run reproduces
/// an uninterrupted one bit for bit.
TrainResult train_from(const ModelSpec& spec, const CountMatrix& data,
                       const EstimatorConfig& config, VariationalState state,
                       OptimizerState optimizer, std::size_t iterations, bool update_weights);

/// Fits z factors for `test` with the weight factors of `trained` frozen.
/// Only visible cells condition the fit.
VariationalState fit_test(const ModelSpec& spec, const VariationalState& trained,
                          const CountMatrix& test, const EstimatorConfig& config,
                          std::size_t iterations, const OptimizerSettings& optimizer = {});

struct HeldoutEstimate {
  double mean = 0.0;
  double se = 0.0;
  std::size_t hidden_cells = 0;
};

/// Monte Carlo average over eval_samples draws of the summed log Poisson
/// likelihood of the hidden cells: E_q[log p(x_hidden | z1, W0)].
HeldoutEstimate heldout_loglik_detail(const ModelSpec& spec, const VariationalState& fitted,
                                      const CountMatrix& test, std::size_t eval_samples,
                                      std::uint64_t seed, WeightMode weights = WeightMode::sample);
double heldout_loglik(const ModelSpec& spec, const VariationalState& fitted,
                      const CountMatrix& test, std::size_t eval_samples, std::uint64_t seed,
                      WeightMode weights = WeightMode::sample);

struct Checkpoint {
  VariationalState state;
  OptimizerState optimizer;
  std::uint64_t seed = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Binary: "CDEFCKPT", u32 version, then the state, optimizer and seed.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cdef
