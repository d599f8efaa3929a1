#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdef/expfam.hpp"

namespace cdef {

/// Floor on linked means and Poisson rates (z^T w can be exactly zero).
inline constexpr double kRateFloor = 1e-8;

/// Convolutional tying pattern of a rows x cols weight matrix.
///
/// Column j is a copy of a length-filter_size filter placed at row j*stride;
/// cell (i, j) is nonzero iff j*stride <= i < j*stride + filter_size and then
/// holds free parameter i - j*stride. A dense (untied per column) layer is
/// not representable; the fully connected special case is filter_size = rows,
/// which gives a single column.
struct TyingMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t filter_size = 0;
  std::size_t stride = 0;

  bool nonzero(std::size_t i, std::size_t j) const noexcept {
    const std::size_t start = j * stride;
    return j < cols && i >= start && i < start + filter_size;
  }
  /// Free-parameter index of a nonzero cell; throws std::out_of_range otherwise.
  std::size_t param_index(std::size_t i, std::size_t j) const;

  /// First row of column j's window.
  std::size_t window_start(std::size_t j) const noexcept { return j * stride; }

  /// Columns whose window covers row i, as a half-open range [first, last).
  std::pair<std::size_t, std::size_t> columns_of_row(std::size_t i) const noexcept;

  std::size_t nonzero_count() const noexcept { return cols * filter_size; }

  friend bool operator==(const TyingMap&, const TyingMap&) = default;
};

/// Throws ConfigError naming `layer` when filter_size > rows or the stride
/// does not divide rows - filter_size. No zero padding is ever applied.
TyingMap build_tying(std::size_t rows, std::size_t filter_size, std::size_t stride,
                     std::string_view layer = "weight layer");

class TiedWeightMatrix {
 public:
  TiedWeightMatrix() = default;
  TiedWeightMatrix(TyingMap tying, std::vector<double> free_params);

  const TyingMap& tying() const noexcept { return tying_; }
  std::span<const double> free_params() const noexcept { return free_; }
  std::span<double> free_params() noexcept { return free_; }

  double at(std::size_t i, std::size_t j) const noexcept {
    return tying_.nonzero(i, j) ? free_[i - j * tying_.stride] : 0.0;
  }

  /// Dense row-major rows x cols copy.
  std::vector<double> materialize() const;

  /// Inner product of row i with an upper-layer vector of length cols.
  double row_dot(std::size_t i, std::span<const double> upper) const noexcept;

 private:
  TyingMap tying_;
  std::vector<double> free_;
};

enum class LatentFamily { gamma };

struct LayerSpec {
  std::size_t size = 0;
  LatentFamily family = LatentFamily::gamma;
  double fixed_shape = 0.3;
};

/// Architecture of a (convolutional) sparse gamma DEF with Poisson observations.
///
/// layers[0] is the layer adjacent to the data, layers.back() the top layer.
/// weight_tyings[0] is W0 (obs_dim x layers[0].size); weight_tyings[m] for
/// m >= 1 links layers[m-1] (rows) to layers[m] (cols).
struct ModelSpec {
  std::size_t obs_dim = 0;
  std::vector<LayerSpec> layers;
  std::vector<TyingMap> weight_tyings;
  GammaParams top_prior{0.1, 0.1};
  GammaParams weight_prior{0.1, 0.3};
  bool soft_gamma = true;

  std::size_t num_layers() const noexcept { return layers.size(); }
  std::size_t top() const noexcept { return layers.size() - 1; }

  /// Throws ConfigError on any broken shape law.
  void validate() const;

  /// "V=27489 -> K1=51 -> K2=17".
  std::string describe_chain() const;
};

/// Geometry of one weight layer: filter/stride of the weights below a latent
/// layer plus that layer's link shape. The layer size follows from the law.
struct LayerGeometry {
  std::size_t filter_size = 0;
  std::size_t stride = 0;
  double fixed_shape = 0.3;
};

ModelSpec make_model_spec(std::size_t obs_dim, std::span<const LayerGeometry> geometry,
                          GammaParams top_prior, GammaParams weight_prior,
                          bool soft_gamma = true);

/// Reads the JSON model configuration file; unknown keys are errors.
ModelSpec load_model_spec(const std::filesystem::path& path);
ModelSpec parse_model_spec(std::string_view json_text);
std::string model_spec_to_json(const ModelSpec& spec);

/// One z vector per layer, bottom to top.
struct LatentState {
  std::vector<std::vector<double>> z;
};

/// One sample of observed counts with its visibility mask.
struct ObservedRow {
  std::span<const std::uint32_t> counts;
  std::span<const std::uint8_t> visible;
};

GammaParams linked_params(double inner_product, double fixed_shape);
GammaParams linked_params(std::span<const double> z_upper, std::span<const double> w_row,
                          double fixed_shape);
/// Conditional of child row i of `w` given the upper layer.
GammaParams linked_params(std::span<const double> z_upper, const TiedWeightMatrix& w,
                          std::size_t row, double fixed_shape);

PoissonParams obs_rate(std::span<const double> z1, std::span<const double> w0_row);
PoissonParams obs_rate(std::span<const double> z1, const TiedWeightMatrix& w0, std::size_t row);

/// Markov-blanket log probability of z[layer][k]: own conditional (or the top
/// prior) plus the children in the window of column k of the weights below.
/// Hidden observations contribute nothing.
double blanket_logp_z(const ModelSpec& spec, const LatentState& state,
                      std::span<const TiedWeightMatrix> weights, const ObservedRow& x,
                      std::size_t layer, std::size_t k);

/// Markov-blanket log probability of free parameter t of weight layer m,
/// summed over all samples.
double blanket_logp_w(const ModelSpec& spec, std::span<const LatentState> states,
                      std::span<const TiedWeightMatrix> weights,
                      std::span<const ObservedRow> data, std::size_t m, std::size_t t);

/// Full log joint of one sample plus every weight prior term (counted once).
double log_joint(const ModelSpec& spec, const LatentState& state,
                 std::span<const TiedWeightMatrix> weights, const ObservedRow& x);

}  // namespace cdef
