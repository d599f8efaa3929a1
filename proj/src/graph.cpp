#include "cdef/graph.hpp"

#include <algorithm>
#include <atomic>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace cdef {

namespace {

void warn_rate_floor_once() {
  static std::atomic<bool> warned{false};
  if (!warned.exchange(true)) {
    std::cerr << "cdef: zero inner product in a link function; rate floored at " << kRateFloor
              << " (reported once per run)\n";
  }
}

double floored_inner(double v) {
  if (v > kRateFloor) return v;
  warn_rate_floor_once();
  return kRateFloor;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("inner product of mismatched vectors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Log density of the latent child in `row` of weights[m] (m >= 1) or of the
// observation in `row` (m == 0). Hidden observations return 0.
double child_logp(const ModelSpec& spec, const LatentState& state,
                  std::span<const TiedWeightMatrix> weights, const ObservedRow& x,
                  std::size_t m, std::size_t row) {
  const TiedWeightMatrix& w = weights[m];
  const std::vector<double>& upper = state.z[m];
  if (m == 0) {
    if (!x.visible[row]) return 0.0;
    return poisson_log_pmf(x.counts[row], obs_rate(upper, w, row));
  }
  const double shape = spec.layers[m - 1].fixed_shape;
  return gamma_log_density(state.z[m - 1][row], linked_params(upper, w, row, shape));
}

double own_logp(const ModelSpec& spec, const LatentState& state,
                std::span<const TiedWeightMatrix> weights, std::size_t layer, std::size_t k) {
  const double z = state.z[layer][k];
  if (layer == spec.top()) return gamma_log_density(z, spec.top_prior);
  return gamma_log_density(
      z, linked_params(state.z[layer + 1], weights[layer + 1], k, spec.layers[layer].fixed_shape));
}

}  // namespace

std::size_t TyingMap::param_index(std::size_t i, std::size_t j) const {
  if (!nonzero(i, j)) throw std::out_of_range("tying map: cell is structurally zero");
  return i - j * stride;
}

std::pair<std::size_t, std::size_t> TyingMap::columns_of_row(std::size_t i) const noexcept {
  // j*stride <= i  and  i < j*stride + filter_size
  const std::size_t last = std::min(cols, i / stride + 1);
  const std::size_t first = i + 1 > filter_size ? (i + 1 - filter_size + stride - 1) / stride : 0;
  return {std::min(first, last), last};
}

TyingMap build_tying(std::size_t rows, std::size_t filter_size, std::size_t stride,
                     std::string_view layer) {
  std::ostringstream os;
  if (rows == 0 || filter_size == 0 || stride == 0) {
    os << layer << ": rows, filter size and stride must be positive (rows=" << rows
       << ", filter=" << filter_size << ", stride=" << stride << ")";
    throw ConfigError(os.str());
  }
  if (filter_size > rows) {
    os << layer << ": filter size " << filter_size << " exceeds " << rows << " rows";
    throw ConfigError(os.str());
  }
  if ((rows - filter_size) % stride != 0) {
    os << layer << ": stride " << stride << " does not divide rows - filter (" << rows << " - "
       << filter_size << ")";
    throw ConfigError(os.str());
  }
  return TyingMap{rows, (rows - filter_size) / stride + 1, filter_size, stride};
}

TiedWeightMatrix::TiedWeightMatrix(TyingMap tying, std::vector<double> free_params)
    : tying_(tying), free_(std::move(free_params)) {
  if (free_.size() != tying_.filter_size)
    throw std::invalid_argument("tied weight matrix needs exactly filter_size free parameters");
}

std::vector<double> TiedWeightMatrix::materialize() const {
  std::vector<double> dense(tying_.rows * tying_.cols, 0.0);
  for (std::size_t j = 0; j < tying_.cols; ++j) {
    const std::size_t start = tying_.window_start(j);
    for (std::size_t f = 0; f < tying_.filter_size; ++f)
      dense[(start + f) * tying_.cols + j] = free_[f];
  }
  return dense;
}

double TiedWeightMatrix::row_dot(std::size_t i, std::span<const double> upper) const noexcept {
  const auto [first, last] = tying_.columns_of_row(i);
  double acc = 0.0;
  for (std::size_t j = first; j < last; ++j) acc += upper[j] * free_[i - j * tying_.stride];
  return acc;
}

void ModelSpec::validate() const {
  if (obs_dim == 0) throw ConfigError("model: obs_dim must be positive");
  if (layers.empty()) throw ConfigError("model: at least one latent layer is required");
  if (weight_tyings.size() != layers.size())
    throw ConfigError("model: need one weight tying per latent layer");
  for (std::size_t m = 0; m < layers.size(); ++m) {
    const std::size_t rows = m == 0 ? obs_dim : layers[m - 1].size;
    const TyingMap& t = weight_tyings[m];
    std::ostringstream name;
    name << "W" << m;
    const TyingMap expect = build_tying(rows, t.filter_size, t.stride, name.str());
    if (!(expect == t) || t.cols != layers[m].size) {
      std::ostringstream os;
      os << name.str() << ": tying " << t.rows << "x" << t.cols << " does not match layer sizes "
         << rows << "x" << layers[m].size;
      throw ConfigError(os.str());
    }
    const double a = layers[m].fixed_shape;
    if (!(a > 0.0) || !std::isfinite(a)) throw ConfigError(name.str() + ": fixed_shape must be positive");
    if (soft_gamma && a > 1.0) {
      std::ostringstream os;
      os << "layer " << m + 1 << ": soft-gamma mode requires fixed_shape <= 1 (got " << a << ")";
      throw ConfigError(os.str());
    }
  }
}

std::string ModelSpec::describe_chain() const {
  std::ostringstream os;
  os << "V=" << obs_dim;
  for (std::size_t m = 0; m < layers.size(); ++m) os << " -> K" << m + 1 << "=" << layers[m].size;
  return os.str();
}

ModelSpec make_model_spec(std::size_t obs_dim, std::span<const LayerGeometry> geometry,
                          GammaParams top_prior, GammaParams weight_prior, bool soft_gamma) {
  ModelSpec spec;
  spec.obs_dim = obs_dim;
  spec.top_prior = top_prior;
  spec.weight_prior = weight_prior;
  spec.soft_gamma = soft_gamma;
  std::size_t rows = obs_dim;
  for (std::size_t m = 0; m < geometry.size(); ++m) {
    std::ostringstream name;
    name << "W" << m;
    const TyingMap t = build_tying(rows, geometry[m].filter_size, geometry[m].stride, name.str());
    spec.weight_tyings.push_back(t);
    spec.layers.push_back(LayerSpec{t.cols, LatentFamily::gamma, geometry[m].fixed_shape});
    rows = t.cols;
  }
  spec.validate();
  return spec;
}

GammaParams linked_params(double inner_product, double fixed_shape) {
  return GammaParams(fixed_shape, fixed_shape / floored_inner(inner_product));
}

GammaParams linked_params(std::span<const double> z_upper, std::span<const double> w_row,
                          double fixed_shape) {
  return linked_params(dot(z_upper, w_row), fixed_shape);
}

GammaParams linked_params(std::span<const double> z_upper, const TiedWeightMatrix& w,
                          std::size_t row, double fixed_shape) {
  return linked_params(w.row_dot(row, z_upper), fixed_shape);
}

PoissonParams obs_rate(std::span<const double> z1, std::span<const double> w0_row) {
  return PoissonParams(floored_inner(dot(z1, w0_row)));
}

PoissonParams obs_rate(std::span<const double> z1, const TiedWeightMatrix& w0, std::size_t row) {
  return PoissonParams(floored_inner(w0.row_dot(row, z1)));
}

double blanket_logp_z(const ModelSpec& spec, const LatentState& state,
                      std::span<const TiedWeightMatrix> weights, const ObservedRow& x,
                      std::size_t layer, std::size_t k) {
  if (layer >= spec.num_layers() || k >= spec.layers[layer].size)
    throw std::out_of_range("blanket_logp_z: node index out of range");
  double total = own_logp(spec, state, weights, layer, k);
  const TyingMap& below = weights[layer].tying();
  const std::size_t start = below.window_start(k);
  for (std::size_t r = start; r < start + below.filter_size; ++r)
    total += child_logp(spec, state, weights, x, layer, r);
  return total;
}

double blanket_logp_w(const ModelSpec& spec, std::span<const LatentState> states,
                      std::span<const TiedWeightMatrix> weights,
                      std::span<const ObservedRow> data, std::size_t m, std::size_t t) {
  if (m >= weights.size() || t >= weights[m].tying().filter_size)
    throw std::out_of_range("blanket_logp_w: weight index out of range");
  if (states.size() != data.size()) throw std::invalid_argument("blanket_logp_w: sample count mismatch");
  const TyingMap& tie = weights[m].tying();
  double total = gamma_log_density(weights[m].free_params()[t], spec.weight_prior);
  for (std::size_t n = 0; n < states.size(); ++n) {
    for (std::size_t j = 0; j < tie.cols; ++j)
      total += child_logp(spec, states[n], weights, data[n], m, tie.window_start(j) + t);
  }
  return total;
}

double log_joint(const ModelSpec& spec, const LatentState& state,
                 std::span<const TiedWeightMatrix> weights, const ObservedRow& x) {
  double total = 0.0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l)
    for (std::size_t k = 0; k < spec.layers[l].size; ++k) total += own_logp(spec, state, weights, l, k);
  for (std::size_t i = 0; i < spec.obs_dim; ++i) total += child_logp(spec, state, weights, x, 0, i);
  for (const TiedWeightMatrix& w : weights)
    for (double v : w.free_params()) total += gamma_log_density(v, spec.weight_prior);
  return total;
}

}  // namespace cdef
