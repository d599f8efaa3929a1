#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cdef/data.hpp"
#include "cdef/graph.hpp"
#include "cdef/inference.hpp"

namespace cdef {

enum class NamedModel {
  HP,
  CDEF_1_51,
  CDEF_1_51_2_17,
  CDEF_1_51_2_25,
  CDEF_1_51_2_49,
  CDEF_1_17,
  CDEF_1_25,
  CDEF_1_49,
};

std::string model_name(NamedModel m);
NamedModel parse_model_name(const std::string& name);
const std::vector<NamedModel>& all_named_models();

/// Hyperparameters shared by every named model.
struct PriorDefaults {
  double fixed_shape = 0.3;
  GammaParams top_prior{0.1, 0.1};
  GammaParams weight_prior{0.1, 0.3};
  bool soft_gamma = true;
};

/// Expands a named CDEF for a day-major layout. Filters are measured in
/// weeks of data (7 days x n_locations cells): CDEF_1_51 uses one-week
/// filters with one-week stride, CDEF_1_17/25/49 three-week filters with
/// strides of 3, 2 and 1 weeks, and the 2-layer models add a filter-3 layer
/// with stride 3, 2 or 1. Throws ConfigError for HP.
ModelSpec expand_named_model(NamedModel m, const Layout& layout, const PriorDefaults& priors = {});

struct ModelChoice {
  std::optional<NamedModel> named;
  std::filesystem::path custom;  // used when named is empty

  std::string label() const;
  bool is_hp() const { return named && *named == NamedModel::HP; }
};

/// Homogeneous Poisson baseline: one maximum-likelihood rate per location.
struct HpRates {
  Layout layout;
  std::vector<double> per_location;
  std::size_t empty_locations = 0;  // locations with no visible cell (floored)

  double rate_at(std::size_t flat) const { return per_location[flat % layout.n_locations]; }
};

HpRates hp_fit(const CountMatrix& train);

/// Sum of log Poisson(x; rate of its location) over the hidden cells.
double hp_heldout_loglik(const HpRates& rates, const CountMatrix& test);

struct InferenceSettings {
  EstimatorConfig estimator;  // seed and threads are set per fold
  OptimizerSettings optimizer;
  std::size_t train_iterations = 3000;
  std::size_t test_iterations = 1000;
  std::size_t eval_samples = 512;
  WeightMode test_weights = WeightMode::sample;
};

struct CsvSource {
  std::filesystem::path path;
  CsvSchema schema;
};
struct CacheSource {
  std::filesystem::path path;
};
using DataSource = std::variant<SynthSpec, CsvSource, CacheSource>;

struct ExperimentConfig {
  ModelChoice model;
  MaskSpec mask;
  DataSource data = SynthSpec{};
  InferenceSettings inference;
  PriorDefaults priors;
  std::vector<std::size_t> folds;  // test indices; empty = every sample
  std::vector<NamedModel> sweep_models;      // sweep only
  std::vector<std::size_t> reveal_grid;      // sweep only; empty = default grid
  std::filesystem::path out = "out";
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

CountMatrix load_data(const DataSource& source);
ModelSpec resolve_model(const ModelChoice& choice, const Layout& layout, const PriorDefaults& priors);

struct EvalRow {
  std::string model;
  std::size_t test_index = 0;
  int test_label = 0;
  std::size_t reveal_count = 0;
  double heldout_loglik = 0.0;
  double heldout_se = 0.0;
  std::size_t hidden_cells = 0;
  double hp_loglik = 0.0;
  double diff_vs_hp = 0.0;
  double wall_seconds = 0.0;
  bool ok = true;
  std::string error;

  friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct AggregateRow {
  std::string model;
  std::size_t reveal_count = 0;
  std::size_t runs = 0;
  double mean = 0.0;
  double se = 0.0;
  double diff_mean = 0.0;
  double diff_se = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  bool partial = false;

  /// One row per (model, reveal_count) over the successful runs, in order of
  /// first appearance.
  std::vector<AggregateRow> aggregate() const;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Fold data prepared once and reused across models and reveal counts.
struct FoldOutcome {
  double heldout = 0.0;
  double heldout_se = 0.0;
  std::size_t hidden = 0;
  double hp = 0.0;
};

/// One leave-one-year-out run of `spec` (or HP when spec is empty).
FoldOutcome run_fold(const std::optional<ModelSpec>& spec, const CountMatrix& data,
                     std::size_t test_index, const MaskSpec& mask,
                     const InferenceSettings& settings, std::uint64_t fold_seed);

EvalReport run_experiment(const ExperimentConfig& cfg);
EvalReport run_experiment(const ExperimentConfig& cfg, const CountMatrix& data);

/// Default reveal grid {0, 100, 300, 600, 1000, 1617} rescaled to the block
/// size, with the top point pulled back to block_cells - 1 so that every
/// point leaves a hidden cell to score.
std::vector<std::size_t> default_reveal_grid(std::size_t block_cells);

/// Models x reveal counts, each a full leave-one-year-out experiment.
EvalReport run_sweep(const ExperimentConfig& cfg, const CountMatrix& data);

enum class ReportFormat { csv, json_lines };
ReportFormat parse_report_format(const std::string& name);

struct EmitOptions {
  ReportFormat format = ReportFormat::csv;
  bool include_timing = false;  // wall time breaks byte-identical reruns
};

/// Writes report.{csv,jsonl} and aggregate.{csv,jsonl} into dir; returns the
/// paths written.
std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& dir,
                                               const EmitOptions& options = {});
/// Reads a report written by emit_report (format from the extension).
EvalReport read_report(const std::filesystem::path& path);

}  // namespace cdef
