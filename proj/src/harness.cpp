#include "cdef/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

namespace cdef {

namespace {

struct NameEntry {
  NamedModel model;
  const char* name;
};

constexpr NameEntry kNames[] = {
    {NamedModel::HP, "HP"},
    {NamedModel::CDEF_1_51, "CDEF_1_51"},
    {NamedModel::CDEF_1_51_2_17, "CDEF_1_51_2_17"},
    {NamedModel::CDEF_1_51_2_25, "CDEF_1_51_2_25"},
    {NamedModel::CDEF_1_51_2_49, "CDEF_1_51_2_49"},
    {NamedModel::CDEF_1_17, "CDEF_1_17"},
    {NamedModel::CDEF_1_25, "CDEF_1_25"},
    {NamedModel::CDEF_1_49, "CDEF_1_49"},
};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double se_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

template <class Fn>
void for_each_fold(std::size_t threads, std::size_t count, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += threads) fn(i);
    });
}

std::vector<std::size_t> fold_list(const ExperimentConfig& cfg, const CountMatrix& data) {
  std::vector<std::size_t> folds = cfg.folds;
  if (folds.empty())
    for (std::size_t n = 0; n < data.n_samples(); ++n) folds.push_back(n);
  for (std::size_t f : folds)
    if (f >= data.n_samples()) throw ConfigError("fold index " + std::to_string(f) + " out of range");
  return folds;
}

struct TrainedFold {
  CountMatrix test;
  HpRates hp;
  std::optional<VariationalState> trained;
};

TrainedFold train_fold(const std::optional<ModelSpec>& spec, const CountMatrix& data, std::size_t test_index,
                       const InferenceSettings& settings, std::uint64_t fold_seed) {
  auto [train_set, test_set] = split_loyo(data, test_index);
  TrainedFold out{std::move(test_set), hp_fit(train_set), std::nullopt};
  if (spec) {
    EstimatorConfig est = settings.estimator;
    est.seed = fold_seed;
    est.threads = 1;
    TrainOptions opts;
    opts.iterations = settings.train_iterations;
    opts.optimizer = settings.optimizer;
    out.trained = train(*spec, train_set, est, opts).state;
  }
  return out;
}

FoldOutcome evaluate_fold(const std::optional<ModelSpec>& spec, const TrainedFold& fold, const MaskSpec& mask,
                          const InferenceSettings& settings, std::uint64_t fold_seed) {
  const CountMatrix masked = apply_mask(fold.test, mask);
  FoldOutcome out;
  out.hp = hp_heldout_loglik(fold.hp, masked);
  out.hidden = masked.hidden_count();
  if (!spec) {
    out.heldout = out.hp;
    return out;
  }
  EstimatorConfig est = settings.estimator;
  est.seed = fold_seed;
  est.threads = 1;
  est.weights = settings.test_weights;
  const VariationalState fitted =
      fit_test(*spec, *fold.trained, masked, est, settings.test_iterations, settings.optimizer);
  const HeldoutEstimate h =
      heldout_loglik_detail(*spec, fitted, masked, settings.eval_samples, fold_seed, settings.test_weights);
  out.heldout = h.mean;
  out.heldout_se = h.se;
  return out;
}

EvalRow make_row(const std::string& model, std::size_t idx, const CountMatrix& data, std::size_t reveal) {
  EvalRow row;
  row.model = model;
  row.test_index = idx;
  row.test_label = data.sample_labels()[idx];
  row.reveal_count = reveal;
  return row;
}

void fill_row(EvalRow& row, const FoldOutcome& o, double seconds) {
  row.heldout_loglik = o.heldout;
  row.heldout_se = o.heldout_se;
  row.hidden_cells = o.hidden;
  row.hp_loglik = o.hp;
  row.diff_vs_hp = o.heldout - o.hp;
  row.wall_seconds = seconds;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::string model_name(NamedModel m) {
  for (const auto& e : kNames)
    if (e.model == m) return e.name;
  return "?";
}

NamedModel parse_model_name(const std::string& name) {
  for (const auto& e : kNames)
    if (name == e.name) return e.model;
  throw ConfigError("unknown model '" + name + "'");
}

const std::vector<NamedModel>& all_named_models() {
  static const std::vector<NamedModel> models = [] {
    std::vector<NamedModel> v;
    for (const auto& e : kNames) v.push_back(e.model);
    return v;
  }();
  return models;
}

ModelSpec expand_named_model(NamedModel m, const Layout& layout, const PriorDefaults& priors) {
  const std::size_t week = 7 * layout.n_locations;
  const double a = priors.fixed_shape;
  std::vector<LayerGeometry> g;
  switch (m) {
    case NamedModel::HP:
      throw ConfigError("HP is not a latent-variable model");
    case NamedModel::CDEF_1_51:
      g = {{week, week, a}};
      break;
    case NamedModel::CDEF_1_51_2_17:
      g = {{week, week, a}, {3, 3, a}};
      break;
    case NamedModel::CDEF_1_51_2_25:
      g = {{week, week, a}, {3, 2, a}};
      break;
    case NamedModel::CDEF_1_51_2_49:
      g = {{week, week, a}, {3, 1, a}};
      break;
    case NamedModel::CDEF_1_17:
      g = {{3 * week, 3 * week, a}};
      break;
    case NamedModel::CDEF_1_25:
      g = {{3 * week, 2 * week, a}};
      break;
    case NamedModel::CDEF_1_49:
      g = {{3 * week, week, a}};
      break;
  }
  return make_model_spec(layout.dim(), g, priors.top_prior, priors.weight_prior, priors.soft_gamma);
}

std::string ModelChoice::label() const {
  return named ? model_name(*named) : "custom:" + custom.filename().string();
}

HpRates hp_fit(const CountMatrix& train) {
  if (train.n_samples() == 0) throw DataError("hp_fit: empty training set");
  const Layout& lay = train.layout();
  std::vector<double> totals(lay.n_locations, 0.0);
  std::vector<double> cells(lay.n_locations, 0.0);
  for (std::size_t n = 0; n < train.n_samples(); ++n) {
    for (std::size_t i = 0; i < train.dim(); ++i) {
      if (!train.visible(n, i)) continue;
      const std::size_t j = i % lay.n_locations;
      totals[j] += train.count(n, i);
      cells[j] += 1.0;
    }
  }
  HpRates out{lay, std::vector<double>(lay.n_locations, kRateFloor), 0};
  for (std::size_t j = 0; j < lay.n_locations; ++j) {
    if (cells[j] == 0.0) {
      ++out.empty_locations;
      continue;
    }
    out.per_location[j] = std::max(totals[j] / cells[j], kRateFloor);
  }
  if (out.empty_locations > 0)
    std::cerr << "cdef: hp_fit: " << out.empty_locations << " location(s) without visible cells; rate floored\n";
  return out;
}

double hp_heldout_loglik(const HpRates& rates, const CountMatrix& test) {
  if (!(rates.layout == test.layout())) throw DataError("hp_heldout_loglik: layout mismatch");
  if (test.hidden_count() == 0) throw DataError("hp_heldout_loglik: nothing to evaluate (no hidden cells)");
  double total = 0.0;
  for (std::size_t n = 0; n < test.n_samples(); ++n) {
    for (std::size_t i = 0; i < test.dim(); ++i) {
      if (test.visible(n, i)) continue;
      total += poisson_log_pmf(test.count(n, i), PoissonParams(rates.rate_at(i)));
    }
  }
  return total;
}

ModelSpec resolve_model(const ModelChoice& choice, const Layout& layout, const PriorDefaults& priors) {
  if (choice.named) return expand_named_model(*choice.named, layout, priors);
  ModelSpec spec = load_model_spec(choice.custom);
  if (spec.obs_dim != layout.dim()) {
    std::ostringstream os;
    os << "custom model obs_dim " << spec.obs_dim << " does not match data dimension " << layout.dim();
    throw ConfigError(os.str());
  }
  return spec;
}

CountMatrix load_data(const DataSource& source) {
  if (const auto* synth = std::get_if<SynthSpec>(&source)) return synth_generate(*synth).data;
  if (const auto* csv = std::get_if<CsvSource>(&source)) return ingest_csv(csv->path, csv->schema);
  return load_counts(std::get<CacheSource>(source).path);
}

FoldOutcome run_fold(const std::optional<ModelSpec>& spec, const CountMatrix& data, std::size_t test_index,
                     const MaskSpec& mask, const InferenceSettings& settings, std::uint64_t fold_seed) {
  const TrainedFold fold = train_fold(spec, data, test_index, settings, fold_seed);
  return evaluate_fold(spec, fold, mask, settings, fold_seed);
}

EvalReport run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, load_data(cfg.data)); }

EvalReport run_experiment(const ExperimentConfig& cfg, const CountMatrix& data) {
  std::optional<ModelSpec> spec;
  if (!cfg.model.is_hp()) spec = resolve_model(cfg.model, data.layout(), cfg.priors);
  const std::vector<std::size_t> folds = fold_list(cfg, data);

  EvalReport report;
  report.rows.resize(folds.size());
  for_each_fold(cfg.threads, folds.size(), [&](std::size_t f) {
    const std::size_t idx = folds[f];
    EvalRow& row = report.rows[f];
    row = make_row(cfg.model.label(), idx, data, cfg.mask.reveal_count);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fill_row(row, run_fold(spec, data, idx, cfg.mask, cfg.inference, cfg.seed + idx), seconds_since(t0));
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
  });
  report.partial = std::any_of(report.rows.begin(), report.rows.end(), [](const EvalRow& r) { return !r.ok; });
  return report;
}

std::vector<std::size_t> default_reveal_grid(std::size_t block_cells) {
  if (block_cells == 0) return {0};
  std::vector<std::size_t> grid;
  for (double v : {0.0, 100.0, 300.0, 600.0, 1000.0, 1617.0}) {
    const auto scaled = static_cast<std::size_t>(std::llround(v * static_cast<double>(block_cells) / 1617.0));
    const std::size_t r = std::min(scaled, block_cells - 1);
    if (grid.empty() || grid.back() != r) grid.push_back(r);
  }
  return grid;
}

EvalReport run_sweep(const ExperimentConfig& cfg, const CountMatrix& data) {
  std::vector<NamedModel> models = cfg.sweep_models;
  if (models.empty()) models = {NamedModel::HP, NamedModel::CDEF_1_17, NamedModel::CDEF_1_25, NamedModel::CDEF_1_49};
  std::vector<std::size_t> grid = cfg.reveal_grid;
  if (grid.empty()) grid = default_reveal_grid(block_days(cfg.mask.scheme) * data.layout().n_locations);
  const std::vector<std::size_t> folds = fold_list(cfg, data);

  EvalReport report;
  // Row order: model, reveal count, fold.
  report.rows.resize(models.size() * grid.size() * folds.size());
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    std::optional<ModelSpec> spec;
    if (models[mi] != NamedModel::HP) spec = expand_named_model(models[mi], data.layout(), cfg.priors);
    for_each_fold(cfg.threads, folds.size(), [&](std::size_t f) {
      const std::size_t idx = folds[f];
      const std::uint64_t fold_seed = cfg.seed + idx;
      std::optional<TrainedFold> trained;
      std::string train_error;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        trained = train_fold(spec, data, idx, cfg.inference, fold_seed);
      } catch (const std::exception& e) {
        train_error = e.what();
      }
      const double train_seconds = seconds_since(t0);
      for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        EvalRow& row = report.rows[(mi * grid.size() + gi) * folds.size() + f];
        row = make_row(model_name(models[mi]), idx, data, grid[gi]);
        if (!trained) {
          row.ok = false;
          row.error = train_error;
          continue;
        }
        MaskSpec mask = cfg.mask;
        mask.reveal_count = grid[gi];
        const auto t1 = std::chrono::steady_clock::now();
        try {
          fill_row(row, evaluate_fold(spec, *trained, mask, cfg.inference, fold_seed),
                   train_seconds + seconds_since(t1));
        } catch (const std::exception& e) {
          row.ok = false;
          row.error = e.what();
        }
      }
    });
  }
  report.partial = std::any_of(report.rows.begin(), report.rows.end(), [](const EvalRow& r) { return !r.ok; });
  return report;
}

std::vector<AggregateRow> EvalReport::aggregate() const {
  std::vector<AggregateRow> out;
  std::map<std::pair<std::string, std::size_t>, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const EvalRow& r : rows) {
    const auto key = std::make_pair(r.model, r.reveal_count);
    if (!groups.contains(key)) {
      AggregateRow a;
      a.model = r.model;
      a.reveal_count = r.reveal_count;
      out.push_back(a);
      groups[key];
    }
    if (!r.ok) continue;
    groups[key].first.push_back(r.heldout_loglik);
    groups[key].second.push_back(r.diff_vs_hp);
  }
  for (AggregateRow& a : out) {
    const auto& [vals, diffs] = groups[{a.model, a.reveal_count}];
    a.runs = vals.size();
    a.mean = mean_of(vals);
    a.se = se_of(vals);
    a.diff_mean = mean_of(diffs);
    a.diff_se = se_of(diffs);
  }
  return out;
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "json" || name == "jsonl" || name == "json-lines") return ReportFormat::json_lines;
  throw ConfigError("unknown report format '" + name + "'");
}

}  // namespace cdef
