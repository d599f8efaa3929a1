#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cdef/harness.hpp"
#include "cdef/kernels.hpp"

using namespace cdef;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string format = "csv";
  std::string out;
  std::string simd = "auto";
  bool timing = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config) {
  auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
  if (needs_config) opt->required();
  cmd->add_option("--seed", c.seed, "run seed (overrides config)");
  cmd->add_option("--threads", c.threads, "worker threads (overrides config)");
  cmd->add_option("--format", c.format, "report format")->check(CLI::IsMember({"json", "csv"}));
  cmd->add_option("--out", c.out, "output directory or file");
  cmd->add_option("--simd", c.simd, "kernel backend")->check(CLI::IsMember({"auto", "scalar", "avx2"}));
}

ExperimentConfig config_from(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  if (!c.out.empty()) cfg.out = c.out;
  return cfg;
}

void select_backend(const std::string& name) {
  const auto b = kernels::parse_backend(name);
  if (!kernels::available(b)) throw ConfigError("SIMD backend '" + name + "' is not available on this CPU");
  kernels::select(b);
}

EmitOptions emit_options(const Common& c) {
  return {c.format == "json" ? ReportFormat::json_lines : ReportFormat::csv, c.timing};
}

void print_paths(const std::vector<std::filesystem::path>& paths) {
  for (const auto& p : paths) std::cout << "wrote " << p.string() << "\n";
}

void summarize(const EvalReport& report) {
  for (const auto& a : report.aggregate())
    std::printf("%-16s reveal=%-5zu runs=%-3zu mean=%.3f se=%.3f diff_vs_hp=%.3f (se %.3f)\n", a.model.c_str(),
                a.reveal_count, a.runs, a.mean, a.se, a.diff_mean, a.diff_se);
  if (report.partial) std::cerr << "warning: report is partial; some runs failed\n";
}

int cmd_ingest(const std::string& csv, const Common& c) {
  CsvSchema schema;
  if (!c.config.empty()) {
    const auto cfg = load_experiment_config(c.config);
    if (const auto* src = std::get_if<CsvSource>(&cfg.data)) schema = src->schema;
  }
  IngestReport rep;
  const CountMatrix data = ingest_csv(csv, schema, &rep);
  const std::string out = c.out.empty() ? "counts.bin" : c.out;
  save_counts(data, out);
  std::cout << "read " << rep.rows_read << " rows: accepted " << rep.rows_accepted << ", other type "
            << rep.rows_filtered << ", outside window " << rep.rows_outside << ", rejected " << rep.rejects.size()
            << "\n";
  for (const auto& r : rep.rejects) std::cerr << "reject " << r << "\n";
  std::cout << "wrote " << out << " (" << data.n_samples() << " samples x " << data.dim() << " cells)\n";
  return 0;
}

int cmd_synth(const Common& c) {
  SynthSpec spec;
  if (!c.config.empty()) {
    const auto cfg = load_experiment_config(c.config);
    if (const auto* s = std::get_if<SynthSpec>(&cfg.data)) spec = *s;
  }
  if (c.seed) spec.seed = *c.seed;
  const SynthData synth = synth_generate(spec);
  const std::string out = c.out.empty() ? "synth.bin" : c.out;
  save_counts(synth.data, out);
  std::cout << "wrote " << out << " (" << synth.data.n_samples() << " samples x " << synth.data.dim()
            << " cells, total count " << synth.data.total_count() << ")\n";
  return 0;
}

int cmd_train(const Common& c, std::optional<std::size_t> holdout, std::optional<std::size_t> iterations,
              const std::string& resume) {
  const ExperimentConfig cfg = config_from(c);
  if (cfg.model.is_hp()) throw ConfigError("train: HP has no variational parameters; use eval");
  CountMatrix data = load_data(cfg.data);
  const ModelSpec spec = resolve_model(cfg.model, data.layout(), cfg.priors);
  std::cout << cfg.model.label() << ": " << spec.describe_chain() << "\n";
  if (holdout) data = split_loyo(data, *holdout).first;

  EstimatorConfig est = cfg.inference.estimator;
  est.seed = cfg.seed;
  est.threads = cfg.threads;
  const std::size_t iters = iterations.value_or(cfg.inference.train_iterations);
  TrainResult result;
  if (resume.empty()) {
    TrainOptions opts;
    opts.iterations = iters;
    opts.optimizer = cfg.inference.optimizer;
    result = train(spec, data, est, opts);
  } else {
    Checkpoint ck = load_checkpoint(resume);
    if (!ck.state.conforms_to(spec) || ck.state.n_samples() != data.n_samples())
      throw ConfigError("checkpoint " + resume + " does not match the configured model and data");
    est.seed = ck.seed;
    result = train_from(spec, data, est, std::move(ck.state), std::move(ck.optimizer), iters, true);
  }

  const std::filesystem::path dir = cfg.out;
  std::filesystem::create_directories(dir);
  save_checkpoint({result.state, result.optimizer, est.seed}, dir / "checkpoint.bin");
  std::ofstream(dir / "model.json") << model_spec_to_json(spec) << "\n";
  std::ofstream trace(dir / "elbo_trace.csv");
  trace << "iteration,elbo\n";
  const std::uint64_t first = result.optimizer.iteration - result.report.elbo_trace.size();
  for (std::size_t i = 0; i < result.report.elbo_trace.size(); ++i) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", result.report.elbo_trace[i]);
    trace << first + i + 1 << "," << buf << "\n";
  }
  if (!result.report.elbo_trace.empty())
    std::printf("final ELBO %.4f after %llu iterations (%.2f s)\n", result.report.elbo_trace.back(),
                static_cast<unsigned long long>(result.optimizer.iteration), result.report.seconds);
  std::cout << "wrote " << (dir / "checkpoint.bin").string() << "\n";
  return 0;
}

int cmd_eval(const Common& c) {
  const ExperimentConfig cfg = config_from(c);
  const CountMatrix data = load_data(cfg.data);
  if (!cfg.model.is_hp())
    std::cout << cfg.model.label() << ": " << resolve_model(cfg.model, data.layout(), cfg.priors).describe_chain()
              << "\n";
  const EvalReport report = run_experiment(cfg, data);
  summarize(report);
  print_paths(emit_report(report, cfg.out, emit_options(c)));
  return 0;
}

int cmd_sweep(const Common& c) {
  const ExperimentConfig cfg = config_from(c);
  const CountMatrix data = load_data(cfg.data);
  const EvalReport report = run_sweep(cfg, data);
  summarize(report);
  print_paths(emit_report(report, cfg.out, emit_options(c)));
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const Common& c) {
  EvalReport merged;
  for (const auto& in : inputs) {
    EvalReport r = read_report(in);
    merged.rows.insert(merged.rows.end(), r.rows.begin(), r.rows.end());
    merged.partial = merged.partial || r.partial;
  }
  summarize(merged);
  if (!c.out.empty()) print_paths(emit_report(merged, c.out, emit_options(c)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional deep exponential families: training and held-out evaluation"};
  app.require_subcommand(1);
  Common common;

  auto* ingest = app.add_subcommand("ingest", "CSV export -> cached count matrix");
  std::string csv_path;
  ingest->add_option("csv", csv_path, "incident CSV")->required();
  add_common(ingest, common, false);

  auto* synth = app.add_subcommand("synth", "generate a synthetic count matrix");
  add_common(synth, common, false);

  auto* train_cmd = app.add_subcommand("train", "fit a model on all (or all but one) samples");
  std::optional<std::size_t> holdout, iterations;
  std::string resume;
  train_cmd->add_option("--holdout", holdout, "leave this sample index out");
  train_cmd->add_option("--iterations", iterations, "iterations (overrides config)");
  train_cmd->add_option("--resume", resume, "continue from a checkpoint");
  add_common(train_cmd, common, true);

  auto* eval = app.add_subcommand("eval", "leave-one-year-out held-out evaluation");
  add_common(eval, common, true);
  eval->add_flag("--timing", common.timing, "include wall time in the report");

  auto* sweep = app.add_subcommand("sweep", "models x reveal-count grid");
  add_common(sweep, common, true);
  sweep->add_flag("--timing", common.timing, "include wall time in the report");

  auto* report = app.add_subcommand("report", "aggregate and re-emit report files");
  std::vector<std::string> inputs;
  report->add_option("inputs", inputs, "report.csv or report.jsonl files")->required();
  add_common(report, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    select_backend(common.simd);
    if (*ingest) return cmd_ingest(csv_path, common);
    if (*synth) return cmd_synth(common);
    if (*train_cmd) return cmd_train(common, holdout, iterations, resume);
    if (*eval) return cmd_eval(common);
    if (*sweep) return cmd_sweep(common);
    if (*report) return cmd_report(inputs, common);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DomainError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
