#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cdef/harness.hpp"

namespace cdef {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <class T>
void read_opt(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": bad value for '" + key + "': " + e.what());
  }
}

GammaParams read_gamma(const json& obj, const std::string& where) {
  reject_unknown(obj, {"shape", "rate"}, where);
  double shape = 0.0, rate = 0.0;
  if (!obj.contains("shape") || !obj.contains("rate")) throw ConfigError(where + ": needs 'shape' and 'rate'");
  read_opt(obj, "shape", shape, where);
  read_opt(obj, "rate", rate, where);
  try {
    return GammaParams(shape, rate);
  } catch (const DomainError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::filesystem::path rebase(const std::filesystem::path& p, const std::filesystem::path& base) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

ModelChoice read_model(const json& v, const std::filesystem::path& base) {
  ModelChoice choice;
  if (v.is_string()) {
    choice.named = parse_model_name(v.get<std::string>());
    return choice;
  }
  reject_unknown(v, {"custom"}, "model");
  if (!v.contains("custom") || !v["custom"].is_string()) throw ConfigError("model: 'custom' must be a path");
  choice.custom = rebase(v["custom"].get<std::string>(), base);
  return choice;
}

MaskSpec read_mask(const json& v) {
  reject_unknown(v, {"scheme", "reveal_count", "seed"}, "mask");
  MaskSpec m;
  std::string scheme = mask_scheme_name(m.scheme);
  read_opt(v, "scheme", scheme, "mask");
  m.scheme = parse_mask_scheme(scheme);
  read_opt(v, "reveal_count", m.reveal_count, "mask");
  read_opt(v, "seed", m.seed, "mask");
  return m;
}

SynthSpec read_synth(const json& v) {
  const std::string where = "data.synth";
  reject_unknown(v, {"n_locations", "n_weeks", "n_samples", "week_profile", "location_rates", "block_log_sd", "seed"},
                 where);
  SynthSpec s;
  read_opt(v, "n_locations", s.n_locations, where);
  read_opt(v, "n_weeks", s.n_weeks, where);
  read_opt(v, "n_samples", s.n_samples, where);
  read_opt(v, "week_profile", s.week_profile, where);
  read_opt(v, "location_rates", s.location_rates, where);
  read_opt(v, "block_log_sd", s.block_log_sd, where);
  read_opt(v, "seed", s.seed, where);
  return s;
}

CsvSchema read_schema(const json& v) {
  const std::string where = "data.csv.schema";
  reject_unknown(v, {"date_column", "location_column", "type_column", "type_filter", "n_locations", "n_days",
                     "max_reject_fraction"},
                 where);
  CsvSchema s;
  read_opt(v, "date_column", s.date_column, where);
  read_opt(v, "location_column", s.location_column, where);
  read_opt(v, "type_column", s.type_column, where);
  read_opt(v, "type_filter", s.type_filter, where);
  read_opt(v, "n_locations", s.n_locations, where);
  read_opt(v, "n_days", s.n_days, where);
  read_opt(v, "max_reject_fraction", s.max_reject_fraction, where);
  return s;
}

DataSource read_data(const json& v, const std::filesystem::path& base) {
  reject_unknown(v, {"synth", "csv", "cache"}, "data");
  if (v.size() != 1) throw ConfigError("data: exactly one of 'synth', 'csv', 'cache' is required");
  if (v.contains("synth")) return read_synth(v["synth"]);
  if (v.contains("cache")) {
    std::string path;
    read_opt(v, "cache", path, "data");
    return CacheSource{rebase(path, base)};
  }
  const json& c = v["csv"];
  reject_unknown(c, {"path", "schema"}, "data.csv");
  std::string path;
  read_opt(c, "path", path, "data.csv");
  if (path.empty()) throw ConfigError("data.csv: missing 'path'");
  CsvSource src{rebase(path, base), {}};
  if (c.contains("schema")) src.schema = read_schema(c["schema"]);
  return src;
}

OptimizerSettings read_optimizer(const json& v) {
  const std::string where = "inference.optimizer";
  reject_unknown(v, {"step_size", "decay", "denom_floor", "step_halflife"}, where);
  OptimizerSettings o;
  read_opt(v, "step_size", o.step_size, where);
  read_opt(v, "decay", o.decay, where);
  read_opt(v, "denom_floor", o.denom_floor, where);
  read_opt(v, "step_halflife", o.step_halflife, where);
  if (!(o.step_size > 0) || !(o.decay >= 0 && o.decay < 1) || !(o.denom_floor > 0) || !(o.step_halflife >= 0))
    throw ConfigError(where + ": out-of-range value");
  return o;
}

WeightMode parse_weight_mode(const std::string& s) {
  if (s == "sample") return WeightMode::sample;
  if (s == "mean") return WeightMode::mean;
  throw ConfigError("unknown weight mode '" + s + "'");
}

InferenceSettings read_inference(const json& v) {
  const std::string where = "inference";
  reject_unknown(v, {"mc_samples", "clip_norm", "blanket", "optimizer", "train_iterations", "test_iterations",
                     "eval_samples", "test_weights", "train_weights"},
                 where);
  InferenceSettings s;
  read_opt(v, "mc_samples", s.estimator.mc_samples, where);
  if (v.contains("clip_norm")) {
    if (v["clip_norm"].is_null()) {
      s.estimator.clip_norm.reset();
    } else {
      double c = 0.0;
      read_opt(v, "clip_norm", c, where);
      if (!(c > 0)) throw ConfigError(where + ": clip_norm must be positive or null");
      s.estimator.clip_norm = c;
    }
  }
  if (v.contains("blanket")) {
    std::string b;
    read_opt(v, "blanket", b, where);
    if (b == "markov") s.estimator.blanket = BlanketMode::markov;
    else if (b == "full_joint") s.estimator.blanket = BlanketMode::full_joint;
    else throw ConfigError(where + ": unknown blanket mode '" + b + "'");
  }
  if (v.contains("optimizer")) s.optimizer = read_optimizer(v["optimizer"]);
  read_opt(v, "train_iterations", s.train_iterations, where);
  read_opt(v, "test_iterations", s.test_iterations, where);
  read_opt(v, "eval_samples", s.eval_samples, where);
  if (v.contains("test_weights")) {
    std::string w;
    read_opt(v, "test_weights", w, where);
    s.test_weights = parse_weight_mode(w);
  }
  if (v.contains("train_weights")) {
    std::string w;
    read_opt(v, "train_weights", w, where);
    s.estimator.weights = parse_weight_mode(w);
  }
  if (s.estimator.mc_samples == 0 || s.eval_samples == 0) throw ConfigError(where + ": sample counts must be positive");
  return s;
}

PriorDefaults read_priors(const json& v) {
  reject_unknown(v, {"fixed_shape", "top_prior", "weight_prior", "soft_gamma"}, "priors");
  PriorDefaults p;
  read_opt(v, "fixed_shape", p.fixed_shape, "priors");
  read_opt(v, "soft_gamma", p.soft_gamma, "priors");
  if (v.contains("top_prior")) p.top_prior = read_gamma(v["top_prior"], "priors.top_prior");
  if (v.contains("weight_prior")) p.weight_prior = read_gamma(v["weight_prior"], "priors.weight_prior");
  if (!(p.fixed_shape > 0)) throw ConfigError("priors: fixed_shape must be positive");
  if (p.soft_gamma && p.fixed_shape > 1.0) throw ConfigError("priors: soft_gamma requires fixed_shape <= 1");
  return p;
}

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  reject_unknown(root, {"model", "mask", "data", "inference", "priors", "folds", "sweep", "out", "seed", "threads"},
                 "config");
  ExperimentConfig cfg;
  if (!root.contains("model")) throw ConfigError("config: missing 'model'");
  cfg.model = read_model(root["model"], base);
  if (root.contains("mask")) cfg.mask = read_mask(root["mask"]);
  if (root.contains("data")) cfg.data = read_data(root["data"], base);
  if (root.contains("inference")) cfg.inference = read_inference(root["inference"]);
  if (root.contains("priors")) cfg.priors = read_priors(root["priors"]);
  read_opt(root, "folds", cfg.folds, "config");
  if (root.contains("sweep")) {
    const json& s = root["sweep"];
    reject_unknown(s, {"models", "reveal_grid"}, "sweep");
    std::vector<std::string> names;
    read_opt(s, "models", names, "sweep");
    for (const auto& n : names) cfg.sweep_models.push_back(parse_model_name(n));
    read_opt(s, "reveal_grid", cfg.reveal_grid, "sweep");
  }
  std::string out = cfg.out.string();
  read_opt(root, "out", out, "config");
  cfg.out = out;
  read_opt(root, "seed", cfg.seed, "config");
  read_opt(root, "threads", cfg.threads, "config");
  if (cfg.threads == 0) throw ConfigError("config: threads must be positive");
  return cfg;
}

const std::vector<std::string>& row_fields(bool timing) {
  static const std::vector<std::string> with = {"model",       "test_index", "test_label",   "reveal_count",
                                                "heldout_loglik", "heldout_se", "hidden_cells", "hp_loglik",
                                                "diff_vs_hp",  "wall_seconds", "ok",          "error"};
  static const std::vector<std::string> without = [] {
    std::vector<std::string> v = with;
    std::erase(v, std::string("wall_seconds"));
    return v;
  }();
  return timing ? with : without;
}

const std::vector<std::string> kAggFields = {"model", "reveal_count", "runs",     "mean",
                                             "se",    "diff_mean",    "diff_se"};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json num_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::vector<std::string> row_values(const EvalRow& r, bool timing) {
  std::vector<std::string> v = {r.model,
                                std::to_string(r.test_index),
                                std::to_string(r.test_label),
                                std::to_string(r.reveal_count),
                                num(r.heldout_loglik),
                                num(r.heldout_se),
                                std::to_string(r.hidden_cells),
                                num(r.hp_loglik),
                                num(r.diff_vs_hp)};
  if (timing) v.push_back(num(r.wall_seconds));
  v.push_back(r.ok ? "1" : "0");
  v.push_back(r.error);
  return v;
}

json row_json(const EvalRow& r, bool timing) {
  json j;
  j["model"] = r.model;
  j["test_index"] = r.test_index;
  j["test_label"] = r.test_label;
  j["reveal_count"] = r.reveal_count;
  j["heldout_loglik"] = num_json(r.heldout_loglik);
  j["heldout_se"] = num_json(r.heldout_se);
  j["hidden_cells"] = r.hidden_cells;
  j["hp_loglik"] = num_json(r.hp_loglik);
  j["diff_vs_hp"] = num_json(r.diff_vs_hp);
  if (timing) j["wall_seconds"] = num_json(r.wall_seconds);
  j["ok"] = r.ok;
  j["error"] = r.error;
  return j;
}

std::vector<std::string> agg_values(const AggregateRow& a) {
  return {a.model, std::to_string(a.reveal_count), std::to_string(a.runs), num(a.mean), num(a.se),
          num(a.diff_mean), num(a.diff_se)};
}

json agg_json(const AggregateRow& a) {
  json j;
  j["model"] = a.model;
  j["reveal_count"] = a.reveal_count;
  j["runs"] = a.runs;
  j["mean"] = num_json(a.mean);
  j["se"] = num_json(a.se);
  j["diff_mean"] = num_json(a.diff_mean);
  j["diff_se"] = num_json(a.diff_se);
  return j;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << csv_cell(cells[i]);
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  if (!out) throw DataError("write failed: " + path.string());
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

double parse_num(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
    throw DataError(where + ": bad number '" + s + "'");
  }
}

std::size_t parse_count(const std::string& s, const std::string& where) {
  const double v = parse_num(s, where);
  if (v < 0 || v != std::floor(v)) throw DataError(where + ": bad count '" + s + "'");
  return static_cast<std::size_t>(v);
}

double json_num(const json& j, const char* key) {
  const json& v = j.at(key);
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) { return parse_config(json_text, {}); }

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& dir,
                                               const EmitOptions& options) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  const bool timing = options.include_timing;
  const auto aggregate = report.aggregate();
  std::vector<std::filesystem::path> paths;
  if (options.format == ReportFormat::csv) {
    std::vector<std::vector<std::string>> rows, agg;
    for (const auto& r : report.rows) rows.push_back(row_values(r, timing));
    for (const auto& a : aggregate) agg.push_back(agg_values(a));
    paths = {dir / "report.csv", dir / "aggregate.csv"};
    write_csv(paths[0], row_fields(timing), rows);
    write_csv(paths[1], kAggFields, agg);
  } else {
    std::vector<json> rows, agg;
    for (const auto& r : report.rows) rows.push_back(row_json(r, timing));
    for (const auto& a : aggregate) agg.push_back(agg_json(a));
    paths = {dir / "report.jsonl", dir / "aggregate.jsonl"};
    write_jsonl(paths[0], rows);
    write_jsonl(paths[1], agg);
  }
  return paths;
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read report " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  EvalReport report;

  if (path.extension() == ".jsonl") {
    std::istringstream lines(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const json j = json::parse(line);
        EvalRow r;
        r.model = j.at("model").get<std::string>();
        r.test_index = j.at("test_index").get<std::size_t>();
        r.test_label = j.at("test_label").get<int>();
        r.reveal_count = j.at("reveal_count").get<std::size_t>();
        r.heldout_loglik = json_num(j, "heldout_loglik");
        r.heldout_se = json_num(j, "heldout_se");
        r.hidden_cells = j.at("hidden_cells").get<std::size_t>();
        r.hp_loglik = json_num(j, "hp_loglik");
        r.diff_vs_hp = json_num(j, "diff_vs_hp");
        if (j.contains("wall_seconds")) r.wall_seconds = json_num(j, "wall_seconds");
        r.ok = j.at("ok").get<bool>();
        r.error = j.at("error").get<std::string>();
        report.rows.push_back(std::move(r));
      } catch (const json::exception& e) {
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  } else {
    const auto records = parse_csv_records(text);
    if (records.empty()) throw DataError(path.string() + ": missing header");
    const auto& header = records[0];
    const bool timing = header == row_fields(true);
    if (!timing && header != row_fields(false)) throw DataError(path.string() + ": unexpected header");
    for (std::size_t k = 1; k < records.size(); ++k) {
      const auto& c = records[k];
      if (c.size() == 1 && c[0].empty()) continue;
      const std::string where = path.string() + ": row " + std::to_string(k);
      if (c.size() != header.size()) throw DataError(where + ": wrong field count");
      EvalRow r;
      std::size_t i = 0;
      r.model = c[i++];
      r.test_index = parse_count(c[i++], where);
      r.test_label = static_cast<int>(parse_num(c[i++], where));
      r.reveal_count = parse_count(c[i++], where);
      r.heldout_loglik = parse_num(c[i++], where);
      r.heldout_se = parse_num(c[i++], where);
      r.hidden_cells = parse_count(c[i++], where);
      r.hp_loglik = parse_num(c[i++], where);
      r.diff_vs_hp = parse_num(c[i++], where);
      if (timing) r.wall_seconds = parse_num(c[i++], where);
      r.ok = c[i++] == "1";
      r.error = c[i++];
      report.rows.push_back(std::move(r));
    }
  }
  for (const auto& r : report.rows) report.partial = report.partial || !r.ok;
  return report;
}

}  // namespace cdef
