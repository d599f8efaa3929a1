#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cdef/graph.hpp"

namespace cdef {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed, std::string_view where) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.contains(key))
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

template <class T>
T required(const json& obj, const char* key, std::string_view where) {
  if (!obj.contains(key)) throw ConfigError(std::string(where) + ": missing '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(where) + ": bad value for '" + key + "': " + e.what());
  }
}

GammaParams gamma_from_json(const json& obj, std::string_view where) {
  reject_unknown(obj, {"shape", "rate"}, where);
  try {
    return GammaParams(required<double>(obj, "shape", where), required<double>(obj, "rate", where));
  } catch (const DomainError& e) {
    throw ConfigError(std::string(where) + ": " + e.what());
  }
}

}  // namespace

ModelSpec parse_model_spec(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  reject_unknown(root, {"obs_dim", "layers", "top_prior", "weight_prior", "soft_gamma"}, "model");
  const auto obs_dim = required<std::size_t>(root, "obs_dim", "model");
  const json& layers = root.contains("layers") ? root.at("layers") : json();
  if (!layers.is_array() || layers.empty()) throw ConfigError("model: 'layers' must be a non-empty array");

  std::vector<LayerGeometry> geometry;
  for (std::size_t m = 0; m < layers.size(); ++m) {
    const std::string where = "model.layers[" + std::to_string(m) + "]";
    reject_unknown(layers[m], {"filter", "stride", "fixed_shape"}, where);
    LayerGeometry g;
    g.filter_size = required<std::size_t>(layers[m], "filter", where);
    g.stride = required<std::size_t>(layers[m], "stride", where);
    if (layers[m].contains("fixed_shape")) g.fixed_shape = required<double>(layers[m], "fixed_shape", where);
    geometry.push_back(g);
  }
  const GammaParams top = root.contains("top_prior") ? gamma_from_json(root["top_prior"], "model.top_prior")
                                                    : GammaParams(0.1, 0.1);
  const GammaParams weight = root.contains("weight_prior")
                                 ? gamma_from_json(root["weight_prior"], "model.weight_prior")
                                 : GammaParams(0.1, 0.3);
  const bool soft = root.contains("soft_gamma") ? required<bool>(root, "soft_gamma", "model") : true;
  return make_model_spec(obs_dim, geometry, top, weight, soft);
}

ModelSpec load_model_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_model_spec(buf.str());
}

std::string model_spec_to_json(const ModelSpec& spec) {
  json root;
  root["obs_dim"] = spec.obs_dim;
  root["soft_gamma"] = spec.soft_gamma;
  root["top_prior"] = {{"shape", spec.top_prior.shape}, {"rate", spec.top_prior.rate}};
  root["weight_prior"] = {{"shape", spec.weight_prior.shape}, {"rate", spec.weight_prior.rate}};
  json layers = json::array();
  for (std::size_t m = 0; m < spec.num_layers(); ++m) {
    layers.push_back({{"filter", spec.weight_tyings[m].filter_size},
                      {"stride", spec.weight_tyings[m].stride},
                      {"fixed_shape", spec.layers[m].fixed_shape}});
  }
  root["layers"] = layers;
  return root.dump(2);
}

}  // namespace cdef
