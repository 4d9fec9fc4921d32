#include "saq/config.hpp"

#include "saq/errors.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace saq {
namespace {

using Setter = std::function<void(const YAML::Node&)>;

template <typename T>
T as(const YAML::Node& n, const std::string& key) {
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

void apply(const YAML::Node& node, const std::string& section, const std::map<std::string, Setter>& setters) {
  if (!node.IsMap()) throw ConfigError("config section '" + section + "' must be a mapping");
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
    it->second(kv.second);
  }
}

template <typename T>
Setter set(T& field, const std::string& key) {
  return [&field, key](const YAML::Node& n) { field = as<T>(n, key); };
}

template <typename T>
Setter set_list(std::vector<T>& field, const std::string& key) {
  return [&field, key](const YAML::Node& n) {
    if (!n.IsSequence()) throw ConfigError("config key '" + key + "' must be a list");
    field.clear();
    for (const auto& e : n) field.push_back(as<T>(e, key));
  };
}

ExperimentConfig from_node(const YAML::Node& root) {
  ExperimentConfig cfg;
  if (!root || root.IsNull()) {
    cfg.validate();
    return cfg;
  }
  ModelConfig& m = cfg.model;
  CalibPolicy& p = cfg.policy;
  ReconConfig& r = cfg.recon_cfg;
  std::map<std::string, Setter> model{
      {"image_size", set(m.image_size, "model.image_size")},
      {"patch_size", set(m.patch_size, "model.patch_size")},
      {"in_channels", set(m.in_channels, "model.in_channels")},
      {"embed_dim", set(m.embed_dim, "model.embed_dim")},
      {"num_heads", set(m.num_heads, "model.num_heads")},
      {"encoder_layers", set(m.encoder_layers, "model.encoder_layers")},
      {"global_layers", set_list(m.global_layer_indices, "model.global_layers")},
      {"window_size", set(m.window_size, "model.window_size")},
      {"decoder_layers", set(m.decoder_layers, "model.decoder_layers")},
      {"neck_dim", set(m.neck_dim, "model.neck_dim")},
      {"mlp_ratio", set(m.mlp_ratio, "model.mlp_ratio")},
      {"qk_init_gain", set(m.qk_init_gain, "model.qk_init_gain")},
  };
  std::map<std::string, Setter> data{
      {"calib_images", set(cfg.calib_images, "data.calib_images")},
      {"eval_images", set(cfg.eval_images, "data.eval_images")},
  };
  std::map<std::string, Setter> outliers{
      {"enabled", set(cfg.inject, "outliers.enabled")},
      {"targets", set_list(cfg.outliers.targets, "outliers.targets")},
      {"bulk_scale", set(cfg.outliers.bulk_scale, "outliers.bulk_scale")},
      {"magnitude", set(cfg.outliers.magnitude, "outliers.magnitude")},
      {"fraction", set(cfg.outliers.fraction, "outliers.fraction")},
      {"headroom", set(cfg.outliers.headroom, "outliers.headroom")},
  };
  std::size_t value_cap = p.value_cap;
  std::map<std::string, Setter> calibration{
      {"theta", set(p.theta, "calibration.theta")},
      {"scope",
       [&](const YAML::Node& n) {
         const std::string s = as<std::string>(n, "calibration.scope");
         if (s == "global") p.scope = pcc::MaxScope::Global;
         else if (s == "per_row") p.scope = pcc::MaxScope::PerRow;
         else throw ConfigError("calibration.scope must be global or per_row");
       }},
      {"tie_break",
       [&](const YAML::Node& n) {
         const std::string s = as<std::string>(n, "calibration.tie_break");
         if (s == "value_error") p.tie_break = pcc::TieBreak::ValueError;
         else if (s == "narrowest") p.tie_break = pcc::TieBreak::Narrowest;
         else throw ConfigError("calibration.tie_break must be value_error or narrowest");
       }},
      {"grid_steps", set(p.grid_steps, "calibration.grid_steps")},
      {"grid_min_fraction", set(p.grid_min_fraction, "calibration.grid_min_fraction")},
      {"refine_radius", set(p.refine_radius, "calibration.refine_radius")},
      {"pcc_sweeps", set(p.pcc_sweeps, "calibration.pcc_sweeps")},
      {"pcc_samples", set(p.pcc_samples, "calibration.pcc_samples")},
      {"mse_samples", set(p.mse_samples, "calibration.mse_samples")},
      {"value_cap", set(value_cap, "calibration.value_cap")},
      {"grid",
       [&](const YAML::Node& n) {
         const std::string s = as<std::string>(n, "calibration.grid");
         if (s == "capped") p.grid_shape = pcc::GridShape::Capped;
         else if (s == "scaled") p.grid_shape = pcc::GridShape::Scaled;
         else if (s == "symmetric") p.grid_shape = pcc::GridShape::Symmetric;
         else throw ConfigError("calibration.grid must be capped, scaled or symmetric");
       }},
  };
  std::map<std::string, Setter> recon{
      {"granularity",
       [&](const YAML::Node& n) {
         const std::string s = as<std::string>(n, "reconstruction.granularity");
         if (s == "layer") r.granularity = ReconGranularity::Layer;
         else if (s == "stage") r.granularity = ReconGranularity::Stage;
         else throw ConfigError("reconstruction.granularity must be layer or stage");
       }},
      {"iterations", set(r.iterations, "reconstruction.iterations")},
      {"final_iterations", set(r.final_iterations, "reconstruction.final_iterations")},
      {"budget", set(r.budget, "reconstruction.budget")},
      {"lr_bounds", set(r.lr_bounds, "reconstruction.lr_bounds")},
      {"lr_alpha", set(r.lr_alpha, "reconstruction.lr_alpha")},
      {"drop_prob", set(r.drop_prob, "reconstruction.drop_prob")},
      {"reg_lambda", set(r.reg_lambda, "reconstruction.reg_lambda")},
      {"warmup", set(r.warmup, "reconstruction.warmup")},
      {"beta_start", set(r.beta_start, "reconstruction.beta_start")},
      {"beta_end", set(r.beta_end, "reconstruction.beta_end")},
      {"learn_rounding", set(r.learn_rounding, "reconstruction.learn_rounding")},
      {"eval_items", set(r.eval_items, "reconstruction.eval_items")},
      {"checkpoints", set(r.checkpoints, "reconstruction.checkpoints")},
      {"interaction",
       [&](const YAML::Node& n) {
         const std::string s = as<std::string>(n, "reconstruction.interaction");
         if (s == "two_way") r.interaction = Interaction::TwoWay;
         else if (s == "identity") r.interaction = Interaction::Identity;
         else throw ConfigError("reconstruction.interaction must be two_way or identity");
       }},
  };
  std::map<std::string, Setter> report{
      {"include_weight_params", set(cfg.include_weight_params, "report.include_weight_params")},
  };
  std::map<std::string, Setter> top{
      {"model", [&](const YAML::Node& n) { apply(n, "model", model); }},
      {"data", [&](const YAML::Node& n) { apply(n, "data", data); }},
      {"outliers", [&](const YAML::Node& n) { apply(n, "outliers", outliers); }},
      {"calibration", [&](const YAML::Node& n) { apply(n, "calibration", calibration); }},
      {"reconstruction", [&](const YAML::Node& n) { apply(n, "reconstruction", recon); }},
      {"report", [&](const YAML::Node& n) { apply(n, "report", report); }},
      {"bits",
       [&](const YAML::Node& n) {
         std::vector<std::string> v;
         set_list(v, "bits")(n);
         cfg.bits.clear();
         for (const auto& s : v) cfg.bits.push_back(BitPair::parse(s));
       }},
      {"methods",
       [&](const YAML::Node& n) {
         std::vector<std::string> v;
         set_list(v, "methods")(n);
         cfg.methods.clear();
         for (const auto& s : v) cfg.methods.push_back(metric_from_string(s));
       }},
      {"recon_modes",
       [&](const YAML::Node& n) {
         std::vector<std::string> v;
         set_list(v, "recon_modes")(n);
         cfg.recon.clear();
         for (const auto& s : v) cfg.recon.push_back(recon_mode_from_string(s));
       }},
      {"thetas", set_list(cfg.thetas, "thetas")},
      {"seeds", set_list(cfg.seeds, "seeds")},
      {"output", set(cfg.output, "output")},
  };
  apply(root, "", top);
  p.value_cap = value_cap;
  cfg.validate();
  return cfg;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return from_node(root);
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string dump_experiment_config(const ExperimentConfig& cfg) {
  const ModelConfig& m = cfg.model;
  const CalibPolicy& p = cfg.policy;
  const ReconConfig& r = cfg.recon_cfg;
  YAML::Emitter e;
  e.SetDoublePrecision(15);
  e << YAML::BeginMap;
  e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "image_size" << YAML::Value << m.image_size;
  e << YAML::Key << "patch_size" << YAML::Value << m.patch_size;
  e << YAML::Key << "in_channels" << YAML::Value << m.in_channels;
  e << YAML::Key << "embed_dim" << YAML::Value << m.embed_dim;
  e << YAML::Key << "num_heads" << YAML::Value << m.num_heads;
  e << YAML::Key << "encoder_layers" << YAML::Value << m.encoder_layers;
  e << YAML::Key << "global_layers" << YAML::Value << YAML::Flow << m.global_layer_indices;
  e << YAML::Key << "window_size" << YAML::Value << m.window_size;
  e << YAML::Key << "decoder_layers" << YAML::Value << m.decoder_layers;
  e << YAML::Key << "neck_dim" << YAML::Value << m.neck_dim;
  e << YAML::Key << "mlp_ratio" << YAML::Value << m.mlp_ratio;
  e << YAML::Key << "qk_init_gain" << YAML::Value << m.qk_init_gain;
  e << YAML::EndMap;
  e << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "calib_images" << YAML::Value << cfg.calib_images;
  e << YAML::Key << "eval_images" << YAML::Value << cfg.eval_images;
  e << YAML::EndMap;
  e << YAML::Key << "outliers" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "enabled" << YAML::Value << cfg.inject;
  e << YAML::Key << "targets" << YAML::Value << YAML::Flow << cfg.outliers.targets;
  e << YAML::Key << "bulk_scale" << YAML::Value << cfg.outliers.bulk_scale;
  e << YAML::Key << "magnitude" << YAML::Value << cfg.outliers.magnitude;
  e << YAML::Key << "fraction" << YAML::Value << cfg.outliers.fraction;
  e << YAML::Key << "headroom" << YAML::Value << cfg.outliers.headroom;
  e << YAML::EndMap;
  e << YAML::Key << "calibration" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "theta" << YAML::Value << p.theta;
  e << YAML::Key << "scope" << YAML::Value << (p.scope == pcc::MaxScope::Global ? "global" : "per_row");
  e << YAML::Key << "tie_break" << YAML::Value
    << (p.tie_break == pcc::TieBreak::ValueError ? "value_error" : "narrowest");
  e << YAML::Key << "grid_steps" << YAML::Value << p.grid_steps;
  e << YAML::Key << "grid_min_fraction" << YAML::Value << p.grid_min_fraction;
  e << YAML::Key << "refine_radius" << YAML::Value << p.refine_radius;
  e << YAML::Key << "pcc_sweeps" << YAML::Value << p.pcc_sweeps;
  e << YAML::Key << "pcc_samples" << YAML::Value << p.pcc_samples;
  e << YAML::Key << "mse_samples" << YAML::Value << p.mse_samples;
  e << YAML::Key << "value_cap" << YAML::Value << p.value_cap;
  e << YAML::Key << "grid" << YAML::Value << pcc::to_string(p.grid_shape);
  e << YAML::EndMap;
  e << YAML::Key << "reconstruction" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "granularity" << YAML::Value << to_string(r.granularity);
  e << YAML::Key << "iterations" << YAML::Value << r.iterations;
  e << YAML::Key << "final_iterations" << YAML::Value << r.final_iterations;
  e << YAML::Key << "budget" << YAML::Value << r.budget;
  e << YAML::Key << "lr_bounds" << YAML::Value << r.lr_bounds;
  e << YAML::Key << "lr_alpha" << YAML::Value << r.lr_alpha;
  e << YAML::Key << "drop_prob" << YAML::Value << r.drop_prob;
  e << YAML::Key << "reg_lambda" << YAML::Value << r.reg_lambda;
  e << YAML::Key << "warmup" << YAML::Value << r.warmup;
  e << YAML::Key << "beta_start" << YAML::Value << r.beta_start;
  e << YAML::Key << "beta_end" << YAML::Value << r.beta_end;
  e << YAML::Key << "learn_rounding" << YAML::Value << r.learn_rounding;
  e << YAML::Key << "eval_items" << YAML::Value << r.eval_items;
  e << YAML::Key << "checkpoints" << YAML::Value << r.checkpoints;
  e << YAML::Key << "interaction" << YAML::Value << (r.interaction == Interaction::TwoWay ? "two_way" : "identity");
  e << YAML::EndMap;
  std::vector<std::string> bits, methods, modes;
  for (const BitPair& b : cfg.bits) bits.push_back(b.label());
  for (Metric mm : cfg.methods) methods.push_back(to_string(mm));
  for (ReconMode rm : cfg.recon) modes.push_back(to_string(rm));
  e << YAML::Key << "bits" << YAML::Value << YAML::Flow << bits;
  e << YAML::Key << "methods" << YAML::Value << YAML::Flow << methods;
  e << YAML::Key << "recon_modes" << YAML::Value << YAML::Flow << modes;
  e << YAML::Key << "thetas" << YAML::Value << YAML::Flow << cfg.thetas;
  e << YAML::Key << "seeds" << YAML::Value << YAML::Flow << cfg.seeds;
  e << YAML::Key << "output" << YAML::Value << cfg.output;
  e << YAML::Key << "report" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "include_weight_params" << YAML::Value << cfg.include_weight_params;
  e << YAML::EndMap;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

}  // namespace saq
