#pragma once

#include "saq/model.hpp"
#include "saq/pcc.hpp"
#include "saq/quant_env.hpp"

#include <map>
#include <string>
#include <vector>

namespace saq {

enum class Metric { MinMax, Mse, Pcc };

const char* to_string(Metric m);
/// Throws ConfigError for unknown names.
Metric metric_from_string(const std::string& s);

struct PolicyRule {
  std::string pattern;  // ECMAScript regex, searched in the hook name
  Metric metric = Metric::Mse;
};

/// Maps activation hook names to a calibration metric (first matching rule
/// wins) and fixes bit-widths, sample budgets and search-grid shape.
struct CalibPolicy {
  std::vector<PolicyRule> rules;
  Metric weight_metric = Metric::Mse;
  int weight_bits = 8;
  int act_bits = 8;
  double theta = 0.5;
  pcc::MaxScope scope = pcc::MaxScope::Global;
  int pcc_samples = 1;  // PCC uses the first n calibration items
  int mse_samples = 0;  // 0: all items
  pcc::GridShape grid_shape = pcc::GridShape::Capped;
  int grid_steps = 100;
  double grid_min_fraction = 0.005;
  int refine_radius = 3;
  int pcc_sweeps = 2;
  pcc::TieBreak tie_break = pcc::TieBreak::Narrowest;
  std::size_t value_cap = 32768;

  /// QK tensors (inputs/outputs of the query and key linears) -> PCC, other activations -> MSE.
  static CalibPolicy defaults(int weight_bits = 8, int act_bits = 8);
  /// Policy for one comparison arm: minmax / mse apply to everything, pcc as in defaults().
  static CalibPolicy for_method(Metric method, int weight_bits, int act_bits, double theta = 0.5);

  /// Throws ConfigError when no rule matches.
  Metric metric_for(const std::string& hook) const;
};

/// Regex matching the QK hook names.
inline constexpr const char* kQKPattern = R"(\.(q|k)\.(in|out)$)";
bool is_qk_tensor(const std::string& hook);

struct CalibItem {
  Mat image;
  std::vector<PromptSpec> prompts;
};

struct CalibRecord {
  std::string name;
  Metric metric = Metric::Mse;
  int bits = 8;
  double x_low = 0.0;
  double x_up = 0.0;
  double objective = 0.0;
  int candidates_evaluated = 0;
  bool per_channel = false;
  bool zero_point_clamped = false;
};

struct CalibrationResult {
  QuantEnv env;
  std::vector<CalibRecord> records;
  std::vector<std::string> warnings;
};

/// Full-precision pass over the calibration set, then per-hook clipping search.
/// Weights are per-channel, activations per-tensor.
CalibrationResult calibrate_model(const Model& model, const std::vector<CalibItem>& calib, const CalibPolicy& policy);

/// Re-runs only the PCC search of the QK tensors of `base` with a different
/// theta/scope, leaving every other quantizer untouched.
CalibrationResult recalibrate_qk(const Model& model, const std::vector<CalibItem>& calib, const CalibPolicy& policy,
                                 const CalibrationResult& base);

/// Captures the Q/K inputs of every attention module on one calibration item.
std::map<std::string, pcc::QKSample> capture_qk_samples(const Model& model, const CalibItem& item);

/// Full-precision forward of one item through the whole model with hooks.
DecodeResult run_full(Tape& tape, const Model& model, const CalibItem& item, const Hooks& hooks = {});

}  // namespace saq
