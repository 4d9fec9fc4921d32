#pragma once

#include "saq/quantizer.hpp"

#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace saq {

/// Per-tensor activation quantizer with learnable 1x1 clipping bounds.
struct ActQuantizer {
  int bits = 8;
  Tensor low{scalar_mat(0.0), true};
  Tensor up{scalar_mat(1.0), true};
  bool enabled = true;
  /// Full-precision range seen during calibration; learned bounds may leave it.
  double observed_min = -std::numeric_limits<double>::infinity();
  double observed_max = std::numeric_limits<double>::infinity();

  quant::QuantParams params() const;
  void set_bounds(double x_low, double x_up);
};

/// Per-output-channel weight quantizer. Bounds stay at their calibrated values;
/// only the rounding variables are learned.
struct WeightQuantizer {
  int bits = 8;
  quant::ChannelParams channels;
  std::optional<quant::RoundingVars> rounding;
  quant::RoundingMode mode = quant::RoundingMode::Nearest;
  bool enabled = true;
};

/// Named fake-quant hook points for one model. Hook names are
/// "<linear>.in", "<linear>.out", "<linear>.w", "<attention>.softmax" and
/// "<block>.res*.in".
class QuantEnv {
 public:
  std::map<std::string, ActQuantizer> acts;
  std::map<std::string, WeightQuantizer> weights;

  /// Only quantizers whose name starts with one of these prefixes are applied
  /// (empty: all).
  std::vector<std::string> active_prefixes;
  /// Quantizers under these prefixes put their bounds / rounding variables on
  /// the tape as gradient-tracking leaves (empty: none).
  std::vector<std::string> learn_prefixes;
  /// QDrop probability applied to learning activation quantizers.
  double drop_prob = 0.0;
  std::mt19937_64* rng = nullptr;

  bool is_active(const std::string& name) const;
  bool is_learning(const std::string& name) const;

  Var apply_act(Tape& tape, const std::string& name, const Var& x);
  Var apply_weight(Tape& tape, const std::string& name, const Var& w);

  std::vector<Tensor*> learnable_bounds(const std::vector<std::string>& prefixes);
  std::vector<Tensor*> learnable_rounding(const std::vector<std::string>& prefixes);

  /// Switches every soft rounding under `prefixes` to hard rounding.
  void harden(const std::vector<std::string>& prefixes);
};

bool has_any_prefix(const std::string& name, const std::vector<std::string>& prefixes);

}  // namespace saq
