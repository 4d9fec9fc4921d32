#pragma once

#include "saq/calibration.hpp"
#include "saq/model.hpp"
#include "saq/reconstruction.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace saq {

/// Procedural [C x H*W] images: a smooth gradient plus a few Gaussian blobs.
std::vector<Mat> gen_synthetic_images(const ModelConfig& cfg, int n, std::uint64_t seed,
                                      std::string_view stream = "data");

/// Per image: a foreground point on the brightest blob and a box around it.
std::vector<std::vector<PromptSpec>> gen_prompts(const std::vector<Mat>& images, const ModelConfig& cfg,
                                                 std::uint64_t seed, std::string_view stream = "prompts");

std::vector<CalibItem> make_items(const std::vector<Mat>& images, const std::vector<std::vector<PromptSpec>>& prompts);

/// Items as a SAQW tensor file: "image.<i>" plus "prompts.<i>" with one
/// [kind, x0, y0, x1, y1, foreground] row per prompt (kind 0 = point, 1 = box).
void save_items(const std::vector<CalibItem>& items, const std::string& path);
std::vector<CalibItem> load_items(const std::string& path);

struct OutlierSpec {
  /// Hook names ending in ".q.out" or ".k.out". Empty: the key output of every
  /// decoder attention module.
  std::vector<std::string> targets;
  double bulk_scale = 1.0;  // multiplier on the measured bulk spread used as the spike reference
  double magnitude = 180.0;
  double fraction = 0.002;  // share of projection columns that receive a spike
  double headroom = 1.1;    // spike peak relative to magnitude * bulk spread

  /// Throws ConfigError unless fraction is in (0, 0.05], magnitude > 10 and
  /// bulk_scale, headroom > 0.
  void validate() const;
};

struct OutlierEntry {
  std::string target;
  std::vector<int> columns;
  double bulk_sigma = 0.0;  // inter-quartile range / 1.349 after injection
  double max_abs = 0.0;
  double ratio = 0.0;       // max_abs / bulk_sigma
};

/// Adds a rank-1 spike to selected output columns of the target projection and
/// zeroes the matching columns of the partner projection, so the full-precision
/// attention maps are unchanged while the target activation gets a heavy tail.
/// Throws VerificationError if the measured ratio on `calib` stays below
/// 0.8 * magnitude.
std::vector<OutlierEntry> inject_outliers(Model& model, const OutlierSpec& spec, const std::vector<CalibItem>& calib,
                                          std::uint64_t seed);

/// Robust spread: inter-quartile range / 1.349.
double bulk_sigma(std::vector<double> values);

/// Values of one hook over a calibration set at full precision.
std::vector<double> hook_values(const Model& model, const std::vector<CalibItem>& calib, const std::string& hook);

enum class ReconMode { None, Local, Par };
const char* to_string(ReconMode m);
ReconMode recon_mode_from_string(const std::string& s);

struct BitPair {
  int weights = 8;
  int acts = 8;
  std::string label() const;
  /// Parses "W6A6"; throws ConfigError otherwise.
  static BitPair parse(const std::string& s);
  bool operator==(const BitPair&) const = default;
};

struct ExperimentConfig {
  ModelConfig model;
  int calib_images = 32;
  int eval_images = 16;
  bool inject = true;
  OutlierSpec outliers;
  std::vector<BitPair> bits{{8, 8}, {6, 6}, {4, 4}};
  std::vector<Metric> methods{Metric::Mse, Metric::Pcc};
  std::vector<ReconMode> recon{ReconMode::None};
  CalibPolicy policy = CalibPolicy::defaults();  // theta, scope, grid shape and sample budgets
  ReconConfig recon_cfg;
  std::vector<double> thetas{0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<std::uint64_t> seeds{0};
  bool include_weight_params = false;
  std::string output;  // empty: stdout

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

struct ClipRange {
  std::string name;
  std::string metric;
  double x_low = 0.0;
  double x_up = 0.0;
};

struct QuantParamRecord {
  std::string tensor_name;
  int bits = 8;
  std::string granularity;
  std::vector<double> x_low, x_up, scale;
  std::vector<std::int64_t> zero_point;
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::string variant;
  std::string method;
  std::string recon;
  std::string granularity;
  BitPair bits;
  double theta = 0.5;
  std::vector<ClipRange> clip_ranges;  // QK tensors
  double dist_pcc = 0.0;
  std::vector<double> hybrid_mse;
  double mask_iou = 0.0;
  double runtime_s = 0.0;
  std::vector<UnitReport> units;
  std::vector<OutlierEntry> outliers;
  std::vector<QuantParamRecord> quant_params;
  std::vector<std::string> warnings;
};

inline constexpr int kReportSchemaVersion = 1;

/// Append-only list of run records.
class Report {
 public:
  std::string kind = "experiment";
  std::vector<std::pair<std::string, std::string>> settings;

  void append(RunRecord r) { records_.push_back(std::move(r)); }
  const std::vector<RunRecord>& records() const { return records_; }

 private:
  std::vector<RunRecord> records_;
};

/// Model, data and (optionally) injected outliers for one seed.
struct SeedContext {
  std::uint64_t seed = 0;
  Model model;
  std::vector<CalibItem> calib;
  std::vector<CalibItem> eval;
  std::vector<OutlierEntry> outliers;
};

SeedContext make_seed_context(const ExperimentConfig& cfg, std::uint64_t seed);

CalibPolicy policy_for(const ExperimentConfig& cfg, Metric method, const BitPair& bits, double theta);

/// build -> inject -> calibrate -> reconstruct -> evaluate for one combination.
RunRecord run_single(const ExperimentConfig& cfg, const SeedContext& ctx, Metric method, const BitPair& bits,
                     ReconMode recon, double theta);

/// Every (seed, method, bits, recon) combination, ordered by seed, method, bits.
Report run_experiment(const ExperimentConfig& cfg);

/// PCC per theta (plus one MSE baseline per seed and bit pair) at the first recon mode.
Report sweep_theta(const ExperimentConfig& cfg);
Report sweep_theta(const ExperimentConfig& cfg, const std::vector<double>& thetas);

/// {local, par} x {layer, stage} x {mse init, pcc init} per seed and bit pair.
Report sweep_granularity(const ExperimentConfig& cfg);

}  // namespace saq
