#pragma once

#include "saq/calibration.hpp"
#include "saq/model.hpp"
#include "saq/quant_env.hpp"

#include <string>
#include <vector>

namespace saq {

enum class ReconGranularity { Layer, Stage };
enum class ReconObjective { Local, Par };
/// How stage tokens reach the hybrid-token target. Identity skips the
/// two-way decoder (neck output only).
enum class Interaction { TwoWay, Identity };

const char* to_string(ReconGranularity g);
const char* to_string(ReconObjective o);

struct ReconConfig {
  ReconGranularity granularity = ReconGranularity::Stage;
  ReconObjective encoder_objective = ReconObjective::Par;
  long iterations = 2000;
  long final_iterations = 10000;
  double budget = 0.1;  // multiplier on both iteration counts
  double lr_bounds = 4e-5;
  double lr_alpha = 1e-3;
  double drop_prob = 0.5;
  double reg_lambda = 0.01;
  double warmup = 0.2;
  double beta_start = 20.0;
  double beta_end = 2.0;
  bool learn_rounding = true;
  int eval_items = 8;      // items scored for best-seen retention
  int checkpoints = 5;     // best-seen evaluations per unit (plus the initial one)
  Interaction interaction = Interaction::TwoWay;
  std::uint64_t seed = 0;

  /// Throws ConfigError on invalid values.
  void validate() const;
  long unit_iterations() const;
  long final_unit_iterations() const;
};

/// FP hybrid image tokens for one (item, stage) pair.
struct ReconTarget {
  int stage = 0;
  int item = 0;
  Mat hybrid;
  Mat prompts;
};

/// Runs the FP model end to end; throws ContractError if a fake-quant node
/// appears on the teacher path or if image and prompt counts differ.
std::vector<ReconTarget> collect_stage_targets(const Model& model, const std::vector<Mat>& images,
                                               const std::vector<std::vector<PromptSpec>>& prompts,
                                               Interaction interaction = Interaction::TwoWay);
std::vector<ReconTarget> collect_stage_targets(const Model& model, const std::vector<CalibItem>& calib,
                                               Interaction interaction = Interaction::TwoWay);

/// Squared L2 over all token entries (one item per call).
Var par_loss(const Var& q_hybrid, const Mat& target);
double par_loss(const Mat& q_hybrid, const Mat& target);
Var local_recon_loss(const Var& q_out, const Mat& fp_out);

enum class UnitKind { Encoder, Neck, DecoderBlock, FinalAttention };

struct ReconUnit {
  std::string name;
  UnitKind kind = UnitKind::Encoder;
  int first = 0;  // encoder layers or decoder block index
  int last = 0;
  std::vector<std::string> prefixes;
  ReconObjective objective = ReconObjective::Local;
  long iterations = 0;
};

/// Encoder units (stages or layers), then the neck, each two-way block and the
/// final cross-attention with its extended budget.
std::vector<ReconUnit> plan_units(const Model& model, const StagePlan& plan, const ReconConfig& cfg);

struct UnitReport {
  std::string name;
  ReconObjective objective = ReconObjective::Local;
  long iterations = 0;
  double initial_loss = 0.0;  // evaluation subset, calibrated parameters
  double final_loss = 0.0;    // evaluation subset, retained parameters
  long best_iteration = 0;    // 0: calibration was never beaten
  int bound_excursions = 0;   // learned bounds outside the observed range
};

struct ReconReport {
  std::vector<UnitReport> units;
  std::size_t teacher_fake_quant_ops = 0;
};

/// Learns activation bounds and rounding variables of one unit. Quantizers of
/// earlier units (listed in `done`) stay active and frozen; everything after
/// the unit runs at full precision.
UnitReport optimize_unit(const Model& model, QuantEnv& env, const ReconUnit& unit,
                         const std::vector<std::string>& done, const std::vector<CalibItem>& calib,
                         const ReconConfig& cfg);

/// Sequential pass over all units. Leaves every quantizer active and frozen.
ReconReport run_reconstruction(const Model& model, QuantEnv& env, const StagePlan& plan,
                               const std::vector<CalibItem>& calib, const ReconConfig& cfg);

struct AgreementReport {
  double mean_mask_iou = 0.0;
  std::vector<double> stage_hybrid_mse;  // quantized encoder prefix, FP neck and decoder
  double mean_dist_pcc = 0.0;            // over attention modules and items
  int items = 0;
};

/// Binarized (logit > 0) mask IoU against the FP model, plus per-stage
/// hybrid-token MSE and attention-focus distance.
AgreementReport evaluate_agreement(const Model& model, const QuantEnv& env, const std::vector<CalibItem>& eval,
                                   double theta = 0.5);

double mask_iou(const Mat& fp_logits, const Mat& q_logits);

}  // namespace saq
