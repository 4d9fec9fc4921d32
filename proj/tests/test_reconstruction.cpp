#include "saq/calibration.hpp"
#include "saq/errors.hpp"
#include "saq/harness.hpp"
#include "saq/reconstruction.hpp"

#include <gtest/gtest.h>

#include "gradcheck.hpp"

using namespace saq;
using namespace saq::testing;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 5) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.num_heads = 2;
  c.encoder_layers = 4;
  c.global_layer_indices = {1, 3};
  c.window_size = 2;
  c.decoder_layers = 1;
  c.neck_dim = 16;
  c.seed = seed;
  return c;
}

std::vector<CalibItem> tiny_items(const ModelConfig& c, int n, std::uint64_t seed) {
  const std::vector<Mat> imgs = gen_synthetic_images(c, n, seed);
  return make_items(imgs, gen_prompts(imgs, c, seed));
}

ReconConfig tiny_recon() {
  ReconConfig r;
  r.iterations = 30;
  r.final_iterations = 40;
  r.budget = 1.0;
  r.eval_items = 3;
  r.checkpoints = 3;
  r.lr_bounds = 1e-3;
  return r;
}

std::vector<std::string> all_prefixes(const std::vector<ReconUnit>& units) {
  std::vector<std::string> out;
  for (const ReconUnit& u : units) out.insert(out.end(), u.prefixes.begin(), u.prefixes.end());
  return out;
}

}  // namespace

TEST(ReconConfig, BudgetScalesBothCounts) {
  ReconConfig r;
  EXPECT_EQ(r.unit_iterations(), 200);
  EXPECT_EQ(r.final_unit_iterations(), 1000);
  r.budget = 1.0;
  EXPECT_EQ(r.unit_iterations(), 2000);
  EXPECT_EQ(r.final_unit_iterations(), 10000);
}

TEST(ReconConfig, RejectsInvalidValues) {
  ReconConfig r;
  r.iterations = 0;
  EXPECT_THROW(r.validate(), ConfigError);
  r = ReconConfig{};
  r.drop_prob = 1.5;
  EXPECT_THROW(r.validate(), ConfigError);
  r = ReconConfig{};
  r.budget = 0.0;
  EXPECT_THROW(r.validate(), ConfigError);
  r = ReconConfig{};
  r.lr_alpha = -1.0;
  EXPECT_THROW(r.validate(), ConfigError);
}

TEST(PlanUnits, StageGranularityFollowsThePartition) {
  const Model m = build_model(tiny_config());
  ReconConfig r;
  const auto units = plan_units(m, stage_partition(m.config().layer_kinds()), r);
  ASSERT_EQ(units.size(), 5u);
  EXPECT_EQ(units[0].kind, UnitKind::Encoder);
  EXPECT_EQ(units[0].first, 0);
  EXPECT_EQ(units[0].last, 1);
  EXPECT_EQ(units[0].prefixes, (std::vector<std::string>{"enc.0.", "enc.1."}));
  EXPECT_EQ(units[0].objective, ReconObjective::Par);
  EXPECT_EQ(units[1].first, 2);
  EXPECT_EQ(units[1].last, 3);
  EXPECT_EQ(units[2].kind, UnitKind::Neck);
  EXPECT_EQ(units[2].objective, ReconObjective::Local);
  EXPECT_EQ(units[3].kind, UnitKind::DecoderBlock);
  EXPECT_EQ(units[4].kind, UnitKind::FinalAttention);
  EXPECT_EQ(units[3].iterations, r.unit_iterations());
  EXPECT_EQ(units[4].iterations, r.final_unit_iterations());
}

TEST(PlanUnits, LayerGranularityHasOneUnitPerLayer) {
  const Model m = build_model(tiny_config());
  ReconConfig r;
  r.granularity = ReconGranularity::Layer;
  r.encoder_objective = ReconObjective::Local;
  const auto units = plan_units(m, stage_partition(m.config().layer_kinds()), r);
  ASSERT_EQ(units.size(), 7u);
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(units[l].first, l);
    EXPECT_EQ(units[l].last, l);
    EXPECT_EQ(units[l].objective, ReconObjective::Local);
  }
}

TEST(ParLoss, ZeroOnIdenticalTokensAndSymmetric) {
  std::mt19937_64 rng(1);
  const Mat a = random_mat(16, 8, rng);
  const Mat b = random_mat(16, 8, rng);
  EXPECT_EQ(par_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(par_loss(a, b), par_loss(b, a));
  EXPECT_NEAR(par_loss(a, b), (a - b).squaredNorm(), 1e-12);
  EXPECT_THROW(par_loss(a, Mat(a.rows(), a.cols() + 1)), DimensionError);
}

TEST(ParLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const Mat target = random_mat(6, 4, rng);
  const OpFn op = [&](Tape&, const std::vector<Var>& in) { return par_loss(in[0], target); };
  EXPECT_LT(gradcheck(op, {random_mat(6, 4, rng)}, rng), 1e-6);
}

class Recon : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    model_ = std::make_unique<Model>(build_model(tiny_config()));
    items_ = tiny_items(model_->config(), 6, 11);
  }
  static CalibrationResult calibrate(int bits, Metric method = Metric::Pcc) {
    CalibPolicy p = CalibPolicy::for_method(method, bits, bits);
    p.grid_steps = 25;
    return calibrate_model(*model_, items_, p);
  }
  static std::unique_ptr<Model> model_;
  static std::vector<CalibItem> items_;
};
std::unique_ptr<Model> Recon::model_;
std::vector<CalibItem> Recon::items_;

TEST_F(Recon, StageTargetsMatchTheFullPrecisionForward) {
  const auto targets = collect_stage_targets(*model_, items_);
  const StagePlan plan = stage_partition(model_->config().layer_kinds());
  ASSERT_EQ(targets.size(), items_.size() * plan.stages.size());
  for (const ReconTarget& t : targets) {
    Tape tape;
    const CalibItem& item = items_[t.item];
    const EncodeResult enc = encode_image(tape, *model_, item.image);
    const Var emb = forward_from_stage(tape, *model_, enc.stage_outputs[t.stage], t.stage);
    const Var hybrid = two_way_transformer(tape, *model_, emb, encode_prompts(tape, *model_, item.prompts));
    EXPECT_EQ(tape.count_ops("fake_quant"), 0u);
    EXPECT_LT((hybrid.value() - t.hybrid).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST_F(Recon, IdentityInteractionTargetsAreTheNeckOutput) {
  const auto targets = collect_stage_targets(*model_, items_, Interaction::Identity);
  for (const ReconTarget& t : targets) {
    Tape tape;
    const EncodeResult enc = encode_image(tape, *model_, items_[t.item].image);
    const Var emb = forward_from_stage(tape, *model_, enc.stage_outputs[t.stage], t.stage);
    EXPECT_LT((emb.value() - t.hybrid).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST_F(Recon, MismatchedImagesAndPromptsAreRejected) {
  std::vector<Mat> imgs{items_[0].image, items_[1].image};
  std::vector<std::vector<PromptSpec>> prompts{items_[0].prompts};
  EXPECT_THROW(collect_stage_targets(*model_, imgs, prompts), ContractError);
}

TEST_F(Recon, ParLossVanishesWithQuantizationDisabled) {
  CalibrationResult c = calibrate(4);
  for (auto& [n, q] : c.env.acts) q.enabled = false;
  for (auto& [n, q] : c.env.weights) q.enabled = false;
  const auto targets = collect_stage_targets(*model_, items_);
  for (const ReconTarget& t : targets) {
    Tape tape;
    Hooks hooks;
    hooks.quant = &c.env;
    const EncodeResult enc = encode_image(tape, *model_, items_[t.item].image, hooks);
    const Var emb = forward_from_stage(tape, *model_, enc.stage_outputs[t.stage], t.stage);
    const Var hybrid = two_way_transformer(tape, *model_, emb, encode_prompts(tape, *model_, items_[t.item].prompts));
    EXPECT_EQ(par_loss(hybrid.value(), t.hybrid), 0.0);
  }
}

TEST_F(Recon, FourBitStageZeroStartsWithPositiveLoss) {
  CalibrationResult c = calibrate(4);
  ReconConfig r = tiny_recon();
  const auto units = plan_units(*model_, stage_partition(model_->config().layer_kinds()), r);
  const UnitReport rep = optimize_unit(*model_, c.env, units[0], {}, items_, r);
  EXPECT_GT(rep.initial_loss, 0.0);
  EXPECT_LE(rep.final_loss, rep.initial_loss);
  EXPECT_EQ(rep.objective, ReconObjective::Par);
  EXPECT_EQ(rep.iterations, 30);
}

TEST_F(Recon, EveryUnitIsNonWorseningAndTheTeacherStaysClean) {
  CalibrationResult c = calibrate(4);
  const ReconReport rep =
      run_reconstruction(*model_, c.env, stage_partition(model_->config().layer_kinds()), items_, tiny_recon());
  ASSERT_EQ(rep.units.size(), 5u);
  for (const UnitReport& u : rep.units) {
    EXPECT_LE(u.final_loss, u.initial_loss) << u.name;
    EXPECT_GE(u.best_iteration, 0) << u.name;
  }
  EXPECT_EQ(rep.teacher_fake_quant_ops, 0u);
  EXPECT_TRUE(c.env.active_prefixes.empty());
  EXPECT_TRUE(c.env.learn_prefixes.empty());
}

TEST_F(Recon, OnlyTheCurrentUnitChanges) {
  CalibrationResult c = calibrate(4);
  const Model before = *model_;
  const QuantEnv env0 = c.env;
  ReconConfig r = tiny_recon();
  const auto units = plan_units(*model_, stage_partition(model_->config().layer_kinds()), r);
  optimize_unit(*model_, c.env, units[1], units[0].prefixes, items_, r);
  for (const auto& [name, q] : c.env.acts) {
    if (has_any_prefix(name, units[1].prefixes)) continue;
    EXPECT_EQ(q.low.data(0, 0), env0.acts.at(name).low.data(0, 0)) << name;
    EXPECT_EQ(q.up.data(0, 0), env0.acts.at(name).up.data(0, 0)) << name;
  }
  for (const auto& [name, q] : c.env.weights) {
    if (has_any_prefix(name, units[1].prefixes)) {
      EXPECT_EQ(q.channels.channels.size(), env0.weights.at(name).channels.channels.size());
      continue;
    }
    EXPECT_FALSE(q.rounding.has_value()) << name;
  }
  for (const auto& [name, t] : model_->params()) EXPECT_EQ(t.data, before.param(name).data) << name;
}

TEST_F(Recon, RunsAreDeterministic) {
  auto once = [&] {
    CalibrationResult c = calibrate(4);
    ReconConfig r = tiny_recon();
    r.seed = 9;
    const ReconReport rep = run_reconstruction(*model_, c.env, stage_partition(model_->config().layer_kinds()),
                                               items_, r);
    std::vector<double> out;
    for (const UnitReport& u : rep.units) out.push_back(u.final_loss);
    for (const auto& [n, q] : c.env.acts) out.push_back(q.up.data(0, 0));
    return out;
  };
  EXPECT_EQ(once(), once());
}

TEST_F(Recon, HighPrecisionAgreesWithTheFullPrecisionModel) {
  const CalibrationResult c = calibrate(16, Metric::Mse);
  const AgreementReport ag = evaluate_agreement(*model_, c.env, items_, 0.5);
  EXPECT_EQ(ag.items, static_cast<int>(items_.size()));
  EXPECT_GT(ag.mean_mask_iou, 0.97);
  EXPECT_LT(ag.mean_dist_pcc, 0.05);
  ASSERT_EQ(ag.stage_hybrid_mse.size(), 2u);
  for (double v : ag.stage_hybrid_mse) EXPECT_LT(v, 1e-4);
}

TEST_F(Recon, LowPrecisionDisagreesMoreThanHighPrecision) {
  const AgreementReport hi = evaluate_agreement(*model_, calibrate(8).env, items_, 0.5);
  const AgreementReport lo = evaluate_agreement(*model_, calibrate(3).env, items_, 0.5);
  EXPECT_GT(lo.stage_hybrid_mse[0], hi.stage_hybrid_mse[0]);
  EXPECT_GT(lo.mean_dist_pcc, hi.mean_dist_pcc);
}

TEST(MaskIou, Fixtures) {
  Mat a(2, 2), b(2, 2);
  a << 1, -1, 1, -1;
  b << 1, 1, -1, -1;
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(mask_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(mask_iou(-a.cwiseAbs(), -b.cwiseAbs()), 1.0);
  EXPECT_THROW(mask_iou(a, Mat(3, 2)), DimensionError);
}
