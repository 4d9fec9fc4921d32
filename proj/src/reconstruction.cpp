#include "saq/reconstruction.hpp"

#include "saq/errors.hpp"
#include "saq/ops.hpp"
#include "saq/pcc.hpp"
#include "saq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace saq {

const char* to_string(ReconGranularity g) { return g == ReconGranularity::Layer ? "layer" : "stage"; }
const char* to_string(ReconObjective o) { return o == ReconObjective::Par ? "par" : "local"; }

void ReconConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("recon config: " + m); };
  if (iterations <= 0 || final_iterations <= 0) fail("iterations must be positive");
  if (!(budget > 0.0)) fail("budget multiplier must be positive");
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) fail("drop probability must lie in [0, 1]");
  if (!(lr_bounds >= 0.0) || !(lr_alpha >= 0.0)) fail("learning rates must be non-negative");
  if (!(reg_lambda >= 0.0)) fail("regularizer weight must be non-negative");
  if (!(warmup >= 0.0 && warmup < 1.0)) fail("warmup must lie in [0, 1)");
  if (eval_items <= 0 || checkpoints <= 0) fail("eval_items and checkpoints must be positive");
}

long ReconConfig::unit_iterations() const {
  return std::max(1L, std::lround(static_cast<double>(iterations) * budget));
}

long ReconConfig::final_unit_iterations() const {
  return std::max(1L, std::lround(static_cast<double>(final_iterations) * budget));
}

Var par_loss(const Var& q_hybrid, const Mat& target) {
  return squared_distance(q_hybrid, q_hybrid.tape().constant(target));
}

double par_loss(const Mat& q_hybrid, const Mat& target) {
  if (q_hybrid.rows() != target.rows() || q_hybrid.cols() != target.cols()) {
    throw DimensionError("par_loss: shape mismatch");
  }
  return (q_hybrid - target).squaredNorm();
}

Var local_recon_loss(const Var& q_out, const Mat& fp_out) { return par_loss(q_out, fp_out); }

namespace {

Hooks quant_hooks(QuantEnv* env) {
  Hooks h;
  h.quant = env;
  return h;
}

Mat interact(Tape& tape, const Model& model, const Mat& tokens, const Mat& prompts, Interaction interaction) {
  const Var emb = neck(tape, model, {}, tape.constant(tokens));
  if (interaction == Interaction::Identity) return emb.value();
  return two_way_transformer(tape, model, emb, tape.constant(prompts)).value();
}

void audit_teacher(const Tape& tape) {
  if (tape.count_ops("fake_quant") != 0) throw ContractError("fake-quant node on the teacher path");
}

/// Full-precision activations of one item, recorded once per reconstruction.
struct FpTrace {
  std::vector<Mat> layer_out;
  Mat prompts;
  Mat embedding;
  std::vector<Mat> block_q;
  std::vector<Mat> block_k;
  Mat final_q;
};

FpTrace trace_fp(const Model& model, const CalibItem& item) {
  FpTrace fp;
  Tape tape;
  NoGradGuard guard(tape);
  Var x = patch_embed(tape, model, item.image);
  for (int l = 0; l < model.config().encoder_layers; ++l) {
    x = encoder_layer(tape, model, {}, l, x);
    fp.layer_out.push_back(x.value());
  }
  const Var prompts = encode_prompts(tape, model, item.prompts);
  fp.prompts = prompts.value();
  const Var emb = neck(tape, model, {}, x);
  fp.embedding = emb.value();
  DecoderState st = decoder_init(tape, model, emb, prompts);
  for (int i = 0; i < model.config().decoder_layers; ++i) {
    two_way_block(tape, model, {}, i, st);
    fp.block_q.push_back(st.queries.value());
    fp.block_k.push_back(st.keys.value());
  }
  final_attention(tape, model, {}, st);
  fp.final_q = st.queries.value();
  audit_teacher(tape);
  return fp;
}

/// Student-side input of a unit: tokens for encoder/neck units, decoder state otherwise.
struct UnitInput {
  Mat tokens;
  Mat queries, keys, query_pe, key_pe;
};

struct UnitTarget {
  Mat a;
  Mat b;
};

UnitInput student_input(const Model& model, QuantEnv* env, const CalibItem& item, const ReconUnit& unit) {
  Tape tape;
  NoGradGuard guard(tape);
  const Hooks hooks = quant_hooks(env);
  const int layers = model.config().encoder_layers;
  const int stop = unit.kind == UnitKind::Encoder ? unit.first : layers;
  Var x = patch_embed(tape, model, item.image);
  for (int l = 0; l < stop; ++l) x = encoder_layer(tape, model, hooks, l, x);
  UnitInput in;
  if (unit.kind == UnitKind::Encoder || unit.kind == UnitKind::Neck) {
    in.tokens = x.value();
    return in;
  }
  const Var emb = neck(tape, model, hooks, x);
  DecoderState st = decoder_init(tape, model, emb, encode_prompts(tape, model, item.prompts));
  const int blocks = unit.kind == UnitKind::DecoderBlock ? unit.first : model.config().decoder_layers;
  for (int i = 0; i < blocks; ++i) two_way_block(tape, model, hooks, i, st);
  in.queries = st.queries.value();
  in.keys = st.keys.value();
  in.query_pe = st.query_pe.value();
  in.key_pe = st.key_pe.value();
  return in;
}

UnitTarget unit_target(const Model& model, const FpTrace& fp, const ReconUnit& unit, Interaction interaction,
                       std::size_t& teacher_ops) {
  switch (unit.kind) {
    case UnitKind::Encoder: {
      if (unit.objective == ReconObjective::Local) return {fp.layer_out[unit.last], {}};
      Tape tape;
      NoGradGuard guard(tape);
      UnitTarget t{interact(tape, model, fp.layer_out[unit.last], fp.prompts, interaction), {}};
      teacher_ops += tape.count_ops("fake_quant");
      audit_teacher(tape);
      return t;
    }
    case UnitKind::Neck:
      return {fp.embedding, {}};
    case UnitKind::DecoderBlock:
      return {fp.block_q[unit.first], fp.block_k[unit.first]};
    case UnitKind::FinalAttention:
      return {fp.final_q, {}};
  }
  return {};
}

Var unit_loss(Tape& tape, const Model& model, QuantEnv* env, const ReconUnit& unit, const UnitInput& in,
              const UnitTarget& target, const Mat& prompts, Interaction interaction) {
  const Hooks hooks = quant_hooks(env);
  switch (unit.kind) {
    case UnitKind::Encoder: {
      Var x = tape.constant(in.tokens);
      for (int l = unit.first; l <= unit.last; ++l) x = encoder_layer(tape, model, hooks, l, x);
      if (unit.objective == ReconObjective::Local) return local_recon_loss(x, target.a);
      // Neck and decoder are outside the unit, so their quantizers are inactive.
      Var hybrid = neck(tape, model, hooks, x);
      if (interaction == Interaction::TwoWay) {
        hybrid = two_way_transformer(tape, model, hybrid, tape.constant(prompts), hooks);
      }
      return par_loss(hybrid, target.a);
    }
    case UnitKind::Neck:
      return local_recon_loss(neck(tape, model, hooks, tape.constant(in.tokens)), target.a);
    case UnitKind::DecoderBlock:
    case UnitKind::FinalAttention: {
      DecoderState st{tape.constant(in.queries), tape.constant(in.keys), tape.constant(in.query_pe),
                      tape.constant(in.key_pe)};
      if (unit.kind == UnitKind::DecoderBlock) {
        two_way_block(tape, model, hooks, unit.first, st);
        return add(local_recon_loss(st.queries, target.a), local_recon_loss(st.keys, target.b));
      }
      final_attention(tape, model, hooks, st);
      return local_recon_loss(st.queries, target.a);
    }
  }
  throw ContractError("unknown reconstruction unit");
}

struct Snapshot {
  std::map<std::string, std::pair<double, double>> bounds;
  std::map<std::string, std::optional<Mat>> alphas;  // nullopt: nearest rounding
};

Snapshot take_snapshot(const QuantEnv& env, const std::vector<std::string>& prefixes, bool hard) {
  Snapshot s;
  for (const auto& [name, q] : env.acts) {
    if (has_any_prefix(name, prefixes)) s.bounds[name] = {q.low.data(0, 0), q.up.data(0, 0)};
  }
  for (const auto& [name, q] : env.weights) {
    if (!has_any_prefix(name, prefixes)) continue;
    if (hard && q.rounding) {
      s.alphas[name] = q.rounding->alpha.data;
    } else {
      s.alphas[name] = std::nullopt;
    }
  }
  return s;
}

void restore(QuantEnv& env, const Snapshot& s) {
  for (const auto& [name, b] : s.bounds) env.acts.at(name).set_bounds(b.first, b.second);
  for (const auto& [name, a] : s.alphas) {
    WeightQuantizer& w = env.weights.at(name);
    if (a) {
      w.rounding->alpha.data = *a;
      w.mode = quant::RoundingMode::Hard;
    } else {
      w.rounding.reset();
      w.mode = quant::RoundingMode::Nearest;
    }
  }
}

void set_weight_mode(QuantEnv& env, const std::vector<std::string>& prefixes, quant::RoundingMode mode) {
  for (auto& [name, q] : env.weights) {
    if (q.rounding && has_any_prefix(name, prefixes)) q.mode = mode;
  }
}

void keep_bounds_ordered(QuantEnv& env, const std::vector<std::string>& prefixes) {
  for (auto& [name, q] : env.acts) {
    if (!has_any_prefix(name, prefixes)) continue;
    const double lo = q.low.data(0, 0);
    const double gap = 1e-6 * std::max(1.0, std::abs(lo));
    if (!(q.up.data(0, 0) > lo + gap)) q.up.data(0, 0) = lo + gap;
  }
}

}  // namespace

std::vector<ReconTarget> collect_stage_targets(const Model& model, const std::vector<Mat>& images,
                                               const std::vector<std::vector<PromptSpec>>& prompts,
                                               Interaction interaction) {
  if (images.size() != prompts.size()) {
    throw ContractError("collect_stage_targets: " + std::to_string(images.size()) + " images but " +
                        std::to_string(prompts.size()) + " prompt lists");
  }
  std::vector<ReconTarget> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tape tape;
    NoGradGuard guard(tape);
    const EncodeResult enc = encode_image(tape, model, images[i]);
    const Var p = encode_prompts(tape, model, prompts[i]);
    for (int k = 0; k < static_cast<int>(enc.stage_outputs.size()); ++k) {
      const Var emb = forward_from_stage(tape, model, enc.stage_outputs[k], k);
      ReconTarget t;
      t.stage = k;
      t.item = static_cast<int>(i);
      t.prompts = p.value();
      t.hybrid = interaction == Interaction::Identity ? emb.value() : two_way_transformer(tape, model, emb, p).value();
      out.push_back(std::move(t));
    }
    audit_teacher(tape);
  }
  return out;
}

std::vector<ReconTarget> collect_stage_targets(const Model& model, const std::vector<CalibItem>& calib,
                                               Interaction interaction) {
  std::vector<Mat> images;
  std::vector<std::vector<PromptSpec>> prompts;
  for (const CalibItem& c : calib) {
    images.push_back(c.image);
    prompts.push_back(c.prompts);
  }
  return collect_stage_targets(model, images, prompts, interaction);
}

std::vector<ReconUnit> plan_units(const Model& model, const StagePlan& plan, const ReconConfig& cfg) {
  std::vector<ReconUnit> units;
  auto enc_unit = [&](const std::string& name, int first, int last) {
    ReconUnit u;
    u.name = name;
    u.kind = UnitKind::Encoder;
    u.first = first;
    u.last = last;
    for (int l = first; l <= last; ++l) u.prefixes.push_back("enc." + std::to_string(l) + ".");
    u.objective = cfg.encoder_objective;
    u.iterations = cfg.unit_iterations();
    units.push_back(u);
  };
  if (plan.num_layers() != model.config().encoder_layers) {
    throw ContractError("stage plan does not cover the encoder");
  }
  for (std::size_t s = 0; s < plan.stages.size(); ++s) {
    const Stage& st = plan.stages[s];
    if (cfg.granularity == ReconGranularity::Stage) {
      enc_unit("enc.stage" + std::to_string(s), st.first, st.last);
    } else {
      for (int l = st.first; l <= st.last; ++l) enc_unit("enc." + std::to_string(l), l, l);
    }
  }
  ReconUnit n;
  n.name = "neck";
  n.kind = UnitKind::Neck;
  n.prefixes = {"neck."};
  n.iterations = cfg.unit_iterations();
  units.push_back(n);
  for (int i = 0; i < model.config().decoder_layers; ++i) {
    ReconUnit d;
    d.name = "dec." + std::to_string(i);
    d.kind = UnitKind::DecoderBlock;
    d.first = d.last = i;
    d.prefixes = {d.name + "."};
    d.iterations = cfg.unit_iterations();
    units.push_back(d);
  }
  ReconUnit f;
  f.name = "dec.final";
  f.kind = UnitKind::FinalAttention;
  f.prefixes = {"dec.final."};
  f.iterations = cfg.final_unit_iterations();
  units.push_back(f);
  return units;
}

namespace {

UnitReport optimize_unit_impl(const Model& model, QuantEnv& env, const ReconUnit& unit,
                              const std::vector<std::string>& done, const std::vector<CalibItem>& calib,
                              const ReconConfig& cfg, const std::vector<FpTrace>& fp, std::size_t& teacher_ops) {
  cfg.validate();
  if (calib.empty()) throw ContractError("reconstruction needs calibration items");
  UnitReport rep;
  rep.name = unit.name;
  rep.objective = unit.objective;
  rep.iterations = unit.iterations;

  // Inputs come from the already-quantized prefix.
  env.learn_prefixes.clear();
  env.drop_prob = 0.0;
  env.rng = nullptr;
  env.active_prefixes = done;
  std::vector<UnitInput> inputs;
  std::vector<UnitTarget> targets;
  for (std::size_t i = 0; i < calib.size(); ++i) {
    inputs.push_back(student_input(model, done.empty() ? nullptr : &env, calib[i], unit));
    targets.push_back(unit_target(model, fp[i], unit, cfg.interaction, teacher_ops));
  }

  std::vector<std::string> active = done;
  active.insert(active.end(), unit.prefixes.begin(), unit.prefixes.end());
  env.active_prefixes = active;

  if (cfg.learn_rounding) {
    for (auto& [name, q] : env.weights) {
      if (!has_any_prefix(name, unit.prefixes) || !q.enabled) continue;
      q.rounding = quant::RoundingVars::from_weight(model.param(name).data, q.channels);
      q.mode = quant::RoundingMode::Soft;
    }
  }
  std::vector<Tensor*> bounds = env.learnable_bounds(unit.prefixes);
  std::vector<Tensor*> alphas = env.learnable_rounding(unit.prefixes);
  if (bounds.empty() && alphas.empty()) throw ContractError("unit '" + unit.name + "' has no learnable parameters");

  const std::size_t n_eval = std::min<std::size_t>(static_cast<std::size_t>(cfg.eval_items), calib.size());
  auto evaluate = [&] {
    double acc = 0.0;
    for (std::size_t i = 0; i < n_eval; ++i) {
      Tape tape;
      NoGradGuard guard(tape);
      acc += unit_loss(tape, model, &env, unit, inputs[i], targets[i], fp[i].prompts, cfg.interaction).item();
    }
    return acc / static_cast<double>(n_eval);
  };

  // Calibrated parameters with nearest rounding are the first candidate.
  set_weight_mode(env, unit.prefixes, quant::RoundingMode::Nearest);
  Snapshot best = take_snapshot(env, unit.prefixes, false);
  rep.initial_loss = evaluate();
  set_weight_mode(env, unit.prefixes, quant::RoundingMode::Soft);
  double best_loss = rep.initial_loss;

  Adam opt_bounds(AdamOptions{.lr = cfg.lr_bounds});
  Adam opt_alpha(AdamOptions{.lr = cfg.lr_alpha});
  std::mt19937_64 pick = make_stream(cfg.seed, "recon." + unit.name);
  std::mt19937_64 drop = make_stream(cfg.seed, "qdrop." + unit.name);
  std::uniform_int_distribution<std::size_t> item_dist(0, calib.size() - 1);
  const long iters = unit.iterations;
  const long every = std::max(1L, iters / cfg.checkpoints);

  for (long it = 0; it < iters; ++it) {
    env.learn_prefixes = unit.prefixes;
    env.drop_prob = cfg.drop_prob;
    env.rng = &drop;
    const std::size_t i = item_dist(pick);
    Tape tape;
    Var loss = unit_loss(tape, model, &env, unit, inputs[i], targets[i], fp[i].prompts, cfg.interaction);
    const double warm = cfg.warmup * static_cast<double>(iters);
    if (!alphas.empty() && cfg.reg_lambda > 0.0 && static_cast<double>(it) >= warm) {
      const double beta = quant::anneal_beta(it, iters, cfg.warmup, cfg.beta_start, cfg.beta_end);
      for (Tensor* a : alphas) loss = add(loss, scale(quant::rounding_regularizer(tape.leaf(*a), beta), cfg.reg_lambda));
    }
    for (Tensor* t : bounds) t->zero_grad();
    for (Tensor* t : alphas) t->zero_grad();
    tape.backward(loss);
    if (!bounds.empty()) opt_bounds.step(bounds);
    if (!alphas.empty()) opt_alpha.step(alphas);
    keep_bounds_ordered(env, unit.prefixes);
    env.learn_prefixes.clear();
    env.drop_prob = 0.0;
    env.rng = nullptr;

    if ((it + 1) % every == 0 || it + 1 == iters) {
      set_weight_mode(env, unit.prefixes, quant::RoundingMode::Hard);
      const double l = evaluate();
      if (l < best_loss) {
        best_loss = l;
        best = take_snapshot(env, unit.prefixes, true);
        rep.best_iteration = it + 1;
      }
      set_weight_mode(env, unit.prefixes, quant::RoundingMode::Soft);
    }
  }
  restore(env, best);
  rep.final_loss = best_loss;
  for (const auto& [name, q] : env.acts) {
    if (!has_any_prefix(name, unit.prefixes)) continue;
    if (q.low.data(0, 0) < q.observed_min || q.up.data(0, 0) > q.observed_max) ++rep.bound_excursions;
  }
  env.active_prefixes = active;
  return rep;
}

}  // namespace

UnitReport optimize_unit(const Model& model, QuantEnv& env, const ReconUnit& unit,
                         const std::vector<std::string>& done, const std::vector<CalibItem>& calib,
                         const ReconConfig& cfg) {
  std::vector<FpTrace> fp;
  for (const CalibItem& c : calib) fp.push_back(trace_fp(model, c));
  std::size_t teacher_ops = 0;
  return optimize_unit_impl(model, env, unit, done, calib, cfg, fp, teacher_ops);
}

ReconReport run_reconstruction(const Model& model, QuantEnv& env, const StagePlan& plan,
                               const std::vector<CalibItem>& calib, const ReconConfig& cfg) {
  cfg.validate();
  ReconReport rep;
  std::vector<FpTrace> fp;
  for (const CalibItem& c : calib) fp.push_back(trace_fp(model, c));
  std::vector<std::string> done;
  for (const ReconUnit& unit : plan_units(model, plan, cfg)) {
    rep.units.push_back(optimize_unit_impl(model, env, unit, done, calib, cfg, fp, rep.teacher_fake_quant_ops));
    done.insert(done.end(), unit.prefixes.begin(), unit.prefixes.end());
  }
  env.active_prefixes.clear();
  env.learn_prefixes.clear();
  env.drop_prob = 0.0;
  env.rng = nullptr;
  return rep;
}

double mask_iou(const Mat& fp_logits, const Mat& q_logits) {
  if (fp_logits.rows() != q_logits.rows() || fp_logits.cols() != q_logits.cols()) {
    throw DimensionError("mask_iou: shape mismatch");
  }
  const auto a = (fp_logits.array() > 0.0);
  const auto b = (q_logits.array() > 0.0);
  const double inter = (a && b).cast<double>().sum();
  const double uni = (a || b).cast<double>().sum();
  return uni == 0.0 ? 1.0 : inter / uni;
}

AgreementReport evaluate_agreement(const Model& model, const QuantEnv& env, const std::vector<CalibItem>& eval,
                                   double theta) {
  if (eval.empty()) throw ContractError("evaluation set is empty");
  QuantEnv q = env;
  q.active_prefixes.clear();
  q.learn_prefixes.clear();
  q.drop_prob = 0.0;
  q.rng = nullptr;
  AgreementReport rep;
  rep.items = static_cast<int>(eval.size());
  double pcc_acc = 0.0;
  std::size_t pcc_count = 0;
  for (const CalibItem& item : eval) {
    std::vector<AttentionTrace> fp_traces, q_traces;
    Hooks fp_hooks;
    fp_hooks.traces = &fp_traces;
    Hooks q_hooks;
    q_hooks.quant = &q;
    q_hooks.traces = &q_traces;

    Tape tape;
    NoGradGuard guard(tape);
    const Var prompts = encode_prompts(tape, model, item.prompts);
    const EncodeResult fp_enc = encode_image(tape, model, item.image, fp_hooks);
    const DecodeResult fp_dec = decode_masks(tape, model, fp_enc.embedding, prompts, fp_hooks);
    const EncodeResult q_enc = encode_image(tape, model, item.image, q_hooks);
    const DecodeResult q_dec = decode_masks(tape, model, q_enc.embedding, prompts, q_hooks);
    rep.mean_mask_iou += mask_iou(fp_dec.mask_logits, q_dec.mask_logits);

    rep.stage_hybrid_mse.resize(fp_enc.stage_outputs.size(), 0.0);
    for (std::size_t k = 0; k < fp_enc.stage_outputs.size(); ++k) {
      const int s = static_cast<int>(k);
      const Var fp_h = two_way_transformer(tape, model, forward_from_stage(tape, model, fp_enc.stage_outputs[k], s),
                                           prompts);
      const Var q_h = two_way_transformer(tape, model, forward_from_stage(tape, model, q_enc.stage_outputs[k], s),
                                          prompts);
      rep.stage_hybrid_mse[k] += (fp_h.value() - q_h.value()).array().square().mean();
    }
    for (std::size_t m = 0; m < fp_traces.size(); ++m) {
      pcc_acc += pcc::dist_pcc(fp_traces[m].weights, q_traces[m].weights, theta);
      ++pcc_count;
    }
  }
  const double n = static_cast<double>(eval.size());
  rep.mean_mask_iou /= n;
  for (double& v : rep.stage_hybrid_mse) v /= n;
  rep.mean_dist_pcc = pcc_count == 0 ? 0.0 : pcc_acc / static_cast<double>(pcc_count);
  return rep;
}

}  // namespace saq
