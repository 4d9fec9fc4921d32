#include "saq/config.hpp"
#include "saq/errors.hpp"
#include "saq/harness.hpp"
#include "saq/report.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

using namespace saq;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string bits;
  std::string method;
  std::string recon;
  std::string out;
  bool full_budget = false;
  std::string model;
  std::string data;
  std::string eval;
  std::string in;
  std::string format;
  std::string split = "calib";
  std::optional<double> theta;
};

ExperimentConfig load_config(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  if (o.seed) cfg.seeds = {*o.seed};
  if (!o.bits.empty()) cfg.bits = {BitPair::parse(o.bits)};
  if (!o.method.empty()) cfg.methods = {metric_from_string(o.method)};
  if (!o.recon.empty()) cfg.recon = {recon_mode_from_string(o.recon)};
  if (o.full_budget) cfg.recon_cfg.budget = 1.0;
  if (o.theta) cfg.policy.theta = *o.theta;
  cfg.validate();
  return cfg;
}

std::uint64_t first_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

SeedContext load_context(const ExperimentConfig& cfg, const Options& o) {
  const std::uint64_t seed = first_seed(cfg);
  if (o.model.empty()) {
    SeedContext ctx = make_seed_context(cfg, seed);
    if (!o.data.empty()) ctx.calib = load_items(o.data);
    if (!o.eval.empty()) ctx.eval = load_items(o.eval);
    return ctx;
  }
  Model model = load_weights(o.model);
  const ModelConfig& mc = model.config();
  SeedContext ctx{seed, std::move(model), {}, {}, {}};
  if (o.data.empty()) {
    const std::vector<Mat> imgs = gen_synthetic_images(mc, cfg.calib_images, seed, "data.calib");
    ctx.calib = make_items(imgs, gen_prompts(imgs, mc, seed, "prompts.calib"));
  } else {
    ctx.calib = load_items(o.data);
  }
  if (o.eval.empty()) {
    const std::vector<Mat> imgs = gen_synthetic_images(mc, cfg.eval_images, seed, "data.eval");
    ctx.eval = make_items(imgs, gen_prompts(imgs, mc, seed, "prompts.eval"));
  } else {
    ctx.eval = load_items(o.eval);
  }
  return ctx;
}

void write_out(const Options& o, const std::string& text) {
  if (o.out.empty() || o.out == "-") {
    std::cout << text;
  } else {
    write_text(o.out, text);
  }
}

ReportFormat format_for(const Options& o) {
  if (!o.format.empty()) return report_format_from_string(o.format);
  const auto n = o.out.size();
  return n >= 4 && o.out.compare(n - 4, 4, ".csv") == 0 ? ReportFormat::Csv : ReportFormat::Json;
}

void emit(Options o, const Report& rep, const std::string& fallback = "") {
  if (o.out.empty()) o.out = fallback;
  write_out(o, render_report(rep, format_for(o)));
}

void gen_model(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  const SeedContext ctx = make_seed_context(cfg, first_seed(cfg));
  if (o.out.empty()) throw ConfigError("gen-model needs --out");
  save_weights(ctx.model, o.out);
  for (const OutlierEntry& e : ctx.outliers) {
    std::fprintf(stderr, "%s: %zu columns, max/sigma = %.1f\n", e.target.c_str(), e.columns.size(), e.ratio);
  }
}

void gen_data(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  if (o.out.empty()) throw ConfigError("gen-data needs --out");
  if (o.split != "calib" && o.split != "eval") throw ConfigError("--split must be calib or eval");
  const std::uint64_t seed = first_seed(cfg);
  const int n = o.split == "calib" ? cfg.calib_images : cfg.eval_images;
  const std::vector<Mat> imgs = gen_synthetic_images(cfg.model, n, seed, "data." + o.split);
  save_items(make_items(imgs, gen_prompts(imgs, cfg.model, seed, "prompts." + o.split)), o.out);
}

void calibrate(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  const SeedContext ctx = load_context(cfg, o);
  const CalibrationResult res =
      calibrate_model(ctx.model, ctx.calib, policy_for(cfg, cfg.methods.front(), cfg.bits.front(), cfg.policy.theta));
  write_out(o, render_calibration(res));
}

void reconstruct(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  const SeedContext ctx = load_context(cfg, o);
  const BitPair bits = cfg.bits.front();
  CalibrationResult res =
      calibrate_model(ctx.model, ctx.calib, policy_for(cfg, cfg.methods.front(), bits, cfg.policy.theta));
  const ReconMode mode = cfg.recon.front() == ReconMode::None ? ReconMode::Par : cfg.recon.front();
  ReconConfig rc = cfg.recon_cfg;
  rc.encoder_objective = mode == ReconMode::Par ? ReconObjective::Par : ReconObjective::Local;
  rc.seed = ctx.seed;
  const ReconReport rr =
      run_reconstruction(ctx.model, res.env, stage_partition(ctx.model.config().layer_kinds()), ctx.calib, rc);
  write_out(o, render_recon(rr));
}

void evaluate(const Options& o) {
  const ExperimentConfig cfg = load_config(o);
  if (o.model.empty() && o.data.empty() && o.eval.empty()) {
    emit(o, run_experiment(cfg), cfg.output);
    return;
  }
  const SeedContext ctx = load_context(cfg, o);
  Report rep;
  rep.kind = "experiment";
  for (Metric m : cfg.methods) {
    for (const BitPair& b : cfg.bits) {
      for (ReconMode r : cfg.recon) rep.append(run_single(cfg, ctx, m, b, r, cfg.policy.theta));
    }
  }
  emit(o, rep, cfg.output);
}

void report(const Options& o) {
  if (o.in.empty()) throw ConfigError("report needs --in");
  emit(o, load_report(o.in));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segment-anything style quantization toolkit"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "YAML experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Run seed (overrides the config seed list)");
    sub->add_option("--out", o.out, "Output path ('-' or empty: stdout)");
  };
  auto run_flags = [&](CLI::App* sub) {
    sub->add_option("--bits", o.bits, "Bit pair such as W6A6");
    sub->add_option("--method", o.method, "minmax, mse or pcc");
    sub->add_option("--recon", o.recon, "none, local or par");
    sub->add_option("--theta", o.theta, "Focus threshold");
    sub->add_flag("--full-budget", o.full_budget, "Use the full reconstruction iteration budget");
  };
  auto inputs = [&](CLI::App* sub) {
    sub->add_option("--model", o.model, "SAQW model file from gen-model")->check(CLI::ExistingFile);
    sub->add_option("--data", o.data, "Calibration data file from gen-data")->check(CLI::ExistingFile);
    sub->add_option("--eval", o.eval, "Evaluation data file from gen-data")->check(CLI::ExistingFile);
  };

  CLI::App* gm = app.add_subcommand("gen-model", "Build a model (with injected outliers if enabled) and save it");
  common(gm);
  CLI::App* gd = app.add_subcommand("gen-data", "Generate synthetic images and prompts");
  common(gd);
  gd->add_option("--split", o.split, "calib or eval");
  CLI::App* ca = app.add_subcommand("calibrate", "Calibrate and print per-tensor clipping ranges");
  CLI::App* re = app.add_subcommand("reconstruct", "Calibrate, then reconstruct unit by unit");
  CLI::App* ev = app.add_subcommand("evaluate", "Run the pipeline and report agreement with the FP model");
  for (CLI::App* s : {ca, re, ev}) {
    common(s);
    run_flags(s);
    inputs(s);
  }
  CLI::App* st = app.add_subcommand("sweep-theta", "PCC pipeline repeated per focus threshold");
  CLI::App* sg = app.add_subcommand("sweep-granularity", "Reconstruction objective x granularity x init grid");
  for (CLI::App* s : {st, sg}) {
    common(s);
    run_flags(s);
    s->add_option("--format", o.format, "json or csv (default: from --out extension)");
  }
  CLI::App* rp = app.add_subcommand("report", "Re-emit a JSON report as JSON or CSV");
  rp->add_option("--in", o.in, "JSON report")->check(CLI::ExistingFile);
  rp->add_option("--out", o.out, "Output path");
  rp->add_option("--format", o.format, "json or csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gm) gen_model(o);
    else if (*gd) gen_data(o);
    else if (*ca) calibrate(o);
    else if (*re) reconstruct(o);
    else if (*ev) evaluate(o);
    else if (*st) {
      const ExperimentConfig cfg = load_config(o);
      emit(o, sweep_theta(cfg), cfg.output);
    } else if (*sg) {
      const ExperimentConfig cfg = load_config(o);
      emit(o, sweep_granularity(cfg), cfg.output);
    }
    else if (*rp) report(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const VerificationError& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
