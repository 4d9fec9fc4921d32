#include "saq/harness.hpp"

#include "saq/errors.hpp"
#include "saq/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <map>
#include <numbers>
#include <random>

namespace saq {

std::vector<Mat> gen_synthetic_images(const ModelConfig& cfg, int n, std::uint64_t seed, std::string_view stream) {
  if (n < 0) throw ConfigError("image count must be non-negative");
  std::mt19937_64 rng = make_stream(seed, stream);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  const int hw = cfg.image_size;
  const int c = cfg.in_channels;
  std::vector<Mat> out;
  for (int i = 0; i < n; ++i) {
    Mat img(c, static_cast<Index>(hw) * hw);
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    const double grad_amp = 0.2 + 0.4 * unit(rng);
    std::vector<double> base(c);
    for (double& b : base) b = -0.3 + 0.6 * unit(rng);
    const int blobs = 2 + static_cast<int>(rng() % 3);
    struct Blob {
      double cx, cy, sigma, amp;
      std::vector<double> color;
    };
    std::vector<Blob> bs;
    for (int b = 0; b < blobs; ++b) {
      Blob bl;
      bl.cx = 6.0 + (hw - 12.0) * unit(rng);
      bl.cy = 6.0 + (hw - 12.0) * unit(rng);
      bl.sigma = 3.0 + 6.0 * unit(rng);
      bl.amp = 0.6 + 1.4 * unit(rng);
      for (int ch = 0; ch < c; ++ch) bl.color.push_back(0.3 + 0.7 * unit(rng));
      bs.push_back(std::move(bl));
    }
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);
    for (int y = 0; y < hw; ++y) {
      for (int x = 0; x < hw; ++x) {
        const double t = ((x - hw / 2.0) * ca + (y - hw / 2.0) * sa) / hw;
        std::vector<double> acc(c, 0.0);
        for (const Blob& bl : bs) {
          const double d2 = (x - bl.cx) * (x - bl.cx) + (y - bl.cy) * (y - bl.cy);
          const double g = bl.amp * std::exp(-d2 / (2.0 * bl.sigma * bl.sigma));
          for (int ch = 0; ch < c; ++ch) acc[ch] += g * bl.color[ch];
        }
        for (int ch = 0; ch < c; ++ch) img(ch, y * hw + x) = base[ch] + grad_amp * t + acc[ch] + noise(rng);
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<std::vector<PromptSpec>> gen_prompts(const std::vector<Mat>& images, const ModelConfig& cfg,
                                                 std::uint64_t seed, std::string_view stream) {
  std::mt19937_64 rng = make_stream(seed, stream);
  const int hw = cfg.image_size;
  std::vector<std::vector<PromptSpec>> out;
  for (const Mat& img : images) {
    if (img.cols() != static_cast<Index>(hw) * hw) throw DimensionError("gen_prompts: image size mismatch");
    // Luminance smoothed with a 5x5 box so single noisy pixels cannot win.
    Mat lum(hw, hw);
    for (int y = 0; y < hw; ++y) {
      for (int x = 0; x < hw; ++x) lum(y, x) = img.col(y * hw + x).mean();
    }
    Mat smooth(hw, hw);
    for (int y = 0; y < hw; ++y) {
      for (int x = 0; x < hw; ++x) {
        double s = 0.0;
        int n = 0;
        for (int dy = -2; dy <= 2; ++dy) {
          for (int dx = -2; dx <= 2; ++dx) {
            const int yy = y + dy;
            const int xx = x + dx;
            if (yy < 0 || yy >= hw || xx < 0 || xx >= hw) continue;
            s += lum(yy, xx);
            ++n;
          }
        }
        smooth(y, x) = s / n;
      }
    }
    Index py = 0, px = 0;
    const double peak = smooth.maxCoeff(&py, &px);
    std::vector<double> sorted(smooth.data(), smooth.data() + smooth.size());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
    const double background = sorted[sorted.size() / 2];
    const double thr = background + 0.5 * (peak - background);
    // Region growing from the peak.
    std::vector<char> seen(static_cast<std::size_t>(hw) * hw, 0);
    std::deque<std::pair<int, int>> queue{{static_cast<int>(py), static_cast<int>(px)}};
    seen[py * hw + px] = 1;
    int y0 = static_cast<int>(py), y1 = y0, x0 = static_cast<int>(px), x1 = x0;
    while (!queue.empty()) {
      auto [y, x] = queue.front();
      queue.pop_front();
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[0] >= hw || q[1] < 0 || q[1] >= hw) continue;
        const std::size_t idx = static_cast<std::size_t>(q[0]) * hw + q[1];
        if (seen[idx] || smooth(q[0], q[1]) <= thr) continue;
        seen[idx] = 1;
        queue.push_back({q[0], q[1]});
      }
    }
    std::uniform_int_distribution<int> jitter(-1, 1);
    std::uniform_int_distribution<int> margin(0, 2);
    auto clampc = [&](int v) { return static_cast<double>(std::clamp(v, 0, hw - 1)); };
    PromptSpec point;
    point.kind = PromptKind::Point;
    point.x0 = clampc(static_cast<int>(px) + jitter(rng));
    point.y0 = clampc(static_cast<int>(py) + jitter(rng));
    PromptSpec box;
    box.kind = PromptKind::Box;
    box.x0 = clampc(x0 - margin(rng));
    box.y0 = clampc(y0 - margin(rng));
    box.x1 = clampc(x1 + margin(rng));
    box.y1 = clampc(y1 + margin(rng));
    out.push_back({point, box});
  }
  return out;
}

std::vector<CalibItem> make_items(const std::vector<Mat>& images, const std::vector<std::vector<PromptSpec>>& prompts) {
  if (images.size() != prompts.size()) throw ContractError("image and prompt counts differ");
  std::vector<CalibItem> items;
  for (std::size_t i = 0; i < images.size(); ++i) items.push_back({images[i], prompts[i]});
  return items;
}

void save_items(const std::vector<CalibItem>& items, const std::string& path) {
  std::vector<NamedTensor> tensors;
  for (std::size_t i = 0; i < items.size(); ++i) {
    tensors.push_back({"image." + std::to_string(i), items[i].image, false});
    Mat p(static_cast<Index>(items[i].prompts.size()), 6);
    for (std::size_t k = 0; k < items[i].prompts.size(); ++k) {
      const PromptSpec& ps = items[i].prompts[k];
      p.row(static_cast<Index>(k)) << (ps.kind == PromptKind::Box ? 1.0 : 0.0), ps.x0, ps.y0, ps.x1, ps.y1,
          ps.foreground ? 1.0 : 0.0;
    }
    tensors.push_back({"prompts." + std::to_string(i), p, false});
  }
  save_tensor_file(path, tensors);
}

std::vector<CalibItem> load_items(const std::string& path) {
  std::map<std::string, Mat> byname;
  for (NamedTensor& t : load_tensor_file(path)) byname.emplace(t.name, std::move(t.value));
  std::vector<CalibItem> items;
  for (std::size_t i = 0;; ++i) {
    auto img = byname.find("image." + std::to_string(i));
    if (img == byname.end()) break;
    auto pr = byname.find("prompts." + std::to_string(i));
    if (pr == byname.end() || pr->second.cols() != 6) throw FormatError("data file: bad prompts for item " + std::to_string(i));
    CalibItem item{img->second, {}};
    for (Index r = 0; r < pr->second.rows(); ++r) {
      PromptSpec ps;
      ps.kind = pr->second(r, 0) != 0.0 ? PromptKind::Box : PromptKind::Point;
      ps.x0 = pr->second(r, 1);
      ps.y0 = pr->second(r, 2);
      ps.x1 = pr->second(r, 3);
      ps.y1 = pr->second(r, 4);
      ps.foreground = pr->second(r, 5) != 0.0;
      item.prompts.push_back(ps);
    }
    items.push_back(std::move(item));
  }
  if (items.size() * 2 != byname.size()) throw FormatError("data file: unexpected tensors in '" + path + "'");
  return items;
}

void OutlierSpec::validate() const {
  if (!(fraction > 0.0 && fraction <= 0.05)) throw ConfigError("outlier fraction must lie in (0, 0.05]");
  if (!(magnitude > 10.0)) throw ConfigError("outlier magnitude must exceed 10");
  if (!(bulk_scale > 0.0)) throw ConfigError("outlier bulk_scale must be positive");
  if (!(headroom > 0.0)) throw ConfigError("outlier headroom must be positive");
}

double bulk_sigma(std::vector<double> values) {
  if (values.size() < 4) throw ContractError("bulk_sigma needs at least four values");
  auto quantile = [&](double q) {
    const std::size_t k = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
    std::nth_element(values.begin(), values.begin() + static_cast<long>(k), values.end());
    return values[k];
  };
  const double q1 = quantile(0.25);
  const double q3 = quantile(0.75);
  return (q3 - q1) / 1.349;
}

namespace {

using HookMats = std::map<std::string, std::vector<Mat>>;

HookMats hook_mats(const Model& model, const std::vector<CalibItem>& calib, const std::vector<std::string>& names) {
  HookMats out;
  for (const std::string& n : names) out[n];
  Hooks hooks;
  hooks.observer = [&](const std::string& name, const Mat& v) {
    auto it = out.find(name);
    if (it != out.end()) it->second.push_back(v);
  };
  for (const CalibItem& item : calib) {
    Tape tape;
    NoGradGuard guard(tape);
    run_full(tape, model, item, hooks);
  }
  for (const auto& [name, mats] : out) {
    if (mats.empty()) throw ConfigError("no activation named '" + name + "'");
  }
  return out;
}

std::vector<double> flatten(const std::vector<Mat>& mats) {
  std::vector<double> v;
  for (const Mat& m : mats) v.insert(v.end(), m.data(), m.data() + m.size());
  return v;
}

struct Target {
  std::string name, module, side, partner;
};

}  // namespace

std::vector<double> hook_values(const Model& model, const std::vector<CalibItem>& calib, const std::string& hook) {
  return flatten(hook_mats(model, calib, {hook}).at(hook));
}

std::vector<OutlierEntry> inject_outliers(Model& model, const OutlierSpec& spec, const std::vector<CalibItem>& calib,
                                          std::uint64_t seed) {
  spec.validate();
  if (calib.empty()) throw ContractError("outlier verification needs calibration items");
  std::vector<std::string> names = spec.targets;
  if (names.empty()) {
    for (const std::string& m : model.attention_modules()) {
      if (m.rfind("dec.", 0) == 0) names.push_back(m + ".k.out");
    }
  }
  std::vector<Target> targets;
  std::vector<std::string> probe;
  for (const std::string& name : names) {
    auto ends = [&](const std::string& s) {
      return name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    Target t{name, name.substr(0, name.size() >= 6 ? name.size() - 6 : 0), "", ""};
    if (ends(".k.out")) {
      t.side = "k";
      t.partner = "q";
    } else if (ends(".q.out")) {
      t.side = "q";
      t.partner = "k";
    } else {
      throw ConfigError("outlier target '" + name + "' must be a query or key projection output");
    }
    if (!model.has_param(t.module + "." + t.side + ".w")) throw ConfigError("unknown outlier target '" + name + "'");
    for (const Target& o : targets) {
      if (o.module == t.module) throw ConfigError("at most one outlier target per attention module: '" + name + "'");
    }
    probe.push_back(name);
    probe.push_back(t.module + "." + t.side + ".in");
    targets.push_back(std::move(t));
  }

  // The partner column is zeroed, so a spike never reaches the attention
  // scores and one measurement pass before and after covers every target.
  const HookMats before = hook_mats(model, calib, probe);
  std::mt19937_64 rng = make_stream(seed, "outliers");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<OutlierEntry> out;
  for (const Target& t : targets) {
    const double sigma0 = bulk_sigma(flatten(before.at(t.name)));
    const std::vector<Mat>& inputs = before.at(t.module + "." + t.side + ".in");
    Mat& w = model.param(t.module + "." + t.side + ".w").data;
    Mat& wp = model.param(t.module + "." + t.partner + ".w").data;
    Mat& bp = model.param(t.module + "." + t.partner + ".b").data;
    const Index dim = w.cols();
    const int n_cols = std::max(1, static_cast<int>(std::lround(spec.fraction * static_cast<double>(dim))));
    std::vector<int> cols(static_cast<std::size_t>(dim));
    for (Index i = 0; i < dim; ++i) cols[static_cast<std::size_t>(i)] = static_cast<int>(i);
    std::shuffle(cols.begin(), cols.end(), rng);
    cols.resize(static_cast<std::size_t>(n_cols));
    std::sort(cols.begin(), cols.end());

    const double want = spec.magnitude * spec.bulk_scale * sigma0;
    for (int c : cols) {
      Mat u(w.rows(), 1);
      for (Index i = 0; i < u.rows(); ++i) u(i, 0) = normal(rng);
      u /= u.norm();
      double peak = 0.0;
      for (const Mat& x : inputs) peak = std::max(peak, (x * u).cwiseAbs().maxCoeff());
      if (!(peak > 0.0)) throw VerificationError("outlier injection: projection input is identically zero");
      w.col(c) += u * (spec.headroom * want / peak);
      wp.col(c).setZero();
      bp(0, c) = 0.0;
    }
    OutlierEntry e;
    e.target = t.name;
    e.columns = cols;
    out.push_back(std::move(e));
  }

  const HookMats after = hook_mats(model, calib, names);
  for (OutlierEntry& e : out) {
    std::vector<double> v = flatten(after.at(e.target));
    for (double x : v) e.max_abs = std::max(e.max_abs, std::abs(x));
    e.bulk_sigma = bulk_sigma(std::move(v));
    e.ratio = e.bulk_sigma > 0.0 ? e.max_abs / e.bulk_sigma : 0.0;
    if (e.ratio < 0.8 * spec.magnitude * spec.bulk_scale) {
      throw VerificationError("outlier injection on '" + e.target + "' reached ratio " + std::to_string(e.ratio) +
                              ", need at least " + std::to_string(0.8 * spec.magnitude * spec.bulk_scale));
    }
  }
  return out;
}

const char* to_string(ReconMode m) {
  switch (m) {
    case ReconMode::None:
      return "none";
    case ReconMode::Local:
      return "local";
    case ReconMode::Par:
      return "par";
  }
  return "?";
}

ReconMode recon_mode_from_string(const std::string& s) {
  if (s == "none") return ReconMode::None;
  if (s == "local") return ReconMode::Local;
  if (s == "par") return ReconMode::Par;
  throw ConfigError("unknown reconstruction mode '" + s + "'");
}

std::string BitPair::label() const { return "W" + std::to_string(weights) + "A" + std::to_string(acts); }

BitPair BitPair::parse(const std::string& s) {
  BitPair b;
  int w = 0, a = 0;
  char tail = 0;
  if (std::sscanf(s.c_str(), "W%dA%d%c", &w, &a, &tail) != 2) {
    throw ConfigError("bit pair '" + s + "' must look like W6A6");
  }
  if (w < 2 || w > 16 || a < 2 || a > 16) throw ConfigError("bit-widths must lie in [2, 16]: '" + s + "'");
  b.weights = w;
  b.acts = a;
  return b;
}

void ExperimentConfig::validate() const {
  model.validate();
  recon_cfg.validate();
  if (inject) outliers.validate();
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (bits.empty()) throw ConfigError("at least one bit pair is required");
  if (methods.empty()) throw ConfigError("at least one calibration method is required");
  if (recon.empty()) throw ConfigError("at least one reconstruction mode is required");
  if (calib_images <= 0 || eval_images <= 0) throw ConfigError("image counts must be positive");
  for (const BitPair& b : bits) BitPair::parse(b.label());
  for (double t : thetas) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("theta values must lie in (0, 1)");
  }
  if (!(policy.theta > 0.0 && policy.theta < 1.0)) throw ConfigError("theta must lie in (0, 1)");
  if (policy.grid_steps < 1) throw ConfigError("grid_steps must be positive");
  if (!(policy.grid_min_fraction > 0.0 && policy.grid_min_fraction <= 1.0)) {
    throw ConfigError("grid_min_fraction must lie in (0, 1]");
  }
}

SeedContext make_seed_context(const ExperimentConfig& cfg, std::uint64_t seed) {
  ModelConfig mc = cfg.model;
  mc.seed = seed;
  SeedContext ctx{seed, build_model(mc), {}, {}, {}};
  const std::vector<Mat> calib_imgs = gen_synthetic_images(mc, cfg.calib_images, seed, "data.calib");
  ctx.calib = make_items(calib_imgs, gen_prompts(calib_imgs, mc, seed, "prompts.calib"));
  const std::vector<Mat> eval_imgs = gen_synthetic_images(mc, cfg.eval_images, seed, "data.eval");
  ctx.eval = make_items(eval_imgs, gen_prompts(eval_imgs, mc, seed, "prompts.eval"));
  if (cfg.inject) ctx.outliers = inject_outliers(ctx.model, cfg.outliers, ctx.calib, seed);
  return ctx;
}

CalibPolicy policy_for(const ExperimentConfig& cfg, Metric method, const BitPair& bits, double theta) {
  CalibPolicy p = cfg.policy;
  const CalibPolicy m = CalibPolicy::for_method(method, bits.weights, bits.acts, theta);
  p.rules = m.rules;
  p.weight_metric = m.weight_metric;
  p.weight_bits = bits.weights;
  p.act_bits = bits.acts;
  p.theta = theta;
  return p;
}

namespace {

using Clock = std::chrono::steady_clock;

RunRecord finish_run(const ExperimentConfig& cfg, const SeedContext& ctx, const CalibrationResult& calib,
                     Metric method, const BitPair& bits, ReconMode recon, double theta, ReconGranularity gran,
                     Clock::time_point start) {
  RunRecord r;
  r.seed = ctx.seed;
  r.method = to_string(method);
  r.recon = to_string(recon);
  r.granularity = recon == ReconMode::None ? "none" : to_string(gran);
  r.bits = bits;
  r.theta = theta;
  r.outliers = ctx.outliers;
  r.warnings = calib.warnings;
  for (const CalibRecord& rec : calib.records) {
    if (!rec.per_channel && is_qk_tensor(rec.name)) r.clip_ranges.push_back({rec.name, to_string(rec.metric), rec.x_low, rec.x_up});
  }
  QuantEnv env = calib.env;
  if (recon != ReconMode::None) {
    ReconConfig rc = cfg.recon_cfg;
    rc.encoder_objective = recon == ReconMode::Par ? ReconObjective::Par : ReconObjective::Local;
    rc.granularity = gran;
    rc.seed = ctx.seed;
    const ReconReport rr =
        run_reconstruction(ctx.model, env, stage_partition(ctx.model.config().layer_kinds()), ctx.calib, rc);
    r.units = rr.units;
  }
  const AgreementReport ag = evaluate_agreement(ctx.model, env, ctx.eval, theta);
  r.mask_iou = ag.mean_mask_iou;
  r.hybrid_mse = ag.stage_hybrid_mse;
  r.dist_pcc = ag.mean_dist_pcc;
  for (const auto& [name, q] : env.acts) {
    const quant::QuantParams qp = q.params();
    r.quant_params.push_back({name, qp.bits, "per_tensor", {qp.x_low}, {qp.x_up}, {qp.scale}, {qp.zero_point}});
  }
  if (cfg.include_weight_params) {
    for (const auto& [name, w] : env.weights) {
      QuantParamRecord p{name, w.bits, "per_channel", {}, {}, {}, {}};
      for (const quant::QuantParams& qp : w.channels.channels) {
        p.x_low.push_back(qp.x_low);
        p.x_up.push_back(qp.x_up);
        p.scale.push_back(qp.scale);
        p.zero_point.push_back(qp.zero_point);
      }
      r.quant_params.push_back(std::move(p));
    }
  }
  r.runtime_s = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

void add_settings(Report& rep, const ExperimentConfig& cfg) {
  rep.settings = {
      {"par_interaction_precision", "fp"},
      {"par_stage_order", "front_to_back_quantized_prefix"},
      {"focus_max_scope", cfg.policy.scope == pcc::MaxScope::Global ? "global" : "per_row"},
      {"weight_bounds", "fixed_after_calibration"},
      {"iteration_budget", std::to_string(cfg.recon_cfg.unit_iterations()) + "/" +
                               std::to_string(cfg.recon_cfg.final_unit_iterations())},
  };
}

}  // namespace

RunRecord run_single(const ExperimentConfig& cfg, const SeedContext& ctx, Metric method, const BitPair& bits,
                     ReconMode recon, double theta) {
  const auto start = Clock::now();
  const CalibrationResult calib = calibrate_model(ctx.model, ctx.calib, policy_for(cfg, method, bits, theta));
  RunRecord r = finish_run(cfg, ctx, calib, method, bits, recon, theta, cfg.recon_cfg.granularity, start);
  r.variant = r.method + "/" + r.recon;
  return r;
}

Report run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.kind = "experiment";
  add_settings(rep, cfg);
  for (std::uint64_t seed : cfg.seeds) {
    const SeedContext ctx = make_seed_context(cfg, seed);
    for (Metric method : cfg.methods) {
      for (const BitPair& bits : cfg.bits) {
        const auto calib_start = Clock::now();
        const CalibrationResult calib =
            calibrate_model(ctx.model, ctx.calib, policy_for(cfg, method, bits, cfg.policy.theta));
        const auto calib_time = Clock::now() - calib_start;
        for (ReconMode recon : cfg.recon) {
          RunRecord r = finish_run(cfg, ctx, calib, method, bits, recon, cfg.policy.theta, cfg.recon_cfg.granularity,
                                   Clock::now() - calib_time);
          r.variant = r.method + "/" + r.recon;
          rep.append(std::move(r));
        }
      }
    }
  }
  return rep;
}

Report sweep_theta(const ExperimentConfig& cfg) { return sweep_theta(cfg, cfg.thetas); }

Report sweep_theta(const ExperimentConfig& cfg, const std::vector<double>& thetas) {
  cfg.validate();
  if (thetas.empty()) throw ConfigError("theta sweep needs at least one theta");
  for (double t : thetas) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("theta values must lie in (0, 1)");
  }
  Report rep;
  rep.kind = "sweep-theta";
  add_settings(rep, cfg);
  const ReconMode recon = cfg.recon.front();
  for (std::uint64_t seed : cfg.seeds) {
    const SeedContext ctx = make_seed_context(cfg, seed);
    for (const BitPair& bits : cfg.bits) {
      {
        const auto start = Clock::now();
        const CalibrationResult mse =
            calibrate_model(ctx.model, ctx.calib, policy_for(cfg, Metric::Mse, bits, cfg.policy.theta));
        RunRecord r = finish_run(cfg, ctx, mse, Metric::Mse, bits, recon, cfg.policy.theta,
                                 cfg.recon_cfg.granularity, start);
        r.variant = "baseline";
        rep.append(std::move(r));
      }
      auto start = Clock::now();
      const CalibrationResult base =
          calibrate_model(ctx.model, ctx.calib, policy_for(cfg, Metric::Pcc, bits, thetas.front()));
      for (std::size_t i = 0; i < thetas.size(); ++i) {
        if (i > 0) start = Clock::now();
        const CalibrationResult calib =
            i == 0 ? base
                   : recalibrate_qk(ctx.model, ctx.calib, policy_for(cfg, Metric::Pcc, bits, thetas[i]), base);
        RunRecord r =
            finish_run(cfg, ctx, calib, Metric::Pcc, bits, recon, thetas[i], cfg.recon_cfg.granularity, start);
        char label[32];
        std::snprintf(label, sizeof(label), "theta=%.2f", thetas[i]);
        r.variant = label;
        rep.append(std::move(r));
      }
    }
  }
  return rep;
}

Report sweep_granularity(const ExperimentConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.kind = "sweep-granularity";
  add_settings(rep, cfg);
  for (std::uint64_t seed : cfg.seeds) {
    const SeedContext ctx = make_seed_context(cfg, seed);
    for (const BitPair& bits : cfg.bits) {
      for (Metric init : {Metric::Mse, Metric::Pcc}) {
        const auto calib_start = Clock::now();
        const CalibrationResult calib =
            calibrate_model(ctx.model, ctx.calib, policy_for(cfg, init, bits, cfg.policy.theta));
        const auto calib_time = Clock::now() - calib_start;
        for (ReconMode recon : {ReconMode::Local, ReconMode::Par}) {
          for (ReconGranularity gran : {ReconGranularity::Layer, ReconGranularity::Stage}) {
            RunRecord r =
                finish_run(cfg, ctx, calib, init, bits, recon, cfg.policy.theta, gran, Clock::now() - calib_time);
            r.variant = std::string(recon == ReconMode::Par ? "par" : "qdrop") + "/" + to_string(gran) + "/" +
                        (init == Metric::Pcc ? "pcc" : "no-pcc");
            rep.append(std::move(r));
          }
        }
      }
    }
  }
  return rep;
}

}  // namespace saq
