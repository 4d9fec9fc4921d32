#include "saq/calibration.hpp"

#include "saq/errors.hpp"

#include <regex>
#include <set>

namespace saq {

const char* to_string(Metric m) {
  switch (m) {
    case Metric::MinMax:
      return "minmax";
    case Metric::Mse:
      return "mse";
    case Metric::Pcc:
      return "pcc";
  }
  return "?";
}

Metric metric_from_string(const std::string& s) {
  if (s == "minmax") return Metric::MinMax;
  if (s == "mse") return Metric::Mse;
  if (s == "pcc") return Metric::Pcc;
  throw ConfigError("unknown calibration metric '" + s + "'");
}

bool is_qk_tensor(const std::string& hook) {
  static const std::regex re(kQKPattern);
  return std::regex_search(hook, re);
}

CalibPolicy CalibPolicy::defaults(int weight_bits, int act_bits) {
  CalibPolicy p;
  p.weight_bits = weight_bits;
  p.act_bits = act_bits;
  p.rules = {{kQKPattern, Metric::Pcc}, {".*", Metric::Mse}};
  return p;
}

CalibPolicy CalibPolicy::for_method(Metric method, int weight_bits, int act_bits, double theta) {
  CalibPolicy p = defaults(weight_bits, act_bits);
  p.theta = theta;
  if (method == Metric::MinMax) {
    p.rules = {{".*", Metric::MinMax}};
    p.weight_metric = Metric::MinMax;
  } else if (method == Metric::Mse) {
    p.rules = {{".*", Metric::Mse}};
  }
  return p;
}

Metric CalibPolicy::metric_for(const std::string& hook) const {
  for (const PolicyRule& r : rules) {
    if (std::regex_search(hook, std::regex(r.pattern))) return r.metric;
  }
  throw ConfigError("no calibration rule matches tensor '" + hook + "'");
}

DecodeResult run_full(Tape& tape, const Model& model, const CalibItem& item, const Hooks& hooks) {
  EncodeResult enc = encode_image(tape, model, item.image, hooks);
  Var prompts = encode_prompts(tape, model, item.prompts);
  return decode_masks(tape, model, enc.embedding, prompts, hooks);
}

std::map<std::string, pcc::QKSample> capture_qk_samples(const Model& model, const CalibItem& item) {
  std::map<std::string, pcc::QKSample> out;
  Hooks hooks;
  hooks.observer = [&](const std::string& name, const Mat& v) {
    auto ends = [&](const char* suffix) {
      const std::string s(suffix);
      return name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends(".q.in")) out[name.substr(0, name.size() - 5)].xq = v;
    if (ends(".k.in")) out[name.substr(0, name.size() - 5)].xk = v;
  };
  Tape tape;
  NoGradGuard guard(tape);
  run_full(tape, model, item, hooks);
  return out;
}

namespace {

struct Observation {
  std::vector<Mat> pieces;  // subsampled per item
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
};

quant::ChannelParams weight_channels(const Mat& w, const CalibPolicy& policy, CalibRecord& rec) {
  quant::ChannelParams cp;
  cp.axis = 1;
  rec.x_low = std::numeric_limits<double>::infinity();
  rec.x_up = -std::numeric_limits<double>::infinity();
  for (const auto& [lo, hi] : quant::per_channel_bounds(w, 1)) {
    const pcc::ClipSearchGrid grid =
        pcc::ClipSearchGrid::from_range(lo, hi, policy.grid_steps, policy.grid_min_fraction, policy.grid_shape);
    double x_low = grid.observed_min;
    double x_up = grid.observed_max;
    if (policy.weight_metric == Metric::Mse) {
      std::vector<double> values;
      const Index c = static_cast<Index>(cp.channels.size());
      for (Index r = 0; r < w.rows(); ++r) values.push_back(w(r, c));
      const pcc::SearchResult s =
          pcc::search_clip_mse_values(values, grid, policy.weight_bits, true, policy.refine_radius);
      x_low = s.x_low;
      x_up = s.x_up;
      rec.objective += s.objective;
      rec.candidates_evaluated += s.candidates_evaluated;
    } else if (policy.grid_shape == pcc::GridShape::Symmetric) {
      const double m = std::max(std::abs(x_low), std::abs(x_up));
      x_low = -m;
      x_up = m;
    }
    quant::QuantParams qp = quant::params_from_bounds(x_low, x_up, policy.weight_bits);
    qp.granularity = quant::Granularity::PerChannel;
    qp.axis = 1;
    rec.zero_point_clamped = rec.zero_point_clamped || qp.zero_point_clamped;
    rec.x_low = std::min(rec.x_low, x_low);
    rec.x_up = std::max(rec.x_up, x_up);
    cp.channels.push_back(qp);
  }
  if (!cp.channels.empty()) rec.objective /= static_cast<double>(cp.channels.size());
  return cp;
}

void set_act(CalibrationResult& res, const std::string& name, int bits, const CalibRecord& rec, double obs_min,
             double obs_max) {
  ActQuantizer q;
  q.bits = bits;
  q.set_bounds(rec.x_low, rec.x_up);
  q.observed_min = obs_min;
  q.observed_max = obs_max;
  res.env.acts[name] = q;
  const quant::QuantParams qp = q.params();
  CalibRecord r = rec;
  r.zero_point_clamped = qp.zero_point_clamped;
  if (qp.zero_point_clamped) res.warnings.push_back("zero point clamped for '" + name + "'");
  res.records.push_back(r);
}

void run_pcc(const Model& model, const std::vector<CalibItem>& calib, const CalibPolicy& policy,
             const std::set<std::string>& pcc_hooks, CalibrationResult& res) {
  if (pcc_hooks.empty()) return;
  const std::size_t n = std::min(calib.size(), static_cast<std::size_t>(std::max(1, policy.pcc_samples)));
  std::vector<std::map<std::string, pcc::QKSample>> captured;
  for (std::size_t i = 0; i < n; ++i) captured.push_back(capture_qk_samples(model, calib[i]));
  for (const std::string& module : model.attention_modules()) {
    bool any = false;
    for (const char* suffix : pcc::kQKSuffix) any = any || pcc_hooks.count(module + suffix) > 0;
    if (!any) continue;
    const pcc::QKProbe probe = pcc::make_probe(model, module);
    std::vector<pcc::QKSample> samples;
    for (const auto& c : captured) samples.push_back(c.at(module));
    const auto ranges = pcc::probe_ranges(probe, samples);
    std::array<pcc::ClipSearchGrid, 4> grids;
    for (int t = 0; t < 4; ++t) {
      grids[t] = pcc::ClipSearchGrid::from_range(ranges[t].first, ranges[t].second, policy.grid_steps,
                                                 policy.grid_min_fraction, policy.grid_shape);
    }
    pcc::PccOptions opts;
    opts.theta = policy.theta;
    opts.bits = policy.act_bits;
    opts.scope = policy.scope;
    opts.sweeps = policy.pcc_sweeps;
    opts.radius = policy.refine_radius;
    opts.tie_break = policy.tie_break;
    const pcc::PccResult r = pcc::search_clip_pcc(probe, samples, grids, opts);
    for (int t = 0; t < 4; ++t) {
      const std::string name = module + pcc::kQKSuffix[t];
      if (!pcc_hooks.count(name)) continue;
      CalibRecord rec;
      rec.name = name;
      rec.metric = Metric::Pcc;
      rec.bits = policy.act_bits;
      rec.x_low = r.tensors[t].x_low;
      rec.x_up = r.tensors[t].x_up;
      rec.objective = r.tensors[t].objective;
      rec.candidates_evaluated = r.tensors[t].candidates_evaluated;
      set_act(res, name, policy.act_bits, rec, ranges[t].first, ranges[t].second);
    }
  }
}

}  // namespace

CalibrationResult calibrate_model(const Model& model, const std::vector<CalibItem>& calib, const CalibPolicy& policy) {
  if (calib.empty()) throw ContractError("calibration set is empty");
  CalibrationResult res;

  // Weights.
  for (const std::string& lin : model.quantized_linears()) {
    CalibRecord rec;
    rec.name = lin + ".w";
    rec.metric = policy.weight_metric;
    rec.bits = policy.weight_bits;
    rec.per_channel = true;
    WeightQuantizer wq;
    wq.bits = policy.weight_bits;
    wq.channels = weight_channels(model.param(lin + ".w").data, policy, rec);
    res.env.weights[rec.name] = std::move(wq);
    if (rec.zero_point_clamped) res.warnings.push_back("zero point clamped in a channel of '" + rec.name + "'");
    res.records.push_back(rec);
  }

  // Activation statistics over the calibration set.
  const std::size_t mse_items =
      policy.mse_samples > 0 ? std::min<std::size_t>(policy.mse_samples, calib.size()) : calib.size();
  const std::size_t per_item_cap = std::max<std::size_t>(1, policy.value_cap / mse_items);
  std::map<std::string, Observation> obs;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < mse_items; ++i) {
    std::map<std::string, std::vector<Mat>> item_pieces;
    Hooks hooks;
    hooks.observer = [&](const std::string& name, const Mat& v) {
      auto [it, inserted] = obs.try_emplace(name);
      if (inserted) order.push_back(name);
      it->second.min = std::min(it->second.min, v.minCoeff());
      it->second.max = std::max(it->second.max, v.maxCoeff());
      item_pieces[name].push_back(v);
    };
    Tape tape;
    NoGradGuard guard(tape);
    run_full(tape, model, calib[i], hooks);
    for (auto& [name, pieces] : item_pieces) {
      std::vector<double> vals = pcc::collect_values(pieces, per_item_cap);
      Mat m(1, static_cast<Index>(vals.size()));
      for (std::size_t j = 0; j < vals.size(); ++j) m(0, static_cast<Index>(j)) = vals[j];
      obs[name].pieces.push_back(std::move(m));
    }
  }

  std::set<std::string> pcc_hooks;
  for (const std::string& name : order) {
    const Metric metric = policy.metric_for(name);
    if (metric == Metric::Pcc) {
      if (!is_qk_tensor(name)) throw ConfigError("PCC metric only applies to QK tensors, not '" + name + "'");
      pcc_hooks.insert(name);
      continue;
    }
    const Observation& o = obs.at(name);
    const pcc::ClipSearchGrid grid =
        pcc::ClipSearchGrid::from_range(o.min, o.max, policy.grid_steps, policy.grid_min_fraction, policy.grid_shape);
    CalibRecord rec;
    rec.name = name;
    rec.metric = metric;
    rec.bits = policy.act_bits;
    if (metric == Metric::Mse) {
      const pcc::SearchResult s = pcc::search_clip_mse(o.pieces, grid, policy.act_bits, true, policy.refine_radius);
      rec.x_low = s.x_low;
      rec.x_up = s.x_up;
      rec.objective = s.objective;
      rec.candidates_evaluated = s.candidates_evaluated;
    } else {
      rec.x_low = grid.candidates.front().x_low;
      rec.x_up = grid.candidates.front().x_up;
      rec.candidates_evaluated = 1;
    }
    set_act(res, name, policy.act_bits, rec, o.min, o.max);
  }
  run_pcc(model, calib, policy, pcc_hooks, res);
  return res;
}

CalibrationResult recalibrate_qk(const Model& model, const std::vector<CalibItem>& calib, const CalibPolicy& policy,
                                 const CalibrationResult& base) {
  CalibrationResult res;
  res.env = base.env;
  std::set<std::string> pcc_hooks;
  for (const CalibRecord& r : base.records) {
    if (!r.per_channel && is_qk_tensor(r.name) && policy.metric_for(r.name) == Metric::Pcc) {
      pcc_hooks.insert(r.name);
    } else {
      res.records.push_back(r);
    }
  }
  run_pcc(model, calib, policy, pcc_hooks, res);
  return res;
}

}  // namespace saq
