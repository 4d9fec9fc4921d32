#include "saq/pcc.hpp"

#include "saq/errors.hpp"
#include "saq/ops.hpp"
#include "saq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace saq::pcc {

FocusMask focus_mask(const std::vector<Mat>& weights, double theta, MaxScope scope) {
  if (!(theta > 0.0 && theta < 1.0)) throw RangeError("focus threshold theta must lie in (0, 1)");
  FocusMask fm;
  fm.theta = theta;
  fm.mask.reserve(weights.size());
  for (const Mat& w : weights) {
    Mat m(w.rows(), w.cols());
    if (scope == MaxScope::Global) {
      const double thr = theta * w.maxCoeff();
      m = (w.array() > thr).cast<double>().matrix();
    } else {
      for (Index r = 0; r < w.rows(); ++r) {
        const double thr = theta * w.row(r).maxCoeff();
        m.row(r) = (w.row(r).array() > thr).cast<double>().matrix();
      }
    }
    fm.mask.push_back(std::move(m));
  }
  return fm;
}

FocusMask focus_mask(const Mat& weights, double theta, MaxScope scope) {
  return focus_mask(std::vector<Mat>{weights}, theta, scope);
}

double iou_af(const FocusMask& a, const FocusMask& b) {
  if (a.mask.size() != b.mask.size()) throw DimensionError("iou_af: different number of head slices");
  if (a.theta != b.theta) throw ContractError("iou_af: masks built with different theta");
  if (a.mask.empty()) throw DimensionError("iou_af: empty mask");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.mask.size(); ++i) {
    const Mat& ma = a.mask[i];
    const Mat& mb = b.mask[i];
    if (ma.rows() != mb.rows() || ma.cols() != mb.cols()) throw DimensionError("iou_af: mask shape mismatch");
    const double inter = ma.cwiseProduct(mb).sum();
    const double uni = ma.cwiseMax(mb).sum();
    acc += uni == 0.0 ? 1.0 : inter / uni;
  }
  return acc / static_cast<double>(a.mask.size());
}

double dist_pcc(const std::vector<Mat>& fp_weights, const std::vector<Mat>& q_weights, double theta,
                MaxScope scope) {
  return 1.0 - iou_af(focus_mask(fp_weights, theta, scope), focus_mask(q_weights, theta, scope));
}

double dist_pcc(const Mat& fp_weights, const Mat& q_weights, double theta, MaxScope scope) {
  return dist_pcc(std::vector<Mat>{fp_weights}, std::vector<Mat>{q_weights}, theta, scope);
}

GridShape grid_shape_from_string(const std::string& s) {
  if (s == "capped") return GridShape::Capped;
  if (s == "scaled") return GridShape::Scaled;
  if (s == "symmetric") return GridShape::Symmetric;
  throw ContractError("unknown grid shape '" + s + "'");
}

std::string to_string(GridShape g) {
  switch (g) {
    case GridShape::Capped:
      return "capped";
    case GridShape::Scaled:
      return "scaled";
    case GridShape::Symmetric:
      return "symmetric";
  }
  return "capped";
}

namespace {

ClipCandidate make_candidate(const ClipSearchGrid& g, int lo_step, int up_step) {
  ClipCandidate c;
  c.low_step = lo_step;
  c.up_step = up_step;
  const double m = std::max(std::abs(g.observed_min), std::abs(g.observed_max));
  switch (g.shape) {
    case GridShape::Capped:
      c.x_low = std::max(g.observed_min, -g.factors[lo_step] * m);
      c.x_up = std::min(g.observed_max, g.factors[up_step] * m);
      break;
    case GridShape::Scaled:
      c.x_low = g.factors[lo_step] * g.observed_min;
      c.x_up = g.factors[up_step] * g.observed_max;
      break;
    case GridShape::Symmetric:
      c.x_low = -g.factors[lo_step] * m;
      c.x_up = g.factors[up_step] * m;
      break;
  }
  return c;
}

}  // namespace

ClipSearchGrid ClipSearchGrid::from_range(double observed_min, double observed_max, int steps, double min_fraction,
                                          GridShape shape) {
  if (steps < 1) throw RangeError("search grid needs at least one step");
  if (!(min_fraction > 0.0 && min_fraction <= 1.0)) throw RangeError("min_fraction must lie in (0, 1]");
  ClipSearchGrid g;
  g.shape = shape;
  double lo = observed_min;
  double hi = observed_max;
  if (!(hi > lo)) {
    lo = std::min(lo, 0.0);
    hi = std::max(hi, 0.0);
    if (!(hi > lo)) {
      lo -= 1e-8;
      hi += 1e-8;
    }
  }
  g.observed_min = lo;
  g.observed_max = hi;
  for (int i = 0; i < steps; ++i) {
    const double t = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    g.factors.push_back(std::pow(min_fraction, t));
  }
  for (int i = 0; i < steps; ++i) {
    ClipCandidate c = make_candidate(g, i, i);
    if (c.x_up > c.x_low) g.candidates.push_back(c);
  }
  return g;
}

ClipSearchGrid ClipSearchGrid::explicit_candidates(std::vector<std::pair<double, double>> ranges) {
  ClipSearchGrid g;
  for (auto [lo, hi] : ranges) {
    if (!(hi > lo)) throw RangeError("explicit candidate with empty range");
    g.candidates.push_back({lo, hi, -1, -1});
  }
  if (!g.candidates.empty()) {
    g.observed_min = g.candidates.front().x_low;
    g.observed_max = g.candidates.front().x_up;
  }
  return g;
}

std::vector<ClipCandidate> ClipSearchGrid::refine_around(const ClipCandidate& winner, int radius) const {
  std::vector<ClipCandidate> out;
  if (winner.low_step < 0 || factors.empty()) return out;
  const int last = static_cast<int>(factors.size()) - 1;
  for (int dl = -radius; dl <= radius; ++dl) {
    const int il = winner.low_step + dl;
    if (il < 0 || il > last) continue;
    for (int du = -radius; du <= radius; ++du) {
      const int iu = winner.up_step + du;
      if (iu < 0 || iu > last) continue;
      ClipCandidate c = make_candidate(*this, il, iu);
      if (c.x_up > c.x_low) out.push_back(c);
    }
  }
  return out;
}

bool better_candidate(double obj, const ClipCandidate& cand, double best_obj, const ClipCandidate& best) {
  if (obj < best_obj) return true;
  return obj == best_obj && cand.width() < best.width();
}

std::vector<double> collect_values(const std::vector<Mat>& samples, std::size_t cap) {
  std::size_t total = 0;
  for (const Mat& m : samples) total += static_cast<std::size_t>(m.size());
  std::vector<double> out;
  if (total <= cap) {
    out.reserve(total);
    for (const Mat& m : samples) out.insert(out.end(), m.data(), m.data() + m.size());
    return out;
  }
  std::mt19937_64 rng = make_stream(total, "subsample");
  std::bernoulli_distribution keep(static_cast<double>(cap) / static_cast<double>(total));
  out.reserve(cap + cap / 8);
  for (const Mat& m : samples) {
    for (Index i = 0; i < m.size(); ++i) {
      if (keep(rng)) out.push_back(m.data()[i]);
    }
  }
  return out;
}

namespace {

double mse_objective(const std::vector<double>& values, const quant::QuantParams& qp) {
  if (values.empty()) return 0.0;
  const Eigen::Map<const Eigen::ArrayXd> v(values.data(), static_cast<Index>(values.size()));
  const double z = static_cast<double>(qp.zero_point);
  const double hi = static_cast<double>(qp.qmax());
  const Eigen::ArrayXd fq = qp.scale * (((v / qp.scale).rint() + z).max(0.0).min(hi) - z);
  return (fq - v).square().mean();
}

}  // namespace

SearchResult search_clip_mse_values(const std::vector<double>& values, const ClipSearchGrid& grid, int bits,
                                    bool refine, int radius) {
  if (grid.candidates.empty()) throw RangeError("search_clip_mse: empty grid");
  SearchResult res;
  ClipCandidate best = grid.candidates.front();
  double best_obj = std::numeric_limits<double>::infinity();
  auto visit = [&](const ClipCandidate& c) {
    const double obj = mse_objective(values, quant::params_from_bounds(c.x_low, c.x_up, bits));
    ++res.candidates_evaluated;
    if (better_candidate(obj, c, best_obj, best)) {
      best_obj = obj;
      best = c;
    }
  };
  for (const ClipCandidate& c : grid.candidates) visit(c);
  if (refine) {
    for (const ClipCandidate& c : grid.refine_around(best, radius)) visit(c);
  }
  res.x_low = best.x_low;
  res.x_up = best.x_up;
  res.objective = best_obj;
  return res;
}

SearchResult search_clip_mse(const std::vector<Mat>& samples, const ClipSearchGrid& grid, int bits, bool refine,
                             int radius) {
  return search_clip_mse_values(collect_values(samples), grid, bits, refine, radius);
}

QKProbe make_probe(const Model& model, const std::string& module) {
  QKProbe p;
  p.module = module;
  p.wq = model.param(module + ".q.w").data;
  p.bq = model.param(module + ".q.b").data;
  p.wk = model.param(module + ".k.w").data;
  p.bk = model.param(module + ".k.b").data;
  p.heads = model.config().num_heads;
  if (const TokenGroups* g = model.attention_groups(module)) p.groups = *g;
  return p;
}

namespace {

Mat project(const Mat& x, const Mat& w, const Mat& b, const std::optional<quant::QuantParams>& in,
            const std::optional<quant::QuantParams>& out) {
  Mat y = (in ? quant::fake_quant_value(x, *in) : x) * w;
  y.rowwise() += b.row(0);
  if (out) y = quant::fake_quant_value(y, *out);
  return y;
}

Mat project_q(const QKProbe& p, const QKSample& s, const QKQuant& q) {
  return project(s.xq, p.wq, p.bq, q[kQIn], q[kQOut]);
}

Mat project_k(const QKProbe& p, const QKSample& s, const QKQuant& q) {
  return project(s.xk, p.wk, p.bk, q[kKIn], q[kKOut]);
}

std::vector<Mat> attention_maps(const QKProbe& p, const Mat& q, const Mat& k) {
  const Index dh = q.cols() / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Mat> out;
  auto attend = [&](const Mat& qg, const Mat& kg) {
    for (int h = 0; h < p.heads; ++h) {
      Mat scores = qg.middleCols(h * dh, dh) * kg.middleCols(h * dh, dh).transpose() * inv_sqrt;
      out.push_back(softmax_rows_value(scores));
    }
  };
  if (p.groups.empty()) {
    attend(q, k);
  } else {
    for (const auto& g : p.groups) {
      Mat qg(static_cast<Index>(g.size()), q.cols());
      Mat kg(static_cast<Index>(g.size()), k.cols());
      for (std::size_t i = 0; i < g.size(); ++i) {
        qg.row(static_cast<Index>(i)) = q.row(g[i]);
        kg.row(static_cast<Index>(i)) = k.row(g[i]);
      }
      attend(qg, kg);
    }
  }
  return out;
}

}  // namespace

std::vector<Mat> probe_weights(const QKProbe& probe, const QKSample& sample, const QKQuant& quant) {
  return attention_maps(probe, project_q(probe, sample, quant), project_k(probe, sample, quant));
}

std::array<std::pair<double, double>, 4> probe_ranges(const QKProbe& probe, const QKSample& sample) {
  const Mat q = project_q(probe, sample, {});
  const Mat k = project_k(probe, sample, {});
  return {{{sample.xq.minCoeff(), sample.xq.maxCoeff()},
           {q.minCoeff(), q.maxCoeff()},
           {sample.xk.minCoeff(), sample.xk.maxCoeff()},
           {k.minCoeff(), k.maxCoeff()}}};
}

double evaluate_pcc(const QKProbe& probe, const QKSample& sample, const QKQuant& quant, double theta,
                    MaxScope scope) {
  return dist_pcc(probe_weights(probe, sample), probe_weights(probe, sample, quant), theta, scope);
}

std::array<std::pair<double, double>, 4> probe_ranges(const QKProbe& probe, const std::vector<QKSample>& samples) {
  if (samples.empty()) throw ContractError("probe_ranges: no samples");
  auto out = probe_ranges(probe, samples.front());
  for (std::size_t i = 1; i < samples.size(); ++i) {
    const auto r = probe_ranges(probe, samples[i]);
    for (int t = 0; t < 4; ++t) {
      out[t].first = std::min(out[t].first, r[t].first);
      out[t].second = std::max(out[t].second, r[t].second);
    }
  }
  return out;
}

double evaluate_pcc(const QKProbe& probe, const std::vector<QKSample>& samples, const QKQuant& quant, double theta,
                    MaxScope scope) {
  if (samples.empty()) throw ContractError("evaluate_pcc: no samples");
  double acc = 0.0;
  for (const QKSample& s : samples) acc += evaluate_pcc(probe, s, quant, theta, scope);
  return acc / static_cast<double>(samples.size());
}

PccResult search_clip_pcc(const QKProbe& probe, const std::vector<QKSample>& samples,
                          const std::array<ClipSearchGrid, 4>& grids, const PccOptions& opts) {
  if (samples.empty()) throw ContractError("search_clip_pcc: no samples");
  for (const ClipSearchGrid& g : grids) {
    if (g.candidates.empty()) throw RangeError("search_clip_pcc: empty grid");
  }
  std::vector<FocusMask> reference;
  for (const QKSample& s : samples) reference.push_back(focus_mask(probe_weights(probe, s), opts.theta, opts.scope));
  const double n = static_cast<double>(samples.size());

  QKQuant current{};
  std::array<ClipCandidate, 4> chosen{};
  PccResult res;

  auto scan = [&](int t, const std::vector<ClipCandidate>& cands, ClipCandidate& best, double& best_obj) {
    const bool q_side = t == kQIn || t == kQOut;
    const bool output = t == kQOut || t == kKOut;
    const Mat& w = q_side ? probe.wq : probe.wk;
    const Mat& b = q_side ? probe.bq : probe.bk;
    const int in_t = q_side ? kQIn : kKIn;
    const int out_t = q_side ? kQOut : kKOut;
    std::vector<Mat> others, pres;
    for (const QKSample& s : samples) {
      others.push_back(q_side ? project_k(probe, s, current) : project_q(probe, s, current));
      // Output candidates only re-quantize a fixed pre-activation.
      if (output) pres.push_back(project(q_side ? s.xq : s.xk, w, b, current[in_t], std::nullopt));
    }
    double best_err = std::numeric_limits<double>::infinity();
    for (const ClipCandidate& c : cands) {
      const quant::QuantParams qp = quant::params_from_bounds(c.x_low, c.x_up, opts.bits);
      double obj = 0.0;
      double err = 0.0;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const Mat& x = q_side ? samples[i].xq : samples[i].xk;
        const Mat side = output ? quant::fake_quant_value(pres[i], qp) : project(x, w, b, qp, current[out_t]);
        const std::vector<Mat> maps =
            q_side ? attention_maps(probe, side, others[i]) : attention_maps(probe, others[i], side);
        obj += 1.0 - iou_af(reference[i], focus_mask(maps, opts.theta, opts.scope));
        if (opts.tie_break == TieBreak::ValueError) {
          err += ((output ? side : quant::fake_quant_value(x, qp)) - (output ? pres[i] : x)).squaredNorm();
        }
      }
      obj /= n;
      ++res.tensors[t].candidates_evaluated;
      if (obj > best_obj) continue;
      if (opts.tie_break == TieBreak::Narrowest) {
        if (better_candidate(obj, c, best_obj, best)) {
          best_obj = obj;
          best = c;
        }
        continue;
      }
      if (obj < best_obj || err < best_err || (err == best_err && c.width() < best.width())) {
        best_obj = obj;
        best_err = err;
        best = c;
      }
    }
  };

  for (int sweep = 0; sweep < std::max(1, opts.sweeps); ++sweep) {
    for (int t = 0; t < 4; ++t) {
      ClipCandidate best = grids[t].candidates.front();
      double best_obj = std::numeric_limits<double>::infinity();
      scan(t, grids[t].candidates, best, best_obj);
      chosen[t] = best;
      current[t] = quant::params_from_bounds(best.x_low, best.x_up, opts.bits);
      res.tensors[t].objective = best_obj;
    }
  }
  if (opts.refine) {
    for (int t = 0; t < 4; ++t) {
      std::vector<ClipCandidate> local = grids[t].refine_around(chosen[t], opts.radius);
      if (local.empty()) continue;
      ClipCandidate best = chosen[t];
      double best_obj = std::numeric_limits<double>::infinity();
      scan(t, local, best, best_obj);
      chosen[t] = best;
      current[t] = quant::params_from_bounds(best.x_low, best.x_up, opts.bits);
      res.tensors[t].objective = best_obj;
    }
  }
  for (int t = 0; t < 4; ++t) {
    res.tensors[t].x_low = chosen[t].x_low;
    res.tensors[t].x_up = chosen[t].x_up;
  }
  res.joint_objective = evaluate_pcc(probe, samples, current, opts.theta, opts.scope);
  return res;
}

PccResult search_clip_pcc(const QKProbe& probe, const QKSample& sample, const std::array<ClipSearchGrid, 4>& grids,
                          const PccOptions& opts) {
  return search_clip_pcc(probe, std::vector<QKSample>{sample}, grids, opts);
}

PccResult search_clip_pcc(const QKProbe& probe, const QKSample& sample, const PccOptions& opts, int steps,
                          double min_fraction) {
  const auto ranges = probe_ranges(probe, sample);
  std::array<ClipSearchGrid, 4> grids;
  for (int t = 0; t < 4; ++t) {
    grids[t] = ClipSearchGrid::from_range(ranges[t].first, ranges[t].second, steps, min_fraction);
  }
  return search_clip_pcc(probe, sample, grids, opts);
}

}  // namespace saq::pcc
