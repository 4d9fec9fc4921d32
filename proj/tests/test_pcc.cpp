#include "gradcheck.hpp"
#include "saq/calibration.hpp"
#include "saq/errors.hpp"
#include "saq/ops.hpp"
#include "saq/pcc.hpp"
#include "saq/rng.hpp"

#include <gtest/gtest.h>

using namespace saq;
using namespace saq::pcc;
using saq::testing::random_mat;

namespace {

Mat row(std::initializer_list<double> v) {
  Mat m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

std::vector<Mat> random_attention(std::mt19937_64& rng, int heads = 3, Index n = 6, Index k = 9) {
  std::vector<Mat> out;
  for (int h = 0; h < heads; ++h) out.push_back(softmax_rows_value(random_mat(n, k, rng, 2.0)));
  return out;
}

// A probe whose key projection carries one spike column that the query side
// ignores: the spike inflates the k.out range without touching attention.
struct SpikeScenario {
  QKProbe probe;
  QKSample sample;
  double bulk_sigma = 0.0;
};

SpikeScenario spike_scenario(std::uint64_t seed, double spike_scale) {
  std::mt19937_64 rng(seed);
  const Index d = 8;
  SpikeScenario s;
  s.probe.module = "probe";
  s.probe.heads = 1;
  s.probe.wq = random_mat(d, d, rng, 2.0);
  s.probe.wk = random_mat(d, d, rng, 2.0);
  s.probe.bq = Mat::Zero(1, d);
  s.probe.bk = Mat::Zero(1, d);
  s.probe.wq.col(0).setZero();
  s.sample.xq = random_mat(12, d, rng);
  s.sample.xk = random_mat(24, d, rng);
  const Mat bulk = s.sample.xk * s.probe.wk;
  s.bulk_sigma = std::sqrt(bulk.rightCols(d - 1).array().square().mean());
  Mat u = random_mat(d, 1, rng);
  u /= u.norm();
  s.probe.wk.col(0) += spike_scale * u;
  return s;
}

}  // namespace

TEST(FocusMask, UniformRowIsAllFocus) {
  const FocusMask m = focus_mask(row({0.25, 0.25, 0.25, 0.25}), 0.5);
  EXPECT_EQ(m.mask[0], row({1, 1, 1, 1}));
}

TEST(FocusMask, ThresholdAtHalfMax) {
  const FocusMask m = focus_mask(row({0.7, 0.2, 0.05, 0.05}), 0.5);
  EXPECT_EQ(m.mask[0], row({1, 0, 0, 0}));
}

TEST(FocusMask, ThetaOutsideOpenIntervalThrows) {
  EXPECT_THROW(focus_mask(row({0.5, 0.5}), 0.0), RangeError);
  EXPECT_THROW(focus_mask(row({0.5, 0.5}), 1.0), RangeError);
  EXPECT_THROW(focus_mask(row({0.5, 0.5}), -0.2), RangeError);
}

TEST(FocusMask, EveryHeadKeepsItsMaximum) {
  std::mt19937_64 rng(40);
  for (MaxScope scope : {MaxScope::Global, MaxScope::PerRow}) {
    for (double theta : {0.1, 0.5, 0.9, 0.999}) {
      const FocusMask m = focus_mask(random_attention(rng), theta, scope);
      for (const Mat& h : m.mask) EXPECT_GE(h.sum(), 1.0);
    }
  }
}

TEST(FocusMask, InvariantUnderPositiveScaling) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<Mat> a = random_attention(rng);
    std::vector<Mat> scaled;
    const double c = std::ldexp(1.0, trial % 7 - 3);  // powers of two keep the products exact
    for (const Mat& m : a) scaled.push_back(c * m);
    for (MaxScope scope : {MaxScope::Global, MaxScope::PerRow}) {
      EXPECT_EQ(focus_mask(a, 0.5, scope).mask, focus_mask(scaled, 0.5, scope).mask);
    }
  }
}

TEST(FocusMask, PerRowScopeDiffersFromGlobal) {
  Mat a(2, 3);
  a << 0.8, 0.1, 0.1, 0.4, 0.35, 0.25;
  EXPECT_EQ(focus_mask(a, 0.5, MaxScope::Global).mask[0].row(1), row({0, 0, 0}));
  EXPECT_EQ(focus_mask(a, 0.5, MaxScope::PerRow).mask[0].row(1), row({1, 1, 1}));
}

TEST(IouAf, Fixtures) {
  FocusMask a{{row({1, 0, 0, 0})}, 0.5};
  FocusMask b{{row({1, 1, 0, 0})}, 0.5};
  EXPECT_EQ(iou_af(a, b), 0.5);
  EXPECT_EQ(iou_af(a, a), 1.0);
  FocusMask c{{row({0, 0, 1, 1})}, 0.5};
  EXPECT_EQ(iou_af(a, c), 0.0);
}

TEST(IouAf, MismatchesThrow) {
  FocusMask a{{row({1, 0, 0, 0})}, 0.5};
  FocusMask b{{row({1, 1, 0})}, 0.5};
  FocusMask c{{row({1, 1, 0, 0})}, 0.6};
  FocusMask d{{row({1, 1, 0, 0}), row({1, 1, 0, 0})}, 0.5};
  EXPECT_THROW(iou_af(a, b), DimensionError);
  EXPECT_THROW(iou_af(a, c), ContractError);
  EXPECT_THROW(iou_af(a, d), DimensionError);
}

TEST(IouAf, SymmetricBoundedAndOneOnlyWhenEqual) {
  std::mt19937_64 rng(42);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 300; ++trial) {
    FocusMask a{{}, 0.5}, b{{}, 0.5};
    for (int h = 0; h < 2; ++h) {
      Mat ma(3, 5), mb(3, 5);
      for (Index i = 0; i < ma.size(); ++i) {
        ma.data()[i] = coin(rng) ? 1.0 : 0.0;
        mb.data()[i] = coin(rng) ? 1.0 : 0.0;
      }
      ma(0, 0) = 1.0;  // nonempty
      mb(2, 4) = 1.0;
      a.mask.push_back(ma);
      b.mask.push_back(mb);
    }
    const double ab = iou_af(a, b);
    EXPECT_EQ(ab, iou_af(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_EQ(ab == 1.0, a.mask == b.mask);
  }
}

TEST(DistPcc, ZeroOnIdenticalMapsAndHalfOnHalfOverlap) {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<Mat> a = random_attention(rng);
    EXPECT_EQ(dist_pcc(a, a, 0.5), 0.0);
    EXPECT_EQ(dist_pcc(a, a, 0.5, MaxScope::PerRow), 0.0);
  }
  EXPECT_EQ(dist_pcc(row({0.7, 0.2, 0.05, 0.05}), row({0.4, 0.4, 0.1, 0.1}), 0.5), 0.5);
}

TEST(ClipSearchGrid, ContainsObservedRangeAndShrinksGeometrically) {
  const ClipSearchGrid g = ClipSearchGrid::from_range(-3.0, 7.0);
  ASSERT_EQ(g.candidates.size(), 100u);
  EXPECT_EQ(g.candidates.front().x_low, -3.0);
  EXPECT_EQ(g.candidates.front().x_up, 7.0);
  EXPECT_NEAR(g.candidates.back().x_up, 7.0 * 0.005, 1e-12);
  for (std::size_t i = 1; i < g.candidates.size(); ++i) {
    EXPECT_LT(g.candidates[i].width(), g.candidates[i - 1].width());
  }
  const ClipSearchGrid s = ClipSearchGrid::from_range(-3.0, 7.0, 100, 0.005, GridShape::Symmetric);
  EXPECT_EQ(s.candidates.front().x_low, -7.0);
  const ClipSearchGrid p = ClipSearchGrid::from_range(-3.0, 7.0, 100, 0.005, GridShape::Scaled);
  EXPECT_NEAR(p.candidates.back().x_low, -3.0 * 0.005, 1e-12);
}

TEST(ClipSearchGrid, CappedShapeCutsOneSidedTailWithoutSqueezingTheOtherSide) {
  const ClipSearchGrid g = ClipSearchGrid::from_range(-360.0, 9.0);
  bool found = false;
  for (const ClipCandidate& c : g.candidates) {
    EXPECT_GE(c.x_low, -360.0);
    EXPECT_LE(c.x_up, 9.0);
    EXPECT_NEAR(c.x_up, std::min(9.0, -c.x_low), 1e-9);
    found = found || (c.x_up == 9.0 && c.x_low > -12.0);
  }
  EXPECT_TRUE(found);
  EXPECT_THROW(grid_shape_from_string("round"), ContractError);
  EXPECT_EQ(grid_shape_from_string(to_string(GridShape::Scaled)), GridShape::Scaled);
}

TEST(ClipSearchGrid, RefinementMovesEachSideIndependently) {
  const ClipSearchGrid g = ClipSearchGrid::from_range(-4.0, 4.0);
  const auto local = g.refine_around(g.candidates[50], 3);
  EXPECT_EQ(local.size(), 49u);
  bool asymmetric = false;
  for (const ClipCandidate& c : local) asymmetric = asymmetric || c.low_step != c.up_step;
  EXPECT_TRUE(asymmetric);
  EXPECT_EQ(g.refine_around(g.candidates[0], 3).size(), 16u);
}

TEST(SearchClipMse, PrefersClippingGaussianTails) {
  std::mt19937_64 rng(44);
  const Mat x = random_mat(100, 100, rng);
  const ClipSearchGrid g = ClipSearchGrid::from_range(x.minCoeff(), x.maxCoeff());
  const SearchResult r = search_clip_mse({x}, g, 4);
  EXPECT_LT(r.x_up, x.maxCoeff());
  EXPECT_GT(r.x_low, x.minCoeff());
  // Brute-force oracle over the same candidates.
  double best = std::numeric_limits<double>::infinity();
  for (const ClipCandidate& c : g.candidates) {
    best = std::min(best, (quant::fake_quant_value(x, quant::params_from_bounds(c.x_low, c.x_up, 4)) - x)
                              .array()
                              .square()
                              .mean());
  }
  EXPECT_LE(r.objective, best * (1.0 + 1e-12));
  EXPECT_GT(r.candidates_evaluated, 100);
}

TEST(SearchClipMse, EmptyGridThrows) {
  EXPECT_THROW(search_clip_mse_values({1.0, 2.0}, ClipSearchGrid{}, 8), RangeError);
}

TEST(CollectValues, CapsDeterministically) {
  std::mt19937_64 rng(45);
  const std::vector<Mat> samples{random_mat(200, 200, rng), random_mat(100, 100, rng)};
  const auto a = collect_values(samples, 5000);
  const auto b = collect_values(samples, 5000);
  EXPECT_EQ(a, b);
  EXPECT_NEAR(static_cast<double>(a.size()), 5000.0, 500.0);
  EXPECT_EQ(collect_values(samples, 1u << 20).size(), 50000u);
}

TEST(SearchClipPcc, SixteenBitFindsZeroLossAtTightestCandidate) {
  const SpikeScenario s = spike_scenario(46, 0.0);
  const auto ranges = probe_ranges(s.probe, s.sample);
  std::array<ClipSearchGrid, 4> grids;
  for (int t = 0; t < 4; ++t) grids[t] = ClipSearchGrid::from_range(ranges[t].first, ranges[t].second);
  PccOptions opts;
  opts.bits = 16;
  opts.sweeps = 1;
  opts.refine = false;
  opts.tie_break = TieBreak::Narrowest;
  const PccResult r = search_clip_pcc(s.probe, s.sample, grids, opts);
  EXPECT_EQ(r.tensors[kQIn].objective, 0.0);
  // Brute-force oracle: q.in is scanned first with everything else at full precision.
  const ClipCandidate* tightest = nullptr;
  for (const ClipCandidate& c : grids[kQIn].candidates) {
    QKQuant q{};
    q[kQIn] = quant::params_from_bounds(c.x_low, c.x_up, 16);
    if (evaluate_pcc(s.probe, s.sample, q, 0.5) == 0.0 && (tightest == nullptr || c.width() < tightest->width())) {
      tightest = &c;
    }
  }
  ASSERT_NE(tightest, nullptr);
  EXPECT_EQ(r.tensors[kQIn].x_low, tightest->x_low);
  EXPECT_EQ(r.tensors[kQIn].x_up, tightest->x_up);
  EXPECT_EQ(r.joint_objective, evaluate_pcc(s.probe, s.sample,
                                            {quant::params_from_bounds(r.tensors[0].x_low, r.tensors[0].x_up, 16),
                                             quant::params_from_bounds(r.tensors[1].x_low, r.tensors[1].x_up, 16),
                                             quant::params_from_bounds(r.tensors[2].x_low, r.tensors[2].x_up, 16),
                                             quant::params_from_bounds(r.tensors[3].x_low, r.tensors[3].x_up, 16)},
                                            0.5));
}

TEST(SearchClipPcc, SixteenBitTiesResolveToLeastValueError) {
  const SpikeScenario s = spike_scenario(46, 0.0);
  const auto ranges = probe_ranges(s.probe, s.sample);
  std::array<ClipSearchGrid, 4> grids;
  for (int t = 0; t < 4; ++t) grids[t] = ClipSearchGrid::from_range(ranges[t].first, ranges[t].second);
  PccOptions opts;
  opts.bits = 16;
  opts.sweeps = 1;
  opts.refine = false;
  opts.tie_break = TieBreak::ValueError;
  const PccResult r = search_clip_pcc(s.probe, s.sample, grids, opts);
  EXPECT_EQ(r.tensors[kQIn].objective, 0.0);
  const ClipCandidate* best = nullptr;
  double best_err = std::numeric_limits<double>::infinity();
  for (const ClipCandidate& c : grids[kQIn].candidates) {
    QKQuant q{};
    q[kQIn] = quant::params_from_bounds(c.x_low, c.x_up, 16);
    if (evaluate_pcc(s.probe, s.sample, q, 0.5) != 0.0) continue;
    const double err = (quant::fake_quant_value(s.sample.xq, *q[kQIn]) - s.sample.xq).squaredNorm();
    if (err < best_err) {
      best_err = err;
      best = &c;
    }
  }
  ASSERT_NE(best, nullptr);
  EXPECT_EQ(r.tensors[kQIn].x_low, best->x_low);
  EXPECT_EQ(r.tensors[kQIn].x_up, best->x_up);
  // At 16 bits the least-error range covers the whole sample.
  EXPECT_LE(r.tensors[kQIn].x_low, ranges[kQIn].first + 1e-9 * std::abs(ranges[kQIn].first));
}

TEST(SearchClipPcc, NearLosslessQuantizationKeepsFocus) {
  const SpikeScenario s = spike_scenario(47, 0.0);
  QKQuant q{};
  const auto ranges = probe_ranges(s.probe, s.sample);
  for (int t = 0; t < 4; ++t) q[t] = quant::params_from_bounds(ranges[t].first, ranges[t].second, 16);
  EXPECT_LE(evaluate_pcc(s.probe, s.sample, q, 0.5), 0.01);
}

TEST(SearchClipPcc, RemovingTheWinnerNeverImproves) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SpikeScenario s = spike_scenario(50 + seed, 40.0);
    const auto ranges = probe_ranges(s.probe, s.sample);
    std::array<ClipSearchGrid, 4> grids;
    for (int t = 0; t < 4; ++t) grids[t] = ClipSearchGrid::from_range(ranges[t].first, ranges[t].second);
    PccOptions opts;
    opts.bits = 4;
    opts.sweeps = 1;
    opts.refine = false;
    const PccResult full = search_clip_pcc(s.probe, s.sample, grids, opts);
    // k.out is scanned last, so earlier choices do not depend on its grid.
    auto& cands = grids[kKOut].candidates;
    cands.erase(std::remove_if(cands.begin(), cands.end(),
                               [&](const ClipCandidate& c) {
                                 return c.x_low == full.tensors[kKOut].x_low && c.x_up == full.tensors[kKOut].x_up;
                               }),
                cands.end());
    const PccResult reduced = search_clip_pcc(s.probe, s.sample, grids, opts);
    EXPECT_GE(reduced.tensors[kKOut].objective, full.tensors[kKOut].objective);
  }
}

TEST(SearchClipPcc, SeveralSamplesAverageTheObjective) {
  const SpikeScenario s = spike_scenario(55, 40.0);
  const SpikeScenario other = spike_scenario(56, 40.0);
  QKSample second{other.sample.xq, other.sample.xk};
  const std::vector<QKSample> both{s.sample, second};
  const auto ranges = probe_ranges(s.probe, both);
  const auto first = probe_ranges(s.probe, s.sample);
  std::array<ClipSearchGrid, 4> grids;
  for (int t = 0; t < 4; ++t) {
    EXPECT_LE(ranges[t].first, first[t].first);
    EXPECT_GE(ranges[t].second, first[t].second);
    grids[t] = ClipSearchGrid::from_range(ranges[t].first, ranges[t].second);
  }
  PccOptions opts;
  opts.bits = 4;
  const PccResult single = search_clip_pcc(s.probe, std::vector<QKSample>{s.sample}, grids, opts);
  const PccResult alone = search_clip_pcc(s.probe, s.sample, grids, opts);
  EXPECT_EQ(single.tensors[kKOut].x_low, alone.tensors[kKOut].x_low);
  EXPECT_EQ(single.tensors[kKOut].x_up, alone.tensors[kKOut].x_up);

  const PccResult joint = search_clip_pcc(s.probe, both, grids, opts);
  QKQuant q{};
  for (int t = 0; t < 4; ++t) q[t] = quant::params_from_bounds(joint.tensors[t].x_low, joint.tensors[t].x_up, 4);
  const double mean = 0.5 * (evaluate_pcc(s.probe, s.sample, q, 0.5) + evaluate_pcc(s.probe, second, q, 0.5));
  EXPECT_NEAR(joint.joint_objective, mean, 1e-12);
  EXPECT_THROW(search_clip_pcc(s.probe, std::vector<QKSample>{}, grids, opts), ContractError);
}

TEST(SearchClipPcc, OutlierSpikeIsClippedWhileMseKeepsIt) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SpikeScenario s = spike_scenario(60 + seed, 0.0);
    // Scale the spike so its peak is about 180x the bulk spread.
    const Mat base = s.sample.xk * s.probe.wk;
    Mat u = Mat::Zero(s.probe.wk.rows(), 1);
    std::mt19937_64 rng(70 + seed);
    u = random_mat(u.rows(), 1, rng);
    const double peak = (s.sample.xk * u).cwiseAbs().maxCoeff();
    s.probe.wk.col(0) += u * (180.0 * s.bulk_sigma / peak);
    const auto ranges = probe_ranges(s.probe, s.sample);
    const ClipSearchGrid grid = ClipSearchGrid::from_range(ranges[kKOut].first, ranges[kKOut].second);
    std::array<ClipSearchGrid, 4> grids;
    for (int t = 0; t < 4; ++t) grids[t] = ClipSearchGrid::from_range(ranges[t].first, ranges[t].second);
    PccOptions opts;
    opts.bits = 6;
    const PccResult p = search_clip_pcc(s.probe, s.sample, grids, opts);
    const Mat kout = s.sample.xk * s.probe.wk;
    const SearchResult m = search_clip_mse({kout}, grid, 6);
    const double pcc_width = p.tensors[kKOut].x_up - p.tensors[kKOut].x_low;
    const double mse_width = m.x_up - m.x_low;
    if (pcc_width <= 20.0 * s.bulk_sigma && mse_width >= 100.0 * s.bulk_sigma) ++wins;
    EXPECT_LT(pcc_width, mse_width);
  }
  EXPECT_GE(wins, 4);
}

TEST(SearchClipPcc, SelectionIgnoresOutlierMagnitudeOnAFixedGrid) {
  std::vector<std::pair<double, double>> ranges;
  for (int i = 0; i < 60; ++i) {
    const double a = 0.2 * std::pow(1.1, i);
    ranges.emplace_back(-a, a);
  }
  std::array<ClipSearchGrid, 4> grids;
  for (auto& g : grids) g = ClipSearchGrid::explicit_candidates(ranges);
  PccOptions opts;
  opts.bits = 6;
  std::optional<PccResult> first;
  for (double mag : {100.0, 300.0, 1000.0}) {
    SpikeScenario s = spike_scenario(80, 0.0);
    std::mt19937_64 rng(81);
    const Mat u = random_mat(s.probe.wk.rows(), 1, rng);
    const double peak = (s.sample.xk * u).cwiseAbs().maxCoeff();
    s.probe.wk.col(0) += u * (mag * s.bulk_sigma / peak);
    const PccResult r = search_clip_pcc(s.probe, s.sample, grids, opts);
    if (!first) {
      first = r;
      continue;
    }
    for (int t = 0; t < 4; ++t) {
      EXPECT_EQ(r.tensors[t].x_low, first->tensors[t].x_low) << mag;
      EXPECT_EQ(r.tensors[t].x_up, first->tensors[t].x_up) << mag;
    }
  }
}

TEST(SearchClipPcc, EmptyGridThrows) {
  const SpikeScenario s = spike_scenario(90, 0.0);
  std::array<ClipSearchGrid, 4> grids;
  EXPECT_THROW(search_clip_pcc(s.probe, s.sample, grids, PccOptions{}), RangeError);
}

TEST(SearchClipPcc, ProbeMatchesModelAttentionTrace) {
  ModelConfig cfg;
  const Model m = build_model(cfg);
  std::mt19937_64 rng(91);
  CalibItem item{random_mat(cfg.in_channels, cfg.image_size * cfg.image_size, rng), {}};
  item.prompts.push_back(PromptSpec{PromptKind::Point, 30, 30, 0, 0, true});
  const auto samples = capture_qk_samples(m, item);
  std::vector<AttentionTrace> traces;
  Hooks hooks;
  hooks.traces = &traces;
  Tape tape;
  run_full(tape, m, item, hooks);
  for (const AttentionTrace& t : traces) {
    const std::vector<Mat> w = probe_weights(make_probe(m, t.module_id), samples.at(t.module_id));
    ASSERT_EQ(w.size(), t.weights.size()) << t.module_id;
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_LT((w[i] - t.weights[i]).cwiseAbs().maxCoeff(), 1e-12) << t.module_id;
    }
  }
}

TEST(CalibPolicy, DefaultsRouteQKTensorsToPcc) {
  const CalibPolicy p = CalibPolicy::defaults();
  EXPECT_EQ(p.metric_for("dec.0.t2i.q.in"), Metric::Pcc);
  EXPECT_EQ(p.metric_for("enc.3.attn.k.out"), Metric::Pcc);
  EXPECT_EQ(p.metric_for("enc.3.attn.v.out"), Metric::Mse);
  EXPECT_EQ(p.metric_for("enc.3.attn.softmax"), Metric::Mse);
  EXPECT_EQ(p.metric_for("dec.0.mlp.fc1.in"), Metric::Mse);
  EXPECT_EQ(p.theta, 0.5);
  EXPECT_EQ(p.pcc_samples, 1);
  EXPECT_EQ(CalibPolicy::for_method(Metric::MinMax, 8, 8).metric_for("enc.0.attn.q.in"), Metric::MinMax);
  EXPECT_EQ(CalibPolicy::for_method(Metric::Mse, 8, 8).metric_for("enc.0.attn.q.in"), Metric::Mse);
}

TEST(CalibPolicy, UnmatchedTensorIsAnError) {
  CalibPolicy p;
  p.rules = {{"^enc\\.", Metric::Mse}};
  EXPECT_THROW(p.metric_for("dec.0.self.q.in"), ConfigError);
  EXPECT_THROW(metric_from_string("percentile"), ConfigError);
}

class CalibrateModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ModelConfig cfg;
    cfg.seed = 3;
    model_ = std::make_unique<Model>(build_model(cfg));
    std::mt19937_64 rng(92);
    for (int i = 0; i < 3; ++i) {
      CalibItem item{random_mat(cfg.in_channels, cfg.image_size * cfg.image_size, rng), {}};
      item.prompts.push_back(PromptSpec{PromptKind::Point, 10.0 + 10 * i, 20, 0, 0, true});
      items_.push_back(item);
    }
  }
  static std::unique_ptr<Model> model_;
  static std::vector<CalibItem> items_;
};
std::unique_ptr<Model> CalibrateModel::model_;
std::vector<CalibItem> CalibrateModel::items_;

TEST_F(CalibrateModel, CoversEveryHookWithTheRightMetric) {
  const CalibrationResult r = calibrate_model(*model_, items_, CalibPolicy::defaults(8, 8));
  EXPECT_EQ(r.env.weights.size(), model_->quantized_linears().size());
  for (const std::string& lin : model_->quantized_linears()) {
    ASSERT_TRUE(r.env.weights.count(lin + ".w"));
    EXPECT_EQ(r.env.weights.at(lin + ".w").channels.channels.size(),
              static_cast<std::size_t>(model_->param(lin + ".w").data.cols()));
  }
  std::size_t pcc = 0;
  for (const CalibRecord& rec : r.records) {
    EXPECT_LT(rec.x_low, rec.x_up) << rec.name;
    if (rec.per_channel) continue;
    ASSERT_TRUE(r.env.acts.count(rec.name)) << rec.name;
    EXPECT_EQ(rec.metric == Metric::Pcc, is_qk_tensor(rec.name)) << rec.name;
    pcc += rec.metric == Metric::Pcc ? 1 : 0;
  }
  EXPECT_EQ(pcc, 4 * model_->attention_modules().size());
}

TEST_F(CalibrateModel, IsDeterministic) {
  const CalibPolicy p = CalibPolicy::defaults(6, 6);
  const CalibrationResult a = calibrate_model(*model_, items_, p);
  const CalibrationResult b = calibrate_model(*model_, items_, p);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].name, b.records[i].name);
    EXPECT_EQ(a.records[i].x_low, b.records[i].x_low);
    EXPECT_EQ(a.records[i].x_up, b.records[i].x_up);
  }
}

TEST_F(CalibrateModel, MinMaxUsesObservedRange) {
  const CalibrationResult r = calibrate_model(*model_, items_, CalibPolicy::for_method(Metric::MinMax, 8, 8));
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  Hooks hooks;
  hooks.observer = [&](const std::string& n, const Mat& v) {
    if (n == "enc.1.attn.q.in") {
      lo = std::min(lo, v.minCoeff());
      hi = std::max(hi, v.maxCoeff());
    }
  };
  for (const CalibItem& it : items_) {
    Tape tape;
    run_full(tape, *model_, it, hooks);
  }
  const quant::QuantParams qp = r.env.acts.at("enc.1.attn.q.in").params();
  EXPECT_EQ(qp.x_low, lo);
  EXPECT_EQ(qp.x_up, hi);
}

TEST_F(CalibrateModel, RecalibrationOnlyTouchesQKTensors) {
  const CalibPolicy p = CalibPolicy::defaults(6, 6);
  const CalibrationResult base = calibrate_model(*model_, items_, p);
  CalibPolicy q = p;
  q.theta = 0.8;
  const CalibrationResult re = recalibrate_qk(*model_, items_, q, base);
  EXPECT_EQ(re.records.size(), base.records.size());
  for (const auto& [name, a] : base.env.acts) {
    if (is_qk_tensor(name)) continue;
    EXPECT_EQ(a.low.data, re.env.acts.at(name).low.data);
    EXPECT_EQ(a.up.data, re.env.acts.at(name).up.data);
  }
}
