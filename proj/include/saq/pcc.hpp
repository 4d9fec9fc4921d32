#pragma once

#include "saq/model.hpp"
#include "saq/quantizer.hpp"

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace saq::pcc {

/// Where the reference maximum of the focus threshold is taken.
enum class MaxScope { Global, PerRow };

/// Binarized salient-attention indicator, one 0/1 matrix per head slice.
struct FocusMask {
  std::vector<Mat> mask;
  double theta = 0.5;
};

/// 1{A_w > theta * max(A_w)} per slice. Throws RangeError unless theta is in (0, 1).
FocusMask focus_mask(const std::vector<Mat>& weights, double theta, MaxScope scope = MaxScope::Global);
FocusMask focus_mask(const Mat& weights, double theta, MaxScope scope = MaxScope::Global);

/// Intersection over union per slice, averaged over slices. In [0, 1].
double iou_af(const FocusMask& a, const FocusMask& b);

/// 1 - IoU_AF between the focus masks of the reference and quantized maps.
double dist_pcc(const std::vector<Mat>& fp_weights, const std::vector<Mat>& q_weights, double theta,
                MaxScope scope = MaxScope::Global);
double dist_pcc(const Mat& fp_weights, const Mat& q_weights, double theta, MaxScope scope = MaxScope::Global);

struct ClipCandidate {
  double x_low = 0.0;
  double x_up = 0.0;
  int low_step = 0;  // index into the shrink factors, -1 for explicit candidates
  int up_step = 0;
  double width() const { return x_up - x_low; }
};

/// How a shrink factor f maps to bounds, with m = max(|min|, |max|):
///   Capped:    [max(min, -f*m), min(max, f*m)]
///   Scaled:    [f*min, f*max]
///   Symmetric: [-f*m, f*m]
enum class GridShape { Capped, Scaled, Symmetric };

GridShape grid_shape_from_string(const std::string& s);
std::string to_string(GridShape g);

/// Candidate clipping ranges: the observed range shrunk by log-spaced factors
/// from 1 down to `min_fraction`, plus an asymmetric refinement around a winner.
struct ClipSearchGrid {
  std::vector<ClipCandidate> candidates;
  std::vector<double> factors;
  double observed_min = 0.0;
  double observed_max = 0.0;
  GridShape shape = GridShape::Capped;

  static ClipSearchGrid from_range(double observed_min, double observed_max, int steps = 100,
                                   double min_fraction = 0.005, GridShape shape = GridShape::Capped);
  static ClipSearchGrid explicit_candidates(std::vector<std::pair<double, double>> ranges);

  /// Candidates within +-radius steps of `winner` on each side independently.
  std::vector<ClipCandidate> refine_around(const ClipCandidate& winner, int radius = 3) const;
};

struct SearchResult {
  double x_low = 0.0;
  double x_up = 0.0;
  double objective = 0.0;
  int candidates_evaluated = 0;
};

/// True if (obj, cand) beats (best_obj, best): lower objective, ties to the tighter range.
bool better_candidate(double obj, const ClipCandidate& cand, double best_obj, const ClipCandidate& best);

/// Values from a set of samples, capped at `cap` by deterministic random subsampling.
std::vector<double> collect_values(const std::vector<Mat>& samples, std::size_t cap = 32768);

/// Mean squared fake-quant error over all samples, minimized over the grid.
SearchResult search_clip_mse(const std::vector<Mat>& samples, const ClipSearchGrid& grid, int bits,
                             bool refine = true, int radius = 3);
SearchResult search_clip_mse_values(const std::vector<double>& values, const ClipSearchGrid& grid, int bits,
                                    bool refine = true, int radius = 3);

/// Q/K side of one attention module, evaluated without a tape.
struct QKProbe {
  std::string module;
  Mat wq, bq, wk, bk;
  int heads = 1;
  TokenGroups groups;  // empty: full attention
};

QKProbe make_probe(const Model& model, const std::string& module);

struct QKSample {
  Mat xq;
  Mat xk;
};

enum QKTensor : int { kQIn = 0, kQOut = 1, kKIn = 2, kKOut = 3 };
inline constexpr std::array<const char*, 4> kQKSuffix = {".q.in", ".q.out", ".k.in", ".k.out"};

using QKQuant = std::array<std::optional<quant::QuantParams>, 4>;

/// Per-(group, head) attention weights with fake-quant on the given QK tensors.
std::vector<Mat> probe_weights(const QKProbe& probe, const QKSample& sample, const QKQuant& quant = {});

/// Observed (min, max) of the four QK tensors at full precision.
std::array<std::pair<double, double>, 4> probe_ranges(const QKProbe& probe, const QKSample& sample);
std::array<std::pair<double, double>, 4> probe_ranges(const QKProbe& probe, const std::vector<QKSample>& samples);

/// How equal-distance candidates are ranked: by the value error of the tensor
/// itself on the sample, or by width alone.
enum class TieBreak { ValueError, Narrowest };

struct PccOptions {
  double theta = 0.5;
  int bits = 8;
  MaxScope scope = MaxScope::Global;
  int sweeps = 2;
  bool refine = true;
  int radius = 3;
  TieBreak tie_break = TieBreak::Narrowest;
};

struct PccResult {
  std::array<SearchResult, 4> tensors;
  /// Module dist_pcc with all four selected ranges applied together.
  double joint_objective = 0.0;
};

/// Coordinate descent over the four QK tensors: each tensor's grid is scanned
/// with the others at their current choice (full precision before their first
/// visit); an asymmetric refinement pass follows. Throws RangeError on an empty grid.
PccResult search_clip_pcc(const QKProbe& probe, const QKSample& sample, const std::array<ClipSearchGrid, 4>& grids,
                          const PccOptions& opts);
/// Several samples: the objective is the mean dist_pcc over them.
PccResult search_clip_pcc(const QKProbe& probe, const std::vector<QKSample>& samples,
                          const std::array<ClipSearchGrid, 4>& grids, const PccOptions& opts);
/// Builds capped grids from the sample's observed ranges.
PccResult search_clip_pcc(const QKProbe& probe, const QKSample& sample, const PccOptions& opts, int steps = 100,
                          double min_fraction = 0.005);

/// Module dist_pcc for fixed ranges (nullopt entries stay in full precision).
double evaluate_pcc(const QKProbe& probe, const QKSample& sample, const QKQuant& quant, double theta,
                    MaxScope scope = MaxScope::Global);
double evaluate_pcc(const QKProbe& probe, const std::vector<QKSample>& samples, const QKQuant& quant, double theta,
                    MaxScope scope = MaxScope::Global);

}  // namespace saq::pcc
