#pragma once

#include "saq/autodiff.hpp"
#include "saq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace saq::quant {

enum class Granularity { PerTensor, PerChannel };

/// Uniform affine quantizer state. scale and zero_point always follow from
/// the clipping bounds: s = (x_up - x_low) / (2^b - 1), z = round(-x_low / s).
struct QuantParams {
  int bits = 8;
  double x_low = 0.0;
  double x_up = 1.0;
  double scale = 1.0 / 255.0;
  std::int64_t zero_point = 0;
  Granularity granularity = Granularity::PerTensor;
  int axis = -1;
  bool learnable = false;
  /// Set when round(-x_low / s) fell outside [0, 2^b - 1] and was clamped.
  bool zero_point_clamped = false;

  std::int64_t qmax() const { return (std::int64_t{1} << bits) - 1; }
  /// Smallest and largest representable values, dequant(0) and dequant(qmax).
  double dequant_min() const { return scale * static_cast<double>(-zero_point); }
  double dequant_max() const { return scale * static_cast<double>(qmax() - zero_point); }
};

/// Per-output-channel parameters; axis 1 is the output axis of an [in x out]
/// weight matrix.
struct ChannelParams {
  std::vector<QuantParams> channels;
  int axis = 1;
};

/// Throws RangeError unless x_up > x_low and bits is in [2, 16].
QuantParams params_from_bounds(double x_low, double x_up, int bits);

inline std::int64_t quantize_scalar(double x, const QuantParams& qp) {
  const double v = std::nearbyint(x / qp.scale) + static_cast<double>(qp.zero_point);
  const double clipped = std::clamp(v, 0.0, static_cast<double>(qp.qmax()));
  return static_cast<std::int64_t>(clipped);
}

inline double dequantize_scalar(std::int64_t xq, const QuantParams& qp) {
  return qp.scale * static_cast<double>(xq - qp.zero_point);
}

template <typename Derived>
MatrixR<std::int64_t> quantize(const Eigen::MatrixBase<Derived>& x, const QuantParams& qp) {
  const double inv = 1.0 / qp.scale;
  const double z = static_cast<double>(qp.zero_point);
  const double hi = static_cast<double>(qp.qmax());
  return x.derived()
      .unaryExpr([=](typename Derived::Scalar v) {
        const double q = std::nearbyint(static_cast<double>(v) * inv) + z;
        return static_cast<std::int64_t>(std::clamp(q, 0.0, hi));
      })
      .eval();
}

template <typename Derived>
Mat dequantize(const Eigen::MatrixBase<Derived>& xq, const QuantParams& qp) {
  const double z = static_cast<double>(qp.zero_point);
  return ((xq.derived().template cast<double>().array() - z) * qp.scale).matrix();
}

Mat fake_quant_value(const Mat& x, const QuantParams& qp);
/// Per-channel fake quantization along ChannelParams::axis.
Mat fake_quant_value(const Mat& w, const ChannelParams& cp);

/// (min, max) of every slice along `axis` (1 = columns of an [in x out] weight).
std::vector<std::pair<double, double>> per_channel_bounds(const Mat& w, int axis = 1);

/// Fake quantization with fixed parameters. Straight-through in x: gradient 1
/// inside [dequant_min, dequant_max], 0 outside.
Var fake_quant(const Var& x, const QuantParams& qp);

/// Fake quantization whose 1x1 bounds `low`/`up` receive gradients. Inside the
/// range the bounds get the rounding residual through s; saturated elements
/// pass their gradient to the bound they clip against. `keep` (optional,
/// same shape as x) marks elements that bypass quantization.
Var fake_quant(const Var& x, const Var& low, const Var& up, int bits, const Mat* keep = nullptr);

/// With probability p an element passes through unquantized.
Mat qdrop_keep_mask(Index rows, Index cols, double p, std::mt19937_64& rng);
Var qdrop_fake_quant(const Var& x, const QuantParams& qp, double p, std::mt19937_64& rng);
Var qdrop_fake_quant(const Var& x, const Var& low, const Var& up, int bits, double p,
                     std::mt19937_64& rng);

/// Rectified-sigmoid stretch bounds for the rounding offset.
inline constexpr double kRoundZeta = 1.1;
inline constexpr double kRoundGamma = -0.1;

/// Learnable rounding choice between floor and ceil for each weight entry.
struct RoundingVars {
  Tensor alpha;

  /// Initializes alpha so that the soft offset equals frac(w / s).
  static RoundingVars from_weight(const Mat& w, const ChannelParams& cp);
  /// Elementwise offset in [0, 1].
  Mat offset() const;
};

double rectified_sigmoid(double alpha);

enum class RoundingMode { Nearest, Soft, Hard };

/// dequant(clip(floor(w/s) + offset(alpha) + z)). `alpha` may be invalid for
/// RoundingMode::Nearest. Differentiable in alpha under Soft mode.
Var fake_quant_weight(const Var& w, const ChannelParams& cp, const Var& alpha, RoundingMode mode);

/// sum(1 - |2 h(alpha) - 1|^beta).
Var rounding_regularizer(const Var& alpha, double beta);
double rounding_regularizer_value(const Mat& alpha, double beta);

/// Beta schedule: held at `start` during warmup, then linear decay to `end`.
double anneal_beta(long iter, long total, double warmup = 0.2, double start = 20.0, double end = 2.0);

}  // namespace saq::quant
