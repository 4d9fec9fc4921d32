#include "saq/quantizer.hpp"

#include <algorithm>
#include <string>

namespace saq::quant {

QuantParams params_from_bounds(double x_low, double x_up, int bits) {
  if (bits < 2 || bits > 16) throw RangeError("bit-width must lie in [2, 16], got " + std::to_string(bits));
  if (!(x_up > x_low) || !std::isfinite(x_low) || !std::isfinite(x_up)) {
    throw RangeError("degenerate clipping range [" + std::to_string(x_low) + ", " + std::to_string(x_up) + "]");
  }
  QuantParams qp;
  qp.bits = bits;
  qp.x_low = x_low;
  qp.x_up = x_up;
  const double levels = static_cast<double>((std::int64_t{1} << bits) - 1);
  qp.scale = (x_up - x_low) / levels;
  // -x_low / s written without the intermediate division so that exact
  // half-integers (e.g. 31.5) stay exact before round-half-even.
  const double z = std::nearbyint(-x_low * levels / (x_up - x_low));
  const double zc = std::clamp(z, 0.0, levels);
  qp.zero_point_clamped = zc != z;
  qp.zero_point = static_cast<std::int64_t>(zc);
  return qp;
}

Mat fake_quant_value(const Mat& x, const QuantParams& qp) {
  const double inv = 1.0 / qp.scale;
  const double z = static_cast<double>(qp.zero_point);
  const double hi = static_cast<double>(qp.qmax());
  const double s = qp.scale;
  return x.unaryExpr([=](double v) { return s * (std::clamp(std::nearbyint(v * inv) + z, 0.0, hi) - z); });
}

Mat fake_quant_value(const Mat& w, const ChannelParams& cp) {
  Mat out(w.rows(), w.cols());
  if (cp.axis == 1) {
    if (static_cast<Index>(cp.channels.size()) != w.cols()) throw DimensionError("per-channel count mismatch");
    for (Index c = 0; c < w.cols(); ++c) out.col(c) = fake_quant_value(Mat(w.col(c)), cp.channels[c]);
  } else {
    if (static_cast<Index>(cp.channels.size()) != w.rows()) throw DimensionError("per-channel count mismatch");
    for (Index r = 0; r < w.rows(); ++r) out.row(r) = fake_quant_value(Mat(w.row(r)), cp.channels[r]);
  }
  return out;
}

std::vector<std::pair<double, double>> per_channel_bounds(const Mat& w, int axis) {
  std::vector<std::pair<double, double>> out;
  if (axis == 1) {
    for (Index c = 0; c < w.cols(); ++c) out.emplace_back(w.col(c).minCoeff(), w.col(c).maxCoeff());
  } else if (axis == 0) {
    for (Index r = 0; r < w.rows(); ++r) out.emplace_back(w.row(r).minCoeff(), w.row(r).maxCoeff());
  } else {
    throw DimensionError("per_channel_bounds: axis must be 0 or 1");
  }
  return out;
}

Var fake_quant(const Var& x, const QuantParams& qp) {
  const double lo = qp.dequant_min();
  const double hi = qp.dequant_max();
  return x.tape().record(fake_quant_value(x.value(), qp), {x},
                         [x, lo, hi](Tape& tp, const Mat& g) {
                           Mat mask = x.value().unaryExpr([=](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
                           tp.accumulate(x, g.cwiseProduct(mask));
                         },
                         "fake_quant");
}

namespace {

enum Region : signed char { kBelow = -1, kInside = 0, kAbove = 1, kKept = 2 };

}  // namespace

Var fake_quant(const Var& x, const Var& low, const Var& up, int bits, const Mat* keep) {
  if (low.value().size() != 1 || up.value().size() != 1) throw DimensionError("fake_quant: bounds must be 1x1");
  const QuantParams qp = params_from_bounds(low.item(), up.item(), bits);
  const Mat& xv = x.value();
  if (keep != nullptr && (keep->rows() != xv.rows() || keep->cols() != xv.cols())) {
    throw DimensionError("fake_quant: keep mask shape mismatch");
  }
  const double s = qp.scale;
  const double z = static_cast<double>(qp.zero_point);
  const double n = static_cast<double>(qp.qmax());
  Mat out(xv.rows(), xv.cols());
  MatrixR<signed char> region(xv.rows(), xv.cols());
  for (Index i = 0; i < xv.size(); ++i) {
    const double v = xv.data()[i];
    if (keep != nullptr && keep->data()[i] != 0.0) {
      out.data()[i] = v;
      region.data()[i] = kKept;
      continue;
    }
    const double q = std::nearbyint(v / s) + z;
    if (q < 0.0) {
      out.data()[i] = s * (0.0 - z);
      region.data()[i] = kBelow;
    } else if (q > n) {
      out.data()[i] = s * (n - z);
      region.data()[i] = kAbove;
    } else {
      out.data()[i] = s * (q - z);
      region.data()[i] = kInside;
    }
  }
  const double l = qp.x_low;
  const bool z_free = !qp.zero_point_clamped;
  return x.tape().record(
      std::move(out), {x, low, up},
      [x, low, up, region = std::move(region), s, z, n, l, z_free](Tape& tp, const Mat& g) {
        const Mat& xv = x.value();
        Mat gx(xv.rows(), xv.cols());
        double ds = 0.0;         // d out / d s, summed
        double dl_direct = 0.0;  // through z at fixed s
        for (Index i = 0; i < xv.size(); ++i) {
          const double gi = g.data()[i];
          switch (region.data()[i]) {
            case kKept:
              gx.data()[i] = gi;
              break;
            case kInside: {
              gx.data()[i] = gi;
              const double r = xv.data()[i] / s;
              ds += gi * (std::nearbyint(r) - r);
              break;
            }
            case kBelow:
              gx.data()[i] = 0.0;
              ds += gi * (z_free ? (-z - l / s) : -z);
              if (z_free) dl_direct += gi;
              break;
            case kAbove:
              gx.data()[i] = 0.0;
              ds += gi * (z_free ? (n - z - l / s) : (n - z));
              if (z_free) dl_direct += gi;
              break;
          }
        }
        tp.accumulate(x, gx);
        if (tp.needs_grad(low)) tp.accumulate(low, scalar_mat(dl_direct - ds / n));
        if (tp.needs_grad(up)) tp.accumulate(up, scalar_mat(ds / n));
      },
      "fake_quant");
}

Mat qdrop_keep_mask(Index rows, Index cols, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p > 1.0) throw RangeError("drop probability must lie in [0, 1]");
  Mat keep(rows, cols);
  if (p == 0.0) return Mat::Zero(rows, cols);
  if (p == 1.0) return Mat::Ones(rows, cols);
  std::bernoulli_distribution coin(p);
  for (Index i = 0; i < keep.size(); ++i) keep.data()[i] = coin(rng) ? 1.0 : 0.0;
  return keep;
}

Var qdrop_fake_quant(const Var& x, const QuantParams& qp, double p, std::mt19937_64& rng) {
  Tape& t = x.tape();
  Var lo = t.constant(scalar_mat(qp.x_low));
  Var hi = t.constant(scalar_mat(qp.x_up));
  return qdrop_fake_quant(x, lo, hi, qp.bits, p, rng);
}

Var qdrop_fake_quant(const Var& x, const Var& low, const Var& up, int bits, double p, std::mt19937_64& rng) {
  const Mat keep = qdrop_keep_mask(x.rows(), x.cols(), p, rng);
  return fake_quant(x, low, up, bits, &keep);
}

double rectified_sigmoid(double alpha) {
  const double sig = 1.0 / (1.0 + std::exp(-alpha));
  return std::clamp(sig * (kRoundZeta - kRoundGamma) + kRoundGamma, 0.0, 1.0);
}

namespace {

double rectified_sigmoid_grad(double alpha) {
  const double sig = 1.0 / (1.0 + std::exp(-alpha));
  const double pre = sig * (kRoundZeta - kRoundGamma) + kRoundGamma;
  if (pre <= 0.0 || pre >= 1.0) return 0.0;
  return (kRoundZeta - kRoundGamma) * sig * (1.0 - sig);
}

const QuantParams& channel_of(const ChannelParams& cp, Index r, Index c) {
  return cp.channels[static_cast<std::size_t>(cp.axis == 1 ? c : r)];
}

void check_channels(const ChannelParams& cp, const Mat& w) {
  const Index expect = cp.axis == 1 ? w.cols() : w.rows();
  if (static_cast<Index>(cp.channels.size()) != expect) throw DimensionError("per-channel count mismatch");
}

}  // namespace

RoundingVars RoundingVars::from_weight(const Mat& w, const ChannelParams& cp) {
  check_channels(cp, w);
  Mat alpha(w.rows(), w.cols());
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      const double ws = w(r, c) / channel_of(cp, r, c).scale;
      const double frac = ws - std::floor(ws);
      alpha(r, c) = -std::log((kRoundZeta - kRoundGamma) / (frac - kRoundGamma) - 1.0);
    }
  }
  return RoundingVars{Tensor(std::move(alpha), true)};
}

Mat RoundingVars::offset() const { return alpha.data.unaryExpr([](double a) { return rectified_sigmoid(a); }); }

Var fake_quant_weight(const Var& w, const ChannelParams& cp, const Var& alpha, RoundingMode mode) {
  const Mat& wv = w.value();
  check_channels(cp, wv);
  if (mode != RoundingMode::Nearest) {
    if (!alpha.valid() || alpha.rows() != wv.rows() || alpha.cols() != wv.cols()) {
      throw DimensionError("fake_quant_weight: rounding variables must match the weight shape");
    }
  }
  Mat out(wv.rows(), wv.cols());
  Mat inside(wv.rows(), wv.cols());
  Mat scales(wv.rows(), wv.cols());
  for (Index r = 0; r < wv.rows(); ++r) {
    for (Index c = 0; c < wv.cols(); ++c) {
      const QuantParams& qp = channel_of(cp, r, c);
      const double s = qp.scale;
      const double z = static_cast<double>(qp.zero_point);
      const double n = static_cast<double>(qp.qmax());
      double q = 0.0;
      switch (mode) {
        case RoundingMode::Nearest:
          q = std::nearbyint(wv(r, c) / s);
          break;
        case RoundingMode::Soft:
          q = std::floor(wv(r, c) / s) + rectified_sigmoid(alpha.value()(r, c));
          break;
        case RoundingMode::Hard:
          q = std::floor(wv(r, c) / s) + (alpha.value()(r, c) >= 0.0 ? 1.0 : 0.0);
          break;
      }
      const double v = q + z;
      inside(r, c) = (v >= 0.0 && v <= n) ? 1.0 : 0.0;
      out(r, c) = s * (std::clamp(v, 0.0, n) - z);
      scales(r, c) = s;
    }
  }
  Tape& t = w.tape();
  if (mode == RoundingMode::Soft) {
    return t.record(std::move(out), {w, alpha},
                    [w, alpha, inside, scales](Tape& tp, const Mat& g) {
                      tp.accumulate(w, g.cwiseProduct(inside));
                      if (tp.needs_grad(alpha)) {
                        Mat dh = alpha.value().unaryExpr([](double a) { return rectified_sigmoid_grad(a); });
                        tp.accumulate(alpha, g.cwiseProduct(inside).cwiseProduct(scales).cwiseProduct(dh));
                      }
                    },
                    "fake_quant_weight");
  }
  return t.record(std::move(out), {w},
                  [w, inside](Tape& tp, const Mat& g) { tp.accumulate(w, g.cwiseProduct(inside)); },
                  "fake_quant_weight");
}

double rounding_regularizer_value(const Mat& alpha, double beta) {
  double acc = 0.0;
  for (Index i = 0; i < alpha.size(); ++i) {
    const double h = rectified_sigmoid(alpha.data()[i]);
    acc += 1.0 - std::pow(std::abs(2.0 * h - 1.0), beta);
  }
  return acc;
}

Var rounding_regularizer(const Var& alpha, double beta) {
  return alpha.tape().record(scalar_mat(rounding_regularizer_value(alpha.value(), beta)), {alpha},
                             [alpha, beta](Tape& tp, const Mat& g) {
                               Mat d = alpha.value().unaryExpr([beta](double a) {
                                 const double u = 2.0 * rectified_sigmoid(a) - 1.0;
                                 const double au = std::abs(u);
                                 if (au == 0.0) return 0.0;
                                 const double sign = u > 0.0 ? 1.0 : -1.0;
                                 return -beta * std::pow(au, beta - 1.0) * sign * 2.0 * rectified_sigmoid_grad(a);
                               });
                               tp.accumulate(alpha, g(0, 0) * d);
                             },
                             "rounding_regularizer");
}

double anneal_beta(long iter, long total, double warmup, double start, double end) {
  if (total <= 0) return end;
  const double warm = warmup * static_cast<double>(total);
  const double it = static_cast<double>(iter);
  if (it < warm) return start;
  const double span = static_cast<double>(total) - warm;
  if (span <= 0.0) return end;
  const double frac = std::clamp((it - warm) / span, 0.0, 1.0);
  return start + (end - start) * frac;
}

}  // namespace saq::quant
