#include "saq/ops.hpp"

#include "saq/errors.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace saq {

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions disagree");
  Tape& t = a.tape();
  return t.record(a.value() * b.value(), {a, b},
                  [a, b](Tape& tp, const Mat& g) {
                    if (tp.needs_grad(a)) tp.accumulate(a, g * b.value().transpose());
                    if (tp.needs_grad(b)) tp.accumulate(b, a.value().transpose() * g);
                  },
                  "matmul");
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: inner dimensions disagree");
  Tape& t = a.tape();
  return t.record(a.value() * b.value().transpose(), {a, b},
                  [a, b](Tape& tp, const Mat& g) {
                    if (tp.needs_grad(a)) tp.accumulate(a, g * b.value());
                    if (tp.needs_grad(b)) tp.accumulate(b, g.transpose() * a.value());
                  },
                  "matmul");
}

Var transpose(const Var& a) {
  return a.tape().record(a.value().transpose(), {a},
                         [a](Tape& tp, const Mat& g) { tp.accumulate(a, g.transpose()); },
                         "transpose");
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return a.tape().record(a.value() + b.value(), {a, b},
                         [a, b](Tape& tp, const Mat& g) {
                           tp.accumulate(a, g);
                           tp.accumulate(b, g);
                         },
                         "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return a.tape().record(a.value() - b.value(), {a, b},
                         [a, b](Tape& tp, const Mat& g) {
                           tp.accumulate(a, g);
                           if (tp.needs_grad(b)) tp.accumulate(b, -g);
                         },
                         "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b},
                         [a, b](Tape& tp, const Mat& g) {
                           if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
                           if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
                         },
                         "mul");
}

Var scale(const Var& a, double c) {
  return a.tape().record(a.value() * c, {a},
                         [a, c](Tape& tp, const Mat& g) { tp.accumulate(a, g * c); }, "scale");
}

Var add_row(const Var& x, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) throw DimensionError("add_row: bias must be 1xN");
  Mat out = x.value();
  out.rowwise() += bias.value().row(0);
  return x.tape().record(std::move(out), {x, bias},
                         [x, bias](Tape& tp, const Mat& g) {
                           tp.accumulate(x, g);
                           if (tp.needs_grad(bias)) tp.accumulate(bias, g.colwise().sum());
                         },
                         "add_row");
}

Mat softmax_rows_value(const Mat& x) {
  if (x.cols() < 1) throw DimensionError("softmax: empty last dimension");
  Mat y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

Var softmax_rows(const Var& x) {
  Mat y = softmax_rows_value(x.value());
  Mat yc = y;
  return x.tape().record(std::move(y), {x},
                         [x, y = std::move(yc)](Tape& tp, const Mat& g) {
                           Mat gy = g.cwiseProduct(y);
                           Eigen::VectorXd s = gy.rowwise().sum();
                           tp.accumulate(x, gy - (y.array().colwise() * s.array()).matrix());
                         },
                         "softmax");
}

Mat layer_norm_value(const Mat& x, const Mat& gamma, const Mat& beta, double eps) {
  const Index n = x.cols();
  Mat y(x.rows(), n);
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    y.row(r) = ((x.row(r).array() - mu) * inv * gamma.row(0).array() + beta.row(0).array()).matrix();
  }
  return y;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw DimensionError("layer_norm: gamma/beta must match the last dimension");
  }
  Mat xhat(x.rows(), n);
  Eigen::VectorXd inv(x.rows());
  const Mat& xv = x.value();
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv(r);
  }
  Mat y = xhat;
  y.array().rowwise() *= gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  return x.tape().record(std::move(y), {x, gamma, beta},
                         [x, gamma, beta, xhat, inv, n](Tape& tp, const Mat& g) {
                           if (tp.needs_grad(gamma)) {
                             tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                           }
                           if (tp.needs_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                           if (tp.needs_grad(x)) {
                             Mat dxhat = g;
                             dxhat.array().rowwise() *= gamma.value().row(0).array();
                             Mat dx(dxhat.rows(), n);
                             for (Index r = 0; r < dxhat.rows(); ++r) {
                               const double s1 = dxhat.row(r).sum();
                               const double s2 = dxhat.row(r).dot(xhat.row(r));
                               dx.row(r) = (inv(r) / static_cast<double>(n)) *
                                           (static_cast<double>(n) * dxhat.row(r).array() - s1 -
                                            xhat.row(r).array() * s2)
                                               .matrix();
                             }
                             tp.accumulate(x, dx);
                           }
                         },
                         "layer_norm");
}

Mat gelu_value(const Mat& x) {
  return x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  });
}

Var gelu(const Var& x) {
  return x.tape().record(gelu_value(x.value()), {x},
                         [x](Tape& tp, const Mat& g) {
                           Mat d = x.value().unaryExpr([](double v) {
                             const double u = kGeluC * (v + kGeluA * v * v * v);
                             const double th = std::tanh(u);
                             const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                             return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                           });
                           tp.accumulate(x, g.cwiseProduct(d));
                         },
                         "gelu");
}

Var gather_rows(const Var& x, const std::vector<int>& rows) {
  const Mat& xv = x.value();
  Mat out(static_cast<Index>(rows.size()), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = xv.row(rows[i]);
  }
  const Index src_rows = xv.rows();
  return x.tape().record(std::move(out), {x},
                         [x, rows, src_rows](Tape& tp, const Mat& g) {
                           Mat dx = Mat::Zero(src_rows, g.cols());
                           for (std::size_t i = 0; i < rows.size(); ++i) {
                             dx.row(rows[i]) += g.row(static_cast<Index>(i));
                           }
                           tp.accumulate(x, dx);
                         },
                         "gather_rows");
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape().record(std::move(out), std::span<const Var>(parts),
                                     [parts](Tape& tp, const Mat& g) {
                                       Index off = 0;
                                       for (const Var& p : parts) {
                                         tp.accumulate(p, g.middleRows(off, p.rows()));
                                         off += p.rows();
                                       }
                                     },
                                     "concat_rows");
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().tape().record(std::move(out), std::span<const Var>(parts),
                                     [parts](Tape& tp, const Mat& g) {
                                       Index off = 0;
                                       for (const Var& p : parts) {
                                         tp.accumulate(p, g.middleCols(off, p.cols()));
                                         off += p.cols();
                                       }
                                     },
                                     "concat_cols");
}

Var slice_cols(const Var& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw DimensionError("slice_cols: out of range");
  const Index total = x.cols();
  return x.tape().record(x.value().middleCols(start, count), {x},
                         [x, start, count, total](Tape& tp, const Mat& g) {
                           Mat dx = Mat::Zero(g.rows(), total);
                           dx.middleCols(start, count) = g;
                           tp.accumulate(x, dx);
                         },
                         "slice_cols");
}

Var sum(const Var& x) {
  const Index r = x.rows();
  const Index c = x.cols();
  return x.tape().record(scalar_mat(x.value().sum()), {x},
                         [x, r, c](Tape& tp, const Mat& g) {
                           tp.accumulate(x, Mat::Constant(r, c, g(0, 0)));
                         },
                         "sum");
}

Var sum_squares(const Var& x) {
  return x.tape().record(scalar_mat(x.value().squaredNorm()), {x},
                         [x](Tape& tp, const Mat& g) { tp.accumulate(x, 2.0 * g(0, 0) * x.value()); },
                         "sum_squares");
}

Var squared_distance(const Var& a, const Var& b) { return sum_squares(sub(a, b)); }

}  // namespace saq
