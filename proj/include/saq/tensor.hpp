#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <vector>

namespace saq {

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Mat = MatrixR<double>;
using IMat = MatrixR<std::int64_t>;
using Index = Eigen::Index;

/// Dense rank-2 value array with optional gradient storage. Rank-1 values are
/// 1xN rows; scalars are 1x1. Higher-rank quantities (per-head attention maps,
/// CxHxW images) are carried as vectors of matrices or flattened rows.
struct Tensor {
  Mat data;
  bool requires_grad = false;
  Mat grad;  // empty until a backward pass touches this tensor

  Tensor() = default;
  explicit Tensor(Mat value, bool track = false) : data(std::move(value)), requires_grad(track) {}

  std::array<Index, 2> shape() const { return {data.rows(), data.cols()}; }
  Index size() const { return data.size(); }
  bool has_grad() const { return grad.size() == data.size() && grad.size() > 0; }
  void zero_grad() { grad = Mat::Zero(data.rows(), data.cols()); }
};

inline Mat scalar_mat(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return m;
}

}  // namespace saq
