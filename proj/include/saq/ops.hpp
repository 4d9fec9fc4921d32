#pragma once

#include "saq/autodiff.hpp"

#include <vector>

namespace saq {

// Differentiable primitives. All operate row-wise on rank-2 values.

Var matmul(const Var& a, const Var& b);
/// a * b^T without materializing the transpose on the tape.
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
/// x + broadcast of the 1xN row `bias` onto every row.
Var add_row(const Var& x, const Var& bias);
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var gelu(const Var& x);
Var gather_rows(const Var& x, const std::vector<int>& rows);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& x, Index start, Index count);
Var sum(const Var& x);
Var sum_squares(const Var& x);
/// Sum of squared differences, 1x1.
Var squared_distance(const Var& a, const Var& b);

// Plain-value kernels shared with non-taped code paths.
Mat softmax_rows_value(const Mat& x);
Mat gelu_value(const Mat& x);
Mat layer_norm_value(const Mat& x, const Mat& gamma, const Mat& beta, double eps = 1e-5);

}  // namespace saq
