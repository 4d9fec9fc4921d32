#pragma once

#include "saq/autodiff.hpp"

#include <functional>
#include <random>
#include <vector>

namespace saq::testing {

inline Mat random_mat(Index r, Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Builds the op on fresh leaves and reduces it with a fixed random projection,
/// so every output entry contributes to the checked scalar.
using OpFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Max over inputs of ||analytic - numeric|| / max(||numeric||, 1e-8).
inline double gradcheck(const OpFn& op, std::vector<Mat> inputs, std::mt19937_64& rng, double h = 1e-5) {
  Mat proj;
  auto eval = [&](const std::vector<Mat>& xs) {
    Tape tape;
    std::vector<Var> vs;
    for (const Mat& x : xs) vs.push_back(tape.constant(x));
    const Mat out = op(tape, vs).value();
    if (proj.size() == 0) proj = random_mat(out.rows(), out.cols(), rng);
    return out.cwiseProduct(proj).sum();
  };
  eval(inputs);

  std::vector<Tensor> leaves;
  for (const Mat& x : inputs) leaves.emplace_back(x, true);
  Tape tape;
  std::vector<Var> vs;
  for (Tensor& t : leaves) vs.push_back(tape.leaf(t));
  const Var out = op(tape, vs);
  const Var loss = tape.record(scalar_mat(out.value().cwiseProduct(proj).sum()), {out},
                               [out, p = proj](Tape& t, const Mat& g) { t.accumulate(out, g(0, 0) * p); });
  tape.backward(loss);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Mat numeric = finite_diff_grad(
        [&](const Mat& x) {
          std::vector<Mat> xs = inputs;
          xs[i] = x;
          return eval(xs);
        },
        inputs[i], h);
    const double err = (leaves[i].grad - numeric).norm() / std::max(numeric.norm(), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace saq::testing
