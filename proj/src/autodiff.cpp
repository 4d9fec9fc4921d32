#include "saq/autodiff.hpp"

#include "saq/errors.hpp"

#include <cmath>
#include <string>

namespace saq {

double Var::item() const {
  const Mat& v = value();
  if (v.size() != 1) throw ContractError("item() on non-scalar value");
  return v(0, 0);
}

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor& tensor) {
  Node n;
  n.value = tensor.data;
  n.op = "leaf";
  if (tensor.requires_grad && grad_enabled_) {
    n.leaf = &tensor;
    n.needs_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Mat value, std::span<const Var> inputs, BackwardFn fn, std::string_view op) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (nodes_[in.id()].needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
  }
  if (n.needs_grad) n.backward = std::move(fn);
  if (!n.value.allFinite()) {
    throw RangeError("non-finite value produced by op '" + std::string(op) + "'");
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(const Var& v, const Mat& grad) {
  Node& n = nodes_[v.id()];
  if (!n.needs_grad) return;
  if (grad.rows() != n.value.rows() || grad.cols() != n.value.cols()) {
    throw DimensionError("gradient shape does not match value shape");
  }
  if (n.grad.size() == 0) {
    n.grad = grad;
  } else {
    n.grad += grad;
  }
}

void Tape::backward(const Var& loss) {
  if (loss.value().size() != 1) throw ContractError("backward() requires a scalar loss");
  for (Node& n : nodes_) {
    n.grad.resize(0, 0);
    if (n.leaf != nullptr) n.leaf->zero_grad();
  }
  Node& root = nodes_[loss.id()];
  if (!root.needs_grad) return;
  root.grad = Mat::Ones(1, 1);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.leaf != nullptr) {
      n.leaf->grad += n.grad;
    } else if (n.backward) {
      // Copy: the callback may append to sibling grads but never to its own.
      const Mat g = n.grad;
      n.backward(*this, g);
    }
  }
}

std::size_t Tape::count_ops(std::string_view prefix) const {
  std::size_t c = 0;
  for (const Node& n : nodes_) {
    if (n.op.substr(0, prefix.size()) == prefix) ++c;
  }
  return c;
}

void Adam::step(std::span<Tensor* const> params) {
  for (Tensor* p : params) {
    if (!p->has_grad()) throw ContractError("adam step on a parameter without gradient");
    Moments& st = state_[p];
    if (st.t == 0) {
      st.m = Mat::Zero(p->data.rows(), p->data.cols());
      st.v = Mat::Zero(p->data.rows(), p->data.cols());
    }
    ++st.t;
    st.m = opts_.beta1 * st.m + (1.0 - opts_.beta1) * p->grad;
    st.v = opts_.beta2 * st.v + (1.0 - opts_.beta2) * p->grad.cwiseProduct(p->grad);
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(st.t));
    p->data.array() -=
        opts_.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + opts_.eps);
  }
}

Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& x, double h) {
  Mat g(x.rows(), x.cols());
  Mat probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double fp = f(probe);
    probe.data()[i] = orig - h;
    const double fm = f(probe);
    probe.data()[i] = orig;
    g.data()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace saq
