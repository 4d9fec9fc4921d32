#pragma once

#include "saq/tensor.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <unordered_map>

namespace saq {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid until the tape
/// is cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;
  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of primitive operations. Nodes live in a deque so
/// references to recorded values stay valid while new nodes are appended.
class Tape {
 public:
  /// Receives the gradient of the loss w.r.t. the node's output and must
  /// route it to the node's inputs via Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Mat&)>;

  Var constant(Mat value);
  /// Records a reference to an externally owned tensor. Its gradient is
  /// written back to tensor.grad by backward() when requires_grad is set.
  Var leaf(Tensor& tensor);
  /// Records a custom operation. `fn` is dropped when none of the inputs need
  /// gradients or recording of gradients is disabled.
  Var record(Mat value, std::span<const Var> inputs, BackwardFn fn,
             std::string_view op = "custom");
  Var record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn,
             std::string_view op = "custom") {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn), op);
  }

  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  void accumulate(const Var& v, const Mat& grad);

  /// Populates gradients of every requires_grad leaf on this tape. Leaves the
  /// loss does not reach receive zeros.
  void backward(const Var& loss);
  void clear() { nodes_.clear(); }

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  std::size_t size() const { return nodes_.size(); }
  /// Number of recorded nodes whose op tag starts with `prefix`.
  std::size_t count_ops(std::string_view prefix) const;

  const Mat& value(int id) const { return nodes_[id].value; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Tensor* leaf = nullptr;
    BackwardFn backward;
    bool needs_grad = false;
    std::string_view op;
  };
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

inline const Mat& Var::value() const { return tape_->value(id_); }

/// Disables gradient recording on a tape for the lifetime of the guard.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with first/second moment state keyed per parameter tensor.
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  /// Throws ContractError if any parameter has no populated gradient.
  void step(std::span<Tensor* const> params);
  void reset() { state_.clear(); }
  const AdamOptions& options() const { return opts_; }

 private:
  struct Moments {
    Mat m;
    Mat v;
    long t = 0;
  };
  AdamOptions opts_;
  std::unordered_map<const Tensor*, Moments> state_;
};

/// Central-difference gradient of a scalar function. Test oracle only.
Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& x, double h = 1e-5);

}  // namespace saq
