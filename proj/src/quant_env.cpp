#include "saq/quant_env.hpp"

namespace saq {

quant::QuantParams ActQuantizer::params() const {
  return quant::params_from_bounds(low.data(0, 0), up.data(0, 0), bits);
}

void ActQuantizer::set_bounds(double x_low, double x_up) {
  low.data(0, 0) = x_low;
  up.data(0, 0) = x_up;
}

bool has_any_prefix(const std::string& name, const std::vector<std::string>& prefixes) {
  for (const std::string& p : prefixes) {
    if (name.compare(0, p.size(), p) == 0) return true;
  }
  return false;
}

bool QuantEnv::is_active(const std::string& name) const {
  return active_prefixes.empty() || has_any_prefix(name, active_prefixes);
}

bool QuantEnv::is_learning(const std::string& name) const { return has_any_prefix(name, learn_prefixes); }

Var QuantEnv::apply_act(Tape& tape, const std::string& name, const Var& x) {
  auto it = acts.find(name);
  if (it == acts.end() || !it->second.enabled || !is_active(name)) return x;
  ActQuantizer& q = it->second;
  if (is_learning(name) && tape.grad_enabled()) {
    Var lo = tape.leaf(q.low);
    Var hi = tape.leaf(q.up);
    if (drop_prob > 0.0 && rng != nullptr) return quant::qdrop_fake_quant(x, lo, hi, q.bits, drop_prob, *rng);
    return quant::fake_quant(x, lo, hi, q.bits);
  }
  return quant::fake_quant(x, q.params());
}

Var QuantEnv::apply_weight(Tape& tape, const std::string& name, const Var& w) {
  auto it = weights.find(name);
  if (it == weights.end() || !it->second.enabled || !is_active(name)) return w;
  WeightQuantizer& q = it->second;
  if (q.mode == quant::RoundingMode::Nearest || !q.rounding) {
    return quant::fake_quant_weight(w, q.channels, Var{}, quant::RoundingMode::Nearest);
  }
  Var alpha = (is_learning(name) && tape.grad_enabled()) ? tape.leaf(q.rounding->alpha)
                                                         : tape.constant(q.rounding->alpha.data);
  return quant::fake_quant_weight(w, q.channels, alpha, q.mode);
}

std::vector<Tensor*> QuantEnv::learnable_bounds(const std::vector<std::string>& prefixes) {
  std::vector<Tensor*> out;
  for (auto& [name, q] : acts) {
    if (q.enabled && has_any_prefix(name, prefixes)) {
      out.push_back(&q.low);
      out.push_back(&q.up);
    }
  }
  return out;
}

std::vector<Tensor*> QuantEnv::learnable_rounding(const std::vector<std::string>& prefixes) {
  std::vector<Tensor*> out;
  for (auto& [name, q] : weights) {
    if (q.enabled && q.rounding && q.mode == quant::RoundingMode::Soft && has_any_prefix(name, prefixes)) {
      out.push_back(&q.rounding->alpha);
    }
  }
  return out;
}

void QuantEnv::harden(const std::vector<std::string>& prefixes) {
  for (auto& [name, q] : weights) {
    if (q.rounding && q.mode == quant::RoundingMode::Soft && has_any_prefix(name, prefixes)) {
      q.mode = quant::RoundingMode::Hard;
    }
  }
}

}  // namespace saq
