#include "jamt/optim.hpp"

#include <cmath>

namespace jamt {

double LrSchedule::lr_at(int64_t step) const {
  if (step < 1)
    throw UsageError("lr_at: step must be >= 1, got " + std::to_string(step));
  if (step >= warmup)
    return peak * std::sqrt(static_cast<double>(warmup)) /
           std::sqrt(static_cast<double>(step));
  return floor + (peak - floor) * (static_cast<double>(step) / warmup);
}

void Adam::attach(const VisitFn& visit) {
  slots_.clear();
  t_ = 0;
  visit([this](Parameter& p) {
    Slot s;
    s.p = &p;
    s.m.assign(p.tensor.numel(), 0);
    s.v.assign(p.tensor.numel(), 0);
    slots_.push_back(std::move(s));
  });
}

void Adam::step(double lr) {
  ++t_;
  double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.p->trainable) continue;
    if (!s.p->tensor.has_grad()) continue;
    auto g = s.p->tensor.grad();
    auto w = s.p->tensor.raw_data();
    for (size_t i = 0; i < w.size(); ++i) {
      double gi = g[i];
      if (!std::isfinite(gi))
        throw NumericError("adam: non-finite gradient in " + s.p->name);
      double m = cfg_.beta1 * s.m[i] + (1 - cfg_.beta1) * gi;
      double v = cfg_.beta2 * s.v[i] + (1 - cfg_.beta2) * gi * gi;
      s.m[i] = static_cast<real_t>(m);
      s.v[i] = static_cast<real_t>(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      w[i] -= static_cast<real_t>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

void Adam::zero_grads() {
  for (auto& s : slots_) s.p->tensor.zero_grad();
}

void Adam::divide_grads(double by) {
  if (by == 1) return;
  real_t scale = static_cast<real_t>(1.0 / by);
  for (auto& s : slots_) {
    if (!s.p->trainable || !s.p->tensor.has_grad()) continue;
    for (auto& g : s.p->tensor.raw_grad()) g *= scale;
  }
}

void Adam::for_each_slot(
    const std::function<void(const std::string&, std::vector<real_t>&,
                             std::vector<real_t>&)>& fn) {
  for (auto& s : slots_) fn(s.p->name, s.m, s.v);
}

}  // namespace jamt
