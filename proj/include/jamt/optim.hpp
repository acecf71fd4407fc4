#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jamt/blocks.hpp"

namespace jamt {

// Inverse-square-root schedule with a linear warmup from the floor to the
// peak; step counting starts at 1.
struct LrSchedule {
  int warmup = 4000;
  double peak = 0.0005;
  double floor = 1e-7;

  double lr_at(int64_t step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// Adam over the parameters exposed by a visit function. Non-trainable
// parameters are skipped entirely: no update, no moment decay.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  using VisitFn = std::function<void(const ParamVisitor&)>;
  void attach(const VisitFn& visit);

  // caller divides accumulated grads by the accumulation count first
  void step(double lr);
  void zero_grads();
  void divide_grads(double by);

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  const AdamConfig& config() const { return cfg_; }

  // moment access for checkpointing, in attach order
  void for_each_slot(
      const std::function<void(const std::string&, std::vector<real_t>&,
                               std::vector<real_t>&)>& fn);

 private:
  struct Slot {
    Parameter* p = nullptr;
    std::vector<real_t> m, v;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

}  // namespace jamt
