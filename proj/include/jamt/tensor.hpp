#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "jamt/common.hpp"
#include "jamt/rng.hpp"

namespace jamt {

// Boolean attendability mask with the same row-major layout as a tensor;
// true marks a position that may receive attention.
struct Mask {
  std::vector<int> shape;
  std::vector<uint8_t> on;

  Mask() = default;
  Mask(std::vector<int> s, bool value);
  static Mask full(std::vector<int> shape, bool value = true) {
    return Mask(std::move(shape), value);
  }

  int64_t numel() const;
  int rows() const;
  int cols() const;
  uint8_t& at(int r, int c) { return on[static_cast<size_t>(r) * cols() + c]; }
  uint8_t at(int r, int c) const {
    return on[static_cast<size_t>(r) * cols() + c];
  }
};

namespace detail {
struct Node;
}

// Dense row-major tensor participating in reverse-mode differentiation.
// Values are immutable once the tensor has entered a graph; only parameter
// storage (between steps) and grad accumulators are mutated in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor constant(std::vector<int> shape, real_t value,
                         bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<real_t> data,
                          bool requires_grad = false);
  static Tensor scalar(real_t v);

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const;
  int64_t numel() const;
  int rows() const;  // product of all dims but the last (1 for rank 0/1)
  int cols() const;  // last dim
  bool requires_grad() const;
  void set_requires_grad(bool v);

  std::span<const real_t> data() const;
  // In-place access for parameter updates between graphs.
  std::span<real_t> raw_data();
  real_t item() const;  // numel() must be 1
  real_t at(int r, int c) const;

  bool has_grad() const;
  std::span<const real_t> grad() const;
  std::span<real_t> raw_grad();  // allocates zeros on first use
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return n_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> n_;
};

// RAII guard that disables graph recording (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- differentiable operations ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& x, real_t c);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor transpose2d(const Tensor& x);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor concat_cols(const std::vector<Tensor>& xs);
// sum_i w[i] * xs[i]; w is rank-1 with one weight per state
Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& w);
Tensor masked_softmax(const Tensor& x, const Mask& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real_t eps = static_cast<real_t>(1e-5));
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
// Inverted dropout: scales kept entries by 1/(1-p) at train time.
Tensor dropout(const Tensor& x, real_t p, RngStream& rng, bool training);
Tensor sum(const Tensor& x);

// Sum over included rows of -log softmax(logits)[target]; `count` receives
// the number of included rows. With label smoothing e the target
// distribution becomes (1-e)*onehot + e/V.
Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& include,
                         int64_t* count = nullptr, real_t label_smoothing = 0);
// Mean over included rows; errors when no row is included.
Tensor cross_entropy_mean(const Tensor& logits,
                          const std::vector<int>& targets,
                          const std::vector<uint8_t>& include,
                          real_t label_smoothing = 0);

// Reverse pass from a scalar loss. Accumulates into the persistent grad of
// every reachable source tensor with requires_grad; repeated calls on the
// same graph keep accumulating.
void backward(const Tensor& loss);

// Max over all parameter entries of
// |analytic - central difference| / max(|analytic|, |central|, 1e-12).
// f must rebuild the loss from the current parameter values and be
// deterministic across calls.
double check_gradients(const std::function<Tensor()>& f,
                       const std::vector<Tensor>& params, double eps);

}  // namespace jamt
