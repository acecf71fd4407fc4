#include "jamt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace jamt {

using EigenMat =
    Eigen::Matrix<real_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMat>;
using ConstMatMap = Eigen::Map<const EigenMat>;

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<real_t> value;
  std::vector<real_t> grad;  // persistent for sources, scratch otherwise
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;

  virtual ~Node() = default;
  virtual void backward_step() {}

  bool is_leaf() const { return inputs.empty(); }
  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  int rows() const {
    if (shape.empty()) return 1;
    int64_t r = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
    return static_cast<int>(r);
  }
  int cols() const { return shape.empty() ? 1 : shape.back(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0);
  }
  std::span<real_t> grad_span() {
    ensure_grad();
    return grad;
  }
};

}  // namespace detail

using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

void add_into(std::span<real_t> dst, const real_t* src, size_t n,
              real_t scale = 1) {
  for (size_t i = 0; i < n; ++i) dst[i] += scale * src[i];
}

template <typename NodeT, typename... Args>
Tensor finish(std::vector<std::shared_ptr<Node>> inputs, Args&&... args) {
  auto node = std::make_shared<NodeT>(std::forward<Args>(args)...);
  bool rec = g_grad_enabled;
  bool any = false;
  for (auto& in : inputs) any = any || in->requires_grad;
  if (rec && any) {
    node->inputs = std::move(inputs);
    node->requires_grad = true;
  }
  return Tensor(std::static_pointer_cast<Node>(node));
}

std::shared_ptr<Node> need(const Tensor& t, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
  return t.node();
}

ConstMatMap mat(const std::shared_ptr<Node>& n) {
  return ConstMatMap(n->value.data(), n->rows(), n->cols());
}

real_t stable_sigmoid(real_t x) {
  if (x >= 0) {
    real_t e = std::exp(-x);
    return 1 / (1 + e);
  }
  real_t e = std::exp(x);
  return e / (1 + e);
}

}  // namespace

// ---- Mask ----

Mask::Mask(std::vector<int> s, bool value) : shape(std::move(s)) {
  on.assign(static_cast<size_t>(shape_numel(shape)), value ? 1 : 0);
}

int64_t Mask::numel() const { return static_cast<int64_t>(on.size()); }

int Mask::rows() const {
  if (shape.empty()) return 1;
  int64_t r = 1;
  for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return static_cast<int>(r);
}

int Mask::cols() const { return shape.empty() ? 1 : shape.back(); }

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  int64_t count = shape_numel(shape);
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(count), 0);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::constant(std::vector<int> shape, real_t value,
                        bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.n_->value.begin(), t.n_->value.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<real_t> data,
                         bool requires_grad) {
  int64_t count = shape_numel(shape);
  if (count != static_cast<int64_t>(data.size()))
    throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                     std::to_string(count) + " values, got " +
                     std::to_string(data.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(real_t v) { return from_data({1}, {v}); }

const std::vector<int>& Tensor::shape() const { return n_->shape; }
int64_t Tensor::numel() const { return n_->numel(); }
int Tensor::rows() const { return n_->rows(); }
int Tensor::cols() const { return n_->cols(); }
bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

void Tensor::set_requires_grad(bool v) { n_->requires_grad = v; }

std::span<const real_t> Tensor::data() const { return n_->value; }
std::span<real_t> Tensor::raw_data() { return n_->value; }

real_t Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item: tensor " + shape_str(n_->shape) + " is not scalar");
  return n_->value[0];
}

real_t Tensor::at(int r, int c) const {
  return n_->value[static_cast<size_t>(r) * cols() + c];
}

bool Tensor::has_grad() const { return n_ && !n_->grad.empty(); }

std::span<const real_t> Tensor::grad() const {
  n_->ensure_grad();
  return n_->grad;
}

std::span<real_t> Tensor::raw_grad() { return n_->grad_span(); }

void Tensor::zero_grad() {
  if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), real_t(0));
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- op nodes ----

namespace {

struct MatMulNode : Node {
  void backward_step() override {
    auto& a = inputs[0];
    auto& b = inputs[1];
    ConstMatMap A(a->value.data(), a->rows(), a->cols());
    ConstMatMap B(b->value.data(), b->rows(), b->cols());
    ConstMatMap G(grad.data(), rows(), cols());
    if (a->requires_grad) {
      MatMap dA(a->grad_span().data(), a->rows(), a->cols());
      dA.noalias() += G * B.transpose();
    }
    if (b->requires_grad) {
      MatMap dB(b->grad_span().data(), b->rows(), b->cols());
      dB.noalias() += A.transpose() * G;
    }
  }
};

struct AddNode : Node {
  void backward_step() override {
    for (auto& in : inputs)
      if (in->requires_grad)
        add_into(in->grad_span(), grad.data(), grad.size());
  }
};

struct MulNode : Node {
  void backward_step() override {
    auto& a = inputs[0];
    auto& b = inputs[1];
    if (a->requires_grad) {
      auto g = a->grad_span();
      for (size_t i = 0; i < grad.size(); ++i) g[i] += grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      auto g = b->grad_span();
      for (size_t i = 0; i < grad.size(); ++i) g[i] += grad[i] * a->value[i];
    }
  }
};

struct ScalarMulNode : Node {
  real_t c = 0;
  void backward_step() override {
    if (inputs[0]->requires_grad)
      add_into(inputs[0]->grad_span(), grad.data(), grad.size(), c);
  }
};

struct AddRowBiasNode : Node {
  void backward_step() override {
    auto& x = inputs[0];
    auto& b = inputs[1];
    if (x->requires_grad) add_into(x->grad_span(), grad.data(), grad.size());
    if (b->requires_grad) {
      auto g = b->grad_span();
      int d = cols();
      int n = rows();
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c)
          g[c] += grad[static_cast<size_t>(r) * d + c];
    }
  }
};

struct ReluNode : Node {
  void backward_step() override {
    auto& x = inputs[0];
    if (!x->requires_grad) return;
    auto g = x->grad_span();
    for (size_t i = 0; i < grad.size(); ++i)
      if (x->value[i] > 0) g[i] += grad[i];
  }
};

struct SigmoidNode : Node {
  void backward_step() override {
    auto& x = inputs[0];
    if (!x->requires_grad) return;
    auto g = x->grad_span();
    for (size_t i = 0; i < grad.size(); ++i) {
      real_t y = value[i];
      g[i] += grad[i] * y * (1 - y);
    }
  }
};

struct TransposeNode : Node {
  void backward_step() override {
    auto& x = inputs[0];
    if (!x->requires_grad) return;
    MatMap dX(x->grad_span().data(), x->rows(), x->cols());
    ConstMatMap G(grad.data(), rows(), cols());
    dX.noalias() += G.transpose();
  }
};

struct ConcatRowsNode : Node {
  void backward_step() override {
    auto& a = inputs[0];
    auto& b = inputs[1];
    size_t na = a->value.size();
    if (a->requires_grad) add_into(a->grad_span(), grad.data(), na);
    if (b->requires_grad)
      add_into(b->grad_span(), grad.data() + na, b->value.size());
  }
};

struct SliceColsNode : Node {
  int start = 0;
  void backward_step() override {
    auto& x = inputs[0];
    if (!x->requires_grad) return;
    auto g = x->grad_span();
    int d = x->cols();
    int len = cols();
    int n = rows();
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < len; ++c)
        g[static_cast<size_t>(r) * d + start + c] +=
            grad[static_cast<size_t>(r) * len + c];
  }
};

struct ConcatColsNode : Node {
  void backward_step() override {
    int d = cols();
    int n = rows();
    int off = 0;
    for (auto& in : inputs) {
      int w = in->cols();
      if (in->requires_grad) {
        auto g = in->grad_span();
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < w; ++c)
            g[static_cast<size_t>(r) * w + c] +=
                grad[static_cast<size_t>(r) * d + off + c];
      }
      off += w;
    }
  }
};

// inputs: xs[0..k-1], then w (rank-1, length k)
struct WeightedSumNode : Node {
  void backward_step() override {
    size_t k = inputs.size() - 1;
    auto& w = inputs[k];
    for (size_t i = 0; i < k; ++i) {
      auto& x = inputs[i];
      if (x->requires_grad)
        add_into(x->grad_span(), grad.data(), grad.size(), w->value[i]);
    }
    if (w->requires_grad) {
      auto g = w->grad_span();
      for (size_t i = 0; i < k; ++i) {
        const auto& xv = inputs[i]->value;
        real_t acc = 0;
        for (size_t j = 0; j < grad.size(); ++j) acc += grad[j] * xv[j];
        g[i] += acc;
      }
    }
  }
};

struct MaskedSoftmaxNode : Node {
  Mask mask;
  void backward_step() override {
    auto& x = inputs[0];
    if (!x->requires_grad) return;
    auto g = x->grad_span();
    int n = rows();
    int k = cols();
    for (int r = 0; r < n; ++r) {
      const real_t* y = value.data() + static_cast<size_t>(r) * k;
      const real_t* dy = grad.data() + static_cast<size_t>(r) * k;
      real_t dot = 0;
      for (int c = 0; c < k; ++c) dot += dy[c] * y[c];
      real_t* dx = g.data() + static_cast<size_t>(r) * k;
      for (int c = 0; c < k; ++c) dx[c] += y[c] * (dy[c] - dot);
    }
  }
};

struct LayerNormNode : Node {
  std::vector<real_t> xhat;     // normalized pre-gain values
  std::vector<real_t> inv_std;  // per row
  void backward_step() override {
    auto& x = inputs[0];
    auto& gain = inputs[1];
    auto& bias = inputs[2];
    int n = rows();
    int d = cols();
    for (int r = 0; r < n; ++r) {
      const real_t* dy = grad.data() + static_cast<size_t>(r) * d;
      const real_t* xh = xhat.data() + static_cast<size_t>(r) * d;
      if (x->requires_grad) {
        real_t s1 = 0, s2 = 0;  // sums of g*dy and g*dy*xhat
        for (int c = 0; c < d; ++c) {
          real_t gd = gain->value[c] * dy[c];
          s1 += gd;
          s2 += gd * xh[c];
        }
        real_t* dx = x->grad_span().data() + static_cast<size_t>(r) * d;
        real_t inv = inv_std[r];
        for (int c = 0; c < d; ++c) {
          real_t gd = gain->value[c] * dy[c];
          dx[c] += inv * (gd - (s1 + xh[c] * s2) / d);
        }
      }
      if (gain->requires_grad) {
        auto g = gain->grad_span();
        for (int c = 0; c < d; ++c) g[c] += dy[c] * xh[c];
      }
      if (bias->requires_grad) {
        auto g = bias->grad_span();
        for (int c = 0; c < d; ++c) g[c] += dy[c];
      }
    }
  }
};

struct EmbeddingNode : Node {
  std::vector<int> ids;
  void backward_step() override {
    auto& table = inputs[0];
    if (!table->requires_grad) return;
    auto g = table->grad_span();
    int d = cols();
    for (size_t r = 0; r < ids.size(); ++r)
      add_into(g.subspan(static_cast<size_t>(ids[r]) * d, d),
               grad.data() + r * d, d);
  }
};

struct DropoutNode : Node {
  std::vector<uint8_t> keep;
  real_t scale = 1;
  void backward_step() override {
    auto& x = inputs[0];
    if (!x->requires_grad) return;
    auto g = x->grad_span();
    for (size_t i = 0; i < grad.size(); ++i)
      if (keep[i]) g[i] += grad[i] * scale;
  }
};

struct SumNode : Node {
  void backward_step() override {
    auto& x = inputs[0];
    if (!x->requires_grad) return;
    auto g = x->grad_span();
    for (size_t i = 0; i < g.size(); ++i) g[i] += grad[0];
  }
};

struct CrossEntropyNode : Node {
  std::vector<int> targets;
  std::vector<uint8_t> include;
  std::vector<real_t> probs;  // softmax rows, saved for backward
  real_t smoothing = 0;
  void backward_step() override {
    auto& logits = inputs[0];
    if (!logits->requires_grad) return;
    int m = static_cast<int>(targets.size());
    int v = logits->cols();
    real_t g0 = grad[0];
    auto g = logits->grad_span();
    real_t uniform = smoothing / v;
    for (int r = 0; r < m; ++r) {
      if (!include[r]) continue;
      const real_t* p = probs.data() + static_cast<size_t>(r) * v;
      real_t* dst = g.data() + static_cast<size_t>(r) * v;
      for (int c = 0; c < v; ++c) {
        real_t q = uniform + ((c == targets[r]) ? (1 - smoothing) : real_t(0));
        dst[c] += g0 * (p[c] - q);
      }
    }
  }
};

void check_same_shape(const std::shared_ptr<Node>& a,
                      const std::shared_ptr<Node>& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a->shape) + " vs " + shape_str(b->shape));
}

}  // namespace

// ---- op implementations ----

Tensor matmul(const Tensor& at, const Tensor& bt) {
  auto a = need(at, "matmul");
  auto b = need(bt, "matmul");
  if (a->shape.size() != 2 || b->shape.size() != 2)
    throw ShapeError("matmul: rank-2 operands required, got " +
                     shape_str(a->shape) + " and " + shape_str(b->shape));
  if (a->shape[1] != b->shape[0])
    throw ShapeError("matmul: inner dimensions disagree: " +
                     shape_str(a->shape) + " x " + shape_str(b->shape));
  auto node = std::make_shared<MatMulNode>();
  node->shape = {a->shape[0], b->shape[1]};
  node->value.resize(static_cast<size_t>(a->shape[0]) * b->shape[1]);
  MatMap C(node->value.data(), a->shape[0], b->shape[1]);
  C.noalias() = mat(a) * mat(b);
  if (g_grad_enabled && (a->requires_grad || b->requires_grad)) {
    node->inputs = {a, b};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor add(const Tensor& at, const Tensor& bt) {
  auto a = need(at, "add");
  auto b = need(bt, "add");
  check_same_shape(a, b, "add");
  auto node = std::make_shared<AddNode>();
  node->shape = a->shape;
  node->value.resize(a->value.size());
  for (size_t i = 0; i < a->value.size(); ++i)
    node->value[i] = a->value[i] + b->value[i];
  if (g_grad_enabled && (a->requires_grad || b->requires_grad)) {
    node->inputs = {a, b};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor mul(const Tensor& at, const Tensor& bt) {
  auto a = need(at, "mul");
  auto b = need(bt, "mul");
  check_same_shape(a, b, "mul");
  auto node = std::make_shared<MulNode>();
  node->shape = a->shape;
  node->value.resize(a->value.size());
  for (size_t i = 0; i < a->value.size(); ++i)
    node->value[i] = a->value[i] * b->value[i];
  if (g_grad_enabled && (a->requires_grad || b->requires_grad)) {
    node->inputs = {a, b};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor scalar_mul(const Tensor& xt, real_t c) {
  auto x = need(xt, "scalar_mul");
  auto node = std::make_shared<ScalarMulNode>();
  node->c = c;
  node->shape = x->shape;
  node->value.resize(x->value.size());
  for (size_t i = 0; i < x->value.size(); ++i) node->value[i] = c * x->value[i];
  if (g_grad_enabled && x->requires_grad) {
    node->inputs = {x};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor add_row_bias(const Tensor& xt, const Tensor& bt) {
  auto x = need(xt, "add_row_bias");
  auto b = need(bt, "add_row_bias");
  if (b->shape.size() != 1 || b->shape[0] != x->cols())
    throw ShapeError("add_row_bias: bias " + shape_str(b->shape) +
                     " does not match " + shape_str(x->shape));
  auto node = std::make_shared<AddRowBiasNode>();
  node->shape = x->shape;
  node->value.resize(x->value.size());
  int n = x->rows();
  int d = x->cols();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) {
      size_t i = static_cast<size_t>(r) * d + c;
      node->value[i] = x->value[i] + b->value[c];
    }
  if (g_grad_enabled && (x->requires_grad || b->requires_grad)) {
    node->inputs = {x, b};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor relu(const Tensor& xt) {
  auto x = need(xt, "relu");
  auto node = std::make_shared<ReluNode>();
  node->shape = x->shape;
  node->value.resize(x->value.size());
  for (size_t i = 0; i < x->value.size(); ++i)
    node->value[i] = x->value[i] > 0 ? x->value[i] : real_t(0);
  if (g_grad_enabled && x->requires_grad) {
    node->inputs = {x};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor sigmoid(const Tensor& xt) {
  auto x = need(xt, "sigmoid");
  auto node = std::make_shared<SigmoidNode>();
  node->shape = x->shape;
  node->value.resize(x->value.size());
  for (size_t i = 0; i < x->value.size(); ++i)
    node->value[i] = stable_sigmoid(x->value[i]);
  if (g_grad_enabled && x->requires_grad) {
    node->inputs = {x};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor transpose2d(const Tensor& xt) {
  auto x = need(xt, "transpose2d");
  if (x->shape.size() != 2)
    throw ShapeError("transpose2d: rank-2 required, got " +
                     shape_str(x->shape));
  auto node = std::make_shared<TransposeNode>();
  node->shape = {x->shape[1], x->shape[0]};
  node->value.resize(x->value.size());
  MatMap Y(node->value.data(), x->shape[1], x->shape[0]);
  Y.noalias() = mat(x).transpose();
  if (g_grad_enabled && x->requires_grad) {
    node->inputs = {x};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor concat_rows(const Tensor& at, const Tensor& bt) {
  auto a = need(at, "concat_rows");
  auto b = need(bt, "concat_rows");
  if (a->shape.size() != 2 || b->shape.size() != 2 ||
      a->shape[1] != b->shape[1])
    throw ShapeError("concat_rows: incompatible shapes " +
                     shape_str(a->shape) + " and " + shape_str(b->shape));
  auto node = std::make_shared<ConcatRowsNode>();
  node->shape = {a->shape[0] + b->shape[0], a->shape[1]};
  node->value.reserve(a->value.size() + b->value.size());
  node->value.insert(node->value.end(), a->value.begin(), a->value.end());
  node->value.insert(node->value.end(), b->value.begin(), b->value.end());
  if (g_grad_enabled && (a->requires_grad || b->requires_grad)) {
    node->inputs = {a, b};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor slice_cols(const Tensor& xt, int start, int len) {
  auto x = need(xt, "slice_cols");
  if (x->shape.size() != 2)
    throw ShapeError("slice_cols: rank-2 required, got " +
                     shape_str(x->shape));
  if (start < 0 || len <= 0 || start + len > x->shape[1])
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " +
                     shape_str(x->shape));
  auto node = std::make_shared<SliceColsNode>();
  node->start = start;
  node->shape = {x->shape[0], len};
  node->value.resize(static_cast<size_t>(x->shape[0]) * len);
  int d = x->shape[1];
  for (int r = 0; r < x->shape[0]; ++r)
    std::copy_n(x->value.data() + static_cast<size_t>(r) * d + start, len,
                node->value.data() + static_cast<size_t>(r) * len);
  if (g_grad_enabled && x->requires_grad) {
    node->inputs = {x};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: no inputs");
  std::vector<std::shared_ptr<Node>> ins;
  int n = need(xs[0], "concat_cols")->shape[0];
  int total = 0;
  for (const auto& t : xs) {
    auto x = need(t, "concat_cols");
    if (x->shape.size() != 2 || x->shape[0] != n)
      throw ShapeError("concat_cols: incompatible member " +
                       shape_str(x->shape));
    total += x->shape[1];
    ins.push_back(x);
  }
  auto node = std::make_shared<ConcatColsNode>();
  node->shape = {n, total};
  node->value.resize(static_cast<size_t>(n) * total);
  int off = 0;
  for (auto& x : ins) {
    int w = x->shape[1];
    for (int r = 0; r < n; ++r)
      std::copy_n(x->value.data() + static_cast<size_t>(r) * w, w,
                  node->value.data() + static_cast<size_t>(r) * total + off);
    off += w;
  }
  bool any = false;
  for (auto& x : ins) any = any || x->requires_grad;
  if (g_grad_enabled && any) {
    node->inputs = std::move(ins);
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& wt) {
  if (xs.empty()) throw ShapeError("weighted_sum: no states");
  auto w = need(wt, "weighted_sum");
  if (w->shape.size() != 1 ||
      w->shape[0] != static_cast<int>(xs.size()))
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) +
                     " states but weights " + shape_str(w->shape));
  std::vector<std::shared_ptr<Node>> ins;
  for (const auto& t : xs) {
    auto x = need(t, "weighted_sum");
    if (x->shape != xs[0].node()->shape)
      throw ShapeError("weighted_sum: state shape mismatch " +
                       shape_str(x->shape) + " vs " +
                       shape_str(xs[0].node()->shape));
    ins.push_back(x);
  }
  auto node = std::make_shared<WeightedSumNode>();
  node->shape = ins[0]->shape;
  node->value.assign(ins[0]->value.size(), 0);
  for (size_t i = 0; i < ins.size(); ++i) {
    real_t wi = w->value[i];
    const auto& xv = ins[i]->value;
    for (size_t j = 0; j < xv.size(); ++j) node->value[j] += wi * xv[j];
  }
  ins.push_back(w);
  bool any = false;
  for (auto& x : ins) any = any || x->requires_grad;
  if (g_grad_enabled && any) {
    node->inputs = std::move(ins);
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor masked_softmax(const Tensor& xt, const Mask& mask) {
  auto x = need(xt, "masked_softmax");
  if (mask.shape != x->shape)
    throw ShapeError("masked_softmax: mask " + shape_str(mask.shape) +
                     " does not match input " + shape_str(x->shape));
  auto node = std::make_shared<MaskedSoftmaxNode>();
  node->mask = mask;
  node->shape = x->shape;
  node->value.assign(x->value.size(), 0);
  int n = x->rows();
  int k = x->cols();
  for (int r = 0; r < n; ++r) {
    const real_t* row = x->value.data() + static_cast<size_t>(r) * k;
    const uint8_t* m = mask.on.data() + static_cast<size_t>(r) * k;
    real_t mx = 0;
    bool seen = false;
    for (int c = 0; c < k; ++c)
      if (m[c] && (!seen || row[c] > mx)) {
        mx = row[c];
        seen = true;
      }
    if (!seen)
      throw DataError("masked_softmax: fully masked row " + std::to_string(r));
    real_t denom = 0;
    real_t* out = node->value.data() + static_cast<size_t>(r) * k;
    for (int c = 0; c < k; ++c)
      if (m[c]) {
        out[c] = std::exp(row[c] - mx);
        denom += out[c];
      }
    for (int c = 0; c < k; ++c)
      if (m[c]) out[c] /= denom;
  }
  if (g_grad_enabled && x->requires_grad) {
    node->inputs = {x};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor layer_norm(const Tensor& xt, const Tensor& gaint, const Tensor& biast,
                  real_t eps) {
  auto x = need(xt, "layer_norm");
  auto gain = need(gaint, "layer_norm");
  auto bias = need(biast, "layer_norm");
  if (eps <= 0) throw UsageError("layer_norm: eps must be positive");
  int d = x->cols();
  if (gain->shape.size() != 1 || gain->shape[0] != d ||
      bias->shape.size() != 1 || bias->shape[0] != d)
    throw ShapeError("layer_norm: gain " + shape_str(gain->shape) + ", bias " +
                     shape_str(bias->shape) + " for input " +
                     shape_str(x->shape));
  auto node = std::make_shared<LayerNormNode>();
  node->shape = x->shape;
  node->value.resize(x->value.size());
  node->xhat.resize(x->value.size());
  int n = x->rows();
  node->inv_std.resize(n);
  for (int r = 0; r < n; ++r) {
    const real_t* row = x->value.data() + static_cast<size_t>(r) * d;
    real_t mean = 0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    real_t var = 0;  // biased: divide by d
    for (int c = 0; c < d; ++c) {
      real_t dv = row[c] - mean;
      var += dv * dv;
    }
    var /= d;
    real_t inv = 1 / std::sqrt(var + eps);
    node->inv_std[r] = inv;
    real_t* xh = node->xhat.data() + static_cast<size_t>(r) * d;
    real_t* out = node->value.data() + static_cast<size_t>(r) * d;
    for (int c = 0; c < d; ++c) {
      xh[c] = (row[c] - mean) * inv;
      out[c] = xh[c] * gain->value[c] + bias->value[c];
    }
  }
  if (g_grad_enabled &&
      (x->requires_grad || gain->requires_grad || bias->requires_grad)) {
    node->inputs = {x, gain, bias};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor embedding_rows(const Tensor& tablet, const std::vector<int>& ids) {
  auto table = need(tablet, "embedding_rows");
  if (table->shape.size() != 2)
    throw ShapeError("embedding_rows: table must be rank-2, got " +
                     shape_str(table->shape));
  int v = table->shape[0];
  int d = table->shape[1];
  for (int id : ids)
    if (id < 0 || id >= v)
      throw DataError("embedding_rows: token id " + std::to_string(id) +
                      " outside vocab of " + std::to_string(v));
  auto node = std::make_shared<EmbeddingNode>();
  node->ids = ids;
  node->shape = {static_cast<int>(ids.size()), d};
  node->value.resize(ids.size() * static_cast<size_t>(d));
  for (size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table->value.data() + static_cast<size_t>(ids[r]) * d, d,
                node->value.data() + r * d);
  if (g_grad_enabled && table->requires_grad) {
    node->inputs = {table};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor dropout(const Tensor& xt, real_t p, RngStream& rng, bool training) {
  auto x = need(xt, "dropout");
  if (p < 0 || p >= 1)
    throw UsageError("dropout: rate must be in [0, 1), got " +
                     std::to_string(p));
  if (!training || p == 0) return xt;
  auto node = std::make_shared<DropoutNode>();
  node->shape = x->shape;
  node->scale = 1 / (1 - p);
  node->keep.resize(x->value.size());
  node->value.resize(x->value.size());
  for (size_t i = 0; i < x->value.size(); ++i) {
    node->keep[i] = rng.next_bernoulli(p) ? 0 : 1;
    node->value[i] = node->keep[i] ? x->value[i] * node->scale : real_t(0);
  }
  if (g_grad_enabled && x->requires_grad) {
    node->inputs = {x};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor sum(const Tensor& xt) {
  auto x = need(xt, "sum");
  auto node = std::make_shared<SumNode>();
  node->shape = {1};
  real_t acc = 0;
  for (real_t v : x->value) acc += v;
  node->value = {acc};
  if (g_grad_enabled && x->requires_grad) {
    node->inputs = {x};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor cross_entropy_sum(const Tensor& logitst, const std::vector<int>& targets,
                         const std::vector<uint8_t>& include, int64_t* count,
                         real_t label_smoothing) {
  auto logits = need(logitst, "cross_entropy");
  if (logits->shape.size() != 2)
    throw ShapeError("cross_entropy: logits must be rank-2, got " +
                     shape_str(logits->shape));
  int m = logits->shape[0];
  int v = logits->shape[1];
  if (static_cast<int>(targets.size()) != m ||
      static_cast<int>(include.size()) != m)
    throw ShapeError("cross_entropy: " + std::to_string(m) + " rows vs " +
                     std::to_string(targets.size()) + " targets, " +
                     std::to_string(include.size()) + " mask entries");
  auto node = std::make_shared<CrossEntropyNode>();
  node->targets = targets;
  node->include = include;
  node->smoothing = label_smoothing;
  node->probs.resize(logits->value.size());
  node->shape = {1};
  real_t total = 0;
  int64_t used = 0;
  for (int r = 0; r < m; ++r) {
    if (!include[r]) continue;
    if (targets[r] < 0 || targets[r] >= v)
      throw DataError("cross_entropy: target id " + std::to_string(targets[r]) +
                      " outside vocab of " + std::to_string(v));
    const real_t* row = logits->value.data() + static_cast<size_t>(r) * v;
    real_t mx = row[0];
    for (int c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    real_t denom = 0;
    for (int c = 0; c < v; ++c) denom += std::exp(row[c] - mx);
    real_t lse = mx + std::log(denom);
    real_t* p = node->probs.data() + static_cast<size_t>(r) * v;
    real_t smooth_term = 0;
    for (int c = 0; c < v; ++c) {
      p[c] = std::exp(row[c] - lse);
      if (label_smoothing > 0) smooth_term += lse - row[c];
    }
    real_t nll = lse - row[targets[r]];
    total += (1 - label_smoothing) * nll +
             (label_smoothing / v) * smooth_term;
    ++used;
  }
  node->value = {total};
  if (count) *count = used;
  if (g_grad_enabled && logits->requires_grad) {
    node->inputs = {logits};
    node->requires_grad = true;
  }
  return Tensor(node);
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& include,
                          real_t label_smoothing) {
  int64_t count = 0;
  Tensor s = cross_entropy_sum(logits, targets, include, &count,
                               label_smoothing);
  if (count == 0)
    throw DataError("cross_entropy_mean: every position is excluded");
  return scalar_mul(s, real_t(1) / static_cast<real_t>(count));
}

// ---- backward ----

void backward(const Tensor& loss) {
  auto root = need(loss, "backward");
  if (root->numel() != 1)
    throw UsageError("backward: loss must be scalar, got " +
                     shape_str(root->shape));
  if (!root->requires_grad) return;

  // iterative DFS post-order over the requires_grad subgraph
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    bool descended = false;
    while (idx < node->inputs.size()) {
      Node* in = node->inputs[idx++].get();
      if (in->requires_grad && !visited.count(in)) {
        visited.insert(in);
        stack.push_back({in, 0});
        descended = true;
        break;
      }
    }
    if (descended) continue;
    order.push_back(node);
    stack.pop_back();
  }

  // scratch grads for interior nodes; persistent grads for sources
  for (Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0);
    else n->ensure_grad();
  root->grad[0] += 1;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf()) n->backward_step();
  }

  // interior scratch buffers are not part of the tensor contract
  for (Node* n : order)
    if (!n->is_leaf()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
}

// ---- gradient checking ----

double check_gradients(const std::function<Tensor()>& f,
                       const std::vector<Tensor>& params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw UsageError("check_gradients: eps must lie in [1e-7, 1e-3]");

  std::vector<Tensor> ps = params;
  for (auto& p : ps) p.zero_grad();
  Tensor loss = f();
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("check_gradients: non-finite loss");
  backward(loss);

  std::vector<std::vector<real_t>> analytic;
  analytic.reserve(ps.size());
  for (auto& p : ps)
    analytic.emplace_back(p.grad().begin(), p.grad().end());

  double worst = 0;
  for (size_t pi = 0; pi < ps.size(); ++pi) {
    auto data = ps[pi].raw_data();
    for (size_t i = 0; i < data.size(); ++i) {
      real_t keep = data[i];
      double fp, fm;
      {
        NoGradGuard ng;
        data[i] = keep + static_cast<real_t>(eps);
        fp = static_cast<double>(f().item());
        data[i] = keep - static_cast<real_t>(eps);
        fm = static_cast<double>(f().item());
        data[i] = keep;
      }
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("check_gradients: non-finite probe value");
      double central = (fp - fm) / (2 * eps);
      double a = static_cast<double>(analytic[pi][i]);
      double denom = std::max({std::abs(a), std::abs(central), 1e-12});
      worst = std::max(worst, std::abs(a - central) / denom);
    }
  }
  return worst;
}

}  // namespace jamt
