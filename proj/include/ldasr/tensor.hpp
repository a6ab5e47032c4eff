// Dense float32 tensors with reverse-mode autodiff.
//
// Tensors are value handles onto shared nodes. An operation writes its output
// once and never mutates it afterwards; gradients accumulate additively into
// leaf tensors until zero_grad(). Everything is single-threaded and
// deterministic: the graph is walked in reverse creation order, so identical
// seeds and inputs give bit-identical forwards and gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace ldasr {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct DimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tensor;

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;  // leaf parameter flag
  std::vector<float> grad;     // materialized lazily, same length as data
  // Graph bookkeeping. `inputs` keeps parents alive; `backprop` pushes this
  // node's grad into them. Leaves have no backprop.
  std::vector<Tensor> inputs;
  std::function<void(TensorNode&)> backprop;
  bool has_graph = false;

  bool needs_grad() const { return requires_grad || has_graph; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording in its scope (evaluation / decoding paths).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<TensorNode>();
    t.n_->shape = std::move(shape);
    t.n_->data.assign(shape_numel(t.n_->shape), 0.0f);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false) {
    if ((int64_t)data.size() != shape_numel(shape))
      throw DimError("tensor data length does not match shape " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<TensorNode>();
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(float v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t dim(size_t i) const { return n_->shape[i]; }
  size_t rank() const { return n_->shape.size(); }
  int64_t numel() const { return (int64_t)n_->data.size(); }

  std::vector<float>& data() { return n_->data; }
  const std::vector<float>& data() const { return n_->data; }
  float* ptr() { return n_->data.data(); }
  const float* ptr() const { return n_->data.data(); }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }
  bool has_grad() const { return n_->grad.size() == n_->data.size(); }
  std::vector<float>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() { n_->grad.clear(); }

  float item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->data[0];
  }

  TensorNode* node() const { return n_.get(); }
  std::shared_ptr<TensorNode> handle() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

// Builds an op output node. `backprop` is attached only when some input can
// use a gradient and grad mode is on; otherwise the graph is pruned here.
inline Tensor make_op(Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backprop) {
  Tensor out = Tensor::from(std::move(shape), std::move(data), false);
  bool need = false;
  if (detail::grad_mode()) {
    for (const Tensor& t : inputs)
      if (t.defined() && t.node()->needs_grad()) need = true;
  }
  if (need) {
    out.node()->inputs = std::move(inputs);
    out.node()->backprop = std::move(backprop);
    out.node()->has_graph = true;
  }
  return out;
}

// Accumulate `n` values from `src` into t's grad, if t wants them.
inline void accumulate_grad(Tensor& t, const float* src) {
  if (!t.defined() || !t.node()->needs_grad()) return;
  t.node()->ensure_grad();
  float* g = t.node()->grad.data();
  const size_t n = t.node()->data.size();
  for (size_t i = 0; i < n; ++i) g[i] += src[i];
}

// Reverse-mode sweep from a scalar loss. Topological order is derived from a
// deterministic DFS over the recorded inputs; each node's backprop runs once.
inline void backward(Tensor loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() requires a scalar loss tensor");
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0f;

  std::vector<TensorNode*> order;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  std::unordered_set<const TensorNode*> visited;

  stack.push_back({loss.node(), 0});
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      TensorNode* child = node->inputs[idx].node();
      ++idx;
      if (child && child->has_graph && !visited.count(child)) {
        visited.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // order is postorder: children before parents. Run parents first.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Deterministic RNG. One stream per purpose, derived from a master seed and a
// short label so that adding a consumer never shifts another stream.

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 1469598103934665603ull) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t derive_seed(uint64_t master, const std::string& label) {
  uint64_t h = fnv1a64(label.data(), label.size());
  return fnv1a64(&master, sizeof(master), h);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : g_(seed) {}
  float normal(float stddev = 1.0f) { return norm_(g_) * stddev; }
  float uniform() { return uni_(g_); }  // [0, 1)
  // inclusive bounds
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(g_);
  }
  uint64_t raw() { return g_(); }

 private:
  std::mt19937_64 g_;
  std::normal_distribution<float> norm_{0.0f, 1.0f};
  std::uniform_real_distribution<float> uni_{0.0f, 1.0f};
};

inline void fill_normal(Tensor t, Rng& rng, float stddev) {
  for (float& v : t.data()) v = rng.normal(stddev);
}

inline void fill_uniform(Tensor t, Rng& rng, float lo, float hi) {
  for (float& v : t.data()) v = lo + (hi - lo) * rng.uniform();
}

}  // namespace ldasr
