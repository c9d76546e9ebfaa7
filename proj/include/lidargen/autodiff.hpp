#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace lidargen::ad {

// Dense double-precision tensor with row-major layout.  Shapes are small
// integer vectors; rank-4 tensors use (batch, channel, height, width) order.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape_in);

  static Tensor zeros(const std::vector<int>& shape);
  static Tensor full(const std::vector<int>& shape, double value);
  static Tensor scalar(double value);

  std::size_t numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const;

  // Value of a single-element tensor.
  double item() const;
};

bool same_shape(const Tensor& a, const Tensor& b);

// Gaussian-filled tensor; consumes values from `rng` in row-major order.
Tensor randn(const std::vector<int>& shape, std::mt19937_64& rng,
             double mean = 0.0, double stddev = 1.0);

// One vertex of the computation graph.  Nodes are created through the op
// factories below and form a DAG through `parents`; `backprop` reads this
// node's gradient and accumulates into the parents' gradients.
class Node {
 public:
  Tensor value;
  Tensor grad;  // same shape as value once touched; empty until then
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;

  Tensor& ensure_grad();
};

using Var = std::shared_ptr<Node>;

// Leaf with no gradient.
Var constant(Tensor value);
// Leaf that participates in gradient accumulation.
Var make_param(Tensor value);
// Copy of x's value severed from the graph, so gradients stop here.
Var detach(const Var& x);

// --- elementwise ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double negative_slope);
Var tanh(const Var& x);
Var exp(const Var& x);
// log(1 + e^x), computed in the overflow-safe form max(x, 0) + log1p(e^-|x|).
Var softplus(const Var& x);

// --- reductions and shape ---
Var sum(const Var& x);
Var mean(const Var& x);
Var reshape(const Var& x, std::vector<int> shape);
// x - s with s a single-element tensor broadcast over all of x.
Var sub_broadcast(const Var& x, const Var& s);

// --- linear algebra ---
// (n, k) x (k, m) -> (n, m)
Var matmul(const Var& a, const Var& b);
// x (n, k), weight (m, k), bias (m) -> (n, m); bias may be null.
Var linear(const Var& x, const Var& weight, const Var& bias);

struct Conv2dSpec {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
};

// x (n, c, h, w), weight (f, c, kh, kw), bias (f) or null.
// Requires (h + 2*pad - kh) to divide evenly by the stride (same for width).
Var conv2d(const Var& x, const Var& weight, const Var& bias,
           const Conv2dSpec& spec);

// x (n, c, h, w), weight (c, f, kh, kw), bias (f) or null.
// Output spatial size is (h - 1) * stride - 2 * pad + kernel.  With zero bias
// this is the exact adjoint of conv2d under the same weight and geometry.
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias,
                     const Conv2dSpec& spec);

// Per-channel batch normalization over (n, c, h, w) or (n, c) input.
// In training mode normalizes by batch statistics (population variance) and
// folds the batch mean/unbiased variance into the running buffers with the
// given momentum; in eval mode normalizes by the running buffers.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
               Tensor& running_mean, Tensor& running_var, bool training,
               double momentum = 0.1, double eps = 1e-5);

// Reverse-mode sweep from a single-element root.  Seeds the root gradient
// with one and runs each reachable node's backprop exactly once in reverse
// topological order.
void backward(const Var& root);

// Named parameter registry.  std::map keeps iteration order deterministic,
// which the optimizer and checkpoint code rely on.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);
  const Var& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void zero_grad();

  std::map<std::string, Var>& params() { return params_; }
  const std::map<std::string, Var>& params() const { return params_; }

 private:
  std::map<std::string, Var> params_;
};

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction; moment buffers are keyed by parameter name and
// exposed for checkpointing.
class Adam {
 public:
  explicit Adam(const AdamConfig& config) : config_(config) {}

  void step(ParamStore& store);

  const AdamConfig& config() const { return config_; }
  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t t) { step_count_ = t; }
  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }

 private:
  AdamConfig config_;
  std::int64_t step_count_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

}  // namespace lidargen::ad
