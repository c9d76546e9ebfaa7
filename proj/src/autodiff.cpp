#include "lidargen/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

#include "lidargen/errors.hpp"

namespace lidargen::ad {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void check(bool condition, const char* message) {
  if (!condition) throw precondition_error(message);
}

Var make_node(Tensor value, std::vector<Var> parents) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->parents = std::move(parents);
  for (const auto& p : node->parents) {
    if (p && p->requires_grad) node->requires_grad = true;
  }
  return node;
}

// Elementwise unary op with value map `f` and gradient factor `df` evaluated
// from (input value, output value).
template <typename F, typename Df>
Var unary_op(const Var& x, const char* name, F f, Df df) {
  check(static_cast<bool>(x), name);
  Tensor out(x->value.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = f(x->value.data[i]);
  }
  Var node = make_node(std::move(out), {x});
  Node* self = node.get();
  node->backprop = [self, x, df]() {
    if (!x->requires_grad) return;
    Tensor& gx = x->ensure_grad();
    for (std::size_t i = 0; i < gx.data.size(); ++i) {
      gx.data[i] +=
          self->grad.data[i] * df(x->value.data[i], self->value.data[i]);
    }
  };
  return node;
}

double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor::Tensor(std::vector<int> shape_in) : shape(std::move(shape_in)) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw precondition_error("tensor dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  data.assign(n, 0.0);
}

Tensor Tensor::zeros(const std::vector<int>& shape) { return Tensor(shape); }

Tensor Tensor::full(const std::vector<int>& shape, double value) {
  Tensor t(shape);
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t({1});
  t.data[0] = value;
  return t;
}

std::size_t Tensor::numel() const { return data.size(); }

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) throw precondition_error("tensor dim out of range");
  return shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw precondition_error("item() requires a single-element tensor");
  }
  return data[0];
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

Tensor randn(const std::vector<int>& shape, std::mt19937_64& rng, double mean,
             double stddev) {
  Tensor t(shape);
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : t.data) v = dist(rng);
  return t;
}

Tensor& Node::ensure_grad() {
  if (grad.data.size() != value.data.size()) {
    grad = Tensor::zeros(value.shape);
  }
  return grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var make_param(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return node;
}

Var detach(const Var& x) {
  check(static_cast<bool>(x), "detach: null operand");
  return constant(x->value);
}

Var add(const Var& a, const Var& b) {
  check(a && b, "add: null operand");
  check(same_shape(a->value, b->value), "add: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] += b->value.data[i];
  }
  Var node = make_node(std::move(out), {a, b});
  Node* self = node.get();
  node->backprop = [self, a, b]() {
    for (const Var& p : {a, b}) {
      if (!p->requires_grad) continue;
      Tensor& gp = p->ensure_grad();
      for (std::size_t i = 0; i < gp.data.size(); ++i) {
        gp.data[i] += self->grad.data[i];
      }
    }
  };
  return node;
}

Var sub(const Var& a, const Var& b) {
  check(a && b, "sub: null operand");
  check(same_shape(a->value, b->value), "sub: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] -= b->value.data[i];
  }
  Var node = make_node(std::move(out), {a, b});
  Node* self = node.get();
  node->backprop = [self, a, b]() {
    if (a->requires_grad) {
      Tensor& ga = a->ensure_grad();
      for (std::size_t i = 0; i < ga.data.size(); ++i) {
        ga.data[i] += self->grad.data[i];
      }
    }
    if (b->requires_grad) {
      Tensor& gb = b->ensure_grad();
      for (std::size_t i = 0; i < gb.data.size(); ++i) {
        gb.data[i] -= self->grad.data[i];
      }
    }
  };
  return node;
}

Var mul(const Var& a, const Var& b) {
  check(a && b, "mul: null operand");
  check(same_shape(a->value, b->value), "mul: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] *= b->value.data[i];
  }
  Var node = make_node(std::move(out), {a, b});
  Node* self = node.get();
  node->backprop = [self, a, b]() {
    if (a->requires_grad) {
      Tensor& ga = a->ensure_grad();
      for (std::size_t i = 0; i < ga.data.size(); ++i) {
        ga.data[i] += self->grad.data[i] * b->value.data[i];
      }
    }
    if (b->requires_grad) {
      Tensor& gb = b->ensure_grad();
      for (std::size_t i = 0; i < gb.data.size(); ++i) {
        gb.data[i] += self->grad.data[i] * a->value.data[i];
      }
    }
  };
  return node;
}

Var scale(const Var& x, double c) {
  return unary_op(
      x, "scale: null operand", [c](double v) { return v * c; },
      [c](double, double) { return c; });
}

Var add_scalar(const Var& x, double c) {
  return unary_op(
      x, "add_scalar: null operand", [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

Var relu(const Var& x) {
  return unary_op(
      x, "relu: null operand", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double negative_slope) {
  return unary_op(
      x, "leaky_relu: null operand",
      [negative_slope](double v) { return v > 0.0 ? v : negative_slope * v; },
      [negative_slope](double v, double) {
        return v > 0.0 ? 1.0 : negative_slope;
      });
}

Var tanh(const Var& x) {
  return unary_op(
      x, "tanh: null operand", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& x) {
  return unary_op(
      x, "exp: null operand", [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Var softplus(const Var& x) {
  return unary_op(
      x, "softplus: null operand",
      [](double v) {
        return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
      },
      [](double v, double) { return sigmoid_stable(v); });
}

Var sum(const Var& x) {
  check(static_cast<bool>(x), "sum: null operand");
  double total = 0.0;
  for (double v : x->value.data) total += v;
  Var node = make_node(Tensor::scalar(total), {x});
  Node* self = node.get();
  node->backprop = [self, x]() {
    if (!x->requires_grad) return;
    Tensor& gx = x->ensure_grad();
    const double g = self->grad.data[0];
    for (double& v : gx.data) v += g;
  };
  return node;
}

Var mean(const Var& x) {
  check(static_cast<bool>(x), "mean: null operand");
  check(x->value.numel() > 0, "mean: empty operand");
  return scale(sum(x), 1.0 / static_cast<double>(x->value.numel()));
}

Var reshape(const Var& x, std::vector<int> shape) {
  check(static_cast<bool>(x), "reshape: null operand");
  Tensor out(shape);
  check(out.numel() == x->value.numel(), "reshape: element count mismatch");
  out.data = x->value.data;
  Var node = make_node(std::move(out), {x});
  Node* self = node.get();
  node->backprop = [self, x]() {
    if (!x->requires_grad) return;
    Tensor& gx = x->ensure_grad();
    for (std::size_t i = 0; i < gx.data.size(); ++i) {
      gx.data[i] += self->grad.data[i];
    }
  };
  return node;
}

Var sub_broadcast(const Var& x, const Var& s) {
  check(x && s, "sub_broadcast: null operand");
  check(s->value.numel() == 1, "sub_broadcast: subtrahend must be scalar");
  const double sv = s->value.data[0];
  Tensor out = x->value;
  for (double& v : out.data) v -= sv;
  Var node = make_node(std::move(out), {x, s});
  Node* self = node.get();
  node->backprop = [self, x, s]() {
    if (x->requires_grad) {
      Tensor& gx = x->ensure_grad();
      for (std::size_t i = 0; i < gx.data.size(); ++i) {
        gx.data[i] += self->grad.data[i];
      }
    }
    if (s->requires_grad) {
      double total = 0.0;
      for (double g : self->grad.data) total += g;
      s->ensure_grad().data[0] -= total;
    }
  };
  return node;
}

Var matmul(const Var& a, const Var& b) {
  check(a && b, "matmul: null operand");
  check(a->value.rank() == 2 && b->value.rank() == 2,
        "matmul: operands must be rank-2");
  const int n = a->value.dim(0);
  const int k = a->value.dim(1);
  const int m = b->value.dim(1);
  check(b->value.dim(0) == k, "matmul: inner dimensions differ");

  Tensor out({n, m});
  ConstMatMap am(a->value.data.data(), n, k);
  ConstMatMap bm(b->value.data.data(), k, m);
  MatMap(out.data.data(), n, m).noalias() = am * bm;

  Var node = make_node(std::move(out), {a, b});
  Node* self = node.get();
  node->backprop = [self, a, b, n, k, m]() {
    ConstMatMap g(self->grad.data.data(), n, m);
    if (a->requires_grad) {
      ConstMatMap bm(b->value.data.data(), k, m);
      MatMap(a->ensure_grad().data.data(), n, k).noalias() += g * bm.transpose();
    }
    if (b->requires_grad) {
      ConstMatMap am(a->value.data.data(), n, k);
      MatMap(b->ensure_grad().data.data(), k, m).noalias() += am.transpose() * g;
    }
  };
  return node;
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  check(x && weight, "linear: null operand");
  check(x->value.rank() == 2, "linear: input must be rank-2");
  check(weight->value.rank() == 2, "linear: weight must be rank-2");
  const int n = x->value.dim(0);
  const int k = x->value.dim(1);
  const int m = weight->value.dim(0);
  check(weight->value.dim(1) == k, "linear: weight columns must match input");
  if (bias) {
    check(bias->value.rank() == 1 && bias->value.dim(0) == m,
          "linear: bias shape mismatch");
  }

  Tensor out({n, m});
  ConstMatMap xm(x->value.data.data(), n, k);
  ConstMatMap wm(weight->value.data.data(), m, k);
  MatMap om(out.data.data(), n, m);
  om.noalias() = xm * wm.transpose();
  if (bias) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) {
        out.data[static_cast<std::size_t>(i) * m + j] += bias->value.data[j];
      }
    }
  }

  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  Var node = make_node(std::move(out), std::move(parents));
  Node* self = node.get();
  node->backprop = [self, x, weight, bias, n, k, m]() {
    ConstMatMap g(self->grad.data.data(), n, m);
    if (x->requires_grad) {
      ConstMatMap wm(weight->value.data.data(), m, k);
      MatMap(x->ensure_grad().data.data(), n, k).noalias() += g * wm;
    }
    if (weight->requires_grad) {
      ConstMatMap xm(x->value.data.data(), n, k);
      MatMap(weight->ensure_grad().data.data(), m, k).noalias() +=
          g.transpose() * xm;
    }
    if (bias && bias->requires_grad) {
      Tensor& gb = bias->ensure_grad();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
          gb.data[static_cast<std::size_t>(j)] +=
              self->grad.data[static_cast<std::size_t>(i) * m + j];
        }
      }
    }
  };
  return node;
}

namespace {

// Shared geometry for a convolution that maps (in_h, in_w) down to
// (out_h, out_w).  conv2d uses it directly; conv_transpose2d uses the same
// geometry with its own output in the `in` role.
struct ConvGeometry {
  int channels = 0;  // channels of the `in`-side array
  int in_h = 0, in_w = 0;
  int kh = 0, kw = 0;
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int out_h = 0, out_w = 0;

  std::size_t patch_rows() const {
    return static_cast<std::size_t>(channels) * kh * kw;
  }
  std::size_t out_cells() const {
    return static_cast<std::size_t>(out_h) * out_w;
  }
};

// Unfold one (channels, in_h, in_w) sample into a (channels*kh*kw,
// out_h*out_w) patch matrix, zero-padding out-of-bounds taps.
void im2col(const double* src, const ConvGeometry& g, double* cols) {
  const std::size_t out_cells = g.out_cells();
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    const double* plane =
        src + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj, ++row) {
        double* dst = cols + row * out_cells;
        for (int oi = 0; oi < g.out_h; ++oi) {
          const int si = oi * g.stride_h - g.pad_h + ki;
          if (si < 0 || si >= g.in_h) {
            std::fill(dst, dst + g.out_w, 0.0);
            dst += g.out_w;
            continue;
          }
          const double* src_row = plane + static_cast<std::size_t>(si) * g.in_w;
          for (int oj = 0; oj < g.out_w; ++oj) {
            const int sj = oj * g.stride_w - g.pad_w + kj;
            *dst++ = (sj < 0 || sj >= g.in_w) ? 0.0 : src_row[sj];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add a patch matrix back into the sample array.
void col2im(const double* cols, const ConvGeometry& g, double* dst) {
  const std::size_t out_cells = g.out_cells();
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    double* plane = dst + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj, ++row) {
        const double* src = cols + row * out_cells;
        for (int oi = 0; oi < g.out_h; ++oi, src += g.out_w) {
          const int si = oi * g.stride_h - g.pad_h + ki;
          if (si < 0 || si >= g.in_h) continue;
          double* dst_row = plane + static_cast<std::size_t>(si) * g.in_w;
          for (int oj = 0; oj < g.out_w; ++oj) {
            const int sj = oj * g.stride_w - g.pad_w + kj;
            if (sj >= 0 && sj < g.in_w) dst_row[sj] += src[oj];
          }
        }
      }
    }
  }
}

void validate_conv_spec(const Conv2dSpec& spec) {
  check(spec.stride_h >= 1 && spec.stride_w >= 1,
        "conv: strides must be at least 1");
  check(spec.pad_h >= 0 && spec.pad_w >= 0, "conv: padding must be >= 0");
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias,
           const Conv2dSpec& spec) {
  check(x && weight, "conv2d: null operand");
  check(x->value.rank() == 4, "conv2d: input must be (n, c, h, w)");
  check(weight->value.rank() == 4, "conv2d: weight must be (f, c, kh, kw)");
  validate_conv_spec(spec);

  const int n = x->value.dim(0);
  const int c = x->value.dim(1);
  const int h = x->value.dim(2);
  const int w = x->value.dim(3);
  const int f = weight->value.dim(0);
  check(weight->value.dim(1) == c, "conv2d: channel mismatch");
  const int kh = weight->value.dim(2);
  const int kw = weight->value.dim(3);
  const int span_h = h + 2 * spec.pad_h - kh;
  const int span_w = w + 2 * spec.pad_w - kw;
  check(span_h >= 0 && span_w >= 0, "conv2d: kernel larger than padded input");
  check(span_h % spec.stride_h == 0 && span_w % spec.stride_w == 0,
        "conv2d: stride does not evenly tile the input");
  if (bias) {
    check(bias->value.rank() == 1 && bias->value.dim(0) == f,
          "conv2d: bias shape mismatch");
  }

  ConvGeometry g;
  g.channels = c;
  g.in_h = h;
  g.in_w = w;
  g.kh = kh;
  g.kw = kw;
  g.stride_h = spec.stride_h;
  g.stride_w = spec.stride_w;
  g.pad_h = spec.pad_h;
  g.pad_w = spec.pad_w;
  g.out_h = span_h / spec.stride_h + 1;
  g.out_w = span_w / spec.stride_w + 1;

  const std::size_t patch = g.patch_rows();
  const std::size_t cells = g.out_cells();
  const std::size_t in_size = static_cast<std::size_t>(c) * h * w;
  const std::size_t out_size = static_cast<std::size_t>(f) * cells;

  Tensor out({n, f, g.out_h, g.out_w});
  {
    std::vector<double> cols(patch * cells);
    ConstMatMap wm(weight->value.data.data(), f, static_cast<int>(patch));
    for (int s = 0; s < n; ++s) {
      im2col(x->value.data.data() + static_cast<std::size_t>(s) * in_size, g,
             cols.data());
      ConstMatMap cm(cols.data(), static_cast<int>(patch),
                     static_cast<int>(cells));
      MatMap om(out.data.data() + static_cast<std::size_t>(s) * out_size, f,
                static_cast<int>(cells));
      om.noalias() = wm * cm;
    }
  }
  if (bias) {
    for (int s = 0; s < n; ++s) {
      for (int fi = 0; fi < f; ++fi) {
        double* dst = out.data.data() +
                      (static_cast<std::size_t>(s) * f + fi) * cells;
        const double bv = bias->value.data[static_cast<std::size_t>(fi)];
        for (std::size_t i = 0; i < cells; ++i) dst[i] += bv;
      }
    }
  }

  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  Var node = make_node(std::move(out), std::move(parents));
  Node* self = node.get();
  node->backprop = [self, x, weight, bias, g, n, f, patch, cells, in_size,
                    out_size]() {
    std::vector<double> cols(patch * cells);
    for (int s = 0; s < n; ++s) {
      ConstMatMap gm(self->grad.data.data() +
                         static_cast<std::size_t>(s) * out_size,
                     f, static_cast<int>(cells));
      if (x->requires_grad || weight->requires_grad) {
        im2col(x->value.data.data() + static_cast<std::size_t>(s) * in_size, g,
               cols.data());
      }
      if (weight->requires_grad) {
        ConstMatMap cm(cols.data(), static_cast<int>(patch),
                       static_cast<int>(cells));
        MatMap(weight->ensure_grad().data.data(), f, static_cast<int>(patch))
            .noalias() += gm * cm.transpose();
      }
      if (x->requires_grad) {
        ConstMatMap wm(weight->value.data.data(), f, static_cast<int>(patch));
        MatMap cm(cols.data(), static_cast<int>(patch),
                  static_cast<int>(cells));
        cm.noalias() = wm.transpose() * gm;
        col2im(cols.data(), g,
               x->ensure_grad().data.data() +
                   static_cast<std::size_t>(s) * in_size);
      }
      if (bias && bias->requires_grad) {
        Tensor& gb = bias->ensure_grad();
        for (int fi = 0; fi < f; ++fi) {
          const double* src = self->grad.data.data() +
                              (static_cast<std::size_t>(s) * f + fi) * cells;
          double total = 0.0;
          for (std::size_t i = 0; i < cells; ++i) total += src[i];
          gb.data[static_cast<std::size_t>(fi)] += total;
        }
      }
    }
  };
  return node;
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias,
                     const Conv2dSpec& spec) {
  check(x && weight, "conv_transpose2d: null operand");
  check(x->value.rank() == 4, "conv_transpose2d: input must be (n, c, h, w)");
  check(weight->value.rank() == 4,
        "conv_transpose2d: weight must be (c, f, kh, kw)");
  validate_conv_spec(spec);

  const int n = x->value.dim(0);
  const int c = x->value.dim(1);
  const int h = x->value.dim(2);
  const int w = x->value.dim(3);
  check(weight->value.dim(0) == c, "conv_transpose2d: channel mismatch");
  const int f = weight->value.dim(1);
  const int kh = weight->value.dim(2);
  const int kw = weight->value.dim(3);
  const int out_h = (h - 1) * spec.stride_h - 2 * spec.pad_h + kh;
  const int out_w = (w - 1) * spec.stride_w - 2 * spec.pad_w + kw;
  check(out_h >= 1 && out_w >= 1, "conv_transpose2d: empty output");
  if (bias) {
    check(bias->value.rank() == 1 && bias->value.dim(0) == f,
          "conv_transpose2d: bias shape mismatch");
  }

  // Geometry of the forward convolution this op is the adjoint of: that conv
  // maps our (f, out_h, out_w) output down to our (c, h, w) input.
  ConvGeometry g;
  g.channels = f;
  g.in_h = out_h;
  g.in_w = out_w;
  g.kh = kh;
  g.kw = kw;
  g.stride_h = spec.stride_h;
  g.stride_w = spec.stride_w;
  g.pad_h = spec.pad_h;
  g.pad_w = spec.pad_w;
  g.out_h = h;
  g.out_w = w;

  const std::size_t patch = g.patch_rows();           // f * kh * kw
  const std::size_t cells = g.out_cells();            // h * w
  const std::size_t in_size = static_cast<std::size_t>(c) * h * w;
  const std::size_t out_size = static_cast<std::size_t>(f) * out_h * out_w;

  Tensor out({n, f, out_h, out_w});
  {
    std::vector<double> cols(patch * cells);
    ConstMatMap wm(weight->value.data.data(), c, static_cast<int>(patch));
    for (int s = 0; s < n; ++s) {
      ConstMatMap xm(x->value.data.data() + static_cast<std::size_t>(s) * in_size,
                     c, static_cast<int>(cells));
      MatMap cm(cols.data(), static_cast<int>(patch), static_cast<int>(cells));
      cm.noalias() = wm.transpose() * xm;
      col2im(cols.data(), g,
             out.data.data() + static_cast<std::size_t>(s) * out_size);
    }
  }
  if (bias) {
    const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
    for (int s = 0; s < n; ++s) {
      for (int fi = 0; fi < f; ++fi) {
        double* dst = out.data.data() +
                      (static_cast<std::size_t>(s) * f + fi) * plane;
        const double bv = bias->value.data[static_cast<std::size_t>(fi)];
        for (std::size_t i = 0; i < plane; ++i) dst[i] += bv;
      }
    }
  }

  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  Var node = make_node(std::move(out), std::move(parents));
  Node* self = node.get();
  node->backprop = [self, x, weight, bias, g, n, c, f, patch, cells, in_size,
                    out_size]() {
    std::vector<double> cols(patch * cells);
    const std::size_t plane = static_cast<std::size_t>(g.in_h) * g.in_w;
    for (int s = 0; s < n; ++s) {
      if (x->requires_grad || weight->requires_grad) {
        im2col(self->grad.data.data() + static_cast<std::size_t>(s) * out_size,
               g, cols.data());
      }
      ConstMatMap cm(cols.data(), static_cast<int>(patch),
                     static_cast<int>(cells));
      if (x->requires_grad) {
        ConstMatMap wm(weight->value.data.data(), c, static_cast<int>(patch));
        MatMap(x->ensure_grad().data.data() +
                   static_cast<std::size_t>(s) * in_size,
               c, static_cast<int>(cells))
            .noalias() += wm * cm;
      }
      if (weight->requires_grad) {
        ConstMatMap xm(x->value.data.data() +
                           static_cast<std::size_t>(s) * in_size,
                       c, static_cast<int>(cells));
        MatMap(weight->ensure_grad().data.data(), c, static_cast<int>(patch))
            .noalias() += xm * cm.transpose();
      }
      if (bias && bias->requires_grad) {
        Tensor& gb = bias->ensure_grad();
        for (int fi = 0; fi < f; ++fi) {
          const double* src = self->grad.data.data() +
                              (static_cast<std::size_t>(s) * f + fi) * plane;
          double total = 0.0;
          for (std::size_t i = 0; i < plane; ++i) total += src[i];
          gb.data[static_cast<std::size_t>(fi)] += total;
        }
      }
    }
  };
  return node;
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
               Tensor& running_mean, Tensor& running_var, bool training,
               double momentum, double eps) {
  check(x && gamma && beta, "batch_norm: null operand");
  const int rank = x->value.rank();
  check(rank == 4 || rank == 2, "batch_norm: input must be rank 2 or 4");
  const int n = x->value.dim(0);
  const int c = x->value.dim(1);
  const std::size_t plane =
      rank == 4 ? static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3)
                : 1;
  const std::size_t per_channel = static_cast<std::size_t>(n) * plane;
  check(gamma->value.rank() == 1 && gamma->value.dim(0) == c,
        "batch_norm: gamma shape mismatch");
  check(beta->value.rank() == 1 && beta->value.dim(0) == c,
        "batch_norm: beta shape mismatch");
  check(running_mean.rank() == 1 && running_mean.dim(0) == c &&
            running_var.rank() == 1 && running_var.dim(0) == c,
        "batch_norm: running buffer shape mismatch");
  if (training) {
    check(per_channel >= 2,
          "batch_norm: training mode needs at least two values per channel");
  }

  // Per-channel offset of element (s, ch, i): (s * c + ch) * plane + i.
  std::vector<double> mean_c(static_cast<std::size_t>(c), 0.0);
  std::vector<double> inv_c(static_cast<std::size_t>(c), 0.0);
  if (training) {
    std::vector<double> var_c(static_cast<std::size_t>(c), 0.0);
    for (int ch = 0; ch < c; ++ch) {
      double total = 0.0;
      for (int s = 0; s < n; ++s) {
        const double* src =
            x->value.data.data() + (static_cast<std::size_t>(s) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) total += src[i];
      }
      const double m = total / static_cast<double>(per_channel);
      double sq = 0.0;
      for (int s = 0; s < n; ++s) {
        const double* src =
            x->value.data.data() + (static_cast<std::size_t>(s) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = src[i] - m;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(per_channel);
      mean_c[static_cast<std::size_t>(ch)] = m;
      var_c[static_cast<std::size_t>(ch)] = var;
      inv_c[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var + eps);
    }
    // Fold the batch statistics into the running buffers; the running
    // variance uses the unbiased estimate.
    const double unbias = static_cast<double>(per_channel) /
                          static_cast<double>(per_channel - 1);
    for (int ch = 0; ch < c; ++ch) {
      running_mean.data[static_cast<std::size_t>(ch)] =
          (1.0 - momentum) * running_mean.data[static_cast<std::size_t>(ch)] +
          momentum * mean_c[static_cast<std::size_t>(ch)];
      running_var.data[static_cast<std::size_t>(ch)] =
          (1.0 - momentum) * running_var.data[static_cast<std::size_t>(ch)] +
          momentum * var_c[static_cast<std::size_t>(ch)] * unbias;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean_c[static_cast<std::size_t>(ch)] =
          running_mean.data[static_cast<std::size_t>(ch)];
      inv_c[static_cast<std::size_t>(ch)] =
          1.0 / std::sqrt(running_var.data[static_cast<std::size_t>(ch)] + eps);
    }
  }

  Tensor normalized(x->value.shape);
  Tensor out(x->value.shape);
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
      const double m = mean_c[static_cast<std::size_t>(ch)];
      const double inv = inv_c[static_cast<std::size_t>(ch)];
      const double gv = gamma->value.data[static_cast<std::size_t>(ch)];
      const double bv = beta->value.data[static_cast<std::size_t>(ch)];
      for (std::size_t i = 0; i < plane; ++i) {
        const double xn = (x->value.data[base + i] - m) * inv;
        normalized.data[base + i] = xn;
        out.data[base + i] = gv * xn + bv;
      }
    }
  }

  Var node = make_node(std::move(out), {x, gamma, beta});
  Node* self = node.get();
  node->backprop = [self, x, gamma, beta, normalized, inv_c, training, n, c,
                    plane, per_channel]() {
    for (int ch = 0; ch < c; ++ch) {
      double sum_g = 0.0;
      double sum_gx = 0.0;
      for (int s = 0; s < n; ++s) {
        const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += self->grad.data[base + i];
          sum_gx += self->grad.data[base + i] * normalized.data[base + i];
        }
      }
      if (gamma->requires_grad) {
        gamma->ensure_grad().data[static_cast<std::size_t>(ch)] += sum_gx;
      }
      if (beta->requires_grad) {
        beta->ensure_grad().data[static_cast<std::size_t>(ch)] += sum_g;
      }
      if (!x->requires_grad) continue;
      Tensor& gx = x->ensure_grad();
      const double gv = gamma->value.data[static_cast<std::size_t>(ch)];
      const double inv = inv_c[static_cast<std::size_t>(ch)];
      const double mean_g = sum_g / static_cast<double>(per_channel);
      const double mean_gx = sum_gx / static_cast<double>(per_channel);
      for (int s = 0; s < n; ++s) {
        const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double g = self->grad.data[base + i];
          if (training) {
            gx.data[base + i] +=
                gv * inv *
                (g - mean_g - normalized.data[base + i] * mean_gx);
          } else {
            gx.data[base + i] += gv * inv * g;
          }
        }
      }
    }
  };
  return node;
}

void backward(const Var& root) {
  check(static_cast<bool>(root), "backward: null root");
  check(root->value.numel() == 1, "backward: root must be a scalar");

  // Iterative post-order traversal; the reversed order is topological.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      Node* p = top.node->parents[top.next_parent++].get();
      if (p && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }

  root->ensure_grad().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->requires_grad || !node->backprop) continue;
    node->ensure_grad();
    node->backprop();
  }
}

Var ParamStore::add(const std::string& name, Tensor init) {
  if (name.empty()) throw precondition_error("parameter name must be non-empty");
  auto [it, inserted] = params_.emplace(name, nullptr);
  if (!inserted) {
    throw precondition_error("duplicate parameter name: " + name);
  }
  it->second = make_param(std::move(init));
  return it->second;
}

const Var& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw precondition_error("unknown parameter: " + name);
  }
  return it->second;
}

bool ParamStore::contains(const std::string& name) const {
  return params_.count(name) != 0;
}

void ParamStore::zero_grad() {
  for (auto& [name, var] : params_) {
    Tensor& g = var->ensure_grad();
    std::fill(g.data.begin(), g.data.end(), 0.0);
  }
}

void Adam::step(ParamStore& store) {
  ++step_count_;
  const double bc1 =
      1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 =
      1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  for (auto& [name, var] : store.params()) {
    Tensor& g = var->ensure_grad();
    Tensor& m = m_[name];
    Tensor& v = v_[name];
    if (m.numel() == 0) m = Tensor::zeros(var->value.shape);
    if (v.numel() == 0) v = Tensor::zeros(var->value.shape);
    if (!same_shape(m, var->value) || !same_shape(v, var->value)) {
      throw precondition_error("optimizer state shape mismatch for " + name);
    }
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      m.data[i] = config_.beta1 * m.data[i] + (1.0 - config_.beta1) * g.data[i];
      v.data[i] = config_.beta2 * v.data[i] +
                  (1.0 - config_.beta2) * g.data[i] * g.data[i];
      const double m_hat = m.data[i] / bc1;
      const double v_hat = v.data[i] / bc2;
      var->value.data[i] -=
          config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

}  // namespace lidargen::ad
