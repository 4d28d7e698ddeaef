#include "mindloop/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mindloop/errors.hpp"

namespace mindloop {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using Grad = std::vector<double>;

template <class Backward>
Tensor emit(const char* op, Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
            Backward backward) {
  for (double v : value)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  auto& tape = Tape::active();
  const bool needs_grad =
      tape.recording() && std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& n) { return n->requires_grad; });
  if (needs_grad) {
    out->requires_grad = true;
    out->grad.assign(out->value.size(), 0.0);
    Node* o = out.get();
    tape.record(op, out, std::move(inputs), [o, backward = std::move(backward)]() { backward(o->grad); });
  }
  return Tensor(std::move(out));
}

[[noreturn]] void shape_error(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, to_string(a.shape()) + " vs " + to_string(b.shape()));
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) shape_error(op, "axis " + std::to_string(axis) + " invalid for " + to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D df) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  Node* an = a.node().get();
  return emit(op, a.shape(), std::move(out), {a.node()}, [an, df](const Grad& g) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * df(an->value[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) shape_error("matmul", "operands must be rank 2");
  if (a.dim(1) != b.dim(0)) shape_error("matmul", to_string(a.shape()) + " x " + to_string(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MatrixMap(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return emit("matmul", {a.dim(0), b.dim(1)}, std::move(out), {a.node(), b.node()},
              [an, bn, m, k, n](const Grad& g) {
                ConstMatrixMap G(g.data(), m, n);
                if (an->requires_grad)
                  MatrixMap(an->grad.data(), m, k).noalias() += G * ConstMatrixMap(bn->value.data(), k, n).transpose();
                if (bn->requires_grad)
                  MatrixMap(bn->grad.data(), k, n).noalias() += ConstMatrixMap(an->value.data(), m, k).transpose() * G;
              });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return emit("add", a.shape(), std::move(out), {a.node(), b.node()}, [an, bn](const Grad& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->requires_grad) an->grad[i] += g[i];
      if (bn->requires_grad) bn->grad[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return emit("sub", a.shape(), std::move(out), {a.node(), b.node()}, [an, bn](const Grad& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->requires_grad) an->grad[i] += g[i];
      if (bn->requires_grad) bn->grad[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return emit("mul", a.shape(), std::move(out), {a.node(), b.node()}, [an, bn](const Grad& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->requires_grad) an->grad[i] += g[i] * bn->value[i];
      if (bn->requires_grad) bn->grad[i] += g[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    shape_error("reshape", to_string(a.shape()) + " -> " + to_string(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  Node* an = a.node().get();
  return emit("reshape", std::move(shape), std::move(out), {a.node()}, [an](const Grad& g) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
  });
}

Tensor flatten(const Tensor& a) { return reshape(a, {a.size()}); }

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_error("transpose", "operand must be rank 2");
  const auto r = static_cast<Eigen::Index>(a.dim(0));
  const auto c = static_cast<Eigen::Index>(a.dim(1));
  std::vector<double> out(a.size());
  MatrixMap(out.data(), c, r) = a.matrix().transpose();
  Node* an = a.node().get();
  return emit("transpose", {a.dim(1), a.dim(0)}, std::move(out), {a.node()}, [an, r, c](const Grad& g) {
    if (!an->requires_grad) return;
    MatrixMap(an->grad.data(), r, c) += ConstMatrixMap(g.data(), c, r).transpose();
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_axis("slice", a.shape(), axis);
  if (begin >= end || end > s.len)
    shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for extent " +
                             std::to_string(s.len));
  const std::size_t w = end - begin;
  Shape shape = a.shape();
  shape[axis] = w;
  std::vector<double> out(s.outer * w * s.inner);
  const auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * s.len + begin) * s.inner), w * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * w * s.inner));
  Node* an = a.node().get();
  return emit("slice", std::move(shape), std::move(out), {a.node()}, [an, s, begin, w](const Grad& g) {
    if (!an->requires_grad) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < w * s.inner; ++i) an->grad[(o * s.len + begin) * s.inner + i] += g[o * w * s.inner + i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  const Shape& ref = parts.front().shape();
  split_axis("concat", ref, axis);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) shape_error("concat", "rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.shape()[i] != ref[i]) shape_error("concat", to_string(p.shape()) + " vs " + to_string(ref));
    total += p.shape()[axis];
  }
  Shape shape = ref;
  shape[axis] = total;
  const auto s = split_axis("concat", shape, axis);
  std::vector<double> out(numel(shape));
  std::vector<NodePtr> inputs;
  std::vector<std::pair<Node*, std::size_t>> layout;  // node, offset along axis
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis];
    const auto x = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * w * s.inner), w * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.len + offset) * s.inner));
    inputs.push_back(p.node());
    layout.emplace_back(p.node().get(), offset);
    offset += w;
  }
  return emit("concat", std::move(shape), std::move(out), std::move(inputs), [layout, s, axis](const Grad& g) {
    for (const auto& [node, off] : layout) {
      if (!node->requires_grad) continue;
      const std::size_t w = node->shape[axis];
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < w * s.inner; ++i) node->grad[o * w * s.inner + i] += g[(o * s.len + off) * s.inner + i];
    }
  });
}

Tensor gather(const Tensor& a, const std::vector<std::size_t>& flat_indices) {
  if (flat_indices.empty()) throw ContractError("gather: empty index set");
  std::vector<double> out(flat_indices.size());
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= a.size()) shape_error("gather", "index " + std::to_string(flat_indices[i]) + " out of range");
    out[i] = a[flat_indices[i]];
  }
  Node* an = a.node().get();
  return emit("gather", {flat_indices.size()}, std::move(out), {a.node()}, [an, flat_indices](const Grad& g) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) an->grad[flat_indices[i]] += g[i];
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Node* an = a.node().get();
  return emit("sum", {}, {total}, {a.node()}, [an](const Grad& g) {
    if (!an->requires_grad) return;
    for (auto& v : an->grad) v += g[0];
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const auto s = split_axis("sum", a.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.len; ++i)
      for (std::size_t j = 0; j < s.inner; ++j) out[o * s.inner + j] += x[(o * s.len + i) * s.inner + j];
  Node* an = a.node().get();
  return emit("sum_axis", drop_axis(a.shape(), axis), std::move(out), {a.node()}, [an, s](const Grad& g) {
    if (!an->requires_grad) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.len; ++i)
        for (std::size_t j = 0; j < s.inner; ++j) an->grad[(o * s.len + i) * s.inner + j] += g[o * s.inner + j];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean(const Tensor& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  Node* an = a.node().get();
  auto result = emit("exp", a.shape(), out, {a.node()}, [an, out](const Grad& g) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * out[i];
  });
  return result;
}

Tensor sigmoid(const Tensor& a) {
  auto f = [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary("sigmoid", a, f, [f](double x) {
    const double y = f(x);
    return y * (1.0 - y);
  });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary("leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
               [slope](double x) { return x > 0 ? 1.0 : slope; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto s = split_axis("softmax", a.shape(), axis);
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.inner; ++j) {
      const auto at = [&](std::size_t i) { return (o * s.len + i) * s.inner + j; };
      double mx = x[at(0)];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, x[at(i)]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) z += (out[at(i)] = std::exp(x[at(i)] - mx));
      for (std::size_t i = 0; i < s.len; ++i) out[at(i)] /= z;
    }
  Node* an = a.node().get();
  return emit("softmax", a.shape(), out, {a.node()}, [an, out, s](const Grad& g) {
    if (!an->requires_grad) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.inner; ++j) {
        const auto at = [&](std::size_t i) { return (o * s.len + i) * s.inner + j; };
        double dot = 0.0;
        for (std::size_t i = 0; i < s.len; ++i) dot += g[at(i)] * out[at(i)];
        for (std::size_t i = 0; i < s.len; ++i) an->grad[at(i)] += out[at(i)] * (g[at(i)] - dot);
      }
  });
}

namespace {

struct ConvGeometry {
  std::size_t c, h, w, o, k, stride, pad, ho, wo;
  std::size_t patch() const { return c * k * k; }
  std::size_t positions() const { return ho * wo; }
};

// cols: (C*k*k) x (Ho*Wo), row-major.
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t np = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((ch * g.k + ky) * g.k + kx) * np;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.wo + ox] = inside ? x[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t np = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((ch * g.k + ky) * g.k + kx) * np;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  if (x.rank() != 3) shape_error("conv2d", "input must be C x H x W, got " + to_string(x.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3))
    shape_error("conv2d", "weight must be O x C x k x k, got " + to_string(weight.shape()));
  if (weight.dim(1) != x.dim(0)) shape_error("conv2d", "channel mismatch " + to_string(x.shape()) + " vs " + to_string(weight.shape()));
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) shape_error("conv2d", "bias must have O entries");
  if (stride == 0) shape_error("conv2d", "stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) shape_error("conv2d", "kernel larger than padded input");
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  const auto P = static_cast<Eigen::Index>(g.patch());
  const auto N = static_cast<Eigen::Index>(g.positions());
  const auto O = static_cast<Eigen::Index>(g.o);
  std::vector<double> cols(g.patch() * g.positions());
  im2col(g, x.data().data(), cols.data());

  std::vector<double> out(g.o * g.positions());
  MatrixMap Y(out.data(), O, N);
  Y.noalias() = ConstMatrixMap(weight.data().data(), O, P) * ConstMatrixMap(cols.data(), P, N);
  for (Eigen::Index r = 0; r < O; ++r) Y.row(r).array() += bias[static_cast<std::size_t>(r)];

  Node* xn = x.node().get();
  Node* wn = weight.node().get();
  Node* bn = bias.node().get();
  return emit("conv2d", {g.o, g.ho, g.wo}, std::move(out), {x.node(), weight.node(), bias.node()},
              [xn, wn, bn, g, cols = std::move(cols), P, N, O](const Grad& grad) {
                ConstMatrixMap G(grad.data(), O, N);
                if (wn->requires_grad)
                  MatrixMap(wn->grad.data(), O, P).noalias() += G * ConstMatrixMap(cols.data(), P, N).transpose();
                if (bn->requires_grad)
                  for (Eigen::Index r = 0; r < O; ++r) bn->grad[static_cast<std::size_t>(r)] += G.row(r).sum();
                if (xn->requires_grad) {
                  std::vector<double> dcols(static_cast<std::size_t>(P * N));
                  MatrixMap(dcols.data(), P, N).noalias() = ConstMatrixMap(wn->value.data(), O, P).transpose() * G;
                  col2im_add(g, dcols.data(), xn->grad.data());
                }
              });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() != 3) shape_error("upsample_nearest", "input must be C x H x W");
  if (factor == 0) shape_error("upsample_nearest", "factor must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t H = h * factor, W = w * factor;
  std::vector<double> out(c * H * W);
  const auto in = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out[(ch * H + y) * W + xx] = in[(ch * h + y / factor) * w + xx / factor];
  Node* xn = x.node().get();
  return emit("upsample_nearest", {c, H, W}, std::move(out), {x.node()}, [xn, c, h, w, H, W, factor](const Grad& g) {
    if (!xn->requires_grad) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) xn->grad[(ch * h + y / factor) * w + xx / factor] += g[(ch * H + y) * W + xx];
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  const double n = static_cast<double>(a.size());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  Node* an = a.node().get();
  Node* bn = b.node().get();
  return emit("mse", {}, {total / n}, {a.node(), b.node()}, [an, bn, n](const Grad& g) {
    for (std::size_t i = 0; i < an->value.size(); ++i) {
      const double d = 2.0 * (an->value[i] - bn->value[i]) / n * g[0];
      if (an->requires_grad) an->grad[i] += d;
      if (bn->requires_grad) bn->grad[i] -= d;
    }
  });
}

Tensor sum_squares(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v * v;
  Node* an = a.node().get();
  return emit("sum_squares", {}, {total}, {a.node()}, [an](const Grad& g) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += 2.0 * an->value[i] * g[0];
  });
}

Tensor l2_norm(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v * v;
  const double norm = std::sqrt(total);
  Node* an = a.node().get();
  return emit("l2_norm", {}, {norm}, {a.node()}, [an, norm](const Grad& g) {
    if (!an->requires_grad || norm == 0.0) return;
    for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += an->value[i] / norm * g[0];
  });
}

}  // namespace mindloop
