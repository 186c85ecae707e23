// Copyright 2026 The FadeKit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "fadekit/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "fadekit/error.hpp"

namespace fadekit {

std::size_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string ShapeString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::MutableGrad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  Require(NumElements(shape) == data.size(), ErrorCode::kShapeMismatch,
          "tensor: shape " + ShapeString(shape) + " does not hold " +
              std::to_string(data.size()) + " values");
  for (double v : data) {
    Require(std::isfinite(v), ErrorCode::kNumeric,
            "tensor: non-finite value in constructor");
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::Zeros(Shape shape, bool requires_grad) {
  return Full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::Full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = NumElements(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::Scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t i) const {
  Require(i < rank(), ErrorCode::kShapeMismatch,
          "tensor: dim " + std::to_string(i) + " out of range for " +
              ShapeString(shape()));
  return impl_->shape[i];
}

double Tensor::item() const {
  Require(numel() == 1, ErrorCode::kShapeMismatch,
          "item: tensor of shape " + ShapeString(shape()) + " is not scalar");
  return impl_->data[0];
}

Tensor Tensor::Clone() const {
  Tensor out(impl_->shape, impl_->data, impl_->requires_grad);
  return out;
}

Tensor Tensor::Detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor MakeResult(Shape shape, std::vector<double> data, const char* op,
                  std::vector<Tensor> inputs,
                  std::function<void(const TensorImpl& out)> backward) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      Fail(ErrorCode::kNumeric,
           std::string(op) + ": produced a non-finite value");
    }
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool track = false;
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) track = true;
  }
  if (track) {
    impl->requires_grad = true;
    impl->node = std::make_shared<Node>();
    for (const Tensor& t : inputs) {
      if (t.defined()) impl->node->inputs.push_back(t.impl());
    }
    impl->node->backward = std::move(backward);
  }
  return Tensor(std::move(impl));
}

void Backward(const Tensor& loss) {
  Require(loss.defined() && loss.numel() == 1, ErrorCode::kShapeMismatch,
          "backward: loss must be scalar, got " +
              (loss.defined() ? ShapeString(loss.shape()) : std::string("undefined")));
  Require(loss.requires_grad(), ErrorCode::kFailedPrecondition,
          "backward: loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      TensorImpl* child = impl->node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  loss.impl()->MutableGrad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->node || impl->grad.empty()) continue;
    impl->node->backward(*impl);
  }
  for (TensorImpl* impl : order) {
    for (double g : impl->grad) {
      Require(std::isfinite(g), ErrorCode::kNumeric,
              "backward: non-finite gradient");
    }
  }
}

namespace {

void RequireSameShape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    Fail(ErrorCode::kShapeMismatch, std::string(op) + ": shape mismatch " +
                                        ShapeString(a.shape()) + " vs " +
                                        ShapeString(b.shape()));
  }
}

void RequireRank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    Fail(ErrorCode::kShapeMismatch, std::string(op) + ": expected rank " +
                                        std::to_string(rank) + ", got " +
                                        ShapeString(t.shape()));
  }
}

// in.grad[i] += out.grad[i] * factor(i), same-shape ops only.
template <typename F>
void AccumulateElementwise(TensorImpl* in, const TensorImpl& out, F factor) {
  if (!in->requires_grad) return;
  auto& g = in->MutableGrad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * factor(i);
}

}  // namespace

Tensor Add(const Tensor& a, const Tensor& b) {
  RequireSameShape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(a.shape(), std::move(out), "add", {a, b},
                    [pa, pb](const TensorImpl& o) {
                      AccumulateElementwise(pa, o, [](std::size_t) { return 1.0; });
                      AccumulateElementwise(pb, o, [](std::size_t) { return 1.0; });
                    });
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  RequireSameShape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(a.shape(), std::move(out), "sub", {a, b},
                    [pa, pb](const TensorImpl& o) {
                      AccumulateElementwise(pa, o, [](std::size_t) { return 1.0; });
                      AccumulateElementwise(pb, o, [](std::size_t) { return -1.0; });
                    });
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  RequireSameShape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(a.shape(), std::move(out), "mul", {a, b},
                    [pa, pb](const TensorImpl& o) {
                      AccumulateElementwise(pa, o, [pb](std::size_t i) { return pb->data[i]; });
                      AccumulateElementwise(pb, o, [pa](std::size_t i) { return pa->data[i]; });
                    });
}

Tensor Scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  TensorImpl* pa = a.impl().get();
  return MakeResult(a.shape(), std::move(out), "scale", {a},
                    [pa, s](const TensorImpl& o) {
                      AccumulateElementwise(pa, o, [s](std::size_t) { return s; });
                    });
}

Tensor AddScalar(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  TensorImpl* pa = a.impl().get();
  return MakeResult(a.shape(), std::move(out), "add_scalar", {a},
                    [pa](const TensorImpl& o) {
                      AccumulateElementwise(pa, o, [](std::size_t) { return 1.0; });
                    });
}

Tensor Relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "relu", {x},
                    [px](const TensorImpl& o) {
                      AccumulateElementwise(px, o, [px](std::size_t i) {
                        return px->data[i] > 0.0 ? 1.0 : 0.0;
                      });
                    });
}

Tensor Softplus(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "softplus", {x},
                    [px](const TensorImpl& o) {
                      AccumulateElementwise(px, o, [px](std::size_t i) {
                        return 1.0 / (1.0 + std::exp(-px->data[i]));
                      });
                    });
}

Tensor Clamp(const Tensor& x, double lo, double hi) {
  Require(lo <= hi, ErrorCode::kInvalidArgument, "clamp: lo > hi");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "clamp", {x},
                    [px, lo, hi](const TensorImpl& o) {
                      AccumulateElementwise(px, o, [px, lo, hi](std::size_t i) {
                        return px->data[i] > lo && px->data[i] < hi ? 1.0 : 0.0;
                      });
                    });
}

Tensor Sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  TensorImpl* px = x.impl().get();
  return MakeResult(Shape{}, {s}, "sum", {x}, [px](const TensorImpl& o) {
    if (!px->requires_grad) return;
    for (double& g : px->MutableGrad()) g += o.grad[0];
  });
}

Tensor Mean(const Tensor& x) {
  Require(x.numel() > 0, ErrorCode::kShapeMismatch, "mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  TensorImpl* px = x.impl().get();
  return MakeResult(Shape{}, {s * inv}, "mean", {x}, [px, inv](const TensorImpl& o) {
    if (!px->requires_grad) return;
    auto& g = px->MutableGrad();
    for (double& v : g) v += o.grad[0] * inv;
  });
}

Tensor L2Norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  const double norm = std::sqrt(s);
  TensorImpl* px = x.impl().get();
  return MakeResult(Shape{}, {norm}, "l2_norm", {x}, [px, norm](const TensorImpl& o) {
    if (!px->requires_grad || norm == 0.0) return;
    auto& g = px->MutableGrad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * px->data[i] / norm;
  });
}

Tensor SqL2Distance(const Tensor& a, const Tensor& b) {
  RequireSameShape("sq_l2_distance", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(Shape{}, {s}, "sq_l2_distance", {a, b},
                    [pa, pb](const TensorImpl& o) {
                      const double g = o.grad[0];
                      if (pa->requires_grad) {
                        auto& ga = pa->MutableGrad();
                        for (std::size_t i = 0; i < ga.size(); ++i)
                          ga[i] += 2.0 * g * (pa->data[i] - pb->data[i]);
                      }
                      if (pb->requires_grad) {
                        auto& gb = pb->MutableGrad();
                        for (std::size_t i = 0; i < gb.size(); ++i)
                          gb[i] -= 2.0 * g * (pa->data[i] - pb->data[i]);
                      }
                    });
}

Tensor L1Distance(const Tensor& a, const Tensor& b) {
  RequireSameShape("l1_distance", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  auto sign = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
  return MakeResult(Shape{}, {s}, "l1_distance", {a, b},
                    [pa, pb, sign](const TensorImpl& o) {
                      const double g = o.grad[0];
                      if (pa->requires_grad) {
                        auto& ga = pa->MutableGrad();
                        for (std::size_t i = 0; i < ga.size(); ++i)
                          ga[i] += g * sign(pa->data[i] - pb->data[i]);
                      }
                      if (pb->requires_grad) {
                        auto& gb = pb->MutableGrad();
                        for (std::size_t i = 0; i < gb.size(); ++i)
                          gb[i] -= g * sign(pa->data[i] - pb->data[i]);
                      }
                    });
}

Tensor ElementwiseBlend(const Tensor& a, const Tensor& b, const Tensor& mask) {
  RequireSameShape("elementwise_blend", a, b);
  RequireSameShape("elementwise_blend", a, mask);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] * mask[i] + b[i] * (1.0 - mask[i]);
  }
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  auto m = mask.Detach();
  return MakeResult(a.shape(), std::move(out), "elementwise_blend", {a, b},
                    [pa, pb, m](const TensorImpl& o) {
                      AccumulateElementwise(pa, o, [&m](std::size_t i) { return m[i]; });
                      AccumulateElementwise(pb, o, [&m](std::size_t i) { return 1.0 - m[i]; });
                    });
}

Tensor Reshape(const Tensor& x, Shape shape) {
  Require(NumElements(shape) == x.numel(), ErrorCode::kShapeMismatch,
          "reshape: cannot view " + ShapeString(x.shape()) + " as " +
              ShapeString(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  TensorImpl* px = x.impl().get();
  return MakeResult(std::move(shape), std::move(out), "reshape", {x},
                    [px](const TensorImpl& o) {
                      AccumulateElementwise(px, o, [](std::size_t) { return 1.0; });
                    });
}

Tensor Flatten(const Tensor& x) {
  Require(x.rank() >= 1, ErrorCode::kShapeMismatch, "flatten: rank-0 input");
  const std::size_t n = x.dim(0);
  return Reshape(x, Shape{n, n == 0 ? 0 : x.numel() / n});
}

Tensor Matmul(const Tensor& a, const Tensor& b) {
  RequireRank("matmul", a, 2);
  RequireRank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    Fail(ErrorCode::kShapeMismatch, "matmul: inner dimensions differ " +
                                        ShapeString(a.shape()) + " x " +
                                        ShapeString(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = bd + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return MakeResult(Shape{m, n}, std::move(out), "matmul", {a, b},
                    [pa, pb, m, k, n](const TensorImpl& o) {
                      const double* go = o.grad.data();
                      if (pa->requires_grad) {
                        auto& ga = pa->MutableGrad();
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t p = 0; p < k; ++p) {
                            double s = 0.0;
                            const double* brow = pb->data.data() + p * n;
                            const double* grow = go + i * n;
                            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                            ga[i * k + p] += s;
                          }
                      }
                      if (pb->requires_grad) {
                        auto& gb = pb->MutableGrad();
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t p = 0; p < k; ++p) {
                            const double av = pa->data[i * k + p];
                            double* gbrow = gb.data() + p * n;
                            const double* grow = go + i * n;
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                          }
                      }
                    });
}

Tensor AddBias(const Tensor& x, const Tensor& bias) {
  RequireRank("add_bias", x, 2);
  RequireRank("add_bias", bias, 1);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.dim(0) != d) {
    Fail(ErrorCode::kShapeMismatch, "add_bias: " + ShapeString(x.shape()) +
                                        " with bias " + ShapeString(bias.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] + bias[j];
  TensorImpl* px = x.impl().get();
  TensorImpl* pb = bias.impl().get();
  return MakeResult(x.shape(), std::move(out), "add_bias", {x, bias},
                    [px, pb, n, d](const TensorImpl& o) {
                      AccumulateElementwise(px, o, [](std::size_t) { return 1.0; });
                      if (pb->requires_grad) {
                        auto& gb = pb->MutableGrad();
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < d; ++j) gb[j] += o.grad[i * d + j];
                      }
                    });
}

Tensor NormalizeRows(const Tensor& x) {
  RequireRank("normalize_rows", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.numel());
  auto norms = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
    const double norm = std::sqrt(s);
    Require(norm > 0.0, ErrorCode::kNumeric, "normalize_rows: zero-norm row");
    (*norms)[i] = norm;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / norm;
  }
  TensorImpl* px = x.impl().get();
  return MakeResult(x.shape(), std::move(out), "normalize_rows", {x},
                    [px, norms, n, d](const TensorImpl& o) {
                      if (!px->requires_grad) return;
                      auto& g = px->MutableGrad();
                      for (std::size_t i = 0; i < n; ++i) {
                        const double* y = o.data.data() + i * d;
                        const double* gy = o.grad.data() + i * d;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
                        for (std::size_t j = 0; j < d; ++j)
                          g[i * d + j] += (gy[j] - y[j] * dot) / (*norms)[i];
                      }
                    });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, oh, ow;
  std::size_t KernelSize() const { return c * kh * kw; }
  std::size_t OutPixels() const { return oh * ow; }
};

void Im2Col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t p_count = g.OutPixels();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((ci * g.kh + ki) * g.kw + kj) * p_count;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.pad);
          double* dst = row + y * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t xo = 0; xo < g.ow; ++xo) {
            const long ix = static_cast<long>(xo * g.stride + kj) - static_cast<long>(g.pad);
            dst[xo] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

void Col2Im(const ConvGeometry& g, const double* col, double* dx) {
  const std::size_t p_count = g.OutPixels();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((ci * g.kh + ki) * g.kw + kj) * p_count;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t xo = 0; xo < g.ow; ++xo) {
            const long ix = static_cast<long>(xo * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[y * g.ow + xo];
          }
        }
      }
}

}  // namespace

Tensor Conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  RequireRank("conv2d", x, 4);
  RequireRank("conv2d", weight, 4);
  Require(stride >= 1, ErrorCode::kInvalidArgument, "conv2d: stride must be >= 1");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.c || g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    Fail(ErrorCode::kShapeMismatch, "conv2d: input " + ShapeString(x.shape()) +
                                        " incompatible with weight " +
                                        ShapeString(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
    Fail(ErrorCode::kShapeMismatch, "conv2d: bias " + ShapeString(bias.shape()) +
                                        " for " + std::to_string(g.o) + " filters");
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t k_size = g.KernelSize();
  const std::size_t p_count = g.OutPixels();
  std::vector<double> out(g.n * g.o * p_count);
  std::vector<double> col(k_size * p_count);
  const double* wd = weight.data().data();
  for (std::size_t b = 0; b < g.n; ++b) {
    Im2Col(g, x.data().data() + b * g.c * g.h * g.w, col.data());
    double* ob = out.data() + b * g.o * p_count;
    for (std::size_t oc = 0; oc < g.o; ++oc) {
      double* row = ob + oc * p_count;
      std::fill(row, row + p_count, bias.defined() ? bias[oc] : 0.0);
      for (std::size_t k = 0; k < k_size; ++k) {
        const double wv = wd[oc * k_size + k];
        const double* crow = col.data() + k * p_count;
        for (std::size_t p = 0; p < p_count; ++p) row[p] += wv * crow[p];
      }
    }
  }

  TensorImpl* px = x.impl().get();
  TensorImpl* pw = weight.impl().get();
  TensorImpl* pb = bias.defined() ? bias.impl().get() : nullptr;
  return MakeResult(
      Shape{g.n, g.o, g.oh, g.ow}, std::move(out), "conv2d", {x, weight, bias},
      [px, pw, pb, g](const TensorImpl& o) {
        const std::size_t k_size = g.KernelSize();
        const std::size_t p_count = g.OutPixels();
        const std::size_t in_size = g.c * g.h * g.w;
        std::vector<double> col(k_size * p_count);
        std::vector<double> dcol(px->requires_grad ? k_size * p_count : 0);
        for (std::size_t b = 0; b < g.n; ++b) {
          const double* gy = o.grad.data() + b * g.o * p_count;
          if (pb && pb->requires_grad) {
            auto& gb = pb->MutableGrad();
            for (std::size_t oc = 0; oc < g.o; ++oc) {
              double s = 0.0;
              for (std::size_t p = 0; p < p_count; ++p) s += gy[oc * p_count + p];
              gb[oc] += s;
            }
          }
          if (pw->requires_grad) {
            Im2Col(g, px->data.data() + b * in_size, col.data());
            auto& gw = pw->MutableGrad();
            for (std::size_t oc = 0; oc < g.o; ++oc) {
              const double* grow = gy + oc * p_count;
              for (std::size_t k = 0; k < k_size; ++k) {
                const double* crow = col.data() + k * p_count;
                double s = 0.0;
                for (std::size_t p = 0; p < p_count; ++p) s += grow[p] * crow[p];
                gw[oc * k_size + k] += s;
              }
            }
          }
          if (px->requires_grad) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t oc = 0; oc < g.o; ++oc) {
              const double* grow = gy + oc * p_count;
              for (std::size_t k = 0; k < k_size; ++k) {
                const double wv = pw->data[oc * k_size + k];
                double* drow = dcol.data() + k * p_count;
                for (std::size_t p = 0; p < p_count; ++p) drow[p] += wv * grow[p];
              }
            }
            Col2Im(g, dcol.data(), px->MutableGrad().data() + b * in_size);
          }
        }
      });
}

Tensor AvgPool2d(const Tensor& x, std::size_t k) {
  RequireRank("avg_pool2d", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k != 0 || w % k != 0) {
    Fail(ErrorCode::kShapeMismatch, "avg_pool2d: " + ShapeString(x.shape()) +
                                        " not divisible by window " + std::to_string(k));
  }
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(n * c * oh * ow, 0.0);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = x.data().data() + plane * h * w;
    double* dst = out.data() + plane * oh * ow;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xi = 0; xi < w; ++xi) dst[(y / k) * ow + xi / k] += src[y * w + xi];
    for (std::size_t i = 0; i < oh * ow; ++i) dst[i] *= inv;
  }
  TensorImpl* px = x.impl().get();
  return MakeResult(Shape{n, c, oh, ow}, std::move(out), "avg_pool2d", {x},
                    [px, n, c, h, w, k, ow, oh, inv](const TensorImpl& o) {
                      if (!px->requires_grad) return;
                      auto& g = px->MutableGrad();
                      for (std::size_t plane = 0; plane < n * c; ++plane) {
                        const double* gy = o.grad.data() + plane * oh * ow;
                        double* gx = g.data() + plane * h * w;
                        for (std::size_t y = 0; y < h; ++y)
                          for (std::size_t xi = 0; xi < w; ++xi)
                            gx[y * w + xi] += gy[(y / k) * ow + xi / k] * inv;
                      }
                    });
}

Tensor UpsampleNearest2d(const Tensor& x, std::size_t factor) {
  RequireRank("upsample_nearest2d", x, 4);
  Require(factor >= 1, ErrorCode::kInvalidArgument, "upsample_nearest2d: factor must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<double> out(n * c * oh * ow);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = x.data().data() + plane * h * w;
    double* dst = out.data() + plane * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xi = 0; xi < ow; ++xi)
        dst[y * ow + xi] = src[(y / factor) * w + xi / factor];
  }
  TensorImpl* px = x.impl().get();
  return MakeResult(Shape{n, c, oh, ow}, std::move(out), "upsample_nearest2d", {x},
                    [px, n, c, h, w, factor, oh, ow](const TensorImpl& o) {
                      if (!px->requires_grad) return;
                      auto& g = px->MutableGrad();
                      for (std::size_t plane = 0; plane < n * c; ++plane) {
                        const double* gy = o.grad.data() + plane * oh * ow;
                        double* gx = g.data() + plane * h * w;
                        for (std::size_t y = 0; y < oh; ++y)
                          for (std::size_t xi = 0; xi < ow; ++xi)
                            gx[(y / factor) * w + xi / factor] += gy[y * ow + xi];
                      }
                    });
}

Tensor CrossEntropy(const Tensor& logits, std::span<const int> labels) {
  RequireRank("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Require(labels.size() == n && n > 0, ErrorCode::kShapeMismatch,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
              ShapeString(logits.shape()));
  auto probs = std::make_shared<std::vector<double>>(n * k);
  std::vector<int> label_copy(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    Require(label >= 0 && static_cast<std::size_t>(label) < k, ErrorCode::kInvalidArgument,
            "cross_entropy: label " + std::to_string(label) + " out of range");
    const double* row = logits.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / z;
    loss += -(row[label] - mx - std::log(z));
  }
  loss /= static_cast<double>(n);
  TensorImpl* pl = logits.impl().get();
  return MakeResult(Shape{}, {loss}, "cross_entropy", {logits},
                    [pl, probs, label_copy, n, k](const TensorImpl& o) {
                      if (!pl->requires_grad) return;
                      auto& g = pl->MutableGrad();
                      const double scale = o.grad[0] / static_cast<double>(n);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                          const double target =
                              static_cast<std::size_t>(label_copy[i]) == j ? 1.0 : 0.0;
                          g[i * k + j] += scale * ((*probs)[i * k + j] - target);
                        }
                    });
}

namespace {

constexpr char kMagic[8] = {'F', 'A', 'D', 'E', 'K', 'I', 'T', '1'};

void WriteU64(std::ostream& os, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

std::uint64_t ReadU64(std::istream& is, const std::filesystem::path& path) {
  unsigned char bytes[8];
  is.read(reinterpret_cast<char*>(bytes), 8);
  Require(is.gcount() == 8, ErrorCode::kIo, "weights: truncated file " + path.string());
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void SaveTensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  Require(static_cast<bool>(os), ErrorCode::kIo, "weights: cannot open " + path.string());
  os.write(kMagic, sizeof(kMagic));
  for (const auto& [name, t] : tensors) {
    WriteU64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    WriteU64(os, t.rank());
    for (std::size_t d : t.shape()) WriteU64(os, d);
    for (double v : t.data()) WriteU64(os, std::bit_cast<std::uint64_t>(v));
  }
  Require(static_cast<bool>(os), ErrorCode::kIo, "weights: write failed for " + path.string());
}

NamedTensors LoadTensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  Require(static_cast<bool>(is), ErrorCode::kIo, "weights: cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  Require(is.gcount() == 8 && std::equal(magic, magic + 8, kMagic), ErrorCode::kIo,
          "weights: bad magic in " + path.string());
  NamedTensors out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const std::uint64_t name_len = ReadU64(is, path);
    Require(name_len < (1u << 16), ErrorCode::kIo, "weights: corrupt name length");
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    Require(is.gcount() == static_cast<std::streamsize>(name_len), ErrorCode::kIo,
            "weights: truncated name in " + path.string());
    const std::uint64_t rank = ReadU64(is, path);
    Require(rank <= 8, ErrorCode::kIo, "weights: corrupt rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = ReadU64(is, path);
    const std::size_t n = NumElements(shape);
    Require(n < (1u << 28), ErrorCode::kIo, "weights: implausible size for " + name);
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(ReadU64(is, path));
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace fadekit
