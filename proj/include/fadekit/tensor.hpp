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

#ifndef FADEKIT_TENSOR_HPP_
#define FADEKIT_TENSOR_HPP_

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fadekit {

using Shape = std::vector<std::size_t>;

std::size_t NumElements(const Shape& shape);
std::string ShapeString(const Shape& shape);

struct TensorImpl;

/// A recorded operation. `backward` reads the output gradient and accumulates
/// into the gradients of `inputs`.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves

  std::vector<double>& MutableGrad();
};

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// `Tensor` is a handle: copies share storage, `Clone()` makes a deep copy.
/// The graph is rebuilt by every forward pass; any op with an input that
/// requires grad records a node on its output.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor Zeros(Shape shape, bool requires_grad = false);
  static Tensor Full(Shape shape, double value, bool requires_grad = false);
  static Tensor Scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return impl_->data.size(); }
  bool defined() const { return impl_ != nullptr; }

  std::span<const double> data() const { return impl_->data; }
  /// Mutating leaf storage in place; never call on a tensor that is part of a
  /// live graph.
  std::span<double> mutable_data() { return impl_->data; }
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  void ZeroGrad() { impl_->grad.clear(); }

  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  Tensor Clone() const;
  /// Same values, no graph history, no grad requirement.
  Tensor Detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor MakeResult(Shape, std::vector<double>, const char*,
                           std::vector<Tensor>,
                           std::function<void(const TensorImpl&)>);

  std::shared_ptr<TensorImpl> impl_;
};

/// Builds an op output, checks finiteness, and records the node when any
/// input requires grad. Used by op implementations.
Tensor MakeResult(Shape shape, std::vector<double> data, const char* op,
                  std::vector<Tensor> inputs,
                  std::function<void(const TensorImpl& out)> backward);

/// Populates `grad` on every requires-grad tensor reachable from `loss`.
void Backward(const Tensor& loss);

// Elementwise and reductions.
Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Scale(const Tensor& a, double s);
Tensor AddScalar(const Tensor& a, double s);
Tensor Relu(const Tensor& x);
/// log(1 + exp(x)).
Tensor Softplus(const Tensor& x);
Tensor Clamp(const Tensor& x, double lo, double hi);
Tensor Sum(const Tensor& x);
Tensor Mean(const Tensor& x);
Tensor L2Norm(const Tensor& x);
Tensor SqL2Distance(const Tensor& a, const Tensor& b);
Tensor L1Distance(const Tensor& a, const Tensor& b);
/// a * mask + b * (1 - mask); the mask is treated as a constant.
Tensor ElementwiseBlend(const Tensor& a, const Tensor& b, const Tensor& mask);

// Shape ops.
Tensor Reshape(const Tensor& x, Shape shape);
/// [N, ...] -> [N, prod(...)].
Tensor Flatten(const Tensor& x);

// Linear algebra and network layers.
Tensor Matmul(const Tensor& a, const Tensor& b);
/// x[N, D] + bias[D] per row.
Tensor AddBias(const Tensor& x, const Tensor& bias);
/// Each row of x[N, D] divided by its Euclidean norm.
Tensor NormalizeRows(const Tensor& x);
/// x[N,C,H,W], weight[O,C,KH,KW], optional bias[O].
Tensor Conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding);
/// Non-overlapping k x k average pooling; H and W must divide by k.
Tensor AvgPool2d(const Tensor& x, std::size_t k);
Tensor UpsampleNearest2d(const Tensor& x, std::size_t factor);
/// Mean softmax cross-entropy of logits[N, K] against integer labels.
Tensor CrossEntropy(const Tensor& logits, std::span<const int> labels);

// Weight container: magic "FADEKIT1" then per-tensor records of
// (name length u64, name bytes, rank u64, dims u64..., data f64...), all
// little-endian.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void SaveTensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors LoadTensors(const std::filesystem::path& path);

}  // namespace fadekit

#endif  // FADEKIT_TENSOR_HPP_
