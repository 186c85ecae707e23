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

#include "fadekit/protect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fadekit/error.hpp"
#include "fadekit/rng.hpp"

namespace fadekit {

void ProtectConfig::Validate() const {
  auto bad = [](const std::string& what) { Fail(ErrorCode::kInvalidArgument, "protect config: " + what); };
  if (init_steps < 0 || final_co_only_steps < 0) bad("stage lengths must be non-negative");
  if (T <= init_steps + final_co_only_steps) bad("T must exceed init_steps + final_co_only_steps");
  if (I < 1) bad("I must be >= 1");
  if (!(epsilon > 0.0)) bad("epsilon must be positive");
  if (!(beta > 0.0)) bad("beta must be positive");
  if (!(alpha >= 0.0 && alpha < 1.0)) bad("alpha must lie in [0, 1)");
  if (!(grad_norm_exponent > 0.0)) bad("grad_norm_exponent must be positive");
}

MaskSchedule MaskSchedule::Generate(const Shape& image_shape, int count, std::uint64_t seed) {
  Require(image_shape.size() == 3, ErrorCode::kShapeMismatch,
          "mask schedule: expected (C,H,W), got " + ShapeString(image_shape));
  const std::size_t c = image_shape[0];
  const std::size_t pixels = image_shape[1] * image_shape[2];
  Require(count >= 1 && static_cast<std::size_t>(count) <= pixels, ErrorCode::kInvalidArgument,
          "mask schedule: I=" + std::to_string(count) + " outside [1, " + std::to_string(pixels) +
              "]");
  std::vector<std::size_t> order(pixels);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.Shuffle(order);

  MaskSchedule s;
  s.shape_ = image_shape;
  s.pixel_count_ = pixels;
  const std::size_t n = static_cast<std::size_t>(count);
  const std::size_t base = pixels / n, extra = pixels % n;
  std::size_t start = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t len = base + (j < extra ? 1 : 0);
    std::vector<std::size_t> chunk(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(start + len));
    std::sort(chunk.begin(), chunk.end());
    start += len;
    std::vector<double> mask(c * pixels, 1.0);
    for (std::size_t p : chunk) {
      for (std::size_t ch = 0; ch < c; ++ch) mask[ch * pixels + p] = 0.0;
    }
    s.masks_.emplace_back(image_shape, std::move(mask));
    s.replaced_.push_back(std::move(chunk));
  }
  return s;
}

void CoverageTracker::Mark(std::span<const std::size_t> pixels) {
  for (std::size_t p : pixels) {
    if (!replaced_.at(p)) {
      replaced_[p] = true;
      ++count_;
    }
  }
}

double CoverageTracker::Fraction() const {
  return replaced_.empty() ? 0.0
                           : static_cast<double>(count_) / static_cast<double>(replaced_.size());
}

const char* StepOpName(StepOp op) { return op == StepOp::kConstraint ? "CO" : "PRO"; }

Tensor SampleStandardNormal(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> data(NumElements(shape));
  for (double& v : data) v = rng.Normal();
  return Tensor(shape, std::move(data));
}

Tensor SampleNoiseTarget(const Shape& shape, std::uint64_t seed) {
  Tensor raw = SampleStandardNormal(shape, seed);
  std::vector<double> data(raw.numel());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::clamp(0.5 + 0.25 * raw[i], 0.0, 1.0);
  return Tensor(shape, std::move(data));
}

double FeatureLoss(const FeatureExtractor& model, const Tensor& x_p,
                   const Tensor& target_embedding, bool normalize) {
  return SqL2Distance(model.Embed(x_p.Detach(), normalize), target_embedding).item();
}

namespace {

// Forward pass with the graph recorded on a fresh leaf copy of x_p.
struct TrackedLoss {
  Tensor leaf;
  Tensor loss;
};

TrackedLoss Track(const Tensor& x_p, const Tensor& target, const FeatureExtractor& model,
                  bool normalize) {
  TrackedLoss t;
  t.leaf = x_p.Detach();
  t.leaf.set_requires_grad(true);
  t.loss = SqL2Distance(model.Embed(t.leaf, normalize), target);
  return t;
}

Tensor ZerosLike(const Tensor& t) { return Tensor::Zeros(t.shape()); }

// Momentum update from an already-backpropagated leaf.
ConstraintStep StepFromGradient(const Tensor& x_p, std::span<const double> grad,
                                const Tensor& momentum, double loss_before, double alpha,
                                double beta, double exponent) {
  double norm2 = 0.0;
  for (double g : grad) norm2 += g * g;
  ConstraintStep out;
  out.loss_before = loss_before;
  if (norm2 == 0.0) {
    out.image = x_p;
    out.momentum = momentum;
    out.stalled = true;
    return out;
  }
  const double denom = exponent == 2.0 ? norm2 : std::pow(std::sqrt(norm2), exponent);
  std::vector<double> g_next(grad.size()), x_next(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    g_next[i] = alpha * momentum[i] + grad[i] / denom;
    x_next[i] = std::clamp(x_p[i] - beta * g_next[i], 0.0, 1.0);
  }
  out.image = Tensor(x_p.shape(), std::move(x_next));
  out.momentum = Tensor(x_p.shape(), std::move(g_next));
  return out;
}

ConstraintStep ConstraintFromTracked(TrackedLoss& tracked, const Tensor& x_p,
                                     const Tensor& momentum, double alpha, double beta,
                                     double exponent) {
  Backward(tracked.loss);
  // Zero loss can leave the leaf without an allocated gradient buffer only if
  // nothing flowed back; treat that as a zero gradient.
  std::vector<double> zeros;
  std::span<const double> grad = tracked.leaf.grad();
  if (grad.empty()) {
    zeros.assign(x_p.numel(), 0.0);
    grad = zeros;
  }
  return StepFromGradient(x_p, grad, momentum, tracked.loss.item(), alpha, beta, exponent);
}

void CheckImageForModel(const Tensor& x, const FeatureExtractor& model) {
  const auto& c = model.config();
  if (x.shape() != Shape{c.channels, c.height, c.width}) {
    Fail(ErrorCode::kShapeMismatch, "protect: image " + ShapeString(x.shape()) +
                                        " does not match model input " +
                                        ShapeString({c.channels, c.height, c.width}));
  }
  for (double v : x.data()) {
    Require(v >= 0.0 && v <= 1.0, ErrorCode::kInvalidArgument,
            "protect: image values must lie in [0,1]");
  }
}

// Replacement step: returns the new image and updates coverage.
using ReplaceFn = std::function<Tensor(const Tensor& x_p, std::size_t index,
                                       CoverageTracker& coverage)>;

ProtectionResult RunAlternating(const Tensor& x, const FeatureExtractor& model,
                                const ProtectConfig& config, const ReplaceFn& replace) {
  config.Validate();
  CheckImageForModel(x, model);
  const bool normalize = config.normalize_embedding;
  const Tensor target = model.Embed(x.Detach(), normalize).Detach();
  CoverageTracker coverage(x.dim(1) * x.dim(2));

  ProtectionResult result;
  Tensor x_p = x.Detach();
  Tensor momentum = ZerosLike(x);
  std::size_t replacements = 0;

  auto constraint = [&](int step, TrackedLoss tracked) {
    ConstraintStep s = ConstraintFromTracked(tracked, x_p, momentum, config.alpha, config.beta,
                                             config.grad_norm_exponent);
    result.trace.push_back({step, StepOp::kConstraint, s.loss_before, coverage.Fraction(), s.stalled});
    x_p = s.image;
    momentum = s.momentum;
  };
  auto replacement = [&](int step, double loss) {
    x_p = replace(x_p, replacements++, coverage);
    result.trace.push_back({step, StepOp::kReplacement, loss, coverage.Fraction(), false});
  };

  const int main_end = config.T - config.final_co_only_steps;
  for (int t = 0; t < config.init_steps; ++t) {
    constraint(t, Track(x_p, target, model, normalize));
    replacement(t, FeatureLoss(model, x_p, target, normalize));
  }
  for (int t = config.init_steps; t < main_end; ++t) {
    TrackedLoss tracked = Track(x_p, target, model, normalize);
    const double loss = tracked.loss.item();
    if (loss >= config.epsilon) {
      constraint(t, std::move(tracked));
    } else {
      replacement(t, loss);
    }
  }
  for (int t = main_end; t < config.T; ++t) {
    constraint(t, Track(x_p, target, model, normalize));
  }
  result.final_loss = FeatureLoss(model, x_p, target, normalize);
  result.constraint_met_at_end = result.final_loss <= config.epsilon;
  result.protected_image = x_p;
  return result;
}

ReplaceFn MaskedReplacement(const Tensor& x, const ProtectConfig& config,
                            const ReplacementSource& source) {
  auto schedule = std::make_shared<MaskSchedule>(
      MaskSchedule::Generate(x.shape(), config.I, config.mask_seed));
  return [schedule, source](const Tensor& x_p, std::size_t index, CoverageTracker& coverage) {
    Tensor values = source(index);
    if (values.shape() != x_p.shape()) {
      Fail(ErrorCode::kShapeMismatch, "protect: replacement image " +
                                          ShapeString(values.shape()) + " does not match " +
                                          ShapeString(x_p.shape()));
    }
    return PartialReplacementOp(x_p, *schedule, values, &coverage);
  };
}

ReplacementSource NoiseSource(const Shape& shape, const ProtectConfig& config) {
  Tensor eta = SampleNoiseTarget(shape, config.noise_seed);
  if (!config.resample_noise) {
    return [eta](std::size_t) { return eta; };
  }
  const std::uint64_t seed = config.noise_seed;
  return [eta, shape, seed](std::size_t index) {
    return index == 0 ? eta : SampleNoiseTarget(shape, DeriveSeed(seed, index));
  };
}

}  // namespace

ConstraintStep ConstraintOp(const Tensor& x_p, const Tensor& original_embedding,
                            const FeatureExtractor& model, const Tensor& momentum, double alpha,
                            double beta, double grad_norm_exponent, bool normalize) {
  Require(momentum.shape() == x_p.shape(), ErrorCode::kShapeMismatch,
          "constraint_op: momentum " + ShapeString(momentum.shape()) + " vs image " +
              ShapeString(x_p.shape()));
  TrackedLoss tracked = Track(x_p, original_embedding.Detach(), model, normalize);
  return ConstraintFromTracked(tracked, x_p.Detach(), momentum, alpha, beta, grad_norm_exponent);
}

Tensor PartialReplacementOp(const Tensor& x_p, MaskSchedule& schedule, const Tensor& replacement,
                            CoverageTracker* coverage) {
  if (x_p.shape() != schedule.image_shape() || replacement.shape() != x_p.shape()) {
    Fail(ErrorCode::kShapeMismatch, "partial_replacement: image " + ShapeString(x_p.shape()) +
                                        ", replacement " + ShapeString(replacement.shape()) +
                                        ", schedule " + ShapeString(schedule.image_shape()));
  }
  Tensor out = ElementwiseBlend(x_p.Detach(), replacement.Detach(), schedule.Current());
  if (coverage) coverage->Mark(schedule.replaced_pixels(schedule.cursor()));
  schedule.Advance();
  return out;
}

ProtectionResult ProgressiveFade(const Tensor& x, const FeatureExtractor& model,
                                 const ProtectConfig& config, const ReplacementSource& source) {
  return RunAlternating(x, model, config, MaskedReplacement(x, config, source));
}

ProtectionResult PixelFadeProtect(const Tensor& x, const FeatureExtractor& model,
                                  const ProtectConfig& config) {
  return ProgressiveFade(x, model, config, NoiseSource(x.shape(), config));
}

ProtectionResult NoiseWeightProtect(const Tensor& x, const FeatureExtractor& model,
                                    double weight, const ProtectConfig& config) {
  Require(weight >= 0.0 && weight <= 1.0, ErrorCode::kInvalidArgument,
          "noise_weight: weight must lie in [0,1]");
  ReplacementSource noise = NoiseSource(x.shape(), config);
  Tensor original = x.Detach();
  return ProgressiveFade(x, model, config, [noise, original, weight](std::size_t index) {
    Tensor eta = noise(index);
    std::vector<double> mixed(eta.numel());
    for (std::size_t i = 0; i < mixed.size(); ++i) {
      mixed[i] = (1.0 - weight) * original[i] + weight * eta[i];
    }
    return Tensor(eta.shape(), std::move(mixed));
  });
}

ProtectionResult ObjectiveVariantProtect(const Tensor& x, const FeatureExtractor& model,
                                         ObjectiveTarget target, const ProtectConfig& config,
                                         const std::optional<Tensor>& other_image) {
  Tensor values;
  switch (target) {
    case ObjectiveTarget::kOtherIdentity:
      Require(other_image.has_value(), ErrorCode::kInvalidArgument,
              "objective variant: other-identity target needs an image");
      Require(other_image->shape() == x.shape(), ErrorCode::kShapeMismatch,
              "objective variant: other-identity image " + ShapeString(other_image->shape()) +
                  " does not match " + ShapeString(x.shape()));
      values = other_image->Detach();
      break;
    case ObjectiveTarget::kZero:
      values = Tensor::Zeros(x.shape());
      break;
    case ObjectiveTarget::kContrastive: {
      std::vector<double> far(x.numel());
      for (std::size_t i = 0; i < far.size(); ++i) far[i] = x[i] < 0.5 ? 1.0 : 0.0;
      values = Tensor(x.shape(), std::move(far));
      break;
    }
  }
  return ProgressiveFade(x, model, config, [values](std::size_t) { return values; });
}

ProtectionResult PerturbProtect(const Tensor& x, const FeatureExtractor& model, double amplitude,
                                const ProtectConfig& config) {
  Require(amplitude > 0.0, ErrorCode::kInvalidArgument, "random_perturb: amplitude must be positive");
  const std::uint64_t seed = config.noise_seed;
  return RunAlternating(x, model, config,
                        [amplitude, seed](const Tensor& x_p, std::size_t index, CoverageTracker&) {
                          return RandomPerturb(x_p, amplitude, DeriveSeed(seed, index));
                        });
}

ProtectionResult JointL1Protect(const Tensor& x, const FeatureExtractor& model, double weight,
                                const ProtectConfig& config) {
  config.Validate();
  CheckImageForModel(x, model);
  Require(weight >= 0.0, ErrorCode::kInvalidArgument, "joint_l1: weight must be non-negative");
  const bool normalize = config.normalize_embedding;
  const Tensor target = model.Embed(x.Detach(), normalize).Detach();
  const Tensor eta = SampleNoiseTarget(x.shape(), config.noise_seed);
  const double inv_n = 1.0 / static_cast<double>(x.numel());

  ProtectionResult result;
  Tensor x_p = x.Detach();
  Tensor momentum = ZerosLike(x);
  for (int t = 0; t < config.T; ++t) {
    Tensor leaf = x_p.Detach();
    leaf.set_requires_grad(true);
    Tensor feature = SqL2Distance(model.Embed(leaf, normalize), target);
    Tensor loss = Add(feature, Scale(L1Distance(leaf, eta), weight * inv_n));
    Backward(loss);
    ConstraintStep s = StepFromGradient(x_p, leaf.grad(), momentum, feature.item(),
                                        config.alpha, config.beta, config.grad_norm_exponent);
    result.trace.push_back({t, StepOp::kConstraint, feature.item(), 0.0, s.stalled});
    x_p = s.image;
    momentum = s.momentum;
  }
  result.final_loss = FeatureLoss(model, x_p, target, normalize);
  result.constraint_met_at_end = result.final_loss <= config.epsilon;
  result.protected_image = x_p;
  return result;
}

namespace {

void CheckImage(const char* op, const Tensor& x) {
  Require(x.rank() == 3, ErrorCode::kShapeMismatch,
          std::string(op) + ": expected (C,H,W), got " + ShapeString(x.shape()));
}

// Half-sample symmetric extension: ... c b a | a b c ... | c b a ...
std::size_t Reflect(long i, long n) {
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - 1 - m);
}

}  // namespace

Tensor GaussianBlur(const Tensor& x, double radius) {
  CheckImage("gaussian_blur", x);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Require(radius > 0.0, ErrorCode::kInvalidArgument, "gaussian_blur: radius must be positive");
  Require(radius <= static_cast<double>(std::min(h, w)), ErrorCode::kInvalidArgument,
          "gaussian_blur: radius exceeds image size " + ShapeString(x.shape()));
  const long half = static_cast<long>(std::ceil(3.0 * radius));
  std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
  double total = 0.0;
  for (long i = -half; i <= half; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * radius * radius));
    kernel[static_cast<std::size_t>(i + half)] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;

  std::vector<double> tmp(x.numel()), out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = x.data().data() + ch * h * w;
    double* mid = tmp.data() + ch * h * w;
    double* dst = out.data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xi = 0; xi < w; ++xi) {
        double s = 0.0;
        for (long k = -half; k <= half; ++k) {
          s += kernel[static_cast<std::size_t>(k + half)] *
               src[y * w + Reflect(static_cast<long>(xi) + k, static_cast<long>(w))];
        }
        mid[y * w + xi] = s;
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xi = 0; xi < w; ++xi) {
        double s = 0.0;
        for (long k = -half; k <= half; ++k) {
          s += kernel[static_cast<std::size_t>(k + half)] *
               mid[Reflect(static_cast<long>(y) + k, static_cast<long>(h)) * w + xi];
        }
        dst[y * w + xi] = s;
      }
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor Mosaic(const Tensor& x, std::size_t block) {
  CheckImage("mosaic", x);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Require(block >= 1, ErrorCode::kInvalidArgument, "mosaic: block must be >= 1");
  Require(block <= h && block <= w, ErrorCode::kInvalidArgument,
          "mosaic: block " + std::to_string(block) + " exceeds image size " + ShapeString(x.shape()));
  std::vector<double> out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = x.data().data() + ch * h * w;
    double* dst = out.data() + ch * h * w;
    for (std::size_t by = 0; by < h; by += block)
      for (std::size_t bx = 0; bx < w; bx += block) {
        const std::size_t ey = std::min(h, by + block), ex = std::min(w, bx + block);
        double s = 0.0;
        for (std::size_t y = by; y < ey; ++y)
          for (std::size_t xi = bx; xi < ex; ++xi) s += src[y * w + xi];
        const double mean = s / static_cast<double>((ey - by) * (ex - bx));
        for (std::size_t y = by; y < ey; ++y)
          for (std::size_t xi = bx; xi < ex; ++xi) dst[y * w + xi] = block == 1 ? src[y * w + xi] : mean;
      }
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor RandomPerturb(const Tensor& x, double amplitude, std::uint64_t seed) {
  CheckImage("random_perturb", x);
  Require(amplitude >= 0.0, ErrorCode::kInvalidArgument, "random_perturb: negative amplitude");
  Rng rng(seed);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(x[i] + amplitude * rng.Normal(), 0.0, 1.0);
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace fadekit
