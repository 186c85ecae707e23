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

#ifndef FADEKIT_PROTECT_HPP_
#define FADEKIT_PROTECT_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fadekit/nets.hpp"
#include "fadekit/tensor.hpp"

namespace fadekit {

struct ProtectConfig {
  int T = 100;
  int I = 5;
  double epsilon = 0.03;
  double alpha = 0.6;
  double beta = 0.01;
  int init_steps = 5;
  int final_co_only_steps = 5;
  std::uint64_t noise_seed = 0;
  std::uint64_t mask_seed = 0;
  /// The raw gradient is divided by ||grad||_2 raised to this power before
  /// entering the momentum buffer. 2 is the default, 1 the unit-direction form.
  double grad_norm_exponent = 2.0;
  /// Draw a fresh noise image for every replacement instead of one per image.
  bool resample_noise = false;
  /// Compare unit-norm embeddings (default) or raw head outputs.
  bool normalize_embedding = true;

  /// Throws kInvalidArgument naming the first violated bound.
  void Validate() const;
};

/// Cyclic sequence of I disjoint masks over the spatial pixels of a (C,H,W)
/// image. A mask is 1 where the pixel is kept and 0 where it is replaced; all
/// channels of a pixel share the value.
class MaskSchedule {
 public:
  static MaskSchedule Generate(const Shape& image_shape, int count, std::uint64_t seed);

  std::size_t size() const { return masks_.size(); }
  std::size_t pixel_count() const { return pixel_count_; }
  const Shape& image_shape() const { return shape_; }
  const Tensor& mask(std::size_t j) const { return masks_.at(j); }
  /// Spatial indices (y * W + x) zeroed by mask j.
  std::span<const std::size_t> replaced_pixels(std::size_t j) const { return replaced_.at(j); }

  std::size_t cursor() const { return cursor_; }
  const Tensor& Current() const { return masks_[cursor_]; }
  void Advance() { cursor_ = (cursor_ + 1) % masks_.size(); }

 private:
  Shape shape_;
  std::size_t pixel_count_ = 0;
  std::vector<Tensor> masks_;
  std::vector<std::vector<std::size_t>> replaced_;
  std::size_t cursor_ = 0;
};

/// Fraction of spatial pixels replaced at least once.
class CoverageTracker {
 public:
  explicit CoverageTracker(std::size_t pixel_count) : replaced_(pixel_count, false) {}
  void Mark(std::span<const std::size_t> pixels);
  double Fraction() const;

 private:
  std::vector<bool> replaced_;
  std::size_t count_ = 0;
};

enum class StepOp { kConstraint, kReplacement };
const char* StepOpName(StepOp op);

struct TraceEntry {
  int step = 0;
  StepOp op = StepOp::kConstraint;
  /// Feature loss of the image the operation was applied to.
  double feature_loss = 0.0;
  double coverage = 0.0;
  /// Constraint step skipped because the gradient was exactly zero.
  bool stalled = false;
};

struct ProtectionResult {
  Tensor protected_image;
  std::vector<TraceEntry> trace;
  double final_loss = 0.0;
  bool constraint_met_at_end = false;
};

/// i.i.d. standard normal values, deterministic under `seed`.
Tensor SampleStandardNormal(const Shape& shape, std::uint64_t seed);
/// Standard normal draws mapped into the pixel domain: clamp(0.5 + 0.25 v, 0, 1).
Tensor SampleNoiseTarget(const Shape& shape, std::uint64_t seed);

/// ||f(x_p) - target||^2 without tracking.
double FeatureLoss(const FeatureExtractor& model, const Tensor& x_p,
                   const Tensor& target_embedding, bool normalize = true);

struct ConstraintStep {
  Tensor image;
  Tensor momentum;
  double loss_before = 0.0;
  bool stalled = false;
};

/// One momentum step on the feature distance:
///   g' = alpha g + grad / ||grad||^p,  x' = clamp(x_p - beta g', 0, 1).
/// A zero gradient returns x_p and g unchanged with `stalled` set.
ConstraintStep ConstraintOp(const Tensor& x_p, const Tensor& original_embedding,
                            const FeatureExtractor& model, const Tensor& momentum,
                            double alpha, double beta, double grad_norm_exponent = 2.0,
                            bool normalize = true);

/// x_p * M_j + replacement * (1 - M_j) for the current mask, then advances the
/// cursor and marks the replaced pixels in `coverage` when given.
Tensor PartialReplacementOp(const Tensor& x_p, MaskSchedule& schedule,
                            const Tensor& replacement, CoverageTracker* coverage = nullptr);

/// Supplies the image written into replaced pixels; called once per
/// replacement with a running counter.
using ReplacementSource = std::function<Tensor(std::size_t replacement_index)>;

/// The full alternating loop: an initialization stage of `init_steps`
/// (constraint step then replacement), a main stage choosing a constraint
/// step when the loss is at or above epsilon and a replacement otherwise, and
/// a final stage of constraint steps only.
ProtectionResult ProgressiveFade(const Tensor& x, const FeatureExtractor& model,
                                 const ProtectConfig& config, const ReplacementSource& source);

/// The default protector: replacement values come from the per-image noise
/// target.
ProtectionResult PixelFadeProtect(const Tensor& x, const FeatureExtractor& model,
                                  const ProtectConfig& config);

// Baselines and ablations.

/// Separable Gaussian blur with sigma = radius and half-sample symmetric
/// boundary extension.
Tensor GaussianBlur(const Tensor& x, double radius);
/// Block averages over `block` x `block` tiles.
Tensor Mosaic(const Tensor& x, std::size_t block);
/// clamp(x + amplitude * N(0,1), 0, 1).
Tensor RandomPerturb(const Tensor& x, double amplitude, std::uint64_t seed);

/// Alternating loop where the replacement is swapped for additive noise of
/// the given amplitude.
ProtectionResult PerturbProtect(const Tensor& x, const FeatureExtractor& model,
                                double amplitude, const ProtectConfig& config);
/// T momentum steps on L_f + w * mean|x_p - eta|, no replacement.
ProtectionResult JointL1Protect(const Tensor& x, const FeatureExtractor& model, double weight,
                                const ProtectConfig& config);
/// Replacement target (1 - w) x + w eta.
ProtectionResult NoiseWeightProtect(const Tensor& x, const FeatureExtractor& model,
                                    double weight, const ProtectConfig& config);

enum class ObjectiveTarget { kOtherIdentity, kZero, kContrastive };
/// Alternating loop with a non-noise replacement target. kOtherIdentity needs
/// `other_image`; kContrastive writes the per-pixel value farthest from x.
ProtectionResult ObjectiveVariantProtect(const Tensor& x, const FeatureExtractor& model,
                                         ObjectiveTarget target, const ProtectConfig& config,
                                         const std::optional<Tensor>& other_image = std::nullopt);

}  // namespace fadekit

#endif  // FADEKIT_PROTECT_HPP_
