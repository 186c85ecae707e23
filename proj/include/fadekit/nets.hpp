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

#ifndef FADEKIT_NETS_HPP_
#define FADEKIT_NETS_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fadekit/tensor.hpp"

namespace fadekit {

/// Stacks same-shape (C,H,W) images into an untracked (N,C,H,W) batch.
Tensor StackImages(std::span<const Tensor> images);

enum class OptimizerKind { kSgd, kMomentum, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First-order optimizer over a fixed parameter list. State buffers are
/// allocated on construction, one per parameter and matching its size when
/// the variant uses that state (momentum: first; Adam: first and second),
/// empty otherwise.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor> params);

  void ZeroGrad();
  /// Applies one update using the gradients currently stored on the params.
  void Step();

  const OptimizerConfig& config() const { return config_; }
  std::span<const std::vector<double>> first_moments() const { return m_; }
  std::span<const std::vector<double>> second_moments() const { return v_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t steps_ = 0;
};

struct ExtractorConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 16;
  std::size_t conv1 = 8;
  std::size_t conv2 = 16;
  std::size_t conv3 = 32;
  std::size_t embed_dim = 64;
  std::size_t num_classes = 2;
  /// Temperature applied to logits computed from unit-norm embeddings.
  double logit_scale = 5.0;
};

/// Embedding network: three conv+relu+pool blocks, a linear head to the
/// embedding, and a linear classifier on the unit-norm embedding that is used
/// only for training.
class FeatureExtractor {
 public:
  static FeatureExtractor Create(const ExtractorConfig& config, std::uint64_t seed);

  /// images (N,C,H,W) -> (N,D). Rows are unit-norm when `normalize`.
  Tensor EmbedBatch(const Tensor& images, bool normalize = true) const;
  /// image (C,H,W) -> (D).
  Tensor Embed(const Tensor& image, bool normalize = true) const;
  Tensor Logits(const Tensor& images) const;

  std::vector<Tensor> Parameters() const;
  void SetTrainable(bool trainable);

  const ExtractorConfig& config() const { return config_; }

  void Save(const std::filesystem::path& path) const;
  static FeatureExtractor Load(const std::filesystem::path& path);

 private:
  void CheckInput(const Tensor& images) const;

  ExtractorConfig config_;
  Tensor w1_, b1_, w2_, b2_, w3_, b3_, head_w_, head_b_, cls_w_;
};

struct RecoveryConfig {
  std::size_t channels = 3;
  std::size_t width = 16;  // base feature width
};

/// Image-to-image network used by the attacker: two conv+pool encoder blocks,
/// two upsample+conv decoder blocks, a full-resolution skip into the output
/// conv, and a global residual from the input.
class RecoveryNet {
 public:
  static RecoveryNet Create(const RecoveryConfig& config, std::uint64_t seed);

  /// Raw (unclamped) output, tracked for training.
  Tensor Forward(const Tensor& images) const;

  std::vector<Tensor> Parameters() const;
  const RecoveryConfig& config() const { return config_; }

  void Save(const std::filesystem::path& path) const;
  static RecoveryNet Load(const std::filesystem::path& path);

 private:
  RecoveryConfig config_;
  Tensor e1_w_, e1_b_, e2_w_, e2_b_, d1_w_, d1_b_, d2_w_, d2_b_, out_w_, out_b_;
};

struct LabeledImage {
  Tensor image;  // (C,H,W)
  int label = 0;
};

struct TrainLogEntry {
  std::size_t epoch = 0;
  /// Mean minibatch loss during the epoch (augmented inputs, moving weights).
  double loss = 0.0;
  double accuracy = 0.0;  // training-set accuracy; 0 for recovery training
  /// Extractor only: cross-entropy of the end-of-epoch weights on the
  /// un-augmented training set. Free of augmentation and ordering noise.
  double eval_loss = 0.0;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  /// Random shifts of up to 2 px and brightness offsets (extractor only).
  bool augment = true;
  /// Anneal the learning rate to zero over the run with a half cosine.
  bool cosine_decay = false;
};

struct ExtractorTraining {
  FeatureExtractor model;
  std::vector<TrainLogEntry> log;
  double heldout_accuracy = 0.0;
};

/// Cross-entropy training over identity labels. Requires >= 2 identities with
/// >= 2 training views each. Accuracy is measured on `heldout`.
ExtractorTraining TrainExtractor(std::span<const LabeledImage> train,
                                 std::span<const LabeledImage> heldout,
                                 ExtractorConfig model_config, const TrainConfig& config);

/// Fraction of images whose argmax logit equals the label.
double ClassificationAccuracy(const FeatureExtractor& model,
                              std::span<const LabeledImage> images);

struct RecoveryPair {
  Tensor protected_image;
  Tensor original;
};

struct RecoveryTraining {
  RecoveryNet net;
  std::vector<TrainLogEntry> log;
};

/// Minimizes mean per-pixel L1 between Forward(protected) and original.
RecoveryTraining TrainRecovery(std::span<const RecoveryPair> pairs,
                               const RecoveryConfig& net_config, const TrainConfig& config);

/// Clamped reconstruction of a single (C,H,W) image.
Tensor Recover(const RecoveryNet& net, const Tensor& protected_image);

}  // namespace fadekit

#endif  // FADEKIT_NETS_HPP_
