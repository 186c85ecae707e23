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

#include "fadekit/nets.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <string>

#include "fadekit/error.hpp"
#include "fadekit/rng.hpp"

namespace fadekit {

Tensor StackImages(std::span<const Tensor> images) {
  Require(!images.empty(), ErrorCode::kInvalidArgument, "stack: no images");
  const Shape& first = images.front().shape();
  Require(first.size() == 3, ErrorCode::kShapeMismatch,
          "stack: expected (C,H,W) images, got " + ShapeString(first));
  std::vector<double> data;
  data.reserve(images.size() * images.front().numel());
  for (const Tensor& img : images) {
    if (img.shape() != first) {
      Fail(ErrorCode::kShapeMismatch, "stack: image shape " + ShapeString(img.shape()) +
                                          " differs from " + ShapeString(first));
    }
    data.insert(data.end(), img.data().begin(), img.data().end());
  }
  return Tensor(Shape{images.size(), first[0], first[1], first[2]}, std::move(data));
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor> params)
    : config_(config), params_(std::move(params)) {
  Require(config_.learning_rate > 0.0, ErrorCode::kInvalidArgument,
          "optimizer: learning rate must be positive");
  for (const Tensor& p : params_) {
    m_.emplace_back(config_.kind == OptimizerKind::kSgd ? 0 : p.numel(), 0.0);
    v_.emplace_back(config_.kind == OptimizerKind::kAdam ? p.numel() : 0, 0.0);
  }
}

void Optimizer::ZeroGrad() {
  for (Tensor& p : params_) p.ZeroGrad();
}

void Optimizer::Step() {
  ++steps_;
  const double lr = config_.learning_rate;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    switch (config_.kind) {
      case OptimizerKind::kSgd:
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
        break;
      case OptimizerKind::kMomentum:
        for (std::size_t j = 0; j < w.size(); ++j) {
          m_[i][j] = config_.momentum * m_[i][j] + g[j];
          w[j] -= lr * m_[i][j];
        }
        break;
      case OptimizerKind::kAdam:
        for (std::size_t j = 0; j < w.size(); ++j) {
          m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * g[j];
          v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * g[j] * g[j];
          const double mhat = m_[i][j] / bc1;
          const double vhat = v_[i][j] / bc2;
          w[j] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
        }
        break;
    }
  }
}

namespace {

Tensor HeNormal(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double scale = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> data(NumElements(shape));
  for (double& v : data) v = rng.Normal() * scale;
  return Tensor(std::move(shape), std::move(data), true);
}

Tensor ZerosParam(std::size_t n) { return Tensor::Zeros(Shape{n}, true); }

Tensor Find(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  Fail(ErrorCode::kIo, "weights: missing tensor '" + name + "'");
}

Tensor Param(const NamedTensors& tensors, const std::string& name, const Shape& shape) {
  Tensor t = Find(tensors, name);
  if (t.shape() != shape) {
    Fail(ErrorCode::kIo, "weights: tensor '" + name + "' has shape " +
                             ShapeString(t.shape()) + ", expected " + ShapeString(shape));
  }
  t.set_requires_grad(true);
  return t;
}

std::vector<double> MetaValues(const NamedTensors& tensors, std::size_t expected) {
  Tensor meta = Find(tensors, "meta.config");
  Require(meta.numel() == expected, ErrorCode::kIo, "weights: malformed meta.config");
  return {meta.data().begin(), meta.data().end()};
}

}  // namespace

FeatureExtractor FeatureExtractor::Create(const ExtractorConfig& config, std::uint64_t seed) {
  Require(config.height % 8 == 0 && config.width % 8 == 0, ErrorCode::kInvalidArgument,
          "extractor: height and width must be multiples of 8");
  Require(config.num_classes >= 2, ErrorCode::kInvalidArgument,
          "extractor: at least two classes required");
  Rng rng(seed);
  FeatureExtractor m;
  m.config_ = config;
  const auto& c = config;
  m.w1_ = HeNormal({c.conv1, c.channels, 3, 3}, c.channels * 9, rng);
  m.b1_ = ZerosParam(c.conv1);
  m.w2_ = HeNormal({c.conv2, c.conv1, 3, 3}, c.conv1 * 9, rng);
  m.b2_ = ZerosParam(c.conv2);
  m.w3_ = HeNormal({c.conv3, c.conv2, 3, 3}, c.conv2 * 9, rng);
  m.b3_ = ZerosParam(c.conv3);
  const std::size_t flat = c.conv3 * (c.height / 8) * (c.width / 8);
  m.head_w_ = HeNormal({flat, c.embed_dim}, flat, rng);
  m.head_b_ = ZerosParam(c.embed_dim);
  m.cls_w_ = HeNormal({c.embed_dim, c.num_classes}, c.embed_dim, rng);
  return m;
}

void FeatureExtractor::CheckInput(const Tensor& images) const {
  const Shape expected{config_.channels, config_.height, config_.width};
  if (images.rank() != 4 ||
      Shape(images.shape().begin() + 1, images.shape().end()) != expected) {
    Fail(ErrorCode::kShapeMismatch, "embed: input " + ShapeString(images.shape()) +
                                        " does not match model input (N," +
                                        ShapeString(expected).substr(1));
  }
}

Tensor FeatureExtractor::EmbedBatch(const Tensor& images, bool normalize) const {
  CheckInput(images);
  Tensor h = AvgPool2d(Relu(Conv2d(images, w1_, b1_, 1, 1)), 2);
  h = AvgPool2d(Relu(Conv2d(h, w2_, b2_, 1, 1)), 2);
  h = AvgPool2d(Relu(Conv2d(h, w3_, b3_, 1, 1)), 2);
  // Softplus keeps the embedding positive like pooled ReLU features, but with
  // no dead units, so the protection loss always has a usable gradient.
  Tensor emb = Softplus(AddBias(Matmul(Flatten(h), head_w_), head_b_));
  return normalize ? NormalizeRows(emb) : emb;
}

Tensor FeatureExtractor::Embed(const Tensor& image, bool normalize) const {
  Require(image.rank() == 3, ErrorCode::kShapeMismatch,
          "embed: expected a (C,H,W) image, got " + ShapeString(image.shape()));
  Tensor batch = Reshape(image, Shape{1, image.dim(0), image.dim(1), image.dim(2)});
  return Reshape(EmbedBatch(batch, normalize), Shape{config_.embed_dim});
}

Tensor FeatureExtractor::Logits(const Tensor& images) const {
  return Scale(Matmul(EmbedBatch(images, true), cls_w_), config_.logit_scale);
}

std::vector<Tensor> FeatureExtractor::Parameters() const {
  return {w1_, b1_, w2_, b2_, w3_, b3_, head_w_, head_b_, cls_w_};
}

void FeatureExtractor::SetTrainable(bool trainable) {
  for (Tensor& p : std::vector<Tensor>{w1_, b1_, w2_, b2_, w3_, b3_, head_w_, head_b_, cls_w_}) {
    p.set_requires_grad(trainable);
    if (!trainable) p.ZeroGrad();
  }
}

void FeatureExtractor::Save(const std::filesystem::path& path) const {
  const auto& c = config_;
  Tensor meta(Shape{9}, {static_cast<double>(c.channels), static_cast<double>(c.height),
                         static_cast<double>(c.width), static_cast<double>(c.conv1),
                         static_cast<double>(c.conv2), static_cast<double>(c.conv3),
                         static_cast<double>(c.embed_dim), static_cast<double>(c.num_classes),
                         c.logit_scale});
  SaveTensors(path, {{"meta.config", meta},
                     {"conv1.weight", w1_},
                     {"conv1.bias", b1_},
                     {"conv2.weight", w2_},
                     {"conv2.bias", b2_},
                     {"conv3.weight", w3_},
                     {"conv3.bias", b3_},
                     {"head.weight", head_w_},
                     {"head.bias", head_b_},
                     {"classifier.weight", cls_w_}});
}

FeatureExtractor FeatureExtractor::Load(const std::filesystem::path& path) {
  const NamedTensors t = LoadTensors(path);
  const auto meta = MetaValues(t, 9);
  ExtractorConfig c;
  c.channels = static_cast<std::size_t>(meta[0]);
  c.height = static_cast<std::size_t>(meta[1]);
  c.width = static_cast<std::size_t>(meta[2]);
  c.conv1 = static_cast<std::size_t>(meta[3]);
  c.conv2 = static_cast<std::size_t>(meta[4]);
  c.conv3 = static_cast<std::size_t>(meta[5]);
  c.embed_dim = static_cast<std::size_t>(meta[6]);
  c.num_classes = static_cast<std::size_t>(meta[7]);
  c.logit_scale = meta[8];
  FeatureExtractor m;
  m.config_ = c;
  const std::size_t flat = c.conv3 * (c.height / 8) * (c.width / 8);
  m.w1_ = Param(t, "conv1.weight", {c.conv1, c.channels, 3, 3});
  m.b1_ = Param(t, "conv1.bias", {c.conv1});
  m.w2_ = Param(t, "conv2.weight", {c.conv2, c.conv1, 3, 3});
  m.b2_ = Param(t, "conv2.bias", {c.conv2});
  m.w3_ = Param(t, "conv3.weight", {c.conv3, c.conv2, 3, 3});
  m.b3_ = Param(t, "conv3.bias", {c.conv3});
  m.head_w_ = Param(t, "head.weight", {flat, c.embed_dim});
  m.head_b_ = Param(t, "head.bias", {c.embed_dim});
  m.cls_w_ = Param(t, "classifier.weight", {c.embed_dim, c.num_classes});
  m.SetTrainable(false);
  return m;
}

RecoveryNet RecoveryNet::Create(const RecoveryConfig& config, std::uint64_t seed) {
  Require(config.width >= 1 && config.channels >= 1, ErrorCode::kInvalidArgument,
          "recovery: empty configuration");
  Rng rng(seed);
  RecoveryNet n;
  n.config_ = config;
  const std::size_t c = config.width, in = config.channels;
  n.e1_w_ = HeNormal({c, in, 3, 3}, in * 9, rng);
  n.e1_b_ = ZerosParam(c);
  n.e2_w_ = HeNormal({2 * c, c, 3, 3}, c * 9, rng);
  n.e2_b_ = ZerosParam(2 * c);
  n.d1_w_ = HeNormal({c, 2 * c, 3, 3}, 2 * c * 9, rng);
  n.d1_b_ = ZerosParam(c);
  n.d2_w_ = HeNormal({c, c, 3, 3}, c * 9, rng);
  n.d2_b_ = ZerosParam(c);
  // The output conv feeds a residual onto the input, so it starts small and
  // an untrained net is close to the identity.
  n.out_w_ = HeNormal({in, c, 3, 3}, c * 9, rng, 0.1);
  n.out_b_ = ZerosParam(in);
  return n;
}

Tensor RecoveryNet::Forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != config_.channels || images.dim(2) % 4 != 0 ||
      images.dim(3) % 4 != 0) {
    Fail(ErrorCode::kShapeMismatch,
         "recover: input " + ShapeString(images.shape()) +
             " must be (N," + std::to_string(config_.channels) + ",H,W) with H,W divisible by 4");
  }
  Tensor e1 = Relu(Conv2d(images, e1_w_, e1_b_, 1, 1));
  Tensor e2 = Relu(Conv2d(AvgPool2d(e1, 2), e2_w_, e2_b_, 1, 1));
  Tensor bottleneck = AvgPool2d(e2, 2);
  Tensor d1 = Relu(Conv2d(UpsampleNearest2d(bottleneck, 2), d1_w_, d1_b_, 1, 1));
  Tensor d2 = Relu(Conv2d(UpsampleNearest2d(d1, 2), d2_w_, d2_b_, 1, 1));
  // Predicts a correction to its input; the attacker starts from the
  // protected image rather than from nothing.
  return Add(images, Conv2d(Add(d2, e1), out_w_, out_b_, 1, 1));
}

std::vector<Tensor> RecoveryNet::Parameters() const {
  return {e1_w_, e1_b_, e2_w_, e2_b_, d1_w_, d1_b_, d2_w_, d2_b_, out_w_, out_b_};
}

void RecoveryNet::Save(const std::filesystem::path& path) const {
  Tensor meta(Shape{2}, {static_cast<double>(config_.channels),
                         static_cast<double>(config_.width)});
  SaveTensors(path, {{"meta.config", meta},
                     {"enc1.weight", e1_w_}, {"enc1.bias", e1_b_},
                     {"enc2.weight", e2_w_}, {"enc2.bias", e2_b_},
                     {"dec1.weight", d1_w_}, {"dec1.bias", d1_b_},
                     {"dec2.weight", d2_w_}, {"dec2.bias", d2_b_},
                     {"out.weight", out_w_}, {"out.bias", out_b_}});
}

RecoveryNet RecoveryNet::Load(const std::filesystem::path& path) {
  const NamedTensors t = LoadTensors(path);
  const auto meta = MetaValues(t, 2);
  RecoveryNet n;
  n.config_.channels = static_cast<std::size_t>(meta[0]);
  n.config_.width = static_cast<std::size_t>(meta[1]);
  const std::size_t c = n.config_.width, in = n.config_.channels;
  n.e1_w_ = Param(t, "enc1.weight", {c, in, 3, 3});
  n.e1_b_ = Param(t, "enc1.bias", {c});
  n.e2_w_ = Param(t, "enc2.weight", {2 * c, c, 3, 3});
  n.e2_b_ = Param(t, "enc2.bias", {2 * c});
  n.d1_w_ = Param(t, "dec1.weight", {c, 2 * c, 3, 3});
  n.d1_b_ = Param(t, "dec1.bias", {c});
  n.d2_w_ = Param(t, "dec2.weight", {c, c, 3, 3});
  n.d2_b_ = Param(t, "dec2.bias", {c});
  n.out_w_ = Param(t, "out.weight", {in, c, 3, 3});
  n.out_b_ = Param(t, "out.bias", {in});
  return n;
}

namespace {

std::vector<std::vector<std::size_t>> EpochBatches(std::size_t n, std::size_t batch_size,
                                                    Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.Shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<long>(start),
                         order.begin() + static_cast<long>(end));
  }
  return batches;
}

// Random translation (edge replicate) and brightness shift.
Tensor Augment(const Tensor& image, Rng& rng) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const long dx = static_cast<long>(rng.Below(5)) - 2;
  const long dy = static_cast<long>(rng.Below(5)) - 2;
  const double shift = rng.Uniform(-0.1, 0.1);
  std::vector<double> out(image.numel());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const long sy = std::clamp(static_cast<long>(y) - dy, 0L, static_cast<long>(h) - 1);
        const long sx = std::clamp(static_cast<long>(x) - dx, 0L, static_cast<long>(w) - 1);
        const double v = image[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
        out[(ch * h + y) * w + x] = std::clamp(v + shift, 0.0, 1.0);
      }
  return Tensor(image.shape(), std::move(out));
}

std::size_t CountCorrect(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.data().subspan(i * k, k);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++correct;
  }
  return correct;
}

}  // namespace

double ClassificationAccuracy(const FeatureExtractor& model,
                              std::span<const LabeledImage> images) {
  Require(!images.empty(), ErrorCode::kInvalidArgument, "accuracy: no images");
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t end = std::min(images.size(), start + kChunk);
    std::vector<Tensor> batch;
    std::vector<int> labels;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(images[i].image);
      labels.push_back(images[i].label);
    }
    correct += CountCorrect(model.Logits(StackImages(batch)), labels);
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

namespace {

double MeanCrossEntropy(const FeatureExtractor& model, std::span<const LabeledImage> images) {
  double sum = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t end = std::min(images.size(), start + kChunk);
    std::vector<Tensor> batch;
    std::vector<int> labels;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(images[i].image);
      labels.push_back(images[i].label);
    }
    sum += CrossEntropy(model.Logits(StackImages(batch)), labels).item() *
           static_cast<double>(end - start);
  }
  return sum / static_cast<double>(images.size());
}

}  // namespace

ExtractorTraining TrainExtractor(std::span<const LabeledImage> train,
                                 std::span<const LabeledImage> heldout,
                                 ExtractorConfig model_config, const TrainConfig& config) {
  std::map<int, std::size_t> views;
  for (const auto& item : train) {
    Require(item.label >= 0, ErrorCode::kInvalidArgument, "train_extractor: negative label");
    ++views[item.label];
  }
  Require(views.size() >= 2, ErrorCode::kInvalidArgument,
          "train_extractor: need at least 2 identities, got " + std::to_string(views.size()));
  for (const auto& [label, count] : views) {
    Require(count >= 2, ErrorCode::kInvalidArgument,
            "train_extractor: identity " + std::to_string(label) + " has only " +
                std::to_string(count) + " view(s)");
  }
  Require(config.epochs >= 1 && config.batch_size >= 1, ErrorCode::kInvalidArgument,
          "train_extractor: epochs and batch size must be positive");
  const auto& first = train.front().image;
  Require(first.rank() == 3, ErrorCode::kShapeMismatch, "train_extractor: images must be (C,H,W)");
  model_config.channels = first.dim(0);
  model_config.height = first.dim(1);
  model_config.width = first.dim(2);
  model_config.num_classes = static_cast<std::size_t>(views.rbegin()->first) + 1;

  Rng rng(config.seed);
  ExtractorTraining out{FeatureExtractor::Create(model_config, rng.NextU64()), {}, 0.0};
  out.model.SetTrainable(true);
  Optimizer opt(config.optimizer, out.model.Parameters());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.cosine_decay) {
      const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs);
      opt.set_learning_rate(config.optimizer.learning_rate * 0.5 *
                            (1.0 + std::cos(std::numbers::pi * progress)));
    }
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (const auto& idx : EpochBatches(train.size(), config.batch_size, rng)) {
      std::vector<Tensor> images;
      std::vector<int> labels;
      for (std::size_t i : idx) {
        images.push_back(config.augment ? Augment(train[i].image, rng) : train[i].image);
        labels.push_back(train[i].label);
      }
      opt.ZeroGrad();
      Tensor logits = out.model.Logits(StackImages(images));
      Tensor loss = CrossEntropy(logits, labels);
      Backward(loss);
      opt.Step();
      loss_sum += loss.item() * static_cast<double>(idx.size());
      correct += CountCorrect(logits, labels);
    }
    const double n = static_cast<double>(train.size());
    out.model.SetTrainable(false);
    const double eval_loss = MeanCrossEntropy(out.model, train);
    out.model.SetTrainable(true);
    out.log.push_back({epoch, loss_sum / n, static_cast<double>(correct) / n, eval_loss});
  }
  out.model.SetTrainable(false);
  if (!heldout.empty()) out.heldout_accuracy = ClassificationAccuracy(out.model, heldout);
  return out;
}

RecoveryTraining TrainRecovery(std::span<const RecoveryPair> pairs,
                               const RecoveryConfig& net_config, const TrainConfig& config) {
  Require(!pairs.empty(), ErrorCode::kInvalidArgument, "train_recovery: no training pairs");
  const Shape& shape = pairs.front().original.shape();
  for (const auto& p : pairs) {
    if (p.original.shape() != shape || p.protected_image.shape() != shape) {
      Fail(ErrorCode::kShapeMismatch, "train_recovery: pair shapes " +
                                          ShapeString(p.protected_image.shape()) + " / " +
                                          ShapeString(p.original.shape()) + " differ from " +
                                          ShapeString(shape));
    }
  }
  Require(config.epochs >= 1 && config.batch_size >= 1, ErrorCode::kInvalidArgument,
          "train_recovery: epochs and batch size must be positive");
  RecoveryConfig cfg = net_config;
  cfg.channels = shape.at(0);
  Rng rng(config.seed);
  RecoveryTraining out{RecoveryNet::Create(cfg, rng.NextU64()), {}};
  Optimizer opt(config.optimizer, out.net.Parameters());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (const auto& idx : EpochBatches(pairs.size(), config.batch_size, rng)) {
      std::vector<Tensor> inputs, targets;
      for (std::size_t i : idx) {
        inputs.push_back(pairs[i].protected_image);
        targets.push_back(pairs[i].original);
      }
      Tensor target = StackImages(targets);
      opt.ZeroGrad();
      Tensor loss = Scale(L1Distance(out.net.Forward(StackImages(inputs)), target),
                          1.0 / static_cast<double>(target.numel()));
      Backward(loss);
      opt.Step();
      loss_sum += loss.item() * static_cast<double>(idx.size());
    }
    out.log.push_back({epoch, loss_sum / static_cast<double>(pairs.size()), 0.0});
  }
  return out;
}

Tensor Recover(const RecoveryNet& net, const Tensor& protected_image) {
  Require(protected_image.rank() == 3, ErrorCode::kShapeMismatch,
          "recover: expected a (C,H,W) image, got " + ShapeString(protected_image.shape()));
  const Shape& s = protected_image.shape();
  Tensor batch(Shape{1, s[0], s[1], s[2]},
               {protected_image.data().begin(), protected_image.data().end()});
  Tensor raw = net.Forward(batch);
  std::vector<double> out(raw.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(raw[i], 0.0, 1.0);
  return Tensor(s, std::move(out));
}

}  // namespace fadekit
