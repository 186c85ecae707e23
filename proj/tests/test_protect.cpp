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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "fadekit/error.hpp"
#include "fadekit/metrics.hpp"
#include "fadekit/protect.hpp"
#include "gradcheck.hpp"

namespace fadekit {
namespace {

using testing::RandomTensor;

const Shape kImage{3, 32, 16};

const FeatureExtractor& TinyModel() {
  static const FeatureExtractor m = [] {
    ExtractorConfig c;
    c.num_classes = 4;
    return FeatureExtractor::Create(c, 21);
  }();
  return m;
}

Tensor TestImage(std::uint64_t seed) { return RandomTensor(kImage, seed, 0.05, 0.95); }

bool Same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

double MeanOf(const Tensor& t) {
  return std::accumulate(t.data().begin(), t.data().end(), 0.0) / static_cast<double>(t.numel());
}

TEST_CASE("noise target statistics") {
  const Tensor a = SampleNoiseTarget(kImage, 5);
  CHECK(Same(a, SampleNoiseTarget(kImage, 5)));
  CHECK_FALSE(Same(a, SampleNoiseTarget(kImage, 6)));
  const double mean = MeanOf(a);
  double ss = 0.0;
  for (double v : a.data()) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(a.numel() - 1));
  CHECK(std::abs(mean - 0.5) <= 0.02);
  CHECK(sd >= 0.2);
  CHECK(sd <= 0.26);
  for (double v : a.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("noise target is the clamped affine image of the raw draws") {
  const Tensor raw = SampleStandardNormal(kImage, 9);
  const Tensor eta = SampleNoiseTarget(kImage, 9);
  for (std::size_t i = 0; i < raw.numel(); ++i) {
    CHECK(eta[i] == std::clamp(0.5 + 0.25 * raw[i], 0.0, 1.0));
  }
}

TEST_CASE("raw noise passes the normality check") {
  int below = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const Tensor raw = SampleStandardNormal(kImage, static_cast<std::uint64_t>(t));
    REQUIRE(raw.numel() == 1536);
    below += AdStatistic(raw.data()) < 2.0 ? 1 : 0;
  }
  CHECK(static_cast<double>(below) / trials >= 0.99);
}

void CheckPartition(const MaskSchedule& s) {
  const std::size_t pixels = s.pixel_count();
  const std::size_t n = s.size();
  std::vector<int> hits(pixels, 0);
  for (std::size_t j = 0; j < n; ++j) {
    const auto rep = s.replaced_pixels(j);
    CHECK((rep.size() == pixels / n || rep.size() == (pixels + n - 1) / n));
    for (std::size_t p : rep) ++hits[p];
    const Tensor& m = s.mask(j);
    std::size_t zeros = 0;
    for (std::size_t ch = 0; ch < m.dim(0); ++ch) {
      for (std::size_t p = 0; p < pixels; ++p) {
        const double v = m[ch * pixels + p];
        CHECK((v == 0.0 || v == 1.0));
        zeros += v == 0.0 ? 1 : 0;
      }
    }
    CHECK(zeros == rep.size() * m.dim(0));
  }
  for (int h : hits) REQUIRE(h == 1);
}

TEST_CASE("mask schedules partition the pixels") {
  const MaskSchedule s = MaskSchedule::Generate(kImage, 5, 3);
  CHECK(s.size() == 5);
  CHECK(s.pixel_count() == 512);
  std::vector<std::size_t> counts;
  for (std::size_t j = 0; j < 5; ++j) counts.push_back(s.replaced_pixels(j).size());
  std::sort(counts.begin(), counts.end());
  CHECK(counts == std::vector<std::size_t>{102, 102, 102, 103, 103});
  CheckPartition(s);

  // Summed replaced indicators form the all-ones image.
  std::vector<double> total(s.mask(0).numel(), 0.0);
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += 1.0 - s.mask(j)[i];
  }
  for (double v : total) CHECK(v == 1.0);
}

TEST_CASE("a single mask replaces every pixel") {
  const MaskSchedule s = MaskSchedule::Generate(kImage, 1, 0);
  for (double v : s.mask(0).data()) CHECK(v == 0.0);
}

TEST_CASE("mask schedule seeds and bounds") {
  const MaskSchedule a = MaskSchedule::Generate(kImage, 5, 1);
  const MaskSchedule b = MaskSchedule::Generate(kImage, 5, 1);
  const MaskSchedule c = MaskSchedule::Generate(kImage, 5, 2);
  CHECK(Same(a.mask(0), b.mask(0)));
  CHECK_FALSE(Same(a.mask(0), c.mask(0)));
  CheckPartition(MaskSchedule::Generate(Shape{3, 4, 4}, 16, 9));
  CHECK_THROWS_AS(MaskSchedule::Generate(kImage, 0, 0), Error);
  CHECK_THROWS_AS(MaskSchedule::Generate(Shape{3, 4, 4}, 17, 0), Error);
  CHECK_THROWS_AS(MaskSchedule::Generate(Shape{4, 4}, 2, 0), Error);
}

TEST_CASE("partial replacement with full and empty masks") {
  const Tensor x = TestImage(1);
  const Tensor noise = TestImage(2);
  MaskSchedule all = MaskSchedule::Generate(kImage, 1, 0);
  CHECK(Same(PartialReplacementOp(x, all, noise), noise));

  // With one mask per pixel a replacement touches a single pixel in each channel.
  MaskSchedule many = MaskSchedule::Generate(kImage, 512, 0);
  const Tensor once = PartialReplacementOp(x, many, noise);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) changed += once[i] != x[i] ? 1 : 0;
  CHECK(changed <= 3);
}

TEST_CASE("one replacement cycle writes each pixel from its own step") {
  const Tensor x = TestImage(3);
  MaskSchedule s = MaskSchedule::Generate(kImage, 5, 4);
  CoverageTracker cov(s.pixel_count());
  std::vector<Tensor> noise;
  Tensor cur = x;
  for (int j = 0; j < 5; ++j) {
    noise.push_back(SampleNoiseTarget(kImage, 100 + j));
    CHECK(s.cursor() == static_cast<std::size_t>(j));
    cur = PartialReplacementOp(cur, s, noise.back(), &cov);
  }
  CHECK(s.cursor() == 0);
  CHECK(cov.Fraction() == 1.0);
  const std::size_t pixels = s.pixel_count();
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t p : s.replaced_pixels(j)) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        REQUIRE(cur[ch * pixels + p] == noise[j][ch * pixels + p]);
      }
    }
  }
}

TEST_CASE("constraint step stalls at the original image") {
  const Tensor x = TestImage(4);
  const Tensor target = TinyModel().Embed(x);
  const ConstraintStep s = ConstraintOp(x, target, TinyModel(), Tensor::Zeros(kImage), 0.6, 0.01);
  CHECK(s.stalled);
  CHECK(s.loss_before == 0.0);
  CHECK(Same(s.image, x));
}

Tensor LossGradient(const Tensor& x_p, const Tensor& target) {
  Tensor leaf = x_p.Detach();
  leaf.set_requires_grad(true);
  Backward(SqL2Distance(TinyModel().Embed(leaf), target));
  return Tensor(x_p.shape(), {leaf.grad().begin(), leaf.grad().end()});
}

TEST_CASE("momentum-free constraint step uses the normalized gradient") {
  const Tensor x = TestImage(5);
  const Tensor x_p = TestImage(6);
  const Tensor target = TinyModel().Embed(x);
  const Tensor g = LossGradient(x_p, target);
  double n2 = 0.0;
  for (double v : g.data()) n2 += v * v;
  const ConstraintStep s =
      ConstraintOp(x_p, target, TinyModel(), RandomTensor(kImage, 7), 0.0, 0.01);
  CHECK_FALSE(s.stalled);
  for (std::size_t i = 0; i < g.numel(); ++i) {
    REQUIRE(s.momentum[i] == doctest::Approx(g[i] / n2).epsilon(1e-12));
    REQUIRE(s.image[i] == std::clamp(x_p[i] - 0.01 * s.momentum[i], 0.0, 1.0));
  }

  // Exponent 1 divides by the plain norm instead.
  const ConstraintStep u =
      ConstraintOp(x_p, target, TinyModel(), Tensor::Zeros(kImage), 0.0, 0.01, 1.0);
  for (std::size_t i = 0; i < g.numel(); ++i) {
    REQUIRE(u.momentum[i] == doctest::Approx(g[i] / std::sqrt(n2)).epsilon(1e-12));
  }
}

TEST_CASE("momentum accumulates with decay alpha") {
  const Tensor x = TestImage(8);
  const Tensor x_p = TestImage(9);
  const Tensor target = TinyModel().Embed(x);
  const Tensor prev = RandomTensor(kImage, 10);
  const ConstraintStep free = ConstraintOp(x_p, target, TinyModel(), prev, 0.0, 0.01);
  const ConstraintStep mom = ConstraintOp(x_p, target, TinyModel(), prev, 0.6, 0.01);
  for (std::size_t i = 0; i < prev.numel(); ++i) {
    REQUIRE(mom.momentum[i] == doctest::Approx(0.6 * prev[i] + free.momentum[i]).epsilon(1e-12));
  }
}

TEST_CASE("a constraint step decreases the feature loss") {
  // The untrained net maps every input close to the same embedding, so
  // replaced images sit within 1e-3 of their original and a beta-sized
  // first-order step would overshoot. A far target keeps the step in its
  // linear regime, where the decrease is beta to first order.
  const Tensor x = TestImage(11);
  std::vector<double> axis(TinyModel().config().embed_dim, 0.0);
  axis[5] = 1.0;
  const Tensor target(Shape{axis.size()}, axis);
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    // A replaced version of x, as the loop would produce.
    MaskSchedule s = MaskSchedule::Generate(kImage, 5, seed);
    const Tensor x_p = PartialReplacementOp(x, s, SampleNoiseTarget(kImage, seed));
    const ConstraintStep step =
        ConstraintOp(x_p, target, TinyModel(), Tensor::Zeros(kImage), 0.0, 0.01);
    const double after = FeatureLoss(TinyModel(), step.image, target);
    CAPTURE(seed);
    CHECK((after < step.loss_before || step.stalled));
    CHECK(step.loss_before - after == doctest::Approx(0.01).epsilon(0.2));
    decreased += after < step.loss_before ? 1 : 0;
  }
  CHECK(decreased == 5);
}

TEST_CASE("constraint output stays in the pixel domain") {
  const Tensor x = TestImage(12);
  const Tensor x_p = TestImage(13);
  const ConstraintStep s =
      ConstraintOp(x_p, TinyModel().Embed(x), TinyModel(), Tensor::Zeros(kImage), 0.0, 1e3);
  for (double v : s.image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

ProtectConfig ShortConfig() {
  ProtectConfig c;
  c.T = 30;
  return c;
}

void CheckTraceContracts(const ProtectionResult& r, const ProtectConfig& c) {
  REQUIRE(r.trace.size() == static_cast<std::size_t>(c.T + c.init_steps));
  // Initialization: CO then PRO per step.
  for (int t = 0; t < c.init_steps; ++t) {
    CHECK(r.trace[2 * t].op == StepOp::kConstraint);
    CHECK(r.trace[2 * t + 1].op == StepOp::kReplacement);
    CHECK(r.trace[2 * t].step == t);
    CHECK(r.trace[2 * t + 1].step == t);
  }
  CHECK(r.trace[2 * c.init_steps - 1].coverage == 1.0);
  // Main stage: replacement exactly when the recorded loss is under epsilon.
  const std::size_t main_begin = 2 * static_cast<std::size_t>(c.init_steps);
  const std::size_t final_begin = r.trace.size() - static_cast<std::size_t>(c.final_co_only_steps);
  for (std::size_t i = main_begin; i < final_begin; ++i) {
    CAPTURE(i);
    CHECK((r.trace[i].op == StepOp::kReplacement) == (r.trace[i].feature_loss < c.epsilon));
  }
  for (std::size_t i = final_begin; i < r.trace.size(); ++i) {
    CHECK(r.trace[i].op == StepOp::kConstraint);
  }
  for (std::size_t i = 1; i < r.trace.size(); ++i) {
    CHECK(r.trace[i].coverage >= r.trace[i - 1].coverage);
  }
  for (double v : r.protected_image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(r.constraint_met_at_end == (r.final_loss <= c.epsilon));
}

TEST_CASE("pixelfade trace contracts") {
  const ProtectConfig c = ShortConfig();
  const ProtectionResult r = PixelFadeProtect(TestImage(14), TinyModel(), c);
  CheckTraceContracts(r, c);
  CHECK(r.trace.front().stalled);
}

TEST_CASE("pixelfade is deterministic under its seeds") {
  const ProtectConfig c = ShortConfig();
  const Tensor x = TestImage(15);
  const ProtectionResult a = PixelFadeProtect(x, TinyModel(), c);
  const ProtectionResult b = PixelFadeProtect(x, TinyModel(), c);
  CHECK(Same(a.protected_image, b.protected_image));
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].feature_loss == b.trace[i].feature_loss);
  }
  ProtectConfig other = c;
  other.mask_seed = 1;
  CHECK_FALSE(Same(a.protected_image, PixelFadeProtect(x, TinyModel(), other).protected_image));
}

TEST_CASE("a huge epsilon makes every main step a replacement") {
  ProtectConfig c = ShortConfig();
  c.epsilon = 1e9;
  const ProtectionResult r = PixelFadeProtect(TestImage(16), TinyModel(), c);
  CheckTraceContracts(r, c);
  const std::size_t main_begin = 2 * static_cast<std::size_t>(c.init_steps);
  const std::size_t final_begin = r.trace.size() - static_cast<std::size_t>(c.final_co_only_steps);
  for (std::size_t i = main_begin; i < final_begin; ++i) {
    CHECK(r.trace[i].op == StepOp::kReplacement);
  }
  CHECK(r.constraint_met_at_end);
}

TEST_CASE("resampled noise changes the result") {
  ProtectConfig c = ShortConfig();
  c.epsilon = 1e9;
  const Tensor x = TestImage(17);
  const ProtectionResult fixed = PixelFadeProtect(x, TinyModel(), c);
  c.resample_noise = true;
  const ProtectionResult fresh = PixelFadeProtect(x, TinyModel(), c);
  CHECK_FALSE(Same(fixed.protected_image, fresh.protected_image));
}

TEST_CASE("noise weight one is pixelfade") {
  const ProtectConfig c = ShortConfig();
  const Tensor x = TestImage(18);
  CHECK(Same(NoiseWeightProtect(x, TinyModel(), 1.0, c).protected_image,
             PixelFadeProtect(x, TinyModel(), c).protected_image));
  CHECK_THROWS_AS(NoiseWeightProtect(x, TinyModel(), 1.5, c), Error);
}

TEST_CASE("objective variants follow the same schedule") {
  const ProtectConfig c = ShortConfig();
  const Tensor x = TestImage(19);
  for (ObjectiveTarget t :
       {ObjectiveTarget::kOtherIdentity, ObjectiveTarget::kZero, ObjectiveTarget::kContrastive}) {
    const ProtectionResult r = ObjectiveVariantProtect(x, TinyModel(), t, c, TestImage(20));
    CheckTraceContracts(r, c);
  }
  CHECK_THROWS_AS(ObjectiveVariantProtect(x, TinyModel(), ObjectiveTarget::kOtherIdentity, c),
                  Error);
  CHECK_THROWS_AS(ObjectiveVariantProtect(x, TinyModel(), ObjectiveTarget::kOtherIdentity, c,
                                          Tensor::Zeros(Shape{3, 8, 8})),
                  Error);
}

TEST_CASE("perturb and joint l1 variants") {
  const ProtectConfig c = ShortConfig();
  const Tensor x = TestImage(21);
  const ProtectionResult p = PerturbProtect(x, TinyModel(), 0.1, c);
  CHECK(p.trace.size() == static_cast<std::size_t>(c.T + c.init_steps));
  const ProtectionResult j = JointL1Protect(x, TinyModel(), 1.0, c);
  CHECK(j.trace.size() == static_cast<std::size_t>(c.T));
  for (const auto& e : j.trace) CHECK(e.op == StepOp::kConstraint);
  CHECK_FALSE(Same(j.protected_image, x));
  CHECK_THROWS_AS(PerturbProtect(x, TinyModel(), 0.0, c), Error);
  CHECK_THROWS_AS(JointL1Protect(x, TinyModel(), -1.0, c), Error);
}

TEST_CASE("protect config validation") {
  const Tensor x = TestImage(22);
  auto rejects = [&](auto mutate) {
    ProtectConfig c;
    mutate(c);
    CHECK_THROWS_AS(PixelFadeProtect(x, TinyModel(), c), Error);
  };
  rejects([](ProtectConfig& c) { c.T = 10; });
  rejects([](ProtectConfig& c) { c.I = 0; });
  rejects([](ProtectConfig& c) { c.epsilon = 0.0; });
  rejects([](ProtectConfig& c) { c.beta = -1.0; });
  rejects([](ProtectConfig& c) { c.alpha = 1.0; });
  rejects([](ProtectConfig& c) { c.grad_norm_exponent = 0.0; });
  CHECK_THROWS_AS(PixelFadeProtect(Tensor::Zeros(Shape{3, 16, 16}), TinyModel(), ProtectConfig{}),
                  Error);
  CHECK_THROWS_AS(PixelFadeProtect(Tensor::Full(kImage, 1.5), TinyModel(), ProtectConfig{}), Error);
}

TEST_CASE("mosaic of block one is the identity") {
  const Tensor x = TestImage(23);
  CHECK(Same(Mosaic(x, 1), x));
}

TEST_CASE("mosaic averages whole blocks") {
  const Tensor x = TestImage(24);
  const Tensor m = Mosaic(x, 4);
  for (std::size_t by = 0; by < 32; by += 4) {
    for (std::size_t bx = 0; bx < 16; bx += 4) {
      double s = 0.0;
      for (std::size_t y = by; y < by + 4; ++y)
        for (std::size_t xi = bx; xi < bx + 4; ++xi) s += x[y * 16 + xi];
      CHECK(m[by * 16 + bx] == doctest::Approx(s / 16.0).epsilon(1e-12));
      CHECK(m[(by + 3) * 16 + bx + 3] == m[by * 16 + bx]);
    }
  }
  CHECK(std::abs(MeanOf(m) - MeanOf(x)) < 1e-12);
}

TEST_CASE("gaussian blur preserves the mean") {
  for (double radius : {0.5, 1.0, 3.0, 7.5}) {
    const Tensor x = TestImage(25);
    CHECK(std::abs(MeanOf(GaussianBlur(x, radius)) - MeanOf(x)) < 1e-6);
  }
}

TEST_CASE("gaussian blur keeps constants and smooths noise") {
  const Tensor flat = Tensor::Full(kImage, 0.37);
  const Tensor blurred = GaussianBlur(flat, 3.0);
  for (double v : blurred.data()) CHECK(std::abs(v - 0.37) < 1e-12);
  const Tensor x = TestImage(26);
  CHECK(Psnr(x, GaussianBlur(x, 3.0)) < 30.0);
}

TEST_CASE("baseline size limits") {
  const Tensor x = TestImage(27);
  CHECK_THROWS_AS(GaussianBlur(x, 17.0), Error);
  CHECK_THROWS_AS(GaussianBlur(x, 0.0), Error);
  CHECK_THROWS_AS(Mosaic(x, 17), Error);
  CHECK_THROWS_AS(Mosaic(x, 0), Error);
  CHECK_THROWS_AS(RandomPerturb(x, -0.1, 0), Error);
}

TEST_CASE("random perturbation is seeded and clamped") {
  const Tensor x = TestImage(28);
  const Tensor a = RandomPerturb(x, 0.5, 3);
  CHECK(Same(a, RandomPerturb(x, 0.5, 3)));
  CHECK_FALSE(Same(a, RandomPerturb(x, 0.5, 4)));
  for (double v : a.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(Same(RandomPerturb(x, 0.0, 3), x));
}

}  // namespace
}  // namespace fadekit
