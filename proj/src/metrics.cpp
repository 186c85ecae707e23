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

#include "fadekit/metrics.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "fadekit/error.hpp"

namespace fadekit {

namespace {

void RequirePair(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    Fail(ErrorCode::kShapeMismatch, std::string(op) + ": shape mismatch " +
                                        ShapeString(a.shape()) + " vs " +
                                        ShapeString(b.shape()));
  }
  Require(a.numel() > 0, ErrorCode::kShapeMismatch, std::string(op) + ": empty images");
}

}  // namespace

double Psnr(const Tensor& reference, const Tensor& candidate) {
  RequirePair("psnr", reference, candidate);
  double sse = 0.0;
  for (std::size_t i = 0; i < reference.numel(); ++i) {
    const double d = reference[i] - candidate[i];
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(reference.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double Ssim(const Tensor& reference, const Tensor& candidate, std::size_t window) {
  RequirePair("ssim", reference, candidate);
  Require(reference.rank() == 3, ErrorCode::kShapeMismatch,
          "ssim: expected (C,H,W), got " + ShapeString(reference.shape()));
  const std::size_t c = reference.dim(0), h = reference.dim(1), w = reference.dim(2);
  Require(window >= 1 && h >= window && w >= window, ErrorCode::kShapeMismatch,
          "ssim: image " + ShapeString(reference.shape()) + " smaller than " +
              std::to_string(window) + "x" + std::to_string(window) + " window");
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  const double inv = 1.0 / static_cast<double>(window * window);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* a = reference.data().data() + ch * h * w;
    const double* b = candidate.data().data() + ch * h * w;
    for (std::size_t y = 0; y + window <= h; ++y)
      for (std::size_t x = 0; x + window <= w; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const double va = a[(y + dy) * w + x + dx];
            const double vb = b[(y + dy) * w + x + dx];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        const double ma = sa * inv, mb = sb * inv;
        const double va = saa * inv - ma * ma;
        const double vb = sbb * inv - mb * mb;
        const double cov = sab * inv - ma * mb;
        total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
                 ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

double NormalCdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double AdStatistic(std::span<const double> samples) {
  const std::size_t n = samples.size();
  Require(n >= 8, ErrorCode::kInvalidArgument,
          "ad_statistic: need at least 8 samples, got " + std::to_string(n));
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : samples) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  Require(sd > 0.0 && std::isfinite(sd), ErrorCode::kNumeric, "ad_statistic: zero variance");

  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = (samples[i] - mean) / sd;
  std::sort(z.begin(), z.end());
  // ln(Phi(z)) and ln(1 - Phi(z)) are both taken from erfc directly so the
  // upper tail keeps precision; DBL_MIN guards the log at extreme |z|.
  auto log_cdf = [](double v) { return std::log(std::max(DBL_MIN, NormalCdf(v))); };
  auto log_sf = [](double v) {
    return std::log(std::max(DBL_MIN, 0.5 * std::erfc(v / std::numbers::sqrt2)));
  };
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double weight = 2.0 * static_cast<double>(i + 1) - 1.0;
    s += weight * (log_cdf(z[i]) + log_sf(z[n - 1 - i]));
  }
  const double nd = static_cast<double>(n);
  const double a2 = -nd - s / nd;
  return a2 * (1.0 + 0.75 / nd + 2.25 / (nd * nd));
}

void RankedRetrieval::Validate() const {
  Require(rankings.size() == relevant.size() && !rankings.empty(), ErrorCode::kInvalidArgument,
          "retrieval: rankings and relevance must be non-empty and aligned");
  const std::size_t g = gallery_size();
  Require(g > 0, ErrorCode::kInvalidArgument, "retrieval: empty gallery");
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    Require(rankings[q].size() == g && relevant[q].size() == g, ErrorCode::kInvalidArgument,
            "retrieval: query " + std::to_string(q) + " ranking has wrong length");
    std::vector<bool> seen(g, false);
    for (std::size_t idx : rankings[q]) {
      Require(idx < g && !seen[idx], ErrorCode::kInvalidArgument,
              "retrieval: query " + std::to_string(q) + " ranking is not a permutation");
      seen[idx] = true;
    }
    Require(std::find(relevant[q].begin(), relevant[q].end(), true) != relevant[q].end(),
            ErrorCode::kInvalidArgument,
            "retrieval: query " + std::to_string(q) + " has no relevant gallery item");
  }
}

RankedRetrieval RankBySimilarity(const Tensor& query_embeddings,
                                 const Tensor& gallery_embeddings,
                                 std::span<const int> query_ids,
                                 std::span<const int> gallery_ids) {
  Require(query_embeddings.rank() == 2 && gallery_embeddings.rank() == 2 &&
              query_embeddings.dim(1) == gallery_embeddings.dim(1),
          ErrorCode::kShapeMismatch,
          "rank: embedding shapes " + ShapeString(query_embeddings.shape()) + " and " +
              ShapeString(gallery_embeddings.shape()) + " are incompatible");
  const std::size_t nq = query_embeddings.dim(0), ng = gallery_embeddings.dim(0);
  const std::size_t d = query_embeddings.dim(1);
  Require(query_ids.size() == nq && gallery_ids.size() == ng, ErrorCode::kShapeMismatch,
          "rank: identity labels do not match embedding counts");
  RankedRetrieval out;
  std::vector<double> sim(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t g = 0; g < ng; ++g) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        s += query_embeddings[q * d + k] * gallery_embeddings[g * d + k];
      }
      sim[g] = s;
    }
    std::vector<std::size_t> order(ng);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&sim](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    std::vector<bool> rel(ng);
    for (std::size_t g = 0; g < ng; ++g) rel[g] = gallery_ids[g] == query_ids[q];
    out.rankings.push_back(std::move(order));
    out.relevant.push_back(std::move(rel));
  }
  out.Validate();
  return out;
}

double CmcRankK(const RankedRetrieval& retrieval, std::size_t k) {
  retrieval.Validate();
  Require(k >= 1 && k <= retrieval.gallery_size(), ErrorCode::kInvalidArgument,
          "cmc: k=" + std::to_string(k) + " outside [1, " +
              std::to_string(retrieval.gallery_size()) + "]");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < retrieval.rankings.size(); ++q) {
    for (std::size_t pos = 0; pos < k; ++pos) {
      if (retrieval.relevant[q][retrieval.rankings[q][pos]]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(retrieval.rankings.size());
}

double MeanAp(const RankedRetrieval& retrieval) {
  retrieval.Validate();
  double total = 0.0;
  for (std::size_t q = 0; q < retrieval.rankings.size(); ++q) {
    std::size_t found = 0;
    double precision_sum = 0.0;
    for (std::size_t pos = 0; pos < retrieval.rankings[q].size(); ++pos) {
      if (retrieval.relevant[q][retrieval.rankings[q][pos]]) {
        ++found;
        precision_sum += static_cast<double>(found) / static_cast<double>(pos + 1);
      }
    }
    total += precision_sum / static_cast<double>(found);
  }
  return total / static_cast<double>(retrieval.rankings.size());
}

double MInp(const RankedRetrieval& retrieval) {
  retrieval.Validate();
  double total = 0.0;
  for (std::size_t q = 0; q < retrieval.rankings.size(); ++q) {
    std::size_t found = 0, hardest = 0;
    for (std::size_t pos = 0; pos < retrieval.rankings[q].size(); ++pos) {
      if (retrieval.relevant[q][retrieval.rankings[q][pos]]) {
        ++found;
        hardest = pos + 1;
      }
    }
    total += static_cast<double>(found) / static_cast<double>(hardest);
  }
  return total / static_cast<double>(retrieval.rankings.size());
}

}  // namespace fadekit
