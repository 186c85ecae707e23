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

#ifndef FADEKIT_METRICS_HPP_
#define FADEKIT_METRICS_HPP_

#include <cstddef>
#include <span>
#include <vector>

#include "fadekit/tensor.hpp"

namespace fadekit {

/// Peak 1.0. Identical images return +infinity.
double Psnr(const Tensor& reference, const Tensor& candidate);

/// Mean local SSIM over every `window` x `window` uniform window (stride 1),
/// computed per channel of a (C,H,W) image and averaged. K1=0.01, K2=0.03,
/// L=1, population (co)variances.
double Ssim(const Tensor& reference, const Tensor& candidate, std::size_t window = 8);

/// Standard normal CDF through std::erfc (absolute error well below 1e-7).
double NormalCdf(double z);

/// Anderson-Darling A^2 against a normal with mean and variance estimated from
/// the samples, times the small-sample factor (1 + 0.75/n + 2.25/n^2).
/// Lower means closer to normal. Requires n >= 8 and nonzero variance.
double AdStatistic(std::span<const double> samples);

/// Per-query gallery rankings plus relevance flags indexed by gallery position.
struct RankedRetrieval {
  std::vector<std::vector<std::size_t>> rankings;
  std::vector<std::vector<bool>> relevant;

  std::size_t gallery_size() const { return relevant.empty() ? 0 : relevant.front().size(); }
  /// Checks that rankings are permutations and every query has a match.
  void Validate() const;
};

/// Ranks gallery rows by descending dot product with each query row
/// (cosine similarity for unit embeddings). Ties break by gallery index.
RankedRetrieval RankBySimilarity(const Tensor& query_embeddings,
                                 const Tensor& gallery_embeddings,
                                 std::span<const int> query_ids,
                                 std::span<const int> gallery_ids);

double CmcRankK(const RankedRetrieval& retrieval, std::size_t k);
double MeanAp(const RankedRetrieval& retrieval);
/// Mean over queries of |relevant| / (1-based rank of the last relevant item).
double MInp(const RankedRetrieval& retrieval);

}  // namespace fadekit

#endif  // FADEKIT_METRICS_HPP_
