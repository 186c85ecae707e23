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

#ifndef FADEKIT_SYNTHDATA_HPP_
#define FADEKIT_SYNTHDATA_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fadekit/tensor.hpp"

namespace fadekit {

using Rgb = std::array<double, 3>;

/// Appearance of one synthetic pedestrian.
struct IdentitySpec {
  int id = 0;
  Rgb torso_color{};
  Rgb leg_color{};
  Rgb head_tone{};
  /// Head, torso and leg heights as fractions of the frame height.
  std::array<double, 3> body_proportions{};
  /// 1 horizontal stripes, 2 vertical stripes, 3 checker, 4 diagonal.
  int texture_kind = 1;
  /// Stripe period in pixels; kept small so blur and mosaic erase it.
  int texture_period = 2;
  std::uint64_t texture_seed = 0;
};

struct Jitter {
  double brightness = 0.0;
  int dx = 0;
  int dy = 0;
  double noise_sigma = 0.0;
};

struct ViewRender {
  int identity_id = 0;
  int camera_id = 0;
  int view_index = 0;
  Tensor image;  // (3,H,W), values in [0,1] on the 8-bit grid
  Jitter jitter;

  /// Stable file stem, e.g. "id007_v03_c2".
  std::string Name() const;
};

struct DatasetConfig {
  int n_ids = 32;
  int views_per_id = 8;
  std::size_t height = 32;
  std::size_t width = 16;
  int query_per_id = 1;
  int gallery_per_id = 1;
  int n_cameras = 6;
  /// When set, the first half of the identities only appear in `train` and
  /// the rest only in query/gallery.
  bool disjoint_train_identities = false;
  std::uint64_t seed = 7;
};

struct DatasetSplits {
  std::vector<IdentitySpec> identities;
  std::vector<ViewRender> train;
  std::vector<ViewRender> query;
  std::vector<ViewRender> gallery;
  bool query_gallery_disjoint = true;
  bool train_identities_disjoint = false;
};

/// Deterministic procedural dataset. Renders are quantized to 8 bits at
/// generation so the in-memory and on-disk images agree exactly.
DatasetSplits GenDataset(const DatasetConfig& config);

IdentitySpec SampleIdentity(int id, std::uint64_t seed);
Tensor RenderView(const IdentitySpec& identity, int camera_id, const Jitter& jitter,
                  std::size_t height, std::size_t width, std::uint64_t noise_seed);

/// Rounds every value to the nearest multiple of 1/255.
Tensor QuantizeToByteGrid(const Tensor& image);

/// Binary P6 pixmap, maxval 255. Values are clamped to [0,1] and rounded.
void WriteImage(const std::filesystem::path& path, const Tensor& image);
Tensor ReadImage(const std::filesystem::path& path);

/// Writes every render as <dir>/<split>/<name>.ppm plus <dir>/manifest.jsonl
/// with one record per render (split, identity, camera, view, path).
void WriteDataset(const std::filesystem::path& dir, const DatasetSplits& splits);
/// Reads back what WriteDataset produced. Identity specs are not persisted.
DatasetSplits ReadDataset(const std::filesystem::path& dir);

}  // namespace fadekit

#endif  // FADEKIT_SYNTHDATA_HPP_
