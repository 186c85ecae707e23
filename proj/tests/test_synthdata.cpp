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
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"
#include "fadekit/error.hpp"
#include "fadekit/synthdata.hpp"
#include "gradcheck.hpp"
#include "tempdir.hpp"

namespace fadekit {
namespace {

using testing::TempDir;

DatasetConfig SmallConfig() {
  DatasetConfig c;
  c.n_ids = 8;
  c.views_per_id = 4;
  return c;
}

bool SameImage(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void CheckSameSplit(const std::vector<ViewRender>& a, const std::vector<ViewRender>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].Name() == b[i].Name());
    CHECK(SameImage(a[i].image, b[i].image));
  }
}

TEST_CASE("dataset generation is deterministic") {
  const DatasetConfig c;  // 32 ids, 8 views, 32x16, seed 7
  const DatasetSplits a = GenDataset(c);
  const DatasetSplits b = GenDataset(c);
  CheckSameSplit(a.train, b.train);
  CheckSameSplit(a.query, b.query);
  CheckSameSplit(a.gallery, b.gallery);
  DatasetConfig other = c;
  other.seed = 8;
  CHECK_FALSE(SameImage(GenDataset(other).train.front().image, a.train.front().image));
}

TEST_CASE("default dataset shape and split sizes") {
  const DatasetSplits d = GenDataset(DatasetConfig{});
  CHECK(d.identities.size() == 32);
  CHECK(d.train.size() == 32 * 6);
  CHECK(d.query.size() == 32);
  CHECK(d.gallery.size() == 32);
  for (const auto& v : d.train) CHECK(v.image.shape() == Shape{3, 32, 16});
}

TEST_CASE("renders stay in range and on the byte grid") {
  const DatasetSplits d = GenDataset(DatasetConfig{});
  for (const auto* split : {&d.train, &d.query, &d.gallery}) {
    for (const auto& v : *split) {
      for (double x : v.image.data()) {
        REQUIRE(x >= 0.0);
        REQUIRE(x <= 1.0);
        REQUIRE(std::abs(x * 255.0 - std::round(x * 255.0)) < 1e-9);
      }
    }
  }
}

TEST_CASE("every identity has query and gallery renders that differ") {
  const DatasetSplits d = GenDataset(DatasetConfig{});
  std::set<int> q, g;
  for (const auto& v : d.query) q.insert(v.identity_id);
  for (const auto& v : d.gallery) g.insert(v.identity_id);
  CHECK(q.size() == 32);
  CHECK(q == g);
  std::set<std::string> names;
  for (const auto& v : d.query) names.insert(v.Name());
  for (const auto& v : d.gallery) CHECK(names.count(v.Name()) == 0);
  CHECK(d.query_gallery_disjoint);
}

TEST_CASE("disjoint training identities") {
  DatasetConfig c = SmallConfig();
  c.disjoint_train_identities = true;
  const DatasetSplits d = GenDataset(c);
  std::set<int> train_ids, eval_ids;
  for (const auto& v : d.train) train_ids.insert(v.identity_id);
  for (const auto& v : d.query) eval_ids.insert(v.identity_id);
  for (int id : train_ids) CHECK(eval_ids.count(id) == 0);
  CHECK(d.train_identities_disjoint);
}

TEST_CASE("identity specs satisfy their invariants") {
  for (int id = 0; id < 64; ++id) {
    const IdentitySpec s = SampleIdentity(id, 7);
    for (const Rgb* c : {&s.torso_color, &s.leg_color, &s.head_tone}) {
      for (double v : *c) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
    double total = 0.0;
    for (double p : s.body_proportions) {
      CHECK(p > 0.0);
      total += p;
    }
    CHECK(total <= 1.2);
  }
}

// Mean absolute difference of per-channel 16-bin histograms.
double HistogramDistance(const Tensor& a, const Tensor& b) {
  const std::size_t plane = a.dim(1) * a.dim(2);
  double dist = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::array<double, 16> ha{}, hb{};
    for (std::size_t i = 0; i < plane; ++i) {
      ha[std::min<std::size_t>(15, static_cast<std::size_t>(a[c * plane + i] * 16))] += 1.0;
      hb[std::min<std::size_t>(15, static_cast<std::size_t>(b[c * plane + i] * 16))] += 1.0;
    }
    for (std::size_t k = 0; k < 16; ++k) dist += std::abs(ha[k] - hb[k]) / plane;
  }
  return dist / 3.0;
}

TEST_CASE("renders of one identity are closer in color histogram") {
  const DatasetSplits d = GenDataset(DatasetConfig{});
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  const auto& v = d.train;
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = i + 1; j < v.size(); ++j) {
      const double h = HistogramDistance(v[i].image, v[j].image);
      if (v[i].identity_id == v[j].identity_id) {
        intra += h;
        ++n_intra;
      } else {
        inter += h;
        ++n_inter;
      }
    }
  }
  CHECK(intra / n_intra < inter / n_inter);
}

TEST_CASE("generation preconditions") {
  DatasetConfig c;
  c.n_ids = 1;
  CHECK_THROWS_AS(GenDataset(c), Error);
  c = DatasetConfig{};
  c.views_per_id = 1;
  CHECK_THROWS_AS(GenDataset(c), Error);
  c = DatasetConfig{};
  c.views_per_id = 2;  // no view left for training
  c.query_per_id = 1;
  c.gallery_per_id = 2;
  CHECK_THROWS_AS(GenDataset(c), Error);
}

TEST_CASE("pixmap round trip stays within quantization") {
  TempDir dir("img");
  const Tensor x = testing::RandomTensor(Shape{3, 32, 16}, 5, 0.0, 1.0);
  WriteImage(dir / "x.ppm", x);
  const Tensor y = ReadImage(dir / "x.ppm");
  REQUIRE(y.shape() == x.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  CHECK(worst <= 1.0 / 255.0 + 1e-12);
}

TEST_CASE("zeros round trip exactly") {
  TempDir dir("img");
  const Tensor z = Tensor::Zeros(Shape{3, 8, 4});
  WriteImage(dir / "z.ppm", z);
  CHECK(SameImage(ReadImage(dir / "z.ppm"), z));
}

TEST_CASE("a linear ramp round trips within half a level") {
  TempDir dir("img");
  const std::size_t w = 97;
  Tensor ramp = Tensor::Zeros(Shape{3, 2, w});
  auto data = ramp.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<double>(i % w) / static_cast<double>(w - 1);
  }
  WriteImage(dir / "r.ppm", ramp);
  const Tensor back = ReadImage(dir / "r.ppm");
  for (std::size_t i = 0; i < ramp.numel(); ++i) {
    CHECK(std::abs(back[i] - ramp[i]) <= 1.0 / 510.0 + 1e-12);
  }
}

TEST_CASE("byte grid images round trip exactly") {
  TempDir dir("img");
  const Tensor x = GenDataset(SmallConfig()).query.front().image;
  WriteImage(dir / "q.ppm", x);
  CHECK(SameImage(ReadImage(dir / "q.ppm"), x));
}

void WriteRaw(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary);
  os << bytes;
}

TEST_CASE("malformed pixmaps are rejected") {
  TempDir dir("img");
  auto code_of = [&](const std::string& bytes) {
    WriteRaw(dir / "bad.ppm", bytes);
    try {
      ReadImage(dir / "bad.ppm");
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kInternal;
  };
  CHECK(code_of("P3\n1 1\n255\n0 0 0\n") == ErrorCode::kIo);
  CHECK(code_of("P6\n2 2\n255\n") == ErrorCode::kIo);              // no raster
  CHECK(code_of(std::string("P6\n1 1\n255\n\x01\x02", 12)) == ErrorCode::kIo);  // short raster
  CHECK(code_of("P6\nx 1\n255\n   ") == ErrorCode::kIo);
  CHECK(code_of("P6\n1 1\n65535\n      ") == ErrorCode::kIo);
  CHECK(code_of("") == ErrorCode::kIo);
  CHECK_THROWS_AS(ReadImage(dir / "missing.ppm"), Error);
}

TEST_CASE("pixmap comments and low maxval are accepted") {
  TempDir dir("img");
  WriteRaw(dir / "c.ppm", std::string("P6\n# note\n1 1\n# another\n15\n\x0f\x00\x05", 31));
  const Tensor x = ReadImage(dir / "c.ppm");
  CHECK(x[0] == 1.0);
  CHECK(x[1] == 0.0);
  CHECK(std::abs(x[2] - 5.0 / 15.0) < 1e-15);
}

TEST_CASE("write rejects bad shapes and unwritable paths") {
  TempDir dir("img");
  CHECK_THROWS_AS(WriteImage(dir / "g.ppm", Tensor::Zeros(Shape{1, 4, 4})), Error);
  CHECK_THROWS_AS(WriteImage(dir / "no/such/dir/x.ppm", Tensor::Zeros(Shape{3, 4, 4})), Error);
}

TEST_CASE("dataset directory round trip") {
  TempDir dir("ds");
  const DatasetSplits d = GenDataset(SmallConfig());
  WriteDataset(dir / "data", d);
  const DatasetSplits back = ReadDataset(dir / "data");
  CheckSameSplit(d.train, back.train);
  CheckSameSplit(d.query, back.query);
  CheckSameSplit(d.gallery, back.gallery);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    CHECK(back.train[i].identity_id == d.train[i].identity_id);
    CHECK(back.train[i].camera_id == d.train[i].camera_id);
  }
  CHECK_THROWS_AS(ReadDataset(dir / "nothing"), Error);
}

}  // namespace
}  // namespace fadekit
