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

#include "fadekit/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fadekit/error.hpp"
#include "fadekit/rng.hpp"
#include "json.hpp"

namespace fadekit {

namespace {

// Deliberately small palettes: colour pairs collide between identities, so
// the fine torso texture is what separates them.
constexpr std::array<Rgb, 4> kTorsoPalette{{
    {0.80, 0.16, 0.16}, {0.16, 0.26, 0.78}, {0.20, 0.62, 0.26}, {0.86, 0.76, 0.22},
}};
constexpr std::array<Rgb, 3> kLegPalette{{
    {0.15, 0.18, 0.35}, {0.55, 0.50, 0.42}, {0.10, 0.10, 0.12},
}};
constexpr int kTextureKinds = 4;
constexpr int kMinPeriod = 2;
constexpr int kPeriods = 2;
constexpr std::size_t kAppearanceCombos =
    kTorsoPalette.size() * kLegPalette.size() * kTextureKinds * kPeriods;
constexpr std::array<Rgb, 3> kSkinTones{{
    {0.90, 0.72, 0.60}, {0.72, 0.52, 0.38}, {0.45, 0.31, 0.22},
}};

constexpr double kBrightnessJitter = 0.15;
constexpr int kTranslationJitter = 2;
constexpr double kNoiseSigma = 0.02;

double Clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

Rgb Perturb(const Rgb& base, double amount, Rng& rng) {
  Rgb out{};
  for (int c = 0; c < 3; ++c) out[c] = Clamp01(base[c] + rng.Uniform(-amount, amount));
  return out;
}

struct Texture {
  int kind;
  int period;
  int phase;
  Rgb accent;
};

Texture TextureFor(const IdentitySpec& identity) {
  Rng rng(identity.texture_seed);
  Texture t{};
  t.kind = identity.texture_kind;
  t.period = identity.texture_period;
  t.phase = static_cast<int>(rng.Below(static_cast<std::uint64_t>(t.period)));
  // The accent is a fixed function of the torso colour so that the
  // block-average colour of the torso carries no texture information.
  for (int c = 0; c < 3; ++c) {
    t.accent[c] = 0.35 * identity.torso_color[c] + 0.65 * (1.0 - identity.torso_color[c]);
  }
  return t;
}

bool TextureOn(const Texture& t, int x, int y) {
  const int p = t.period;
  switch (t.kind) {
    case 1: return ((y + t.phase) / p) % 2 == 0;
    case 2: return ((x + t.phase) / p) % 2 == 0;
    case 3: return (((x + t.phase) / p) + (y / p)) % 2 == 0;
    case 4: return ((x + y + t.phase) / p) % 2 == 0;
    default: return false;
  }
}

struct Camera {
  Rgb background_top;
  Rgb background_bottom;
  Rgb tint;
};

Camera CameraFor(int camera_id) {
  Rng rng(DeriveSeed(0xca3e7aULL, static_cast<std::uint64_t>(camera_id)));
  Camera cam{};
  const double base = rng.Uniform(0.30, 0.65);
  for (int c = 0; c < 3; ++c) {
    cam.background_top[c] = Clamp01(base + rng.Uniform(-0.08, 0.08));
    cam.background_bottom[c] = Clamp01(cam.background_top[c] + rng.Uniform(-0.15, 0.05));
    cam.tint[c] = rng.Uniform(0.9, 1.1);
  }
  return cam;
}

}  // namespace

std::string ViewRender::Name() const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "id%03d_v%02d_c%d", identity_id, view_index, camera_id);
  return buf;
}

IdentitySpec SampleIdentity(int id, std::uint64_t seed) {
  // Appearance combos are dealt without replacement from a seed-wide shuffle,
  // so identities below kAppearanceCombos never share colours and texture.
  std::vector<std::size_t> deck(kAppearanceCombos);
  for (std::size_t i = 0; i < deck.size(); ++i) deck[i] = i;
  Rng deck_rng(DeriveSeed(seed, "appearance"));
  deck_rng.Shuffle(deck);
  std::size_t combo = deck[static_cast<std::size_t>(id) % kAppearanceCombos];

  Rng rng(DeriveSeed(seed, static_cast<std::uint64_t>(id)));
  IdentitySpec spec;
  spec.id = id;
  const std::size_t torso = combo % kTorsoPalette.size();
  combo /= kTorsoPalette.size();
  const std::size_t legs = combo % kLegPalette.size();
  combo /= kLegPalette.size();
  spec.texture_kind = 1 + static_cast<int>(combo % kTextureKinds);
  spec.texture_period = kMinPeriod + static_cast<int>(combo / kTextureKinds);
  spec.torso_color = Perturb(kTorsoPalette[torso], 0.02, rng);
  spec.leg_color = Perturb(kLegPalette[legs], 0.02, rng);
  spec.head_tone = Perturb(kSkinTones[rng.Below(kSkinTones.size())], 0.04, rng);
  spec.body_proportions = {rng.Uniform(0.16, 0.17), rng.Uniform(0.33, 0.35),
                           rng.Uniform(0.39, 0.41)};
  spec.texture_seed = rng.NextU64();
  return spec;
}

Tensor RenderView(const IdentitySpec& identity, int camera_id, const Jitter& jitter,
                  std::size_t height, std::size_t width, std::uint64_t noise_seed) {
  Require(height >= 8 && width >= 4, ErrorCode::kInvalidArgument,
          "render: image must be at least 8x4");
  const Camera cam = CameraFor(camera_id);
  const Texture tex = TextureFor(identity);
  const double h = static_cast<double>(height);
  const double w = static_cast<double>(width);
  const int top = 1 + jitter.dy;
  const int head_h = std::max(2, static_cast<int>(std::lround(identity.body_proportions[0] * h)));
  const int torso_h = std::max(2, static_cast<int>(std::lround(identity.body_proportions[1] * h)));
  const int leg_h = std::max(2, static_cast<int>(std::lround(identity.body_proportions[2] * h)));
  const double cx = w / 2.0 + jitter.dx;
  const int torso_top = top + head_h;
  const int leg_top = torso_top + torso_h;
  const int torso_left = static_cast<int>(std::floor(cx - 0.32 * w));

  Rng noise(noise_seed);
  std::vector<double> data(3 * height * width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = static_cast<double>(y) / (h - 1.0);
    const int iy = static_cast<int>(y);
    for (std::size_t x = 0; x < width; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      const int ix = static_cast<int>(x);
      Rgb color{};
      bool person = true;
      const double hy = (static_cast<double>(iy) + 0.5 - (top + head_h / 2.0)) / (head_h / 2.0);
      const double hx = (px - cx) / (0.17 * w);
      if (iy >= top && iy < torso_top && hx * hx + hy * hy <= 1.0) {
        color = identity.head_tone;
        if (iy < top + std::max(1, head_h / 3)) {
          for (double& c : color) c *= 0.35;  // hair
        }
      } else if (iy >= torso_top && iy < leg_top && std::abs(px - cx) < 0.32 * w) {
        color = TextureOn(tex, ix - torso_left, iy - torso_top) ? tex.accent
                                                               : identity.torso_color;
      } else if (iy >= leg_top && iy < leg_top + leg_h &&
                 (std::abs(px - (cx - 0.13 * w)) < 0.11 * w ||
                  std::abs(px - (cx + 0.13 * w)) < 0.11 * w)) {
        color = identity.leg_color;
      } else {
        person = false;
        for (int c = 0; c < 3; ++c) {
          color[c] = cam.background_top[c] * (1.0 - fy) + cam.background_bottom[c] * fy;
        }
      }
      for (int c = 0; c < 3; ++c) {
        double v = person ? color[c] * cam.tint[c] : color[c];
        v += jitter.brightness + jitter.noise_sigma * noise.Normal();
        data[(static_cast<std::size_t>(c) * height + y) * width + x] = Clamp01(v);
      }
    }
  }
  return QuantizeToByteGrid(Tensor(Shape{3, height, width}, std::move(data)));
}

Tensor QuantizeToByteGrid(const Tensor& image) {
  std::vector<double> out(image.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<double>(std::lround(Clamp01(image[i]) * 255.0)) / 255.0;
  }
  return Tensor(image.shape(), std::move(out));
}

DatasetSplits GenDataset(const DatasetConfig& config) {
  Require(config.n_ids >= 2, ErrorCode::kInvalidArgument,
          "gen_dataset: n_ids must be >= 2, got " + std::to_string(config.n_ids));
  Require(config.views_per_id >= 2, ErrorCode::kInvalidArgument,
          "gen_dataset: views_per_id must be >= 2, got " + std::to_string(config.views_per_id));
  Require(config.query_per_id >= 1 && config.gallery_per_id >= 1 &&
              config.query_per_id + config.gallery_per_id <= config.views_per_id,
          ErrorCode::kInvalidArgument,
          "gen_dataset: query_per_id and gallery_per_id must be >= 1 and fit in views_per_id");
  Require(config.height >= 8 && config.width >= 4 && config.n_cameras >= 1,
          ErrorCode::kInvalidArgument, "gen_dataset: image too small or no cameras");

  DatasetSplits splits;
  splits.train_identities_disjoint = config.disjoint_train_identities;
  const std::uint64_t id_seed = DeriveSeed(config.seed, "identities");
  const std::uint64_t view_seed = DeriveSeed(config.seed, "views");
  for (int id = 0; id < config.n_ids; ++id) {
    const IdentitySpec spec = SampleIdentity(id, id_seed);
    splits.identities.push_back(spec);
    const bool train_only = config.disjoint_train_identities && id < config.n_ids / 2;
    const bool eval_only = config.disjoint_train_identities && !train_only;
    for (int v = 0; v < config.views_per_id; ++v) {
      Rng rng(DeriveSeed(view_seed, static_cast<std::uint64_t>(id * 4096 + v)));
      ViewRender r;
      r.identity_id = id;
      r.view_index = v;
      r.camera_id = (id + v) % config.n_cameras;
      r.jitter.brightness = rng.Uniform(-kBrightnessJitter, kBrightnessJitter);
      r.jitter.dx = static_cast<int>(rng.Below(2 * kTranslationJitter + 1)) - kTranslationJitter;
      r.jitter.dy = static_cast<int>(rng.Below(2 * kTranslationJitter + 1)) - kTranslationJitter;
      r.jitter.noise_sigma = kNoiseSigma;
      r.image = RenderView(spec, r.camera_id, r.jitter, config.height, config.width, rng.NextU64());
      if (train_only) {
        splits.train.push_back(std::move(r));
      } else if (v < config.query_per_id) {
        splits.query.push_back(std::move(r));
      } else if (v < config.query_per_id + config.gallery_per_id || eval_only) {
        splits.gallery.push_back(std::move(r));
      } else {
        splits.train.push_back(std::move(r));
      }
    }
  }
  return splits;
}

void WriteImage(const std::filesystem::path& path, const Tensor& image) {
  Require(image.rank() == 3 && image.dim(0) == 3, ErrorCode::kShapeMismatch,
          "write_image: expected (3,H,W), got " + ShapeString(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string bytes(3 * h * w, '\0');
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = Clamp01(image[(c * h + y) * w + x]);
        bytes[(y * w + x) * 3 + c] = static_cast<char>(std::lround(v * 255.0));
      }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  Require(static_cast<bool>(os), ErrorCode::kIo, "write_image: cannot open " + path.string());
  os << "P6\n" << w << ' ' << h << "\n255\n";
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  Require(static_cast<bool>(os), ErrorCode::kIo, "write_image: write failed for " + path.string());
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string HeaderToken(std::istream& is, const std::filesystem::path& path) {
  int ch = is.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = is.get();
  }
  // Consumes exactly one whitespace byte after the token, as P6 requires
  // before the raster.
  std::string token;
  while (ch != EOF && !std::isspace(ch)) {
    token.push_back(static_cast<char>(ch));
    ch = is.get();
  }
  Require(!token.empty(), ErrorCode::kIo, "read_image: truncated header in " + path.string());
  return token;
}

std::size_t HeaderNumber(std::istream& is, const std::filesystem::path& path) {
  const std::string token = HeaderToken(is, path);
  Require(token.find_first_not_of("0123456789") == std::string::npos && token.size() < 7,
          ErrorCode::kIo, "read_image: bad header field '" + token + "' in " + path.string());
  return static_cast<std::size_t>(std::stoul(token));
}

}  // namespace

Tensor ReadImage(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  Require(static_cast<bool>(is), ErrorCode::kIo, "read_image: cannot open " + path.string());
  Require(HeaderToken(is, path) == "P6", ErrorCode::kIo,
          "read_image: not a binary P6 pixmap: " + path.string());
  const std::size_t w = HeaderNumber(is, path);
  const std::size_t h = HeaderNumber(is, path);
  const std::size_t maxval = HeaderNumber(is, path);
  Require(w > 0 && h > 0 && maxval > 0 && maxval <= 255, ErrorCode::kIo,
          "read_image: unsupported geometry or maxval in " + path.string());
  std::string bytes(3 * h * w, '\0');
  is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  Require(is.gcount() == static_cast<std::streamsize>(bytes.size()), ErrorCode::kIo,
          "read_image: truncated pixel data in " + path.string());
  std::vector<double> data(3 * h * w);
  // Divide rather than multiply by a reciprocal so byte-grid values read
  // back bit-identical to QuantizeToByteGrid output.
  const auto scale = static_cast<double>(maxval);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto byte = static_cast<unsigned char>(bytes[(y * w + x) * 3 + c]);
        Require(byte <= maxval, ErrorCode::kIo, "read_image: sample exceeds maxval");
        data[(c * h + y) * w + x] = static_cast<double>(byte) / scale;
      }
  return Tensor(Shape{3, h, w}, std::move(data));
}

void WriteDataset(const std::filesystem::path& dir, const DatasetSplits& splits) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary | std::ios::trunc);
  Require(static_cast<bool>(manifest), ErrorCode::kIo,
          "write_dataset: cannot write manifest in " + dir.string());
  auto emit = [&](const char* split, const std::vector<ViewRender>& renders) {
    fs::create_directories(dir / split);
    for (const auto& r : renders) {
      const std::string rel = std::string(split) + "/" + r.Name() + ".ppm";
      WriteImage(dir / rel, r.image);
      nlohmann::json rec = {{"split", split},         {"identity", r.identity_id},
                            {"camera", r.camera_id},  {"view", r.view_index},
                            {"path", rel}};
      manifest << rec.dump() << '\n';
    }
  };
  emit("train", splits.train);
  emit("query", splits.query);
  emit("gallery", splits.gallery);
}

DatasetSplits ReadDataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.jsonl");
  Require(static_cast<bool>(manifest), ErrorCode::kIo,
          "read_dataset: missing manifest in " + dir.string());
  DatasetSplits splits;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorCode::kIo, std::string("read_dataset: malformed manifest line: ") + e.what());
    }
    ViewRender r;
    r.identity_id = rec.at("identity").get<int>();
    r.camera_id = rec.at("camera").get<int>();
    r.view_index = rec.at("view").get<int>();
    r.image = ReadImage(dir / rec.at("path").get<std::string>());
    const std::string split = rec.at("split").get<std::string>();
    if (split == "train") {
      splits.train.push_back(std::move(r));
    } else if (split == "query") {
      splits.query.push_back(std::move(r));
    } else if (split == "gallery") {
      splits.gallery.push_back(std::move(r));
    } else {
      Fail(ErrorCode::kIo, "read_dataset: unknown split '" + split + "'");
    }
  }
  return splits;
}

}  // namespace fadekit
