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


#include "fadekit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fadekit/error.hpp"
#include "fadekit/metrics.hpp"
#include "fadekit/rng.hpp"
#include "json.hpp"

namespace fadekit {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr PlanField kFields[] = {
    {"run.seed", FieldType::kUnsigned, "7", "master seed; every stage seed derives from it"},
    {"run.out", FieldType::kText, "runs/default", "run directory", false},
    {"run.workers", FieldType::kUnsigned, "0", "per-image worker threads (0 = all cores)",
     false},
    {"data.n_ids", FieldType::kInt, "32", "identities"},
    {"data.views_per_id", FieldType::kInt, "8", "renders per identity"},
    {"data.height", FieldType::kUnsigned, "32", "image height"},
    {"data.width", FieldType::kUnsigned, "16", "image width"},
    {"data.query_per_id", FieldType::kInt, "1", "query renders per identity"},
    {"data.gallery_per_id", FieldType::kInt, "1", "gallery renders per identity"},
    {"data.n_cameras", FieldType::kInt, "6", "distinct cameras"},
    {"data.disjoint_train_identities", FieldType::kBool, "false",
     "train on one half of the identities, evaluate on the other"},
    {"extractor.epochs", FieldType::kUnsigned, "120", "training epochs"},
    {"extractor.batch_size", FieldType::kUnsigned, "16", "minibatch size"},
    {"extractor.learning_rate", FieldType::kReal, "0.005", "Adam learning rate"},
    {"extractor.cosine_decay", FieldType::kBool, "true", "anneal the learning rate to zero"},
    {"extractor.augment", FieldType::kBool, "true", "random shift and brightness"},
    {"extractor.embed_dim", FieldType::kUnsigned, "64", "embedding size"},
    {"extractor.logit_scale", FieldType::kReal, "5", "classifier temperature"},
    {"protect.T", FieldType::kInt, "100", "iterations"},
    {"protect.I", FieldType::kInt, "5", "masks per replacement cycle"},
    {"protect.epsilon", FieldType::kReal, "0.03", "feature-constraint threshold"},
    {"protect.alpha", FieldType::kReal, "0.6", "momentum decay"},
    {"protect.beta", FieldType::kReal, "0.01", "step size"},
    {"protect.init_steps", FieldType::kInt, "5", "CO+PRO initialization iterations"},
    {"protect.final_co_only_steps", FieldType::kInt, "5", "closing CO-only iterations"},
    {"protect.noise_seed", FieldType::kUnsigned, "0", "mixed into every per-image noise seed"},
    {"protect.mask_seed", FieldType::kUnsigned, "0", "mixed into every per-image mask seed"},
    {"protect.grad_norm_exponent", FieldType::kReal, "2", "gradient divided by its norm to this power"},
    {"protect.resample_noise", FieldType::kBool, "false", "fresh noise for every replacement"},
    {"protect.normalize_embedding", FieldType::kBool, "true", "feature loss on unit embeddings"},
    {"baselines.blur_radius", FieldType::kReal, "3", "gaussian_blur sigma in pixels"},
    {"baselines.mosaic_block", FieldType::kUnsigned, "4", "mosaic block size"},
    {"baselines.perturb_amplitude", FieldType::kReal, "0.1", "random_perturb amplitude"},
    {"baselines.joint_l1_weight", FieldType::kReal, "1", "joint_l1 weight of the L1 term"},
    {"attack.epochs", FieldType::kUnsigned, "20", "recovery-net epochs"},
    {"attack.batch_size", FieldType::kUnsigned, "16", "recovery-net minibatch size"},
    {"attack.learning_rate", FieldType::kReal, "0.001", "recovery-net Adam learning rate"},
    {"attack.width", FieldType::kUnsigned, "16", "recovery-net base width"},
    {"eval.protectors", FieldType::kList, "none,pixelfade,gaussian_blur,mosaic",
     "comma-separated protector names"},
    {"eval.settings", FieldType::kList, "P2P,O2P,P2O,O2O", "comma-separated settings"},
    {"eval.ad_pooled", FieldType::kBool, "false",
     "AD over all gallery pixels at once instead of the per-image mean"},
};

constexpr std::string_view kSettingNames[] = {"P2P", "O2P", "P2O", "O2O"};

std::string_view Trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string> SplitList(std::string_view text) {
  std::vector<std::string> out;
  while (true) {
    const std::size_t comma = text.find(',');
    const std::string_view item = Trim(text.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

std::string Join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

const PlanField* FindField(std::string_view key) {
  for (const auto& f : kFields) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

std::string FormatReal(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename T>
bool ParseNumber(std::string_view text, T& out) {
  const auto r = std::from_chars(text.data(), text.data() + text.size(), out);
  return r.ec == std::errc() && r.ptr == text.data() + text.size();
}

[[noreturn]] void BadValue(std::string_view key, std::string_view value, std::string_view want) {
  Fail(ErrorCode::kInvalidArgument, "plan: " + std::string(key) + " = '" + std::string(value) +
                                        "' is not " + std::string(want));
}

// Canonical text for a value of the given field, or an error.
std::string Canonicalize(const PlanField& field, std::string_view raw) {
  const std::string_view v = Trim(raw);
  switch (field.type) {
    case FieldType::kInt: {
      std::int64_t x = 0;
      if (!ParseNumber(v, x)) BadValue(field.key, v, "an integer");
      return std::to_string(x);
    }
    case FieldType::kUnsigned: {
      std::uint64_t x = 0;
      if (!ParseNumber(v, x)) BadValue(field.key, v, "a non-negative integer");
      return std::to_string(x);
    }
    case FieldType::kReal: {
      double x = 0.0;
      if (!ParseNumber(v, x) || !std::isfinite(x)) BadValue(field.key, v, "a finite number");
      return FormatReal(x);
    }
    case FieldType::kBool:
      if (v == "true" || v == "1" || v == "yes") return "true";
      if (v == "false" || v == "0" || v == "no") return "false";
      BadValue(field.key, v, "a boolean (true/false)");
    case FieldType::kText:
      if (v.empty()) BadValue(field.key, v, "a non-empty string");
      return std::string(v);
    case FieldType::kList: {
      std::vector<std::string> items = SplitList(v);
      if (items.empty()) BadValue(field.key, v, "a non-empty list");
      if (field.key == "eval.protectors") {
        for (const auto& p : items) CheckProtectorName(p);
      } else if (field.key == "eval.settings") {
        for (auto& s : items) s = SettingName(ParseSetting(s));
      }
      std::set<std::string> unique(items.begin(), items.end());
      Require(unique.size() == items.size(), ErrorCode::kInvalidArgument,
              "plan: " + std::string(field.key) + " lists an entry twice");
      return Join(items, ",");
    }
  }
  Fail(ErrorCode::kInternal, "plan: unhandled field type");
}

std::optional<double> NoiseWeightOf(std::string_view name) {
  constexpr std::string_view kPrefix = "noise_weight_";
  if (!name.starts_with(kPrefix)) return std::nullopt;
  double w = 0.0;
  if (!ParseNumber(name.substr(kPrefix.size()), w)) return std::nullopt;
  return w;
}

void Progress(const HarnessOptions& options, int level, const std::string& message) {
  if (options.verbosity < level) return;
  if (options.progress) {
    options.progress(message);
  } else {
    std::cerr << message << '\n';
  }
}

void WriteText(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  Require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << text;
  Require(static_cast<bool>(out), ErrorCode::kIo, "write failed: " + path.string());
}

std::string ReadText(const fs::path& path, std::string_view what) {
  std::ifstream in(path, std::ios::binary);
  Require(static_cast<bool>(in), ErrorCode::kIo,
          std::string(what) + ": missing " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Json> ReadJsonl(const fs::path& path, std::string_view what) {
  std::vector<Json> records;
  std::istringstream in(ReadText(path, what));
  std::string line;
  while (std::getline(in, line)) {
    if (Trim(line).empty()) continue;
    try {
      records.push_back(Json::parse(line));
    } catch (const Json::exception& e) {
      Fail(ErrorCode::kIo, std::string(what) + ": malformed record in " + path.string() + ": " +
                               e.what());
    }
  }
  return records;
}

// JSON has no infinity; PSNR of identical images is +inf, so it travels
// as null.
Json RealOrNull(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }
double RealFromJson(const Json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

void SnapshotPlan(const Plan& plan) { WriteText(plan.out_dir() / "plan.cfg", plan.Serialize()); }

const char* kSplits[] = {"train", "query", "gallery"};

std::vector<ViewRender>& SplitOf(DatasetSplits& d, std::string_view split) {
  if (split == "train") return d.train;
  if (split == "query") return d.query;
  return d.gallery;
}

DatasetSplits LoadData(const RunLayout& layout, std::string_view stage) {
  Require(fs::exists(layout.data() / "manifest.jsonl"), ErrorCode::kFailedPrecondition,
          std::string(stage) + ": no dataset under " + layout.data().string() +
              " (run gen-data first)");
  return ReadDataset(layout.data());
}

FeatureExtractor LoadExtractor(const RunLayout& layout, std::string_view stage) {
  Require(fs::exists(layout.extractor_weights()), ErrorCode::kFailedPrecondition,
          std::string(stage) + ": missing model weights " + layout.extractor_weights().string() +
              " (run train-extractor first)");
  return FeatureExtractor::Load(layout.extractor_weights());
}

fs::path ProtectedPath(const RunLayout& layout, std::string_view protector,
                       std::string_view split, const ViewRender& r) {
  return layout.protected_dir(protector) / split / (r.Name() + ".ppm");
}

Tensor ReadProtected(const RunLayout& layout, std::string_view protector, std::string_view split,
                     const ViewRender& r, std::string_view stage) {
  const fs::path path = ProtectedPath(layout, protector, split, r);
  Require(fs::exists(path), ErrorCode::kFailedPrecondition,
          std::string(stage) + ": missing protected " + std::string(split) + " split for '" +
              std::string(protector) + "' (" + path.string() + "; run protect first)");
  return ReadImage(path);
}

std::vector<std::string> Selected(const Plan& plan, std::span<const std::string> only) {
  if (only.empty()) return plan.protectors();
  for (const auto& p : only) CheckProtectorName(p);
  return {only.begin(), only.end()};
}

Json SeedsJson(const std::map<std::string, std::uint64_t>& seeds) {
  Json j = Json::object();
  for (const auto& [k, v] : seeds) j[k] = v;
  return j;
}

}  // namespace

const char* SettingName(Setting setting) {
  return kSettingNames[static_cast<int>(setting)].data();
}

Setting ParseSetting(std::string_view name) {
  for (int i = 0; i < 4; ++i) {
    if (kSettingNames[i] == name) return static_cast<Setting>(i);
  }
  Fail(ErrorCode::kInvalidArgument,
       "unknown setting '" + std::string(name) + "'; valid settings are P2P, O2P, P2O, O2O");
}

std::span<const PlanField> PlanFields() { return kFields; }

Plan::Plan() {
  for (const auto& f : kFields) values_.emplace(std::string(f.key), std::string(f.default_value));
}

Plan Plan::Parse(std::string_view text) {
  boost::property_tree::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    Fail(ErrorCode::kInvalidArgument, std::string("plan: ") + e.what());
  }
  Plan plan;
  for (const auto& [section, body] : tree) {
    Require(!body.empty(), ErrorCode::kInvalidArgument,
            "plan: key '" + section + "' is outside any [section]");
    for (const auto& [name, value] : body) {
      plan.Set(section + "." + name, value.data());
    }
  }
  // Cross-field bounds are checked once the whole file is in; single Set
  // calls may pass through invalid intermediate states.
  plan.protect().Validate();
  return plan;
}

Plan Plan::Load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  Require(static_cast<bool>(in), ErrorCode::kIo, "plan: cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return Parse(ss.str());
}

void Plan::Set(std::string_view key, std::string_view value) {
  const PlanField* field = FindField(key);
  Require(field != nullptr, ErrorCode::kInvalidArgument,
          "plan: unknown key '" + std::string(key) + "'");
  values_.find(key)->second = Canonicalize(*field, value);
}

const std::string& Plan::Get(std::string_view key) const {
  const auto it = values_.find(key);
  Require(it != values_.end(), ErrorCode::kInvalidArgument,
          "plan: unknown key '" + std::string(key) + "'");
  return it->second;
}

std::string Plan::Canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    if (FindField(k)->hashed) out += k + "=" + v + "\n";
  }
  return out;
}

std::uint64_t Plan::Hash() const { return Fnv1a(Canonical()); }

std::string Plan::HashHex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(Hash()));
  return buf;
}

std::string Plan::Serialize() const {
  std::string out;
  std::string section;
  for (const auto& f : kFields) {
    const std::string_view key = f.key;
    const std::string_view sec = key.substr(0, key.find('.'));
    if (sec != section) {
      if (!section.empty()) out += "\n";
      section = std::string(sec);
      out += "[" + section + "]\n";
    }
    out += std::string(key.substr(sec.size() + 1)) + " = " + Get(key) + "\n";
  }
  return out;
}

std::int64_t Plan::Int(std::string_view key) const {
  std::int64_t v = 0;
  ParseNumber(std::string_view(Get(key)), v);
  return v;
}

std::uint64_t Plan::Unsigned(std::string_view key) const {
  std::uint64_t v = 0;
  ParseNumber(std::string_view(Get(key)), v);
  return v;
}

double Plan::Real(std::string_view key) const {
  double v = 0.0;
  ParseNumber(std::string_view(Get(key)), v);
  return v;
}

bool Plan::Bool(std::string_view key) const { return Get(key) == "true"; }

std::vector<std::string> Plan::List(std::string_view key) const { return SplitList(Get(key)); }

std::uint64_t Plan::master_seed() const { return Unsigned("run.seed"); }
fs::path Plan::out_dir() const { return fs::path(Get("run.out")); }

std::size_t Plan::workers() const {
  const std::uint64_t w = Unsigned("run.workers");
  if (w > 0) return static_cast<std::size_t>(w);
  return std::max(1u, std::thread::hardware_concurrency());
}

DatasetConfig Plan::dataset() const {
  DatasetConfig c;
  c.n_ids = static_cast<int>(Int("data.n_ids"));
  c.views_per_id = static_cast<int>(Int("data.views_per_id"));
  c.height = Unsigned("data.height");
  c.width = Unsigned("data.width");
  c.query_per_id = static_cast<int>(Int("data.query_per_id"));
  c.gallery_per_id = static_cast<int>(Int("data.gallery_per_id"));
  c.n_cameras = static_cast<int>(Int("data.n_cameras"));
  c.disjoint_train_identities = Bool("data.disjoint_train_identities");
  c.seed = StageSeed(*this, "gen-data");
  return c;
}

ExtractorConfig Plan::extractor() const {
  ExtractorConfig c;
  c.embed_dim = Unsigned("extractor.embed_dim");
  c.logit_scale = Real("extractor.logit_scale");
  return c;
}

TrainConfig Plan::extractor_training() const {
  TrainConfig c;
  c.epochs = Unsigned("extractor.epochs");
  c.batch_size = Unsigned("extractor.batch_size");
  c.optimizer.learning_rate = Real("extractor.learning_rate");
  c.cosine_decay = Bool("extractor.cosine_decay");
  c.augment = Bool("extractor.augment");
  c.seed = StageSeed(*this, "train-extractor");
  return c;
}

ProtectConfig Plan::protect() const {
  ProtectConfig c;
  c.T = static_cast<int>(Int("protect.T"));
  c.I = static_cast<int>(Int("protect.I"));
  c.epsilon = Real("protect.epsilon");
  c.alpha = Real("protect.alpha");
  c.beta = Real("protect.beta");
  c.init_steps = static_cast<int>(Int("protect.init_steps"));
  c.final_co_only_steps = static_cast<int>(Int("protect.final_co_only_steps"));
  c.noise_seed = Unsigned("protect.noise_seed");
  c.mask_seed = Unsigned("protect.mask_seed");
  c.grad_norm_exponent = Real("protect.grad_norm_exponent");
  c.resample_noise = Bool("protect.resample_noise");
  c.normalize_embedding = Bool("protect.normalize_embedding");
  return c;
}

RecoveryConfig Plan::attacker() const {
  RecoveryConfig c;
  c.width = Unsigned("attack.width");
  return c;
}

TrainConfig Plan::attack_training() const {
  TrainConfig c;
  c.epochs = Unsigned("attack.epochs");
  c.batch_size = Unsigned("attack.batch_size");
  c.optimizer.learning_rate = Real("attack.learning_rate");
  c.augment = false;
  return c;
}

double Plan::blur_radius() const { return Real("baselines.blur_radius"); }
std::size_t Plan::mosaic_block() const { return Unsigned("baselines.mosaic_block"); }
double Plan::perturb_amplitude() const { return Real("baselines.perturb_amplitude"); }
double Plan::joint_l1_weight() const { return Real("baselines.joint_l1_weight"); }
std::vector<std::string> Plan::protectors() const { return List("eval.protectors"); }

std::vector<Setting> Plan::settings() const {
  std::vector<Setting> out;
  for (const auto& s : List("eval.settings")) out.push_back(ParseSetting(s));
  return out;
}

std::uint64_t StageSeed(const Plan& plan, std::string_view stage) {
  return DeriveSeed(plan.master_seed(), stage);
}

void CheckProtectorName(std::string_view name) {
  static constexpr std::string_view kFixed[] = {
      "none",        "pixelfade",   "gaussian_blur", "mosaic",
      "random_perturb", "joint_l1", "target_other_identity", "target_zero",
      "target_contrastive"};
  for (auto n : kFixed) {
    if (n == name) return;
  }
  if (const auto w = NoiseWeightOf(name)) {
    Require(*w > 0.0 && *w <= 1.0, ErrorCode::kInvalidArgument,
            "protector '" + std::string(name) + "': noise weight must be in (0, 1]");
    return;
  }
  Fail(ErrorCode::kInvalidArgument,
       "unknown protector '" + std::string(name) +
           "'; valid: none, pixelfade, gaussian_blur, mosaic, random_perturb, joint_l1, "
           "noise_weight_<w>, target_other_identity, target_zero, target_contrastive");
}

ProtectionResult ApplyProtector(std::string_view name, const Tensor& image,
                                const ProtectContext& context) {
  CheckProtectorName(name);
  auto needs_model = [&]() -> const FeatureExtractor& {
    Require(context.model != nullptr, ErrorCode::kInvalidArgument,
            "protector '" + std::string(name) + "' needs a feature extractor");
    return *context.model;
  };
  const ProtectConfig& cfg = context.config;
  if (name == "pixelfade") return PixelFadeProtect(image, needs_model(), cfg);
  if (name == "random_perturb") {
    return PerturbProtect(image, needs_model(), context.perturb_amplitude, cfg);
  }
  if (name == "joint_l1") return JointL1Protect(image, needs_model(), context.joint_l1_weight, cfg);
  if (const auto w = NoiseWeightOf(name)) return NoiseWeightProtect(image, needs_model(), *w, cfg);
  if (name == "target_other_identity") {
    return ObjectiveVariantProtect(image, needs_model(), ObjectiveTarget::kOtherIdentity, cfg,
                                   context.other_identity_image);
  }
  if (name == "target_zero") {
    return ObjectiveVariantProtect(image, needs_model(), ObjectiveTarget::kZero, cfg);
  }
  if (name == "target_contrastive") {
    return ObjectiveVariantProtect(image, needs_model(), ObjectiveTarget::kContrastive, cfg);
  }

  ProtectionResult result;
  if (name == "gaussian_blur") {
    result.protected_image = GaussianBlur(image, context.blur_radius);
  } else if (name == "mosaic") {
    result.protected_image = Mosaic(image, context.mosaic_block);
  } else {
    result.protected_image = image.Detach();
  }
  if (context.model != nullptr) {
    const bool normalize = cfg.normalize_embedding;
    result.final_loss = FeatureLoss(*context.model, result.protected_image,
                                    context.model->Embed(image.Detach(), normalize), normalize);
    result.constraint_met_at_end = result.final_loss <= cfg.epsilon;
  } else {
    result.final_loss = std::numeric_limits<double>::quiet_NaN();
  }
  return result;
}

fs::path RunLayout::protected_dir(std::string_view protector) const {
  return root / "protected" / protector;
}
fs::path RunLayout::traces(std::string_view protector) const { return root / "traces" / protector; }
fs::path RunLayout::attack(std::string_view protector) const { return root / "attack" / protector; }

const RetrievalCell& EvalReport::Cell(std::string_view protector, Setting setting) const {
  for (const auto& c : retrieval) {
    if (c.protector == protector && c.setting == setting) return c;
  }
  Fail(ErrorCode::kInvalidArgument, "report: no cell " + std::string(protector) + "/" +
                                        SettingName(setting));
}

const ProtectorSummary& EvalReport::Summary(std::string_view protector) const {
  for (const auto& s : protectors) {
    if (s.protector == protector) return s;
  }
  Fail(ErrorCode::kInvalidArgument, "report: no attack record for " + std::string(protector));
}

std::string ReportToJsonl(const EvalReport& report) {
  std::string out;
  const Json seeds = SeedsJson(report.stage_seeds);
  for (const auto& c : report.retrieval) {
    Json j;
    j["kind"] = "retrieval";
    j["protector"] = c.protector;
    j["setting"] = SettingName(c.setting);
    j["rank1"] = c.rank1;
    j["map"] = c.map;
    j["minp"] = c.minp;
    j["config_hash"] = report.config_hash;
    j["master_seed"] = report.master_seed;
    j["seeds"] = seeds;
    out += j.dump() + "\n";
  }
  for (const auto& s : report.protectors) {
    Json j;
    j["kind"] = "attack";
    j["protector"] = s.protector;
    j["recovered_psnr"] = RealOrNull(s.recovered_psnr);
    j["recovered_ssim"] = s.recovered_ssim;
    j["mean_ad"] = s.mean_ad;
    j["mean_feature_loss"] = RealOrNull(s.mean_feature_loss);
    j["constraint_met"] = s.constraint_met;
    j["gallery_images"] = s.gallery_images;
    j["config_hash"] = report.config_hash;
    j["master_seed"] = report.master_seed;
    j["seeds"] = seeds;
    out += j.dump() + "\n";
  }
  return out;
}

EvalReport ParseReportJsonl(std::string_view text) {
  EvalReport report;
  bool first = true;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (Trim(line).empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      Fail(ErrorCode::kIo, std::string("report: malformed record: ") + e.what());
    }
    try {
      if (first) {
        report.config_hash = j.at("config_hash").get<std::string>();
        report.master_seed = j.at("master_seed").get<std::uint64_t>();
        for (const auto& [k, v] : j.at("seeds").items()) {
          report.stage_seeds[k] = v.get<std::uint64_t>();
        }
        first = false;
      }
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "retrieval") {
        RetrievalCell c;
        c.protector = j.at("protector").get<std::string>();
        c.setting = ParseSetting(j.at("setting").get<std::string>());
        c.rank1 = j.at("rank1").get<double>();
        c.map = j.at("map").get<double>();
        c.minp = j.at("minp").get<double>();
        report.retrieval.push_back(std::move(c));
      } else if (kind == "attack") {
        ProtectorSummary s;
        s.protector = j.at("protector").get<std::string>();
        s.recovered_psnr = RealFromJson(j.at("recovered_psnr"));
        s.recovered_ssim = j.at("recovered_ssim").get<double>();
        s.mean_ad = j.at("mean_ad").get<double>();
        s.mean_feature_loss = RealFromJson(j.at("mean_feature_loss"));
        s.constraint_met = j.at("constraint_met").get<std::size_t>();
        s.gallery_images = j.at("gallery_images").get<std::size_t>();
        report.protectors.push_back(std::move(s));
      } else {
        Fail(ErrorCode::kIo, "report: unknown record kind '" + kind + "'");
      }
    } catch (const Json::exception& e) {
      Fail(ErrorCode::kIo, std::string("report: bad record: ") + e.what());
    }
  }
  return report;
}

std::string ReportToTable(const EvalReport& report) {
  std::ostringstream out;
  char buf[256];
  out << "config_hash " << report.config_hash << "  master_seed " << report.master_seed << "\n";
  for (const auto& [k, v] : report.stage_seeds) out << "  seed[" << k << "] = " << v << "\n";
  out << "\n";
  std::snprintf(buf, sizeof(buf), "%-24s %-8s %8s %8s %8s\n", "protector", "setting", "rank1",
                "mAP", "mINP");
  out << buf;
  for (const auto& c : report.retrieval) {
    std::snprintf(buf, sizeof(buf), "%-24s %-8s %8.4f %8.4f %8.4f\n", c.protector.c_str(),
                  SettingName(c.setting), c.rank1, c.map, c.minp);
    out << buf;
  }
  out << "\n";
  std::snprintf(buf, sizeof(buf), "%-24s %10s %10s %10s %12s %8s\n", "protector", "rec_PSNR",
                "rec_SSIM", "AD", "feat_loss", "met");
  out << buf;
  for (const auto& s : report.protectors) {
    std::snprintf(buf, sizeof(buf), "%-24s %10.3f %10.4f %10.3f %12.5f %4zu/%-3zu\n",
                  s.protector.c_str(), s.recovered_psnr, s.recovered_ssim, s.mean_ad,
                  s.mean_feature_loss, s.constraint_met, s.gallery_images);
    out << buf;
  }
  return out.str();
}

void ParallelFor(std::size_t count, std::size_t workers,
                 const std::function<void(std::size_t)>& fn) {
  const std::size_t n_threads = std::min(std::max<std::size_t>(workers, 1), count);
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> threads;
  threads.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) {
    threads.emplace_back([&] {
      while (!failed.load()) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          failed.store(true);
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  if (error) std::rethrow_exception(error);
}

void RunGenData(const Plan& plan, const HarnessOptions& options) {
  const RunLayout layout{plan.out_dir()};
  SnapshotPlan(plan);
  const DatasetSplits splits = GenDataset(plan.dataset());
  WriteDataset(layout.data(), splits);
  Progress(options, 1,
           "gen-data: " + std::to_string(splits.train.size()) + " train, " +
               std::to_string(splits.query.size()) + " query, " +
               std::to_string(splits.gallery.size()) + " gallery renders");
}

void RunTrainExtractor(const Plan& plan, const HarnessOptions& options) {
  const RunLayout layout{plan.out_dir()};
  SnapshotPlan(plan);
  const DatasetSplits data = LoadData(layout, "train-extractor");
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> heldout;
  std::set<int> train_ids;
  for (const auto& r : data.train) {
    train.push_back({r.image, r.identity_id});
    train_ids.insert(r.identity_id);
  }
  // Held-out accuracy only means something for identities the classifier saw.
  for (const auto* split : {&data.query, &data.gallery}) {
    for (const auto& r : *split) {
      if (train_ids.count(r.identity_id)) heldout.push_back({r.image, r.identity_id});
    }
  }
  const ExtractorTraining trained =
      TrainExtractor(train, heldout, plan.extractor(), plan.extractor_training());
  fs::create_directories(layout.models());
  trained.model.Save(layout.extractor_weights());
  std::string log;
  for (const auto& e : trained.log) {
    Json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["accuracy"] = e.accuracy;
    j["eval_loss"] = e.eval_loss;
    log += j.dump() + "\n";
  }
  WriteText(layout.extractor_log(), log);
  Json summary;
  summary["heldout_accuracy"] = trained.heldout_accuracy;
  summary["heldout_images"] = heldout.size();
  WriteText(layout.models() / "extractor_summary.json", summary.dump() + "\n");
  Progress(options, 1, "train-extractor: held-out accuracy " +
                           FormatReal(trained.heldout_accuracy));
}

namespace {

struct ProtectJob {
  const char* split;
  std::size_t index;
};

struct ProtectOutcome {
  ProtectionResult result;
  double ad = 0.0;
};

}  // namespace

void RunProtect(const Plan& plan, std::span<const std::string> only,
                const HarnessOptions& options) {
  const RunLayout layout{plan.out_dir()};
  SnapshotPlan(plan);
  DatasetSplits data = LoadData(layout, "protect");
  const FeatureExtractor model = LoadExtractor(layout, "protect");
  const ProtectConfig base = plan.protect();
  base.Validate();
  const std::uint64_t stage = StageSeed(plan, "protect");
  const std::uint64_t noise_root = DeriveSeed(stage, base.noise_seed);
  const std::uint64_t mask_root = DeriveSeed(DeriveSeed(stage, "mask"), base.mask_seed);

  std::vector<ProtectJob> jobs;
  for (const char* split : kSplits) {
    for (std::size_t i = 0; i < SplitOf(data, split).size(); ++i) jobs.push_back({split, i});
  }

  // The other-identity target of a render is the first render of the next
  // identity (cyclically) in the same split.
  auto other_identity = [&](const char* split, std::size_t index) -> Tensor {
    const auto& renders = SplitOf(data, split);
    const int id = renders[index].identity_id;
    std::map<int, std::size_t> first;
    for (std::size_t i = 0; i < renders.size(); ++i) first.emplace(renders[i].identity_id, i);
    auto it = first.upper_bound(id);
    if (it == first.end()) it = first.begin();
    Require(it->first != id, ErrorCode::kFailedPrecondition,
            "protect: target_other_identity needs at least two identities in a split");
    return renders[it->second].image;
  };

  for (const auto& protector : Selected(plan, only)) {
    std::vector<ProtectOutcome> outcomes(jobs.size());
    for (const char* split : kSplits) {
      fs::create_directories(layout.protected_dir(protector) / split);
    }
    ParallelFor(jobs.size(), plan.workers(), [&](std::size_t k) {
      const ProtectJob& job = jobs[k];
      const ViewRender& r = SplitOf(data, job.split)[job.index];
      const std::string key = std::string(job.split) + "/" + r.Name();
      ProtectContext ctx;
      ctx.model = &model;
      ctx.config = base;
      ctx.config.noise_seed = DeriveSeed(noise_root, key);
      ctx.config.mask_seed = DeriveSeed(mask_root, key);
      ctx.blur_radius = plan.blur_radius();
      ctx.mosaic_block = plan.mosaic_block();
      ctx.perturb_amplitude = plan.perturb_amplitude();
      ctx.joint_l1_weight = plan.joint_l1_weight();
      if (protector == "target_other_identity") ctx.other_identity_image = other_identity(job.split, job.index);
      ProtectOutcome& out = outcomes[k];
      out.result = ApplyProtector(protector, r.image, ctx);
      out.ad = AdStatistic(out.result.protected_image.data());
      WriteImage(ProtectedPath(layout, protector, job.split, r), out.result.protected_image);
    });

    // Traces and summaries are written in job order so they are identical
    // for any worker count.
    std::map<std::string, std::string> traces;
    std::string summary;
    std::vector<double> gallery_pixels;
    double gallery_ad_sum = 0.0;
    std::size_t gallery_count = 0;
    for (std::size_t k = 0; k < jobs.size(); ++k) {
      const ProtectJob& job = jobs[k];
      const ViewRender& r = SplitOf(data, job.split)[job.index];
      const ProtectionResult& res = outcomes[k].result;
      std::string& trace = traces[job.split];
      for (const auto& e : res.trace) {
        Json j;
        j["image"] = r.Name();
        j["step"] = e.step;
        j["op"] = StepOpName(e.op);
        j["loss"] = e.feature_loss;
        j["coverage"] = e.coverage;
        j["stalled"] = e.stalled;
        trace += j.dump() + "\n";
      }
      Json s;
      s["split"] = job.split;
      s["image"] = r.Name();
      s["identity"] = r.identity_id;
      s["final_loss"] = RealOrNull(res.final_loss);
      s["constraint_met"] = res.constraint_met_at_end;
      s["ad"] = outcomes[k].ad;
      summary += s.dump() + "\n";
      if (std::string_view(job.split) == "gallery") {
        const auto px = res.protected_image.data();
        gallery_pixels.insert(gallery_pixels.end(), px.begin(), px.end());
        gallery_ad_sum += outcomes[k].ad;
        ++gallery_count;
      }
    }
    for (const char* split : kSplits) {
      WriteText(layout.traces(protector) / (std::string(split) + ".jsonl"), traces[split]);
    }
    WriteText(layout.traces(protector) / "summary.jsonl", summary);
    Json ad;
    ad["per_image_mean"] = gallery_count ? gallery_ad_sum / static_cast<double>(gallery_count) : 0.0;
    ad["pooled"] = gallery_pixels.size() >= 8 ? AdStatistic(gallery_pixels) : 0.0;
    WriteText(layout.traces(protector) / "gallery_ad.json", ad.dump() + "\n");
    Progress(options, 1, "protect: " + protector + " done (" + std::to_string(jobs.size()) +
                             " images)");
  }
}

void RunAttack(const Plan& plan, std::span<const std::string> only,
               const HarnessOptions& options) {
  const RunLayout layout{plan.out_dir()};
  SnapshotPlan(plan);
  const DatasetSplits data = LoadData(layout, "attack");
  const std::vector<std::string> protectors = Selected(plan, only);
  ParallelFor(protectors.size(), plan.workers(), [&](std::size_t k) {
    const std::string& protector = protectors[k];
    std::vector<RecoveryPair> pairs;
    for (const auto& r : data.train) {
      pairs.push_back({ReadProtected(layout, protector, "train", r, "attack"), r.image});
    }
    TrainConfig tc = plan.attack_training();
    tc.seed = StageSeed(plan, "attack/" + protector);
    const RecoveryTraining trained = TrainRecovery(pairs, plan.attacker(), tc);
    const fs::path dir = layout.attack(protector);
    fs::create_directories(dir / "recovered");
    trained.net.Save(dir / "recovery.bin");
    std::string log;
    for (const auto& e : trained.log) {
      Json j;
      j["epoch"] = e.epoch;
      j["loss"] = e.loss;
      log += j.dump() + "\n";
    }
    WriteText(dir / "log.jsonl", log);
    double psnr = 0.0;
    double ssim = 0.0;
    for (const auto& r : data.gallery) {
      const Tensor recovered =
          Recover(trained.net, ReadProtected(layout, protector, "gallery", r, "attack"));
      WriteImage(dir / "recovered" / (r.Name() + ".ppm"), recovered);
      psnr += Psnr(r.image, recovered);
      ssim += Ssim(r.image, recovered);
    }
    const double n = static_cast<double>(std::max<std::size_t>(data.gallery.size(), 1));
    Json m;
    m["protector"] = protector;
    m["psnr"] = RealOrNull(psnr / n);
    m["ssim"] = ssim / n;
    m["images"] = data.gallery.size();
    WriteText(dir / "metrics.json", m.dump() + "\n");
    Progress(options, 1, "attack: " + protector + " recovered SSIM " + FormatReal(ssim / n));
  });
}

void RunEval(const Plan& plan, std::span<const Setting> only_settings,
             const HarnessOptions& options) {
  const RunLayout layout{plan.out_dir()};
  SnapshotPlan(plan);
  const DatasetSplits data = LoadData(layout, "eval");
  const FeatureExtractor model = LoadExtractor(layout, "eval");
  const std::vector<Setting> settings =
      only_settings.empty() ? plan.settings()
                            : std::vector<Setting>(only_settings.begin(), only_settings.end());
  const bool normalize = plan.protect().normalize_embedding;

  auto ids = [](const std::vector<ViewRender>& renders) {
    std::vector<int> out;
    for (const auto& r : renders) out.push_back(r.identity_id);
    return out;
  };
  auto embed = [&](std::vector<Tensor> images) {
    return model.EmbedBatch(StackImages(images), normalize);
  };
  auto originals = [](const std::vector<ViewRender>& renders) {
    std::vector<Tensor> out;
    for (const auto& r : renders) out.push_back(r.image);
    return out;
  };
  const std::vector<int> query_ids = ids(data.query);
  const std::vector<int> gallery_ids = ids(data.gallery);
  const Tensor orig_q = embed(originals(data.query));
  const Tensor orig_g = embed(originals(data.gallery));

  std::string out;
  for (const auto& protector : plan.protectors()) {
    std::vector<Tensor> pq;
    std::vector<Tensor> pg;
    for (const auto& r : data.query) pq.push_back(ReadProtected(layout, protector, "query", r, "eval"));
    for (const auto& r : data.gallery) pg.push_back(ReadProtected(layout, protector, "gallery", r, "eval"));
    const Tensor prot_q = embed(std::move(pq));
    const Tensor prot_g = embed(std::move(pg));
    for (Setting s : settings) {
      const bool pq_side = s == Setting::kP2P || s == Setting::kP2O;
      const bool pg_side = s == Setting::kP2P || s == Setting::kO2P;
      const RankedRetrieval ranked = RankBySimilarity(pq_side ? prot_q : orig_q,
                                                      pg_side ? prot_g : orig_g, query_ids,
                                                      gallery_ids);
      Json j;
      j["protector"] = protector;
      j["setting"] = SettingName(s);
      j["rank1"] = CmcRankK(ranked, 1);
      j["map"] = MeanAp(ranked);
      j["minp"] = MInp(ranked);
      out += j.dump() + "\n";
      Progress(options, 2, "eval: " + protector + " " + SettingName(s) + " rank1 " +
                               FormatReal(j["rank1"].get<double>()));
    }
  }
  WriteText(layout.reports() / "retrieval.jsonl", out);
  Progress(options, 1, "eval: wrote " + (layout.reports() / "retrieval.jsonl").string());
}

EvalReport RunReport(const Plan& plan, const HarnessOptions& options) {
  const RunLayout layout{plan.out_dir()};
  SnapshotPlan(plan);
  const std::vector<std::string> protectors = plan.protectors();
  const std::vector<Setting> settings = plan.settings();
  const bool pooled = plan.Get("eval.ad_pooled") == "true";

  EvalReport report;
  report.config_hash = plan.HashHex();
  report.master_seed = plan.master_seed();
  report.stage_seeds["gen-data"] = StageSeed(plan, "gen-data");
  report.stage_seeds["train-extractor"] = StageSeed(plan, "train-extractor");
  report.stage_seeds["protect"] = StageSeed(plan, "protect");
  for (const auto& p : protectors) report.stage_seeds["attack/" + p] = StageSeed(plan, "attack/" + p);

  std::vector<std::string> missing;
  std::map<std::pair<std::string, std::string>, RetrievalCell> cells;
  const fs::path retrieval_path = layout.reports() / "retrieval.jsonl";
  if (fs::exists(retrieval_path)) {
    for (const auto& j : ReadJsonl(retrieval_path, "report")) {
      RetrievalCell c;
      c.protector = j.at("protector").get<std::string>();
      c.setting = ParseSetting(j.at("setting").get<std::string>());
      c.rank1 = j.at("rank1").get<double>();
      c.map = j.at("map").get<double>();
      c.minp = j.at("minp").get<double>();
      cells[{c.protector, SettingName(c.setting)}] = c;
    }
  }
  for (const auto& p : protectors) {
    for (Setting s : settings) {
      const auto it = cells.find({p, SettingName(s)});
      if (it == cells.end()) {
        missing.push_back(p + "/" + SettingName(s));
      } else {
        report.retrieval.push_back(it->second);
      }
    }
  }
  for (const auto& p : protectors) {
    const fs::path metrics = layout.attack(p) / "metrics.json";
    const fs::path summary = layout.traces(p) / "summary.jsonl";
    const fs::path ad = layout.traces(p) / "gallery_ad.json";
    bool ok = true;
    if (!fs::exists(metrics)) {
      missing.push_back("attack:" + p);
      ok = false;
    }
    if (!fs::exists(summary) || !fs::exists(ad)) {
      missing.push_back("protect:" + p);
      ok = false;
    }
    if (!ok) continue;
    ProtectorSummary s;
    s.protector = p;
    const Json m = Json::parse(ReadText(metrics, "report"));
    s.recovered_psnr = RealFromJson(m.at("psnr"));
    s.recovered_ssim = m.at("ssim").get<double>();
    const Json a = Json::parse(ReadText(ad, "report"));
    s.mean_ad = a.at(pooled ? "pooled" : "per_image_mean").get<double>();
    double loss = 0.0;
    for (const auto& j : ReadJsonl(summary, "report")) {
      if (j.at("split").get<std::string>() != "gallery") continue;
      loss += RealFromJson(j.at("final_loss"));
      s.constraint_met += j.at("constraint_met").get<bool>() ? 1 : 0;
      ++s.gallery_images;
    }
    s.mean_feature_loss = s.gallery_images ? loss / static_cast<double>(s.gallery_images) : 0.0;
    report.protectors.push_back(std::move(s));
  }
  Require(missing.empty(), ErrorCode::kFailedPrecondition,
          "report: missing cells: " + Join(missing, ", "));

  WriteText(layout.reports() / "report.jsonl", ReportToJsonl(report));
  WriteText(layout.reports() / "report.txt", ReportToTable(report));
  // Wall-clock provenance lives outside the report files so that reruns of
  // the same plan produce byte-identical reports.
  Json info;
  info["config_hash"] = report.config_hash;
  info["written_at_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count();
  WriteText(layout.reports() / "run_info.json", info.dump() + "\n");
  Progress(options, 1, "report: wrote " + (layout.reports() / "report.jsonl").string());
  return report;
}

EvalReport RunAll(const Plan& plan, const HarnessOptions& options) {
  RunGenData(plan, options);
  RunTrainExtractor(plan, options);
  RunProtect(plan, {}, options);
  RunAttack(plan, {}, options);
  RunEval(plan, {}, options);
  return RunReport(plan, options);
}

}  // namespace fadekit
