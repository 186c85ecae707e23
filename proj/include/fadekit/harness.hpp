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


#ifndef FADEKIT_HARNESS_HPP_
#define FADEKIT_HARNESS_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fadekit/nets.hpp"
#include "fadekit/protect.hpp"
#include "fadekit/synthdata.hpp"

namespace fadekit {

/// Which side of the retrieval uses protected images: P2O means protected
/// queries against an original gallery.
enum class Setting { kP2P, kO2P, kP2O, kO2O };

const char* SettingName(Setting setting);
/// Throws kInvalidArgument listing the four valid names.
Setting ParseSetting(std::string_view name);

enum class FieldType { kInt, kUnsigned, kReal, kBool, kText, kList };

struct PlanField {
  std::string_view key;  // "section.name"
  FieldType type;
  std::string_view default_value;
  std::string_view help;
  /// Where outputs go and how many threads produce them do not change any
  /// result, so those keys stay out of the config hash.
  bool hashed = true;
};

/// Every key a plan may contain, in file order.
std::span<const PlanField> PlanFields();

/// Experiment plan: a flat set of typed key=value fields grouped in
/// sections (run, data, extractor, protect, baselines, attack, eval).
/// Values are stored in canonical text form, so the hash does not depend
/// on how a number was spelled or in which order keys appeared.
class Plan {
 public:
  Plan();

  /// INI-style text: "[section]" headers, "key = value" lines, ';'
  /// comments. Unknown keys and malformed values are errors.
  static Plan Parse(std::string_view text);
  static Plan Load(const std::filesystem::path& path);

  void Set(std::string_view key, std::string_view value);
  const std::string& Get(std::string_view key) const;

  /// Sorted "key=value" lines, one per result-affecting field.
  std::string Canonical() const;
  std::uint64_t Hash() const;
  std::string HashHex() const;
  /// Sectioned text that Parse reads back to an equal plan.
  std::string Serialize() const;

  std::uint64_t master_seed() const;
  std::filesystem::path out_dir() const;
  /// 0 in the plan means one worker per hardware thread.
  std::size_t workers() const;

  DatasetConfig dataset() const;
  ExtractorConfig extractor() const;
  TrainConfig extractor_training() const;
  ProtectConfig protect() const;
  RecoveryConfig attacker() const;
  TrainConfig attack_training() const;
  double blur_radius() const;
  std::size_t mosaic_block() const;
  double perturb_amplitude() const;
  double joint_l1_weight() const;
  std::vector<std::string> protectors() const;
  std::vector<Setting> settings() const;

  bool operator==(const Plan& other) const { return values_ == other.values_; }

 private:
  std::int64_t Int(std::string_view key) const;
  std::uint64_t Unsigned(std::string_view key) const;
  double Real(std::string_view key) const;
  bool Bool(std::string_view key) const;
  std::vector<std::string> List(std::string_view key) const;

  std::map<std::string, std::string, std::less<>> values_;
};

/// Per-stage seed: DeriveSeed(master, stage).
std::uint64_t StageSeed(const Plan& plan, std::string_view stage);

/// Throws kInvalidArgument unless `name` is a registered protector:
/// none, pixelfade, gaussian_blur, mosaic, random_perturb, joint_l1,
/// noise_weight_<w> with 0 < w <= 1, target_other_identity, target_zero,
/// target_contrastive.
void CheckProtectorName(std::string_view name);

/// Inputs a protector may need beyond the image itself.
struct ProtectContext {
  const FeatureExtractor* model = nullptr;
  ProtectConfig config;  // carries the per-image seeds
  double blur_radius = 3.0;
  std::size_t mosaic_block = 4;
  double perturb_amplitude = 0.1;
  double joint_l1_weight = 1.0;
  std::optional<Tensor> other_identity_image;
};

/// Runs one registered protector. Pure image transforms return an empty
/// trace; their final_loss is measured with the model when one is given and
/// is NaN otherwise.
ProtectionResult ApplyProtector(std::string_view name, const Tensor& image,
                                const ProtectContext& context);

/// Fixed run-directory layout under the plan's output directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path extractor_weights() const { return models() / "extractor.bin"; }
  std::filesystem::path extractor_log() const { return models() / "extractor_log.jsonl"; }
  std::filesystem::path protected_dir(std::string_view protector) const;
  std::filesystem::path traces(std::string_view protector) const;
  std::filesystem::path attack(std::string_view protector) const;
  std::filesystem::path reports() const { return root / "reports"; }
};

struct RetrievalCell {
  std::string protector;
  Setting setting = Setting::kO2O;
  double rank1 = 0.0;
  double map = 0.0;
  double minp = 0.0;
};

struct ProtectorSummary {
  std::string protector;
  /// Recovered-versus-original quality on the gallery split.
  double recovered_psnr = 0.0;
  double recovered_ssim = 0.0;
  /// Mean per-image AD statistic of the protected gallery.
  double mean_ad = 0.0;
  /// Mean feature loss of the protected gallery against the originals.
  double mean_feature_loss = 0.0;
  std::size_t constraint_met = 0;
  std::size_t gallery_images = 0;
};

struct EvalReport {
  std::string config_hash;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::uint64_t> stage_seeds;
  std::vector<RetrievalCell> retrieval;
  std::vector<ProtectorSummary> protectors;

  const RetrievalCell& Cell(std::string_view protector, Setting setting) const;
  const ProtectorSummary& Summary(std::string_view protector) const;
};

/// One JSON record per line: a "retrieval" record per (protector, setting)
/// and an "attack" record per protector, each carrying hash and seeds.
std::string ReportToJsonl(const EvalReport& report);
EvalReport ParseReportJsonl(std::string_view text);
/// Aligned plain-text tables for people.
std::string ReportToTable(const EvalReport& report);

struct HarnessOptions {
  int verbosity = 0;
  /// Progress sink; defaults to standard error.
  std::function<void(const std::string&)> progress;
};

/// Pipeline stages. Each reads its inputs from the run directory, so stages
/// can be rerun in isolation, and writes only below it.
void RunGenData(const Plan& plan, const HarnessOptions& options = {});
void RunTrainExtractor(const Plan& plan, const HarnessOptions& options = {});
/// Protects train, query and gallery renders with each named protector
/// (all plan protectors when `only` is empty).
void RunProtect(const Plan& plan, std::span<const std::string> only = {},
                const HarnessOptions& options = {});
void RunAttack(const Plan& plan, std::span<const std::string> only = {},
               const HarnessOptions& options = {});
/// Retrieval metrics for every protector and setting, written to
/// reports/retrieval.jsonl.
void RunEval(const Plan& plan, std::span<const Setting> only_settings = {},
             const HarnessOptions& options = {});
/// Merges retrieval, attack and protection outputs into reports/report.jsonl
/// and reports/report.txt. Missing cells are an error naming them.
EvalReport RunReport(const Plan& plan, const HarnessOptions& options = {});
EvalReport RunAll(const Plan& plan, const HarnessOptions& options = {});

/// Calls fn(i) for i in [0, count) on up to `workers` threads. The first
/// exception thrown by any call is rethrown after all threads join.
void ParallelFor(std::size_t count, std::size_t workers,
                 const std::function<void(std::size_t)>& fn);

}  // namespace fadekit

#endif  // FADEKIT_HARNESS_HPP_
