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


#include "fadekit/fadekit.h"

#include <atomic>
#include <cstring>
#include <exception>
#include <iostream>
#include <new>
#include <string>

#include "fadekit/error.hpp"
#include "fadekit/harness.hpp"
#include "fadekit/metrics.hpp"
#include "fadekit/nets.hpp"
#include "fadekit/protect.hpp"

struct fk_plan {
  fadekit::Plan plan;
};

struct fk_extractor {
  fadekit::FeatureExtractor model;
};

namespace {

thread_local std::string g_last_error;
std::atomic<int> g_verbosity{0};

fk_status SetError(fk_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

fk_status FromCode(fadekit::ErrorCode code) {
  switch (code) {
    case fadekit::ErrorCode::kInvalidArgument: return FK_ERR_INVALID_ARGUMENT;
    case fadekit::ErrorCode::kShapeMismatch: return FK_ERR_SHAPE_MISMATCH;
    case fadekit::ErrorCode::kIo: return FK_ERR_IO;
    case fadekit::ErrorCode::kNumeric: return FK_ERR_NUMERIC;
    case fadekit::ErrorCode::kFailedPrecondition: return FK_ERR_FAILED_PRECONDITION;
    case fadekit::ErrorCode::kInternal: return FK_ERR_INTERNAL;
  }
  return FK_ERR_INTERNAL;
}

// Runs fn, translating every exception into a status. Nothing escapes the
// C boundary.
template <typename Fn>
fk_status Guard(Fn&& fn) {
  try {
    fn();
    return FK_OK;
  } catch (const fadekit::Error& e) {
    return SetError(FromCode(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return SetError(FK_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return SetError(FK_ERR_INTERNAL, e.what());
  } catch (...) {
    return SetError(FK_ERR_INTERNAL, "unknown exception");
  }
}

#define FK_REQUIRE_ARG(cond, what)                                         \
  do {                                                                     \
    if (!(cond)) return SetError(FK_ERR_INVALID_ARGUMENT, (what));          \
  } while (0)

fadekit::HarnessOptions Options() {
  fadekit::HarnessOptions o;
  o.verbosity = g_verbosity.load();
  return o;
}

fk_status CopyOut(const std::string& value, char* buf, size_t buf_len, size_t* needed) {
  if (needed) *needed = value.size() + 1;
  if (buf == nullptr || buf_len < value.size() + 1) {
    return SetError(FK_ERR_INVALID_ARGUMENT, "buffer too small: need " +
                                                 std::to_string(value.size() + 1) + " bytes");
  }
  std::memcpy(buf, value.c_str(), value.size() + 1);
  return FK_OK;
}

fadekit::Tensor ImageFrom(const double* data, size_t c, size_t h, size_t w) {
  const size_t n = c * h * w;
  return fadekit::Tensor(fadekit::Shape{c, h, w}, std::vector<double>(data, data + n));
}

}  // namespace

extern "C" {

const char* fk_version(void) { return "0.1.0"; }

const char* fk_last_error(void) { return g_last_error.c_str(); }

const char* fk_status_name(fk_status status) {
  switch (status) {
    case FK_OK: return "ok";
    case FK_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case FK_ERR_SHAPE_MISMATCH: return "shape_mismatch";
    case FK_ERR_IO: return "io";
    case FK_ERR_NUMERIC: return "numeric";
    case FK_ERR_FAILED_PRECONDITION: return "failed_precondition";
    case FK_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void fk_set_verbosity(int level) { g_verbosity.store(level); }

fk_status fk_plan_new(fk_plan** out) {
  FK_REQUIRE_ARG(out != nullptr, "fk_plan_new: out is NULL");
  return Guard([&] { *out = new fk_plan{}; });
}

fk_status fk_plan_load(const char* path, fk_plan** out) {
  FK_REQUIRE_ARG(path != nullptr && out != nullptr, "fk_plan_load: NULL argument");
  return Guard([&] { *out = new fk_plan{fadekit::Plan::Load(path)}; });
}

fk_status fk_plan_parse(const char* text, fk_plan** out) {
  FK_REQUIRE_ARG(text != nullptr && out != nullptr, "fk_plan_parse: NULL argument");
  return Guard([&] { *out = new fk_plan{fadekit::Plan::Parse(text)}; });
}

void fk_plan_free(fk_plan* plan) { delete plan; }

fk_status fk_plan_set(fk_plan* plan, const char* key, const char* value) {
  FK_REQUIRE_ARG(plan && key && value, "fk_plan_set: NULL argument");
  return Guard([&] { plan->plan.Set(key, value); });
}

fk_status fk_plan_get(const fk_plan* plan, const char* key, char* buf, size_t buf_len,
                      size_t* needed) {
  FK_REQUIRE_ARG(plan && key, "fk_plan_get: NULL argument");
  std::string value;
  const fk_status s = Guard([&] { value = plan->plan.Get(key); });
  return s == FK_OK ? CopyOut(value, buf, buf_len, needed) : s;
}

fk_status fk_plan_serialize(const fk_plan* plan, char* buf, size_t buf_len, size_t* needed) {
  FK_REQUIRE_ARG(plan != nullptr, "fk_plan_serialize: plan is NULL");
  return CopyOut(plan->plan.Serialize(), buf, buf_len, needed);
}

fk_status fk_plan_hash(const fk_plan* plan, uint64_t* out) {
  FK_REQUIRE_ARG(plan && out, "fk_plan_hash: NULL argument");
  *out = plan->plan.Hash();
  return FK_OK;
}

size_t fk_plan_field_count(void) { return fadekit::PlanFields().size(); }

fk_status fk_plan_field(size_t index, const char** key, const char** default_value,
                        const char** help) {
  const auto fields = fadekit::PlanFields();
  FK_REQUIRE_ARG(index < fields.size(), "fk_plan_field: index out of range");
  // Field strings are literals, hence NUL-terminated.
  if (key) *key = fields[index].key.data();
  if (default_value) *default_value = fields[index].default_value.data();
  if (help) *help = fields[index].help.data();
  return FK_OK;
}

fk_status fk_check_protector(const char* name) {
  FK_REQUIRE_ARG(name != nullptr, "fk_check_protector: name is NULL");
  return Guard([&] { fadekit::CheckProtectorName(name); });
}

fk_status fk_check_setting(const char* name) {
  FK_REQUIRE_ARG(name != nullptr, "fk_check_setting: name is NULL");
  return Guard([&] { fadekit::ParseSetting(name); });
}

fk_status fk_gen_data(const fk_plan* plan) {
  FK_REQUIRE_ARG(plan != nullptr, "fk_gen_data: plan is NULL");
  return Guard([&] { fadekit::RunGenData(plan->plan, Options()); });
}

fk_status fk_train_extractor(const fk_plan* plan) {
  FK_REQUIRE_ARG(plan != nullptr, "fk_train_extractor: plan is NULL");
  return Guard([&] { fadekit::RunTrainExtractor(plan->plan, Options()); });
}

fk_status fk_protect(const fk_plan* plan, const char* protector) {
  FK_REQUIRE_ARG(plan != nullptr, "fk_protect: plan is NULL");
  return Guard([&] {
    std::vector<std::string> only;
    if (protector) only.emplace_back(protector);
    fadekit::RunProtect(plan->plan, only, Options());
  });
}

fk_status fk_attack(const fk_plan* plan, const char* protector) {
  FK_REQUIRE_ARG(plan != nullptr, "fk_attack: plan is NULL");
  return Guard([&] {
    std::vector<std::string> only;
    if (protector) only.emplace_back(protector);
    fadekit::RunAttack(plan->plan, only, Options());
  });
}

fk_status fk_eval(const fk_plan* plan, const char* setting) {
  FK_REQUIRE_ARG(plan != nullptr, "fk_eval: plan is NULL");
  return Guard([&] {
    std::vector<fadekit::Setting> only;
    if (setting) only.push_back(fadekit::ParseSetting(setting));
    fadekit::RunEval(plan->plan, only, Options());
  });
}

fk_status fk_report(const fk_plan* plan) {
  FK_REQUIRE_ARG(plan != nullptr, "fk_report: plan is NULL");
  return Guard([&] { fadekit::RunReport(plan->plan, Options()); });
}

fk_status fk_run_all(const fk_plan* plan) {
  FK_REQUIRE_ARG(plan != nullptr, "fk_run_all: plan is NULL");
  return Guard([&] { fadekit::RunAll(plan->plan, Options()); });
}

fk_status fk_psnr(const double* reference, const double* candidate, size_t channels,
                  size_t height, size_t width, double* out) {
  FK_REQUIRE_ARG(reference && candidate && out, "fk_psnr: NULL argument");
  return Guard([&] {
    *out = fadekit::Psnr(ImageFrom(reference, channels, height, width),
                         ImageFrom(candidate, channels, height, width));
  });
}

fk_status fk_ssim(const double* reference, const double* candidate, size_t channels,
                  size_t height, size_t width, double* out) {
  FK_REQUIRE_ARG(reference && candidate && out, "fk_ssim: NULL argument");
  return Guard([&] {
    *out = fadekit::Ssim(ImageFrom(reference, channels, height, width),
                         ImageFrom(candidate, channels, height, width));
  });
}

fk_status fk_ad_statistic(const double* samples, size_t n, double* out) {
  FK_REQUIRE_ARG(samples && out, "fk_ad_statistic: NULL argument");
  return Guard([&] { *out = fadekit::AdStatistic(std::span<const double>(samples, n)); });
}

fk_status fk_extractor_load(const char* path, fk_extractor** out) {
  FK_REQUIRE_ARG(path && out, "fk_extractor_load: NULL argument");
  return Guard([&] { *out = new fk_extractor{fadekit::FeatureExtractor::Load(path)}; });
}

void fk_extractor_free(fk_extractor* extractor) { delete extractor; }

fk_status fk_extractor_dim(const fk_extractor* extractor, size_t* out) {
  FK_REQUIRE_ARG(extractor && out, "fk_extractor_dim: NULL argument");
  *out = extractor->model.config().embed_dim;
  return FK_OK;
}

fk_status fk_embed(const fk_extractor* extractor, const double* image, size_t channels,
                   size_t height, size_t width, double* out) {
  FK_REQUIRE_ARG(extractor && image && out, "fk_embed: NULL argument");
  return Guard([&] {
    const fadekit::Tensor e = extractor->model.Embed(ImageFrom(image, channels, height, width));
    std::memcpy(out, e.data().data(), e.numel() * sizeof(double));
  });
}

fk_status fk_protect_image(const fk_extractor* extractor, const fk_plan* plan,
                           const char* protector, const double* image, size_t channels,
                           size_t height, size_t width, uint64_t noise_seed, uint64_t mask_seed,
                           double* out_image, double* out_final_loss, int* out_constraint_met) {
  FK_REQUIRE_ARG(protector && image && out_image, "fk_protect_image: NULL argument");
  return Guard([&] {
    const fadekit::Plan defaults;
    const fadekit::Plan& p = plan ? plan->plan : defaults;
    fadekit::ProtectContext ctx;
    ctx.model = extractor ? &extractor->model : nullptr;
    ctx.config = p.protect();
    ctx.config.noise_seed = noise_seed;
    ctx.config.mask_seed = mask_seed;
    ctx.blur_radius = p.blur_radius();
    ctx.mosaic_block = p.mosaic_block();
    ctx.perturb_amplitude = p.perturb_amplitude();
    ctx.joint_l1_weight = p.joint_l1_weight();
    const fadekit::ProtectionResult r =
        fadekit::ApplyProtector(protector, ImageFrom(image, channels, height, width), ctx);
    std::memcpy(out_image, r.protected_image.data().data(),
                r.protected_image.numel() * sizeof(double));
    if (out_final_loss) *out_final_loss = r.final_loss;
    if (out_constraint_met) *out_constraint_met = r.constraint_met_at_end ? 1 : 0;
  });
}

}  // extern "C"
