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


// fadekit: command-line front end over the C API.
//
//   fadekit all --plan plans/default.cfg --out runs/a
//   fadekit protect --plan p.cfg --epsilon 0.05 --protector pixelfade
//
// Exit status: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fadekit/fadekit.h"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct PlanOverride {
  const char* flag;
  const char* key;
  const char* help;
};

// Dedicated flags; every other plan key is reachable through --set.
constexpr PlanOverride kOverrides[] = {
    {"--out", "run.out", "run directory (run.out)"},
    {"--seed", "run.seed", "master seed (run.seed)"},
    {"--workers", "run.workers", "per-image worker threads, 0 = all cores (run.workers)"},
    {"--epsilon", "protect.epsilon", "feature-constraint threshold (protect.epsilon)"},
    {"--iters", "protect.T", "protection iterations (protect.T)"},
    {"--masks", "protect.I", "masks per replacement cycle (protect.I)"},
    {"--alpha", "protect.alpha", "momentum decay (protect.alpha)"},
    {"--beta", "protect.beta", "step size (protect.beta)"},
};

std::string PlanKeysFooter() {
  std::ostringstream out;
  out << "Plan keys (plan file sections, or --set section.key=value):\n";
  for (size_t i = 0; i < fk_plan_field_count(); ++i) {
    const char* key = nullptr;
    const char* def = nullptr;
    const char* help = nullptr;
    fk_plan_field(i, &key, &def, &help);
    char line[256];
    std::snprintf(line, sizeof(line), "  %-34s %-36s %s\n", key, def, help);
    out << line;
  }
  out << "\nExit status: 0 success, 1 runtime failure, 2 usage error.\n";
  return out.str();
}

class PlanGuard {
 public:
  ~PlanGuard() { fk_plan_free(plan_); }
  fk_plan** out() { return &plan_; }
  fk_plan* get() const { return plan_; }

 private:
  fk_plan* plan_ = nullptr;
};

int UsageError(const std::string& message) {
  std::cerr << "fadekit: " << message << "\n";
  return kExitUsage;
}

int RuntimeError(const char* stage) {
  std::cerr << "fadekit " << stage << ": " << fk_last_error() << "\n";
  return kExitRuntime;
}

int EmitReport(const fk_plan* plan) {
  char out_dir[4096];
  if (fk_plan_get(plan, "run.out", out_dir, sizeof(out_dir), nullptr) != FK_OK) {
    return RuntimeError("report");
  }
  std::ifstream in(std::string(out_dir) + "/reports/report.jsonl", std::ios::binary);
  if (!in) {
    std::cerr << "fadekit report: report.jsonl not found under " << out_dir << "\n";
    return kExitRuntime;
  }
  std::cout << in.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fadekit: PixelFade image protection experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(PlanKeysFooter());

  std::string plan_path;
  std::vector<std::string> sets;
  std::optional<std::string> values[std::size(kOverrides)];
  int verbosity = 0;
  app.add_option("--plan", plan_path, "plan file (defaults apply to keys it omits)");
  for (size_t i = 0; i < std::size(kOverrides); ++i) {
    app.add_option(kOverrides[i].flag, values[i], kOverrides[i].help);
  }
  app.add_option("--set", sets, "override any plan key, KEY=VALUE (repeatable)");
  app.add_flag("-v,--verbose", verbosity, "progress on standard error (repeat for more)");

  std::string protector;
  std::string setting;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* train = app.add_subcommand("train-extractor", "train the authorized embedding model");
  auto* protect = app.add_subcommand("protect", "protect train/query/gallery images");
  protect->add_option("--protector", protector, "only this protector (default: plan list)");
  auto* attack = app.add_subcommand("attack", "train and evaluate the recovery attacker");
  attack->add_option("--protector", protector, "only this protector (default: plan list)");
  auto* eval = app.add_subcommand("eval", "retrieval metrics per protector and setting");
  eval->add_option("--setting", setting, "only this setting: P2P, O2P, P2O or O2O");
  auto* report = app.add_subcommand("report", "merge results into reports/ and print JSONL");
  auto* all = app.add_subcommand("all", "run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (!protector.empty() && fk_check_protector(protector.c_str()) != FK_OK) {
    return UsageError(fk_last_error());
  }
  if (!setting.empty() && fk_check_setting(setting.c_str()) != FK_OK) {
    return UsageError(fk_last_error());
  }

  PlanGuard plan;
  const fk_status loaded =
      plan_path.empty() ? fk_plan_new(plan.out()) : fk_plan_load(plan_path.c_str(), plan.out());
  if (loaded != FK_OK) return UsageError(fk_last_error());
  for (size_t i = 0; i < std::size(kOverrides); ++i) {
    if (values[i] && fk_plan_set(plan.get(), kOverrides[i].key, values[i]->c_str()) != FK_OK) {
      return UsageError(std::string(kOverrides[i].flag) + ": " + fk_last_error());
    }
  }
  for (const auto& kv : sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) return UsageError("--set expects KEY=VALUE, got '" + kv + "'");
    if (fk_plan_set(plan.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()) != FK_OK) {
      return UsageError(std::string("--set: ") + fk_last_error());
    }
  }
  fk_set_verbosity(verbosity);

  const char* only_protector = protector.empty() ? nullptr : protector.c_str();
  if (gen->parsed()) return fk_gen_data(plan.get()) == FK_OK ? 0 : RuntimeError("gen-data");
  if (train->parsed()) {
    return fk_train_extractor(plan.get()) == FK_OK ? 0 : RuntimeError("train-extractor");
  }
  if (protect->parsed()) {
    return fk_protect(plan.get(), only_protector) == FK_OK ? 0 : RuntimeError("protect");
  }
  if (attack->parsed()) {
    return fk_attack(plan.get(), only_protector) == FK_OK ? 0 : RuntimeError("attack");
  }
  if (eval->parsed()) {
    const char* only_setting = setting.empty() ? nullptr : setting.c_str();
    return fk_eval(plan.get(), only_setting) == FK_OK ? 0 : RuntimeError("eval");
  }
  if (report->parsed()) {
    if (fk_report(plan.get()) != FK_OK) return RuntimeError("report");
    return EmitReport(plan.get());
  }
  if (all->parsed()) {
    if (fk_run_all(plan.get()) != FK_OK) return RuntimeError("all");
    return EmitReport(plan.get());
  }
  return UsageError("no subcommand");
}
