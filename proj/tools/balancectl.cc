// Copyright 2026 The Balance Toolkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// balancectl: collect, train, check, simulate, report, preset.

#include <iostream>

#include <CLI11.hpp>

#include "balance/commands.h"

int main(int argc, char** argv) {
  using balance::CliOptions;
  CLI::App app{"Balance-control experiment pipeline"};
  app.set_version_flag("--version", std::string(balance::kToolkitVersion));
  app.require_subcommand(1);

  CliOptions opts;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out,-o", opts.out, "Output path or directory");
    sub->add_option("--seed", seed, "Override the configured seed");
    sub->add_flag("--quiet,-q", opts.quiet, "Suppress the human-readable report");
  };

  auto* collect = app.add_subcommand("collect", "Record an excitation dataset");
  collect->add_option("--config,-c", opts.configs, "Config file or preset name")->required();
  add_common(collect);

  auto* train = app.add_subcommand("train", "Fit the residual GP models");
  train->add_option("dataset", opts.inputs, "Dataset written by collect")->required();
  train->add_option("--config,-c", opts.configs, "Config for GP settings");
  add_common(train);

  auto* check = app.add_subcommand("check", "Check the nominal-model conditions");
  check->add_option("--config,-c", opts.configs, "Config file or preset name")->required();
  add_common(check);

  auto* simulate = app.add_subcommand("simulate", "Run closed-loop experiments");
  simulate->add_option("--config,-c", opts.configs, "Config file or preset name (repeatable)")
      ->required();
  simulate->add_option("--model,-m", opts.models, "Trained model (one, or one per config)");
  add_common(simulate);

  auto* report = app.add_subcommand("report", "Summarize a directory of runs");
  report->add_option("runs", opts.inputs, "Directory holding run directories")->required();
  add_common(report);

  auto* preset = app.add_subcommand("preset", "List presets or print one as JSON");
  preset->add_option("name", opts.inputs, "Preset name");
  add_common(preset);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? balance::kExitOk : balance::kExitConfig;
  }

  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) opts.seed = seed;
  }
  const auto* sub = app.get_subcommands().front();
  if (sub == collect) return balance::cmd_collect(opts, std::cout, std::cerr);
  if (sub == train) return balance::cmd_train(opts, std::cout, std::cerr);
  if (sub == check) return balance::cmd_check(opts, std::cout, std::cerr);
  if (sub == simulate) return balance::cmd_simulate(opts, std::cout, std::cerr);
  if (sub == report) return balance::cmd_report(opts, std::cout, std::cerr);
  return balance::cmd_preset(opts, std::cout, std::cerr);
}
