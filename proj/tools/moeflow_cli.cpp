// Copyright 2026 The MoeFlow Authors
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

// moeflow: run / verify-equivalence / report / flops / export-params.
//
// Exit codes: 0 success, 1 internal error, 2 config or usage error,
// 3 verification failure, 4 I/O error. Every failure prints exactly one line
// to stderr starting with "error[<kind>]: ".

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moeflow/experiment.hpp"

namespace {

constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;
constexpr int kExitIo = 4;

int fail(const char* kind, const std::string& message, int code) {
  std::string one_line = message;
  for (char& c : one_line) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "error[" << kind << "]: " << one_line << "\n";
  return code;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategies;
  std::optional<std::string> out_dir;
  std::optional<std::string> params;
};

moeflow::ExperimentConfig load_with_overrides(const std::string& path, const Overrides& o) {
  moeflow::ExperimentConfig cfg = moeflow::load_config(path);
  if (o.seed) cfg.workload.seed = *o.seed;
  if (o.strategies) cfg.strategies = moeflow::parse_strategy_list(split_csv(*o.strategies));
  if (o.out_dir) {
    cfg.output.report_path = *o.out_dir + "/report.json";
    cfg.output.trace_path = *o.out_dir + "/trace.csv";
  }
  if (o.params) cfg.params_path = *o.params;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoE vision-transformer inference and accelerator scheduling simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string report_path;
  std::string archive_path;
  Overrides overrides;
  bool perturb = false;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--seed", overrides.seed, "override workload.seed");
    sub->add_option("--params", overrides.params, "load parameters from an archive");
  };

  auto* run = app.add_subcommand("run", "simulate the configured strategies and write report + traces");
  add_common(run);
  run->add_option("--strategies", overrides.strategies, "comma-separated subset of naive,cached,reordered");
  run->add_option("--out", overrides.out_dir, "output directory for report.json and trace CSVs");

  auto* verify = app.add_subcommand("verify-equivalence",
                                    "check expert-order execution against token-order execution, bitwise");
  add_common(verify);
  verify->add_flag("--perturb-accumulation", perturb, "combine experts in descending order (negative control)")
      ->group("");

  auto* report = app.add_subcommand("report", "print the hardware-metrics table of a report");
  report->add_option("report", report_path, "report JSON written by run")->required();

  auto* flops = app.add_subcommand("flops", "print the analytic FLOP breakdown for a config");
  flops->add_option("config", config_path, "experiment config (JSON)")->required();

  auto* export_params = app.add_subcommand("export-params", "write seeded parameters to an archive");
  export_params->add_option("config", config_path, "experiment config (JSON)")->required();
  export_params->add_option("archive", archive_path, "output path")->required();
  export_params->add_option("--seed", overrides.seed, "override workload.seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kExitConfig);
  }

  try {
    if (*run) {
      const auto cfg = load_with_overrides(config_path, overrides);
      const auto result = moeflow::run_and_write(cfg, config_path);
      std::cout << moeflow::report_table(result.report);
      std::cout << "report: " << cfg.output.report_path << "\n";
      return 0;
    }
    if (*verify) {
      const auto cfg = load_with_overrides(config_path, overrides);
      const auto order = perturb ? moeflow::ExpertOrder::kDescending : moeflow::ExpertOrder::kAscending;
      const auto v = moeflow::verify_equivalence(cfg, order);
      if (!v.ok) {
        return fail("verify",
                    std::to_string(v.mismatched_layers) + " of " + std::to_string(v.layers_checked) +
                        " MoE layers differ; max abs discrepancy " + std::to_string(v.max_abs_diff),
                    kExitVerify);
      }
      std::cout << "equivalent: " << v.layers_checked << " MoE layers bitwise identical\n";
      return 0;
    }
    if (*report) {
      std::cout << moeflow::report_table(moeflow::load_report(report_path));
      return 0;
    }
    if (*flops) {
      const auto cfg = moeflow::load_config(config_path);
      std::cout << moeflow::flops_table(cfg.model);
      return 0;
    }
    if (*export_params) {
      const auto cfg = load_with_overrides(config_path, overrides);
      moeflow::to_archive(moeflow::seeded_init(cfg.model, cfg.workload.seed)).save(archive_path);
      std::cout << "wrote " << archive_path << "\n";
      return 0;
    }
  } catch (const moeflow::ConfigError& e) {
    return fail("config", e.what(), kExitConfig);
  } catch (const moeflow::IoError& e) {
    return fail("io", e.what(), kExitIo);
  } catch (const moeflow::ArchiveError& e) {
    return fail("io", e.what(), kExitIo);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kExitInternal);
  }
  return kExitInternal;
}
