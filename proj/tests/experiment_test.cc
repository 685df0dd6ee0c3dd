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

#include "moeflow/experiment.hpp"

#include <chrono>
#include <filesystem>
#include <sstream>
#include <string>

#include "gtest/gtest.h"

namespace moeflow {
namespace {

ExperimentConfig desk_config() {
  ExperimentConfig cfg;
  cfg.workload.num_frames = 2;
  cfg.workload.seed = 3;
  return cfg;
}

TEST(RunTest, TwoFramesThreeStrategies) {
  const RunResult r = run_experiment(desk_config());
  const json& s = r.report.at("strategies");
  ASSERT_EQ(s.size(), 3u);
  const json& reo = s.at("reordered");
  EXPECT_DOUBLE_EQ(reo.at("energy_j").get<double>(),
                   reo.at("latency_s").get<double>() * calibrated_cost_model().power);
  EXPECT_TRUE(s.at("cached").contains("cache"));
  EXPECT_FALSE(reo.contains("cache"));
  EXPECT_EQ(r.report.at("balancing_loss").at("per_frame_layer").size(), 2u);
}

TEST(RunTest, ReorderedOnlyHasNoCacheFields) {
  ExperimentConfig cfg = desk_config();
  cfg.strategies = {Strategy::kReordered};
  const RunResult r = run_experiment(cfg);
  const std::string text = report_text(r.report);
  EXPECT_EQ(text.find("\"cache\""), std::string::npos);
  EXPECT_EQ(text.find("hits"), std::string::npos);
  EXPECT_EQ(r.report.at("strategies").size(), 1u);
}

TEST(RunTest, ByteIdenticalAcrossInvocations) {
  for (bool synthetic : {false, true}) {
    ExperimentConfig cfg = desk_config();
    if (synthetic) cfg.workload.synthetic = SyntheticRouting{};
    EXPECT_EQ(report_text(run_experiment(cfg).report), report_text(run_experiment(cfg).report));
  }
}

TEST(RunTest, SeedChangesReport) {
  ExperimentConfig a = desk_config(), b = desk_config();
  b.workload.seed = 4;
  EXPECT_NE(report_text(run_experiment(a).report), report_text(run_experiment(b).report));
}

TEST(RunTest, DeskConfigUnderTenSeconds) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg = desk_config();
  cfg.workload.num_frames = 4;
  run_experiment(cfg);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 10.0);
}

TEST(RunTest, HistogramsCountEverySelection) {
  const ExperimentConfig cfg = desk_config();
  const RunResult r = run_experiment(cfg);
  std::uint64_t total = 0;
  for (const auto& h : r.report.at("routing_histograms"))
    for (const auto& c : h.at("counts")) total += c.get<std::uint64_t>();
  EXPECT_EQ(total, cfg.workload.num_frames * cfg.model.moe_layer_count() * cfg.model.token_count() *
                       cfg.model.top_k);
}

TEST(RunTest, WritesReportTracesAndSidecar) {
  ExperimentConfig cfg = desk_config();
  const auto dir = std::filesystem::temp_directory_path() / "moeflow_run_test";
  std::filesystem::remove_all(dir);
  cfg.output.report_path = (dir / "report.json").string();
  cfg.output.trace_path = (dir / "trace.csv").string();
  run_and_write(cfg, "cfg.json");
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json.meta.json"));
  for (const char* s : {"naive", "cached", "reordered"}) {
    const auto path = dir / ("trace." + std::string(s) + ".csv");
    ASSERT_TRUE(std::filesystem::exists(path)) << path;
    std::string header;
    std::ifstream(path) >> header;
    EXPECT_EQ(header, "frame,layer,phase_kind,resource,start_ns,end_ns,expert_id");
  }
  // Sidecar carries the timestamp; the report does not.
  EXPECT_EQ(read_text_file(cfg.output.report_path).find("generated_at"), std::string::npos);
  EXPECT_NE(read_text_file(cfg.output.report_path + ".meta.json").find("generated_at"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(TraceTest, CsvRowsAndPaths) {
  std::ostringstream out;
  write_trace_csv(out, {{0, 1, Phase::kLoad, Resource::kMemory, 1500, 2500, 3}});
  EXPECT_EQ(out.str(), "frame,layer,phase_kind,resource,start_ns,end_ns,expert_id\n"
                       "0,1,load,memory,1.500,2.500,3\n");
  EXPECT_EQ(trace_path_for("out/trace.csv", Strategy::kCached), "out/trace.cached.csv");
}

TEST(ReportTableTest, SingleStrategyRatiosAreOne) {
  ExperimentConfig cfg = desk_config();
  cfg.strategies = {Strategy::kCached};
  const std::string table = report_table(run_experiment(cfg).report);
  EXPECT_NE(table.find("1.00×"), std::string::npos) << table;
  EXPECT_EQ(table.find("2.40×"), std::string::npos);
}

TEST(ReportTableTest, CalibratedMemoryRatio) {
  ExperimentConfig cfg = desk_config();
  cfg.model = ModelConfig::vit_small();
  cfg.workload.synthetic = SyntheticRouting{};
  cfg.workload.num_frames = 1;
  const RunResult r = run_experiment(cfg);
  const std::string table = report_table(r.report);
  const auto naive_line = table.substr(table.find("naive"), table.find('\n', table.find("naive")) - table.find("naive"));
  EXPECT_NE(naive_line.find("2.40×"), std::string::npos) << table;
  EXPECT_NE(table.find("Energy (W·s)"), std::string::npos);
}

TEST(ReportTableTest, CorruptReportIsIoError) {
  EXPECT_THROW(report_table(json::object()), IoError);
  EXPECT_THROW(report_table(json{{"strategies", {{"naive", {{"latency_ms", 1}}}}}}), IoError);
}

TEST(VerifyTest, DefaultConfigIsEquivalent) {
  for (auto kind : {RoutingKind::kSingle, RoutingKind::kMultiGate, RoutingKind::kTaskConditioned}) {
    ExperimentConfig cfg = desk_config();
    cfg.model.routing_kind = kind;
    const VerifyResult v = verify_equivalence(cfg);
    EXPECT_TRUE(v.ok);
    EXPECT_EQ(v.layers_checked, 4u);
    EXPECT_EQ(v.max_abs_diff, 0.0f);
  }
}

TEST(VerifyTest, PerturbedOrderIsCaught) {
  const VerifyResult v = verify_equivalence(desk_config(), ExpertOrder::kDescending);
  EXPECT_FALSE(v.ok);
  EXPECT_GT(v.mismatched_layers, 0u);
  EXPECT_GT(v.max_abs_diff, 0.0f);
}

TEST(VerifyTest, NoFramesIsVacuouslyEquivalent) {
  ExperimentConfig cfg = desk_config();
  cfg.workload.num_frames = 0;
  const VerifyResult v = verify_equivalence(cfg);
  EXPECT_TRUE(v.ok);
  EXPECT_EQ(v.layers_checked, 0u);
}

TEST(SyntheticRoutingTest, DecisionShapeAndSkew) {
  ModelConfig cfg = ModelConfig::vit_small();
  const GatingDecision u = synthetic_decision(cfg, {}, 1, 0, 0, 0);
  EXPECT_EQ(u.token_count(), 1024u);
  EXPECT_EQ(u.expert_ids.size(), 1024u * 4u);
  SyntheticRouting skew{SyntheticRouting::Distribution::kSkewed, 2.0};
  const GatingDecision s = synthetic_decision(cfg, skew, 1, 0, 0, 0);
  // Skewed routing concentrates load, so its balancing loss exceeds uniform.
  EXPECT_GT(balancing_loss(s), balancing_loss(u));
}

}  // namespace
}  // namespace moeflow
