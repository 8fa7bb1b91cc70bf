#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ilp/attribute.hpp"
#include "ilp/core.hpp"
#include "ilp/detect.hpp"
#include "ilp/inference.hpp"
#include "ilp/mc_convert.hpp"
#include "ilp/mitigate.hpp"
#include "ilp/probe.hpp"

namespace ilp {

struct LoadedEndpoint {
  std::string tag;
  std::unique_ptr<ModelEndpoint> endpoint;
  /// Same model trained on the reversed dataset order, when configured.
  std::unique_ptr<ModelEndpoint> reversed;
};

/// Endpoint config:
///   {"type": "http", "base_url", "path"?, "model"?, "timeout_s"?, "reversed"?: {..}}
///   {"type": "sim", "seed", "profiles", "fallback"?, "reversed"?: {..}}
LoadedEndpoint endpoint_from_json(const Json& j, const std::string& tag);
LoadedEndpoint load_endpoint(const std::filesystem::path& path);

struct DiagnosisInputs {
  std::span<const SftInstance> instances;
  const ModelEndpoint* base = nullptr;
  const ModelEndpoint* sft = nullptr;
  const ModelEndpoint* sft_reversed = nullptr;
  const CorrectnessJudge* judge = nullptr;
  std::vector<const KnowledgeSource*> sources;
  std::string base_tag = "base";
  std::string sft_tag = "sft";
  RunConfig cfg;
  /// Pre-converted items; converted in place from instances when empty.
  std::vector<McItem> items;
};

struct DiagnosisResult {
  RunConfig cfg;
  std::string base_tag;
  std::string sft_tag;
  bool has_reversed = false;
  std::size_t n_instances = 0;
  ConversionReport conversion;
  std::vector<ProbeFailure> probe_failures;
  DetectionReport detection;
  PositionSignal position;
  SftConflicts conflicts;
  std::vector<ProbeSummary> summaries;
  std::vector<AttributionLabel> labels;
  std::optional<TaxonomyReport> taxonomy;
  std::optional<CorpusMixManifest> manifest;
  std::optional<BucketPlan> buckets;
  std::optional<ResampleSchedule> resample;
  std::optional<Json> epoch_plan;
  std::vector<std::string> warnings;
};

/// Runs probe, detect, attribute and plan entirely in memory. Throws on
/// config violations or endpoint failures beyond cfg.failure_tolerance.
DiagnosisResult run_diagnosis(const DiagnosisInputs& in);

/// Canonical report body: deterministic for identical inputs, no timestamps.
Json canonical_report(const DiagnosisResult& r);

/// File names of the plans present in r, keyed by plan kind.
std::map<std::string, std::string> plan_files(const DiagnosisResult& r);

/// Writes report.json, run_meta.json, detection.json, labels.jsonl,
/// probe_summaries.jsonl, conflict_groups.jsonl, taxonomy.txt and one file
/// per emitted plan. Returns the written paths.
std::vector<std::filesystem::path> write_diagnosis(const std::filesystem::path& dir,
                                                   const DiagnosisResult& r, const Json& run_meta);

}  // namespace ilp
