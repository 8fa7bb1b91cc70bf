#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ilp/core.hpp"
#include "ilp/probe.hpp"

namespace ilp {

/// Version stamped into every serialized plan.
inline constexpr int kPlanVersion = 1;

// ---- corpus mix ------------------------------------------------------------

struct Document {
  std::string id;
  std::string entity;
  std::string source;
  std::string text;
};

class KnowledgeSource {
 public:
  virtual ~KnowledgeSource() = default;
  virtual std::string name() const = 0;
  /// Up to `limit` documents about `entity`.
  virtual std::vector<Document> retrieve(const std::string& entity, std::size_t limit) const = 0;
};

/// In-memory source. Rows are {"entity": .., "text": .., "id"?: ..}; entity
/// matching is case-insensitive.
class FixtureKnowledgeSource : public KnowledgeSource {
 public:
  explicit FixtureKnowledgeSource(std::string name = "fixture");
  static FixtureKnowledgeSource from_rows(std::span<const Json> rows, std::string name = "fixture");

  void add(const std::string& entity, const std::string& text, std::string id = {});
  std::string name() const override { return name_; }
  std::vector<Document> retrieve(const std::string& entity, std::size_t limit) const override;

 private:
  std::string name_;
  std::map<std::string, std::vector<Document>> docs_;
};

struct RetrievalLogEntry {
  std::string entity;
  std::string source;
  std::size_t requested = 0;
  std::size_t returned = 0;
  std::size_t kept = 0;
  std::size_t excluded_verbatim = 0;
};

struct CorpusMixManifest {
  std::string general_source;
  double mix_general = 0.8;
  double mix_aug = 0.2;
  std::vector<std::string> target_entities;
  std::vector<Document> documents;
  std::vector<std::string> unresolved;
  std::vector<RetrievalLogEntry> retrieval_log;
  std::vector<std::string> warnings;

  std::size_t docs_for(const std::string& entity) const;
};

Json to_json(const CorpusMixManifest& m);

/// Target entities are the heads of blind triplets plus, for each
/// high-confidence error id, the heads extracted from its response (the
/// prompt when nothing is extracted). Sources are queried in order until
/// cfg.docs_per_entity documents are kept. Documents whose text equals an
/// unlearned response verbatim are dropped.
CorpusMixManifest build_cpt_manifest(const std::set<KnowledgeTriplet>& blind,
                                     const std::set<std::string>& errors,
                                     std::span<const SftInstance> instances,
                                     std::span<const KnowledgeSource* const> sources,
                                     const RunConfig& cfg,
                                     const std::string& general_source = "general");

// ---- conflict buckets ------------------------------------------------------

struct BucketPlan {
  int bucket_count = 0;
  int rebucket_interval = 0;
  std::map<std::string, int> assignment;
  /// Conflicting pairs that had to share a bucket.
  std::vector<std::pair<std::string, std::string>> unseparable;

  std::vector<std::size_t> sizes() const;
};

Json to_json(const BucketPlan& p);
BucketPlan bucket_plan_from_json(const Json& j);

/// Each group is shuffled (seeded) and dealt in rounds of B, every round
/// using each bucket at most once; a member goes to a bucket holding none
/// of its conflict partners when one is free, else it is recorded as
/// unseparable. A group without explicit pairs is treated as a clique.
/// Remaining ids fill the least-loaded buckets. Throws
/// std::invalid_argument when B < 2 and a group has two or more members,
/// or when a group references an id missing from all_ids.
BucketPlan plan_buckets(std::span<const ConflictGroup> groups,
                        std::span<const std::string> all_ids, int bucket_count,
                        std::uint64_t seed, int rebucket_interval = 500);

// ---- dynamic resampling ----------------------------------------------------

/// tag -> step -> accuracy
using AccuracyHistory = std::map<std::string, std::map<long, double>>;

struct ResampleEvent {
  long step = 0;
  std::string tag;
  double previous_acc = 0.0;
  double current_acc = 0.0;
  double delta = 0.0;  // relative or absolute drop, per the schedule mode
  double upweight = 1.0;
};

struct ResampleStepResult {
  std::vector<ResampleEvent> events;
  std::vector<std::string> warnings;
};

/// Drop of one tag between step-K and step under cfg.drop_mode.
double accuracy_drop(double previous, double current, DropMode mode);

/// Emits an event for every tag whose drop strictly exceeds
/// cfg.drop_threshold. Tags missing either history point are skipped with a
/// warning. Throws std::invalid_argument when step is not a positive
/// multiple of cfg.resample_interval.
ResampleStepResult resample_step(const AccuracyHistory& history, long step, const RunConfig& cfg);

struct ResampleSchedule {
  int interval = 500;
  double drop_threshold = 0.05;
  DropMode mode = DropMode::kRelative;
  double upweight = 2.0;
  std::vector<ResampleEvent> events;
  std::vector<std::string> shuffle_order;
  std::vector<std::string> warnings;
};

Json to_json(const ResampleSchedule& s);

/// Runs resample_step at every multiple of the interval present in history.
ResampleSchedule build_resample_schedule(const AccuracyHistory& history, const RunConfig& cfg);

/// Weight of an event's tag at `step`: the event factor decaying linearly to
/// 1 over one interval; 1 outside [event.step, event.step + interval).
double upweight_at(const ResampleEvent& event, int interval, long step);

// ---- epochs ----------------------------------------------------------------

enum class MetricOrientation { kLoss, kAccuracy };

std::string to_string(MetricOrientation o);

struct EpochSchedule {
  MetricOrientation orientation = MetricOrientation::kLoss;
  int e_min = 1;
  double delta = 0.01;
  int cap = 10;
  std::vector<std::pair<int, double>> history;
  int stop_epoch = 0;
  bool cap_reached = false;
  bool truncated = false;
  std::string reason;
};

Json to_json(const EpochSchedule& s);

/// Returns the metric for an epoch; nullopt or an exception is a failure.
using EpochEvaluator = std::function<std::optional<double>(int epoch)>;

/// Loss: stop at the first epoch whose loss exceeds the previous epoch's
/// by more than delta. Accuracy: stop at the first epoch that does not beat
/// the best so far. Either way stop_epoch is that epoch minus one.
EpochSchedule epoch_controller(const EpochEvaluator& evaluate, MetricOrientation orientation,
                               const RunConfig& cfg);

/// Re-runs the controller over a recorded history.
EpochSchedule replay(const EpochSchedule& recorded);

// ---- ordering --------------------------------------------------------------

/// Seeded uniform permutation of ids.
std::vector<std::string> shuffle_plan(std::span<const std::string> ids, std::uint64_t seed);

}  // namespace ilp
