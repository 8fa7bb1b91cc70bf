#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ilp/attribute.hpp"
#include "ilp/core.hpp"
#include "ilp/inference.hpp"
#include "ilp/mitigate.hpp"

namespace ilp {

// ---- synthetic corpora -----------------------------------------------------

/// Sandbox recipe. File format:
///   {"n_instances": 1000, "seed": 7, "n_options": 4,
///    "cause_mix": {"KnowledgeLimitation": 0.187, ..., "Unattributed": 0.22}}
/// Fractions may sum to less than 1; the remainder is fully learned.
struct SimConfig {
  std::size_t n_instances = 1000;
  std::map<Cause, double> cause_mix;
  std::uint64_t seed = 0;
  int n_options = 4;
};

/// The five-cause mix used as the default sandbox recipe.
std::map<Cause, double> table_mix();

Json to_json(const SimConfig& c);
/// Throws ConfigError on unknown keys, unknown causes, negative fractions,
/// fractions summing above 1 or n_instances == 0.
SimConfig sim_config_from_json(const Json& j);

struct InstanceTruth {
  std::string id;
  std::size_t position_index = 0;
  std::size_t decile = 0;
  std::optional<Cause> true_cause;  // nullopt: learned
  SimProfile base;
  SimProfile sft;
  SimProfile sft_reversed;
  SimProfile triplet;  // base model on the instance's extracted facts
  std::optional<std::string> conflict_partner;
  bool judged_correct = true;
};

Json to_json(const InstanceTruth& t);

struct SandboxData {
  SimConfig config;
  std::vector<SftInstance> instances;
  std::vector<InstanceTruth> truth;
  Json base_endpoint;  // {"type": "sim", "seed", "profiles"}
  Json sft_endpoint;   // same, plus "reversed"
};

/// Deterministic in cfg. Class counts use largest-remainder rounding.
/// LeftSideForgetting instances take the first positions; instances whose
/// only evidence is residual never share a decile with them.
SandboxData synthesize(const SimConfig& cfg);

/// Builds a SimEndpoint from {"type": "sim", "seed", "profiles", "fallback"?}.
std::unique_ptr<SimEndpoint> sim_endpoint_from_json(const Json& j);

/// Writes dataset.jsonl, ground_truth.jsonl, base_endpoint.json and
/// sft_endpoint.json into dir.
void write_sandbox(const std::filesystem::path& dir, const SandboxData& data);

// ---- toy learner -----------------------------------------------------------

struct ToyParams {
  double lr = 0.6;
  double consolidation = 0.5;  // share of fresh gain that becomes long-term
  double forget_rate = 0.02;   // per step of not being trained
  double conflict_cancel = 0.1;
  double overwrite = 0.3;
  double logit_scale = 3.0;
  double temperature = 0.7;
  int n_options = 4;
  std::size_t batch_size = 10;
};

/// Retention model. Each instance has a retention r and a consolidated floor
/// f <= r. Training raises r towards 1 and pulls f towards r; every step an
/// instance is not trained, r decays towards f exponentially, so earlier
/// data loses more the longer it goes unseen. Training one member of a
/// conflicting pair without the other overwrites part of the other's
/// retention; training both in one batch mostly cancels.
class ToyLearner {
 public:
  ToyLearner(std::span<const SftInstance> instances, ToyParams params,
             std::map<std::string, std::string> partners = {});

  /// One optimizer step over the given instance indices (duplicates allowed).
  void step(std::span<const std::size_t> batch);

  long steps() const { return step_; }
  std::size_t size() const { return r_.size(); }
  double retention(std::size_t i) const;
  /// Probability of picking the correct option.
  double accuracy(std::size_t i) const;
  double accuracy(const std::string& id) const;
  std::size_t index_of(const std::string& id) const;
  const ToyParams& params() const { return params_; }

  /// Answers multiple-choice items from current retention.
  std::unique_ptr<SimEndpoint> endpoint(std::uint64_t seed) const;

 private:
  void settle(std::size_t i);

  ToyParams params_;
  std::vector<std::string> ids_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::optional<std::size_t>> partner_;
  std::vector<double> r_;
  std::vector<double> f_;
  std::vector<long> as_of_;
  long step_ = 0;
};

struct ToyTrainOptions {
  int epochs = 1;
  std::vector<std::string> order;  // empty: dataset order
  /// Reshuffle with shuffle_plan(order, mix_seed(shuffle_seed, epoch)) at
  /// the start of every epoch.
  bool reshuffle = false;
  std::uint64_t shuffle_seed = 0;
  std::optional<BucketPlan> buckets;
  bool resample = false;
  /// Drives history snapshots and resampling (resample_interval,
  /// drop_threshold, drop_mode, upweight_factor).
  RunConfig cfg;
  std::set<std::string> exclude;
  std::uint64_t seed = 0;
};

struct ToyHistory {
  std::vector<long> steps;
  AccuracyHistory per_tag;
  std::vector<std::vector<double>> per_decile;  // one row of kDeciles per snapshot
  std::vector<ResampleEvent> events;
};

/// Trains in batches of params.batch_size. With a bucket plan, each epoch
/// walks buckets in index order and batches never mix buckets. With
/// resampling, accuracy per dataset_tag is checked every resample_interval
/// steps and tags that dropped get extra samples from their own bucket.
/// Throws std::invalid_argument on unknown ids in order, plan or exclude.
ToyHistory toy_train(ToyLearner& learner, std::span<const SftInstance> instances,
                     const ToyTrainOptions& options);

/// Mean accuracy per position decile.
std::vector<double> decile_means(const ToyLearner& learner, std::span<const SftInstance> instances);

}  // namespace ilp
