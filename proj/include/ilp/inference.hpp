#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ilp/core.hpp"

namespace ilp {

/// One answer to a multiple-choice item.
struct Answer {
  std::size_t chosen_index = 0;
  std::vector<double> option_probs;
  double confidence = 0.0;
};

class EndpointError : public std::runtime_error {
 public:
  EndpointError(const std::string& what, bool transient)
      : std::runtime_error(what), transient_(transient) {}
  bool transient() const noexcept { return transient_; }

 private:
  bool transient_;
};

/// Anything that answers multiple-choice probes with option-level
/// probabilities. Implementations must be safe to call concurrently.
class ModelEndpoint {
 public:
  virtual ~ModelEndpoint() = default;
  virtual Answer answer(const McItem& item, double temperature, std::uint64_t seed) const = 0;
};

/// Throws EndpointError (non-transient) if the answer breaks the endpoint
/// contract: probabilities must be non-negative, sum to 1 within 1e-9 and
/// cover every option.
void validate_answer(const Answer& answer, std::size_t n_options);

struct ProbeRecord {
  std::string instance_id;
  std::string model_tag;
  std::size_t correct_index = 0;
  std::vector<Answer> runs;
  std::size_t bon_choice = 0;
  double pass_rate = 0.0;

  bool bon_correct() const { return bon_choice == correct_index; }
  std::size_t correct_runs() const;
};

Json to_json(const ProbeRecord& record);
ProbeRecord record_from_json(const Json& j);

/// Per-option mean of option_probs over all runs.
std::vector<double> mean_distribution(const ProbeRecord& record);

/// Chosen index of the most confident run; ties go to the earliest run.
std::size_t best_of_n(std::span<const Answer> runs);

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_delay{100};
};

class ProbeError : public std::runtime_error {
 public:
  ProbeError(std::string instance_id, int attempts, const std::string& what)
      : std::runtime_error(what), instance_id_(std::move(instance_id)), attempts_(attempts) {}
  const std::string& instance_id() const noexcept { return instance_id_; }
  int attempts() const noexcept { return attempts_; }

 private:
  std::string instance_id_;
  int attempts_;
};

/// Runs `n_runs` answers with run seeds seed, seed+1, ... Transient endpoint
/// errors are retried with exponential backoff.
ProbeRecord probe_instance(const ModelEndpoint& endpoint, const McItem& item, int n_runs,
                           double temperature, std::uint64_t seed,
                           const RetryPolicy& retry = {}, const std::string& model_tag = "");

struct ProbeFailure {
  std::string instance_id;
  int attempts = 0;
  std::string message;
};

struct ProbeBatch {
  std::vector<ProbeRecord> records;  // input order, failed items omitted
  std::vector<ProbeFailure> failures;
};

class AggregateProbeError : public std::runtime_error {
 public:
  AggregateProbeError(const std::string& what, std::vector<ProbeFailure> failures)
      : std::runtime_error(what), failures_(std::move(failures)) {}
  const std::vector<ProbeFailure>& failures() const noexcept { return failures_; }

 private:
  std::vector<ProbeFailure> failures_;
};

struct ProbeOptions {
  std::string model_tag;
  RetryPolicy retry;
  /// Completed records are appended here as they finish; records already
  /// present are reused instead of re-probed.
  std::optional<std::filesystem::path> checkpoint;
  std::function<void(std::size_t done, std::size_t total, std::size_t failed)> progress;
};

/// Per-item seed used by probe_dataset; exposed so callers can reproduce
/// individual records.
std::uint64_t item_seed(std::uint64_t run_seed, const std::string& instance_id);

/// Probes every item with up to cfg.max_in_flight concurrent workers.
/// Output order equals input order regardless of scheduling. Throws
/// AggregateProbeError when the failed fraction exceeds cfg.failure_tolerance.
ProbeBatch probe_dataset(const ModelEndpoint& endpoint, std::span<const McItem> items,
                         const RunConfig& cfg, const ProbeOptions& options = {});

// ---- simulated model -------------------------------------------------------

/// Declared behaviour of the simulated model on one item.
struct SimProfile {
  enum class WrongMode { kSpread, kFixed };

  double correct_prob = 0.99;
  /// kSpread spreads wrong mass evenly; kFixed puts it all on one wrong
  /// option, producing a confidently wrong model.
  WrongMode wrong_mode = WrongMode::kSpread;
};

Json to_json(const SimProfile& profile);
SimProfile profile_from_json(const Json& j);

/// The option distribution the simulator answers from.
std::vector<double> sim_distribution(const SimProfile& profile, std::size_t n_options,
                                     std::size_t correct_index);

/// Answers from declared per-item correctness. At temperature > 0 each run
/// picks the correct option with exactly the declared probability; at
/// temperature 0 it returns the mode deterministically.
///
/// Profiles are looked up by instance_id, then by the id's prefix up to and
/// including '#' (so "q1#" covers derived items such as "q1#t0"), then the
/// fallback. Unknown ids raise a permanent EndpointError.
class SimEndpoint : public ModelEndpoint {
 public:
  SimEndpoint(std::unordered_map<std::string, SimProfile> profiles, std::uint64_t seed,
              std::optional<SimProfile> fallback = std::nullopt);

  Answer answer(const McItem& item, double temperature, std::uint64_t seed) const override;

  const SimProfile& profile_for(const std::string& instance_id) const;

 private:
  std::unordered_map<std::string, SimProfile> profiles_;
  std::uint64_t seed_;
  std::optional<SimProfile> fallback_;
};

}  // namespace ilp
