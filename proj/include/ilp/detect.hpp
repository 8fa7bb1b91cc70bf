#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ilp/core.hpp"
#include "ilp/inference.hpp"

namespace ilp {

struct InstanceDetection {
  double pass_rate = 0.0;
  bool bon_correct = false;
  double severity = 0.0;
};

struct DetectionReport {
  std::size_t n_instances = 0;
  double dataset_acc = 0.0;
  std::set<std::string> unlearned_ids;
  std::vector<std::string> candidate_ids;  // severity descending, then id
  std::map<std::string, InstanceDetection> per_instance;
  std::optional<double> stability;

  double prevalence() const {
    return n_instances == 0 ? 0.0
                            : static_cast<double>(unlearned_ids.size()) /
                                  static_cast<double>(n_instances);
  }
};

Json to_json(const DetectionReport& report);
DetectionReport detection_from_json(const Json& j);

class AlignmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training-set accuracy: fraction of instances whose mean option
/// distribution has its argmax (lowest index on ties) at the correct option.
double compute_accuracy(std::span<const ProbeRecord> records, std::span<const McItem> items);

/// 1 - pass_rate, plus 0.5 when best-of-N also misses.
double severity(double pass_rate, bool bon_correct);

/// Flags instances with pass_rate strictly below cfg.pass_threshold and
/// ranks the top cfg.top_k of them by severity.
DetectionReport detect_unlearned(std::span<const ProbeRecord> records, const RunConfig& cfg);

/// Re-probes with cfg.seed and every extra seed; returns
/// |intersection| / |union| of the unlearned sets (1 when the union is empty).
double stability_check(const ModelEndpoint& endpoint, std::span<const McItem> items,
                       const RunConfig& cfg, std::span<const std::uint64_t> extra_seeds);

}  // namespace ilp
