#pragma once

#include <array>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ilp/core.hpp"
#include "ilp/detect.hpp"
#include "ilp/inference.hpp"
#include "ilp/probe.hpp"

namespace ilp {

enum class Cause {
  kKnowledgeLimitation,
  kBaseModelConflict,
  kIntraSftConflict,
  kLeftSideForgetting,
  kInsufficientTraining,
  kUnattributed,
};

inline constexpr std::array<Cause, 6> kAllCauses = {
    Cause::kKnowledgeLimitation, Cause::kBaseModelConflict,    Cause::kIntraSftConflict,
    Cause::kLeftSideForgetting,  Cause::kInsufficientTraining, Cause::kUnattributed};

std::string to_string(Cause c);
/// Throws std::invalid_argument for unknown names.
Cause cause_from_string(const std::string& name);

struct AttributionLabel {
  std::string instance_id;
  Cause cause = Cause::kUnattributed;
  Json evidence = Json::object();
};

Json to_json(const AttributionLabel& label);
AttributionLabel label_from_json(const Json& j);

class AttributionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- position signal -------------------------------------------------------

inline constexpr std::size_t kDeciles = 10;
inline constexpr std::size_t kMinDecileCount = 10;

/// Decile of a position in a dataset of n instances.
std::size_t decile_of(std::size_t position_index, std::size_t n);

struct DecileAccuracy {
  std::size_t count = 0;
  double accuracy = 0.0;
};

/// Per-decile accuracy (argmax of the mean distribution) keyed by original
/// dataset position. Records without a position entry throw AlignmentError.
std::vector<DecileAccuracy> decile_accuracy(std::span<const ProbeRecord> records,
                                            const std::map<std::string, std::size_t>& positions,
                                            std::size_t n);

struct DecileStatus {
  std::size_t decile = 0;
  std::size_t count = 0;
  double original_acc = 0.0;
  double reversed_acc = 0.0;
  double gap = 0.0;  // relative or absolute per cfg.drop_mode
  bool available = false;
  bool marked = false;
};

struct PositionSignal {
  std::size_t n_positions = 0;
  std::vector<DecileStatus> deciles;

  bool marked(std::size_t position_index) const;
};

Json to_json(const PositionSignal& s);
PositionSignal position_signal_from_json(const Json& j);

/// A decile is marked when the original-order accuracy is below the
/// reversed-order accuracy by more than cfg.drop_threshold. A zero
/// original accuracy with a positive reversed one counts as marked.
/// Deciles with fewer than kMinDecileCount instances are unavailable.
PositionSignal position_signal(std::span<const DecileAccuracy> original,
                               std::span<const DecileAccuracy> reversed, std::size_t n_positions,
                               const RunConfig& cfg);

// ---- cascade ---------------------------------------------------------------

/// Labels every candidate in report.candidate_ids with the first matching
/// cause, checking signal rules in cfg.cascade_order, then the residual
/// rules (InsufficientTraining when pass_rate > 0, else Unattributed).
std::vector<AttributionLabel> attribute(const DetectionReport& report,
                                        const std::map<std::string, ProbeSummary>& summaries,
                                        const PositionSignal& position, const RunConfig& cfg);

struct TaxonomyReport {
  std::size_t total = 0;
  std::map<Cause, std::size_t> counts;
  std::map<Cause, double> proportions;
};

Json to_json(const TaxonomyReport& r);

/// Throws AttributionError on an empty label set.
TaxonomyReport taxonomy_report(std::span<const AttributionLabel> labels);

/// Fixed-width table: Type, Description, Count, Proportion.
std::string render_taxonomy_table(const TaxonomyReport& r);

}  // namespace ilp
