#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ilp/core.hpp"
#include "ilp/inference.hpp"

namespace ilp {

struct KnowledgeTriplet {
  std::string head;
  std::string relation;
  std::string tail;
  std::string source_instance_id;

  auto operator<=>(const KnowledgeTriplet&) const = default;
};

Json to_json(const KnowledgeTriplet& t);
KnowledgeTriplet triplet_from_json(const Json& j);

/// Probe signals gathered for one instance.
struct ProbeSummary {
  std::string instance_id;
  std::size_t position_index = 0;
  bool exists = false;
  double base_acc = 0.0;
  double js_divergence = 0.0;
  bool high_conf_error = false;
  double base_confidence = 0.0;
  bool blind = false;
  std::set<std::string> conflict_partners;
  std::optional<std::size_t> conflict_group;
  bool removed = false;
  bool partner_removed = false;
};

Json to_json(const ProbeSummary& s);
ProbeSummary summary_from_json(const Json& j);

// ---- knowledge existence ---------------------------------------------------

bool exists_from_accuracy(double base_acc, double threshold);

struct ExistenceResult {
  bool exists = false;
  double base_acc = 0.0;
  ProbeRecord record;
};

/// cfg.n_runs zero-shot runs of the base model at cfg.temperature.
ExistenceResult knowledge_exists(const ModelEndpoint& base, const McItem& item, const RunConfig& cfg);

// ---- divergence ------------------------------------------------------------

/// Jensen-Shannon divergence in bits, so the result lies in [0, 1].
/// Throws std::invalid_argument on size mismatch, negative entries or sums
/// off 1 by more than 1e-9.
double js_divergence(std::span<const double> p, std::span<const double> q);

// ---- triplets --------------------------------------------------------------

class TripletExtractor {
 public:
  virtual ~TripletExtractor() = default;
  virtual std::vector<KnowledgeTriplet> extract(const SftInstance& instance) const = 0;
};

/// Offline fallback extractor over the response text. Each sentence is
/// lowercased and split at the first copula (is/are/was/were), else at the
/// first verb from a small closed list.
class RuleBasedExtractor : public TripletExtractor {
 public:
  std::vector<KnowledgeTriplet> extract(const SftInstance& instance) const override;
};

struct ExtractionResult {
  std::vector<KnowledgeTriplet> triplets;
  std::vector<std::pair<std::string, std::string>> failures;  // (instance id, reason)
};

ExtractionResult extract_triplets(std::span<const SftInstance> instances,
                                  const TripletExtractor& extractor);

struct TripletItem {
  KnowledgeTriplet triplet;
  McItem item;
};

struct TripletItems {
  std::vector<TripletItem> items;
  std::vector<std::pair<std::string, std::string>> failures;
};

/// Multiple-choice form of each triplet: the stem is "head relation", the
/// tail is the correct option and distractors are tails of other triplets.
/// Item ids are "<source id>#t<k>".
TripletItems triplet_items(std::span<const KnowledgeTriplet> triplets, int n_options,
                           std::uint64_t seed);

bool blind_criterion(double pass_rate, double bon_acc, const RunConfig& cfg);

struct TripletProbe {
  KnowledgeTriplet triplet;
  std::string item_id;
  double pass_rate = 0.0;  // over cfg.blind_runs runs
  double bon_acc = 0.0;    // over cfg.blind_bon_trials trials of cfg.bon_width runs
  bool blind = false;
};

std::vector<TripletProbe> probe_triplets(const ModelEndpoint& base,
                                         std::span<const TripletItem> items,
                                         const RunConfig& cfg);

std::set<KnowledgeTriplet> blind_knowledge(const ModelEndpoint& base,
                                           std::span<const TripletItem> items,
                                           const RunConfig& cfg);

// ---- high-confidence errors ------------------------------------------------

/// One greedy (temperature 0) answer per item, in input order.
std::vector<Answer> greedy_answers(const ModelEndpoint& base, std::span<const McItem> items,
                                   const RunConfig& cfg);

bool is_high_conf_error(const Answer& greedy, std::size_t correct_index, double threshold);

std::set<std::string> high_conf_errors(const ModelEndpoint& base, std::span<const McItem> items,
                                       const RunConfig& cfg);

// ---- intra-dataset conflicts -----------------------------------------------

struct ScoredPair {
  std::size_t a = 0;  // indices into the instance list, a < b
  std::size_t b = 0;
  double similarity = 0.0;
};

class SimilarityScorer {
 public:
  virtual ~SimilarityScorer() = default;
  virtual double similarity(const SftInstance& a, const SftInstance& b) const = 0;
  /// All pairs with similarity strictly above `threshold`, ordered by (a, b).
  virtual std::vector<ScoredPair> pairs_above(std::span<const SftInstance> instances,
                                              double threshold) const;
};

/// Jaccard overlap of lowercased alphanumeric word sets of the prompts.
class JaccardPromptScorer : public SimilarityScorer {
 public:
  double similarity(const SftInstance& a, const SftInstance& b) const override;
  std::vector<ScoredPair> pairs_above(std::span<const SftInstance> instances,
                                      double threshold) const override;
};

std::vector<std::string> word_set(const std::string& text);

class CorrectnessJudge {
 public:
  virtual ~CorrectnessJudge() = default;
  /// nullopt when no verdict is available.
  virtual std::optional<bool> is_correct(const SftInstance& instance) const = 0;
};

/// Verdicts from a table. Rows are {"id": .., "verdict": "correct"|"incorrect"}
/// or {"id": .., "verdict": bool}.
class TableJudge : public CorrectnessJudge {
 public:
  TableJudge() = default;
  explicit TableJudge(std::unordered_map<std::string, bool> verdicts);
  static TableJudge from_rows(std::span<const Json> rows);

  std::optional<bool> is_correct(const SftInstance& instance) const override;
  void set(const std::string& id, bool correct) { verdicts_[id] = correct; }

 private:
  std::unordered_map<std::string, bool> verdicts_;
};

struct ConflictGroup {
  std::size_t id = 0;
  std::vector<std::string> members;  // dataset order
  std::vector<std::pair<std::string, std::string>> pairs;
};

Json to_json(const ConflictGroup& g);
ConflictGroup group_from_json(const Json& j);

struct UnjudgedPair {
  std::string a;
  std::string b;
  double similarity = 0.0;
};

struct SftConflicts {
  std::set<std::string> removals;
  std::vector<ConflictGroup> groups;
  std::vector<UnjudgedPair> unjudged;
  std::map<std::string, std::size_t> group_of;
  /// Every id taking part in a judged conflicting pair, mapped to its partners.
  std::map<std::string, std::set<std::string>> partners;
};

/// A pair is conflicting when its similarity exceeds cfg.similarity_threshold
/// and the responses differ. Members judged incorrect are removed; pairs
/// with both members judged correct are merged into conflict groups
/// (transitively); pairs lacking a verdict are reported as unjudged.
SftConflicts find_sft_conflicts(std::span<const SftInstance> instances,
                                const SimilarityScorer& scorer, const CorrectnessJudge& judge,
                                const RunConfig& cfg);

}  // namespace ilp
