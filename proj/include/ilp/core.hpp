#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ilp {

using Json = nlohmann::json;

/// Slack for strict threshold comparisons on derived quantities, so values
/// that equal a threshold up to rounding (e.g. (0.80-0.76)/0.80 vs 0.05)
/// do not cross it.
inline constexpr double kCompareEps = 1e-12;

inline bool exceeds(double value, double threshold) { return value > threshold + kCompareEps; }

/// One supervised example. position_index is assigned at load time from
/// record order and is never read from disk.
struct SftInstance {
  std::string id;
  std::string prompt;
  std::string response;
  std::string dataset_tag;
  std::size_t position_index = 0;
  Json metadata = Json::object();  // unknown record fields, kept verbatim
};

/// Multiple-choice probe form of an SftInstance.
struct McItem {
  std::string instance_id;
  std::string stem;
  std::vector<std::string> options;
  std::size_t correct_index = 0;
};

enum class DropMode { kRelative, kAbsolute };

struct RunConfig {
  // detection
  int n_runs = 5;
  int bon_width = 5;
  double pass_threshold = 0.2;
  int top_k = 1000;
  double temperature = 0.7;
  int n_options = 4;
  double failure_tolerance = 0.05;
  int max_in_flight = 4;

  // knowledge probes
  double existence_acc_threshold = 0.8;
  double js_conflict_threshold = 0.3;
  double confidence_threshold = 0.8;
  double similarity_threshold = 0.85;
  int blind_runs = 10;
  double blind_pass_threshold = 0.2;
  double blind_bon_threshold = 0.1;
  int blind_bon_trials = 10;

  // attribution
  std::vector<std::string> cascade_order = {"KnowledgeLimitation", "BaseModelConflict",
                                            "IntraSftConflict", "LeftSideForgetting"};

  // mitigation
  int bucket_count = 4;
  int rebucket_interval = 500;
  int resample_interval = 500;
  double drop_threshold = 0.05;
  DropMode drop_mode = DropMode::kRelative;
  double upweight_factor = 2.0;
  double epoch_delta = 0.01;
  int e_min = 1;
  int epoch_cap = 10;
  double mix_general = 0.8;
  double mix_aug = 0.2;
  int docs_per_entity = 20;

  std::uint64_t seed = 0;
};

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::size_t line)
      : std::runtime_error(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- records ---------------------------------------------------------------

Json to_json(const SftInstance& instance);
Json to_json(const McItem& item);
McItem item_from_json(const Json& j);

/// Parses line-delimited records. Blank lines are skipped; error messages use
/// 1-based physical line numbers.
std::vector<SftInstance> parse_dataset(std::istream& in);
std::vector<SftInstance> load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, std::span<const SftInstance> instances);

std::vector<McItem> load_items(const std::filesystem::path& path);
void save_items(const std::filesystem::path& path, std::span<const McItem> items);

std::vector<Json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const Json> rows);

/// Writes `j` pretty-printed with a trailing newline.
void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

// ---- configuration ---------------------------------------------------------

std::vector<std::string> validate_config(const RunConfig& cfg);

Json to_json(const RunConfig& cfg);
/// Fields absent from `j` keep their defaults. Unknown keys throw ConfigError.
RunConfig config_from_json(const Json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Hex FNV-1a digest over the canonical serialization of every field.
std::string config_hash(const RunConfig& cfg);

// ---- deterministic randomness ----------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t mix_seed(std::uint64_t seed, std::string_view key);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t n);

/// Seeded generator with platform-stable helpers; std distributions are
/// implementation-defined so they are avoided where reproducibility matters.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Index sampled proportionally to non-negative weights.
  std::size_t categorical(std::span<const double> weights);

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(values[i - 1], values[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& values) {
    shuffle(std::span<T>(values));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ilp
