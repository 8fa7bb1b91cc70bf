#include "ilp/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace ilp {

namespace {

const std::vector<std::string> kKnownInstanceKeys = {"id", "prompt", "response", "dataset_tag"};

bool is_known_instance_key(const std::string& key) {
  for (const auto& k : kKnownInstanceKeys) {
    if (k == key) return true;
  }
  return false;
}

std::string require_string(const Json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw DatasetError("line " + std::to_string(line) + ": missing required key '" + key + "'",
                       line);
  }
  if (!it->is_string()) {
    throw DatasetError("line " + std::to_string(line) + ": key '" + key + "' must be a string",
                       line);
  }
  return it->get<std::string>();
}

bool blank(const std::string& s) {
  for (char c : s) {
    if (!std::isspace(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

// Visits every RunConfig field by name. Keeps serialization, parsing, and
// hashing in one place.
template <typename Cfg, typename Visitor>
void visit_fields(Cfg& c, Visitor&& v) {
  v("n_runs", c.n_runs);
  v("bon_width", c.bon_width);
  v("pass_threshold", c.pass_threshold);
  v("top_k", c.top_k);
  v("temperature", c.temperature);
  v("n_options", c.n_options);
  v("failure_tolerance", c.failure_tolerance);
  v("max_in_flight", c.max_in_flight);
  v("existence_acc_threshold", c.existence_acc_threshold);
  v("js_conflict_threshold", c.js_conflict_threshold);
  v("confidence_threshold", c.confidence_threshold);
  v("similarity_threshold", c.similarity_threshold);
  v("blind_runs", c.blind_runs);
  v("blind_pass_threshold", c.blind_pass_threshold);
  v("blind_bon_threshold", c.blind_bon_threshold);
  v("blind_bon_trials", c.blind_bon_trials);
  v("cascade_order", c.cascade_order);
  v("bucket_count", c.bucket_count);
  v("rebucket_interval", c.rebucket_interval);
  v("resample_interval", c.resample_interval);
  v("drop_threshold", c.drop_threshold);
  v("drop_mode", c.drop_mode);
  v("upweight_factor", c.upweight_factor);
  v("epoch_delta", c.epoch_delta);
  v("e_min", c.e_min);
  v("epoch_cap", c.epoch_cap);
  v("mix_general", c.mix_general);
  v("mix_aug", c.mix_aug);
  v("docs_per_entity", c.docs_per_entity);
  v("seed", c.seed);
}

Json field_to_json(const DropMode& m) {
  return m == DropMode::kRelative ? "relative" : "absolute";
}
template <typename T>
Json field_to_json(const T& value) {
  return Json(value);
}

void field_from_json(const Json& j, DropMode& m) {
  const auto s = j.get<std::string>();
  if (s == "relative") {
    m = DropMode::kRelative;
  } else if (s == "absolute") {
    m = DropMode::kAbsolute;
  } else {
    throw ConfigError("drop_mode: expected 'relative' or 'absolute', got '" + s + "'");
  }
}
template <typename T>
void field_from_json(const Json& j, T& value) {
  value = j.get<T>();
}

}  // namespace

// ---- records ---------------------------------------------------------------

Json to_json(const SftInstance& instance) {
  Json j = instance.metadata.is_object() ? instance.metadata : Json::object();
  j["id"] = instance.id;
  j["prompt"] = instance.prompt;
  j["response"] = instance.response;
  j["dataset_tag"] = instance.dataset_tag;
  return j;
}

Json to_json(const McItem& item) {
  return Json{{"instance_id", item.instance_id},
              {"stem", item.stem},
              {"options", item.options},
              {"correct_index", item.correct_index}};
}

McItem item_from_json(const Json& j) {
  McItem item;
  item.instance_id = j.at("instance_id").get<std::string>();
  item.stem = j.at("stem").get<std::string>();
  item.options = j.at("options").get<std::vector<std::string>>();
  item.correct_index = j.at("correct_index").get<std::size_t>();
  if (item.options.size() < 2) {
    throw std::invalid_argument("item " + item.instance_id + ": fewer than 2 options");
  }
  if (item.correct_index >= item.options.size()) {
    throw std::invalid_argument("item " + item.instance_id + ": correct_index out of range");
  }
  return item;
}

std::vector<SftInstance> parse_dataset(std::istream& in) {
  std::vector<SftInstance> out;
  std::unordered_map<std::string, std::size_t> seen;  // id -> physical line
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw DatasetError("line " + std::to_string(lineno) + ": parse error: " + e.what(), lineno);
    }
    if (!j.is_object()) {
      throw DatasetError("line " + std::to_string(lineno) + ": record must be an object", lineno);
    }
    SftInstance inst;
    inst.id = require_string(j, "id", lineno);
    inst.prompt = require_string(j, "prompt", lineno);
    inst.response = require_string(j, "response", lineno);
    if (j.contains("dataset_tag")) inst.dataset_tag = require_string(j, "dataset_tag", lineno);
    if (inst.id.empty() || inst.prompt.empty() || inst.response.empty()) {
      throw DatasetError(
          "line " + std::to_string(lineno) + ": id, prompt and response must be non-empty",
          lineno);
    }
    auto [it, inserted] = seen.emplace(inst.id, lineno);
    if (!inserted) {
      throw DatasetError("duplicate id '" + inst.id + "' on lines " + std::to_string(it->second) +
                             " and " + std::to_string(lineno),
                         lineno);
    }
    for (const auto& [key, value] : j.items()) {
      if (!is_known_instance_key(key)) inst.metadata[key] = value;
    }
    inst.position_index = out.size();
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<SftInstance> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset: " + path.string(), 0);
  return parse_dataset(in);
}

void save_dataset(const std::filesystem::path& path, std::span<const SftInstance> instances) {
  std::vector<Json> rows;
  rows.reserve(instances.size());
  for (const auto& inst : instances) rows.push_back(to_json(inst));
  write_jsonl(path, rows);
}

std::vector<McItem> load_items(const std::filesystem::path& path) {
  std::vector<McItem> items;
  for (const auto& row : read_jsonl(path)) items.push_back(item_from_json(row));
  return items;
}

void save_items(const std::filesystem::path& path, std::span<const McItem> items) {
  std::vector<Json> rows;
  rows.reserve(items.size());
  for (const auto& item : items) rows.push_back(to_json(item));
  write_jsonl(path, rows);
}

std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string(), 0);
  std::vector<Json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    try {
      rows.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw DatasetError(path.string() + " line " + std::to_string(lineno) + ": " + e.what(),
                         lineno);
    }
  }
  return rows;
}

void write_jsonl(const std::filesystem::path& path, std::span<const Json> rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& row : rows) out << row.dump() << '\n';
}

void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

// ---- configuration ---------------------------------------------------------

std::vector<std::string> validate_config(const RunConfig& cfg) {
  std::vector<std::string> v;
  auto fraction = [&](const char* name, double x) {
    if (!(x >= 0.0 && x <= 1.0)) v.push_back(std::string(name) + ": fraction out of [0,1]");
  };
  auto positive = [&](const char* name, long long x) {
    if (x < 1) v.push_back(std::string(name) + ": must be a positive integer");
  };
  auto non_negative = [&](const char* name, double x) {
    if (!(x >= 0.0) || std::isinf(x)) v.push_back(std::string(name) + ": must be non-negative");
  };

  positive("n_runs", cfg.n_runs);
  positive("bon_width", cfg.bon_width);
  positive("top_k", cfg.top_k);
  positive("max_in_flight", cfg.max_in_flight);
  positive("blind_runs", cfg.blind_runs);
  positive("blind_bon_trials", cfg.blind_bon_trials);
  positive("bucket_count", cfg.bucket_count);
  positive("rebucket_interval", cfg.rebucket_interval);
  positive("resample_interval", cfg.resample_interval);
  positive("e_min", cfg.e_min);
  positive("docs_per_entity", cfg.docs_per_entity);
  if (cfg.n_options < 2) v.push_back("n_options: must be at least 2");
  if (cfg.epoch_cap < cfg.e_min) v.push_back("epoch_cap: must be >= e_min");

  fraction("pass_threshold", cfg.pass_threshold);
  fraction("failure_tolerance", cfg.failure_tolerance);
  fraction("existence_acc_threshold", cfg.existence_acc_threshold);
  fraction("confidence_threshold", cfg.confidence_threshold);
  fraction("similarity_threshold", cfg.similarity_threshold);
  fraction("blind_pass_threshold", cfg.blind_pass_threshold);
  fraction("blind_bon_threshold", cfg.blind_bon_threshold);
  fraction("drop_threshold", cfg.drop_threshold);
  fraction("mix_general", cfg.mix_general);
  fraction("mix_aug", cfg.mix_aug);

  non_negative("temperature", cfg.temperature);
  non_negative("js_conflict_threshold", cfg.js_conflict_threshold);
  non_negative("epoch_delta", cfg.epoch_delta);
  if (!(cfg.upweight_factor >= 1.0)) v.push_back("upweight_factor: must be >= 1");

  if (std::abs(cfg.mix_general + cfg.mix_aug - 1.0) > 1e-9) {
    v.push_back("mix_general + mix_aug: mix fractions must sum to 1");
  }

  static const std::vector<std::string> kRules = {"KnowledgeLimitation", "BaseModelConflict",
                                                  "IntraSftConflict", "LeftSideForgetting"};
  auto order = cfg.cascade_order;
  std::sort(order.begin(), order.end());
  auto expected = kRules;
  std::sort(expected.begin(), expected.end());
  if (order != expected) {
    v.push_back("cascade_order: must be a permutation of the four signal-driven causes");
  }
  return v;
}

Json to_json(const RunConfig& cfg) {
  Json j = Json::object();
  visit_fields(cfg, [&](const char* name, const auto& value) { j[name] = field_to_json(value); });
  return j;
}

RunConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be an object");
  RunConfig cfg;
  std::vector<std::string> known;
  visit_fields(cfg, [&](const char* name, auto& value) {
    known.emplace_back(name);
    auto it = j.find(name);
    if (it == j.end()) return;
    try {
      field_from_json(*it, value);
    } catch (const Json::exception& e) {
      throw ConfigError(std::string(name) + ": " + e.what());
    }
  });
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config field '" + key + "'");
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = read_json(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(to_json(cfg).dump())));
  return buf;
}

// ---- randomness ------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::string_view key) {
  return splitmix64(seed ^ splitmix64(fnv1a64(key)));
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t n) {
  return splitmix64(seed ^ splitmix64(n + 0x632be59bd9b4e019ULL));
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: empty range");
  if (n == 1) return 0;
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (weights.empty() || !(total > 0.0)) {
    throw std::invalid_argument("categorical: weights must have positive mass");
  }
  double u = uniform() * total;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    last_positive = i;
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return last_positive;
}

}  // namespace ilp
