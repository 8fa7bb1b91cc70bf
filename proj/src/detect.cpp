#include "ilp/detect.hpp"

#include <algorithm>
#include <unordered_map>

namespace ilp {

namespace {

std::size_t argmax(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::set<std::string> unlearned_for_seed(const ModelEndpoint& endpoint,
                                         std::span<const McItem> items, RunConfig cfg,
                                         std::uint64_t seed) {
  cfg.seed = seed;
  const auto batch = probe_dataset(endpoint, items, cfg);
  return detect_unlearned(batch.records, cfg).unlearned_ids;
}

}  // namespace

double compute_accuracy(std::span<const ProbeRecord> records, std::span<const McItem> items) {
  if (records.size() != items.size()) {
    throw AlignmentError("compute_accuracy: " + std::to_string(records.size()) + " records vs " +
                         std::to_string(items.size()) + " items");
  }
  std::unordered_map<std::string, const McItem*> by_id;
  for (const auto& item : items) by_id.emplace(item.instance_id, &item);
  if (records.empty()) return 0.0;

  std::size_t correct = 0;
  for (const auto& rec : records) {
    auto it = by_id.find(rec.instance_id);
    if (it == by_id.end()) {
      throw AlignmentError("compute_accuracy: no item for record '" + rec.instance_id + "'");
    }
    if (argmax(mean_distribution(rec)) == it->second->correct_index) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

double severity(double pass_rate, bool bon_correct) {
  return (1.0 - pass_rate) + (bon_correct ? 0.0 : 0.5);
}

DetectionReport detect_unlearned(std::span<const ProbeRecord> records, const RunConfig& cfg) {
  DetectionReport report;
  report.n_instances = records.size();
  std::size_t correct = 0;
  for (const auto& rec : records) {
    if (rec.runs.size() != static_cast<std::size_t>(cfg.n_runs)) {
      throw std::invalid_argument("record " + rec.instance_id + " has " +
                                  std::to_string(rec.runs.size()) + " runs, config expects " +
                                  std::to_string(cfg.n_runs));
    }
    if (argmax(mean_distribution(rec)) == rec.correct_index) ++correct;
    InstanceDetection d{rec.pass_rate, rec.bon_correct(), severity(rec.pass_rate, rec.bon_correct())};
    report.per_instance[rec.instance_id] = d;
    if (rec.pass_rate < cfg.pass_threshold) report.unlearned_ids.insert(rec.instance_id);
  }
  if (!records.empty()) {
    report.dataset_acc = static_cast<double>(correct) / static_cast<double>(records.size());
  }

  std::vector<std::string> ranked(report.unlearned_ids.begin(), report.unlearned_ids.end());
  std::stable_sort(ranked.begin(), ranked.end(), [&](const std::string& a, const std::string& b) {
    const double sa = report.per_instance.at(a).severity;
    const double sb = report.per_instance.at(b).severity;
    if (sa != sb) return sa > sb;
    return a < b;
  });
  if (ranked.size() > static_cast<std::size_t>(cfg.top_k)) ranked.resize(cfg.top_k);
  report.candidate_ids = std::move(ranked);
  return report;
}

double stability_check(const ModelEndpoint& endpoint, std::span<const McItem> items,
                       const RunConfig& cfg, std::span<const std::uint64_t> extra_seeds) {
  if (extra_seeds.empty()) throw std::invalid_argument("stability_check: need at least one extra seed");
  auto inter = unlearned_for_seed(endpoint, items, cfg, cfg.seed);
  auto uni = inter;
  for (auto seed : extra_seeds) {
    const auto next = unlearned_for_seed(endpoint, items, cfg, seed);
    std::set<std::string> kept;
    std::set_intersection(inter.begin(), inter.end(), next.begin(), next.end(),
                          std::inserter(kept, kept.end()));
    inter = std::move(kept);
    uni.insert(next.begin(), next.end());
  }
  if (uni.empty()) return 1.0;
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

Json to_json(const DetectionReport& report) {
  Json per = Json::object();
  for (const auto& [id, d] : report.per_instance) {
    per[id] = {{"pass_rate", d.pass_rate}, {"bon_correct", d.bon_correct}, {"severity", d.severity}};
  }
  Json j{{"n_instances", report.n_instances},
         {"dataset_acc", report.dataset_acc},
         {"unlearned_count", report.unlearned_ids.size()},
         {"prevalence", report.prevalence()},
         {"unlearned_ids", report.unlearned_ids},
         {"candidate_ids", report.candidate_ids},
         {"per_instance", per}};
  j["stability"] = report.stability ? Json(*report.stability) : Json(nullptr);
  return j;
}

DetectionReport detection_from_json(const Json& j) {
  DetectionReport r;
  r.n_instances = j.at("n_instances").get<std::size_t>();
  r.dataset_acc = j.at("dataset_acc").get<double>();
  r.unlearned_ids = j.at("unlearned_ids").get<std::set<std::string>>();
  r.candidate_ids = j.at("candidate_ids").get<std::vector<std::string>>();
  for (const auto& [id, d] : j.at("per_instance").items()) {
    r.per_instance[id] = {d.at("pass_rate").get<double>(), d.at("bon_correct").get<bool>(),
                          d.at("severity").get<double>()};
  }
  if (auto it = j.find("stability"); it != j.end() && !it->is_null()) r.stability = it->get<double>();
  return r;
}

}  // namespace ilp
