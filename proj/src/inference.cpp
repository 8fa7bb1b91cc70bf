#include "ilp/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>
#include <unordered_set>

namespace ilp {

void validate_answer(const Answer& answer, std::size_t n_options) {
  if (answer.option_probs.size() != n_options) {
    throw EndpointError("answer covers " + std::to_string(answer.option_probs.size()) +
                            " options, item has " + std::to_string(n_options),
                        false);
  }
  if (answer.chosen_index >= n_options) {
    throw EndpointError("chosen_index out of range", false);
  }
  double total = 0.0;
  for (double p : answer.option_probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw EndpointError("negative or non-finite probability", false);
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw EndpointError("option probabilities sum to " + std::to_string(total), false);
  }
  if (!(answer.confidence >= 0.0 && answer.confidence <= 1.0)) {
    throw EndpointError("confidence out of [0,1]", false);
  }
}

std::size_t ProbeRecord::correct_runs() const {
  return static_cast<std::size_t>(std::count_if(
      runs.begin(), runs.end(), [&](const Answer& a) { return a.chosen_index == correct_index; }));
}

Json to_json(const ProbeRecord& record) {
  Json runs = Json::array();
  for (const auto& r : record.runs) {
    runs.push_back({{"chosen_index", r.chosen_index},
                    {"option_probs", r.option_probs},
                    {"confidence", r.confidence}});
  }
  return Json{{"instance_id", record.instance_id}, {"model_tag", record.model_tag},
              {"correct_index", record.correct_index}, {"runs", runs},
              {"bon_choice", record.bon_choice},   {"pass_rate", record.pass_rate}};
}

ProbeRecord record_from_json(const Json& j) {
  ProbeRecord r;
  r.instance_id = j.at("instance_id").get<std::string>();
  r.model_tag = j.value("model_tag", "");
  r.correct_index = j.at("correct_index").get<std::size_t>();
  for (const auto& run : j.at("runs")) {
    Answer a;
    a.chosen_index = run.at("chosen_index").get<std::size_t>();
    a.option_probs = run.at("option_probs").get<std::vector<double>>();
    a.confidence = run.at("confidence").get<double>();
    r.runs.push_back(std::move(a));
  }
  r.bon_choice = j.at("bon_choice").get<std::size_t>();
  r.pass_rate = j.at("pass_rate").get<double>();
  return r;
}

std::vector<double> mean_distribution(const ProbeRecord& record) {
  if (record.runs.empty()) return {};
  std::vector<double> mean(record.runs.front().option_probs.size(), 0.0);
  for (const auto& run : record.runs) {
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += run.option_probs[k];
  }
  for (auto& m : mean) m /= static_cast<double>(record.runs.size());
  return mean;
}

std::size_t best_of_n(std::span<const Answer> runs) {
  if (runs.empty()) throw std::invalid_argument("best_of_n: no runs");
  std::size_t best = 0;
  for (std::size_t i = 1; i < runs.size(); ++i) {
    if (runs[i].confidence > runs[best].confidence) best = i;
  }
  return runs[best].chosen_index;
}

ProbeRecord probe_instance(const ModelEndpoint& endpoint, const McItem& item, int n_runs,
                           double temperature, std::uint64_t seed, const RetryPolicy& retry,
                           const std::string& model_tag) {
  if (n_runs < 1) throw std::invalid_argument("probe_instance: n_runs must be >= 1");
  ProbeRecord record;
  record.instance_id = item.instance_id;
  record.model_tag = model_tag;
  record.correct_index = item.correct_index;
  record.runs.reserve(static_cast<std::size_t>(n_runs));

  for (int r = 0; r < n_runs; ++r) {
    const std::uint64_t run_seed = seed + static_cast<std::uint64_t>(r);
    for (int attempt = 1;; ++attempt) {
      try {
        Answer a = endpoint.answer(item, temperature, run_seed);
        validate_answer(a, item.options.size());
        record.runs.push_back(std::move(a));
        break;
      } catch (const EndpointError& e) {
        if (!e.transient() || attempt >= retry.attempts) {
          throw ProbeError(item.instance_id, attempt,
                           "probe of " + item.instance_id + " failed after " +
                               std::to_string(attempt) + " attempt(s): " + e.what());
        }
        std::this_thread::sleep_for(retry.base_delay * (1 << (attempt - 1)));
      }
    }
  }
  record.pass_rate =
      static_cast<double>(record.correct_runs()) / static_cast<double>(record.runs.size());
  record.bon_choice = best_of_n(record.runs);
  return record;
}

std::uint64_t item_seed(std::uint64_t run_seed, const std::string& instance_id) {
  return mix_seed(run_seed, "probe:" + instance_id);
}

ProbeBatch probe_dataset(const ModelEndpoint& endpoint, std::span<const McItem> items,
                         const RunConfig& cfg, const ProbeOptions& options) {
  if (items.empty()) throw std::invalid_argument("probe_dataset: no items");

  std::vector<std::optional<ProbeRecord>> slots(items.size());
  std::vector<std::optional<ProbeFailure>> failed(items.size());

  std::unordered_map<std::string, ProbeRecord> resumed;
  if (options.checkpoint && std::filesystem::exists(*options.checkpoint)) {
    for (const auto& row : read_jsonl(*options.checkpoint)) {
      auto rec = record_from_json(row);
      if (rec.model_tag == options.model_tag &&
          rec.runs.size() == static_cast<std::size_t>(cfg.n_runs)) {
        resumed.emplace(rec.instance_id, std::move(rec));
      }
    }
  }
  std::ofstream checkpoint_out;
  if (options.checkpoint) {
    checkpoint_out.open(*options.checkpoint, std::ios::app | std::ios::binary);
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::size_t done = 0;
  std::size_t n_failed = 0;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= items.size()) return;
      const McItem& item = items[i];
      if (auto it = resumed.find(item.instance_id); it != resumed.end()) {
        slots[i] = it->second;
      } else {
        try {
          slots[i] = probe_instance(endpoint, item, cfg.n_runs, cfg.temperature,
                                    item_seed(cfg.seed, item.instance_id), options.retry,
                                    options.model_tag);
        } catch (const ProbeError& e) {
          failed[i] = ProbeFailure{e.instance_id(), e.attempts(), e.what()};
        }
      }
      std::lock_guard lock(mu);
      ++done;
      if (failed[i]) ++n_failed;
      if (slots[i] && checkpoint_out.is_open() && !resumed.contains(item.instance_id)) {
        checkpoint_out << to_json(*slots[i]).dump() << '\n';
        checkpoint_out.flush();
      }
      if (options.progress) options.progress(done, items.size(), n_failed);
    }
  };

  const auto n_workers =
      std::min<std::size_t>(static_cast<std::size_t>(std::max(1, cfg.max_in_flight)), items.size());
  std::vector<std::jthread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  pool.clear();

  ProbeBatch batch;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (slots[i]) batch.records.push_back(std::move(*slots[i]));
    if (failed[i]) batch.failures.push_back(std::move(*failed[i]));
  }
  const double failed_fraction =
      static_cast<double>(batch.failures.size()) / static_cast<double>(items.size());
  if (failed_fraction > cfg.failure_tolerance) {
    throw AggregateProbeError(std::to_string(batch.failures.size()) + " of " +
                                  std::to_string(items.size()) +
                                  " items failed, above failure_tolerance",
                              batch.failures);
  }
  return batch;
}

// ---- simulated model -------------------------------------------------------

Json to_json(const SimProfile& profile) {
  return Json{{"correct_prob", profile.correct_prob},
              {"wrong_mode",
               profile.wrong_mode == SimProfile::WrongMode::kFixed ? "fixed" : "spread"}};
}

SimProfile profile_from_json(const Json& j) {
  SimProfile p;
  p.correct_prob = j.at("correct_prob").get<double>();
  const auto mode = j.value("wrong_mode", "spread");
  if (mode == "fixed") {
    p.wrong_mode = SimProfile::WrongMode::kFixed;
  } else if (mode == "spread") {
    p.wrong_mode = SimProfile::WrongMode::kSpread;
  } else {
    throw std::invalid_argument("wrong_mode must be 'fixed' or 'spread'");
  }
  if (!(p.correct_prob >= 0.0 && p.correct_prob <= 1.0)) {
    throw std::invalid_argument("correct_prob out of [0,1]");
  }
  return p;
}

std::vector<double> sim_distribution(const SimProfile& profile, std::size_t n_options,
                                     std::size_t correct_index) {
  std::vector<double> d(n_options, 0.0);
  const double wrong = 1.0 - profile.correct_prob;
  d[correct_index] = profile.correct_prob;
  if (profile.wrong_mode == SimProfile::WrongMode::kFixed) {
    d[(correct_index + 1) % n_options] += wrong;
  } else {
    for (std::size_t k = 0; k < n_options; ++k) {
      if (k != correct_index) d[k] = wrong / static_cast<double>(n_options - 1);
    }
  }
  return d;
}

SimEndpoint::SimEndpoint(std::unordered_map<std::string, SimProfile> profiles,
                         std::uint64_t seed, std::optional<SimProfile> fallback)
    : profiles_(std::move(profiles)), seed_(seed), fallback_(fallback) {}

const SimProfile& SimEndpoint::profile_for(const std::string& instance_id) const {
  if (auto it = profiles_.find(instance_id); it != profiles_.end()) return it->second;
  if (auto hash = instance_id.find('#'); hash != std::string::npos) {
    if (auto it = profiles_.find(instance_id.substr(0, hash + 1)); it != profiles_.end()) {
      return it->second;
    }
  }
  if (fallback_) return *fallback_;
  throw EndpointError("simulator has no profile for '" + instance_id + "'", false);
}

Answer SimEndpoint::answer(const McItem& item, double temperature, std::uint64_t seed) const {
  const auto& profile = profile_for(item.instance_id);
  const auto d = sim_distribution(profile, item.options.size(), item.correct_index);

  Answer a;
  if (temperature <= 0.0) {
    a.chosen_index = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    a.option_probs = d;
    a.confidence = d[a.chosen_index];
    return a;
  }
  Rng rng(mix_seed(mix_seed(seed_, item.instance_id), seed));
  a.chosen_index = rng.categorical(d);
  // Per-run sharpening toward the sampled option keeps confidence coupled
  // to the choice while leaving P(correct) equal to the declared value.
  const double lambda = rng.uniform(0.0, 0.5);
  a.option_probs.resize(d.size());
  for (std::size_t k = 0; k < d.size(); ++k) {
    a.option_probs[k] = (1.0 - lambda) * d[k] + (k == a.chosen_index ? lambda : 0.0);
  }
  a.confidence = a.option_probs[a.chosen_index];
  return a;
}

}  // namespace ilp
