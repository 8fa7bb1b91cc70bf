#include "ilp/mc_convert.hpp"

#include <algorithm>
#include <unordered_set>

namespace ilp {

PeerResponseGenerator::PeerResponseGenerator(std::span<const SftInstance> pool) {
  responses_.reserve(pool.size());
  ids_.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    responses_.push_back(pool[i].response);
    ids_.push_back(pool[i].id);
    by_tag_[pool[i].dataset_tag].push_back(i);
  }
}

std::vector<std::string> PeerResponseGenerator::generate(const SftInstance& instance,
                                                         std::size_t count,
                                                         std::uint64_t seed) const {
  std::vector<std::string> out;
  std::unordered_set<std::string> taken{instance.response};
  Rng rng(mix_seed(seed, "distractors:" + instance.id));

  auto draw_from = [&](std::vector<std::size_t> candidates) {
    rng.shuffle(candidates);
    for (std::size_t idx : candidates) {
      if (out.size() == count) return;
      if (ids_[idx] == instance.id) continue;
      if (taken.insert(responses_[idx]).second) out.push_back(responses_[idx]);
    }
  };

  if (auto it = by_tag_.find(instance.dataset_tag); it != by_tag_.end()) draw_from(it->second);
  if (out.size() < count) {
    std::vector<std::size_t> all(responses_.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    draw_from(std::move(all));
  }
  return out;
}

McItem convert(const SftInstance& instance, const DistractorGenerator& gen, int n_options,
               std::uint64_t seed) {
  if (n_options < 2) {
    throw ConversionError(instance.id, "n_options must be at least 2");
  }
  const auto wanted = static_cast<std::size_t>(n_options - 1);
  auto distractors = gen.generate(instance, wanted, seed);

  std::unordered_set<std::string> seen{instance.response};
  for (const auto& d : distractors) {
    if (d == instance.response) {
      throw ConversionError(instance.id,
                            "instance " + instance.id + ": distractor equals the response");
    }
    if (!seen.insert(d).second) {
      throw ConversionError(instance.id, "instance " + instance.id + ": duplicate distractor");
    }
  }
  if (distractors.size() < wanted) {
    throw ConversionError(instance.id, "instance " + instance.id + ": generator shortfall (" +
                                           std::to_string(distractors.size()) + " of " +
                                           std::to_string(wanted) + " distractors)");
  }
  distractors.resize(wanted);

  std::vector<std::size_t> order(static_cast<std::size_t>(n_options));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, "placement:" + instance.id));
  rng.shuffle(order);

  McItem item;
  item.instance_id = instance.id;
  item.stem = instance.prompt;
  item.options.resize(order.size());
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    // order[slot] == 0 is the response, the rest index distractors.
    const std::size_t src = order[slot];
    item.options[slot] = src == 0 ? instance.response : distractors[src - 1];
    if (src == 0) item.correct_index = slot;
  }
  return item;
}

Json to_json(const ConversionReport& report) {
  Json failures = Json::array();
  for (const auto& [id, reason] : report.failures) {
    failures.push_back({{"instance_id", id}, {"reason", reason}});
  }
  return Json{{"converted", report.converted}, {"failed", report.failures.size()},
              {"failures", failures}};
}

ConversionResult convert_dataset(std::span<const SftInstance> instances,
                                 const DistractorGenerator& gen, int n_options,
                                 std::uint64_t seed) {
  ConversionResult result;
  result.items.reserve(instances.size());
  for (const auto& inst : instances) {
    try {
      result.items.push_back(convert(inst, gen, n_options, seed));
    } catch (const ConversionError& e) {
      result.report.failures.emplace_back(inst.id, e.what());
    }
  }
  result.report.converted = result.items.size();
  return result;
}

}  // namespace ilp
