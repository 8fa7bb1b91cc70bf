#include "ilp/sandbox.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace ilp {

namespace {

using Wrong = SimProfile::WrongMode;

constexpr const char* kLearned = "Learned";

const std::vector<std::string> kRelations = {"capital", "founder", "currency", "language",
                                             "mascot",  "anthem",  "author",   "emblem",
                                             "patron",  "harbor",  "river",    "festival"};

const std::vector<std::string> kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p",
                                          "r", "s", "t", "v", "z", "br", "tr", "st", "gl"};
const std::vector<std::string> kVowels = {"a", "e", "i", "o", "u", "ai", "ou"};

// Row order of the class table; index 6 is the learned remainder.
constexpr std::array<Cause, 6> kClassOrder = kAllCauses;

SimProfile prof(double p, Wrong w = Wrong::kSpread) { return SimProfile{p, w}; }

struct ClassProfiles {
  SimProfile base, sft, reversed, triplet;
};

ClassProfiles profiles_for(std::optional<Cause> cause, std::size_t decile) {
  if (!cause) return {prof(0.9), prof(0.99), prof(0.99), prof(0.95)};
  switch (*cause) {
    case Cause::kKnowledgeLimitation:
      return {prof(0.02), prof(0.005), prof(0.005), prof(0.02)};
    case Cause::kBaseModelConflict:
      return {prof(0.02, Wrong::kFixed), prof(0.005), prof(0.005), prof(0.9)};
    case Cause::kIntraSftConflict:
      return {prof(0.03), prof(0.01), prof(0.01), prof(0.9)};
    case Cause::kLeftSideForgetting: {
      const double p = 0.005 + 0.005 * static_cast<double>(decile);
      return {prof(0.03), prof(p), prof(0.99), prof(0.9)};
    }
    case Cause::kInsufficientTraining:
      return {prof(0.05), prof(0.08), prof(0.08), prof(0.9)};
    case Cause::kUnattributed:
      return {prof(0.05), prof(0.0), prof(0.0), prof(0.9)};
  }
  throw std::logic_error("unhandled cause");
}

std::vector<std::size_t> largest_remainder(const std::vector<double>& fractions, std::size_t n) {
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t used = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    used += counts[i];
    rema.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < n && k < rema.size(); ++k, ++used) ++counts[rema[k].second];
  return counts;
}

class WordMaker {
 public:
  explicit WordMaker(std::uint64_t seed) : rng_(seed) {}
  std::string fresh(bool capital) {
    for (;;) {
      std::string w;
      const std::size_t syl = 2 + rng_.below(2);
      for (std::size_t s = 0; s < syl; ++s) {
        w += kOnsets[rng_.below(kOnsets.size())];
        w += kVowels[rng_.below(kVowels.size())];
      }
      if (rng_.bernoulli(0.5)) w += kOnsets[rng_.below(9)];
      if (!used_.insert(w).second) continue;
      if (capital) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
      return w;
    }
  }

 private:
  Rng rng_;
  std::unordered_set<std::string> used_;
};

std::string pad_id(std::size_t i, std::size_t n) {
  std::string digits = std::to_string(i);
  const std::size_t width = std::max<std::size_t>(4, std::to_string(n).size());
  return "q" + std::string(width > digits.size() ? width - digits.size() : 0, '0') + digits;
}

Json endpoint_json(std::uint64_t seed, const Json& profiles) {
  return Json{{"type", "sim"}, {"seed", seed}, {"profiles", profiles}};
}

}  // namespace

std::map<Cause, double> table_mix() {
  return {{Cause::kKnowledgeLimitation, 0.187},
          {Cause::kBaseModelConflict, 0.132},
          {Cause::kIntraSftConflict, 0.141},
          {Cause::kLeftSideForgetting, 0.174},
          {Cause::kInsufficientTraining, 0.146}};
}

Json to_json(const SimConfig& c) {
  Json mix = Json::object();
  for (const auto& [cause, f] : c.cause_mix) mix[to_string(cause)] = f;
  return Json{{"n_instances", c.n_instances},
              {"seed", c.seed},
              {"n_options", c.n_options},
              {"cause_mix", mix}};
}

SimConfig sim_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("sandbox config must be a JSON object");
  SimConfig c;
  c.cause_mix = table_mix();
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "n_instances") {
        c.n_instances = value.get<std::size_t>();
      } else if (key == "seed") {
        c.seed = value.get<std::uint64_t>();
      } else if (key == "n_options") {
        c.n_options = value.get<int>();
      } else if (key == "cause_mix") {
        c.cause_mix.clear();
        for (const auto& [name, f] : value.items()) {
          try {
            c.cause_mix[cause_from_string(name)] = f.get<double>();
          } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("cause_mix: ") + e.what());
          }
        }
      } else {
        throw ConfigError("unknown sandbox config key '" + key + "'");
      }
    } catch (const Json::exception& e) {
      throw ConfigError("sandbox config field '" + key + "': " + e.what());
    }
  }
  if (c.n_instances == 0) throw ConfigError("n_instances: must be positive");
  if (c.n_options < 2) throw ConfigError("n_options: must be at least 2");
  double total = 0.0;
  for (const auto& [cause, f] : c.cause_mix) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("cause_mix." + to_string(cause) + ": out of [0,1]");
    total += f;
  }
  if (total > 1.0 + 1e-9) throw ConfigError("cause_mix: fractions sum to more than 1");
  return c;
}

Json to_json(const InstanceTruth& t) {
  return Json{{"id", t.id},
              {"position_index", t.position_index},
              {"decile", t.decile},
              {"true_cause", t.true_cause ? Json(to_string(*t.true_cause)) : Json(kLearned)},
              {"base_correct_prob", t.base.correct_prob},
              {"sft_correct_prob", t.sft.correct_prob},
              {"conflict_partner", t.conflict_partner ? Json(*t.conflict_partner) : Json(nullptr)},
              {"verdict", t.judged_correct ? "correct" : "incorrect"}};
}

SandboxData synthesize(const SimConfig& cfg) {
  if (cfg.n_instances == 0) throw ConfigError("n_instances: must be positive");
  double total = 0.0;
  for (const auto& [c, f] : cfg.cause_mix) total += f;
  if (total > 1.0 + 1e-9) throw ConfigError("cause_mix: fractions sum to more than 1");

  const std::size_t n = cfg.n_instances;
  std::vector<double> fractions;
  for (Cause c : kClassOrder) {
    auto it = cfg.cause_mix.find(c);
    fractions.push_back(it == cfg.cause_mix.end() ? 0.0 : it->second);
  }
  fractions.push_back(std::max(0.0, 1.0 - total));
  auto counts = largest_remainder(fractions, n);

  // A lone conflicting instance has nobody to conflict with.
  constexpr std::size_t kIII = 2;
  if (counts[kIII] == 1) {
    const auto donor = static_cast<std::size_t>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());
    if (donor == kIII || counts[donor] < 2) {
      counts[kIII] = 0;
      ++counts[6];
    } else {
      --counts[donor];
      ++counts[kIII];
    }
  }

  Rng rng(mix_seed(cfg.seed, "layout"));
  auto label = [](std::size_t cls) -> std::optional<Cause> {
    if (cls < kClassOrder.size()) return kClassOrder[cls];
    return std::nullopt;
  };

  // Class index per position.
  std::vector<std::size_t> seq(counts[3], 3);
  std::size_t touched_end = 0;
  if (counts[3] > 0) {
    const auto last = decile_of(counts[3] - 1, n);
    touched_end = counts[3];
    while (touched_end < n && decile_of(touched_end, n) == last) ++touched_end;
  }
  std::vector<std::size_t> safe;
  for (std::size_t cls : {0, 1, 2, 6}) safe.insert(safe.end(), counts[cls], cls);
  rng.shuffle(safe);
  const std::size_t fill = std::min(safe.size(), touched_end - counts[3]);
  seq.insert(seq.end(), safe.begin(), safe.begin() + static_cast<std::ptrdiff_t>(fill));
  std::vector<std::size_t> rest(safe.begin() + static_cast<std::ptrdiff_t>(fill), safe.end());
  for (std::size_t cls : {4, 5}) rest.insert(rest.end(), counts[cls], cls);
  rng.shuffle(rest);
  seq.insert(seq.end(), rest.begin(), rest.end());

  SandboxData data;
  data.config = cfg;
  data.instances.resize(n);
  data.truth.resize(n);

  // Conflicting instances come in pairs (a triple absorbs an odd one out).
  std::vector<std::size_t> conflict_pos;
  for (std::size_t p = 0; p < n; ++p) {
    if (seq[p] == kIII) conflict_pos.push_back(p);
  }
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t k = 0; k + 1 < conflict_pos.size(); k += 2) {
    groups.push_back({conflict_pos[k], conflict_pos[k + 1]});
  }
  if (conflict_pos.size() % 2 == 1 && !groups.empty()) groups.back().push_back(conflict_pos.back());

  WordMaker words(mix_seed(cfg.seed, "words"));
  Rng text_rng(mix_seed(cfg.seed, "text"));
  std::vector<std::string> entity(n), relation(n);
  for (std::size_t p = 0; p < n; ++p) {
    entity[p] = words.fresh(true);
    relation[p] = kRelations[text_rng.below(kRelations.size())];
  }
  for (const auto& g : groups) {
    for (std::size_t m = 1; m < g.size(); ++m) {
      entity[g[m]] = entity[g[0]];
      relation[g[m]] = relation[g[0]];
    }
  }

  for (std::size_t p = 0; p < n; ++p) {
    const auto d = decile_of(p, n);
    SftInstance& inst = data.instances[p];
    inst.id = pad_id(p, n);
    inst.prompt = "What is the " + relation[p] + " of " + entity[p] + "?";
    inst.response = "The " + relation[p] + " of " + entity[p] + " is " + words.fresh(true) + ".";
    inst.dataset_tag = "seg" + std::to_string(d);
    inst.position_index = p;

    InstanceTruth& t = data.truth[p];
    t.id = inst.id;
    t.position_index = p;
    t.decile = d;
    t.true_cause = label(seq[p]);
    const auto pr = profiles_for(t.true_cause, d);
    t.base = pr.base;
    t.sft = pr.sft;
    t.sft_reversed = pr.reversed;
    t.triplet = pr.triplet;
  }
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    for (std::size_t m = 0; m < g.size(); ++m) {
      data.truth[g[m]].conflict_partner = data.instances[g[(m + 1) % g.size()]].id;
    }
    if (gi % 3 == 2) data.truth[g[1]].judged_correct = false;
  }

  Json base = Json::object(), sft = Json::object(), reversed = Json::object();
  for (const auto& t : data.truth) {
    base[t.id] = to_json(t.base);
    base[t.id + "#"] = to_json(t.triplet);
    sft[t.id] = to_json(t.sft);
    reversed[t.id] = to_json(t.sft_reversed);
  }
  data.base_endpoint = endpoint_json(mix_seed(cfg.seed, "base"), base);
  data.sft_endpoint = endpoint_json(mix_seed(cfg.seed, "sft"), sft);
  data.sft_endpoint["reversed"] = endpoint_json(mix_seed(cfg.seed, "sft"), reversed);
  return data;
}

std::unique_ptr<SimEndpoint> sim_endpoint_from_json(const Json& j) {
  if (j.value("type", std::string{}) != "sim") {
    throw ConfigError("endpoint config: type must be \"sim\"");
  }
  std::unordered_map<std::string, SimProfile> profiles;
  for (const auto& [id, p] : j.at("profiles").items()) profiles.emplace(id, profile_from_json(p));
  std::optional<SimProfile> fallback;
  if (auto it = j.find("fallback"); it != j.end() && !it->is_null()) {
    fallback = profile_from_json(*it);
  }
  return std::make_unique<SimEndpoint>(std::move(profiles), j.at("seed").get<std::uint64_t>(),
                                       fallback);
}

void write_sandbox(const std::filesystem::path& dir, const SandboxData& data) {
  std::filesystem::create_directories(dir);
  save_dataset(dir / "dataset.jsonl", data.instances);
  std::vector<Json> rows;
  rows.reserve(data.truth.size());
  for (const auto& t : data.truth) rows.push_back(to_json(t));
  write_jsonl(dir / "ground_truth.jsonl", rows);
  write_json(dir / "base_endpoint.json", data.base_endpoint);
  write_json(dir / "sft_endpoint.json", data.sft_endpoint);
}

// ---- toy learner -----------------------------------------------------------

ToyLearner::ToyLearner(std::span<const SftInstance> instances, ToyParams params,
                       std::map<std::string, std::string> partners)
    : params_(params),
      partner_(instances.size()),
      r_(instances.size(), 0.0),
      f_(instances.size(), 0.0),
      as_of_(instances.size(), 0) {
  ids_.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    ids_.push_back(instances[i].id);
    index_.emplace(instances[i].id, i);
  }
  for (const auto& [a, b] : partners) partner_[index_of(a)] = index_of(b);
}

std::size_t ToyLearner::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw std::invalid_argument("toy learner: unknown id '" + id + "'");
  return it->second;
}

void ToyLearner::settle(std::size_t i) {
  r_[i] = retention(i);
  as_of_[i] = step_;
}

double ToyLearner::retention(std::size_t i) const {
  const long idle = step_ - as_of_[i];
  if (idle <= 0) return r_[i];
  return f_[i] + (r_[i] - f_[i]) * std::exp(-params_.forget_rate * static_cast<double>(idle));
}

double ToyLearner::accuracy(std::size_t i) const {
  const double z = std::exp(params_.logit_scale * retention(i) / params_.temperature);
  return z / (z + static_cast<double>(params_.n_options - 1));
}

double ToyLearner::accuracy(const std::string& id) const { return accuracy(index_of(id)); }

void ToyLearner::step(std::span<const std::size_t> batch) {
  std::map<std::size_t, int> occurrences;
  for (std::size_t i : batch) {
    if (i >= r_.size()) throw std::invalid_argument("toy learner: batch index out of range");
    ++occurrences[i];
  }
  std::map<std::size_t, double> gains;
  for (const auto& [i, times] : occurrences) {
    settle(i);
    const bool cancelled = partner_[i] && occurrences.contains(*partner_[i]);
    const double before = r_[i];
    for (int k = 0; k < times; ++k) {
      r_[i] += params_.lr * (1.0 - r_[i]) * (cancelled ? params_.conflict_cancel : 1.0);
      f_[i] += params_.consolidation * (r_[i] - f_[i]);
    }
    gains[i] = r_[i] - before;
  }
  for (const auto& [i, gain] : gains) {
    if (!partner_[i] || occurrences.contains(*partner_[i])) continue;
    const std::size_t j = *partner_[i];
    settle(j);
    r_[j] = std::max(0.0, r_[j] - params_.overwrite * gain);
    f_[j] = std::min(f_[j], r_[j]);
  }
  for (const auto& [i, times] : occurrences) as_of_[i] = step_ + 1;
  ++step_;
}

std::unique_ptr<SimEndpoint> ToyLearner::endpoint(std::uint64_t seed) const {
  std::unordered_map<std::string, SimProfile> profiles;
  for (std::size_t i = 0; i < ids_.size(); ++i) profiles.emplace(ids_[i], prof(accuracy(i)));
  return std::make_unique<SimEndpoint>(std::move(profiles), seed);
}

std::vector<double> decile_means(const ToyLearner& learner, std::span<const SftInstance> instances) {
  std::vector<double> sum(kDeciles, 0.0);
  std::vector<std::size_t> cnt(kDeciles, 0);
  for (std::size_t p = 0; p < instances.size(); ++p) {
    const auto d = decile_of(p, instances.size());
    sum[d] += learner.accuracy(instances[p].id);
    ++cnt[d];
  }
  for (std::size_t d = 0; d < kDeciles; ++d) {
    if (cnt[d] > 0) sum[d] /= static_cast<double>(cnt[d]);
  }
  return sum;
}

ToyHistory toy_train(ToyLearner& learner, std::span<const SftInstance> instances,
                     const ToyTrainOptions& options) {
  if (learner.size() != instances.size()) {
    throw std::invalid_argument("toy_train: learner and dataset sizes differ");
  }
  for (const auto& id : options.exclude) learner.index_of(id);

  std::vector<std::string> base;
  if (options.order.empty()) {
    for (const auto& inst : instances) base.push_back(inst.id);
  } else {
    std::unordered_set<std::string> seen;
    for (const auto& id : options.order) {
      learner.index_of(id);
      if (!seen.insert(id).second) throw std::invalid_argument("toy_train: '" + id + "' repeated in order");
    }
    base = options.order;
  }
  std::erase_if(base, [&](const std::string& id) { return options.exclude.contains(id); });

  std::vector<int> bucket_of(instances.size(), 0);
  int n_buckets = 1;
  if (options.buckets) {
    n_buckets = options.buckets->bucket_count;
    for (const auto& [id, b] : options.buckets->assignment) {
      if (b < 0 || b >= n_buckets) throw std::invalid_argument("toy_train: bucket index out of range");
      bucket_of[learner.index_of(id)] = b;
    }
    for (const auto& id : base) {
      if (!options.buckets->assignment.contains(id)) {
        throw std::invalid_argument("toy_train: bucket plan lacks '" + id + "'");
      }
    }
  }

  std::map<std::string, std::vector<std::size_t>> tag_members;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (!options.exclude.contains(instances[i].id)) tag_members[instances[i].dataset_tag].push_back(i);
  }

  const long K = options.cfg.resample_interval;
  const std::size_t bs = std::max<std::size_t>(1, learner.params().batch_size);
  ToyHistory hist;
  std::vector<ResampleEvent> active;

  auto snapshot = [&]() {
    const long s = learner.steps();
    hist.steps.push_back(s);
    for (const auto& [tag, members] : tag_members) {
      double acc = 0.0;
      for (std::size_t i : members) acc += learner.accuracy(i);
      hist.per_tag[tag][s] = acc / static_cast<double>(members.size());
    }
    hist.per_decile.push_back(decile_means(learner, instances));
  };

  if (options.epochs > 0) snapshot();
  Rng rng(mix_seed(options.seed, "toy-resample"));

  for (int e = 0; e < options.epochs; ++e) {
    const auto order = options.reshuffle
                           ? shuffle_plan(base, mix_seed(options.shuffle_seed, static_cast<std::uint64_t>(e)))
                           : base;
    std::vector<std::vector<std::size_t>> lanes(static_cast<std::size_t>(n_buckets));
    for (const auto& id : order) {
      const auto i = learner.index_of(id);
      lanes[static_cast<std::size_t>(bucket_of[i])].push_back(i);
    }
    for (std::size_t b = 0; b < lanes.size(); ++b) {
      const auto& lane = lanes[b];
      for (std::size_t start = 0; start < lane.size(); start += bs) {
        std::vector<std::size_t> batch(lane.begin() + static_cast<std::ptrdiff_t>(start),
                                       lane.begin() + static_cast<std::ptrdiff_t>(std::min(lane.size(), start + bs)));
        if (options.resample) {
          for (const auto& ev : active) {
            const double w = upweight_at(ev, static_cast<int>(K), learner.steps());
            const auto extra = static_cast<std::size_t>(std::lround(
                (w - 1.0) * static_cast<double>(bs) / static_cast<double>(tag_members.size())));
            std::vector<std::size_t> pool;
            for (std::size_t i : tag_members[ev.tag]) {
              if (!options.buckets || bucket_of[i] == static_cast<int>(b)) pool.push_back(i);
            }
            for (std::size_t k = 0; k < extra && !pool.empty(); ++k) {
              batch.push_back(pool[rng.below(pool.size())]);
            }
          }
        }
        learner.step(batch);
        if (K > 0 && learner.steps() % K == 0) {
          snapshot();
          if (options.resample) {
            auto r = resample_step(hist.per_tag, learner.steps(), options.cfg);
            std::erase_if(active, [&](const ResampleEvent& ev) {
              return learner.steps() >= ev.step + K;
            });
            active.insert(active.end(), r.events.begin(), r.events.end());
            hist.events.insert(hist.events.end(), r.events.begin(), r.events.end());
          }
        }
      }
    }
  }
  return hist;
}

}  // namespace ilp
