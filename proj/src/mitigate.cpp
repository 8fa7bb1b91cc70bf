#include "ilp/mitigate.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace ilp {

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

const char* mode_name(DropMode m) { return m == DropMode::kRelative ? "relative" : "absolute"; }

Json stamp(const char* kind) { return Json{{"kind", kind}, {"version", kPlanVersion}}; }

}  // namespace

// ---- corpus mix ------------------------------------------------------------

FixtureKnowledgeSource::FixtureKnowledgeSource(std::string name) : name_(std::move(name)) {}

FixtureKnowledgeSource FixtureKnowledgeSource::from_rows(std::span<const Json> rows,
                                                         std::string name) {
  FixtureKnowledgeSource src(std::move(name));
  for (const auto& row : rows) {
    src.add(row.at("entity").get<std::string>(), row.at("text").get<std::string>(),
            row.value("id", std::string{}));
  }
  return src;
}

void FixtureKnowledgeSource::add(const std::string& entity, const std::string& text,
                                 std::string id) {
  auto& bucket = docs_[lower(entity)];
  if (id.empty()) id = name_ + ":" + lower(entity) + ":" + std::to_string(bucket.size());
  bucket.push_back(Document{std::move(id), entity, name_, text});
}

std::vector<Document> FixtureKnowledgeSource::retrieve(const std::string& entity,
                                                       std::size_t limit) const {
  auto it = docs_.find(lower(entity));
  if (it == docs_.end()) return {};
  std::vector<Document> out(it->second.begin(),
                            it->second.begin() + static_cast<std::ptrdiff_t>(
                                                     std::min(limit, it->second.size())));
  for (auto& d : out) d.entity = entity;
  return out;
}

std::size_t CorpusMixManifest::docs_for(const std::string& entity) const {
  return static_cast<std::size_t>(std::count_if(
      documents.begin(), documents.end(), [&](const Document& d) { return d.entity == entity; }));
}

Json to_json(const CorpusMixManifest& m) {
  Json j = stamp("corpus_mix_manifest");
  Json docs = Json::array();
  for (const auto& d : m.documents) {
    docs.push_back({{"id", d.id}, {"entity", d.entity}, {"source", d.source}, {"text", d.text}});
  }
  Json log = Json::array();
  for (const auto& e : m.retrieval_log) {
    log.push_back({{"entity", e.entity},
                   {"source", e.source},
                   {"requested", e.requested},
                   {"returned", e.returned},
                   {"kept", e.kept},
                   {"excluded_verbatim", e.excluded_verbatim}});
  }
  j["general_source"] = m.general_source;
  j["ratio"] = {{"general", m.mix_general}, {"aug", m.mix_aug}};
  j["entities"] = m.target_entities;
  j["docs"] = docs;
  j["unresolved"] = m.unresolved;
  j["retrieval_log"] = log;
  j["warnings"] = m.warnings;
  return j;
}

CorpusMixManifest build_cpt_manifest(const std::set<KnowledgeTriplet>& blind,
                                     const std::set<std::string>& errors,
                                     std::span<const SftInstance> instances,
                                     std::span<const KnowledgeSource* const> sources,
                                     const RunConfig& cfg, const std::string& general_source) {
  CorpusMixManifest m;
  m.general_source = general_source;
  m.mix_general = cfg.mix_general;
  m.mix_aug = cfg.mix_aug;

  std::unordered_map<std::string, const SftInstance*> by_id;
  for (const auto& inst : instances) by_id.emplace(inst.id, &inst);

  std::set<std::string> entities;
  std::unordered_set<std::string> verbatim;
  for (const auto& t : blind) {
    entities.insert(t.head);
    if (auto it = by_id.find(t.source_instance_id); it != by_id.end()) {
      verbatim.insert(it->second->response);
    }
  }
  const RuleBasedExtractor extractor;
  for (const auto& id : errors) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      m.warnings.push_back("error id '" + id + "' not found in dataset");
      continue;
    }
    verbatim.insert(it->second->response);
    const auto ts = extractor.extract(*it->second);
    if (ts.empty()) {
      entities.insert(it->second->prompt);
    } else {
      for (const auto& t : ts) entities.insert(t.head);
    }
  }
  m.target_entities.assign(entities.begin(), entities.end());
  if (m.target_entities.empty()) {
    m.warnings.push_back("no target entities: blind set and error set are empty");
    return m;
  }
  if (sources.empty()) m.warnings.push_back("no knowledge sources configured");

  const auto target = static_cast<std::size_t>(cfg.docs_per_entity);
  for (const auto& entity : m.target_entities) {
    std::unordered_set<std::string> seen;
    std::size_t kept = 0;
    for (const KnowledgeSource* src : sources) {
      if (kept >= target) break;
      RetrievalLogEntry log{entity, src->name(), target - kept, 0, 0, 0};
      auto docs = src->retrieve(entity, target - kept);
      log.returned = docs.size();
      for (auto& d : docs) {
        if (kept >= target) break;
        if (verbatim.contains(d.text)) {
          ++log.excluded_verbatim;
          continue;
        }
        if (!seen.insert(d.id).second) continue;
        d.entity = entity;
        m.documents.push_back(std::move(d));
        ++log.kept;
        ++kept;
      }
      m.retrieval_log.push_back(std::move(log));
    }
    if (kept == 0) m.unresolved.push_back(entity);
  }
  return m;
}

// ---- conflict buckets ------------------------------------------------------

std::vector<std::size_t> BucketPlan::sizes() const {
  std::vector<std::size_t> out(static_cast<std::size_t>(std::max(bucket_count, 0)), 0);
  for (const auto& [id, b] : assignment) ++out.at(static_cast<std::size_t>(b));
  return out;
}

Json to_json(const BucketPlan& p) {
  Json j = stamp("bucket_plan");
  Json unsep = Json::array();
  for (const auto& [a, b] : p.unseparable) unsep.push_back({a, b});
  j["B"] = p.bucket_count;
  j["rebucket_interval"] = p.rebucket_interval;
  j["assignment"] = p.assignment;
  j["unseparable"] = unsep;
  return j;
}

BucketPlan bucket_plan_from_json(const Json& j) {
  BucketPlan p;
  p.bucket_count = j.at("B").get<int>();
  p.rebucket_interval = j.value("rebucket_interval", 0);
  p.assignment = j.at("assignment").get<std::map<std::string, int>>();
  for (const auto& pair : j.value("unseparable", Json::array())) {
    p.unseparable.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
  }
  return p;
}

BucketPlan plan_buckets(std::span<const ConflictGroup> groups,
                        std::span<const std::string> all_ids, int bucket_count,
                        std::uint64_t seed, int rebucket_interval) {
  for (const auto& g : groups) {
    if (bucket_count < 2 && g.members.size() >= 2) {
      throw std::invalid_argument("plan_buckets: need at least 2 buckets to separate group " +
                                  std::to_string(g.id));
    }
  }
  if (bucket_count < 1) throw std::invalid_argument("plan_buckets: bucket_count must be >= 1");
  const std::unordered_set<std::string> known(all_ids.begin(), all_ids.end());
  const auto B = static_cast<std::size_t>(bucket_count);

  BucketPlan plan;
  plan.bucket_count = bucket_count;
  plan.rebucket_interval = rebucket_interval;
  std::vector<std::size_t> load(B, 0);

  for (const auto& g : groups) {
    std::unordered_map<std::string, std::unordered_set<std::string>> adj;
    for (const auto& m : g.members) {
      if (!known.contains(m)) {
        throw std::invalid_argument("plan_buckets: group " + std::to_string(g.id) +
                                    " references unknown id '" + m + "'");
      }
      if (plan.assignment.contains(m)) {
        throw std::invalid_argument("plan_buckets: id '" + m + "' appears in two groups");
      }
      adj[m];
    }
    if (g.pairs.empty()) {
      for (const auto& a : g.members) {
        for (const auto& b : g.members) {
          if (a != b) adj[a].insert(b);
        }
      }
    } else {
      for (const auto& [a, b] : g.pairs) {
        if (!adj.contains(a) || !adj.contains(b)) {
          throw std::invalid_argument("plan_buckets: pair outside group " + std::to_string(g.id));
        }
        adj[a].insert(b);
        adj[b].insert(a);
      }
    }

    auto members = g.members;
    Rng rng(mix_seed(seed, "group:" + std::to_string(g.id)));
    rng.shuffle(members);

    std::vector<std::vector<std::string>> held(B);
    for (std::size_t start = 0; start < members.size(); start += B) {
      std::vector<bool> used(B, false);
      const auto end = std::min(members.size(), start + B);
      for (std::size_t i = start; i < end; ++i) {
        const auto& id = members[i];
        auto clashes = [&](std::size_t b) {
          return std::any_of(held[b].begin(), held[b].end(),
                             [&](const std::string& o) { return adj[id].contains(o); });
        };
        std::size_t best = B;
        bool best_clean = false;
        for (std::size_t b = 0; b < B; ++b) {
          if (used[b]) continue;
          const bool clean = !clashes(b);
          if (best == B || (clean && !best_clean) ||
              (clean == best_clean && load[b] < load[best])) {
            best = b;
            best_clean = clean;
          }
        }
        if (!best_clean) {
          for (const auto& o : held[best]) {
            if (adj[id].contains(o)) plan.unseparable.emplace_back(std::min(id, o), std::max(id, o));
          }
        }
        used[best] = true;
        held[best].push_back(id);
        ++load[best];
        plan.assignment[id] = static_cast<int>(best);
      }
    }
  }

  for (const auto& id : all_ids) {
    if (plan.assignment.contains(id)) continue;
    const auto b = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
    plan.assignment[id] = static_cast<int>(b);
    ++load[b];
  }
  std::sort(plan.unseparable.begin(), plan.unseparable.end());
  return plan;
}

// ---- dynamic resampling ----------------------------------------------------

double accuracy_drop(double previous, double current, DropMode mode) {
  if (mode == DropMode::kAbsolute) return previous - current;
  if (previous <= 0.0) return 0.0;
  return (previous - current) / previous;
}

ResampleStepResult resample_step(const AccuracyHistory& history, long step, const RunConfig& cfg) {
  const long K = cfg.resample_interval;
  if (K <= 0 || step <= 0 || step % K != 0) {
    throw std::invalid_argument("resample_step: step " + std::to_string(step) +
                                " is not a positive multiple of " + std::to_string(K));
  }
  ResampleStepResult out;
  for (const auto& [tag, series] : history) {
    auto now = series.find(step);
    auto before = series.find(step - K);
    if (now == series.end() || before == series.end()) {
      out.warnings.push_back("tag '" + tag + "' lacks accuracy at step " +
                             std::to_string(now == series.end() ? step : step - K) + "; skipped");
      continue;
    }
    const double delta = accuracy_drop(before->second, now->second, cfg.drop_mode);
    if (exceeds(delta, cfg.drop_threshold)) {
      out.events.push_back({step, tag, before->second, now->second, delta, cfg.upweight_factor});
    }
  }
  return out;
}

Json to_json(const ResampleSchedule& s) {
  Json j = stamp("resample_schedule");
  Json events = Json::array();
  for (const auto& e : s.events) {
    events.push_back({{"step", e.step},
                      {"tag", e.tag},
                      {"previous_acc", e.previous_acc},
                      {"current_acc", e.current_acc},
                      {"delta", e.delta},
                      {"upweight", e.upweight}});
  }
  j["interval"] = s.interval;
  j["drop_threshold"] = s.drop_threshold;
  j["drop_mode"] = mode_name(s.mode);
  j["upweight"] = s.upweight;
  j["decay_steps"] = s.interval;
  j["events"] = events;
  j["shuffle_order"] = s.shuffle_order;
  j["warnings"] = s.warnings;
  return j;
}

ResampleSchedule build_resample_schedule(const AccuracyHistory& history, const RunConfig& cfg) {
  ResampleSchedule s;
  s.interval = cfg.resample_interval;
  s.drop_threshold = cfg.drop_threshold;
  s.mode = cfg.drop_mode;
  s.upweight = cfg.upweight_factor;
  std::set<long> steps;
  for (const auto& [tag, series] : history) {
    for (const auto& [step, acc] : series) {
      if (step > 0 && step % cfg.resample_interval == 0) steps.insert(step);
    }
  }
  for (long step : steps) {
    auto r = resample_step(history, step, cfg);
    s.events.insert(s.events.end(), r.events.begin(), r.events.end());
    s.warnings.insert(s.warnings.end(), r.warnings.begin(), r.warnings.end());
  }
  return s;
}

double upweight_at(const ResampleEvent& event, int interval, long step) {
  if (interval <= 0 || step < event.step || step >= event.step + interval) return 1.0;
  const double frac = static_cast<double>(step - event.step) / static_cast<double>(interval);
  return event.upweight - (event.upweight - 1.0) * frac;
}

// ---- epochs ----------------------------------------------------------------

std::string to_string(MetricOrientation o) {
  return o == MetricOrientation::kLoss ? "loss" : "accuracy";
}

Json to_json(const EpochSchedule& s) {
  Json j = stamp("epoch_schedule");
  Json hist = Json::array();
  for (const auto& [e, v] : s.history) hist.push_back({{"epoch", e}, {"metric", v}});
  j["orientation"] = to_string(s.orientation);
  j["e_min"] = s.e_min;
  j["delta"] = s.delta;
  j["cap"] = s.cap;
  j["history"] = hist;
  j["stop_epoch"] = s.stop_epoch;
  j["cap_reached"] = s.cap_reached;
  j["truncated"] = s.truncated;
  j["reason"] = s.reason;
  return j;
}

EpochSchedule epoch_controller(const EpochEvaluator& evaluate, MetricOrientation orientation,
                               const RunConfig& cfg) {
  EpochSchedule s;
  s.orientation = orientation;
  s.e_min = cfg.e_min;
  s.delta = cfg.epoch_delta;
  s.cap = cfg.epoch_cap;
  double best = 0.0;

  for (int e = cfg.e_min; e <= cfg.epoch_cap; ++e) {
    std::optional<double> metric;
    std::string failure;
    try {
      metric = evaluate(e);
    } catch (const std::exception& ex) {
      failure = ex.what();
    }
    if (!metric) {
      s.truncated = true;
      s.stop_epoch = s.history.empty() ? cfg.e_min - 1 : s.history.back().first;
      s.reason = "evaluator failed at epoch " + std::to_string(e) +
                 (failure.empty() ? std::string{} : ": " + failure);
      return s;
    }
    const double v = *metric;
    bool stop = false;
    if (orientation == MetricOrientation::kLoss) {
      stop = !s.history.empty() && exceeds(v - s.history.back().second, cfg.epoch_delta);
    } else {
      stop = !exceeds(v, best);
      if (!stop) best = v;
    }
    s.history.emplace_back(e, v);
    if (stop) {
      s.stop_epoch = e - 1;
      s.reason = orientation == MetricOrientation::kLoss ? "validation loss rose by more than delta"
                                                         : "no improvement over best";
      return s;
    }
  }
  s.stop_epoch = cfg.epoch_cap;
  s.cap_reached = true;
  s.reason = "cap reached";
  return s;
}

EpochSchedule replay(const EpochSchedule& recorded) {
  RunConfig cfg;
  cfg.e_min = recorded.e_min;
  cfg.epoch_delta = recorded.delta;
  cfg.epoch_cap = recorded.cap;
  std::map<int, double> by_epoch(recorded.history.begin(), recorded.history.end());
  return epoch_controller(
      [&](int e) -> std::optional<double> {
        auto it = by_epoch.find(e);
        if (it == by_epoch.end()) return std::nullopt;
        return it->second;
      },
      recorded.orientation, cfg);
}

// ---- ordering --------------------------------------------------------------

std::vector<std::string> shuffle_plan(std::span<const std::string> ids, std::uint64_t seed) {
  std::vector<std::string> out(ids.begin(), ids.end());
  Rng rng(mix_seed(seed, "shuffle"));
  rng.shuffle(out);
  return out;
}

}  // namespace ilp
