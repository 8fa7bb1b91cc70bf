#include "ilp/probe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "ilp/mc_convert.hpp"

namespace ilp {

namespace {

constexpr double kSumTolerance = 1e-9;

const std::vector<std::string> kCopulas = {"is", "are", "was", "were"};
const std::vector<std::string> kVerbs = {"has",     "have",     "contains", "includes",
                                         "causes",  "produces", "uses",     "wrote",
                                         "founded", "invented", "discovered", "created",
                                         "borders", "orbits",   "speaks",   "requires"};

void check_distribution(std::span<const double> p, const char* name) {
  double total = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw std::invalid_argument(std::string(name) + " has a negative entry");
    total += x;
  }
  if (std::abs(total - 1.0) > kSumTolerance) {
    throw std::invalid_argument(std::string(name) + " does not sum to 1");
  }
}

double kl_to_mixture(std::span<const double> p, std::span<const double> m) {
  double d = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) d += p[k] * std::log2(p[k] / m[k]);
  }
  return d;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> sentences(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool end = (c == '.' || c == '!' || c == '?') &&
                     (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])));
    if (end) {
      if (auto t = trim(cur); !t.empty()) out.push_back(t);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (auto t = trim(cur); !t.empty()) out.push_back(t);
  return out;
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::string join(const std::vector<std::string>& w, std::size_t from, std::size_t to) {
  std::string out;
  for (std::size_t i = from; i < to; ++i) {
    if (!out.empty()) out += ' ';
    out += w[i];
  }
  return out;
}

std::optional<KnowledgeTriplet> split_at(const std::vector<std::string>& words,
                                         const std::vector<std::string>& pivots) {
  for (std::size_t i = 1; i + 1 < words.size(); ++i) {
    if (std::find(pivots.begin(), pivots.end(), words[i]) != pivots.end()) {
      return KnowledgeTriplet{join(words, 0, i), words[i], join(words, i + 1, words.size()), {}};
    }
  }
  return std::nullopt;
}

double jaccard_sorted(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t common = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++common;
      ++ia;
      ++ib;
    }
  }
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

Json to_json(const KnowledgeTriplet& t) {
  return Json{{"head", t.head},
              {"relation", t.relation},
              {"tail", t.tail},
              {"source_instance_id", t.source_instance_id}};
}

KnowledgeTriplet triplet_from_json(const Json& j) {
  return KnowledgeTriplet{j.at("head").get<std::string>(), j.at("relation").get<std::string>(),
                          j.at("tail").get<std::string>(),
                          j.at("source_instance_id").get<std::string>()};
}

Json to_json(const ProbeSummary& s) {
  Json j{{"instance_id", s.instance_id},
         {"position_index", s.position_index},
         {"exists", s.exists},
         {"base_acc", s.base_acc},
         {"js_divergence", s.js_divergence},
         {"high_conf_error", s.high_conf_error},
         {"base_confidence", s.base_confidence},
         {"blind", s.blind},
         {"conflict_partners", s.conflict_partners},
         {"removed", s.removed},
         {"partner_removed", s.partner_removed}};
  j["conflict_group"] = s.conflict_group ? Json(*s.conflict_group) : Json(nullptr);
  return j;
}

ProbeSummary summary_from_json(const Json& j) {
  ProbeSummary s;
  s.instance_id = j.at("instance_id").get<std::string>();
  s.position_index = j.value("position_index", std::size_t{0});
  s.exists = j.at("exists").get<bool>();
  s.base_acc = j.at("base_acc").get<double>();
  s.js_divergence = j.at("js_divergence").get<double>();
  s.high_conf_error = j.at("high_conf_error").get<bool>();
  s.base_confidence = j.value("base_confidence", 0.0);
  s.blind = j.at("blind").get<bool>();
  s.conflict_partners = j.value("conflict_partners", std::set<std::string>{});
  if (auto it = j.find("conflict_group"); it != j.end() && !it->is_null()) {
    s.conflict_group = it->get<std::size_t>();
  }
  s.removed = j.value("removed", false);
  s.partner_removed = j.value("partner_removed", false);
  return s;
}

bool exists_from_accuracy(double base_acc, double threshold) { return base_acc > threshold; }

ExistenceResult knowledge_exists(const ModelEndpoint& base, const McItem& item,
                                 const RunConfig& cfg) {
  ExistenceResult r;
  r.record = probe_instance(base, item, cfg.n_runs, cfg.temperature,
                            item_seed(cfg.seed, item.instance_id), {}, "base");
  r.base_acc = r.record.pass_rate;
  r.exists = exists_from_accuracy(r.base_acc, cfg.existence_acc_threshold);
  return r;
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw std::invalid_argument("js_divergence: support sizes differ");
  }
  check_distribution(p, "p");
  check_distribution(q, "q");
  std::vector<double> m(p.size());
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = 0.5 * (p[k] + q[k]);
  const double d = 0.5 * kl_to_mixture(p, m) + 0.5 * kl_to_mixture(q, m);
  return std::clamp(d, 0.0, 1.0);
}

std::vector<KnowledgeTriplet> RuleBasedExtractor::extract(const SftInstance& instance) const {
  std::vector<KnowledgeTriplet> out;
  for (const auto& sentence : sentences(instance.response)) {
    const auto words = split_words(lower(sentence));
    auto t = split_at(words, kCopulas);
    if (!t) t = split_at(words, kVerbs);
    if (!t) continue;
    t->source_instance_id = instance.id;
    out.push_back(std::move(*t));
  }
  return out;
}

ExtractionResult extract_triplets(std::span<const SftInstance> instances,
                                  const TripletExtractor& extractor) {
  ExtractionResult result;
  for (const auto& inst : instances) {
    try {
      auto ts = extractor.extract(inst);
      for (auto& t : ts) {
        if (t.head.empty() || t.relation.empty() || t.tail.empty()) continue;
        t.source_instance_id = inst.id;
        result.triplets.push_back(std::move(t));
      }
    } catch (const std::exception& e) {
      result.failures.emplace_back(inst.id, e.what());
    }
  }
  return result;
}

TripletItems triplet_items(std::span<const KnowledgeTriplet> triplets, int n_options,
                           std::uint64_t seed) {
  std::vector<SftInstance> pseudo;
  pseudo.reserve(triplets.size());
  std::unordered_map<std::string, int> per_source;
  for (const auto& t : triplets) {
    SftInstance p;
    p.id = t.source_instance_id + "#t" + std::to_string(per_source[t.source_instance_id]++);
    p.prompt = t.head + " " + t.relation;
    p.response = t.tail;
    p.dataset_tag = t.relation;
    pseudo.push_back(std::move(p));
  }
  PeerResponseGenerator gen(pseudo);
  TripletItems out;
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    try {
      out.items.push_back({triplets[i], convert(pseudo[i], gen, n_options, seed)});
    } catch (const ConversionError& e) {
      out.failures.emplace_back(pseudo[i].id, e.what());
    }
  }
  return out;
}

bool blind_criterion(double pass_rate, double bon_acc, const RunConfig& cfg) {
  return pass_rate < cfg.blind_pass_threshold && bon_acc < cfg.blind_bon_threshold;
}

std::vector<TripletProbe> probe_triplets(const ModelEndpoint& base,
                                         std::span<const TripletItem> items,
                                         const RunConfig& cfg) {
  std::vector<TripletProbe> out;
  out.reserve(items.size());
  for (const auto& ti : items) {
    const auto& id = ti.item.instance_id;
    TripletProbe tp;
    tp.triplet = ti.triplet;
    tp.item_id = id;
    tp.pass_rate = probe_instance(base, ti.item, cfg.blind_runs, cfg.temperature,
                                  mix_seed(cfg.seed, "blind:" + id), {}, "base")
                       .pass_rate;
    int bon_hits = 0;
    for (int t = 0; t < cfg.blind_bon_trials; ++t) {
      const auto rec = probe_instance(base, ti.item, cfg.bon_width, cfg.temperature,
                                      mix_seed(cfg.seed, "bon:" + id + ":" + std::to_string(t)),
                                      {}, "base");
      if (rec.bon_correct()) ++bon_hits;
    }
    tp.bon_acc = static_cast<double>(bon_hits) / static_cast<double>(cfg.blind_bon_trials);
    tp.blind = blind_criterion(tp.pass_rate, tp.bon_acc, cfg);
    out.push_back(std::move(tp));
  }
  return out;
}

std::set<KnowledgeTriplet> blind_knowledge(const ModelEndpoint& base,
                                           std::span<const TripletItem> items,
                                           const RunConfig& cfg) {
  std::set<KnowledgeTriplet> out;
  for (const auto& tp : probe_triplets(base, items, cfg)) {
    if (tp.blind) out.insert(tp.triplet);
  }
  return out;
}

std::vector<Answer> greedy_answers(const ModelEndpoint& base, std::span<const McItem> items,
                                   const RunConfig& cfg) {
  RunConfig greedy = cfg;
  greedy.n_runs = 1;
  greedy.temperature = 0.0;
  ProbeOptions opts;
  opts.model_tag = "base-greedy";
  auto batch = probe_dataset(base, items, greedy, opts);
  if (!batch.failures.empty()) {
    throw AggregateProbeError("greedy probe failed for " +
                                  std::to_string(batch.failures.size()) + " items",
                              batch.failures);
  }
  std::vector<Answer> out;
  out.reserve(batch.records.size());
  for (auto& rec : batch.records) out.push_back(std::move(rec.runs.front()));
  return out;
}

bool is_high_conf_error(const Answer& greedy, std::size_t correct_index, double threshold) {
  const auto top = static_cast<std::size_t>(
      std::max_element(greedy.option_probs.begin(), greedy.option_probs.end()) -
      greedy.option_probs.begin());
  return greedy.confidence > threshold && top != correct_index;
}

std::set<std::string> high_conf_errors(const ModelEndpoint& base, std::span<const McItem> items,
                                       const RunConfig& cfg) {
  const auto answers = greedy_answers(base, items, cfg);
  std::set<std::string> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (is_high_conf_error(answers[i], items[i].correct_index, cfg.confidence_threshold)) {
      out.insert(items[i].instance_id);
    }
  }
  return out;
}

std::vector<ScoredPair> SimilarityScorer::pairs_above(std::span<const SftInstance> instances,
                                                      double threshold) const {
  std::vector<ScoredPair> out;
  for (std::size_t a = 0; a < instances.size(); ++a) {
    for (std::size_t b = a + 1; b < instances.size(); ++b) {
      const double s = similarity(instances[a], instances[b]);
      if (s > threshold) out.push_back({a, b, s});
    }
  }
  return out;
}

std::vector<std::string> word_set(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

double JaccardPromptScorer::similarity(const SftInstance& a, const SftInstance& b) const {
  return jaccard_sorted(word_set(a.prompt), word_set(b.prompt));
}

std::vector<ScoredPair> JaccardPromptScorer::pairs_above(std::span<const SftInstance> instances,
                                                         double threshold) const {
  std::vector<std::vector<std::string>> sets;
  sets.reserve(instances.size());
  for (const auto& inst : instances) sets.push_back(word_set(inst.prompt));
  std::vector<ScoredPair> out;
  for (std::size_t a = 0; a < sets.size(); ++a) {
    for (std::size_t b = a + 1; b < sets.size(); ++b) {
      // |A∩B|/|A∪B| <= min/max, so skip pairs whose sizes alone rule them out
      const auto lo = std::min(sets[a].size(), sets[b].size());
      const auto hi = std::max(sets[a].size(), sets[b].size());
      if (hi > 0 && static_cast<double>(lo) / static_cast<double>(hi) <= threshold) continue;
      const double s = jaccard_sorted(sets[a], sets[b]);
      if (s > threshold) out.push_back({a, b, s});
    }
  }
  return out;
}

TableJudge::TableJudge(std::unordered_map<std::string, bool> verdicts)
    : verdicts_(std::move(verdicts)) {}

TableJudge TableJudge::from_rows(std::span<const Json> rows) {
  TableJudge judge;
  for (const auto& row : rows) {
    const auto id = row.at("id").get<std::string>();
    const auto& v = row.at("verdict");
    if (v.is_boolean()) {
      judge.set(id, v.get<bool>());
    } else if (v == "correct") {
      judge.set(id, true);
    } else if (v == "incorrect") {
      judge.set(id, false);
    } else {
      throw std::invalid_argument("judge verdict for '" + id + "' must be correct/incorrect");
    }
  }
  return judge;
}

std::optional<bool> TableJudge::is_correct(const SftInstance& instance) const {
  if (auto it = verdicts_.find(instance.id); it != verdicts_.end()) return it->second;
  return std::nullopt;
}

Json to_json(const ConflictGroup& g) {
  Json pairs = Json::array();
  for (const auto& [a, b] : g.pairs) pairs.push_back({a, b});
  return Json{{"group_id", g.id}, {"member_ids", g.members}, {"pairs", pairs}};
}

ConflictGroup group_from_json(const Json& j) {
  ConflictGroup g;
  g.id = j.at("group_id").get<std::size_t>();
  g.members = j.at("member_ids").get<std::vector<std::string>>();
  for (const auto& p : j.value("pairs", Json::array())) {
    g.pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
  }
  return g;
}

SftConflicts find_sft_conflicts(std::span<const SftInstance> instances,
                                const SimilarityScorer& scorer, const CorrectnessJudge& judge,
                                const RunConfig& cfg) {
  SftConflicts out;
  const auto pairs = scorer.pairs_above(instances, cfg.similarity_threshold);

  std::vector<std::optional<std::optional<bool>>> verdict(instances.size());
  auto verdict_of = [&](std::size_t i) {
    if (!verdict[i]) verdict[i] = judge.is_correct(instances[i]);
    return *verdict[i];
  };

  UnionFind uf(instances.size());
  std::vector<bool> grouped(instances.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (const auto& sp : pairs) {
    const auto& a = instances[sp.a];
    const auto& b = instances[sp.b];
    if (a.response == b.response) continue;
    const auto va = verdict_of(sp.a);
    const auto vb = verdict_of(sp.b);
    if (va == false) out.removals.insert(a.id);
    if (vb == false) out.removals.insert(b.id);
    if (va == false || vb == false) {
      out.partners[a.id].insert(b.id);
      out.partners[b.id].insert(a.id);
      continue;
    }
    if (!va || !vb) {
      out.unjudged.push_back({a.id, b.id, sp.similarity});
      continue;
    }
    out.partners[a.id].insert(b.id);
    out.partners[b.id].insert(a.id);
    uf.unite(sp.a, sp.b);
    grouped[sp.a] = grouped[sp.b] = true;
    edges.emplace_back(sp.a, sp.b);
  }

  // Roots are the smallest member index, so group ids follow dataset order.
  std::map<std::size_t, std::size_t> root_to_group;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (!grouped[i]) continue;
    const auto root = uf.find(i);
    auto [it, fresh] = root_to_group.emplace(root, out.groups.size());
    if (fresh) out.groups.push_back(ConflictGroup{out.groups.size(), {}, {}});
    out.groups[it->second].members.push_back(instances[i].id);
    out.group_of[instances[i].id] = it->second;
  }
  for (const auto& [a, b] : edges) {
    out.groups[root_to_group.at(uf.find(a))].pairs.emplace_back(instances[a].id, instances[b].id);
  }
  return out;
}

}  // namespace ilp
