#include "ilp/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_map>

#include "ilp/http_endpoint.hpp"
#include "ilp/sandbox.hpp"

namespace ilp {

namespace {

std::vector<double> normalized(std::vector<double> p) {
  double total = 0.0;
  for (double x : p) total += x;
  if (total > 0.0) {
    for (auto& x : p) x /= total;
  }
  return p;
}

std::unique_ptr<ModelEndpoint> single_endpoint(const Json& j) {
  const auto type = j.value("type", std::string{});
  if (type == "sim") return sim_endpoint_from_json(j);
  if (type == "http") {
    HttpEndpointConfig c;
    c.base_url = j.at("base_url").get<std::string>();
    c.path = j.value("path", c.path);
    c.model = j.value("model", std::string{});
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    return std::make_unique<HttpEndpoint>(std::move(c));
  }
  throw ConfigError("endpoint config: unknown type '" + type + "' (expected \"sim\" or \"http\")");
}

ProbeBatch probe_checked(const ModelEndpoint& ep, std::span<const McItem> items,
                         const RunConfig& cfg, const std::string& tag,
                         std::vector<ProbeFailure>& failures) {
  ProbeOptions opts;
  opts.model_tag = tag;
  auto batch = probe_dataset(ep, items, cfg, opts);
  failures.insert(failures.end(), batch.failures.begin(), batch.failures.end());
  return batch;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

LoadedEndpoint endpoint_from_json(const Json& j, const std::string& tag) {
  if (!j.is_object()) throw ConfigError("endpoint config must be a JSON object");
  LoadedEndpoint out;
  out.tag = tag;
  try {
    out.endpoint = single_endpoint(j);
    if (auto it = j.find("reversed"); it != j.end() && !it->is_null()) {
      out.reversed = single_endpoint(*it);
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("endpoint config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("endpoint config: ") + e.what());
  }
  return out;
}

LoadedEndpoint load_endpoint(const std::filesystem::path& path) {
  Json j;
  try {
    j = read_json(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read endpoint config " + path.string() + ": " + e.what());
  }
  std::string tag = j.value("tag", std::string{});
  if (tag.empty()) tag = j.value("model", path.stem().string());
  return endpoint_from_json(j, tag);
}

DiagnosisResult run_diagnosis(const DiagnosisInputs& in) {
  if (auto v = validate_config(in.cfg); !v.empty()) {
    std::string msg = "invalid config:";
    for (const auto& s : v) msg += "\n  " + s;
    throw ConfigError(msg);
  }
  if (!in.base || !in.sft) throw ConfigError("both base and sft endpoints are required");
  if (in.instances.empty()) throw std::invalid_argument("dataset is empty");

  const RunConfig& cfg = in.cfg;
  DiagnosisResult r;
  r.cfg = cfg;
  r.base_tag = in.base_tag;
  r.sft_tag = in.sft_tag;
  r.has_reversed = in.sft_reversed != nullptr;
  r.n_instances = in.instances.size();

  std::vector<McItem> items = in.items;
  if (items.empty()) {
    PeerResponseGenerator gen(in.instances);
    auto conv = convert_dataset(in.instances, gen, cfg.n_options, cfg.seed);
    items = std::move(conv.items);
    r.conversion = std::move(conv.report);
  } else {
    r.conversion.converted = items.size();
  }
  for (const auto& [id, why] : r.conversion.failures) {
    r.warnings.push_back("not converted: " + why);
  }
  if (items.empty()) throw std::invalid_argument("no instance could be converted to a probe item");

  std::unordered_map<std::string, const SftInstance*> inst_by_id;
  std::map<std::string, std::size_t> positions;
  for (const auto& inst : in.instances) {
    inst_by_id.emplace(inst.id, &inst);
    positions.emplace(inst.id, inst.position_index);
  }
  std::unordered_map<std::string, const McItem*> item_by_id;
  for (const auto& item : items) {
    if (!inst_by_id.contains(item.instance_id)) {
      throw AlignmentError("probe item '" + item.instance_id + "' has no dataset instance");
    }
    item_by_id.emplace(item.instance_id, &item);
  }

  // ---- detection
  auto sft_batch = probe_checked(*in.sft, items, cfg, in.sft_tag, r.probe_failures);
  r.detection = detect_unlearned(sft_batch.records, cfg);
  std::unordered_map<std::string, const ProbeRecord*> sft_record;
  for (const auto& rec : sft_batch.records) sft_record.emplace(rec.instance_id, &rec);

  // ---- position signal
  const auto original = decile_accuracy(sft_batch.records, positions, in.instances.size());
  if (in.sft_reversed) {
    auto rev = probe_checked(*in.sft_reversed, items, cfg, in.sft_tag + "-reversed", r.probe_failures);
    const auto reversed = decile_accuracy(rev.records, positions, in.instances.size());
    r.position = position_signal(original, reversed, in.instances.size(), cfg);
  } else {
    std::vector<DecileAccuracy> none(kDeciles);
    r.position = position_signal(original, none, in.instances.size(), cfg);
    r.warnings.push_back("no reversed-order endpoint: position signal unavailable");
  }

  // ---- conflicts
  const TableJudge no_verdicts;
  const CorrectnessJudge& judge = in.judge ? *in.judge : no_verdicts;
  r.conflicts = find_sft_conflicts(in.instances, JaccardPromptScorer{}, judge, cfg);
  if (!r.conflicts.unjudged.empty()) {
    r.warnings.push_back(std::to_string(r.conflicts.unjudged.size()) +
                         " similar pairs lack judge verdicts and were not grouped");
  }

  if (r.detection.candidate_ids.empty()) return r;

  // ---- base-model probes on candidates
  std::vector<McItem> cand_items;
  std::vector<SftInstance> cand_instances;
  for (const auto& id : r.detection.candidate_ids) {
    cand_items.push_back(*item_by_id.at(id));
    cand_instances.push_back(*inst_by_id.at(id));
  }
  auto base_batch = probe_checked(*in.base, cand_items, cfg, in.base_tag, r.probe_failures);
  std::unordered_map<std::string, const ProbeRecord*> base_record;
  for (const auto& rec : base_batch.records) base_record.emplace(rec.instance_id, &rec);
  const auto greedy = greedy_answers(*in.base, cand_items, cfg);

  const RuleBasedExtractor extractor;
  auto extraction = extract_triplets(in.instances, extractor);
  for (const auto& [id, why] : extraction.failures) {
    r.warnings.push_back("triplet extraction failed for " + id + ": " + why);
  }
  const auto all_titems = triplet_items(extraction.triplets, cfg.n_options, cfg.seed);
  std::vector<TripletItem> cand_titems;
  const std::set<std::string> cand_set(r.detection.candidate_ids.begin(),
                                       r.detection.candidate_ids.end());
  for (const auto& ti : all_titems.items) {
    if (cand_set.contains(ti.triplet.source_instance_id)) cand_titems.push_back(ti);
  }
  const auto tprobes = probe_triplets(*in.base, cand_titems, cfg);
  std::set<std::string> blind_ids;
  std::set<KnowledgeTriplet> blind;
  for (const auto& tp : tprobes) {
    if (!tp.blind) continue;
    blind.insert(tp.triplet);
    blind_ids.insert(tp.triplet.source_instance_id);
  }

  std::map<std::string, ProbeSummary> summaries;
  std::set<std::string> errors;
  for (std::size_t k = 0; k < cand_items.size(); ++k) {
    const auto& id = cand_items[k].instance_id;
    ProbeSummary s;
    s.instance_id = id;
    s.position_index = positions.at(id);
    if (auto it = base_record.find(id); it != base_record.end()) {
      s.base_acc = it->second->pass_rate;
      s.exists = exists_from_accuracy(s.base_acc, cfg.existence_acc_threshold);
      if (auto st = sft_record.find(id); st != sft_record.end()) {
        s.js_divergence = js_divergence(normalized(mean_distribution(*it->second)),
                                        normalized(mean_distribution(*st->second)));
      }
    } else {
      r.warnings.push_back("base probe failed for " + id + "; existence and divergence unknown");
    }
    s.base_confidence = greedy[k].confidence;
    s.high_conf_error = is_high_conf_error(greedy[k], cand_items[k].correct_index,
                                           cfg.confidence_threshold);
    if (s.high_conf_error) errors.insert(id);
    s.blind = blind_ids.contains(id);
    if (auto it = r.conflicts.partners.find(id); it != r.conflicts.partners.end()) {
      s.conflict_partners = it->second;
      s.partner_removed = std::any_of(it->second.begin(), it->second.end(), [&](const auto& p) {
        return r.conflicts.removals.contains(p);
      });
    }
    if (auto it = r.conflicts.group_of.find(id); it != r.conflicts.group_of.end()) {
      s.conflict_group = it->second;
    }
    s.removed = r.conflicts.removals.contains(id);
    summaries.emplace(id, s);
    r.summaries.push_back(std::move(s));
  }

  r.labels = attribute(r.detection, summaries, r.position, cfg);
  r.taxonomy = taxonomy_report(r.labels);

  // ---- plans
  const auto& counts = r.taxonomy->counts;
  if (counts.at(Cause::kKnowledgeLimitation) + counts.at(Cause::kBaseModelConflict) > 0) {
    std::set<KnowledgeTriplet> blind_targets;
    std::set<std::string> error_targets;
    for (const auto& l : r.labels) {
      if (l.cause == Cause::kKnowledgeLimitation) {
        for (const auto& t : blind) {
          if (t.source_instance_id == l.instance_id) blind_targets.insert(t);
        }
      } else if (l.cause == Cause::kBaseModelConflict && errors.contains(l.instance_id)) {
        error_targets.insert(l.instance_id);
      }
    }
    r.manifest = build_cpt_manifest(blind_targets, error_targets, in.instances, in.sources, cfg);
    for (const auto& w : r.manifest->warnings) r.warnings.push_back("cpt manifest: " + w);
    if (!r.manifest->unresolved.empty()) {
      r.warnings.push_back("cpt manifest: " + std::to_string(r.manifest->unresolved.size()) +
                           " entities without documents");
    }
  }
  if (counts.at(Cause::kIntraSftConflict) > 0) {
    std::vector<std::string> kept;
    for (const auto& inst : in.instances) {
      if (!r.conflicts.removals.contains(inst.id)) kept.push_back(inst.id);
    }
    r.buckets = plan_buckets(r.conflicts.groups, kept, cfg.bucket_count, cfg.seed,
                             cfg.rebucket_interval);
  }
  if (counts.at(Cause::kLeftSideForgetting) > 0) {
    ResampleSchedule s;
    s.interval = cfg.resample_interval;
    s.drop_threshold = cfg.drop_threshold;
    s.mode = cfg.drop_mode;
    s.upweight = cfg.upweight_factor;
    std::vector<std::string> ids;
    for (const auto& inst : in.instances) {
      if (!r.conflicts.removals.contains(inst.id) || !r.buckets) ids.push_back(inst.id);
    }
    s.shuffle_order = shuffle_plan(ids, cfg.seed);
    r.resample = std::move(s);
    if (r.buckets) {
      r.warnings.push_back("resampling is applied within conflict buckets; the two plans were "
                           "designed separately and are composed here");
    }
  }
  if (counts.at(Cause::kInsufficientTraining) > 0) {
    std::vector<std::string> targets;
    for (const auto& l : r.labels) {
      if (l.cause == Cause::kInsufficientTraining) targets.push_back(l.instance_id);
    }
    r.epoch_plan = Json{{"kind", "epoch_plan"},
                        {"version", kPlanVersion},
                        {"orientation", "loss"},
                        {"e_min", cfg.e_min},
                        {"delta", cfg.epoch_delta},
                        {"cap", cfg.epoch_cap},
                        {"target_ids", targets}};
  }
  return r;
}

std::map<std::string, std::string> plan_files(const DiagnosisResult& r) {
  std::map<std::string, std::string> out;
  if (r.manifest) out["cpt_manifest"] = "cpt_manifest.json";
  if (r.buckets) out["bucket_plan"] = "bucket_plan.json";
  if (r.resample) out["resample_schedule"] = "resample_schedule.json";
  if (r.epoch_plan) out["epoch_plan"] = "epoch_plan.json";
  return out;
}

Json canonical_report(const DiagnosisResult& r) {
  Json failures = Json::array();
  for (const auto& f : r.probe_failures) {
    failures.push_back({{"instance_id", f.instance_id}, {"attempts", f.attempts}, {"message", f.message}});
  }
  Json det{{"n_instances", r.detection.n_instances},
           {"dataset_acc", r.detection.dataset_acc},
           {"unlearned_count", r.detection.unlearned_ids.size()},
           {"prevalence", r.detection.prevalence()},
           {"candidate_count", r.detection.candidate_ids.size()}};
  det["stability"] = r.detection.stability ? Json(*r.detection.stability) : Json(nullptr);
  return Json{
      {"kind", "diagnosis_report"},
      {"version", kPlanVersion},
      {"config_hash", config_hash(r.cfg)},
      {"seed", r.cfg.seed},
      {"config", to_json(r.cfg)},
      {"endpoints",
       {{"base", r.base_tag},
        {"sft", r.sft_tag},
        {"reversed", r.has_reversed ? Json(r.sft_tag + "-reversed") : Json(nullptr)}}},
      {"dataset", {{"instances", r.n_instances}, {"conversion", to_json(r.conversion)}}},
      {"detection", det},
      {"position_signal", to_json(r.position)},
      {"conflicts",
       {{"groups", r.conflicts.groups.size()},
        {"removals", r.conflicts.removals},
        {"unjudged_pairs", r.conflicts.unjudged.size()}}},
      {"taxonomy", r.taxonomy ? to_json(*r.taxonomy) : Json(nullptr)},
      {"plans", plan_files(r)},
      {"probe_failures", failures},
      {"warnings", r.warnings},
  };
}

std::vector<std::filesystem::path> write_diagnosis(const std::filesystem::path& dir,
                                                   const DiagnosisResult& r, const Json& run_meta) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto json_file = [&](const std::string& name, const Json& j) {
    write_json(dir / name, j);
    written.push_back(dir / name);
  };
  auto jsonl_file = [&](const std::string& name, const std::vector<Json>& rows) {
    write_jsonl(dir / name, rows);
    written.push_back(dir / name);
  };

  json_file("detection.json", to_json(r.detection));
  std::vector<Json> rows;
  for (const auto& l : r.labels) rows.push_back(to_json(l));
  jsonl_file("labels.jsonl", rows);
  rows.clear();
  for (const auto& s : r.summaries) rows.push_back(to_json(s));
  jsonl_file("probe_summaries.jsonl", rows);
  rows.clear();
  for (const auto& g : r.conflicts.groups) rows.push_back(to_json(g));
  jsonl_file("conflict_groups.jsonl", rows);

  std::string table = r.taxonomy ? render_taxonomy_table(*r.taxonomy)
                                 : std::string("0 unlearned instances\n");
  write_text(dir / "taxonomy.txt", table);
  written.push_back(dir / "taxonomy.txt");

  if (r.manifest) json_file("cpt_manifest.json", to_json(*r.manifest));
  if (r.buckets) json_file("bucket_plan.json", to_json(*r.buckets));
  if (r.resample) json_file("resample_schedule.json", to_json(*r.resample));
  if (r.epoch_plan) json_file("epoch_plan.json", *r.epoch_plan);

  json_file("run_meta.json", run_meta);
  json_file("report.json", canonical_report(r));
  return written;
}

}  // namespace ilp
