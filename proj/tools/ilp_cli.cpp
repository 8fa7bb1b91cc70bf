// ilp: diagnose incompletely learned fine-tuning data.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid input or config.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ilp/attribute.hpp"
#include "ilp/core.hpp"
#include "ilp/detect.hpp"
#include "ilp/inference.hpp"
#include "ilp/mc_convert.hpp"
#include "ilp/mitigate.hpp"
#include "ilp/pipeline.hpp"
#include "ilp/probe.hpp"
#include "ilp/sandbox.hpp"

namespace fs = std::filesystem;
using namespace ilp;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string kebab(std::string s) {
  for (auto& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

/// Adds one --kebab-case option per RunConfig field and assembles them into
/// a RunConfig: defaults, then --config, then flags, then --seed.
class ConfigFlags {
 public:
  void attach(CLI::App* app) {
    app->add_option("--config", config_path_, "RunConfig JSON file");
    app->add_option("--seed", seed_, "Run seed");
    const Json defaults = to_json(RunConfig{});
    for (const auto& [key, value] : defaults.items()) {
      if (key == "seed") continue;
      auto& slot = raw_[key];
      app->add_option("--" + kebab(key), slot, "override " + key);
    }
  }

  RunConfig build() const {
    Json j = Json::object();
    if (!config_path_.empty()) {
      try {
        j = read_json(config_path_);
      } catch (const std::exception& e) {
        throw UsageError("cannot read config " + config_path_ + ": " + e.what());
      }
    }
    for (const auto& [key, text] : raw_) {
      if (text.empty()) continue;
      if (key == "cascade_order") {
        Json arr = Json::array();
        std::string cur;
        for (char c : text + ",") {
          if (c == ',') {
            if (!cur.empty()) arr.push_back(cur);
            cur.clear();
          } else if (c != ' ') {
            cur += c;
          }
        }
        j[key] = arr;
      } else if (key == "drop_mode") {
        j[key] = text;
      } else {
        try {
          j[key] = Json::parse(text);
        } catch (const Json::parse_error&) {
          throw UsageError("--" + kebab(key) + ": not a number: " + text);
        }
      }
    }
    if (seed_) j["seed"] = *seed_;
    RunConfig cfg;
    try {
      cfg = config_from_json(j);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    if (auto v = validate_config(cfg); !v.empty()) {
      std::string msg = "config violation:";
      for (const auto& s : v) msg += "\n  " + s;
      throw UsageError(msg);
    }
    return cfg;
  }

 private:
  std::string config_path_;
  std::optional<std::uint64_t> seed_;
  std::map<std::string, std::string> raw_;
};

std::vector<SftInstance> read_dataset(const std::string& path) {
  try {
    return load_dataset(path);
  } catch (const DatasetError& e) {
    throw UsageError(path + ": " + e.what());
  } catch (const std::exception& e) {
    throw UsageError(std::string("cannot read dataset: ") + e.what());
  }
}

std::vector<McItem> read_items(const std::string& path) {
  try {
    return load_items(path);
  } catch (const std::exception& e) {
    throw UsageError(std::string("cannot read items: ") + e.what());
  }
}

Json read_json_arg(const std::string& path, const char* what) {
  try {
    return read_json(path);
  } catch (const std::exception& e) {
    throw UsageError(std::string("cannot read ") + what + " " + path + ": " + e.what());
  }
}

std::vector<Json> read_jsonl_arg(const std::string& path, const char* what) {
  try {
    return read_jsonl(path);
  } catch (const std::exception& e) {
    throw UsageError(std::string("cannot read ") + what + " " + path + ": " + e.what());
  }
}

LoadedEndpoint endpoint_arg(const std::string& path) {
  try {
    return load_endpoint(path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---- subcommands -----------------------------------------------------------

struct ConvertArgs {
  std::string dataset, out;
  ConfigFlags flags;
};

int cmd_convert(const ConvertArgs& a) {
  const auto cfg = a.flags.build();
  const auto instances = read_dataset(a.dataset);
  PeerResponseGenerator gen(instances);
  const auto result = convert_dataset(instances, gen, cfg.n_options, cfg.seed);
  save_items(a.out, result.items);
  std::cout << to_json(result.report).dump(2) << '\n';
  return 0;
}

struct ProbeArgs {
  std::string items, dataset, endpoint, out, checkpoint;
  ConfigFlags flags;
};

int cmd_probe(const ProbeArgs& a) {
  const auto cfg = a.flags.build();
  std::vector<McItem> items;
  if (!a.items.empty()) {
    items = read_items(a.items);
  } else if (!a.dataset.empty()) {
    const auto instances = read_dataset(a.dataset);
    PeerResponseGenerator gen(instances);
    items = convert_dataset(instances, gen, cfg.n_options, cfg.seed).items;
  } else {
    throw UsageError("probe needs --items or --dataset");
  }
  const auto ep = endpoint_arg(a.endpoint);
  ProbeOptions opts;
  opts.model_tag = ep.tag;
  if (!a.checkpoint.empty()) opts.checkpoint = a.checkpoint;
  opts.progress = [](std::size_t done, std::size_t total, std::size_t failed) {
    if (done == total || done % 100 == 0) {
      std::cerr << "\rprobed " << done << "/" << total << " (" << failed << " failed)" << std::flush;
    }
  };
  const auto batch = probe_dataset(*ep.endpoint, items, cfg, opts);
  std::cerr << '\n';
  std::vector<Json> rows;
  for (const auto& rec : batch.records) rows.push_back(to_json(rec));
  write_jsonl(a.out, rows);
  for (const auto& f : batch.failures) {
    std::cerr << "failed: " << f.instance_id << " after " << f.attempts << " attempts: " << f.message << '\n';
  }
  return 0;
}

struct DetectArgs {
  std::string records, out;
  ConfigFlags flags;
};

int cmd_detect(const DetectArgs& a) {
  const auto cfg = a.flags.build();
  std::vector<ProbeRecord> records;
  for (const auto& row : read_jsonl_arg(a.records, "records")) records.push_back(record_from_json(row));
  const auto report = detect_unlearned(records, cfg);
  write_json(a.out, to_json(report));
  std::cout << report.unlearned_ids.size() << " unlearned of " << report.n_instances << " ("
            << 100.0 * report.prevalence() << "%), training accuracy " << report.dataset_acc << '\n';
  return 0;
}

struct AttributeArgs {
  std::string detection, summaries, position, out;
  ConfigFlags flags;
};

int cmd_attribute(const AttributeArgs& a) {
  const auto cfg = a.flags.build();
  const auto det = detection_from_json(read_json_arg(a.detection, "detection"));
  std::map<std::string, ProbeSummary> summaries;
  for (const auto& row : read_jsonl_arg(a.summaries, "summaries")) {
    auto s = summary_from_json(row);
    summaries.emplace(s.instance_id, s);
  }
  PositionSignal pos;
  if (!a.position.empty()) {
    auto j = read_json_arg(a.position, "position signal");
    pos = position_signal_from_json(j.contains("position_signal") ? j.at("position_signal") : j);
  }
  const auto labels = attribute(det, summaries, pos, cfg);
  std::vector<Json> rows;
  for (const auto& l : labels) rows.push_back(to_json(l));
  write_jsonl(a.out, rows);
  if (labels.empty()) {
    std::cout << "0 unlearned instances\n";
  } else {
    std::cout << render_taxonomy_table(taxonomy_report(labels));
  }
  return 0;
}

struct PlanArgs {
  std::string kind, history, groups, dataset, out, orientation = "loss";
  ConfigFlags flags;
};

int cmd_plan(const PlanArgs& a) {
  const auto cfg = a.flags.build();
  Json out;
  if (a.kind == "epoch") {
    if (a.history.empty()) throw UsageError("plan epoch needs --history");
    const auto h = read_json_arg(a.history, "history");
    std::map<int, double> metrics;
    for (std::size_t i = 0; i < h.size(); ++i) {
      if (h[i].is_number()) {
        metrics[cfg.e_min + static_cast<int>(i)] = h[i].get<double>();
      } else {
        metrics[h[i].at("epoch").get<int>()] = h[i].at("metric").get<double>();
      }
    }
    MetricOrientation o;
    if (a.orientation == "loss") {
      o = MetricOrientation::kLoss;
    } else if (a.orientation == "accuracy") {
      o = MetricOrientation::kAccuracy;
    } else {
      throw UsageError("--orientation must be loss or accuracy");
    }
    out = to_json(epoch_controller(
        [&](int e) -> std::optional<double> {
          auto it = metrics.find(e);
          if (it == metrics.end()) return std::nullopt;
          return it->second;
        },
        o, cfg));
  } else if (a.kind == "buckets") {
    if (a.dataset.empty()) throw UsageError("plan buckets needs --dataset");
    std::vector<std::string> ids;
    for (const auto& inst : read_dataset(a.dataset)) ids.push_back(inst.id);
    std::vector<ConflictGroup> groups;
    if (!a.groups.empty()) {
      for (const auto& row : read_jsonl_arg(a.groups, "groups")) groups.push_back(group_from_json(row));
    }
    out = to_json(plan_buckets(groups, ids, cfg.bucket_count, cfg.seed, cfg.rebucket_interval));
  } else if (a.kind == "resample") {
    if (a.history.empty()) throw UsageError("plan resample needs --history");
    AccuracyHistory hist;
    const Json raw = read_json_arg(a.history, "history");
    for (const auto& [tag, series] : raw.items()) {
      for (const auto& [step, acc] : series.items()) hist[tag][std::stol(step)] = acc.get<double>();
    }
    auto s = build_resample_schedule(hist, cfg);
    if (!a.dataset.empty()) {
      std::vector<std::string> ids;
      for (const auto& inst : read_dataset(a.dataset)) ids.push_back(inst.id);
      s.shuffle_order = shuffle_plan(ids, cfg.seed);
    }
    out = to_json(s);
  } else if (a.kind == "shuffle") {
    if (a.dataset.empty()) throw UsageError("plan shuffle needs --dataset");
    std::vector<std::string> ids;
    for (const auto& inst : read_dataset(a.dataset)) ids.push_back(inst.id);
    out = Json{{"kind", "shuffle_plan"}, {"version", kPlanVersion}, {"seed", cfg.seed},
               {"order", shuffle_plan(ids, cfg.seed)}};
  } else {
    throw UsageError("unknown plan kind '" + a.kind + "'");
  }
  if (a.out.empty()) {
    std::cout << out.dump(2) << '\n';
  } else {
    write_json(a.out, out);
  }
  return 0;
}

struct DiagnoseArgs {
  std::string dataset, items, base, sft, judge, knowledge, out_dir;
  ConfigFlags flags;
};

int cmd_diagnose(const DiagnoseArgs& a) {
  const auto cfg = a.flags.build();
  if (a.sft.empty()) throw UsageError("--sft-endpoint is required");
  if (a.base.empty()) throw UsageError("--base-endpoint is required");
  const auto instances = read_dataset(a.dataset);
  const auto base = endpoint_arg(a.base);
  const auto sft = endpoint_arg(a.sft);

  std::optional<TableJudge> judge;
  if (!a.judge.empty()) {
    const auto rows = read_jsonl_arg(a.judge, "judge verdicts");
    try {
      judge = TableJudge::from_rows(rows);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  std::optional<FixtureKnowledgeSource> knowledge;
  if (!a.knowledge.empty()) {
    const auto rows = read_jsonl_arg(a.knowledge, "knowledge");
    knowledge = FixtureKnowledgeSource::from_rows(rows, fs::path(a.knowledge).stem().string());
  }

  DiagnosisInputs in;
  in.instances = instances;
  in.base = base.endpoint.get();
  in.sft = sft.endpoint.get();
  in.sft_reversed = sft.reversed.get();
  in.judge = judge ? &*judge : nullptr;
  if (knowledge) in.sources.push_back(&*knowledge);
  in.base_tag = base.tag;
  in.sft_tag = sft.tag;
  in.cfg = cfg;
  if (!a.items.empty()) in.items = read_items(a.items);

  const auto started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = run_diagnosis(in);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Json meta{{"started_at", started},
            {"finished_at", utc_now()},
            {"elapsed_s", secs},
            {"dataset", a.dataset},
            {"base_endpoint", a.base},
            {"sft_endpoint", a.sft}};
  write_diagnosis(a.out_dir, result, meta);

  std::cout << result.detection.unlearned_ids.size() << " unlearned of "
            << result.detection.n_instances << " instances\n";
  if (result.taxonomy) std::cout << render_taxonomy_table(*result.taxonomy);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
  return 0;
}

struct SandboxArgs {
  std::string config, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_instances;
};

int cmd_sandbox(const SandboxArgs& a) {
  SimConfig cfg;
  cfg.cause_mix = table_mix();
  try {
    Json j = a.config.empty() ? Json::object() : read_json(a.config);
    if (a.seed) j["seed"] = *a.seed;
    if (a.n_instances) j["n_instances"] = *a.n_instances;
    cfg = sim_config_from_json(j);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const auto data = synthesize(cfg);
  write_sandbox(a.out_dir, data);
  std::cout << "wrote " << data.instances.size() << " instances to " << a.out_dir << '\n';
  return 0;
}

int cmd_report(const std::string& dir) {
  const auto report = read_json_arg((fs::path(dir) / "report.json").string(), "report");
  const auto& det = report.at("detection");
  std::cout << "config " << report.at("config_hash").get<std::string>() << ", seed "
            << report.at("seed") << '\n'
            << det.at("unlearned_count") << " unlearned of " << det.at("n_instances")
            << " instances\n";
  std::ifstream table(fs::path(dir) / "taxonomy.txt");
  std::cout << table.rdbuf();
  for (const auto& [kind, file] : report.at("plans").items()) {
    std::cout << kind << ": " << (fs::path(dir) / file.get<std::string>()).string() << '\n';
  }
  for (const auto& w : report.at("warnings")) std::cout << "warning: " << w.get<std::string>() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diagnose and mitigate incompletely learned fine-tuning data"};
  app.require_subcommand(1);

  ConvertArgs conv;
  auto* c = app.add_subcommand("convert", "Convert a dataset to multiple-choice probe items");
  c->add_option("--dataset", conv.dataset)->required();
  c->add_option("--out", conv.out)->required();
  conv.flags.attach(c);

  ProbeArgs probe;
  auto* p = app.add_subcommand("probe", "Probe an endpoint on every item");
  p->add_option("--items", probe.items);
  p->add_option("--dataset", probe.dataset);
  p->add_option("--endpoint", probe.endpoint)->required();
  p->add_option("--out", probe.out)->required();
  p->add_option("--checkpoint", probe.checkpoint, "resume file");
  probe.flags.attach(p);

  DetectArgs det;
  auto* d = app.add_subcommand("detect", "Flag unlearned instances from probe records");
  d->add_option("--records", det.records)->required();
  d->add_option("--out", det.out)->required();
  det.flags.attach(d);

  AttributeArgs attr;
  auto* at = app.add_subcommand("attribute", "Attribute candidates to causes");
  at->add_option("--detection", attr.detection)->required();
  at->add_option("--summaries", attr.summaries)->required();
  at->add_option("--position", attr.position, "position signal or report.json");
  at->add_option("--out", attr.out)->required();
  attr.flags.attach(at);

  PlanArgs plan;
  auto* pl = app.add_subcommand("plan", "Emit a mitigation plan");
  pl->add_option("kind", plan.kind, "epoch | buckets | resample | shuffle")->required();
  pl->add_option("--history", plan.history);
  pl->add_option("--groups", plan.groups);
  pl->add_option("--dataset", plan.dataset);
  pl->add_option("--orientation", plan.orientation);
  pl->add_option("--out", plan.out);
  plan.flags.attach(pl);

  DiagnoseArgs diag;
  auto* dg = app.add_subcommand("diagnose", "Probe, detect, attribute and plan in one run");
  dg->add_option("--dataset", diag.dataset)->required();
  dg->add_option("--items", diag.items, "pre-converted items");
  dg->add_option("--base-endpoint", diag.base);
  dg->add_option("--sft-endpoint", diag.sft);
  dg->add_option("--judge", diag.judge, "judge verdicts (jsonl)");
  dg->add_option("--knowledge", diag.knowledge, "knowledge documents (jsonl)");
  dg->add_option("--out-dir", diag.out_dir)->required();
  diag.flags.attach(dg);

  SandboxArgs sb;
  auto* s = app.add_subcommand("sandbox", "Write a synthetic corpus with ground truth");
  s->add_option("--config", sb.config, "sandbox config JSON");
  s->add_option("--out-dir", sb.out_dir)->required();
  s->add_option("--seed", sb.seed);
  s->add_option("--n-instances", sb.n_instances);

  std::string report_dir;
  auto* r = app.add_subcommand("report", "Print a diagnosis report");
  r->add_option("--out-dir", report_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c->parsed()) return cmd_convert(conv);
    if (p->parsed()) return cmd_probe(probe);
    if (d->parsed()) return cmd_detect(det);
    if (at->parsed()) return cmd_attribute(attr);
    if (pl->parsed()) return cmd_plan(plan);
    if (dg->parsed()) return cmd_diagnose(diag);
    if (s->parsed()) return cmd_sandbox(sb);
    if (r->parsed()) return cmd_report(report_dir);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
