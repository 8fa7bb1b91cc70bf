#include <fstream>

#include "doctest.h"
#include "ilp/pipeline.hpp"
#include "ilp/sandbox.hpp"

using namespace ilp;

namespace {

struct Fixture {
  SandboxData data;
  std::unique_ptr<SimEndpoint> base, sft, rev;
  TableJudge judge;

  explicit Fixture(std::size_t n, std::uint64_t seed = 1) {
    SimConfig c;
    c.n_instances = n;
    c.cause_mix = table_mix();
    c.seed = seed;
    data = synthesize(c);
    base = sim_endpoint_from_json(data.base_endpoint);
    sft = sim_endpoint_from_json(data.sft_endpoint);
    rev = sim_endpoint_from_json(data.sft_endpoint["reversed"]);
    for (const auto& t : data.truth) judge.set(t.id, t.judged_correct);
  }

  DiagnosisInputs inputs() const {
    DiagnosisInputs in;
    in.instances = data.instances;
    in.base = base.get();
    in.sft = sft.get();
    in.sft_reversed = rev.get();
    in.judge = &judge;
    return in;
  }
};

}  // namespace

TEST_CASE("endpoint config loading") {
  const Json sim{{"type", "sim"}, {"seed", 1}, {"profiles", {{"a", {{"correct_prob", 0.5}}}}},
                 {"reversed", {{"type", "sim"}, {"seed", 2}, {"profiles", Json::object()}}}};
  const auto ep = endpoint_from_json(sim, "m");
  CHECK(ep.tag == "m");
  CHECK(ep.endpoint != nullptr);
  CHECK(ep.reversed != nullptr);
  CHECK_THROWS_AS(endpoint_from_json(Json{{"type", "carrier-pigeon"}}, "x"), ConfigError);
  CHECK_THROWS_AS(endpoint_from_json(Json{{"type", "http"}}, "x"), ConfigError);
  const auto http = endpoint_from_json(Json{{"type", "http"}, {"base_url", "http://127.0.0.1:1"}}, "h");
  CHECK(http.reversed == nullptr);

  const auto dir = std::filesystem::temp_directory_path() / "ilp_pipeline_ep";
  std::filesystem::create_directories(dir);
  write_json(dir / "my_model.json", sim);
  CHECK(load_endpoint(dir / "my_model.json").tag == "my_model");
  CHECK_THROWS_AS(load_endpoint(dir / "absent.json"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("diagnosis labels every candidate and emits plans by cause") {
  Fixture f(400);
  const auto r = run_diagnosis(f.inputs());
  REQUIRE(r.taxonomy.has_value());
  CHECK(r.labels.size() == r.detection.candidate_ids.size());
  CHECK(r.summaries.size() == r.labels.size());
  const auto& counts = r.taxonomy->counts;
  CHECK(r.manifest.has_value() ==
        (counts.at(Cause::kKnowledgeLimitation) + counts.at(Cause::kBaseModelConflict) > 0));
  CHECK(r.buckets.has_value() == (counts.at(Cause::kIntraSftConflict) > 0));
  CHECK(r.resample.has_value() == (counts.at(Cause::kLeftSideForgetting) > 0));
  CHECK(r.epoch_plan.has_value() == (counts.at(Cause::kInsufficientTraining) > 0));
  CHECK(r.buckets.has_value());
  for (const auto& id : r.conflicts.removals) CHECK_FALSE(r.buckets->assignment.contains(id));
}

TEST_CASE("diagnosis is deterministic and seed sensitive") {
  Fixture f(300);
  const auto a = canonical_report(run_diagnosis(f.inputs()));
  auto in = f.inputs();
  in.cfg.max_in_flight = 1;
  auto b = canonical_report(run_diagnosis(in));
  b["config"]["max_in_flight"] = a["config"]["max_in_flight"];
  b["config_hash"] = a["config_hash"];
  CHECK(a == b);
  in.cfg.seed = 99;
  CHECK(canonical_report(run_diagnosis(in))["taxonomy"] != Json(nullptr));
}

TEST_CASE("diagnosis without a reversed endpoint or judge warns") {
  Fixture f(200);
  auto in = f.inputs();
  in.sft_reversed = nullptr;
  in.judge = nullptr;
  const auto r = run_diagnosis(in);
  CHECK_FALSE(r.has_reversed);
  CHECK(std::any_of(r.warnings.begin(), r.warnings.end(),
                    [](const std::string& w) { return w.find("reversed") != std::string::npos; }));
  CHECK_FALSE(r.conflicts.unjudged.empty());
  CHECK(r.conflicts.groups.empty());
  if (r.taxonomy) CHECK(r.taxonomy->counts.at(Cause::kLeftSideForgetting) == 0);
}

TEST_CASE("diagnosis with nothing unlearned writes an empty taxonomy") {
  SimConfig c;
  c.n_instances = 50;
  c.cause_mix = {};
  const auto data = synthesize(c);
  const auto base = sim_endpoint_from_json(data.base_endpoint);
  const auto sft = sim_endpoint_from_json(data.sft_endpoint);
  DiagnosisInputs in;
  in.instances = data.instances;
  in.base = base.get();
  in.sft = sft.get();
  const auto r = run_diagnosis(in);
  CHECK(r.detection.candidate_ids.empty());
  CHECK_FALSE(r.taxonomy.has_value());
  const auto dir = std::filesystem::temp_directory_path() / "ilp_pipeline_empty";
  std::filesystem::remove_all(dir);
  write_diagnosis(dir, r, Json{{"started", "now"}});
  std::ifstream in_file(dir / "taxonomy.txt");
  std::string line;
  std::getline(in_file, line);
  CHECK(line == "0 unlearned instances");
  CHECK(plan_files(r).empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("diagnosis input errors") {
  Fixture f(50);
  auto in = f.inputs();
  in.cfg.n_options = 1;
  CHECK_THROWS_AS(run_diagnosis(in), ConfigError);
  in = f.inputs();
  in.sft = nullptr;
  CHECK_THROWS_AS(run_diagnosis(in), ConfigError);
  in = f.inputs();
  in.items = {McItem{"nope", "s", {"a", "b"}, 0}};
  CHECK_THROWS_AS(run_diagnosis(in), AlignmentError);
}

TEST_CASE("written outputs match the in-memory result") {
  Fixture f(300);
  const auto r = run_diagnosis(f.inputs());
  const auto dir = std::filesystem::temp_directory_path() / "ilp_pipeline_out";
  std::filesystem::remove_all(dir);
  const auto written = write_diagnosis(dir, r, Json{{"started", "t"}});
  for (const auto& p : written) CHECK(std::filesystem::exists(p));
  CHECK(read_jsonl(dir / "labels.jsonl").size() == r.labels.size());
  const auto report = read_json(dir / "report.json");
  CHECK(report == canonical_report(r));
  for (const auto& [kind, file] : plan_files(r)) {
    CHECK(read_json(dir / file)["version"] == kPlanVersion);
  }
  CHECK_FALSE(report.dump().find("started") != std::string::npos);
  std::filesystem::remove_all(dir);
}
