#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ilp/core.hpp"

using namespace ilp;

namespace {

std::vector<SftInstance> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_dataset(in);
}

}  // namespace

TEST_CASE("dataset parsing assigns positions from record order") {
  auto ds = parse(
      R"({"id":"a","prompt":"p1","response":"r1","dataset_tag":"t"})"
      "\n\n"
      R"({"id":"b","prompt":"p2","response":"r2","source":"wiki"})"
      "\n");
  REQUIRE(ds.size() == 2);
  CHECK(ds[0].position_index == 0);
  CHECK(ds[1].position_index == 1);
  CHECK(ds[0].dataset_tag == "t");
  CHECK(ds[1].dataset_tag.empty());
  CHECK(ds[1].metadata["source"] == "wiki");
  CHECK(to_json(ds[1])["source"] == "wiki");
}

TEST_CASE("duplicate ids name both physical lines") {
  const std::string text =
      R"({"id":"q7","prompt":"p","response":"r"})"
      "\n"
      R"({"id":"q8","prompt":"p","response":"r"})"
      "\n\n"
      R"({"id":"q9","prompt":"p","response":"r"})"
      "\n"
      R"({"id":"q7","prompt":"p","response":"r"})"
      "\n";
  try {
    parse(text);
    FAIL("expected DatasetError");
  } catch (const DatasetError& e) {
    CHECK(std::string(e.what()) == "duplicate id 'q7' on lines 1 and 5");
    CHECK(e.line() == 5);
  }
}

TEST_CASE("malformed records are rejected with their line") {
  CHECK_THROWS_AS(parse("{not json}\n"), DatasetError);
  CHECK_THROWS_AS(parse(R"({"id":"a","prompt":"p"})"), DatasetError);
  CHECK_THROWS_AS(parse(R"({"id":"a","prompt":"","response":"r"})"), DatasetError);
  CHECK_THROWS_AS(parse(R"({"id":1,"prompt":"p","response":"r"})"), DatasetError);
  try {
    parse("\n" R"({"id":"a","prompt":"p"})");
  } catch (const DatasetError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("dataset round-trips through disk") {
  const auto dir = std::filesystem::temp_directory_path() / "ilp_core_rt";
  std::filesystem::create_directories(dir);
  auto ds = parse(R"({"id":"a","prompt":"p","response":"r","extra":[1,2]})");
  save_dataset(dir / "d.jsonl", ds);
  auto back = load_dataset(dir / "d.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back[0].id == "a");
  CHECK(back[0].metadata["extra"] == Json::array({1, 2}));
  CHECK_THROWS(load_dataset(dir / "missing.jsonl"));
}

TEST_CASE("config json round trip and unknown keys") {
  RunConfig cfg;
  cfg.n_runs = 7;
  cfg.drop_mode = DropMode::kAbsolute;
  cfg.cascade_order = {"LeftSideForgetting", "KnowledgeLimitation", "BaseModelConflict",
                       "IntraSftConflict"};
  cfg.seed = 99;
  auto back = config_from_json(to_json(cfg));
  CHECK(back.n_runs == 7);
  CHECK(back.drop_mode == DropMode::kAbsolute);
  CHECK(back.cascade_order == cfg.cascade_order);
  CHECK(back.seed == 99);
  CHECK(config_hash(back) == config_hash(cfg));

  CHECK_THROWS_AS(config_from_json(Json{{"n_run", 3}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(Json{{"drop_mode", "sideways"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(Json{{"n_runs", "five"}}), ConfigError);
}

TEST_CASE("config hash covers every field") {
  const RunConfig base;
  const auto h0 = config_hash(base);
  CHECK(h0.size() == 16);
  const Json j = to_json(base);
  for (const auto& [key, value] : j.items()) {
    Json changed = j;
    if (value.is_number_float()) {
      changed[key] = value.get<double>() + 0.125;
    } else if (value.is_number()) {
      changed[key] = value.get<long long>() + 1;
    } else if (value.is_string()) {
      changed[key] = value == "relative" ? "absolute" : "relative";
    } else if (value.is_array()) {
      auto arr = value;
      std::swap(arr[0], arr[1]);
      changed[key] = arr;
    }
    INFO(key);
    CHECK(config_hash(config_from_json(changed)) != h0);
  }
}

TEST_CASE("config validation reports every violation") {
  CHECK(validate_config(RunConfig{}).empty());
  RunConfig bad;
  bad.n_options = 1;
  bad.mix_general = 0.7;
  bad.pass_threshold = 1.5;
  bad.cascade_order = {"KnowledgeLimitation"};
  const auto v = validate_config(bad);
  auto has = [&](const std::string& prefix) {
    return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.rfind(prefix, 0) == 0; });
  };
  CHECK(has("n_options"));
  CHECK(has("mix_general + mix_aug"));
  CHECK(has("pass_threshold"));
  CHECK(has("cascade_order"));
}

TEST_CASE("strict comparison absorbs rounding at the threshold") {
  CHECK((0.80 - 0.76) / 0.80 > 0.05);  // the raw comparison would cross
  CHECK_FALSE(exceeds((0.80 - 0.76) / 0.80, 0.05));
  CHECK(exceeds((0.80 - 0.74) / 0.80, 0.05));
  CHECK_FALSE(exceeds(0.05, 0.05));
}

TEST_CASE("rng is deterministic and in range") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    (void)c;
  }
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.below(7) < 7);
  }
  CHECK_THROWS(r.below(0));
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  r.shuffle(v);
  CHECK(std::set<int>(v.begin(), v.end()).size() == 8);
}

TEST_CASE("categorical follows its weights") {
  Rng r(5);
  const std::vector<double> w{0.0, 3.0, 1.0};
  int counts[3] = {0, 0, 0};
  const int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[r.categorical(w)];
  CHECK(counts[0] == 0);
  // 3 sigma binomial bound around 0.75
  const double p = 0.75, sd = std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(counts[1] / static_cast<double>(n) - p) < 3 * sd);
}

TEST_CASE("seed mixing separates keys") {
  CHECK(mix_seed(1, "a") != mix_seed(1, "b"));
  CHECK(mix_seed(1, "a") != mix_seed(2, "a"));
  CHECK(mix_seed(1, std::uint64_t{3}) == mix_seed(1, std::uint64_t{3}));
  // FNV-1a 64 reference values
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}
