#include <cmath>

#include "doctest.h"
#include "ilp/sandbox.hpp"

using namespace ilp;

namespace {

std::map<std::optional<Cause>, std::size_t> class_counts(const SandboxData& d) {
  std::map<std::optional<Cause>, std::size_t> out;
  for (const auto& t : d.truth) ++out[t.true_cause];
  return out;
}

std::vector<SftInstance> plain(std::size_t n) {
  std::vector<SftInstance> v;
  for (std::size_t i = 0; i < n; ++i) {
    v.push_back({"i" + std::to_string(i), "p", "r", "seg" + std::to_string(i * 10 / n), i, Json::object()});
  }
  return v;
}

}  // namespace

TEST_CASE("sandbox config parsing") {
  const auto c = sim_config_from_json(Json{{"n_instances", 50}, {"seed", 3}});
  CHECK(c.n_instances == 50);
  CHECK(c.cause_mix == table_mix());
  CHECK(sim_config_from_json(to_json(c)).cause_mix == c.cause_mix);
  CHECK_THROWS_AS(sim_config_from_json(Json{{"n", 5}}), ConfigError);
  CHECK_THROWS_AS(sim_config_from_json(Json{{"n_instances", 0}}), ConfigError);
  CHECK_THROWS_AS(sim_config_from_json(Json{{"cause_mix", {{"Gremlins", 0.1}}}}), ConfigError);
  CHECK_THROWS_AS(sim_config_from_json(Json{{"cause_mix", {{"KnowledgeLimitation", 0.7},
                                                           {"BaseModelConflict", 0.5}}}}),
                  ConfigError);
}

TEST_CASE("class counts follow largest-remainder rounding") {
  SimConfig cfg;
  cfg.n_instances = 1000;
  cfg.cause_mix = table_mix();
  const auto d = synthesize(cfg);
  const auto counts = class_counts(d);
  CHECK(counts.at(Cause::kKnowledgeLimitation) == 187);
  CHECK(counts.at(Cause::kBaseModelConflict) == 132);
  CHECK(counts.at(Cause::kIntraSftConflict) == 141);
  CHECK(counts.at(Cause::kLeftSideForgetting) == 174);
  CHECK(counts.at(Cause::kInsufficientTraining) == 146);
  CHECK(counts.at(std::nullopt) == 220);

  for (std::size_t n : {7u, 33u, 101u, 999u}) {
    cfg.n_instances = n;
    std::size_t total = 0;
    for (const auto& [c, k] : class_counts(synthesize(cfg))) {
      total += k;
      if (c && *c != Cause::kIntraSftConflict) {
        CHECK(std::abs(static_cast<double>(k) - table_mix().at(*c) * n) < 1.0 + 1e-9);
      }
    }
    CHECK(total == n);
  }
}

TEST_CASE("sandbox layout invariants") {
  SimConfig cfg;
  cfg.n_instances = 500;
  cfg.cause_mix = table_mix();
  cfg.cause_mix[Cause::kUnattributed] = 0.1;
  cfg.seed = 5;
  const auto d = synthesize(cfg);
  const auto again = synthesize(cfg);
  CHECK(to_json(d.truth[17]) == to_json(again.truth[17]));
  CHECK(d.base_endpoint == again.base_endpoint);

  std::size_t lsf = 0;
  std::set<std::size_t> lsf_deciles;
  for (const auto& t : d.truth) {
    if (t.true_cause == Cause::kLeftSideForgetting) {
      CHECK(t.position_index == lsf++);  // contiguous from the front
      lsf_deciles.insert(t.decile);
    }
  }
  for (const auto& t : d.truth) {
    if (t.true_cause == Cause::kInsufficientTraining || t.true_cause == Cause::kUnattributed) {
      CHECK_FALSE(lsf_deciles.contains(t.decile));
    }
    if (t.true_cause == Cause::kIntraSftConflict) {
      REQUIRE(t.conflict_partner.has_value());
      const auto& me = d.instances[t.position_index];
      const auto& other = *std::find_if(d.instances.begin(), d.instances.end(),
                                        [&](const SftInstance& s) { return s.id == *t.conflict_partner; });
      CHECK(me.prompt == other.prompt);
      CHECK(me.response != other.response);
    } else {
      CHECK_FALSE(t.conflict_partner.has_value());
      CHECK(t.judged_correct);
    }
  }
  std::set<std::string> prompts;
  for (const auto& inst : d.instances) {
    CHECK(inst.dataset_tag == "seg" + std::to_string(decile_of(inst.position_index, 500)));
  }
}

TEST_CASE("sandbox endpoints and files") {
  SimConfig cfg;
  cfg.n_instances = 40;
  cfg.cause_mix = table_mix();
  const auto d = synthesize(cfg);
  const auto base = sim_endpoint_from_json(d.base_endpoint);
  const auto sft = sim_endpoint_from_json(d.sft_endpoint);
  const auto rev = sim_endpoint_from_json(d.sft_endpoint["reversed"]);
  for (const auto& t : d.truth) {
    CHECK(base->profile_for(t.id).correct_prob == t.base.correct_prob);
    CHECK(base->profile_for(t.id + "#t0").correct_prob == t.triplet.correct_prob);
    CHECK(sft->profile_for(t.id).correct_prob == t.sft.correct_prob);
    CHECK(rev->profile_for(t.id).correct_prob == t.sft_reversed.correct_prob);
  }
  CHECK_THROWS_AS(sim_endpoint_from_json(Json{{"type", "http"}}), ConfigError);

  const auto dir = std::filesystem::temp_directory_path() / "ilp_sandbox_test";
  std::filesystem::remove_all(dir);
  write_sandbox(dir, d);
  CHECK(load_dataset(dir / "dataset.jsonl").size() == 40);
  const auto truth = read_jsonl(dir / "ground_truth.jsonl");
  REQUIRE(truth.size() == 40);
  CHECK(truth[0].contains("verdict"));
  CHECK(read_json(dir / "sft_endpoint.json").contains("reversed"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("toy learner accuracy formula") {
  const auto ds = plain(2);
  ToyLearner l(ds, ToyParams{});
  // zero retention: chance among four options
  CHECK(l.accuracy(0) == doctest::Approx(0.25));
  const std::vector<std::size_t> b{0};
  l.step(b);
  const double r = 0.6;
  const double z = std::exp(3.0 * r / 0.7);
  CHECK(l.retention(0) == doctest::Approx(r));
  CHECK(l.accuracy(0) == doctest::Approx(z / (z + 3)));
}

TEST_CASE("toy learner forgets towards the consolidated floor") {
  const auto ds = plain(2);
  ToyParams p;
  ToyLearner l(ds, p);
  const std::vector<std::size_t> b0{0}, b1{1};
  l.step(b0);  // r = 0.6, f = 0.3
  double prev = l.retention(0);
  for (int k = 0; k < 50; ++k) {
    l.step(b1);
    const double now = l.retention(0);
    CHECK(now < prev);
    CHECK(now > 0.3);
    prev = now;
  }
  // closed form after 50 idle steps
  CHECK(l.retention(0) == doctest::Approx(0.3 + 0.3 * std::exp(-0.02 * 50)));
}

TEST_CASE("toy learner conflict overwrite and cancellation") {
  const auto ds = plain(2);
  const std::map<std::string, std::string> partners{{"i0", "i1"}, {"i1", "i0"}};
  ToyLearner l(ds, ToyParams{}, partners);
  const std::vector<std::size_t> b0{0}, b1{1}, both{0, 1};
  l.step(b0);
  l.step(b1);
  CHECK(l.retention(1) == doctest::Approx(0.6));
  CHECK(l.retention(0) < 0.6 * std::exp(-0.02));  // overwritten by the partner's gain

  ToyLearner together(ds, ToyParams{}, partners);
  together.step(both);
  CHECK(together.retention(0) == doctest::Approx(0.06));
  CHECK_THROWS(l.index_of("zz"));
}

TEST_CASE("toy training shows and removes a left-side deficit") {
  const auto ds = plain(1000);
  ToyTrainOptions seq;
  seq.epochs = 3;
  seq.cfg.resample_interval = 25;
  ToyLearner a(ds, ToyParams{});
  toy_train(a, ds, seq);
  const auto da = decile_means(a, ds);
  CHECK(da[9] - da[0] > 0.03);

  ToyTrainOptions shuf = seq;
  shuf.reshuffle = true;
  ToyLearner b(ds, ToyParams{});
  const auto hist = toy_train(b, ds, shuf);
  const auto db = decile_means(b, ds);
  CHECK(std::abs(db[9] - db[0]) < 0.02);
  CHECK(hist.steps.front() == 0);
  CHECK(hist.steps.back() == 300);
  CHECK(hist.per_tag.size() == 10);
}

TEST_CASE("toy training validates its inputs") {
  const auto ds = plain(20);
  ToyLearner l(ds, ToyParams{});
  ToyTrainOptions o;
  o.order = {"i0", "i0"};
  CHECK_THROWS_AS(toy_train(l, ds, o), std::invalid_argument);
  o.order.clear();
  o.exclude = {"zz"};
  CHECK_THROWS_AS(toy_train(l, ds, o), std::invalid_argument);
  o.exclude.clear();
  BucketPlan partial;
  partial.bucket_count = 2;
  partial.assignment = {{"i0", 0}};
  o.buckets = partial;
  CHECK_THROWS_AS(toy_train(l, ds, o), std::invalid_argument);
}
