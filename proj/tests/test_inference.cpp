#include <atomic>
#include <cmath>
#include <filesystem>
#include <mutex>

#include "doctest.h"
#include "ilp/inference.hpp"

using namespace ilp;

namespace {

McItem item(const std::string& id, std::size_t correct = 0, std::size_t n = 4) {
  McItem it;
  it.instance_id = id;
  it.stem = "q";
  for (std::size_t k = 0; k < n; ++k) it.options.push_back("o" + std::to_string(k));
  it.correct_index = correct;
  return it;
}

std::vector<McItem> items(std::size_t n) {
  std::vector<McItem> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(item("q" + std::to_string(i), i % 4));
  return v;
}

// Fails transiently for the first `fail_first` calls on each id.
class FlakyEndpoint : public ModelEndpoint {
 public:
  FlakyEndpoint(int fail_first, bool transient) : fail_first_(fail_first), transient_(transient) {}
  Answer answer(const McItem& it, double, std::uint64_t) const override {
    {
      std::lock_guard lock(mu_);
      if (calls_[it.instance_id]++ < fail_first_) throw EndpointError("flaky", transient_);
    }
    Answer a;
    a.chosen_index = it.correct_index;
    a.option_probs.assign(it.options.size(), 0.0);
    a.option_probs[it.correct_index] = 1.0;
    a.confidence = 1.0;
    return a;
  }
  int calls(const std::string& id) const {
    std::lock_guard lock(mu_);
    return calls_[id];
  }

 private:
  int fail_first_;
  bool transient_;
  mutable std::mutex mu_;
  mutable std::unordered_map<std::string, int> calls_;
};

class BadEndpoint : public ModelEndpoint {
 public:
  Answer answer(const McItem&, double, std::uint64_t) const override {
    Answer a;
    a.option_probs = {0.5, 0.6, 0.0, 0.0};
    return a;
  }
};

RetryPolicy fast() { return RetryPolicy{3, std::chrono::milliseconds(0)}; }

}  // namespace

TEST_CASE("answer validation") {
  Answer a{1, {0.25, 0.25, 0.25, 0.25}, 0.25};
  CHECK_NOTHROW(validate_answer(a, 4));
  CHECK_THROWS_AS(validate_answer(a, 3), EndpointError);
  a.option_probs[0] = 0.3;
  CHECK_THROWS_AS(validate_answer(a, 4), EndpointError);
  a.option_probs = {-0.1, 0.6, 0.25, 0.25};
  CHECK_THROWS_AS(validate_answer(a, 4), EndpointError);
  a.option_probs = {0.25, 0.25, 0.25, 0.25};
  a.chosen_index = 4;
  CHECK_THROWS_AS(validate_answer(a, 4), EndpointError);
}

TEST_CASE("best of n takes the most confident run, earliest on ties") {
  std::vector<Answer> runs{{2, {}, 0.4}, {1, {}, 0.9}, {3, {}, 0.9}};
  CHECK(best_of_n(runs) == 1);
  CHECK_THROWS(best_of_n(std::span<const Answer>{}));
}

TEST_CASE("mean distribution and record json round trip") {
  ProbeRecord r;
  r.instance_id = "x";
  r.model_tag = "m";
  r.correct_index = 1;
  r.runs = {{1, {0.2, 0.8}, 0.8}, {0, {0.6, 0.4}, 0.6}};
  r.bon_choice = 1;
  r.pass_rate = 0.5;
  const auto m = mean_distribution(r);
  CHECK(m[0] == doctest::Approx(0.4));
  CHECK(m[1] == doctest::Approx(0.6));
  const auto back = record_from_json(to_json(r));
  CHECK(back.runs.size() == 2);
  CHECK(back.correct_runs() == 1);
  CHECK(back.bon_correct());
  CHECK(to_json(back) == to_json(r));
}

TEST_CASE("sim distribution shapes") {
  const auto spread = sim_distribution({0.7, SimProfile::WrongMode::kSpread}, 4, 2);
  CHECK(spread[2] == doctest::Approx(0.7));
  CHECK(spread[0] == doctest::Approx(0.1));
  const auto fixed = sim_distribution({0.1, SimProfile::WrongMode::kFixed}, 4, 3);
  CHECK(fixed[0] == doctest::Approx(0.9));
  CHECK(fixed[3] == doctest::Approx(0.1));
  CHECK(profile_from_json(to_json(SimProfile{0.3, SimProfile::WrongMode::kFixed})).wrong_mode ==
        SimProfile::WrongMode::kFixed);
  CHECK_THROWS(profile_from_json(Json{{"correct_prob", 1.5}}));
  CHECK_THROWS(profile_from_json(Json{{"correct_prob", 0.5}, {"wrong_mode", "odd"}}));
}

TEST_CASE("simulated pass rate matches the declared probability") {
  SimEndpoint ep({{"a", SimProfile{0.3}}}, 1);
  const auto it = item("a", 2);
  int hits = 0;
  const int n = 20000;
  for (int s = 0; s < n; ++s) {
    const auto ans = ep.answer(it, 0.7, static_cast<std::uint64_t>(s));
    validate_answer(ans, 4);
    CHECK(ans.confidence == ans.option_probs[ans.chosen_index]);
    hits += ans.chosen_index == 2;
  }
  const double sd = std::sqrt(0.3 * 0.7 / n);
  CHECK(std::abs(hits / static_cast<double>(n) - 0.3) < 4 * sd);

  const auto greedy = ep.answer(it, 0.0, 5);
  CHECK(greedy.chosen_index == 2);  // spread 0.3 profile: 0.3 beats 0.7 / 3 per distractor
}

TEST_CASE("sim profile lookup order") {
  SimEndpoint ep({{"q1", SimProfile{1.0}}, {"q1#", SimProfile{0.0, SimProfile::WrongMode::kFixed}}},
                 0, SimProfile{0.5});
  CHECK(ep.profile_for("q1").correct_prob == 1.0);
  CHECK(ep.profile_for("q1#t3").correct_prob == 0.0);
  CHECK(ep.profile_for("zz").correct_prob == 0.5);
  SimEndpoint strict({}, 0);
  CHECK_THROWS_AS(strict.profile_for("zz"), EndpointError);
}

TEST_CASE("probe_instance retries transient errors only") {
  FlakyEndpoint flaky(2, true);
  const auto rec = probe_instance(flaky, item("a"), 1, 0.7, 0, fast());
  CHECK(rec.pass_rate == 1.0);
  CHECK(flaky.calls("a") == 3);

  FlakyEndpoint worse(3, true);
  CHECK_THROWS_AS(probe_instance(worse, item("a"), 1, 0.7, 0, fast()), ProbeError);

  FlakyEndpoint permanent(1, false);
  try {
    probe_instance(permanent, item("b"), 1, 0.7, 0, fast());
    FAIL("expected ProbeError");
  } catch (const ProbeError& e) {
    CHECK(e.attempts() == 1);
    CHECK(e.instance_id() == "b");
  }
  CHECK_THROWS_AS(probe_instance(BadEndpoint{}, item("c"), 1, 0.7, 0, fast()), ProbeError);
  CHECK_THROWS(probe_instance(flaky, item("a"), 0, 0.7, 0));
}

TEST_CASE("probe_dataset order is independent of concurrency") {
  SimEndpoint ep({}, 3, SimProfile{0.6});
  const auto its = items(60);
  RunConfig one;
  one.max_in_flight = 1;
  RunConfig many;
  many.max_in_flight = 8;
  const auto a = probe_dataset(ep, its, one);
  const auto b = probe_dataset(ep, its, many);
  REQUIRE(a.records.size() == 60);
  for (std::size_t i = 0; i < 60; ++i) {
    CHECK(a.records[i].instance_id == its[i].instance_id);
    CHECK(to_json(a.records[i]) == to_json(b.records[i]));
  }
  // pass rate is k / n_runs
  for (const auto& r : a.records) {
    CHECK(r.pass_rate * 5 == doctest::Approx(static_cast<double>(r.correct_runs())));
  }
  CHECK_THROWS(probe_dataset(ep, std::span<const McItem>{}, one));
}

TEST_CASE("probe_dataset failure tolerance") {
  SimEndpoint ep({{"q0", SimProfile{0.5}}}, 0);
  const auto its = items(3);
  RunConfig cfg;
  try {
    probe_dataset(ep, its, cfg, {"", fast(), std::nullopt, nullptr});
    FAIL("expected AggregateProbeError");
  } catch (const AggregateProbeError& e) {
    CHECK(e.failures().size() == 2);
  }
  cfg.failure_tolerance = 1.0;
  const auto b = probe_dataset(ep, its, cfg, {"", fast(), std::nullopt, nullptr});
  CHECK(b.records.size() == 1);
  CHECK(b.failures.size() == 2);
}

TEST_CASE("checkpoint resumes without re-probing") {
  const auto path = std::filesystem::temp_directory_path() / "ilp_ckpt.jsonl";
  std::filesystem::remove(path);
  const auto its = items(10);
  RunConfig cfg;
  cfg.n_runs = 2;
  FlakyEndpoint first(0, true);
  ProbeOptions opts{"m", fast(), path, nullptr};
  const auto a = probe_dataset(first, its, cfg, opts);
  CHECK(read_jsonl(path).size() == 10);

  FlakyEndpoint second(0, true);
  std::size_t last_done = 0;
  opts.progress = [&](std::size_t done, std::size_t total, std::size_t) {
    CHECK(total == 10);
    last_done = done;
  };
  const auto b = probe_dataset(second, its, cfg, opts);
  CHECK(last_done == 10);
  CHECK(second.calls("q0") == 0);
  CHECK(b.records.size() == 10);
  CHECK(read_jsonl(path).size() == 10);

  // a different model tag ignores the checkpoint
  FlakyEndpoint third(0, true);
  opts.model_tag = "other";
  probe_dataset(third, its, cfg, opts);
  CHECK(third.calls("q0") == 2);
  std::filesystem::remove(path);
}
