#include <set>

#include "doctest.h"
#include "ilp/mc_convert.hpp"

using namespace ilp;

namespace {

std::vector<SftInstance> pool(std::size_t n) {
  std::vector<SftInstance> v;
  for (std::size_t i = 0; i < n; ++i) {
    SftInstance s;
    s.id = "i" + std::to_string(i);
    s.prompt = "prompt " + std::to_string(i);
    s.response = "answer " + std::to_string(i);
    s.dataset_tag = i % 2 ? "odd" : "even";
    s.position_index = i;
    v.push_back(s);
  }
  return v;
}

struct FixedGenerator : DistractorGenerator {
  std::vector<std::string> out;
  std::vector<std::string> generate(const SftInstance&, std::size_t, std::uint64_t) const override {
    return out;
  }
};

}  // namespace

TEST_CASE("converted item keeps the response verbatim and distinct options") {
  const auto ds = pool(20);
  PeerResponseGenerator gen(ds);
  for (const auto& inst : ds) {
    const auto item = convert(inst, gen, 4, 7);
    CHECK(item.instance_id == inst.id);
    CHECK(item.stem == inst.prompt);
    REQUIRE(item.options.size() == 4);
    CHECK(item.options[item.correct_index] == inst.response);
    CHECK(std::set<std::string>(item.options.begin(), item.options.end()).size() == 4);
  }
}

TEST_CASE("distractors prefer the same dataset tag") {
  const auto ds = pool(20);
  PeerResponseGenerator gen(ds);
  const auto d = gen.generate(ds[4], 3, 1);
  REQUIRE(d.size() == 3);
  for (const auto& text : d) {
    const int k = std::stoi(text.substr(text.find(' ') + 1));
    CHECK(k % 2 == 0);
    CHECK(k != 4);
  }
}

TEST_CASE("conversion depends only on id and seed") {
  const auto ds = pool(12);
  PeerResponseGenerator gen(ds);
  const auto a = convert(ds[3], gen, 4, 11);
  const auto b = convert(ds[3], gen, 4, 11);
  CHECK(a.options == b.options);
  CHECK(a.correct_index == b.correct_index);

  // reordering the pool leaves the item for a given id unchanged in content
  auto shuffled = ds;
  std::swap(shuffled[0], shuffled[5]);
  PeerResponseGenerator gen2(shuffled);
  const auto c = convert(ds[3], gen2, 4, 11);
  CHECK(c.options[c.correct_index] == ds[3].response);
}

TEST_CASE("correct option position is roughly uniform across ids") {
  const auto ds = pool(400);
  PeerResponseGenerator gen(ds);
  std::vector<int> counts(4, 0);
  for (const auto& inst : ds) ++counts[convert(inst, gen, 4, 3).correct_index];
  // chi-square with 3 dof, 99.9th percentile 16.27
  double chi = 0.0;
  for (int c : counts) chi += (c - 100.0) * (c - 100.0) / 100.0;
  CHECK(chi < 16.27);
}

TEST_CASE("generator contract violations are reported per instance") {
  const auto ds = pool(3);
  FixedGenerator equal;
  equal.out = {"answer 0", "x", "y"};
  CHECK_THROWS_AS(convert(ds[0], equal, 4, 0), ConversionError);

  FixedGenerator dup;
  dup.out = {"x", "x", "y"};
  CHECK_THROWS_AS(convert(ds[0], dup, 4, 0), ConversionError);

  FixedGenerator short_gen;
  short_gen.out = {"x"};
  try {
    convert(ds[1], short_gen, 4, 0);
    FAIL("expected shortfall");
  } catch (const ConversionError& e) {
    CHECK(e.instance_id() == "i1");
    CHECK(std::string(e.what()).find("shortfall") != std::string::npos);
  }
  CHECK_THROWS_AS(convert(ds[0], dup, 1, 0), ConversionError);

  const auto res = convert_dataset(ds, short_gen, 4, 0);
  CHECK(res.items.empty());
  CHECK(res.report.failures.size() == 3);
  CHECK(to_json(res.report)["failed"] == 3);
}

TEST_CASE("tiny pool yields a shortfall rather than repeated options") {
  const auto ds = pool(2);
  PeerResponseGenerator gen(ds);
  const auto res = convert_dataset(ds, gen, 4, 0);
  CHECK(res.report.converted == 0);
  const auto ok = convert_dataset(ds, gen, 2, 0);
  CHECK(ok.report.converted == 2);
}
