#include <atomic>
#include <cmath>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "ilp/http_endpoint.hpp"

using namespace ilp;

namespace {

McItem item4() {
  McItem it;
  it.instance_id = "q";
  it.stem = "What?";
  it.options = {"a", "b", "c", "d"};
  it.correct_index = 1;
  return it;
}

// In-process provider on an ephemeral port.
class LocalServer {
 public:
  explicit LocalServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/mc/answer", handler);
    server_.Post(kDistractorPath, [](const httplib::Request& req, httplib::Response& res) {
      const auto body = Json::parse(req.body);
      Json out = Json::array();
      for (int k = 0; k < body["count"].get<int>(); ++k) out.push_back("d" + std::to_string(k));
      res.set_content(Json{{"distractors", out}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LocalServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("option labels") {
  CHECK(option_label(0) == "A");
  CHECK(option_label(25) == "Z");
  CHECK(option_label(26) == "AA");
  CHECK(option_label(27) == "AB");
}

TEST_CASE("full logprob responses are softmaxed") {
  const Json body{{"option_logprobs", {std::log(0.1), std::log(0.6), std::log(0.2), std::log(0.1)}}};
  const auto p = parse_answer_response(body, 4);
  CHECK(p.source == DistributionSource::kFull);
  CHECK(p.answer.chosen_index == 1);
  CHECK(p.answer.option_probs[1] == doctest::Approx(0.6));
  CHECK(p.answer.confidence == doctest::Approx(0.6));
  CHECK_NOTHROW(validate_answer(p.answer, 4));
}

TEST_CASE("explicit choice overrides the argmax") {
  const Json body{{"option_probs", {2, 6, 1, 1}}, {"answer", "C"}};
  const auto p = parse_answer_response(body, 4);
  CHECK(p.answer.chosen_index == 2);
  CHECK(p.answer.option_probs[1] == doctest::Approx(0.6));
  CHECK(p.answer.confidence == doctest::Approx(0.1));
}

TEST_CASE("partial and answer-only responses") {
  const Json top{{"top_logprobs", {{"B", std::log(0.7)}, {"D", std::log(0.2)}}}};
  const auto t = parse_answer_response(top, 4);
  CHECK(t.source == DistributionSource::kTopK);
  CHECK(t.answer.chosen_index == 1);
  CHECK(t.answer.confidence == doctest::Approx(0.7));
  CHECK_NOTHROW(validate_answer(t.answer, 4));

  const Json only{{"answer_logprob", std::log(0.4)}, {"chosen_index", 3}};
  const auto o = parse_answer_response(only, 4);
  CHECK(o.source == DistributionSource::kAnswerOnly);
  CHECK(o.answer.option_probs[0] == doctest::Approx(0.2));
  CHECK_NOTHROW(validate_answer(o.answer, 4));
}

TEST_CASE("malformed responses are permanent errors") {
  auto permanent = [](const Json& body) {
    try {
      parse_answer_response(body, 4);
    } catch (const EndpointError& e) {
      return !e.transient();
    }
    return false;
  };
  CHECK(permanent(Json::array()));
  CHECK(permanent(Json{{"text", "B"}}));
  CHECK(permanent(Json{{"option_probs", {0.5, 0.5}}}));
  CHECK(permanent(Json{{"option_probs", {-1, 1, 0.5, 0.5}}}));
  CHECK(permanent(Json{{"option_probs", {0.2, 0.8, 0, 0}}, {"chosen_index", 9}}));
  CHECK(permanent(Json{{"top_logprobs", {{"Q", -0.1}}}}));
  CHECK(permanent(Json{{"answer_logprob", -0.1}}));
  CHECK(permanent(Json{{"option_logprobs", "nope"}}));
}

TEST_CASE("request body carries stem, options and labels") {
  const auto req = build_answer_request(item4(), 0.7, 9, "m1");
  CHECK(req["labels"] == Json::array({"A", "B", "C", "D"}));
  CHECK(req["model"] == "m1");
  CHECK(req["nonce"] == 9);
  CHECK_FALSE(build_answer_request(item4(), 0.7, 9, "").contains("model"));
}

TEST_CASE("http endpoint against a local provider") {
  std::atomic<int> calls{0};
  std::string seen_auth;
  LocalServer server([&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    const auto body = Json::parse(req.body);
    if (calls++ == 0) {
      res.status = 503;
      return;
    }
    CHECK(body["options"].size() == 4);
    res.set_content(Json{{"option_probs", {0.1, 0.7, 0.1, 0.1}}}.dump(), "application/json");
  });

  HttpEndpointConfig cfg;
  cfg.base_url = server.url();
  cfg.api_key = "secret";
  cfg.timeout_s = 5;
  HttpEndpoint ep(cfg);
  const auto rec = probe_instance(ep, item4(), 2, 0.7, 0, {3, std::chrono::milliseconds(1)});
  CHECK(rec.pass_rate == 1.0);
  CHECK(calls == 3);
  CHECK(seen_auth == "Bearer secret");

  HttpEndpointConfig dcfg = cfg;
  dcfg.path = kDistractorPath;
  HttpDistractorGenerator gen(dcfg);
  SftInstance inst{"q", "p", "r", "", 0, Json::object()};
  CHECK(gen.generate(inst, 3, 1) == std::vector<std::string>{"d0", "d1", "d2"});
}

TEST_CASE("client errors are permanent and unreachable hosts transient") {
  LocalServer server([](const httplib::Request&, httplib::Response& res) { res.status = 400; });
  HttpEndpointConfig cfg;
  cfg.base_url = server.url();
  cfg.timeout_s = 5;
  try {
    HttpEndpoint(cfg).answer(item4(), 0.7, 0);
    FAIL("expected error");
  } catch (const EndpointError& e) {
    CHECK_FALSE(e.transient());
  }

  HttpEndpointConfig dead;
  dead.base_url = "http://127.0.0.1:1";
  dead.timeout_s = 1;
  try {
    HttpEndpoint(dead).answer(item4(), 0.7, 0);
    FAIL("expected error");
  } catch (const EndpointError& e) {
    CHECK(e.transient());
  }
}
