#include "ilp/http_endpoint.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "httplib.h"

namespace ilp {

namespace {

constexpr double kMissingOptionFloor = 1e-6;

std::vector<double> softmax(const std::vector<double>& logprobs) {
  const double hi = *std::max_element(logprobs.begin(), logprobs.end());
  std::vector<double> p(logprobs.size());
  double total = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    p[k] = std::exp(logprobs[k] - hi);
    total += p[k];
  }
  for (auto& x : p) x /= total;
  return p;
}

void normalize(std::vector<double>& p) {
  double total = 0.0;
  for (double x : p) total += x;
  if (!(total > 0.0)) throw EndpointError("option scores have no positive mass", false);
  for (auto& x : p) x /= total;
}

std::optional<std::size_t> label_index(const std::string& label, std::size_t n_options) {
  for (std::size_t k = 0; k < n_options; ++k) {
    if (option_label(k) == label) return k;
  }
  return std::nullopt;
}

std::optional<std::size_t> chosen_from(const Json& body, std::size_t n_options) {
  if (auto it = body.find("chosen_index"); it != body.end() && it->is_number_integer()) {
    const auto k = it->get<long long>();
    if (k < 0 || static_cast<std::size_t>(k) >= n_options) {
      throw EndpointError("chosen_index out of range", false);
    }
    return static_cast<std::size_t>(k);
  }
  if (auto it = body.find("answer"); it != body.end() && it->is_string()) {
    auto k = label_index(it->get<std::string>(), n_options);
    if (!k) throw EndpointError("unknown answer label '" + it->get<std::string>() + "'", false);
    return k;
  }
  return std::nullopt;
}

std::size_t argmax(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::string bearer(const HttpEndpointConfig& cfg) {
  if (!cfg.api_key.empty()) return cfg.api_key;
  if (const char* env = std::getenv(kApiKeyEnv)) return env;
  return {};
}

Json post_json(const HttpEndpointConfig& cfg, const std::string& path, const Json& body) {
  httplib::Client client(cfg.base_url);
  const auto timeout = std::chrono::duration<double>(cfg.timeout_s);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  httplib::Headers headers;
  if (auto key = bearer(cfg); !key.empty()) headers.emplace("Authorization", "Bearer " + key);

  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw EndpointError("request to " + cfg.base_url + path + " failed: " +
                            httplib::to_string(res.error()),
                        true);
  }
  if (res->status == 429 || res->status >= 500) {
    throw EndpointError("provider returned HTTP " + std::to_string(res->status), true);
  }
  if (res->status != 200) {
    throw EndpointError("provider returned HTTP " + std::to_string(res->status), false);
  }
  try {
    return Json::parse(res->body);
  } catch (const Json::parse_error& e) {
    throw EndpointError(std::string("malformed provider response: ") + e.what(), false);
  }
}

}  // namespace

std::string option_label(std::size_t k) {
  std::string label;
  ++k;
  while (k > 0) {
    --k;
    label.insert(label.begin(), static_cast<char>('A' + k % 26));
    k /= 26;
  }
  return label;
}

ParsedAnswer parse_answer_response(const Json& body, std::size_t n_options) {
  if (!body.is_object()) throw EndpointError("provider response must be an object", false);
  ParsedAnswer out;
  Answer& a = out.answer;
  const auto chosen = chosen_from(body, n_options);

  auto full = [&](std::vector<double> probs) {
    if (probs.size() != n_options) {
      throw EndpointError("provider scored " + std::to_string(probs.size()) + " of " +
                              std::to_string(n_options) + " options",
                          false);
    }
    a.option_probs = std::move(probs);
    a.chosen_index = chosen.value_or(argmax(a.option_probs));
    a.confidence = a.option_probs[a.chosen_index];
    out.source = DistributionSource::kFull;
  };

  try {
    if (auto it = body.find("option_logprobs"); it != body.end()) {
      full(softmax(it->get<std::vector<double>>()));
      return out;
    }
    if (auto it = body.find("option_probs"); it != body.end()) {
      auto p = it->get<std::vector<double>>();
      for (double x : p) {
        if (!(x >= 0.0)) throw EndpointError("negative option probability", false);
      }
      normalize(p);
      full(std::move(p));
      return out;
    }
    if (auto it = body.find("top_logprobs"); it != body.end() && it->is_object()) {
      std::vector<double> p(n_options, kMissingOptionFloor);
      std::vector<bool> reported(n_options, false);
      for (const auto& [label, lp] : it->items()) {
        if (auto k = label_index(label, n_options)) {
          p[*k] = std::exp(lp.get<double>());
          reported[*k] = true;
        }
      }
      if (std::none_of(reported.begin(), reported.end(), [](bool b) { return b; })) {
        throw EndpointError("top_logprobs contains no option label", false);
      }
      const auto raw = p;
      normalize(p);
      a.option_probs = std::move(p);
      a.chosen_index = chosen.value_or(argmax(a.option_probs));
      a.confidence = std::min(1.0, raw[a.chosen_index]);
      out.source = DistributionSource::kTopK;
      return out;
    }
    if (auto it = body.find("answer_logprob"); it != body.end()) {
      if (!chosen) throw EndpointError("answer_logprob without a chosen answer", false);
      const double c = std::min(1.0, std::exp(it->get<double>()));
      a.chosen_index = *chosen;
      a.confidence = c;
      a.option_probs.assign(n_options, (1.0 - c) / static_cast<double>(n_options - 1));
      a.option_probs[a.chosen_index] = c;
      out.source = DistributionSource::kAnswerOnly;
      return out;
    }
  } catch (const Json::exception& e) {
    throw EndpointError(std::string("malformed probability field: ") + e.what(), false);
  }
  throw EndpointError("provider response lacks probability information", false);
}

Json build_answer_request(const McItem& item, double temperature, std::uint64_t nonce,
                          const std::string& model) {
  Json labels = Json::array();
  for (std::size_t k = 0; k < item.options.size(); ++k) labels.push_back(option_label(k));
  Json req{{"stem", item.stem},
           {"options", item.options},
           {"labels", labels},
           {"temperature", temperature},
           {"nonce", nonce}};
  if (!model.empty()) req["model"] = model;
  return req;
}

HttpEndpoint::HttpEndpoint(HttpEndpointConfig cfg) : cfg_(std::move(cfg)) {}

Answer HttpEndpoint::answer(const McItem& item, double temperature, std::uint64_t seed) const {
  const auto nonce = mix_seed(seed, item.instance_id);
  const auto body = post_json(cfg_, cfg_.path, build_answer_request(item, temperature, nonce, cfg_.model));
  return parse_answer_response(body, item.options.size()).answer;
}

HttpDistractorGenerator::HttpDistractorGenerator(HttpEndpointConfig cfg) : cfg_(std::move(cfg)) {}

std::vector<std::string> HttpDistractorGenerator::generate(const SftInstance& instance,
                                                           std::size_t count,
                                                           std::uint64_t seed) const {
  Json req{{"prompt", instance.prompt},
           {"response", instance.response},
           {"count", count},
           {"seed", mix_seed(seed, instance.id)}};
  if (!cfg_.model.empty()) req["model"] = cfg_.model;
  const auto body = post_json(cfg_, cfg_.path, req);
  try {
    return body.at("distractors").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw EndpointError(std::string("malformed distractor response: ") + e.what(), false);
  }
}

}  // namespace ilp
