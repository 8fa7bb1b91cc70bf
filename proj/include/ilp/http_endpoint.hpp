#pragma once

#include <string>

#include "ilp/inference.hpp"
#include "ilp/mc_convert.hpp"

namespace ilp {

/// Environment variable holding the bearer token for HTTP providers.
inline constexpr const char* kApiKeyEnv = "ILP_API_KEY";
inline constexpr const char* kDistractorPath = "/v1/distractors";

struct HttpEndpointConfig {
  std::string base_url;  // e.g. "http://127.0.0.1:8080"
  std::string path = "/v1/mc/answer";
  std::string model;
  double timeout_s = 30.0;
  std::string api_key;  // empty: read kApiKeyEnv at call time
};

/// Where the option distribution in a provider response came from.
enum class DistributionSource { kFull, kTopK, kAnswerOnly };

struct ParsedAnswer {
  Answer answer;
  DistributionSource source = DistributionSource::kFull;
};

/// Interprets a provider response body. Accepted shapes, in order of
/// preference:
///   {"option_logprobs": [..]}             full log-distribution over options
///   {"option_probs": [..]}                full distribution (renormalized)
///   {"top_logprobs": {"A": lp, ..}}       partial; missing labels get 1e-6
///   {"answer_logprob": lp}                chosen token only
/// "chosen_index" (int) or "answer" (label) selects the choice; otherwise the
/// argmax is used. Throws EndpointError when no probability field is present.
ParsedAnswer parse_answer_response(const Json& body, std::size_t n_options);

/// Request body sent for one probe.
Json build_answer_request(const McItem& item, double temperature, std::uint64_t nonce,
                          const std::string& model);

/// Option label for index k: "A", "B", ... "Z", "AA", ...
std::string option_label(std::size_t k);

/// HTTP inference provider. Network errors and 5xx/429 responses are
/// transient; other failures are permanent.
class HttpEndpoint : public ModelEndpoint {
 public:
  explicit HttpEndpoint(HttpEndpointConfig cfg);
  Answer answer(const McItem& item, double temperature, std::uint64_t seed) const override;

 private:
  HttpEndpointConfig cfg_;
};

/// Distractor generator backed by an external model service:
/// POST {prompt, response, count, seed} -> {"distractors": [..]}.
/// Posts to cfg.path, which callers usually set to kDistractorPath.
class HttpDistractorGenerator : public DistractorGenerator {
 public:
  explicit HttpDistractorGenerator(HttpEndpointConfig cfg);
  std::vector<std::string> generate(const SftInstance& instance, std::size_t count,
                                    std::uint64_t seed) const override;

 private:
  HttpEndpointConfig cfg_;
};

}  // namespace ilp
