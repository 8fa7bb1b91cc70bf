#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ilp/core.hpp"

namespace ilp {

/// Produces plausible-but-wrong alternatives for an instance's response.
/// Implementations may return fewer than `count` texts; convert() reports
/// that as a shortfall.
class DistractorGenerator {
 public:
  virtual ~DistractorGenerator() = default;
  virtual std::vector<std::string> generate(const SftInstance& instance, std::size_t count,
                                            std::uint64_t seed) const = 0;
};

/// Built-in generator: samples responses of other instances with the same
/// dataset_tag, then falls back to the whole pool.
class PeerResponseGenerator : public DistractorGenerator {
 public:
  explicit PeerResponseGenerator(std::span<const SftInstance> pool);

  std::vector<std::string> generate(const SftInstance& instance, std::size_t count,
                                    std::uint64_t seed) const override;

 private:
  std::vector<std::string> responses_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_tag_;
};

class ConversionError : public std::runtime_error {
 public:
  ConversionError(std::string instance_id, const std::string& what)
      : std::runtime_error(what), instance_id_(std::move(instance_id)) {}
  const std::string& instance_id() const noexcept { return instance_id_; }

 private:
  std::string instance_id_;
};

/// Builds the multiple-choice form of one instance. The response is kept
/// verbatim as the correct option; option order depends only on
/// (instance.id, seed).
McItem convert(const SftInstance& instance, const DistractorGenerator& gen, int n_options,
               std::uint64_t seed);

struct ConversionReport {
  std::size_t converted = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // (instance id, reason)
};

Json to_json(const ConversionReport& report);

struct ConversionResult {
  std::vector<McItem> items;
  ConversionReport report;
};

/// Converts every instance; per-instance failures are reported, never thrown.
ConversionResult convert_dataset(std::span<const SftInstance> instances,
                                 const DistractorGenerator& gen, int n_options,
                                 std::uint64_t seed);

}  // namespace ilp
