#include "ilp/attribute.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace ilp {

namespace {

struct CauseInfo {
  Cause cause;
  const char* name;
  const char* row;
  const char* description;
};

constexpr std::array<CauseInfo, 6> kInfo = {{
    {Cause::kKnowledgeLimitation, "KnowledgeLimitation", "I. Base model knowledge limitation",
     "knowledge absent from base model"},
    {Cause::kBaseModelConflict, "BaseModelConflict", "II. Conflict with base model",
     "base model confidently disagrees"},
    {Cause::kIntraSftConflict, "IntraSftConflict", "III. Conflict within SFT data",
     "wrong answer or multiple positions"},
    {Cause::kLeftSideForgetting, "LeftSideForgetting", "IV. Left-side forgetting",
     "earlier training data forgotten"},
    {Cause::kInsufficientTraining, "InsufficientTraining", "V. Insufficient training",
     "partially learned"},
    {Cause::kUnattributed, "Unattributed", "Unattributed", "no signal fired"},
}};

const CauseInfo& info(Cause c) {
  for (const auto& i : kInfo) {
    if (i.cause == c) return i;
  }
  throw std::logic_error("unknown cause");
}

std::size_t argmax(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string to_string(Cause c) { return info(c).name; }

Cause cause_from_string(const std::string& name) {
  for (const auto& i : kInfo) {
    if (name == i.name) return i.cause;
  }
  throw std::invalid_argument("unknown cause '" + name + "'");
}

Json to_json(const AttributionLabel& label) {
  return Json{{"instance_id", label.instance_id},
              {"cause", to_string(label.cause)},
              {"evidence", label.evidence}};
}

AttributionLabel label_from_json(const Json& j) {
  return AttributionLabel{j.at("instance_id").get<std::string>(),
                          cause_from_string(j.at("cause").get<std::string>()),
                          j.value("evidence", Json::object())};
}

std::size_t decile_of(std::size_t position_index, std::size_t n) {
  if (n == 0) return 0;
  return std::min(kDeciles - 1, position_index * kDeciles / n);
}

std::vector<DecileAccuracy> decile_accuracy(std::span<const ProbeRecord> records,
                                            const std::map<std::string, std::size_t>& positions,
                                            std::size_t n) {
  std::vector<std::size_t> hits(kDeciles, 0);
  std::vector<DecileAccuracy> out(kDeciles);
  for (const auto& rec : records) {
    auto it = positions.find(rec.instance_id);
    if (it == positions.end()) {
      throw AlignmentError("decile_accuracy: no position for '" + rec.instance_id + "'");
    }
    const auto d = decile_of(it->second, n);
    ++out[d].count;
    if (argmax(mean_distribution(rec)) == rec.correct_index) ++hits[d];
  }
  for (std::size_t d = 0; d < kDeciles; ++d) {
    if (out[d].count > 0) {
      out[d].accuracy = static_cast<double>(hits[d]) / static_cast<double>(out[d].count);
    }
  }
  return out;
}

bool PositionSignal::marked(std::size_t position_index) const {
  const auto d = decile_of(position_index, n_positions);
  return d < deciles.size() && deciles[d].marked;
}

Json to_json(const PositionSignal& s) {
  Json rows = Json::array();
  for (const auto& d : s.deciles) {
    rows.push_back({{"decile", d.decile},
                    {"count", d.count},
                    {"original_acc", d.original_acc},
                    {"reversed_acc", d.reversed_acc},
                    {"gap", d.gap},
                    {"available", d.available},
                    {"marked", d.marked}});
  }
  return Json{{"n_positions", s.n_positions}, {"deciles", rows}};
}

PositionSignal position_signal_from_json(const Json& j) {
  PositionSignal s;
  s.n_positions = j.at("n_positions").get<std::size_t>();
  for (const auto& row : j.at("deciles")) {
    DecileStatus d;
    d.decile = row.at("decile").get<std::size_t>();
    d.count = row.at("count").get<std::size_t>();
    d.original_acc = row.at("original_acc").get<double>();
    d.reversed_acc = row.at("reversed_acc").get<double>();
    d.gap = row.at("gap").get<double>();
    d.available = row.at("available").get<bool>();
    d.marked = row.at("marked").get<bool>();
    s.deciles.push_back(d);
  }
  return s;
}

PositionSignal position_signal(std::span<const DecileAccuracy> original,
                               std::span<const DecileAccuracy> reversed, std::size_t n_positions,
                               const RunConfig& cfg) {
  if (original.size() != reversed.size()) {
    throw std::invalid_argument("position_signal: decile counts differ between orders");
  }
  PositionSignal sig;
  sig.n_positions = n_positions;
  for (std::size_t d = 0; d < original.size(); ++d) {
    DecileStatus s;
    s.decile = d;
    s.count = std::min(original[d].count, reversed[d].count);
    s.original_acc = original[d].accuracy;
    s.reversed_acc = reversed[d].accuracy;
    s.available = s.count >= kMinDecileCount;
    const double diff = s.reversed_acc - s.original_acc;
    if (cfg.drop_mode == DropMode::kAbsolute) {
      s.gap = diff;
    } else {
      s.gap = s.original_acc > 0.0 ? diff / s.original_acc : 0.0;
    }
    if (s.available && diff > 0.0) {
      s.marked = (cfg.drop_mode == DropMode::kRelative && s.original_acc == 0.0) ||
                 exceeds(s.gap, cfg.drop_threshold);
    }
    sig.deciles.push_back(s);
  }
  return sig;
}

std::vector<AttributionLabel> attribute(const DetectionReport& report,
                                        const std::map<std::string, ProbeSummary>& summaries,
                                        const PositionSignal& position, const RunConfig& cfg) {
  std::vector<Cause> order;
  for (const auto& name : cfg.cascade_order) order.push_back(cause_from_string(name));

  std::vector<AttributionLabel> labels;
  labels.reserve(report.candidate_ids.size());
  for (const auto& id : report.candidate_ids) {
    auto it = summaries.find(id);
    if (it == summaries.end()) throw AttributionError("no probe summary for candidate '" + id + "'");
    const ProbeSummary& s = it->second;
    AttributionLabel label{id, Cause::kUnattributed, Json::object()};
    Json& ev = label.evidence;

    auto fires = [&](Cause c) {
      switch (c) {
        case Cause::kKnowledgeLimitation:
          ev["exists"] = s.exists;
          ev["base_acc"] = s.base_acc;
          ev["blind"] = s.blind;
          return !s.exists && s.blind;
        case Cause::kBaseModelConflict:
          ev["high_conf_error"] = s.high_conf_error;
          ev["base_confidence"] = s.base_confidence;
          ev["js_divergence"] = s.js_divergence;
          return s.high_conf_error || exceeds(s.js_divergence, cfg.js_conflict_threshold);
        case Cause::kIntraSftConflict:
          ev["conflict_group"] = s.conflict_group ? Json(*s.conflict_group) : Json(nullptr);
          ev["removed"] = s.removed;
          ev["partner_removed"] = s.partner_removed;
          return s.conflict_group.has_value() || s.removed || s.partner_removed;
        case Cause::kLeftSideForgetting: {
          const auto d = decile_of(s.position_index, position.n_positions);
          ev["position_decile"] = d;
          const bool available = d < position.deciles.size() && position.deciles[d].available;
          ev["decile_available"] = available;
          ev["decile_marked"] = position.marked(s.position_index);
          return position.marked(s.position_index);
        }
        default:
          return false;
      }
    };

    bool done = false;
    for (Cause c : order) {
      if (fires(c)) {
        label.cause = c;
        done = true;
        break;
      }
    }
    if (!done) {
      const double pass_rate = report.per_instance.at(id).pass_rate;
      ev["pass_rate"] = pass_rate;
      ev["residual"] = true;
      label.cause = pass_rate > 0.0 ? Cause::kInsufficientTraining : Cause::kUnattributed;
    }
    labels.push_back(std::move(label));
  }
  return labels;
}

Json to_json(const TaxonomyReport& r) {
  Json rows = Json::array();
  for (Cause c : kAllCauses) {
    rows.push_back({{"cause", to_string(c)},
                    {"count", r.counts.at(c)},
                    {"proportion", r.proportions.at(c)}});
  }
  return Json{{"total", r.total}, {"causes", rows}};
}

TaxonomyReport taxonomy_report(std::span<const AttributionLabel> labels) {
  if (labels.empty()) throw AttributionError("taxonomy_report: no labels");
  TaxonomyReport r;
  r.total = labels.size();
  for (Cause c : kAllCauses) r.counts[c] = 0;
  for (const auto& l : labels) ++r.counts[l.cause];
  for (Cause c : kAllCauses) {
    r.proportions[c] = static_cast<double>(r.counts[c]) / static_cast<double>(r.total);
  }
  return r;
}

std::string render_taxonomy_table(const TaxonomyReport& r) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-36s  %-36s  %7s  %10s\n", "Type", "Description", "Count",
                "Proportion");
  out << line << std::string(95, '-') << '\n';
  for (Cause c : kAllCauses) {
    const auto& i = info(c);
    std::snprintf(line, sizeof line, "%-36s  %-36s  %7zu  %9s%%\n", i.row, i.description,
                  r.counts.at(c), fixed(100.0 * r.proportions.at(c), 1).c_str());
    out << line;
  }
  out << std::string(95, '-') << '\n';
  std::snprintf(line, sizeof line, "%-36s  %-36s  %7zu\n", "Total", "", r.total);
  out << line;
  return out.str();
}

}  // namespace ilp
