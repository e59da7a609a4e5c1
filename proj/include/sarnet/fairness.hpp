#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sarnet/errors.hpp"
#include "sarnet/numerics/ops.hpp"
#include "sarnet/records.hpp"

namespace sarnet {

using PairKey = std::pair<RawId, RawId>;  // (scenario, item)

/// Exposure count and predicted-score mass per (scenario, item).
///
/// Scores are kept per pair and summed in sorted order, so the sums do not
/// depend on arrival order or on how partial accumulations were merged.
class ExposureStats {
 public:
  void add(RawId scenario, RawId item, double score) {
    require(score > 0.0 && score < 1.0 && std::isfinite(score),
            "exposure score must lie in (0,1), got " + std::to_string(score));
    scores_[{scenario, item}].push_back(score);
  }

  void merge(const ExposureStats& other) {
    for (const auto& [key, s] : other.scores_) {
      auto& dst = scores_[key];
      dst.insert(dst.end(), s.begin(), s.end());
    }
  }

  /// (pv, f) per pair, keyed and ordered by (scenario, item).
  std::map<PairKey, std::pair<std::int64_t, double>> totals() const {
    std::map<PairKey, std::pair<std::int64_t, double>> out;
    for (const auto& [key, s] : scores_) {
      std::vector<double> sorted = s;
      std::sort(sorted.begin(), sorted.end());
      double f = 0.0;
      for (double v : sorted) f += v;
      out.emplace(key, std::make_pair(static_cast<std::int64_t>(s.size()), f));
    }
    return out;
  }

  bool empty() const { return scores_.empty(); }

  /// `scenario_id,item_id,pv,f`.
  std::string to_text() const {
    std::ostringstream out;
    out << "scenario_id,item_id,pv,f\n";
    char buf[64];
    for (const auto& [key, t] : totals()) {
      std::snprintf(buf, sizeof buf, "%.17g", t.second);
      out << key.first << ',' << key.second << ',' << t.first << ',' << buf << '\n';
    }
    return out.str();
  }

 private:
  std::map<PairKey, std::vector<double>> scores_;
};

struct ClipBounds {
  double lower = 0.2;
  double upper = 5.0;
};

/// Fairness coefficients per (scenario, item); unseen pairs read as 1.
class FairnessTable {
 public:
  FairnessTable() = default;
  explicit FairnessTable(std::map<PairKey, double> values) : values_(std::move(values)) {}

  double operator()(RawId scenario, RawId item) const {
    auto it = values_.find({scenario, item});
    return it == values_.end() ? kDefault : it->second;
  }
  const std::map<PairKey, double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  static constexpr double kDefault = 1.0;

  std::string to_text() const {
    std::ostringstream out;
    out << "scenario_id,item_id,fc\n";
    char buf[64];
    for (const auto& [key, w] : values_) {
      std::snprintf(buf, sizeof buf, "%.17g", w);
      out << key.first << ',' << key.second << ',' << buf << '\n';
    }
    return out.str();
  }

  static FairnessTable from_text(std::string_view text) {
    std::map<PairKey, double> values;
    bool header = true;
    for (std::string_view line : detail::split(text, '\n')) {
      if (line.empty()) continue;
      if (header) {
        if (line != "scenario_id,item_id,fc") throw DataError("fairness table header mismatch");
        header = false;
        continue;
      }
      const auto parts = detail::split(line, ',');
      if (parts.size() != 3) throw DataError("fairness table row '" + std::string(line) + "' is malformed");
      const std::string num(parts[2]);
      char* end = nullptr;
      const double w = std::strtod(num.c_str(), &end);
      if (end != num.c_str() + num.size() || !(w > 0.0)) throw DataError("bad fairness coefficient '" + num + "'");
      values[{detail::parse_int(parts[0], "scenario_id"), detail::parse_int(parts[1], "item_id")}] = w;
    }
    if (header) throw DataError("fairness table is empty");
    return FairnessTable(std::move(values));
  }

 private:
  std::map<PairKey, double> values_;
};

using ExposureTotals = std::map<PairKey, std::pair<std::int64_t, double>>;

/// Unclipped coefficients: (F share) / (PV share) within each scenario.
inline std::map<PairKey, double> fairness_ratios(const ExposureTotals& totals,
                                                 const std::vector<RawId>& required_scenarios = {}) {
  std::map<RawId, std::pair<double, double>> sums;  // scenario -> (sum pv, sum f)
  for (const auto& [key, t] : totals) {
    sums[key.first].first += static_cast<double>(t.first);
    sums[key.first].second += t.second;
  }
  for (RawId s : required_scenarios)
    require(sums.contains(s), "scenario " + std::to_string(s) + " has no exposure statistics");
  std::map<PairKey, double> out;
  for (const auto& [key, t] : totals) {
    const auto& [pv_sum, f_sum] = sums.at(key.first);
    out.emplace(key, (t.second / f_sum) / (static_cast<double>(t.first) / pv_sum));
  }
  return out;
}

inline std::map<PairKey, double> fairness_ratios(const ExposureStats& stats,
                                                 const std::vector<RawId>& required_scenarios = {}) {
  return fairness_ratios(stats.totals(), required_scenarios);
}

inline FairnessTable compute_fairness(const ExposureStats& stats, ClipBounds clip = {},
                                      const std::vector<RawId>& required_scenarios = {}) {
  require(clip.lower > 0.0 && clip.lower <= clip.upper, "invalid fairness clip bounds");
  auto ratios = fairness_ratios(stats, required_scenarios);
  for (auto& [key, w] : ratios) w = std::clamp(w, clip.lower, clip.upper);
  return FairnessTable(std::move(ratios));
}

/// Weighted binary cross-entropy normalized by the weight sum.
inline Var bias_adapting_loss(Var probs, std::vector<double> labels, std::vector<double> weights) {
  return weighted_bce(probs, std::move(labels), std::move(weights));
}

/// Value-level loss over scored samples, each weighted by its own (scenario, item) coefficient.
inline double bias_adapting_loss(const std::vector<double>& probs, const std::vector<int>& labels,
                                 const std::vector<RawId>& scenarios, const std::vector<RawId>& items,
                                 const FairnessTable& table) {
  require(probs.size() == labels.size() && probs.size() == scenarios.size() && probs.size() == items.size(),
          "bias_adapting_loss: column lengths differ");
  Tape tape;
  std::vector<double> y, w;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    y.push_back(static_cast<double>(labels[k]));
    w.push_back(table(scenarios[k], items[k]));
  }
  return bias_adapting_loss(tape.constant(Tensor::column(probs)), y, w).value().item();
}

}  // namespace sarnet
