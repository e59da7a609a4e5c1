#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sarnet/errors.hpp"
#include "sarnet/records.hpp"

namespace sarnet {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<RawId> scenarios;
  std::vector<RawId> categories;
  std::vector<char> intervened;  // optional; empty means none

  std::size_t size() const { return scores.size(); }
  void add(double score, int label, RawId scenario, RawId category) {
    scores.push_back(score);
    labels.push_back(label);
    scenarios.push_back(scenario);
    categories.push_back(category);
  }
};

/// Mann-Whitney AUC with midranks for ties, O(n log n).
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "auc: score/label length mismatch");
  std::size_t positives = 0;
  for (int y : labels) {
    require(y == 0 || y == 1, "auc: labels must be 0 or 1");
    positives += static_cast<std::size_t>(y);
  }
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw UndefinedMetric("AUC needs at least one positive and one negative");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Doubled midranks keep the rank sum integral.
  std::uint64_t rank_sum2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t midrank2 = static_cast<std::uint64_t>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum2 += midrank2;
    i = j;
  }
  const std::uint64_t p = positives;
  const std::uint64_t u2 = rank_sum2 - p * (p + 1);  // 2 * U statistic
  return static_cast<double>(u2) / (2.0 * static_cast<double>(p) * static_cast<double>(negatives));
}

inline double auc(const ScoredSet& set) { return auc(set.scores, set.labels); }

/// Relative improvement over a base AUC, in percent.
inline double rela_impr(double target_auc, double base_auc) {
  if (base_auc == 0.5) throw UndefinedMetric("RelaImpr is undefined for a base AUC of 0.5");
  return ((target_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0;
}

/// AUC per scenario; scenarios with a single class are reported as nullopt.
inline std::map<RawId, std::optional<double>> scenario_aucs(const ScoredSet& set) {
  std::map<RawId, std::pair<std::vector<double>, std::vector<int>>> parts;
  for (std::size_t k = 0; k < set.size(); ++k) {
    parts[set.scenarios[k]].first.push_back(set.scores[k]);
    parts[set.scenarios[k]].second.push_back(set.labels[k]);
  }
  std::map<RawId, std::optional<double>> out;
  for (const auto& [s, p] : parts) {
    try {
      out[s] = auc(p.first, p.second);
    } catch (const UndefinedMetric&) {
      out[s] = std::nullopt;
    }
  }
  return out;
}

struct CategoryRow {
  RawId category = 0;
  std::size_t exposures = 0;
  std::size_t clicks = 0;
  double exposure_ratio = 0.0;
  double ctr = 0.0;
};

/// Exposure ratio and CTR per category among the records a ranker would
/// surface: the top `top_fraction` of scores (1 keeps everything). Intervened
/// records are dropped before ranking when `exclude_intervened` is set.
inline std::vector<CategoryRow> category_report(const ScoredSet& set, double top_fraction = 1.0,
                                                bool exclude_intervened = true) {
  require(top_fraction > 0.0 && top_fraction <= 1.0, "category_report: top fraction must lie in (0, 1]");
  std::vector<std::size_t> pool;
  for (std::size_t k = 0; k < set.size(); ++k)
    if (!(exclude_intervened && !set.intervened.empty() && set.intervened[k])) pool.push_back(k);
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return set.scores[a] > set.scores[b]; });
  const auto keep = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(pool.size())));
  pool.resize(std::min(keep, pool.size()));
  std::map<RawId, CategoryRow> rows;
  for (std::size_t k : pool) {
    auto& row = rows[set.categories[k]];
    row.category = set.categories[k];
    ++row.exposures;
    row.clicks += static_cast<std::size_t>(set.labels[k]);
  }
  std::vector<CategoryRow> out;
  for (auto& [c, row] : rows) {
    row.exposure_ratio = static_cast<double>(row.exposures) / static_cast<double>(pool.size());
    row.ctr = static_cast<double>(row.clicks) / static_cast<double>(row.exposures);
    out.push_back(row);
  }
  return out;
}

inline std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Evaluation report as `key=value` lines.
struct MetricReport {
  std::optional<double> overall;
  std::map<RawId, std::optional<double>> per_scenario;
  std::map<std::string, double> rela_impr;  // base name -> value
  std::vector<CategoryRow> categories;
  std::size_t samples = 0;

  std::string to_text() const {
    std::ostringstream out;
    out << "samples=" << samples << '\n';
    out << "auc.overall=" << (overall ? format_metric(*overall) : "undefined") << '\n';
    for (const auto& [s, a] : per_scenario)
      out << "auc.scenario." << s << '=' << (a ? format_metric(*a) : "undefined") << '\n';
    for (const auto& [base, v] : rela_impr) out << "relaimpr.vs." << base << '=' << format_metric(v) << '\n';
    for (const auto& row : categories) {
      out << "exposure_ratio.category." << row.category << '=' << format_metric(row.exposure_ratio) << '\n';
      out << "ctr.category." << row.category << '=' << format_metric(row.ctr) << '\n';
    }
    return out.str();
  }

  /// Tab-separated per-category rows for plotting.
  std::string category_table() const {
    std::ostringstream out;
    out << "category\texposures\tclicks\texposure_ratio\tctr\n";
    for (const auto& row : categories)
      out << row.category << '\t' << row.exposures << '\t' << row.clicks << '\t' << format_metric(row.exposure_ratio)
          << '\t' << format_metric(row.ctr) << '\n';
    return out.str();
  }
};

inline MetricReport evaluate_scores(const ScoredSet& set, double top_fraction = 1.0) {
  MetricReport r;
  r.samples = set.size();
  try {
    r.overall = auc(set);
  } catch (const UndefinedMetric&) {
    r.overall = std::nullopt;
  }
  r.per_scenario = scenario_aucs(set);
  if (set.size() > 0) r.categories = category_report(set, top_fraction);
  return r;
}

/// Reads `auc.overall` from a report file's text.
inline double read_overall_auc(std::string_view report) {
  for (std::string_view line : detail::split(report, '\n')) {
    constexpr std::string_view key = "auc.overall=";
    if (line.starts_with(key)) {
      const std::string v(line.substr(key.size()));
      char* end = nullptr;
      const double a = std::strtod(v.c_str(), &end);
      if (end != v.c_str() + v.size()) throw DataError("base report has undefined overall AUC");
      return a;
    }
  }
  throw DataError("report has no auc.overall line");
}

/// Median of a nonempty list (mean of the middle pair for even counts).
inline double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace sarnet
