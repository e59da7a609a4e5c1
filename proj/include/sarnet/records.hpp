#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sarnet/errors.hpp"

namespace sarnet {

using RawId = std::int64_t;

/// One past click: the item part and the scenario context at click time.
struct BehaviorEvent {
  RawId item_id = 0;
  RawId category_id = 0;
  RawId destination_id = 0;
  RawId scenario_id = 0;
  RawId scenario_type = 0;
  RawId time_bucket = 0;

  friend bool operator==(const BehaviorEvent&, const BehaviorEvent&) = default;
};

/// A logged impression (user, item, scenario, timestamp, label) with the user's
/// cross-scenario behavior sequence, oldest first.
struct InteractionRecord {
  int label = 0;
  RawId scenario_id = 0;
  RawId user_id = 0;
  RawId item_id = 0;
  RawId category_id = 0;
  RawId destination_id = 0;
  std::int64_t timestamp = 0;
  std::vector<BehaviorEvent> behaviors;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

namespace detail {

inline std::int64_t parse_int(std::string_view text, const char* what) {
  std::int64_t value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end)
    throw DataError(std::string("malformed ") + what + " '" + std::string(text) + "'");
  return value;
}

inline std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(text.substr(start));
      return parts;
    }
    parts.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace detail

// Record line:
// label \t scenario_id \t user_id \t item_id \t category_id \t destination_id \t timestamp \t behavior
// where behavior joins item,category,destination,scenario,scenario_type,time_bucket sextuples with ';'.

inline std::string format_record(const InteractionRecord& r) {
  std::string line;
  line.reserve(64 + r.behaviors.size() * 24);
  line += std::to_string(r.label);
  for (RawId v : {r.scenario_id, r.user_id, r.item_id, r.category_id, r.destination_id,
                  static_cast<RawId>(r.timestamp)}) {
    line += '\t';
    line += std::to_string(v);
  }
  line += '\t';
  for (std::size_t k = 0; k < r.behaviors.size(); ++k) {
    const BehaviorEvent& b = r.behaviors[k];
    if (k) line += ';';
    line += std::to_string(b.item_id) + ',' + std::to_string(b.category_id) + ',' + std::to_string(b.destination_id) +
            ',' + std::to_string(b.scenario_id) + ',' + std::to_string(b.scenario_type) + ',' +
            std::to_string(b.time_bucket);
  }
  return line;
}

inline InteractionRecord parse_record(std::string_view line) {
  const auto fields = detail::split(line, '\t');
  if (fields.size() != 8)
    throw DataError("record line has " + std::to_string(fields.size()) + " fields, expected 8");
  InteractionRecord r;
  const auto label = detail::parse_int(fields[0], "label");
  if (label != 0 && label != 1) throw DataError("label must be 0 or 1");
  r.label = static_cast<int>(label);
  r.scenario_id = detail::parse_int(fields[1], "scenario_id");
  r.user_id = detail::parse_int(fields[2], "user_id");
  r.item_id = detail::parse_int(fields[3], "item_id");
  r.category_id = detail::parse_int(fields[4], "category_id");
  r.destination_id = detail::parse_int(fields[5], "destination_id");
  r.timestamp = detail::parse_int(fields[6], "timestamp");
  if (!fields[7].empty()) {
    for (std::string_view event : detail::split(fields[7], ';')) {
      const auto parts = detail::split(event, ',');
      if (parts.size() != 6) throw DataError("behavior event '" + std::string(event) + "' is not a sextuple");
      r.behaviors.push_back(BehaviorEvent{detail::parse_int(parts[0], "behavior item"),
                                          detail::parse_int(parts[1], "behavior category"),
                                          detail::parse_int(parts[2], "behavior destination"),
                                          detail::parse_int(parts[3], "behavior scenario"),
                                          detail::parse_int(parts[4], "behavior scenario type"),
                                          detail::parse_int(parts[5], "behavior time bucket")});
    }
  }
  return r;
}

inline void write_records(const std::string& path, const std::vector<InteractionRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& r : records) out << format_record(r) << '\n';
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline std::vector<InteractionRecord> read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open record file '" + path + "'");
  std::vector<InteractionRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(parse_record(line));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace sarnet
