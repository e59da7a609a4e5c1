#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sarnet/errors.hpp"
#include "sarnet/numerics/random.hpp"
#include "sarnet/numerics/tape.hpp"
#include "sarnet/records.hpp"

namespace sarnet {

enum class Field : int {
  kUserId = 0,
  kItemId,
  kCategoryId,
  kDestinationId,
  kScenarioId,
  kScenarioType,
  kTimeBucket,
};

inline constexpr std::size_t kFieldCount = 7;
inline constexpr std::array<Field, kFieldCount> kAllFields = {
    Field::kUserId,     Field::kItemId,       Field::kCategoryId, Field::kDestinationId,
    Field::kScenarioId, Field::kScenarioType, Field::kTimeBucket};

inline constexpr std::array<std::string_view, kFieldCount> kFieldNames = {
    "user_id", "item_id", "category_id", "destination_id", "scenario_id", "scenario_type", "time_bucket"};

inline std::string_view field_name(Field f) { return kFieldNames[static_cast<std::size_t>(f)]; }

inline Field field_from_id(int id) {
  require(id >= 0 && id < static_cast<int>(kFieldCount), "unknown feature field id " + std::to_string(id));
  return static_cast<Field>(id);
}

inline Field field_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kFieldCount; ++i)
    if (kFieldNames[i] == name) return static_cast<Field>(i);
  throw ContractViolation("unknown feature field '" + std::string(name) + "'");
}

/// Behavior time is bucketed by log2 of hours elapsed, capped at the last bucket.
inline constexpr int kTimeBuckets = 8;

inline int time_bucket(std::int64_t elapsed_ticks, double ticks_per_hour) {
  const double hours = std::max(0.0, static_cast<double>(elapsed_ticks) / ticks_per_hour);
  const int bucket = static_cast<int>(std::floor(std::log2(1.0 + hours)));
  return std::min(bucket, kTimeBuckets - 1);
}

/// Keeps the `limit` most recent behaviors.
inline void truncate_behaviors(InteractionRecord& record, std::size_t limit) {
  if (record.behaviors.size() > limit)
    record.behaviors.erase(record.behaviors.begin(),
                           record.behaviors.begin() + static_cast<std::ptrdiff_t>(record.behaviors.size() - limit));
}

/// Raw id -> contiguous index per field. Index 0 is reserved for unknown/padding.
class FeatureVocab {
 public:
  FeatureVocab() = default;

  /// Indices follow ascending raw value, so the same corpus always yields the same vocabulary.
  static FeatureVocab build(const std::vector<InteractionRecord>& corpus) {
    std::array<std::set<RawId>, kFieldCount> seen;
    auto note = [&](Field f, RawId v) { seen[static_cast<std::size_t>(f)].insert(v); };
    FeatureVocab vocab;
    for (const auto& r : corpus) {
      note(Field::kUserId, r.user_id);
      note(Field::kItemId, r.item_id);
      note(Field::kCategoryId, r.category_id);
      note(Field::kDestinationId, r.destination_id);
      note(Field::kScenarioId, r.scenario_id);
      for (const auto& b : r.behaviors) {
        note(Field::kItemId, b.item_id);
        note(Field::kCategoryId, b.category_id);
        note(Field::kDestinationId, b.destination_id);
        note(Field::kScenarioId, b.scenario_id);
        note(Field::kScenarioType, b.scenario_type);
        vocab.scenario_types_[b.scenario_id] = b.scenario_type;
      }
    }
    for (int b = 0; b < kTimeBuckets; ++b) note(Field::kTimeBucket, b);
    for (std::size_t f = 0; f < kFieldCount; ++f) {
      std::size_t next = 1;
      for (RawId v : seen[f]) vocab.maps_[f].emplace(v, next++);
    }
    return vocab;
  }

  /// Mapped index of a raw value, or 0 when the value was never seen.
  std::size_t encode(Field field, RawId raw) const {
    const auto& m = maps_[static_cast<std::size_t>(field)];
    auto it = m.find(raw);
    return it == m.end() ? 0 : it->second;
  }

  /// Vocabulary size including the padding index.
  std::size_t size(Field field) const { return maps_[static_cast<std::size_t>(field)].size() + 1; }

  /// Scenario type of a scenario id as observed in behavior context; nullopt if never observed.
  std::optional<RawId> scenario_type(RawId scenario) const {
    auto it = scenario_types_.find(scenario);
    if (it == scenario_types_.end()) return std::nullopt;
    return it->second;
  }
  const std::map<RawId, RawId>& scenario_types() const { return scenario_types_; }

  /// Real scenario ids in index order; position k holds the scenario with index k+1.
  std::vector<RawId> scenario_ids() const {
    const auto& m = maps_[static_cast<std::size_t>(Field::kScenarioId)];
    std::vector<RawId> ids(m.size());
    for (const auto& [raw, index] : m) ids[index - 1] = raw;
    return ids;
  }

  /// `field<TAB>raw_value<TAB>index`, sorted by (field, index).
  std::string to_text() const {
    std::ostringstream out;
    for (std::size_t f = 0; f < kFieldCount; ++f) {
      std::vector<std::pair<std::size_t, RawId>> rows;
      for (const auto& [raw, index] : maps_[f]) rows.emplace_back(index, raw);
      std::sort(rows.begin(), rows.end());
      for (const auto& [index, raw] : rows) out << kFieldNames[f] << '\t' << raw << '\t' << index << '\n';
    }
    return out.str();
  }

  static FeatureVocab from_text(std::string_view text) {
    FeatureVocab vocab;
    std::size_t line_no = 0;
    for (std::string_view line : detail::split(text, '\n')) {
      ++line_no;
      if (line.empty()) continue;
      const auto parts = detail::split(line, '\t');
      if (parts.size() != 3) throw DataError("vocab line " + std::to_string(line_no) + " is not field/raw/index");
      Field f;
      try {
        f = field_from_name(parts[0]);
      } catch (const ContractViolation& e) {
        throw DataError(e.what());
      }
      const RawId raw = detail::parse_int(parts[1], "vocab raw value");
      const auto index = static_cast<std::size_t>(detail::parse_int(parts[2], "vocab index"));
      if (index == 0) throw DataError("vocab assigns reserved index 0");
      vocab.maps_[static_cast<std::size_t>(f)].emplace(raw, index);
    }
    for (std::size_t f = 0; f < kFieldCount; ++f) {
      std::vector<bool> used(vocab.maps_[f].size() + 1, false);
      for (const auto& [raw, index] : vocab.maps_[f]) {
        if (index >= used.size() || used[index]) throw DataError("vocab indices are not contiguous");
        used[index] = true;
      }
    }
    return vocab;
  }

  std::string scenario_types_text() const {
    std::ostringstream out;
    for (const auto& [scenario, type] : scenario_types_) out << scenario << '\t' << type << '\n';
    return out.str();
  }

  void load_scenario_types_text(std::string_view text) {
    for (std::string_view line : detail::split(text, '\n')) {
      if (line.empty()) continue;
      const auto parts = detail::split(line, '\t');
      if (parts.size() != 2) throw DataError("scenario type line is not scenario/type");
      scenario_types_[detail::parse_int(parts[0], "scenario id")] = detail::parse_int(parts[1], "scenario type");
    }
  }

 private:
  std::array<std::map<RawId, std::size_t>, kFieldCount> maps_;
  std::map<RawId, RawId> scenario_types_;
};

inline std::size_t encode_one_hot(Field field, RawId raw, const FeatureVocab& vocab) {
  return vocab.encode(field, raw);
}

inline std::size_t encode_one_hot(int field_id, RawId raw, const FeatureVocab& vocab) {
  return vocab.encode(field_from_id(field_id), raw);
}

/// D x N embedding matrix of one field; column i is the embedding of index i.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  /// Uniform(-init_scale, init_scale) initialization with a zero padding column.
  EmbeddingTable(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t vocab_size, Rng& rng,
                 double init_scale = 0.05) {
    require(dim >= 1 && dim < vocab_size, "embedding dimension " + std::to_string(dim) +
                                              " must be smaller than vocabulary size " + std::to_string(vocab_size));
    Tensor e({dim, vocab_size});
    for (std::size_t d = 0; d < dim; ++d)
      for (std::size_t n = 1; n < vocab_size; ++n) e(d, n) = rng.uniform(-init_scale, init_scale);
    param_ = &store.add(name, std::move(e));
  }

  /// Wraps an existing D x N parameter without the D < N check (test tables such as identities).
  static EmbeddingTable wrap(Parameter& matrix) {
    require(matrix.value.rank() == 2, "embedding table must be a matrix");
    EmbeddingTable t;
    t.param_ = &matrix;
    return t;
  }

  std::size_t dim() const { return param_->value.rows(); }
  std::size_t vocab_size() const { return param_->value.cols(); }
  Parameter& parameter() const { return *param_; }

  std::vector<double> column(std::size_t index) const {
    require(index < vocab_size(), "embedding index " + std::to_string(index) + " out of range for vocabulary of " +
                                      std::to_string(vocab_size()));
    std::vector<double> out(dim());
    for (std::size_t d = 0; d < dim(); ++d) out[d] = param_->value(d, index);
    return out;
  }

 private:
  Parameter* param_ = nullptr;
};

inline std::vector<double> embed(std::size_t index, const EmbeddingTable& table) { return table.column(index); }

/// Field lists of the five feature groups. Behavior parts reuse the target-item
/// and scenario-context lists so their widths match by construction.
struct FeatureGroupLayout {
  std::vector<Field> user_profile{Field::kUserId};
  std::vector<Field> target_item{Field::kItemId, Field::kDestinationId, Field::kCategoryId};
  std::vector<Field> scenario_context{Field::kScenarioId, Field::kScenarioType, Field::kTimeBucket};

  const std::vector<Field>& behavior_item() const { return target_item; }
  const std::vector<Field>& behavior_scenario() const { return scenario_context; }
};

/// One embedding table per field, sized from a vocabulary. Each field gets
/// min(D, N - 1) dimensions so that D < N holds for small vocabularies.
class FeatureTables {
 public:
  FeatureTables() = default;
  FeatureTables(ParameterStore& store, const FeatureVocab& vocab, std::size_t dim, Rng& rng) {
    for (Field f : kAllFields) {
      const std::size_t n = vocab.size(f);
      require(n >= 2, "field '" + std::string(field_name(f)) + "' has no values");
      tables_[static_cast<std::size_t>(f)] =
          EmbeddingTable(store, "embedding." + std::string(field_name(f)), std::min(dim, n - 1), n, rng);
    }
  }

  const EmbeddingTable& table(Field f) const { return tables_[static_cast<std::size_t>(f)]; }

  std::size_t width(const std::vector<Field>& fields) const {
    std::size_t w = 0;
    for (Field f : fields) w += table(f).dim();
    return w;
  }

 private:
  std::array<EmbeddingTable, kFieldCount> tables_;
};

/// A record mapped to vocabulary indices, in layout order. Behavior parts are
/// already truncated.
struct EncodedRecord {
  std::vector<std::size_t> user;
  std::vector<std::size_t> item;
  std::vector<std::size_t> context;
  std::vector<std::vector<std::size_t>> behavior_item;
  std::vector<std::vector<std::size_t>> behavior_context;
  std::size_t scenario_index = 0;  // vocabulary index of the scenario id (>= 1 for registered scenarios)
  double label = 0.0;
  double fairness = 1.0;
  RawId scenario_id = 0;
  RawId item_id = 0;
  RawId category_id = 0;
};

inline std::vector<std::size_t> encode_fields(const std::vector<Field>& fields, const FeatureVocab& vocab,
                                              const std::array<RawId, kFieldCount>& raw) {
  std::vector<std::size_t> out;
  out.reserve(fields.size());
  for (Field f : fields) out.push_back(vocab.encode(f, raw[static_cast<std::size_t>(f)]));
  return out;
}

inline EncodedRecord encode_record(const InteractionRecord& r, const FeatureVocab& vocab,
                                   const FeatureGroupLayout& layout, std::size_t max_behaviors) {
  require(r.behaviors.size() <= max_behaviors, "behavior sequence of length " + std::to_string(r.behaviors.size()) +
                                                   " exceeds truncation limit " + std::to_string(max_behaviors));
  EncodedRecord e;
  std::array<RawId, kFieldCount> raw{};
  raw[static_cast<std::size_t>(Field::kUserId)] = r.user_id;
  raw[static_cast<std::size_t>(Field::kItemId)] = r.item_id;
  raw[static_cast<std::size_t>(Field::kCategoryId)] = r.category_id;
  raw[static_cast<std::size_t>(Field::kDestinationId)] = r.destination_id;
  raw[static_cast<std::size_t>(Field::kScenarioId)] = r.scenario_id;
  // An unobserved scenario type maps to a raw value no vocabulary contains.
  raw[static_cast<std::size_t>(Field::kScenarioType)] =
      vocab.scenario_type(r.scenario_id).value_or(std::numeric_limits<RawId>::min());
  raw[static_cast<std::size_t>(Field::kTimeBucket)] = 0;
  e.user = encode_fields(layout.user_profile, vocab, raw);
  e.item = encode_fields(layout.target_item, vocab, raw);
  e.context = encode_fields(layout.scenario_context, vocab, raw);
  for (const auto& b : r.behaviors) {
    std::array<RawId, kFieldCount> braw{};
    braw[static_cast<std::size_t>(Field::kItemId)] = b.item_id;
    braw[static_cast<std::size_t>(Field::kCategoryId)] = b.category_id;
    braw[static_cast<std::size_t>(Field::kDestinationId)] = b.destination_id;
    braw[static_cast<std::size_t>(Field::kScenarioId)] = b.scenario_id;
    braw[static_cast<std::size_t>(Field::kScenarioType)] = b.scenario_type;
    braw[static_cast<std::size_t>(Field::kTimeBucket)] = b.time_bucket;
    e.behavior_item.push_back(encode_fields(layout.behavior_item(), vocab, braw));
    e.behavior_context.push_back(encode_fields(layout.behavior_scenario(), vocab, braw));
  }
  e.scenario_index = vocab.encode(Field::kScenarioId, r.scenario_id);
  e.label = static_cast<double>(r.label);
  e.scenario_id = r.scenario_id;
  e.item_id = r.item_id;
  e.category_id = r.category_id;
  return e;
}

/// Embedded feature groups of one record, behavior parts padded to the truncation limit.
struct AssembledRecord {
  Tensor behavior_items;     // limit x width(item part)
  Tensor behavior_contexts;  // limit x width(scenario part)
  Tensor user;               // 1 x width(user profile)
  Tensor target_item;        // 1 x width(item part)
  Tensor scenario;           // 1 x width(scenario part)
  double fairness = 1.0;     // intervention-bias feature
  std::vector<char> mask;    // 1 for real behaviors, 0 for padding
};

namespace detail {

inline void write_embedded(const FeatureTables& tables, const std::vector<Field>& fields,
                           const std::vector<std::size_t>& index, std::span<double> out) {
  std::size_t offset = 0;
  for (std::size_t k = 0; k < fields.size(); ++k) {
    const auto col = tables.table(fields[k]).column(index[k]);
    std::copy(col.begin(), col.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += col.size();
  }
}

}  // namespace detail

inline AssembledRecord assemble_record(const EncodedRecord& rec, const FeatureTables& tables,
                                       const FeatureGroupLayout& layout, std::size_t limit) {
  require(rec.behavior_item.size() <= limit, "behavior sequence longer than truncation limit");
  const std::size_t wi = tables.width(layout.target_item);
  const std::size_t ws = tables.width(layout.scenario_context);
  AssembledRecord out;
  out.behavior_items = Tensor::zeros(limit, wi);
  out.behavior_contexts = Tensor::zeros(limit, ws);
  out.user = Tensor::zeros(1, tables.width(layout.user_profile));
  out.target_item = Tensor::zeros(1, wi);
  out.scenario = Tensor::zeros(1, ws);
  out.mask.assign(limit, 0);
  detail::write_embedded(tables, layout.user_profile, rec.user, out.user.row_span(0));
  detail::write_embedded(tables, layout.target_item, rec.item, out.target_item.row_span(0));
  detail::write_embedded(tables, layout.scenario_context, rec.context, out.scenario.row_span(0));
  for (std::size_t k = 0; k < rec.behavior_item.size(); ++k) {
    detail::write_embedded(tables, layout.behavior_item(), rec.behavior_item[k], out.behavior_items.row_span(k));
    detail::write_embedded(tables, layout.behavior_scenario(), rec.behavior_context[k],
                           out.behavior_contexts.row_span(k));
    out.mask[k] = 1;
  }
  out.fairness = rec.fairness;
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace sarnet
