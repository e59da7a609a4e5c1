#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sarnet/config.hpp"
#include "sarnet/evalmod.hpp"
#include "sarnet/fairness.hpp"
#include "sarnet/features.hpp"
#include "sarnet/model.hpp"
#include "sarnet/numerics/adam.hpp"
#include "sarnet/numerics/checkpoint.hpp"
#include "sarnet/records.hpp"

namespace sarnet {

inline ModelConfig model_config_from(Config& c) {
  ModelConfig m;
  m.embedding_dim = c.count("model.embedding_dim", m.embedding_dim);
  m.attention_hidden = c.count("model.attention_hidden", m.attention_hidden);
  m.attention_mode = [&] {
    try {
      return attention_mode_from_name(c.str("model.attention_mode", "dual"));
    } catch (const ContractViolation& e) {
      throw ConfigError(e.what());
    }
  }();
  m.expert_hidden = c.count("model.expert_hidden", m.expert_hidden);
  m.expert_layers = c.count("model.expert_layers", m.expert_layers);
  m.specific_experts = c.count("model.specific_experts", m.specific_experts);
  m.shared_experts = c.count("model.shared_experts", m.shared_experts);
  m.bias_hidden = c.count("model.bias_hidden", m.bias_hidden);
  m.use_transform = c.flag("model.transform", m.use_transform);
  m.use_bias_net = c.flag("model.bias_net", m.use_bias_net);
  if (c.flag("model.shared_only", false)) m.specific_experts = 0;
  m.max_behaviors = c.count("model.max_behaviors", m.max_behaviors);
  m.init_scale = c.num("model.init_scale", m.init_scale);
  m.batch_norm.momentum = c.num("model.bn_momentum", m.batch_norm.momentum);
  m.batch_norm.epsilon = c.num("model.bn_epsilon", m.batch_norm.epsilon);
  if (m.expert_layers < 1) throw ConfigError("model.expert_layers must be at least 1");
  if (m.specific_experts + m.shared_experts < 1) throw ConfigError("model needs at least one expert");
  if (m.embedding_dim < 1 || m.expert_hidden < 1 || m.attention_hidden < 1)
    throw ConfigError("model widths must be positive");
  return m;
}

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 2;
  std::size_t batch_size = 256;  // the production setting was 2048
  AdamConfig adam{};
  bool fairness_loss = true;
  ClipBounds clip{};
  double subsample_ratio = 1.0;
  std::size_t score_chunk = 1024;

  /// Whether a fairness table is needed (bias net or weighted loss).
  bool needs_fairness() const { return fairness_loss || model.use_bias_net; }

  static TrainConfig from_config(Config& c) {
    TrainConfig t;
    t.model = model_config_from(c);
    t.epochs = c.count("train.epochs", t.epochs);
    t.batch_size = c.count("train.batch_size", t.batch_size);
    t.adam.learning_rate = c.num("train.learning_rate", t.adam.learning_rate);
    t.adam.beta1 = c.num("train.beta1", t.adam.beta1);
    t.adam.beta2 = c.num("train.beta2", t.adam.beta2);
    t.adam.epsilon = c.num("train.adam_epsilon", t.adam.epsilon);
    t.fairness_loss = c.flag("fairness.loss", t.fairness_loss);
    t.clip.lower = c.num("fairness.clip_lower", t.clip.lower);
    t.clip.upper = c.num("fairness.clip_upper", t.clip.upper);
    t.subsample_ratio = c.num("train.subsample_ratio", t.subsample_ratio);
    if (t.batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (!(t.subsample_ratio > 0.0 && t.subsample_ratio <= 1.0)) throw ConfigError("train.subsample_ratio must lie in (0, 1]");
    if (!(t.clip.lower > 0.0 && t.clip.lower <= t.clip.upper)) throw ConfigError("invalid fairness clip bounds");
    return t;
  }
};

/// A model with its parameters and vocabulary.
struct TrainedModel {
  std::unique_ptr<ParameterStore> store;
  FeatureVocab vocab;
  std::unique_ptr<SarNet> net;

  static TrainedModel create(const FeatureVocab& vocab, const ModelConfig& cfg, std::uint64_t seed) {
    TrainedModel m;
    m.store = std::make_unique<ParameterStore>();
    m.vocab = vocab;
    Rng rng = Rng(seed).fork(0x30DE1);
    m.net = std::make_unique<SarNet>(*m.store, m.vocab, cfg, rng);
    return m;
  }

  std::vector<EncodedRecord> encode(const std::vector<InteractionRecord>& records,
                                    const FairnessTable* table = nullptr) const {
    std::vector<EncodedRecord> out;
    out.reserve(records.size());
    const std::size_t limit = net->config().max_behaviors;
    for (const auto& r : records) {
      InteractionRecord t = r;
      truncate_behaviors(t, limit);
      EncodedRecord e = encode_record(t, vocab, net->layout(), limit);
      if (e.scenario_index == 0)
        throw DataError("scenario " + std::to_string(r.scenario_id) + " was never seen in training data");
      if (table) e.fairness = (*table)(r.scenario_id, r.item_id);
      out.push_back(std::move(e));
    }
    return out;
  }

  /// Serve-mode scores.
  std::vector<double> score(const std::vector<InteractionRecord>& records, std::size_t chunk = 1024) const {
    const auto encoded = encode(records);
    std::vector<const EncodedRecord*> ptrs;
    for (const auto& e : encoded) ptrs.push_back(&e);
    return net->predict(ptrs, chunk);
  }
};

struct TrainLog {
  std::vector<std::string> lines;
  std::vector<double> epoch_loss;
  std::vector<double> valid_loss;
  std::size_t steps = 0;

  void add(const std::string& line) { lines.push_back(line); }
  std::string text() const {
    std::string out;
    for (const auto& l : lines) out += l + '\n';
    return out;
  }
};

inline std::string fmt(double v) { return format_metric(v); }

/// Drops each sample of an intervened pair with probability 1 - ratio.
inline std::vector<InteractionRecord> subsample_intervened(const std::vector<InteractionRecord>& records,
                                                           const std::set<std::pair<RawId, RawId>>& intervened,
                                                           double ratio, std::uint64_t seed) {
  require(ratio > 0.0 && ratio <= 1.0, "sub-sampling ratio must lie in (0, 1]");
  if (ratio == 1.0) return records;
  Rng rng = Rng(seed).fork(0x5AB);
  std::vector<InteractionRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const bool flagged = intervened.contains({r.scenario_id, r.item_id});
    if (flagged && !rng.bernoulli(ratio)) continue;
    out.push_back(r);
  }
  return out;
}

/// Serve-mode mean loss of a model on records (unit weights).
inline double evaluation_loss(const TrainedModel& m, const std::vector<InteractionRecord>& records) {
  if (records.empty()) return 0.0;
  const auto scores = m.score(records);
  double total = 0.0;
  for (std::size_t k = 0; k < records.size(); ++k) {
    const double p = std::clamp(scores[k], kProbabilityFloor, 1.0 - kProbabilityFloor);
    total += records[k].label ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(records.size());
}

/// Mini-batch Adam on the bias-adapting loss. Sample weights are the fairness
/// coefficients when `cfg.fairness_loss` is set, otherwise 1; the bias net always
/// reads the record's coefficient.
inline TrainLog train_epochs(TrainedModel& m, const std::vector<EncodedRecord>& data, const TrainConfig& cfg,
                             std::uint64_t seed, const std::vector<InteractionRecord>* valid = nullptr,
                             std::function<void(const std::string&)> progress = {}) {
  require(!data.empty(), "no training records");
  TrainLog log;
  AdamState adam(cfg.adam);
  Rng rng = Rng(seed).fork(0x7A1);
  std::vector<std::size_t> order(data.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::vector<const EncodedRecord*> batch;
      for (std::size_t k = b; k < e; ++k) batch.push_back(&data[order[k]]);
      const PackedBatch packed = m.net->pack(batch);
      std::vector<double> weights(packed.size, 1.0);
      if (cfg.fairness_loss) weights = packed.fairness;
      Tape tape;
      const ModelOutput out = m.net->forward(tape, packed, ForwardOptions::training());
      Var loss = bias_adapting_loss(out.probability, packed.labels, weights);
      const double value = loss.value().item();
      if (!std::isfinite(value))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(log.steps));
      const Gradients grads = evaluate_with_gradients(tape, loss, *m.store);
      adam.update(*m.store, grads);
      loss_sum += value;
      ++batches;
      ++log.steps;
    }
    const double mean = loss_sum / static_cast<double>(batches);
    log.epoch_loss.push_back(mean);
    std::string line = "epoch=" + std::to_string(epoch + 1) + " train_loss=" + fmt(mean);
    if (valid && !valid->empty()) {
      const double vl = evaluation_loss(m, *valid);
      log.valid_loss.push_back(vl);
      line += " valid_loss=" + fmt(vl);
    }
    log.add(line);
    if (progress) progress(line);
  }
  return log;
}

/// Pass-2 style training from fresh initialization on records with a coefficient table.
inline TrainedModel train_model(const std::vector<InteractionRecord>& train, const TrainConfig& cfg,
                                const FairnessTable& table, std::uint64_t seed, TrainLog* log_out = nullptr,
                                const std::vector<InteractionRecord>* valid = nullptr,
                                std::function<void(const std::string&)> progress = {}) {
  TrainedModel m = TrainedModel::create(FeatureVocab::build(train), cfg.model, seed);
  const auto encoded = m.encode(train, &table);
  TrainLog log = train_epochs(m, encoded, cfg, seed, valid, progress);
  if (log_out) *log_out = std::move(log);
  return m;
}

/// Index of the last simulated day present in records.
inline std::int64_t last_day(const std::vector<InteractionRecord>& records, std::int64_t ticks_per_day) {
  require(!records.empty() && ticks_per_day > 0, "last_day needs records and a positive day length");
  std::int64_t ts = records.front().timestamp;
  for (const auto& r : records) ts = std::max(ts, r.timestamp);
  return ts >= 0 ? ts / ticks_per_day : -1;
}

inline std::vector<InteractionRecord> records_of_day(const std::vector<InteractionRecord>& records, std::int64_t day,
                                                     std::int64_t ticks_per_day) {
  std::vector<InteractionRecord> out;
  for (const auto& r : records)
    if (r.timestamp >= day * ticks_per_day && r.timestamp < (day + 1) * ticks_per_day) out.push_back(r);
  return out;
}

/// Stats from serve-mode scores of one day of logs.
inline ExposureStats accumulate_stats(const TrainedModel& m, const std::vector<InteractionRecord>& day) {
  const auto scores = m.score(day);
  ExposureStats stats;
  for (std::size_t k = 0; k < day.size(); ++k) stats.add(day[k].scenario_id, day[k].item_id, scores[k]);
  return stats;
}

struct TwoPassResult {
  FairnessTable table;
  ExposureStats stats;
  TrainLog pass1;
};

/// Pass 1: all coefficients 1 with bias nets active; the table comes from its
/// serve-mode scores on the final training day.
inline TwoPassResult bootstrap_fairness(const std::vector<InteractionRecord>& train, const TrainConfig& cfg,
                                        std::int64_t ticks_per_day, std::uint64_t seed) {
  TrainConfig pass1 = cfg;
  pass1.model.use_bias_net = true;
  pass1.fairness_loss = false;
  TwoPassResult r;
  const TrainedModel m = train_model(train, pass1, FairnessTable{}, seed, &r.pass1);
  r.stats = accumulate_stats(m, records_of_day(train, last_day(train, ticks_per_day), ticks_per_day));
  r.table = compute_fairness(r.stats, cfg.clip);
  return r;
}

/// One named variant of an ablation suite: config overrides applied on top of the base config.
struct AblationVariant {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};

inline std::vector<AblationVariant> ablation_suite(const std::string& suite) {
  if (suite == "attention")
    return {{"mean-pooling", {{"model.attention_mode", "mean"}}},
            {"target-attention", {{"model.attention_mode", "target-only"}}},
            {"scenario-attention", {{"model.attention_mode", "scenario-only"}}},
            {"concatenate-attention", {{"model.attention_mode", "concat-query"}}},
            {"hierarchical-attention", {{"model.attention_mode", "hierarchical"}}},
            {"sar-net", {{"model.attention_mode", "dual"}}}};
  if (suite == "bias") {
    const std::vector<std::pair<std::string, std::string>> off{{"model.bias_net", "false"}, {"fairness.loss", "false"}};
    auto with = [&](std::vector<std::pair<std::string, std::string>> extra) {
      auto o = off;
      o.insert(o.end(), extra.begin(), extra.end());
      return o;
    };
    return {{"base", off},
            {"sub-sampling-0.9", with({{"train.subsample_ratio", "0.9"}})},
            {"sub-sampling-0.8", with({{"train.subsample_ratio", "0.8"}})},
            {"sub-sampling-0.7", with({{"train.subsample_ratio", "0.7"}})},
            {"sub-sampling-0.6", with({{"train.subsample_ratio", "0.6"}})},
            {"bias-net", {{"model.bias_net", "true"}, {"fairness.loss", "false"}}},
            {"bias-adapting-loss", {{"model.bias_net", "false"}, {"fairness.loss", "true"}}},
            {"sar-net", {{"model.bias_net", "true"}, {"fairness.loss", "true"}}}};
  }
  if (suite == "transform")
    return {{"no-transform", {{"model.transform", "false"}, {"model.expert_layers", "1"}}},
            {"multi-layer-experts-2", {{"model.transform", "false"}, {"model.expert_layers", "2"}}},
            {"multi-layer-experts-3", {{"model.transform", "false"}, {"model.expert_layers", "3"}}},
            {"multi-layer-experts-4", {{"model.transform", "false"}, {"model.expert_layers", "4"}}},
            {"multi-layer-experts-5", {{"model.transform", "false"}, {"model.expert_layers", "5"}}},
            {"sar-net", {{"model.transform", "true"}, {"model.expert_layers", "1"}}}};
  throw ConfigError("unknown ablation suite '" + suite + "' (expected attention, bias or transform)");
}

struct AblationRow {
  std::string name;
  std::vector<double> aucs;  // one per seed
  double median_auc = 0.0;
  double rela_impr = 0.0;
};

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant\tmedian_auc\trelaimpr\tseed_aucs\n";
  for (const auto& row : rows) {
    out << row.name << '\t' << fmt(row.median_auc) << '\t' << fmt(row.rela_impr) << '\t';
    for (std::size_t k = 0; k < row.aucs.size(); ++k) out << (k ? "," : "") << fmt(row.aucs[k]);
    out << '\n';
  }
  return out.str();
}

/// Everything one experiment cell needs: data, the base config, and the
/// intervened pairs for sub-sampling.
struct ExperimentData {
  std::vector<InteractionRecord> train;
  std::vector<InteractionRecord> test;
  std::set<std::pair<RawId, RawId>> intervened;
  std::int64_t ticks_per_day = 1;
};

/// Identifies the pass-1 run of a config: everything except the bias/loss toggles,
/// which pass 1 overrides anyway.
inline std::string bootstrap_key(const TrainConfig& cfg, std::uint64_t seed) {
  const ModelConfig& m = cfg.model;
  std::ostringstream k;
  k << seed << '|' << m.embedding_dim << '|' << m.attention_hidden << '|' << attention_mode_name(m.attention_mode) << '|'
    << m.expert_hidden << '|' << m.expert_layers << '|' << m.specific_experts << '|' << m.shared_experts << '|'
    << m.bias_hidden << '|' << m.use_transform << '|' << m.max_behaviors << '|' << fmt(m.init_scale) << '|'
    << cfg.epochs << '|' << cfg.batch_size << '|' << fmt(cfg.adam.learning_rate) << '|' << fmt(cfg.clip.lower) << '|'
    << fmt(cfg.clip.upper);
  return k.str();
}

/// Trains one configured variant on one seed and returns its unbiased-test AUC.
/// Bootstrapped coefficient tables are cached in `tables`.
inline double run_variant(const ExperimentData& data, const TrainConfig& cfg, std::uint64_t seed,
                          std::map<std::string, FairnessTable>& tables) {
  FairnessTable table;
  if (cfg.needs_fairness()) {
    const std::string key = bootstrap_key(cfg, seed);
    auto it = tables.find(key);
    if (it == tables.end())
      it = tables.emplace(key, bootstrap_fairness(data.train, cfg, data.ticks_per_day, seed).table).first;
    table = it->second;
  }
  const auto train = subsample_intervened(data.train, data.intervened, cfg.subsample_ratio, seed);
  const TrainedModel m = train_model(train, cfg, table, seed);
  const auto scores = m.score(data.test);
  std::vector<int> labels;
  for (const auto& r : data.test) labels.push_back(r.label);
  return auc(scores, labels);
}

/// Runs every suite row over the seeds; RelaImpr is measured against the first row.
inline std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants, const Config& base,
                                             const std::function<const ExperimentData&(std::uint64_t)>& data_for_seed,
                                             const std::vector<std::uint64_t>& seeds,
                                             std::function<void(const std::string&)> progress = {}) {
  std::vector<AblationRow> rows;
  std::map<std::string, FairnessTable> tables;
  for (const auto& v : variants) {
    Config c = base;
    for (const auto& [k, val] : v.overrides) c.set(k, val);
    const TrainConfig cfg = TrainConfig::from_config(c);
    AblationRow row;
    row.name = v.name;
    for (std::uint64_t seed : seeds) {
      row.aucs.push_back(run_variant(data_for_seed(seed), cfg, seed, tables));
      if (progress) progress(v.name + " seed=" + std::to_string(seed) + " auc=" + fmt(row.aucs.back()));
    }
    row.median_auc = median(row.aucs);
    rows.push_back(std::move(row));
  }
  for (auto& row : rows) row.rela_impr = rela_impr(row.median_auc, rows.front().median_auc);
  return rows;
}

}  // namespace sarnet
