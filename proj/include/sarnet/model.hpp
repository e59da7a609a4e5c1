#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sarnet/behavior_extract.hpp"
#include "sarnet/errors.hpp"
#include "sarnet/features.hpp"
#include "sarnet/numerics/batch_norm.hpp"
#include "sarnet/numerics/ops.hpp"
#include "sarnet/numerics/random.hpp"
#include "sarnet/numerics/tape.hpp"

namespace sarnet {

struct ModelConfig {
  std::size_t embedding_dim = 8;
  std::size_t attention_hidden = 32;
  AttentionMode attention_mode = AttentionMode::kDual;
  std::size_t expert_hidden = 64;
  std::size_t expert_layers = 1;
  std::size_t specific_experts = 2;  // m_k
  std::size_t shared_experts = 8;    // m_s
  std::size_t bias_hidden = 2;
  bool use_transform = true;
  bool use_bias_net = true;
  std::size_t max_behaviors = 50;
  double init_scale = 0.05;
  BatchNormConfig batch_norm{};
};

/// Dense layer x W + b with uniform weight init and zero bias.
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng, double scale) {
    Tensor w({in, out});
    for (double& v : w.values()) v = rng.uniform(-scale, scale);
    w_ = &store.add(prefix + ".w", std::move(w));
    b_ = &store.add(prefix + ".b", Tensor({1, out}));
  }
  Var forward(Var x) const {
    Tape& tape = *x.tape();
    return add_row(matmul(x, tape.param(*w_)), tape.param(*b_));
  }
  Parameter& weight() const { return *w_; }
  Parameter& bias() const { return *b_; }
  std::size_t in() const { return w_->value.rows(); }
  std::size_t out() const { return w_->value.cols(); }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
};

/// How a forward pass runs. `mode` picks the output head (train adds the bias
/// logit, serve drops it); `batch_statistics` picks how batch norm normalizes.
struct ForwardOptions {
  Mode mode = Mode::kServe;
  bool batch_statistics = false;
  bool update_running = false;

  static ForwardOptions training() { return {Mode::kTrain, true, true}; }
  static ForwardOptions serving() { return {Mode::kServe, false, false}; }
};

/// Per-scenario element-wise affine map v' = v * beta_k + gamma_k. Rows of the
/// two S x w parameters are scenarios (0-based).
class ScenarioTransform {
 public:
  ScenarioTransform() = default;
  ScenarioTransform(ParameterStore& store, std::size_t scenarios, std::size_t width)
      : beta_(&store.add("transform.beta", Tensor({scenarios, width}, 1.0))),
        gamma_(&store.add("transform.gamma", Tensor({scenarios, width}, 0.0))) {}

  std::size_t scenarios() const { return beta_->value.rows(); }
  std::size_t width() const { return beta_->value.cols(); }
  Parameter& beta() const { return *beta_; }
  Parameter& gamma() const { return *gamma_; }

  Var apply(Var v, std::size_t k) const {
    require(k < scenarios(), "unknown scenario index " + std::to_string(k));
    require(v.value().cols() == width(), "transform width mismatch");
    Tape& tape = *v.tape();
    return add_row(mul_row(v, take_rows(tape.param(*beta_), {k})), take_rows(tape.param(*gamma_), {k}));
  }

 private:
  Parameter* beta_ = nullptr;
  Parameter* gamma_ = nullptr;
};

inline std::vector<double> scenario_transform(const std::vector<double>& v, std::size_t k,
                                              const ScenarioTransform& t) {
  Tape tape;
  const Tensor out = t.apply(tape.constant(Tensor::row(v)), k).value();
  return {out.values().begin(), out.values().end()};
}

/// [fc, ln fc] rows for the bias net.
inline Tensor fairness_features(const std::vector<double>& fc) {
  Tensor f = Tensor::zeros(fc.size(), 2);
  for (std::size_t r = 0; r < fc.size(); ++r) {
    require(fc[r] > 0.0, "fairness coefficient must be positive in train mode, got " + std::to_string(fc[r]));
    f(r, 0) = fc[r];
    f(r, 1) = std::log(fc[r]);
  }
  return f;
}

/// Main net (stacked Linear -> BN -> ReLU blocks, then a scalar logit) plus an
/// optional bias net over the fairness feature whose logit is added in train mode.
class DebiasExpert {
 public:
  DebiasExpert() = default;
  DebiasExpert(ParameterStore& store, const std::string& prefix, std::size_t in, const ModelConfig& cfg, Rng& rng) {
    std::size_t width = in;
    for (std::size_t l = 0; l < std::max<std::size_t>(1, cfg.expert_layers); ++l) {
      const std::string p = prefix + ".main.layer" + std::to_string(l);
      layers_.push_back(Linear(store, p, width, cfg.expert_hidden, rng, cfg.init_scale));
      norms_.push_back(BatchNorm(store, p + ".bn", cfg.expert_hidden, cfg.batch_norm));
      width = cfg.expert_hidden;
    }
    out_ = Linear(store, prefix + ".main.out", width, 1, rng, cfg.init_scale);
    // Forked unconditionally so the main net initializes the same with or without a bias net.
    Rng bias_rng = rng.fork(0xB1A5);
    if (cfg.use_bias_net) {
      bias_hidden_ = Linear(store, prefix + ".bias.hidden", 2, cfg.bias_hidden, bias_rng, cfg.init_scale);
      bias_out_ = Linear(store, prefix + ".bias.out", cfg.bias_hidden, 1, bias_rng, 0.0);
    }
  }

  bool has_bias_net() const { return bias_out_.has_value(); }
  const Linear& bias_output() const { return *bias_out_; }
  const Linear& bias_hidden() const { return *bias_hidden_; }

  Var main_logit(Var x, const ForwardOptions& opt) {
    Var h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = layers_[l].forward(h);
      // Training batches with one row fall back to running statistics.
      const bool batch = opt.batch_statistics && h.value().rows() >= 2;
      h = relu(norms_[l].forward(h, batch ? Mode::kTrain : Mode::kServe, opt.update_running));
    }
    return out_.forward(h);
  }

  /// Logit of the expert. `fairness` is n x 2 ([fc, ln fc]); unused in serve mode.
  Var logit(Var x, std::optional<Var> fairness, const ForwardOptions& opt) {
    Var main = main_logit(x, opt);
    if (opt.mode == Mode::kServe || !bias_out_) return main;
    require(fairness.has_value(), "train-mode expert needs the fairness feature");
    return add(main, bias_out_->forward(relu(bias_hidden_->forward(*fairness))));
  }

 private:
  std::vector<Linear> layers_;
  std::vector<BatchNorm> norms_;
  Linear out_;
  std::optional<Linear> bias_hidden_;
  std::optional<Linear> bias_out_;
};

/// Value-level expert evaluation on a single representation.
inline double expert_forward(DebiasExpert& e, const std::vector<double>& v, double fc, Mode mode) {
  Tape tape;
  ForwardOptions opt{mode, false, false};
  std::optional<Var> f;
  if (mode == Mode::kTrain) f = tape.constant(fairness_features({fc}));
  return logistic(e.logit(tape.constant(Tensor::row(v)), f, opt).value().item());
}

/// Single linear layer to m_k + m_s scores with softmax.
class GateNet {
 public:
  GateNet() = default;
  GateNet(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t experts, Rng& rng,
          double scale)
      : linear_(store, prefix, in, experts, rng, scale) {}
  std::size_t experts() const { return linear_.out(); }
  const Linear& linear() const { return linear_; }
  Var weights(Var x) const { return softmax_rows(linear_.forward(x)); }
  Var mix(Var x, Var outputs) const {
    require(outputs.value().cols() == experts(), "gate expects " + std::to_string(experts()) + " expert outputs, got " +
                                                     std::to_string(outputs.value().cols()));
    return row_dot(weights(x), outputs);
  }

 private:
  Linear linear_;
};

inline double gate_mix(const GateNet& gate, const std::vector<double>& x, const std::vector<double>& outputs) {
  Tape tape;
  return gate.mix(tape.constant(Tensor::row(x)), tape.constant(Tensor::row(outputs))).value().item();
}

/// Index lists of a batch, ready for embedding lookups.
struct PackedBatch {
  std::size_t size = 0;
  std::vector<std::vector<std::size_t>> user, item, context;            // per field, one index per record
  std::vector<std::vector<std::size_t>> behavior_item, behavior_context;  // per field, one index per position
  BehaviorSegments segments;
  std::vector<std::size_t> scenario;  // 0-based scenario row
  std::vector<double> fairness;
  std::vector<double> labels;
};

inline PackedBatch pack_batch(const std::vector<const EncodedRecord*>& records, const FeatureGroupLayout& layout,
                              std::size_t scenarios) {
  PackedBatch b;
  b.size = records.size();
  b.user.resize(layout.user_profile.size());
  b.item.resize(layout.target_item.size());
  b.context.resize(layout.scenario_context.size());
  b.behavior_item.resize(layout.target_item.size());
  b.behavior_context.resize(layout.scenario_context.size());
  auto push = [](std::vector<std::vector<std::size_t>>& dst, const std::vector<std::size_t>& src) {
    for (std::size_t f = 0; f < dst.size(); ++f) dst[f].push_back(src[f]);
  };
  for (const EncodedRecord* r : records) {
    require(r->scenario_index >= 1 && r->scenario_index <= scenarios,
            "record scenario " + std::to_string(r->scenario_id) + " is not registered with the model");
    push(b.user, r->user);
    push(b.item, r->item);
    push(b.context, r->context);
    for (std::size_t k = 0; k < r->behavior_item.size(); ++k) {
      push(b.behavior_item, r->behavior_item[k]);
      push(b.behavior_context, r->behavior_context[k]);
    }
    b.segments.append(r->behavior_item.size(), r->behavior_item.size());
    b.scenario.push_back(r->scenario_index - 1);
    b.fairness.push_back(r->fairness);
    b.labels.push_back(r->label);
  }
  return b;
}

/// Per-scenario slice of one forward pass, for diagnostics and tests.
struct ScenarioGroup {
  std::size_t scenario = 0;
  std::vector<std::size_t> rows;  // batch rows in this group
  Var gate_weights;               // rows x (m_k + m_s)
  Var expert_outputs;             // rows x (m_k + m_s), specific then shared
  Var transformed;                // v'
};

struct ModelOutput {
  Var probability;  // n x 1 in batch order
  Var representation;
  PooledInterest pooled;
  std::vector<ScenarioGroup> groups;
};

class SarNet {
 public:
  SarNet(ParameterStore& store, const FeatureVocab& vocab, ModelConfig cfg, Rng& rng)
      : cfg_(cfg), scenarios_(vocab.size(Field::kScenarioId) - 1) {
    require(scenarios_ >= 1, "model needs at least one scenario");
    require(cfg.specific_experts + cfg.shared_experts >= 1, "model needs at least one expert");
    tables_ = FeatureTables(store, vocab, cfg.embedding_dim, rng);
    const std::size_t wi = tables_.width(layout_.target_item);
    const std::size_t ws = tables_.width(layout_.scenario_context);
    extractor_ = BehaviorExtractor(store, cfg.attention_mode, wi, ws, cfg.attention_hidden, rng, cfg.init_scale);
    width_ = wi + tables_.width(layout_.user_profile) + wi + ws;
    if (cfg.use_transform) transform_ = ScenarioTransform(store, scenarios_, width_);
    for (std::size_t j = 0; j < cfg.shared_experts; ++j)
      shared_.emplace_back(store, "expert.shared" + std::to_string(j), width_, cfg, rng);
    specific_.resize(scenarios_);
    for (std::size_t k = 0; k < scenarios_; ++k) {
      for (std::size_t j = 0; j < cfg.specific_experts; ++j)
        specific_[k].emplace_back(store, "expert.s" + std::to_string(k) + "." + std::to_string(j), width_, cfg, rng);
      gates_.emplace_back(store, "gate.s" + std::to_string(k), width_, cfg.specific_experts + cfg.shared_experts, rng,
                          cfg.init_scale);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const FeatureGroupLayout& layout() const { return layout_; }
  const FeatureTables& tables() const { return tables_; }
  const BehaviorExtractor& extractor() const { return extractor_; }
  const std::optional<ScenarioTransform>& transform() const { return transform_; }
  std::size_t scenarios() const { return scenarios_; }
  std::size_t width() const { return width_; }
  std::vector<DebiasExpert>& shared_experts() { return shared_; }
  std::vector<DebiasExpert>& specific_experts(std::size_t k) { return specific_.at(k); }
  const GateNet& gate(std::size_t k) const { return gates_.at(k); }

  /// Zeroes every bias-net output layer.
  void zero_bias_outputs() {
    auto zero = [](DebiasExpert& e) {
      if (e.has_bias_net()) {
        e.bias_output().weight().value.fill(0.0);
        e.bias_output().bias().value.fill(0.0);
      }
    };
    for (auto& e : shared_) zero(e);
    for (auto& group : specific_)
      for (auto& e : group) zero(e);
  }

  PackedBatch pack(const std::vector<const EncodedRecord*>& records) const {
    return pack_batch(records, layout_, scenarios_);
  }

  ModelOutput forward(Tape& tape, const PackedBatch& batch, const ForwardOptions& opt) {
    require(batch.size >= 1, "empty batch");
    ModelOutput out;
    Var user = embed_group(tape, layout_.user_profile, batch.user);
    Var item = embed_group(tape, layout_.target_item, batch.item);
    Var context = embed_group(tape, layout_.scenario_context, batch.context);
    Var keys_item = embed_group(tape, layout_.behavior_item(), batch.behavior_item);
    Var keys_context = embed_group(tape, layout_.behavior_scenario(), batch.behavior_context);
    out.pooled = extractor_.extract(keys_item, keys_context, item, context, batch.segments);
    out.representation = concat_cols({out.pooled.interest, user, item, context});

    // Rows grouped by scenario so each group is one contiguous slice.
    std::vector<std::size_t> order(batch.size);
    for (std::size_t r = 0; r < batch.size; ++r) order[r] = r;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return batch.scenario[a] < batch.scenario[b]; });
    Var sorted = take_rows(out.representation, order);
    std::optional<Var> fairness;
    if (opt.mode == Mode::kTrain && cfg_.use_bias_net) {
      std::vector<double> fc(batch.size);
      for (std::size_t r = 0; r < batch.size; ++r) fc[r] = batch.fairness[order[r]];
      fairness = tape.constant(fairness_features(fc));
    }

    std::vector<std::pair<std::size_t, std::size_t>> spans;  // [begin, end) per group
    std::vector<Var> transformed;
    for (std::size_t b = 0; b < batch.size;) {
      std::size_t e = b;
      while (e < batch.size && batch.scenario[order[e]] == batch.scenario[order[b]]) ++e;
      const std::size_t k = batch.scenario[order[b]];
      Var slice = slice_rows(sorted, b, e);
      transformed.push_back(transform_ ? transform_->apply(slice, k) : slice);
      spans.emplace_back(b, e);
      ScenarioGroup g;
      g.scenario = k;
      g.rows.assign(order.begin() + static_cast<std::ptrdiff_t>(b), order.begin() + static_cast<std::ptrdiff_t>(e));
      out.groups.push_back(std::move(g));
      b = e;
    }
    Var all = transformed.size() == 1 ? transformed[0] : concat_rows(transformed);

    std::vector<Var> shared_probs;
    for (auto& e : shared_) shared_probs.push_back(sigmoid(e.logit(all, fairness, opt)));

    std::vector<Var> mixed;
    for (std::size_t gi = 0; gi < out.groups.size(); ++gi) {
      auto& g = out.groups[gi];
      const auto [b, e] = spans[gi];
      Var x = transformed[gi];
      std::optional<Var> group_fc;
      if (fairness) group_fc = slice_rows(*fairness, b, e);
      std::vector<Var> cols;
      for (auto& expert : specific_[g.scenario]) cols.push_back(sigmoid(expert.logit(x, group_fc, opt)));
      for (Var p : shared_probs) cols.push_back(slice_rows(p, b, e));
      g.expert_outputs = cols.size() == 1 ? cols[0] : concat_cols(cols);
      g.gate_weights = gates_[g.scenario].weights(x);
      g.transformed = x;
      mixed.push_back(row_dot(g.gate_weights, g.expert_outputs));
    }
    Var y = mixed.size() == 1 ? mixed[0] : concat_rows(mixed);
    std::vector<std::size_t> inverse(batch.size);
    for (std::size_t r = 0; r < batch.size; ++r) inverse[order[r]] = r;
    out.probability = take_rows(y, inverse);
    return out;
  }

  /// Serve-mode probabilities for a list of records, evaluated in chunks.
  std::vector<double> predict(const std::vector<const EncodedRecord*>& records, std::size_t chunk = 512,
                              ForwardOptions opt = ForwardOptions::serving()) {
    std::vector<double> scores;
    scores.reserve(records.size());
    for (std::size_t b = 0; b < records.size(); b += chunk) {
      const std::size_t e = std::min(records.size(), b + chunk);
      std::vector<const EncodedRecord*> part(records.begin() + static_cast<std::ptrdiff_t>(b),
                                             records.begin() + static_cast<std::ptrdiff_t>(e));
      Tape tape;
      const Tensor& p = forward(tape, pack(part), opt).probability.value();
      scores.insert(scores.end(), p.values().begin(), p.values().end());
    }
    return scores;
  }

 private:
  Var embed_group(Tape& tape, const std::vector<Field>& fields, const std::vector<std::vector<std::size_t>>& index) {
    std::vector<Var> parts;
    for (std::size_t f = 0; f < fields.size(); ++f)
      parts.push_back(embed_columns(tape.param(tables_.table(fields[f]).parameter()), index[f]));
    return parts.size() == 1 ? parts[0] : concat_cols(parts);
  }

  ModelConfig cfg_;
  FeatureGroupLayout layout_;
  std::size_t scenarios_ = 0;
  std::size_t width_ = 0;
  FeatureTables tables_;
  BehaviorExtractor extractor_;
  std::optional<ScenarioTransform> transform_;
  std::vector<DebiasExpert> shared_;
  std::vector<std::vector<DebiasExpert>> specific_;
  std::vector<GateNet> gates_;
};

}  // namespace sarnet
