#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sarnet/errors.hpp"
#include "sarnet/numerics/ops.hpp"
#include "sarnet/numerics/random.hpp"
#include "sarnet/numerics/tape.hpp"

namespace sarnet {

/// Behavior pooling variants. kDual is the full model; the rest are ablations.
enum class AttentionMode { kDual, kMean, kTargetOnly, kScenarioOnly, kConcatQuery, kHierarchical };

inline std::string_view attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::kDual: return "dual";
    case AttentionMode::kMean: return "mean";
    case AttentionMode::kTargetOnly: return "target-only";
    case AttentionMode::kScenarioOnly: return "scenario-only";
    case AttentionMode::kConcatQuery: return "concat-query";
    case AttentionMode::kHierarchical: return "hierarchical";
  }
  return "?";
}

inline AttentionMode attention_mode_from_name(std::string_view name) {
  for (AttentionMode m : {AttentionMode::kDual, AttentionMode::kMean, AttentionMode::kTargetOnly,
                          AttentionMode::kScenarioOnly, AttentionMode::kConcatQuery, AttentionMode::kHierarchical})
    if (attention_mode_name(m) == name) return m;
  throw ContractViolation("unknown attention mode '" + std::string(name) + "'");
}

/// Feed-forward scorer over a (key, query) pair of equal width w. The hidden
/// layer reads [key, query, key - query, key * query] (4w inputs) through a
/// rectifier; the output is a linear scalar.
class AttentionNet {
 public:
  AttentionNet() = default;
  AttentionNet(ParameterStore& store, const std::string& prefix, std::size_t width, std::size_t hidden, Rng& rng,
               double init_scale = 0.05)
      : width_(width) {
    Tensor w1({4 * width, hidden});
    for (double& v : w1.values()) v = rng.uniform(-init_scale, init_scale);
    Tensor w2({hidden, 1});
    for (double& v : w2.values()) v = rng.uniform(-init_scale, init_scale);
    w1_ = &store.add(prefix + ".w1", std::move(w1));
    b1_ = &store.add(prefix + ".b1", Tensor({1, hidden}));
    w2_ = &store.add(prefix + ".w2", std::move(w2));
    b2_ = &store.add(prefix + ".b2", Tensor({1, 1}));
  }

  std::size_t width() const { return width_; }
  std::size_t hidden() const { return b1_->value.cols(); }

  /// Scores P keys against their segment's query. `queries` holds one row per
  /// segment; `segment` maps each key row to its query row.
  ///
  /// The first layer is split by input block so the query-only term is computed
  /// once per segment: [k, q, k-q, k*q] W = k (W_k + W_d) + q (W_q - W_d) + (k*q) W_m.
  Var score(Var keys, Var queries, const std::vector<std::size_t>& segment) const {
    require(keys.value().cols() == width_ && queries.value().cols() == width_,
            "attention input width mismatch: expected " + std::to_string(width_) + ", got key " +
                std::to_string(keys.value().cols()) + " / query " + std::to_string(queries.value().cols()));
    require(segment.size() == keys.value().rows(), "attention segment map does not cover the keys");
    Tape& tape = *keys.tape();
    Var w1 = tape.param(*w1_);
    const std::size_t w = width_;
    Var wk = slice_rows(w1, 0, w), wq = slice_rows(w1, w, 2 * w), wd = slice_rows(w1, 2 * w, 3 * w),
        wm = slice_rows(w1, 3 * w, 4 * w);
    Var key_term = matmul(keys, add(wk, wd));
    Var query_term = take_rows(matmul(queries, sub(wq, wd)), segment);
    Var cross_term = matmul(mul(keys, take_rows(queries, segment)), wm);
    Var hidden = relu(add_row(add(add(key_term, query_term), cross_term), tape.param(*b1_)));
    return add_row(matmul(hidden, tape.param(*w2_)), tape.param(*b2_));
  }

  Parameter& w1() const { return *w1_; }
  Parameter& b1() const { return *b1_; }
  Parameter& w2() const { return *w2_; }
  Parameter& b2() const { return *b2_; }

 private:
  std::size_t width_ = 0;
  Parameter* w1_ = nullptr;
  Parameter* b1_ = nullptr;
  Parameter* w2_ = nullptr;
  Parameter* b2_ = nullptr;
};

/// Packed behavior positions of a batch: segment s owns rows [offsets[s], offsets[s+1]).
struct BehaviorSegments {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> segment_of;  // row -> segment
  std::vector<char> mask;               // 1 = real behavior

  std::size_t segments() const { return offsets.size() - 1; }
  std::size_t positions() const { return segment_of.size(); }

  void append(std::size_t length, std::size_t valid) {
    const std::size_t s = segments();
    for (std::size_t k = 0; k < length; ++k) {
      segment_of.push_back(s);
      mask.push_back(k < valid ? 1 : 0);
    }
    offsets.push_back(offsets.back() + length);
  }
};

/// Pooled interest and the per-position weights that produced it.
struct PooledInterest {
  Var interest;                    // segments x width(item part)
  Var weights;                     // positions x 1, the pooling weights actually used
  std::optional<Var> alpha_item;   // item-conditioned attention, when the mode has one
  std::optional<Var> alpha_scenario;
};

/// Cross-scenario behavior extract layer: scores behaviors against the target
/// item and the target scenario with two separate attention nets and pools the
/// item parts with the product of the two weight sets (not renormalized).
class BehaviorExtractor {
 public:
  BehaviorExtractor() = default;
  BehaviorExtractor(ParameterStore& store, AttentionMode mode, std::size_t item_width, std::size_t scenario_width,
                    std::size_t hidden, Rng& rng, double init_scale = 0.05)
      : mode_(mode) {
    switch (mode) {
      case AttentionMode::kMean: break;
      case AttentionMode::kDual:
        item_net_ = AttentionNet(store, "attention.item", item_width, hidden, rng, init_scale);
        scenario_net_ = AttentionNet(store, "attention.scenario", scenario_width, hidden, rng, init_scale);
        break;
      case AttentionMode::kTargetOnly:
        item_net_ = AttentionNet(store, "attention.item", item_width, hidden, rng, init_scale);
        break;
      case AttentionMode::kScenarioOnly:
        scenario_net_ = AttentionNet(store, "attention.scenario", scenario_width, hidden, rng, init_scale);
        break;
      case AttentionMode::kConcatQuery:
        concat_net_ = AttentionNet(store, "attention.concat", item_width + scenario_width, hidden, rng, init_scale);
        break;
      case AttentionMode::kHierarchical:
        concat_net_ = AttentionNet(store, "attention.concat", item_width + scenario_width, hidden, rng, init_scale);
        scenario_net_ = AttentionNet(store, "attention.scenario", scenario_width, hidden, rng, init_scale);
        break;
    }
  }

  AttentionMode mode() const { return mode_; }
  const std::optional<AttentionNet>& item_net() const { return item_net_; }
  const std::optional<AttentionNet>& scenario_net() const { return scenario_net_; }
  const std::optional<AttentionNet>& concat_net() const { return concat_net_; }

  /// keys_item/keys_scenario: positions x width; target_item/target_scenario: segments x width.
  PooledInterest extract(Var keys_item, Var keys_scenario, Var target_item, Var target_scenario,
                         const BehaviorSegments& seg) const {
    require(keys_item.value().rows() == seg.positions() && keys_scenario.value().rows() == seg.positions(),
            "behavior keys do not match the segment layout");
    require(target_item.value().rows() == seg.segments() && target_scenario.value().rows() == seg.segments(),
            "target queries do not match the segment count");
    Tape& tape = *keys_item.tape();
    PooledInterest out;
    auto softmax = [&](Var scores) { return segment_softmax(scores, seg.offsets, seg.mask); };
    switch (mode_) {
      case AttentionMode::kMean: {
        Tensor w = Tensor::zeros(seg.positions(), 1);
        for (std::size_t s = 0; s < seg.segments(); ++s) {
          std::size_t valid = 0;
          for (std::size_t p = seg.offsets[s]; p < seg.offsets[s + 1]; ++p) valid += seg.mask[p] ? 1 : 0;
          for (std::size_t p = seg.offsets[s]; p < seg.offsets[s + 1]; ++p)
            w[p] = seg.mask[p] ? 1.0 / static_cast<double>(valid) : 0.0;
        }
        out.weights = tape.constant(std::move(w));
        break;
      }
      case AttentionMode::kDual: {
        Var ai = softmax(item_net_->score(keys_item, target_item, seg.segment_of));
        Var as = softmax(scenario_net_->score(keys_scenario, target_scenario, seg.segment_of));
        out.alpha_item = ai;
        out.alpha_scenario = as;
        out.weights = mul(ai, as);
        break;
      }
      case AttentionMode::kTargetOnly: {
        Var ai = softmax(item_net_->score(keys_item, target_item, seg.segment_of));
        out.alpha_item = ai;
        out.weights = ai;
        break;
      }
      case AttentionMode::kScenarioOnly: {
        Var as = softmax(scenario_net_->score(keys_scenario, target_scenario, seg.segment_of));
        out.alpha_scenario = as;
        out.weights = as;
        break;
      }
      case AttentionMode::kConcatQuery: {
        out.weights = softmax(concat_net_->score(concat_cols({keys_item, keys_scenario}),
                                                 concat_cols({target_item, target_scenario}), seg.segment_of));
        break;
      }
      case AttentionMode::kHierarchical: {
        Var first = softmax(concat_net_->score(concat_cols({keys_item, keys_scenario}),
                                               concat_cols({target_item, target_scenario}), seg.segment_of));
        Var second = softmax(scenario_net_->score(keys_scenario, target_scenario, seg.segment_of));
        out.alpha_item = first;
        out.alpha_scenario = second;
        out.weights = mul(first, second);
        break;
      }
    }
    out.interest = segment_weighted_sum(out.weights, keys_item, seg.offsets);
    return out;
  }

 private:
  AttentionMode mode_ = AttentionMode::kDual;
  std::optional<AttentionNet> item_net_;
  std::optional<AttentionNet> scenario_net_;
  std::optional<AttentionNet> concat_net_;
};

// Single-record, value-level entry points. Keys are L x w (padded), queries 1 x w.

namespace detail {

inline BehaviorSegments single_segment(const std::vector<char>& mask) {
  BehaviorSegments seg;
  seg.offsets = {0, mask.size()};
  seg.segment_of.assign(mask.size(), 0);
  seg.mask = mask;
  return seg;
}

inline std::vector<double> column_values(const Tensor& t) { return std::vector<double>(t.values().begin(), t.values().end()); }

}  // namespace detail

inline double attention_score(const AttentionNet& net, const std::vector<double>& key,
                              const std::vector<double>& query) {
  require(key.size() == net.width() && query.size() == net.width(),
          "attention_score: key/query width must be " + std::to_string(net.width()));
  Tape tape;
  Var k = tape.constant(Tensor::row(key));
  Var q = tape.constant(Tensor::row(query));
  return net.score(k, q, {0}).value().item();
}

inline std::vector<double> attention_weights(const AttentionNet& net, const Tensor& keys, const Tensor& query,
                                             const std::vector<char>& mask) {
  require(mask.size() == keys.rows(), "mask length differs from the number of behavior positions");
  if (keys.rows() == 0) return {};
  Tape tape;
  const BehaviorSegments seg = detail::single_segment(mask);
  Var scores = net.score(tape.constant(keys), tape.constant(query), seg.segment_of);
  return detail::column_values(segment_softmax(scores, seg.offsets, seg.mask).value());
}

/// Softmax of item-conditioned scores over the valid positions.
inline std::vector<double> item_attention_weights(const AttentionNet& net, const Tensor& keys_item,
                                                  const Tensor& target_item, const std::vector<char>& mask) {
  return attention_weights(net, keys_item, target_item, mask);
}

/// Softmax of scenario-conditioned scores over the valid positions.
inline std::vector<double> scenario_attention_weights(const AttentionNet& net, const Tensor& keys_scenario,
                                                      const Tensor& target_scenario, const std::vector<char>& mask) {
  return attention_weights(net, keys_scenario, target_scenario, mask);
}

/// Sum over positions of alpha_item * alpha_scenario * key (no renormalization).
inline std::vector<double> pool_interest(const Tensor& keys_item, const std::vector<double>& alpha_item,
                                         const std::vector<double>& alpha_scenario) {
  require(alpha_item.size() == keys_item.rows() && alpha_scenario.size() == keys_item.rows(),
          "pool_interest: weights do not align with keys");
  std::vector<double> out(keys_item.rank() == 2 ? keys_item.cols() : 0, 0.0);
  for (std::size_t k = 0; k < keys_item.rows(); ++k)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += alpha_item[k] * alpha_scenario[k] * keys_item(k, c);
  return out;
}

/// Pools one padded record with the extractor's mode.
inline std::vector<double> pool_ablation(const BehaviorExtractor& extractor, const Tensor& keys_item,
                                         const Tensor& keys_scenario, const Tensor& target_item,
                                         const Tensor& target_scenario, const std::vector<char>& mask) {
  Tape tape;
  const BehaviorSegments seg = detail::single_segment(mask);
  PooledInterest pooled = extractor.extract(tape.constant(keys_item), tape.constant(keys_scenario),
                                            tape.constant(target_item), tape.constant(target_scenario), seg);
  return detail::column_values(pooled.interest.value());
}

}  // namespace sarnet
