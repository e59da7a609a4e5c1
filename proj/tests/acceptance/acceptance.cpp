// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--config-dir DIR] [criterion numbers...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sarnet/datagen.hpp"
#include "sarnet/training.hpp"
#include "support/finite_difference.hpp"
#include "support/tiny_world.hpp"

using namespace sarnet;
using testing::bit_identical;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string config_dir = SARNET_CONFIG_DIR;

std::string num(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.embedding_dim = 3;
  c.attention_hidden = 4;
  c.expert_hidden = 4;
  c.specific_experts = 1;
  c.shared_experts = 2;
  c.max_behaviors = 4;
  c.init_scale = 0.3;
  return c;
}

// A tiny model trained for a few steps so batch-norm running statistics and
// all weights are away from their initial values.
TrainedModel trained_tiny_model(const std::vector<InteractionRecord>& records, FairnessTable& table) {
  Rng rng(41);
  std::map<PairKey, double> fc;
  for (const auto& r : records) fc[{r.scenario_id, r.item_id}] = rng.uniform(0.2, 5.0);
  table = FairnessTable(fc);
  TrainConfig cfg;
  cfg.model = tiny_model();
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.adam.learning_rate = 0.01;
  TrainedModel m = train_model(records, cfg, table, 7);
  testing::randomize_bias_nets(*m.store, rng);
  return m;
}

Outcome criterion1() {
  const double a = rela_impr(0.6997, 0.6925);
  const double b = rela_impr(0.6997, 0.6911);
  return {std::abs(a - 3.741) <= 1e-3 && std::abs(b - 4.500) <= 1e-3, num(a, 7) + ", " + num(b, 7)};
}

double auc_by_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return good / pairs;
}

Outcome criterion2() {
  Rng rng(2);
  std::size_t mismatches = 0, ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.index(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    std::set<double> distinct;
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = static_cast<double>(rng.index(1 + rng.index(60))) / 16.0;
      y[k] = rng.bernoulli(0.35) ? 1 : 0;
      distinct.insert(s[k]);
    }
    y[0] = 1;
    y[n - 1] = 0;
    ties += distinct.size() < n;
    if (auc(s, y) != auc_by_pairs(s, y)) ++mismatches;
  }
  return {mismatches == 0, "1000 instances, " + std::to_string(ties) + " with ties, " + std::to_string(mismatches) +
                               " mismatches"};
}

Outcome criterion3() {
  const auto records = testing::tiny_records(10, 2, 4, 11);
  TrainedModel m = TrainedModel::create(FeatureVocab::build(records), tiny_model(), 11);
  auto encoded = m.encode(records);
  Rng rng(12);
  for (auto& e : encoded) e.fairness = rng.uniform(0.3, 3.0);
  testing::randomize_bias_nets(*m.store, rng);
  for (const char* name : {"transform.beta", "transform.gamma"})
    for (double& v : m.store->at(name).value.values()) v += rng.uniform(-0.3, 0.3);
  std::vector<const EncodedRecord*> ptrs;
  for (const auto& e : encoded) ptrs.push_back(&e);
  Tape tape;
  const PackedBatch b = m.net->pack(ptrs);
  const auto out = m.net->forward(tape, b, ForwardOptions{Mode::kTrain, true, false});
  Var loss = bias_adapting_loss(out.probability, b.labels, b.fairness);
  double worst = 0.0, worst_abs = 0.0;
  std::string worst_name;
  std::size_t groups = 0;
  for (std::size_t k = 0; k < m.store->size(); ++k) {
    const std::string& name = (*m.store)[k].name;
    const auto r = testing::finite_difference_check(tape, loss, *m.store, 1e-6, 0, name);
    if (r.checked == 0) continue;
    ++groups;
    worst_abs = std::max(worst_abs, r.max_absolute_error);
    if (r.max_relative_error >= worst) {
      worst = r.max_relative_error;
      worst_name = name;
    }
  }
  return {worst < 1e-4 && groups > 0,
          std::to_string(groups) + " parameter tensors, worst relative error " + num(worst, 3) + " (" + worst_name +
              "), worst absolute deviation " + num(worst_abs, 3)};
}

Outcome criterion4() {
  const auto w = fairness_ratios(ExposureTotals{{{1, 1}, {80, 40.0}}, {{1, 2}, {20, 20.0}}});
  bool ok = std::abs(w.at({1, 1}) - 5.0 / 6.0) <= 1e-15 && std::abs(w.at({1, 2}) - 5.0 / 3.0) <= 1e-15;
  ExposureStats single;
  for (double v : {0.12, 0.5, 0.77}) single.add(3, 9, v);
  single.add(4, 1, 0.3);
  for (const auto& [k, v] : fairness_ratios(single)) ok = ok && v == 1.0;
  Rng rng(4);
  std::size_t scale_fail = 0, mono_fail = 0;
  for (int trial = 0; trial < 500; ++trial) {
    ExposureTotals t;
    const std::size_t scenarios = 1 + rng.index(4);
    for (std::size_t s = 0; s < scenarios; ++s)
      for (std::size_t i = 0, n = 2 + rng.index(7); i < n; ++i) {
        const auto pv = static_cast<std::int64_t>(1 + rng.index(300));
        t[{static_cast<RawId>(s), static_cast<RawId>(i)}] = {pv, static_cast<double>(pv) * rng.uniform(0.01, 0.99)};
      }
    const auto base = fairness_ratios(t);
    ExposureTotals scaled = t;
    const double fs = rng.uniform(0.1, 10.0);
    const auto ps = static_cast<std::int64_t>(2 + rng.index(6));
    for (auto& [k, v] : scaled) v = {v.first * ps, v.second * fs};
    for (const auto& [k, v] : fairness_ratios(scaled))
      if (std::abs(v - base.at(k)) > 1e-12 * std::max(1.0, v)) ++scale_fail;
    auto it = t.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(rng.index(t.size())));
    const PairKey key = it->first;
    it->second.first += static_cast<std::int64_t>(1 + rng.index(100));
    if (!(fairness_ratios(t).at(key) < base.at(key))) ++mono_fail;
  }
  ok = ok && scale_fail == 0 && mono_fail == 0;
  return {ok, "w = " + num(w.at({1, 1}), 17) + ", " + num(w.at({1, 2}), 17) + "; 500 tables: " +
                  std::to_string(scale_fail) + " scale failures, " + std::to_string(mono_fail) +
                  " monotonicity failures"};
}

Outcome criterion5() {
  const auto records = testing::tiny_records(96, 2, 4, 5);
  FairnessTable table;
  TrainedModel m = trained_tiny_model(records, table);
  auto encoded = m.encode(records, &table);
  std::vector<const EncodedRecord*> ptrs;
  for (const auto& e : encoded) ptrs.push_back(&e);
  const auto serve = m.net->predict(ptrs, 32);
  Rng rng(55);
  std::size_t perturb_diff = 0;
  for (int round = 0; round < 5; ++round) {
    for (auto& e : encoded) e.fairness = std::exp(rng.uniform(-6.0, 6.0));
    const auto again = m.net->predict(ptrs, 32);
    for (std::size_t k = 0; k < serve.size(); ++k) perturb_diff += !bit_identical(serve[k], again[k]);
  }
  const ForwardOptions train_running{Mode::kTrain, false, false};
  const auto with_bias = m.net->predict(ptrs, 32, train_running);
  std::size_t bias_effect = 0;
  for (std::size_t k = 0; k < serve.size(); ++k) bias_effect += !bit_identical(serve[k], with_bias[k]);
  m.net->zero_bias_outputs();
  const auto train = m.net->predict(ptrs, 32, train_running);
  std::size_t zeroed_diff = 0;
  for (std::size_t k = 0; k < serve.size(); ++k) zeroed_diff += !bit_identical(serve[k], train[k]);
  return {perturb_diff == 0 && zeroed_diff == 0 && bias_effect > 0,
          std::to_string(perturb_diff) + " serve scores moved under fc perturbation, " + std::to_string(zeroed_diff) +
              " train/serve differences with zeroed bias outputs (" + std::to_string(bias_effect) +
              " differed before zeroing)"};
}

Outcome criterion6() {
  std::vector<std::string> failures;
  const auto records = testing::tiny_records(64, 2, 4, 6);
  FairnessTable table;
  TrainedModel m = trained_tiny_model(records, table);
  auto encoded = m.encode(records, &table);
  // Variable history lengths, including empty ones.
  for (std::size_t k = 0; k < encoded.size(); ++k) {
    encoded[k].behavior_item.resize(k % 5);
    encoded[k].behavior_context.resize(k % 5);
  }
  std::vector<const EncodedRecord*> ptrs;
  for (const auto& e : encoded) ptrs.push_back(&e);

  Tape tape;
  const PackedBatch b = m.net->pack(ptrs);
  const auto out = m.net->forward(tape, b, ForwardOptions::training());
  double gate_err = 0.0;
  for (const auto& g : out.groups) {
    const Tensor& w = g.gate_weights.value();
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) s += w(r, c);
      gate_err = std::max(gate_err, std::abs(s - 1.0));
    }
  }
  if (gate_err > 1e-6) failures.push_back("gate sums off by " + num(gate_err));

  double attn_err = 0.0;
  const auto& off = b.segments.offsets;
  for (const Var* alpha : {&*out.pooled.alpha_item, &*out.pooled.alpha_scenario})
    for (std::size_t s = 0; s + 1 < off.size(); ++s) {
      if (off[s + 1] == off[s]) continue;
      double sum = 0.0;
      for (std::size_t q = off[s]; q < off[s + 1]; ++q) sum += alpha->value()[q];
      attn_err = std::max(attn_err, std::abs(sum - 1.0));
    }
  if (attn_err > 1e-10) failures.push_back("attention sums off by " + num(attn_err));

  // Masked positions: changing padded keys changes neither values nor gradients.
  auto masked_run = [&](double pad) {
    ParameterStore store;
    Rng rng(61);
    BehaviorExtractor ex(store, AttentionMode::kDual, 4, 3, 8, rng, 0.5);
    Tensor items({6, 4}), ctx({6, 3}), ti({1, 4}), ts({1, 3}), probe({1, 4});
    for (Tensor* t : {&items, &ctx, &ti, &ts, &probe})
      for (double& v : t->values()) v = rng.uniform(-1, 1);
    for (std::size_t c = 0; c < 4; ++c) items(4, c) = items(5, c) = pad;
    for (std::size_t c = 0; c < 3; ++c) ctx(4, c) = ctx(5, c) = -pad;
    Tape t;
    BehaviorSegments seg;
    seg.append(6, 4);
    auto p = ex.extract(t.constant(items), t.constant(ctx), t.constant(ti), t.constant(ts), seg);
    Var loss = sum_all(mul(p.interest, t.constant(probe)));
    Gradients g = evaluate_with_gradients(t, loss, store);
    return std::make_pair(p.interest.value(), std::move(g));
  };
  const auto [va, ga] = masked_run(0.0);
  const auto [vb, gb] = masked_run(250.0);
  bool isolated = bit_identical(va, vb) && ga.size() == gb.size();
  for (std::size_t k = 0; isolated && k < ga.size(); ++k) isolated = bit_identical(ga[k], gb[k]);
  if (!isolated) failures.push_back("masked positions leak");

  // A fresh model has the identity transform.
  TrainedModel fresh = TrainedModel::create(m.vocab, tiny_model(), 3);
  Tape t2;
  const auto fo = fresh.net->forward(t2, fresh.net->pack(ptrs), ForwardOptions::serving());
  bool identity = true;
  for (const auto& g : fo.groups)
    for (std::size_t r = 0; r < g.rows.size(); ++r)
      for (std::size_t c = 0; c < fresh.net->width(); ++c)
        identity = identity && bit_identical(g.transformed.value()(r, c), fo.representation.value()(g.rows[r], c));
  if (!identity) failures.push_back("identity transform changed v");

  // Routing: a batch of scenario 0 leaves scenario 1's specific parameters untouched.
  std::vector<const EncodedRecord*> first;
  for (const auto* e : ptrs)
    if (e->scenario_index == 1) first.push_back(e);
  Tape t3;
  const PackedBatch b3 = m.net->pack(first);
  const auto o3 = m.net->forward(t3, b3, ForwardOptions::training());
  const Gradients g3 = evaluate_with_gradients(t3, bias_adapting_loss(o3.probability, b3.labels, b3.fairness), *m.store);
  std::size_t leaked = 0, checked = 0;
  for (std::size_t k = 0; k < g3.size(); ++k) {
    const std::string& name = g3.name(k);
    if (name.rfind("expert.s1.", 0) != 0 && name.rfind("gate.s1.", 0) != 0) continue;
    ++checked;
    for (double v : g3[k].values()) leaked += v != 0.0;
  }
  const Tensor& beta = g3[m.store->index_of(m.store->at("transform.beta"))];
  for (std::size_t c = 0; c < beta.cols(); ++c) leaked += beta(1, c) != 0.0;
  if (leaked || checked == 0) failures.push_back(std::to_string(leaked) + " nonzero cross-scenario gradients");

  std::string detail = "gate err " + num(gate_err, 3) + ", attention err " + num(attn_err, 3) +
                       ", masking/identity/routing checked over " + std::to_string(checked) + " routed tensors";
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

Config load_config(const std::string& name) {
  return Config::parse(read_text_file(config_dir + "/" + name), name);
}

struct Experiment {
  Config base;
  WorldConfig world;
  PolicyConfig policy;
  std::vector<std::uint64_t> seeds;
  std::map<std::uint64_t, ExperimentData> cache;

  explicit Experiment(const std::string& file) : base(load_config(file)) {
    Config c = base;
    world = WorldConfig::from_config(c);
    policy = PolicyConfig::from_config(c);
    const auto first = static_cast<std::uint64_t>(c.integer("seed", 1));
    for (std::size_t k = 0, n = c.count("ablate.seeds", 5); k < n; ++k) seeds.push_back(first + k);
  }

  std::vector<AblationRow> run(const std::string& suite, const std::set<std::string>& names) {
    std::vector<AblationVariant> variants;
    for (const auto& v : ablation_suite(suite))
      if (names.contains(v.name)) variants.push_back(v);
    auto data_for = [&](std::uint64_t seed) -> const ExperimentData& {
      auto it = cache.find(seed);
      if (it != cache.end()) return it->second;
      GeneratedData g = generate(world, policy, seed);
      ExperimentData d{std::move(g.train), std::move(g.test), parse_policy_pairs(g.policy_text),
                       static_cast<std::int64_t>(world.impressions_per_day)};
      return cache.emplace(seed, std::move(d)).first->second;
    };
    auto progress = [](const std::string& line) { std::fprintf(stderr, "  %s\n", line.c_str()); };
    return run_ablation(variants, base, data_for, seeds, progress);
  }
};

std::map<std::string, double> medians(const std::vector<AblationRow>& rows) {
  std::map<std::string, double> m;
  for (const auto& r : rows) m[r.name] = r.median_auc;
  return m;
}

std::map<std::string, double> debias_medians;
double debias_seconds = 0.0;

// Criteria 7 and 9 share one sweep on the same data.
void run_debias_sweep() {
  if (!debias_medians.empty()) return;
  const auto start = std::chrono::steady_clock::now();
  Experiment e("acceptance.conf");
  debias_medians = medians(e.run("bias", {"base", "sub-sampling-0.9", "sub-sampling-0.8", "sub-sampling-0.7",
                                          "sub-sampling-0.6", "sar-net"}));
  debias_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

Outcome criterion7() {
  run_debias_sweep();
  const double base = debias_medians.at("base"), full = debias_medians.at("sar-net");
  const bool in_time = debias_seconds <= 600.0;
  return {full - base >= 0.003 && in_time, "median AUC sar-net " + num(full) + " vs base " + num(base) + " (delta " +
                                               num(full - base, 3) + ", needs >= 0.003); sweep with criterion 9 took " +
                                               num(debias_seconds, 4) + " s"};
}

Outcome criterion8() {
  const auto start = std::chrono::steady_clock::now();
  Experiment e("attention.conf");
  const auto m = medians(e.run("attention", {"mean-pooling", "target-attention", "sar-net"}));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double full = m.at("sar-net"), target = m.at("target-attention"), mean = m.at("mean-pooling");
  const bool ok = full >= target && target >= mean && full - mean >= 0.002 && seconds <= 600.0;
  return {ok, "median AUC dual " + num(full) + ", target-only " + num(target) + ", mean " + num(mean) + " in " +
                  num(seconds, 4) + " s"};
}

Outcome criterion9() {
  run_debias_sweep();
  const std::vector<std::pair<double, std::string>> curve{{1.0, "base"},
                                                          {0.9, "sub-sampling-0.9"},
                                                          {0.8, "sub-sampling-0.8"},
                                                          {0.7, "sub-sampling-0.7"},
                                                          {0.6, "sub-sampling-0.6"}};
  bool monotone = true;
  std::string detail;
  for (std::size_t k = 0; k < curve.size(); ++k) {
    const double v = debias_medians.at(curve[k].second);
    if (k > 0 && v < debias_medians.at(curve[k - 1].second)) monotone = false;
    detail += (k ? ", " : "") + num(curve[k].first, 2) + ":" + num(v);
  }
  return {!monotone, "median AUC by ratio " + detail};
}

// Runs a small end-to-end pipeline and returns every artifact's bytes.
std::map<std::string, std::string> pipeline_artifacts(std::uint64_t seed) {
  Config c = load_config("smoke.conf");
  const WorldConfig world = WorldConfig::from_config(c);
  const PolicyConfig policy = PolicyConfig::from_config(c);
  const TrainConfig cfg = TrainConfig::from_config(c);
  const GeneratedData data = generate(world, policy, seed);
  std::map<std::string, std::string> out;
  std::string train_text;
  for (const auto& r : data.train) train_text += format_record(r) + '\n';
  out["train.tsv"] = train_text;
  out["world.manifest"] = data.manifest;
  const auto tpd = static_cast<std::int64_t>(world.impressions_per_day);
  const TwoPassResult boot = bootstrap_fairness(data.train, cfg, tpd, seed);
  out["stats.csv"] = boot.stats.to_text();
  out["fairness.csv"] = boot.table.to_text();
  TrainLog log;
  const TrainedModel m = train_model(data.train, cfg, boot.table, seed, &log);
  const auto ckpt = encode_checkpoint(snapshot(*m.store));
  out["model.ckpt"] = std::string(ckpt.begin(), ckpt.end());
  out["train.log"] = log.text();
  ScoredSet set;
  const auto scores = m.score(data.test);
  for (std::size_t k = 0; k < data.test.size(); ++k)
    set.add(scores[k], data.test[k].label, data.test[k].scenario_id, data.test[k].category_id);
  out["report.txt"] = evaluate_scores(set, 0.1).to_text();
  return out;
}

Outcome criterion10() {
  const auto a = pipeline_artifacts(17);
  const auto b = pipeline_artifacts(17);
  const auto other = pipeline_artifacts(18);
  std::size_t differing = 0;
  for (const auto& [name, bytes] : a) differing += b.at(name) != bytes;
  const bool seed_matters = other.at("model.ckpt") != a.at("model.ckpt");
  return {differing == 0 && seed_matters, std::to_string(a.size()) + " artifacts, " + std::to_string(differing) +
                                              " differ between same-seed runs; a different seed " +
                                              (seed_matters ? "changes" : "does not change") + " the checkpoint"};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;  // 0: budget checked inside the criterion
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int k = 1; k < argc; ++k) {
    if (std::strcmp(argv[k], "--config-dir") == 0 && k + 1 < argc) {
      config_dir = argv[++k];
      continue;
    }
    selected.insert(std::atoi(argv[k]));
  }
  const std::vector<Criterion> criteria{
      {1, "RelaImpr reproduction", 1, criterion1},
      {2, "AUC oracle equivalence", 10, criterion2},
      {3, "gradient correctness", 60, criterion3},
      {4, "fairness coefficient exactness", 10, criterion4},
      {5, "serving equivalence", 10, criterion5},
      {6, "structural invariants", 60, criterion6},
      {7, "debias efficacy", 0, criterion7},
      {8, "attention ablation ordering", 0, criterion8},
      {9, "sub-sampling baseline shape", 0, criterion9},
      {10, "reproducibility", 0, criterion10},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_seconds > 0 && seconds > c.budget_seconds) {
      o.pass = false;
      o.detail += "; over the " + num(c.budget_seconds) + " s budget";
    }
    std::printf("criterion %d (%s): %s [%.1f s] %s\n", c.id, c.name, o.pass ? "PASS" : "FAIL", seconds,
                o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
