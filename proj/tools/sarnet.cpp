#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sarnet/datagen.hpp"
#include "sarnet/training.hpp"

namespace fs = std::filesystem;
using namespace sarnet;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

// Every setting of a run. All keys are read up front, so config.resolved is
// complete for every subcommand and misspelled keys are rejected.
struct RunConfig {
  Config raw;
  std::uint64_t seed = 1;
  WorldConfig world;
  PolicyConfig policy;
  TrainConfig train;
  std::int64_t ticks_per_day = 0;
  double top_fraction = 0.1;
  std::size_t ablate_seeds = 5;
};

RunConfig resolve(const Common& common) {
  RunConfig r;
  if (!common.config_path.empty()) {
    std::string text;
    try {
      text = read_text_file(common.config_path);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    r.raw = Config::parse(text, common.config_path);
  }
  for (const auto& kv : common.overrides) r.raw.set_assignment(kv);
  if (common.seed) r.raw.set("seed", std::to_string(*common.seed));
  Config& c = r.raw;
  r.seed = static_cast<std::uint64_t>(c.integer("seed", 1));
  r.world = WorldConfig::from_config(c);
  r.policy = PolicyConfig::from_config(c);
  r.train = TrainConfig::from_config(c);
  r.ticks_per_day = static_cast<std::int64_t>(c.count("data.ticks_per_day", r.world.impressions_per_day));
  r.top_fraction = c.num("eval.top_fraction", r.top_fraction);
  r.ablate_seeds = c.count("ablate.seeds", r.ablate_seeds);
  if (r.ticks_per_day < 1) throw ConfigError("data.ticks_per_day must be positive");
  if (!(r.top_fraction > 0.0 && r.top_fraction <= 1.0)) throw ConfigError("eval.top_fraction must lie in (0, 1]");
  if (r.ablate_seeds < 1) throw ConfigError("ablate.seeds must be at least 1");
  c.check_consumed();
  return r;
}

fs::path prepare_dir(const std::string& dir, const RunConfig& rc) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
  write_text_file((fs::path(dir) / "config.resolved").string(), rc.raw.resolved());
  return fs::path(dir);
}

std::vector<InteractionRecord> load_records(const std::string& path) {
  auto records = read_records(path);
  if (records.empty()) throw DataError("'" + path + "' holds no records");
  return records;
}

TrainedModel load_model(const std::string& dir, const RunConfig& rc) {
  const fs::path d(dir);
  FeatureVocab vocab = FeatureVocab::from_text(read_text_file((d / "vocab.tsv").string()));
  vocab.load_scenario_types_text(read_text_file((d / "scenario_types.tsv").string()));
  TrainedModel m = TrainedModel::create(vocab, rc.train.model, rc.seed);
  load_checkpoint((d / "model.ckpt").string(), *m.store);
  return m;
}

void save_model(const TrainedModel& m, const fs::path& dir) {
  save_checkpoint((dir / "model.ckpt").string(), *m.store);
  write_text_file((dir / "vocab.tsv").string(), m.vocab.to_text());
  write_text_file((dir / "scenario_types.tsv").string(), m.vocab.scenario_types_text());
}

void log_line(const std::string& line) { std::cerr << line << '\n'; }

int cmd_generate(const RunConfig& rc, const std::string& out) {
  const fs::path dir = prepare_dir(out, rc);
  const GeneratedData data = generate(rc.world, rc.policy, rc.seed);
  write_records((dir / "train.tsv").string(), data.train);
  write_records((dir / "test.tsv").string(), data.test);
  write_text_file((dir / "world.manifest").string(), data.manifest);
  write_text_file((dir / "policy.tsv").string(), data.policy_text);
  std::map<RawId, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& r : data.train) ++counts[r.scenario_id].first;
  for (const auto& r : data.test) ++counts[r.scenario_id].second;
  std::printf("scenario\ttrain\ttest\n");
  for (const auto& [s, n] : counts) std::printf("%lld\t%zu\t%zu\n", static_cast<long long>(s), n.first, n.second);
  return 0;
}

int cmd_train(const RunConfig& rc, const std::string& train_path, const std::string& fc_path,
              const std::string& valid_path, const std::string& policy_path, const std::string& out) {
  const fs::path dir = prepare_dir(out, rc);
  auto train = load_records(train_path);
  const FairnessTable table = fc_path.empty() ? FairnessTable{} : FairnessTable::from_text(read_text_file(fc_path));
  if (rc.train.subsample_ratio < 1.0) {
    if (policy_path.empty()) throw ConfigError("train.subsample_ratio < 1 needs --policy with the intervened pairs");
    train = subsample_intervened(train, parse_policy_pairs(read_text_file(policy_path)), rc.train.subsample_ratio,
                                 rc.seed);
  }
  std::optional<std::vector<InteractionRecord>> valid;
  if (!valid_path.empty()) valid = load_records(valid_path);
  TrainLog log;
  const TrainedModel m = train_model(train, rc.train, table, rc.seed, &log, valid ? &*valid : nullptr, log_line);
  save_model(m, dir);
  write_text_file((dir / "train.log").string(), log.text());
  return 0;
}

int cmd_compute_fc(const RunConfig& rc, const std::string& model_dir, const std::string& logs_path,
                   std::optional<std::int64_t> day, const std::string& out) {
  const fs::path dir = prepare_dir(out, rc);
  const TrainedModel m = load_model(model_dir, rc);
  const auto logs = load_records(logs_path);
  const std::int64_t d = day ? *day : last_day(logs, rc.ticks_per_day);
  const auto rows = records_of_day(logs, d, rc.ticks_per_day);
  if (rows.empty()) throw DataError("no records on day " + std::to_string(d));
  const ExposureStats stats = accumulate_stats(m, rows);
  const FairnessTable table = compute_fairness(stats, rc.train.clip, m.vocab.scenario_ids());
  write_text_file((dir / "stats.csv").string(), stats.to_text());
  write_text_file((dir / "fairness.csv").string(), table.to_text());
  std::printf("day=%lld records=%zu pairs=%zu\n", static_cast<long long>(d), rows.size(), table.size());
  return 0;
}

ScoredSet scored_set(const std::vector<InteractionRecord>& records, const std::vector<double>& scores,
                     const std::string& policy_path) {
  ScoredSet set;
  for (std::size_t k = 0; k < records.size(); ++k)
    set.add(scores[k], records[k].label, records[k].scenario_id, records[k].category_id);
  if (!policy_path.empty()) {
    const auto pairs = parse_policy_pairs(read_text_file(policy_path));
    for (const auto& r : records) set.intervened.push_back(pairs.contains({r.scenario_id, r.item_id}) ? 1 : 0);
  }
  return set;
}

int cmd_evaluate(const RunConfig& rc, const std::string& model_dir, const std::string& test_path,
                 const std::string& base_report, const std::string& base_name, const std::string& policy_path,
                 const std::string& out) {
  const fs::path dir = prepare_dir(out, rc);
  const TrainedModel m = load_model(model_dir, rc);
  const auto test = load_records(test_path);
  const ScoredSet set = scored_set(test, m.score(test, rc.train.score_chunk), policy_path);
  MetricReport report = evaluate_scores(set, rc.top_fraction);
  if (!base_report.empty()) {
    if (!report.overall) throw DataError("overall AUC is undefined, RelaImpr cannot be computed");
    report.rela_impr[base_name] = rela_impr(*report.overall, read_overall_auc(read_text_file(base_report)));
  }
  write_text_file((dir / "report.txt").string(), report.to_text());
  write_text_file((dir / "categories.tsv").string(), report.category_table());
  std::printf("auc.overall=%s\n", report.overall ? format_metric(*report.overall).c_str() : "undefined");
  return 0;
}

int cmd_score(const RunConfig& rc, const std::string& model_dir, const std::string& input, bool dump_attention,
              const std::string& out) {
  const fs::path dir = prepare_dir(out, rc);
  TrainedModel m = load_model(model_dir, rc);
  const auto records = load_records(input);
  const auto encoded = m.encode(records);
  std::string scores_text, dump = "record_id\tposition\talpha_item\talpha_scenario\n";
  const std::size_t chunk = rc.train.score_chunk;
  for (std::size_t b = 0; b < encoded.size(); b += chunk) {
    const std::size_t e = std::min(encoded.size(), b + chunk);
    std::vector<const EncodedRecord*> part;
    for (std::size_t k = b; k < e; ++k) part.push_back(&encoded[k]);
    Tape tape;
    const PackedBatch packed = m.net->pack(part);
    const ModelOutput o = m.net->forward(tape, packed, ForwardOptions::serving());
    for (double p : o.probability.value().values()) scores_text += format_metric(p) + '\n';
    if (!dump_attention) continue;
    // Modes without separate attention nets report the pooling weight in both columns.
    const Tensor& ai = (o.pooled.alpha_item ? *o.pooled.alpha_item : o.pooled.weights).value();
    const Tensor& as = (o.pooled.alpha_scenario ? *o.pooled.alpha_scenario : o.pooled.weights).value();
    const auto& off = packed.segments.offsets;
    for (std::size_t s = 0; s + 1 < off.size(); ++s)
      for (std::size_t q = off[s]; q < off[s + 1]; ++q)
        dump += std::to_string(b + s) + '\t' + std::to_string(q - off[s]) + '\t' + format_metric(ai[q]) + '\t' +
                format_metric(as[q]) + '\n';
  }
  write_text_file((dir / "scores.txt").string(), scores_text);
  if (dump_attention) write_text_file((dir / "attention.tsv").string(), dump);
  return 0;
}

int cmd_ablate(const RunConfig& rc, const std::string& suite, const std::string& out) {
  const auto variants = ablation_suite(suite);
  const fs::path dir = prepare_dir(out, rc);
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < rc.ablate_seeds; ++k) seeds.push_back(rc.seed + k);
  std::map<std::uint64_t, ExperimentData> cache;
  auto data_for = [&](std::uint64_t seed) -> const ExperimentData& {
    auto it = cache.find(seed);
    if (it != cache.end()) return it->second;
    GeneratedData g = generate(rc.world, rc.policy, seed);
    ExperimentData d{std::move(g.train), std::move(g.test), parse_policy_pairs(g.policy_text),
                     static_cast<std::int64_t>(rc.world.impressions_per_day)};
    return cache.emplace(seed, std::move(d)).first->second;
  };
  const auto rows = run_ablation(variants, rc.raw, data_for, seeds, log_line);
  const std::string table = ablation_table(rows);
  write_text_file((dir / "ablation.tsv").string(), table);
  std::fputs(table.c_str(), stdout);
  return 0;
}

void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--config", common.config_path, "key = value config file");
  sub->add_option("--seed", common.seed, "seed override");
  sub->add_option("--set", common.overrides, "key=value override (repeatable)")->take_all();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scenario-aware ranking with debiased experts"};
  app.require_subcommand(1);
  Common common;
  std::string out, train_path, fc_path, valid_path, policy_path, model_dir, logs_path, test_path, base_report,
      base_name = "base", input, suite;
  std::optional<std::int64_t> day;
  bool dump_attention = false;

  auto* gen = app.add_subcommand("generate", "simulate train/test logs");
  add_common(gen, common);
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, common);
  train->add_option("--train", train_path, "training record file")->required();
  train->add_option("--fc", fc_path, "fairness table (default: all ones)");
  train->add_option("--valid", valid_path, "validation record file");
  train->add_option("--policy", policy_path, "intervened pairs, needed for sub-sampling");
  train->add_option("--out", out, "output directory")->required();

  auto* fc = app.add_subcommand("compute-fc", "fairness coefficients from one day of logs");
  add_common(fc, common);
  fc->add_option("--model", model_dir, "model directory")->required();
  fc->add_option("--logs", logs_path, "record file")->required();
  fc->add_option("--day", day, "day index (default: last day in the logs)");
  fc->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "AUC report on held-out records");
  add_common(eval, common);
  eval->add_option("--model", model_dir, "model directory")->required();
  eval->add_option("--test", test_path, "record file")->required();
  eval->add_option("--base", base_report, "report of a base model for RelaImpr");
  eval->add_option("--base-name", base_name, "label of the base model");
  eval->add_option("--policy", policy_path, "intervened pairs, excluded from the category report");
  eval->add_option("--out", out, "output directory")->required();

  auto* score = app.add_subcommand("score", "serve-mode scores for a record file");
  add_common(score, common);
  score->add_option("--model", model_dir, "model directory")->required();
  score->add_option("--input", input, "record file")->required();
  score->add_flag("--dump-attention", dump_attention, "write per-position attention weights");
  score->add_option("--out", out, "output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "ablation suite over seeds");
  add_common(ablate, common);
  ablate->add_option("--suite", suite, "attention, bias or transform")->required();
  ablate->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    const RunConfig rc = resolve(common);
    if (*gen) return cmd_generate(rc, out);
    if (*train) return cmd_train(rc, train_path, fc_path, valid_path, policy_path, out);
    if (*fc) return cmd_compute_fc(rc, model_dir, logs_path, day, out);
    if (*eval) return cmd_evaluate(rc, model_dir, test_path, base_report, base_name, policy_path, out);
    if (*score) return cmd_score(rc, model_dir, input, dump_attention, out);
    if (*ablate) return cmd_ablate(rc, suite, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
