#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sarnet/config.hpp"
#include "sarnet/errors.hpp"
#include "sarnet/features.hpp"
#include "sarnet/numerics/ops.hpp"
#include "sarnet/numerics/random.hpp"
#include "sarnet/records.hpp"

namespace sarnet {

struct WorldConfig {
  std::size_t scenarios = 20;
  std::size_t scenario_types = 4;
  std::size_t users = 5000;
  std::size_t items = 2000;
  std::size_t categories = 10;
  std::size_t destinations = 20;
  std::size_t latent_dim = 8;
  double preference_scale = 1.0;
  double category_spread = 1.0;
  double quality_noise = 0.3;
  double topic_scale = 0.5;
  double affinity_scale = 0.5;
  double scenario_bias_spread = 1.5;  // width of the per-scenario log-odds offsets
  double scenario_interest_weight = 0.0;  // weight of per-scenario-type user preferences
  double traffic_zipf = 1.0;
  double target_ctr = 0.05;
  std::size_t days = 30;
  std::size_t impressions_per_day = 13334;
  std::size_t test_impressions = 50000;
  std::size_t candidates = 20;
  double tau = 2.0;
  std::size_t initial_history = 10;
  std::size_t max_behaviors = 50;

  static WorldConfig from_config(Config& c) {
    WorldConfig w;
    w.scenarios = c.count("world.scenarios", w.scenarios);
    w.scenario_types = c.count("world.scenario_types", w.scenario_types);
    w.users = c.count("world.users", w.users);
    w.items = c.count("world.items", w.items);
    w.categories = c.count("world.categories", w.categories);
    w.destinations = c.count("world.destinations", w.destinations);
    w.latent_dim = c.count("world.latent_dim", w.latent_dim);
    w.preference_scale = c.num("world.preference_scale", w.preference_scale);
    w.category_spread = c.num("world.category_spread", w.category_spread);
    w.quality_noise = c.num("world.quality_noise", w.quality_noise);
    w.topic_scale = c.num("world.topic_scale", w.topic_scale);
    w.affinity_scale = c.num("world.affinity_scale", w.affinity_scale);
    w.scenario_bias_spread = c.num("world.scenario_bias_spread", w.scenario_bias_spread);
    w.scenario_interest_weight = c.num("world.scenario_interest_weight", w.scenario_interest_weight);
    w.traffic_zipf = c.num("world.traffic_zipf", w.traffic_zipf);
    w.target_ctr = c.num("world.target_ctr", w.target_ctr);
    w.days = c.count("world.days", w.days);
    w.impressions_per_day = c.count("world.impressions_per_day", w.impressions_per_day);
    w.test_impressions = c.count("world.test_impressions", w.test_impressions);
    w.candidates = c.count("world.candidates", w.candidates);
    w.tau = c.num("world.tau", w.tau);
    w.initial_history = c.count("world.initial_history", w.initial_history);
    w.max_behaviors = c.count("world.max_behaviors", w.max_behaviors);
    return w;
  }
};

struct PolicyConfig {
  double boost = 5.0;
  double boost_fraction = 0.1;  // share of items boosted in each scenario
  std::size_t first_day = 0;
  std::int64_t last_day = -1;  // -1: through the final training day

  static PolicyConfig from_config(Config& c) {
    PolicyConfig p;
    p.boost = c.num("policy.boost", p.boost);
    p.boost_fraction = c.num("policy.boost_fraction", p.boost_fraction);
    p.first_day = c.count("policy.first_day", p.first_day);
    p.last_day = c.integer("policy.last_day", p.last_day);
    return p;
  }

  bool active(std::size_t day) const {
    return day >= first_day && (last_day < 0 || static_cast<std::int64_t>(day) <= last_day);
  }
};

/// Ground truth of the synthetic world.
struct ScenarioWorld {
  WorldConfig config;
  std::uint64_t seed = 0;
  std::vector<double> shares;             // S
  std::vector<RawId> scenario_type;       // S
  std::vector<double> scenario_bias;      // S
  std::vector<std::vector<double>> topic;  // S x K
  std::vector<std::vector<double>> preference;            // U x K
  std::vector<std::vector<std::vector<double>>> type_preference;  // U x T x K
  std::vector<std::vector<double>> affinity;              // U x S
  std::vector<std::vector<double>> quality;               // I x K
  std::vector<RawId> item_category;       // I
  std::vector<RawId> item_destination;    // I
  double offset = 0.0;

  double logit(std::size_t u, std::size_t i, std::size_t s) const {
    const auto& q = quality[i];
    const auto& tp = type_preference[u][static_cast<std::size_t>(scenario_type[s])];
    const double lambda = config.scenario_interest_weight;
    double z = affinity[u][s] + scenario_bias[s] + offset;
    for (std::size_t k = 0; k < q.size(); ++k) z += (preference[u][k] + lambda * tp[k] + topic[s][k]) * q[k];
    return z;
  }
  double ctr(std::size_t u, std::size_t i, std::size_t s) const { return logistic(logit(u, i, s)); }
};

namespace detail {

inline std::vector<double> gaussian_vector(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal() * scale;
  return v;
}

}  // namespace detail

struct Impression {
  std::size_t item = 0;
  int label = 0;
};

class BoostedPairs {
 public:
  BoostedPairs() = default;
  BoostedPairs(const ScenarioWorld& world, double fraction, std::uint64_t seed) {
    require(fraction >= 0.0 && fraction <= 1.0, "boost fraction must lie in [0, 1]");
    Rng rng = Rng(seed).fork(0xB0057);
    const std::size_t per = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(world.config.items)));
    sets_.resize(world.config.scenarios);
    for (std::size_t s = 0; s < world.config.scenarios; ++s) {
      std::vector<std::size_t> items(world.config.items);
      for (std::size_t i = 0; i < items.size(); ++i) items[i] = i;
      rng.shuffle(items);
      sets_[s].insert(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(per));
    }
  }
  bool contains(std::size_t s, std::size_t i) const { return s < sets_.size() && sets_[s].contains(i); }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& s : sets_) n += s.size();
    return n;
  }
  /// `scenario_id<TAB>item_id`, sorted.
  std::string to_text() const {
    std::ostringstream out;
    for (std::size_t s = 0; s < sets_.size(); ++s)
      for (std::size_t i : sets_[s]) out << s << '\t' << i << '\n';
    return out.str();
  }

 private:
  std::vector<std::set<std::size_t>> sets_;
};

inline std::set<std::pair<RawId, RawId>> parse_policy_pairs(std::string_view text) {
  std::set<std::pair<RawId, RawId>> out;
  for (std::string_view line : detail::split(text, '\n')) {
    if (line.empty()) continue;
    const auto parts = detail::split(line, '\t');
    if (parts.size() != 2) throw DataError("policy line '" + std::string(line) + "' is not scenario/item");
    out.emplace(detail::parse_int(parts[0], "scenario_id"), detail::parse_int(parts[1], "item_id"));
  }
  return out;
}

/// One impression decision: candidate items drawn uniformly, one exposed with
/// probability proportional to ctr^tau (times the boost for boosted pairs),
/// then a Bernoulli click. The number of random draws does not depend on the boost.
inline Impression draw_impression(const ScenarioWorld& world, std::size_t u, std::size_t s, Rng& rng,
                                  const BoostedPairs* boosted, double boost, std::vector<double>& scratch_ctr,
                                  std::vector<double>& scratch_w, std::vector<std::size_t>& scratch_items) {
  const std::size_t c = world.config.candidates;
  scratch_items.resize(c);
  scratch_ctr.resize(c);
  scratch_w.resize(c);
  for (std::size_t j = 0; j < c; ++j) {
    scratch_items[j] = rng.index(world.config.items);
    scratch_ctr[j] = world.ctr(u, scratch_items[j], s);
    double w = world.config.tau == 0.0 ? 1.0 : std::pow(scratch_ctr[j], world.config.tau);
    if (boosted && boosted->contains(s, scratch_items[j])) w *= boost;
    scratch_w[j] = w;
  }
  const std::size_t pick = rng.categorical(scratch_w);
  Impression imp;
  imp.item = scratch_items[pick];
  imp.label = rng.bernoulli(scratch_ctr[pick]) ? 1 : 0;
  return imp;
}

inline std::size_t draw_scenario(const ScenarioWorld& world, Rng& rng) { return rng.categorical(world.shares); }

/// Mean clicked-probability of logged impressions under the unboosted policy,
/// estimated on a fixed stream so it is a deterministic function of the offset.
inline double realized_ctr(const ScenarioWorld& world, std::size_t samples, std::uint64_t stream_seed,
                           std::vector<double>* per_scenario = nullptr) {
  Rng rng(stream_seed);
  std::vector<double> sc, sw;
  std::vector<std::size_t> si;
  std::vector<double> sums(world.config.scenarios, 0.0), counts(world.config.scenarios, 0.0);
  double total = 0.0;
  const std::size_t c = world.config.candidates;
  for (std::size_t n = 0; n < samples; ++n) {
    const std::size_t s = draw_scenario(world, rng);
    const std::size_t u = rng.index(world.config.users);
    si.resize(c);
    sc.resize(c);
    sw.resize(c);
    for (std::size_t j = 0; j < c; ++j) {
      si[j] = rng.index(world.config.items);
      sc[j] = world.ctr(u, si[j], s);
      sw[j] = world.config.tau == 0.0 ? 1.0 : std::pow(sc[j], world.config.tau);
    }
    const double p = sc[rng.categorical(sw)];
    total += p;
    sums[s] += p;
    counts[s] += 1.0;
  }
  if (per_scenario) {
    per_scenario->assign(world.config.scenarios, 0.0);
    for (std::size_t s = 0; s < sums.size(); ++s) (*per_scenario)[s] = counts[s] > 0 ? sums[s] / counts[s] : 0.0;
  }
  return total / static_cast<double>(samples);
}

inline ScenarioWorld build_world(const WorldConfig& cfg, std::uint64_t seed) {
  require(cfg.scenarios >= 2 && cfg.users >= 1 && cfg.items >= 2, "world needs S >= 2, U >= 1 and I >= 2");
  require(cfg.categories >= 1 && cfg.destinations >= 1 && cfg.latent_dim >= 1 && cfg.scenario_types >= 1,
          "world needs at least one category, destination, scenario type and latent dimension");
  require(cfg.candidates >= 1, "world needs at least one exposure candidate");
  require(cfg.target_ctr > 0.0 && cfg.target_ctr < 1.0, "target CTR must lie in (0, 1)");
  ScenarioWorld w;
  w.config = cfg;
  w.seed = seed;
  Rng root(seed);
  const std::size_t K = cfg.latent_dim, S = cfg.scenarios, T = cfg.scenario_types;

  Rng scen = root.fork(1);
  std::vector<std::size_t> rank(S);
  for (std::size_t s = 0; s < S; ++s) rank[s] = s;
  scen.shuffle(rank);
  double share_total = 0.0;
  w.shares.resize(S);
  for (std::size_t s = 0; s < S; ++s) share_total += w.shares[s] = std::pow(1.0 + static_cast<double>(rank[s]), -cfg.traffic_zipf);
  for (double& x : w.shares) x /= share_total;
  std::vector<std::size_t> bias_rank(S);
  for (std::size_t s = 0; s < S; ++s) bias_rank[s] = s;
  scen.shuffle(bias_rank);
  w.scenario_bias.resize(S);
  for (std::size_t s = 0; s < S; ++s)
    w.scenario_bias[s] = cfg.scenario_bias_spread * (static_cast<double>(bias_rank[s]) / static_cast<double>(S - 1) - 0.5);
  w.scenario_type.resize(S);
  for (std::size_t s = 0; s < S; ++s) w.scenario_type[s] = static_cast<RawId>(s % T);
  scen.shuffle(w.scenario_type);
  for (std::size_t s = 0; s < S; ++s)
    w.topic.push_back(detail::gaussian_vector(scen, K, cfg.topic_scale / std::sqrt(static_cast<double>(K))));

  Rng users = root.fork(2);
  const double pref_sd = cfg.preference_scale / std::sqrt(static_cast<double>(K));
  for (std::size_t u = 0; u < cfg.users; ++u) {
    w.preference.push_back(detail::gaussian_vector(users, K, pref_sd));
    std::vector<std::vector<double>> tp;
    for (std::size_t t = 0; t < T; ++t) tp.push_back(detail::gaussian_vector(users, K, pref_sd));
    w.type_preference.push_back(std::move(tp));
    w.affinity.push_back(detail::gaussian_vector(users, S, cfg.affinity_scale));
  }

  Rng items = root.fork(3);
  std::vector<std::vector<double>> centroid;
  for (std::size_t c = 0; c < cfg.categories; ++c) centroid.push_back(detail::gaussian_vector(items, K, cfg.category_spread));
  for (std::size_t i = 0; i < cfg.items; ++i) {
    const std::size_t c = items.index(cfg.categories);
    auto q = detail::gaussian_vector(items, K, cfg.quality_noise);
    for (std::size_t k = 0; k < K; ++k) q[k] += centroid[c][k];
    w.quality.push_back(std::move(q));
    w.item_category.push_back(static_cast<RawId>(c));
    w.item_destination.push_back(static_cast<RawId>(items.index(cfg.destinations)));
  }

  // Global offset by bisection so the logged CTR hits the target.
  const std::uint64_t calib_seed = root.fork(4).next();
  double lo = -20.0, hi = 10.0;
  for (int it = 0; it < 50; ++it) {
    w.offset = 0.5 * (lo + hi);
    (realized_ctr(w, 4000, calib_seed) < cfg.target_ctr ? lo : hi) = w.offset;
  }
  w.offset = 0.5 * (lo + hi);
  return w;
}

struct HistoryEvent {
  std::size_t item = 0;
  std::size_t scenario = 0;
  std::int64_t timestamp = 0;
};

/// Stateful log simulator: user histories grow with clicks across days.
class Simulator {
 public:
  Simulator(const ScenarioWorld& world, const PolicyConfig& policy, std::uint64_t seed)
      : world_(world), policy_(policy), boosted_(world, policy.boost_fraction, seed), rng_(Rng(seed).fork(5)) {
    require(policy.boost >= 1.0, "boost factor must be at least 1");
    histories_.resize(world.config.users);
    burn_in();
  }

  const BoostedPairs& boosted() const { return boosted_; }
  std::int64_t ticks_per_day() const { return static_cast<std::int64_t>(world_.config.impressions_per_day); }
  double ticks_per_hour() const { return static_cast<double>(ticks_per_day()) / 24.0; }

  std::vector<InteractionRecord> day(std::size_t d) {
    const double boost = policy_.active(d) ? policy_.boost : 1.0;
    return run(static_cast<std::int64_t>(d) * ticks_per_day(), world_.config.impressions_per_day, boost, true);
  }

  /// Held-out impressions after all training days: no boost, histories frozen.
  std::vector<InteractionRecord> test(std::int64_t start_tick) {
    Rng saved = rng_;
    rng_ = rng_.fork(0x7E57);
    auto out = run(start_tick, world_.config.test_impressions, 1.0, false);
    rng_ = saved;
    return out;
  }

 private:
  std::vector<InteractionRecord> run(std::int64_t start, std::size_t n, double boost, bool grow) {
    std::vector<InteractionRecord> out;
    out.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
      const std::int64_t ts = start + static_cast<std::int64_t>(t);
      const std::size_t s = draw_scenario(world_, rng_);
      const std::size_t u = rng_.index(world_.config.users);
      const Impression imp = draw_impression(world_, u, s, rng_, &boosted_, boost, sc_, sw_, si_);
      InteractionRecord r;
      r.label = imp.label;
      r.scenario_id = static_cast<RawId>(s);
      r.user_id = static_cast<RawId>(u);
      r.item_id = static_cast<RawId>(imp.item);
      r.category_id = world_.item_category[imp.item];
      r.destination_id = world_.item_destination[imp.item];
      r.timestamp = ts;
      const auto& h = histories_[u];
      const std::size_t from = h.size() > world_.config.max_behaviors ? h.size() - world_.config.max_behaviors : 0;
      for (std::size_t k = from; k < h.size(); ++k) {
        const auto& e = h[k];
        r.behaviors.push_back({static_cast<RawId>(e.item), world_.item_category[e.item], world_.item_destination[e.item],
                               static_cast<RawId>(e.scenario), world_.scenario_type[e.scenario],
                               time_bucket(ts - e.timestamp, ticks_per_hour())});
      }
      if (grow && imp.label == 1) histories_[u].push_back({imp.item, s, ts});
      out.push_back(std::move(r));
    }
    return out;
  }

  // Clicks sampled before day 0 so histories are not empty at the start.
  void burn_in() {
    const std::size_t h = world_.config.initial_history;
    if (h == 0) return;
    Rng rng = rng_.fork(0xB1);
    const std::int64_t gap = std::max<std::int64_t>(1, ticks_per_day() / static_cast<std::int64_t>(h));
    for (std::size_t u = 0; u < world_.config.users; ++u) {
      std::size_t got = 0;
      for (std::size_t attempt = 0; attempt < 400 * h && got < h; ++attempt) {
        const std::size_t s = draw_scenario(world_, rng);
        const Impression imp = draw_impression(world_, u, s, rng, nullptr, 1.0, sc_, sw_, si_);
        if (imp.label == 1) {
          histories_[u].push_back({imp.item, s, -static_cast<std::int64_t>(h - got) * gap});
          ++got;
        }
      }
    }
  }

  const ScenarioWorld& world_;
  PolicyConfig policy_;
  BoostedPairs boosted_;
  Rng rng_;
  std::vector<std::vector<HistoryEvent>> histories_;
  std::vector<double> sc_, sw_;
  std::vector<std::size_t> si_;
};

struct GeneratedData {
  std::vector<InteractionRecord> train;
  std::vector<InteractionRecord> test;
  std::string policy_text;
  std::string manifest;
};

inline std::string world_manifest(const ScenarioWorld& w, const PolicyConfig& p, std::size_t boosted_pairs) {
  std::ostringstream out;
  auto f = [](double x) { return Config::format(x); };
  out << "[world]\n";
  out << "seed = " << w.seed << '\n';
  const WorldConfig& c = w.config;
  out << "scenarios = " << c.scenarios << "\nscenario_types = " << c.scenario_types << "\nusers = " << c.users
      << "\nitems = " << c.items << "\ncategories = " << c.categories << "\ndestinations = " << c.destinations
      << "\nlatent_dim = " << c.latent_dim << "\ndays = " << c.days << "\nimpressions_per_day = "
      << c.impressions_per_day << "\ntest_impressions = " << c.test_impressions << "\ncandidates = " << c.candidates
      << "\ntau = " << f(c.tau) << "\ntarget_ctr = " << f(c.target_ctr) << "\nscenario_interest_weight = "
      << f(c.scenario_interest_weight) << "\noffset = " << f(w.offset) << '\n';
  std::vector<double> per;
  realized_ctr(w, 20000, 0x5EED, &per);
  for (std::size_t s = 0; s < c.scenarios; ++s)
    out << "scenario." << s << " = share " << f(w.shares[s]) << " type " << w.scenario_type[s] << " bias "
        << f(w.scenario_bias[s]) << " mean_ctr " << f(per[s]) << '\n';
  out << "[policy]\n";
  out << "boost = " << f(p.boost) << "\nboost_fraction = " << f(p.boost_fraction) << "\nfirst_day = " << p.first_day
      << "\nlast_day = " << p.last_day << "\nboosted_pairs = " << boosted_pairs << '\n';
  return out.str();
}

/// Simulates every training day, then the unbiased test split.
inline GeneratedData generate(const WorldConfig& wc, const PolicyConfig& pc, std::uint64_t seed) {
  require(wc.days >= 1, "generation needs at least one training day");
  const ScenarioWorld world = build_world(wc, seed);
  Simulator sim(world, pc, seed);
  GeneratedData data;
  for (std::size_t d = 0; d < wc.days; ++d) {
    auto day = sim.day(d);
    data.train.insert(data.train.end(), std::make_move_iterator(day.begin()), std::make_move_iterator(day.end()));
  }
  data.test = sim.test(static_cast<std::int64_t>(wc.days) * sim.ticks_per_day());
  data.policy_text = sim.boosted().to_text();
  data.manifest = world_manifest(world, pc, sim.boosted().size());
  return data;
}

}  // namespace sarnet
