#pragma once

// Seeded synthetic pools with planted structure: queries come from clusters, experts sit in
// cost tiers, and each (cluster, expert) pair has a success probability. Descriptors are
// planted directly; probe tensors whose footprints recover them can be generated separately.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "cscr/common.hpp"
#include "cscr/dataio.hpp"
#include "cscr/descriptors.hpp"

namespace cscr {

struct SynthConfig {
  std::size_t n_clusters = 4;
  std::size_t n_experts = 12;
  std::size_t n_train = 3000;
  std::size_t n_test = 1000;
  std::size_t embed_dim = 32;
  std::size_t descriptor_dim = 16;
  double noise_sigma = 0.1;
  std::vector<double> cost_tiers{1.0, 4.0, 16.0};
  Matrix competence;  // n_clusters x n_experts; empty means the default tiered layout
  bool anti_correlated = false;
  double descriptor_noise = 0.5;
  std::size_t perplexity_every = 0;  // every n-th expert is perplexity-kind; 0 = none
  std::uint64_t seed = 0;

  std::size_t tier_of(std::size_t expert) const { return expert * cost_tiers.size() / n_experts; }
  std::size_t tier_size(std::size_t tier) const {
    std::size_t n = 0;
    for (std::size_t m = 0; m < n_experts; ++m) n += tier_of(m) == tier;
    return n;
  }
  std::size_t slot_in_tier(std::size_t expert) const {
    std::size_t j = 0;
    for (std::size_t m = 0; m < expert; ++m) j += tier_of(m) == tier_of(expert);
    return j;
  }

  void validate() const {
    if (n_clusters == 0) throw ContractError("synthetic config needs at least one cluster");
    if (n_experts == 0) throw ContractError("synthetic config needs at least one expert");
    if (cost_tiers.empty()) throw ContractError("synthetic config needs at least one cost tier");
    if (cost_tiers.size() > n_experts) throw ContractError("more cost tiers than experts");
    if (embed_dim == 0 || descriptor_dim == 0) throw ContractError("dimensions must be at least 1");
    if (n_train + n_test == 0) throw ContractError("no queries requested");
    if (noise_sigma < 0.0) throw ContractError("noise_sigma must be >= 0");
    for (double c : cost_tiers)
      if (c < 0.0) throw ContractError("cost tiers must be non-negative");
    if (!competence.data.empty()) {
      if (competence.rows != n_clusters || competence.cols != n_experts)
        throw ContractError("competence must be n_clusters x n_experts");
      for (double p : competence.data)
        if (!(p >= 0.0 && p <= 1.0)) throw ContractError("competence entries must lie in [0,1]");
    }
  }
};

inline json to_json(const SynthConfig& c) {
  json j = {{"n_clusters", c.n_clusters},   {"n_experts", c.n_experts},
            {"n_train", c.n_train},         {"n_test", c.n_test},
            {"embed_dim", c.embed_dim},     {"descriptor_dim", c.descriptor_dim},
            {"noise_sigma", c.noise_sigma}, {"cost_tiers", c.cost_tiers},
            {"anti_correlated", c.anti_correlated}, {"descriptor_noise", c.descriptor_noise},
            {"perplexity_every", c.perplexity_every}, {"seed", c.seed}};
  if (!c.competence.data.empty()) j["competence"] = c.competence.data;
  return j;
}

// Cluster c is solvable only from tier floor(c*T/C) upward. Within a solvable tier the slot
// matching the cluster is a specialist (0.95); the rest get a tier-dependent base rate, so
// average competence rises with cost. Unsolvable tiers never succeed.
inline Matrix default_competence(const SynthConfig& cfg) {
  const std::size_t T = cfg.cost_tiers.size();
  Matrix comp(cfg.n_clusters, cfg.n_experts);
  for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
    const std::size_t difficulty = c * T / cfg.n_clusters;
    for (std::size_t m = 0; m < cfg.n_experts; ++m) {
      const std::size_t t = cfg.tier_of(m);
      if (t < difficulty) continue;
      const bool specialist = cfg.slot_in_tier(m) == c % cfg.tier_size(t);
      comp(c, m) = specialist ? 0.95 : 0.1 + 0.5 * double(t) / double(std::max<std::size_t>(T - 1, 1));
    }
  }
  return comp;
}

struct PlantedTruth {
  Matrix competence;
  std::vector<std::size_t> cluster;                // per query, dataset order
  std::vector<std::size_t> cheapest_competent;     // per cluster
  std::vector<std::vector<double>> centroids;      // per cluster, embedding space
};

struct SynthData {
  SynthConfig config;
  ExpertPool pool;
  std::vector<Descriptor> descriptors;
  std::vector<QueryRecord> queries;  // n_train train records, then n_test test records
  PlantedTruth truth;
};

namespace detail {

inline std::vector<double> gaussian_unit(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> v(dim);
  do {
    for (auto& x : v) x = n01(rng);
  } while (normalize_inplace(v) == 0.0);
  return v;
}

}  // namespace detail

inline SynthData generate(const SynthConfig& config) {
  config.validate();
  SynthData out;
  out.config = config;
  auto& cfg = out.config;
  if (cfg.competence.data.empty()) cfg.competence = default_competence(cfg);
  out.truth.competence = cfg.competence;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  const std::size_t T = cfg.cost_tiers.size();
  for (std::size_t m = 0; m < cfg.n_experts; ++m) {
    const std::size_t t = cfg.tier_of(m);
    Expert e;
    char buf[32];
    std::snprintf(buf, sizeof buf, "expert%02zu", m);
    e.id = buf;
    e.cost_raw = cfg.cost_tiers[cfg.anti_correlated ? T - 1 - t : t];
    e.kind = cfg.perplexity_every > 0 && (m + 1) % cfg.perplexity_every == 0 ? DescriptorKind::perplexity
                                                                              : DescriptorKind::logit;
    out.pool.experts.push_back(std::move(e));
  }

  for (std::size_t c = 0; c < cfg.n_clusters; ++c) out.truth.centroids.push_back(detail::gaussian_unit(cfg.embed_dim, rng));

  // Descriptor coordinates j belong to cluster j mod C; an expert loads each cluster's block
  // with its competence there, plus a non-negative expert-specific residual.
  for (std::size_t m = 0; m < cfg.n_experts; ++m) {
    std::vector<double> v(cfg.descriptor_dim, 0.0);
    std::vector<double> resid(cfg.descriptor_dim);
    for (auto& x : resid) x = std::abs(n01(rng));
    normalize_inplace(resid);
    for (std::size_t j = 0; j < cfg.descriptor_dim; ++j)
      v[j] = cfg.competence(j % cfg.n_clusters, m) + cfg.descriptor_noise * resid[j];
    if (normalize_inplace(v) == 0.0) v[m % cfg.descriptor_dim] = 1.0;
    out.descriptors.push_back({out.pool.experts[m].id, out.pool.experts[m].kind, std::move(v)});
  }

  for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
    std::size_t best = cfg.n_experts;
    for (std::size_t m = 0; m < cfg.n_experts; ++m) {
      if (cfg.competence(c, m) < 0.5) continue;
      if (best == cfg.n_experts) {
        best = m;
        continue;
      }
      const double cm = out.pool.experts[m].cost_raw, cb = out.pool.experts[best].cost_raw;
      if (cm < cb || (cm == cb && cfg.competence(c, m) > cfg.competence(c, best))) best = m;
    }
    out.truth.cheapest_competent.push_back(best);
  }

  const std::size_t total = cfg.n_train + cfg.n_test;
  std::uniform_int_distribution<std::size_t> pick_cluster(0, cfg.n_clusters - 1);
  for (std::size_t i = 0; i < total; ++i) {
    QueryRecord q;
    char buf[32];
    std::snprintf(buf, sizeof buf, "q%06zu", i);
    q.id = buf;
    q.split = i < cfg.n_train ? Split::train : Split::test;
    const std::size_t c = pick_cluster(rng);
    out.truth.cluster.push_back(c);
    q.embedding = out.truth.centroids[c];
    for (auto& x : q.embedding) x += cfg.noise_sigma * n01(rng);
    q.quality.resize(cfg.n_experts);
    for (std::size_t m = 0; m < cfg.n_experts; ++m) q.quality[m] = u01(rng) < cfg.competence(c, m) ? 1.0 : 0.0;
    out.queries.push_back(std::move(q));
  }
  return out;
}

// Logit probes whose footprints are proportional (in expectation) to the given non-negative
// descriptors. Tokens 0..D'-1 carry the descriptor shape; `extra_tokens` low-mass distractors
// follow so that basis selection has something to reject.
inline LogitProbeTensor synth_logit_probes(const std::vector<Descriptor>& descs, std::size_t n_probes,
                                           std::size_t n_steps, std::size_t extra_tokens, double noise,
                                           std::uint64_t seed) {
  if (descs.empty()) throw ContractError("no descriptors to probe");
  const std::size_t dim = descs.front().vector.size();
  LogitProbeTensor t;
  t.n_probes = n_probes;
  t.n_steps = n_steps;
  for (std::size_t v = 0; v < dim + extra_tokens; ++v) t.token_ids.push_back(static_cast<std::int64_t>(v));
  for (const auto& d : descs) {
    for (double x : d.vector)
      if (x < 0.0) throw ContractError("logit probes need non-negative descriptors");
    t.expert_ids.push_back(d.expert_id);
  }
  t.probs.assign(descs.size() * n_probes * n_steps * t.n_tokens(), 0.0f);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> top_mass(0.5, 0.7);
  const double distractor = 1e-3;
  for (std::size_t e = 0; e < descs.size(); ++e) {
    const auto& base = descs[e].vector;
    const double total = std::accumulate(base.begin(), base.end(), 0.0);
    for (std::size_t i = 0; i < n_probes; ++i)
      for (std::size_t s = 0; s < n_steps; ++s) {
        std::vector<double> p(dim);
        double sum = 0.0;
        for (std::size_t v = 0; v < dim; ++v) {
          p[v] = base[v] / total * std::exp(noise * n01(rng) - 0.5 * noise * noise);
          sum += p[v];
        }
        const double mass = top_mass(rng);
        for (std::size_t v = 0; v < dim; ++v) t.at(e, i, s, v) = static_cast<float>(p[v] / sum * mass);
        for (std::size_t v = dim; v < t.n_tokens(); ++v) t.at(e, i, s, v) = static_cast<float>(distractor);
      }
  }
  return t;
}

// Per-probe scores 3 + 2*d_i + noise: standardizing them recovers the standardized descriptor.
inline PerplexityTable synth_perplexity_table(const std::vector<Descriptor>& descs, double noise, std::uint64_t seed) {
  if (descs.empty()) throw ContractError("no descriptors to probe");
  PerplexityTable t;
  t.scores = Matrix(descs.size(), descs.front().vector.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t e = 0; e < descs.size(); ++e) {
    t.expert_ids.push_back(descs[e].expert_id);
    for (std::size_t i = 0; i < t.scores.cols; ++i)
      t.scores(e, i) = std::max(0.0, static_cast<double>(static_cast<float>(3.0 + 2.0 * descs[e].vector[i] + noise * n01(rng))));
  }
  return t;
}

inline json to_json(const PlantedTruth& t) {
  return json{{"competence", {{"rows", t.competence.rows}, {"cols", t.competence.cols}, {"data", t.competence.data}}},
              {"cluster", t.cluster},
              {"cheapest_competent", t.cheapest_competent}};
}

}  // namespace cscr
