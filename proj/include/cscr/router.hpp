#pragma once

// Routing policies. CSCR scores the retrieved top-k by similarity - lambda * cost; the
// baselines (oracle, random, pareto-random, thompson, fixed single expert) share the same
// decision record so the evaluation harness treats them uniformly. Costs are normalized.

#include <algorithm>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cscr/common.hpp"
#include "cscr/cs_infonce.hpp"
#include "cscr/dataio.hpp"
#include "cscr/encoder.hpp"
#include "cscr/flat_index.hpp"

namespace cscr {

enum class Policy { cscr, oracle, random, pareto_random, thompson, single };

inline std::string_view to_string(Policy p) {
  switch (p) {
    case Policy::cscr: return "cscr";
    case Policy::oracle: return "oracle";
    case Policy::random: return "random";
    case Policy::pareto_random: return "pareto_random";
    case Policy::thompson: return "thompson";
    case Policy::single: return "single";
  }
  return "?";
}

// Accepts '-' in place of '_'.
inline Policy parse_policy(std::string_view s) {
  std::string name(s);
  std::replace(name.begin(), name.end(), '-', '_');
  for (Policy p : {Policy::cscr, Policy::oracle, Policy::random, Policy::pareto_random, Policy::thompson, Policy::single})
    if (to_string(p) == name) return p;
  throw ContractError("unknown policy \"" + std::string(s) + "\"");
}

struct RoutingDecision {
  std::string query_id;
  std::size_t expert = 0;
  std::string expert_id;
  double similarity = 0.0;  // NaN for policies that never compute one
  double cost = 0.0;
  double score = 0.0;
  double quality = 0.0;  // observed quality of the chosen expert, when known
  Policy policy = Policy::cscr;
};

struct PolicyConfig {
  Policy policy = Policy::cscr;
  double lambda = 0.0;
  std::size_t k = 4;
  std::uint64_t seed = 0;
  bool literal_argmin = false;  // score = sim + lambda*cost, minimized (printed form of the rule)
  double lambda_max = 1.0;      // maps lambda onto the pareto-random budget
  std::size_t single_expert = 0;

  void validate() const {
    if (k < 1) throw ContractError("k must be >= 1");
    if (lambda < 0.0) throw ContractError("lambda must be >= 0");
    if (!(lambda_max > 0.0)) throw ContractError("lambda_max must be > 0");
  }
};

// Among the retrieved neighbours pick the best score; ties go to lower cost, then lower index.
inline RoutingDecision select_among(const std::vector<Neighbor>& cands, std::span<const double> cost, double lambda,
                                    bool literal_argmin = false) {
  const Neighbor* best = nullptr;
  double best_score = 0.0;
  for (const auto& n : cands) {
    const double c = cost[n.index];
    // Normalize to "higher is better" for the comparison.
    const double s = literal_argmin ? -(n.similarity + lambda * c) : n.similarity - lambda * c;
    bool better = best == nullptr || s > best_score;
    if (!better && s == best_score) {
      const double bc = cost[best->index];
      better = c < bc || (c == bc && n.index < best->index);
    }
    if (better) {
      best = &n;
      best_score = s;
    }
  }
  RoutingDecision d;
  d.expert = best->index;
  d.expert_id = best->expert_id;
  d.similarity = best->similarity;
  d.cost = cost[best->index];
  d.score = literal_argmin ? -best_score : best_score;
  d.policy = Policy::cscr;
  return d;
}

inline RoutingDecision route_cscr_q(const FlatIndex& index, std::span<const double> q, std::span<const double> cost,
                                    double lambda, std::size_t k, bool literal_argmin = false) {
  if (cost.size() != index.size()) throw ContractError("cost vector does not match index size");
  return select_among(index.top_k(q, k), cost, lambda, literal_argmin);
}

inline RoutingDecision route_cscr(const FlatIndex& index, const MlpHead& head, std::span<const double> x,
                                  std::span<const double> cost, double lambda, std::size_t k,
                                  bool literal_argmin = false) {
  return route_cscr_q(index, forward(head, x), cost, lambda, k, literal_argmin);
}

// Cheapest expert clearing the threshold; otherwise the cheapest among the best-quality experts.
inline RoutingDecision route_oracle(std::span<const double> quality, std::span<const double> cost, double threshold) {
  std::optional<std::size_t> pick;
  for (std::size_t m = 0; m < quality.size(); ++m)
    if (is_positive(quality[m], threshold) && (!pick || cost[m] < cost[*pick])) pick = m;
  if (!pick) {
    const double best = *std::max_element(quality.begin(), quality.end());
    for (std::size_t m = 0; m < quality.size(); ++m)
      if (quality[m] == best && (!pick || cost[m] < cost[*pick])) pick = m;
  }
  RoutingDecision d;
  d.expert = *pick;
  d.similarity = NAN;
  d.cost = cost[*pick];
  d.score = quality[*pick];
  d.quality = quality[*pick];
  d.policy = Policy::oracle;
  return d;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline RoutingDecision route_random(std::size_t M, std::span<const double> cost, std::mt19937_64& rng) {
  RoutingDecision d;
  d.expert = uniform_index(rng, M);
  d.similarity = NAN;
  d.cost = cost[d.expert];
  d.score = 0.0;
  d.policy = Policy::random;
  return d;
}

// Experts not dominated in (lower cost, higher mean quality). Returned ascending by cost, then index.
inline std::vector<std::size_t> pareto_frontier(std::span<const double> cost, std::span<const double> mean_quality) {
  std::vector<std::size_t> front;
  for (std::size_t i = 0; i < cost.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < cost.size() && !dominated; ++j)
      dominated = j != i && cost[j] <= cost[i] && mean_quality[j] >= mean_quality[i] &&
                  (cost[j] < cost[i] || mean_quality[j] > mean_quality[i]);
    if (!dominated) front.push_back(i);
  }
  std::stable_sort(front.begin(), front.end(), [&](std::size_t a, std::size_t b) { return cost[a] < cost[b]; });
  return front;
}

// Budget interpolates linearly from the most expensive frontier cost (lambda = 0) down to the
// cheapest frontier cost (lambda >= lambda_max).
inline double pareto_budget(const std::vector<std::size_t>& front, std::span<const double> cost, double lambda,
                            double lambda_max) {
  const double lo = cost[front.front()];
  const double hi = cost[front.back()];
  const double t = std::clamp(lambda / lambda_max, 0.0, 1.0);
  return (1.0 - t) * hi + t * lo;
}

inline RoutingDecision route_pareto_random(const std::vector<std::size_t>& front, std::span<const double> cost,
                                           double lambda, double lambda_max, std::mt19937_64& rng) {
  const double budget = pareto_budget(front, cost, lambda, lambda_max);
  std::vector<std::size_t> allowed;
  for (std::size_t m : front)
    if (cost[m] <= budget) allowed.push_back(m);
  if (allowed.empty()) allowed.push_back(front.front());
  RoutingDecision d;
  d.expert = allowed[uniform_index(rng, allowed.size())];
  d.similarity = NAN;
  d.cost = cost[d.expert];
  d.score = budget;
  d.policy = Policy::pareto_random;
  return d;
}

// Per-arm Beta(alpha, beta) posteriors over binary success.
struct ThompsonState {
  std::vector<double> alpha;
  std::vector<double> beta;

  explicit ThompsonState(std::size_t M = 0) : alpha(M, 1.0), beta(M, 1.0) {}
};

inline double sample_beta(double a, double b, std::mt19937_64& rng) {
  const double x = std::gamma_distribution<double>(a, 1.0)(rng);
  const double y = std::gamma_distribution<double>(b, 1.0)(rng);
  return x / (x + y);
}

inline RoutingDecision route_thompson(const ThompsonState& state, std::span<const double> cost, double lambda,
                                      std::mt19937_64& rng) {
  std::size_t best = 0;
  double best_score = -INFINITY;
  for (std::size_t m = 0; m < state.alpha.size(); ++m) {
    const double s = sample_beta(state.alpha[m], state.beta[m], rng) - lambda * cost[m];
    if (s > best_score) {
      best = m;
      best_score = s;
    }
  }
  RoutingDecision d;
  d.expert = best;
  d.similarity = NAN;
  d.cost = cost[best];
  d.score = best_score;
  d.policy = Policy::thompson;
  return d;
}

inline void update_thompson(ThompsonState& state, std::size_t arm, bool success) {
  if (success)
    state.alpha[arm] += 1.0;
  else
    state.beta[arm] += 1.0;
}

// Everything a policy may consult. Pointers are non-owning and may be null for policies that
// do not need them.
struct RouterContext {
  const FlatIndex* index = nullptr;
  const MlpHead* head = nullptr;
  std::vector<std::string> expert_ids;
  std::vector<double> cost;                // normalized, index order
  std::vector<double> train_mean_quality;  // pareto-random only
  double theta_pos = 0.5;
  ThresholdMode threshold_mode = ThresholdMode::absolute;

  double threshold(std::span<const double> quality) const {
    return positive_threshold(quality, theta_pos, threshold_mode);
  }
};

// Mean training quality per expert.
inline std::vector<double> mean_quality(const std::vector<QueryRecord>& queries, std::size_t M) {
  std::vector<double> out(M, 0.0);
  if (queries.empty()) return out;
  for (const auto& q : queries)
    for (std::size_t m = 0; m < M; ++m) out[m] += q.quality[m];
  for (auto& x : out) x /= static_cast<double>(queries.size());
  return out;
}

// Routes every query at one lambda. Thompson runs sequentially in dataset order from a fresh
// Beta(1,1) prior; the random policies draw from one stream seeded by cfg.seed.
inline std::vector<RoutingDecision> route_all(const PolicyConfig& cfg, const RouterContext& ctx,
                                              const std::vector<QueryRecord>& queries) {
  cfg.validate();
  const std::size_t M = ctx.cost.size();
  std::vector<RoutingDecision> out;
  out.reserve(queries.size());
  std::mt19937_64 rng(cfg.seed);
  ThompsonState ts(M);
  std::vector<std::size_t> front;
  if (cfg.policy == Policy::pareto_random) {
    if (ctx.train_mean_quality.size() != M) throw ContractError("pareto-random needs per-expert training quality");
    front = pareto_frontier(ctx.cost, ctx.train_mean_quality);
  }
  if (cfg.policy == Policy::cscr && (!ctx.index || !ctx.head)) throw ContractError("cscr needs an index and a head");
  if (cfg.policy == Policy::single && cfg.single_expert >= M) throw ContractError("single expert index out of range");

  for (const auto& q : queries) {
    RoutingDecision d;
    switch (cfg.policy) {
      case Policy::cscr:
        try {
          d = route_cscr(*ctx.index, *ctx.head, q.embedding, ctx.cost, cfg.lambda, cfg.k, cfg.literal_argmin);
        } catch (const DegenerateOutput& e) {
          throw DegenerateOutput(std::string(e.what()) + " for query \"" + q.id + "\"");
        }
        break;
      case Policy::oracle: d = route_oracle(q.quality, ctx.cost, ctx.threshold(q.quality)); break;
      case Policy::random: d = route_random(M, ctx.cost, rng); break;
      case Policy::pareto_random: d = route_pareto_random(front, ctx.cost, cfg.lambda, cfg.lambda_max, rng); break;
      case Policy::thompson: d = route_thompson(ts, ctx.cost, cfg.lambda, rng); break;
      case Policy::single:
        d.expert = cfg.single_expert;
        d.similarity = NAN;
        d.cost = ctx.cost[d.expert];
        d.policy = Policy::single;
        break;
    }
    d.query_id = q.id;
    d.expert_id = ctx.expert_ids.empty() ? std::string() : ctx.expert_ids[d.expert];
    d.quality = q.quality[d.expert];
    if (cfg.policy == Policy::thompson) update_thompson(ts, d.expert, is_positive(d.quality, ctx.threshold(q.quality)));
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace cscr
