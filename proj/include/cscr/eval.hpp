#pragma once

// Deferral curves and their summary metrics, plus paired significance tests.
//
// Cost axis: mean per-query normalized cost, rescaled by C_max, the mean cost of always
// routing to the most expensive expert (1 for any pool with non-constant costs). AUDC holds
// the curve flat beyond its cheapest and most expensive points, so a single-point curve
// integrates to its own quality.

#include <algorithm>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cscr/common.hpp"
#include "cscr/dataio.hpp"
#include "cscr/router.hpp"

namespace cscr {

struct CurvePoint {
  double lambda = 0.0;
  double mean_cost = 0.0;
  double mean_quality = 0.0;
};

struct DeferralCurve {
  std::vector<CurvePoint> points;  // one per lambda, grid order

  // (cost, quality) sorted by cost with duplicate costs collapsed to their best quality.
  std::vector<std::pair<double, double>> sorted_points() const {
    std::map<double, double> best;
    for (const auto& p : points) {
      auto [it, inserted] = best.emplace(p.mean_cost, p.mean_quality);
      if (!inserted) it->second = std::max(it->second, p.mean_quality);
    }
    return {best.begin(), best.end()};
  }
};

// Per-policy, per-lambda, per-query outcomes. Bootstrap and McNemar work on these tables.
struct PolicyRun {
  Policy policy = Policy::cscr;
  std::vector<double> lambdas;
  std::vector<std::vector<double>> cost;     // [lambda][query]
  std::vector<std::vector<double>> quality;  // [lambda][query]
  std::vector<std::vector<char>> correct;    // [lambda][query]
  std::vector<std::vector<RoutingDecision>> decisions;

  std::size_t num_queries() const { return cost.empty() ? 0 : cost.front().size(); }
};

inline double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline std::vector<double> default_lambda_grid(std::size_t n = 50, double lambda_max = 1.0) {
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) grid[i] = n == 1 ? 0.0 : lambda_max * double(i) / double(n - 1);
  return grid;
}

inline PolicyRun run_policy(PolicyConfig cfg, const RouterContext& ctx, const std::vector<QueryRecord>& test,
                            const std::vector<double>& lambda_grid) {
  if (test.empty()) throw ContractError("empty test set");
  if (lambda_grid.empty()) throw ContractError("empty lambda grid");
  for (std::size_t i = 1; i < lambda_grid.size(); ++i)
    if (!(lambda_grid[i] > lambda_grid[i - 1])) throw ContractError("lambda grid must be strictly increasing");
  PolicyRun run;
  run.policy = cfg.policy;
  run.lambdas = lambda_grid;
  for (double lambda : lambda_grid) {
    cfg.lambda = lambda;
    auto decisions = route_all(cfg, ctx, test);
    std::vector<double> c, q;
    std::vector<char> ok;
    for (std::size_t i = 0; i < test.size(); ++i) {
      c.push_back(decisions[i].cost);
      q.push_back(decisions[i].quality);
      ok.push_back(is_positive(decisions[i].quality, ctx.threshold(test[i].quality)) ? 1 : 0);
    }
    run.cost.push_back(std::move(c));
    run.quality.push_back(std::move(q));
    run.correct.push_back(std::move(ok));
    run.decisions.push_back(std::move(decisions));
  }
  return run;
}

inline DeferralCurve curve_of(const PolicyRun& run) {
  DeferralCurve curve;
  for (std::size_t l = 0; l < run.lambdas.size(); ++l)
    curve.points.push_back({run.lambdas[l], mean_of(run.cost[l]), mean_of(run.quality[l])});
  return curve;
}

// Curve restricted to the given query indices (with repetition), for bootstrap resamples.
inline DeferralCurve curve_of(const PolicyRun& run, std::span<const std::size_t> idx) {
  DeferralCurve curve;
  for (std::size_t l = 0; l < run.lambdas.size(); ++l) {
    double c = 0.0, q = 0.0;
    for (std::size_t i : idx) {
      c += run.cost[l][i];
      q += run.quality[l][i];
    }
    curve.points.push_back({run.lambdas[l], c / double(idx.size()), q / double(idx.size())});
  }
  return curve;
}

inline DeferralCurve sweep(const PolicyConfig& cfg, const RouterContext& ctx, const std::vector<QueryRecord>& test,
                           const std::vector<double>& lambda_grid) {
  return curve_of(run_policy(cfg, ctx, test, lambda_grid));
}

inline double c_max_of(std::span<const double> cost) { return *std::max_element(cost.begin(), cost.end()); }

inline double audc(const DeferralCurve& curve, double c_max) {
  if (curve.points.empty()) throw ContractError("empty deferral curve");
  DeferralCurve clipped = curve;
  for (auto& p : clipped.points) p.mean_cost = std::clamp(p.mean_cost, 0.0, std::max(c_max, 0.0));
  const auto pts = clipped.sorted_points();
  if (c_max <= 0.0 || pts.size() == 1) {
    double best = pts.front().second;
    for (const auto& p : pts) best = std::max(best, p.second);
    return best;
  }
  double area = pts.front().second * (pts.front().first / c_max);
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += 0.5 * (pts[i].second + pts[i - 1].second) * (pts[i].first - pts[i - 1].first) / c_max;
  area += pts.back().second * (1.0 - pts.back().first / c_max);
  return area;
}

inline double peak(const DeferralCurve& curve) {
  if (curve.points.empty()) throw ContractError("empty deferral curve");
  double best = curve.points.front().mean_quality;
  for (const auto& p : curve.points) best = std::max(best, p.mean_quality);
  return best;
}

// Best single expert on the test set: highest mean quality, ties to the cheaper expert.
struct PoolStats {
  std::vector<double> mean_quality;
  std::vector<double> cost;
  std::size_t best = 0;

  double q_star() const { return mean_quality[best]; }
  double c_star() const { return cost[best]; }
};

inline PoolStats pool_stats(const std::vector<QueryRecord>& test, std::span<const double> cost) {
  PoolStats ps;
  ps.cost.assign(cost.begin(), cost.end());
  for (std::size_t m = 0; m < cost.size(); ++m) {
    std::vector<double> col;
    col.reserve(test.size());
    for (const auto& q : test) col.push_back(q.quality[m]);
    ps.mean_quality.push_back(mean_of(col));
  }
  for (std::size_t m = 1; m < cost.size(); ++m) {
    const double a = ps.mean_quality[m], b = ps.mean_quality[ps.best];
    if (a > b || (a == b && cost[m] < cost[ps.best])) ps.best = m;
  }
  return ps;
}

enum class QncFlag { none, unmatched, degenerate };

inline std::string_view to_string(QncFlag f) {
  switch (f) {
    case QncFlag::none: return "";
    case QncFlag::unmatched: return "unmatched";
    case QncFlag::degenerate: return "degenerate";
  }
  return "";
}

struct QncResult {
  double value = 0.0;  // NaN when degenerate
  QncFlag flag = QncFlag::none;
};

// Cheapest curve point matching the best single expert's quality, relative to that expert's cost.
inline QncResult qnc(const DeferralCurve& curve, double q_star, double c_star, double c_max) {
  if (!(c_star > 0.0)) return {NAN, QncFlag::degenerate};
  std::optional<double> best;
  for (const auto& p : curve.points)
    if (p.mean_quality >= q_star - 1e-12 && (!best || p.mean_cost < *best)) best = p.mean_cost;
  if (!best) return {c_max / c_star, QncFlag::unmatched};
  return {*best / c_star, QncFlag::none};
}

inline QncResult qnc(const DeferralCurve& curve, const PoolStats& stats) {
  return qnc(curve, stats.q_star(), stats.c_star(), c_max_of(stats.cost));
}

struct MetricReport {
  Policy policy = Policy::cscr;
  double audc = 0.0;
  QncResult qnc;
  double peak = 0.0;
  double c_max = 0.0;
};

inline MetricReport metric_report(Policy policy, const DeferralCurve& curve, const PoolStats& stats) {
  const double cm = c_max_of(stats.cost);
  return {policy, audc(curve, cm), qnc(curve, stats), peak(curve), cm};
}

// ---- paired bootstrap ----

struct BootstrapResult {
  double delta = 0.0;  // AUDC(A) - AUDC(B) on the full sample
  double ci_low = 0.0;
  double ci_high = 0.0;
  double p_one_sided = 0.0;  // P(delta* <= 0), ties counted half
  std::vector<double> resampled;
};

inline std::vector<std::vector<std::size_t>> bootstrap_indices(std::size_t n, std::size_t sample_size,
                                                               std::size_t n_resamples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::vector<std::size_t>> out(n_resamples, std::vector<std::size_t>(sample_size));
  for (auto& r : out)
    for (auto& i : r) i = pick(rng);
  return out;
}

// Linear interpolation between order statistics (the common "type 7" definition).
inline double percentile(std::vector<double> xs, double p) {
  std::sort(xs.begin(), xs.end());
  const double h = p * double(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (h - double(lo)) * (xs[hi] - xs[lo]);
}

inline BootstrapResult paired_bootstrap_audc(const PolicyRun& a, const PolicyRun& b, double c_max,
                                             std::size_t n_resamples, std::uint64_t seed, std::size_t sample_size = 0) {
  if (n_resamples < 100) throw ContractError("paired bootstrap needs at least 100 resamples");
  if (a.num_queries() != b.num_queries() || a.num_queries() == 0)
    throw ContractError("bootstrap policies must be evaluated on the same non-empty query set");
  const std::size_t n = a.num_queries();
  if (sample_size == 0) sample_size = n;

  BootstrapResult r;
  r.delta = audc(curve_of(a), c_max) - audc(curve_of(b), c_max);
  double below = 0.0;
  for (const auto& idx : bootstrap_indices(n, sample_size, n_resamples, seed)) {
    const double d = audc(curve_of(a, idx), c_max) - audc(curve_of(b, idx), c_max);
    r.resampled.push_back(d);
    below += d < 0.0 ? 1.0 : d == 0.0 ? 0.5 : 0.0;
  }
  r.ci_low = percentile(r.resampled, 0.025);
  r.ci_high = percentile(r.resampled, 0.975);
  r.p_one_sided = below / double(n_resamples);
  return r;
}

// ---- McNemar at a matched budget ----

// P(X >= k) for X ~ Binomial(n, 1/2).
inline double binomial_upper_tail_half(std::size_t k, std::size_t n) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  std::vector<double> terms;
  const double ln2 = std::log(2.0);
  for (std::size_t j = k; j <= n; ++j)
    terms.push_back(std::lgamma(double(n) + 1) - std::lgamma(double(j) + 1) - std::lgamma(double(n - j) + 1) -
                    double(n) * ln2);
  return std::min(1.0, std::exp(log_sum_exp(terms)));
}

struct McNemarResult {
  std::size_t n10 = 0;  // A correct, B wrong
  std::size_t n01 = 0;  // B correct, A wrong
  double p_exact = 1.0;
  bool undefined = false;  // no discordant pairs
  double budget = 0.0;
  std::size_t lambda_index_a = 0;
  std::size_t lambda_index_b = 0;
};

inline McNemarResult mcnemar_counts(std::span<const char> a_correct, std::span<const char> b_correct) {
  McNemarResult r;
  for (std::size_t i = 0; i < a_correct.size(); ++i) {
    if (a_correct[i] && !b_correct[i]) ++r.n10;
    if (!a_correct[i] && b_correct[i]) ++r.n01;
  }
  if (r.n10 + r.n01 == 0) {
    r.undefined = true;
    r.p_exact = 1.0;
  } else {
    r.p_exact = binomial_upper_tail_half(r.n10, r.n10 + r.n01);
  }
  return r;
}

inline double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Curve point with cost nearest the budget; ties toward the cheaper point, then the lower lambda.
inline std::size_t nearest_operating_point(const DeferralCurve& curve, double budget) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const double di = std::abs(curve.points[i].mean_cost - budget);
    const double db = std::abs(curve.points[best].mean_cost - budget);
    if (di < db || (di == db && curve.points[i].mean_cost < curve.points[best].mean_cost)) best = i;
  }
  return best;
}

// Budget defaults to the median of both curves' cost grids.
inline McNemarResult mcnemar_matched_budget(const PolicyRun& a, const PolicyRun& b,
                                            std::optional<double> budget = std::nullopt) {
  if (a.num_queries() != b.num_queries()) throw ContractError("McNemar needs paired query sets");
  const auto ca = curve_of(a), cb = curve_of(b);
  if (!budget) {
    std::vector<double> grid;
    for (const auto& p : ca.points) grid.push_back(p.mean_cost);
    for (const auto& p : cb.points) grid.push_back(p.mean_cost);
    budget = median(grid);
  }
  const auto ia = nearest_operating_point(ca, *budget);
  const auto ib = nearest_operating_point(cb, *budget);
  auto r = mcnemar_counts(a.correct[ia], b.correct[ib]);
  r.budget = *budget;
  r.lambda_index_a = ia;
  r.lambda_index_b = ib;
  return r;
}

// ---- writers ----

inline std::string fmt_double(double x) {
  if (std::isnan(x)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_curve_csv(const fs::path& path, const DeferralCurve& curve) {
  auto out = detail::open_out(path);
  out << "lambda,mean_cost,mean_quality\n";
  for (const auto& p : curve.points)
    out << fmt_double(p.lambda) << ',' << fmt_double(p.mean_cost) << ',' << fmt_double(p.mean_quality) << '\n';
}

inline void write_decisions_csv(const fs::path& path, const PolicyRun& run) {
  auto out = detail::open_out(path);
  out << "query_id,policy,lambda,expert_id,similarity,cost,quality\n";
  for (std::size_t l = 0; l < run.lambdas.size(); ++l)
    for (const auto& d : run.decisions[l])
      out << d.query_id << ',' << to_string(d.policy) << ',' << fmt_double(run.lambdas[l]) << ',' << d.expert_id << ','
          << fmt_double(d.similarity) << ',' << fmt_double(d.cost) << ',' << fmt_double(d.quality) << '\n';
}

inline json report_json(const MetricReport& r, const std::string& config_hash) {
  json j = {{"policy", to_string(r.policy)},
            {"audc", r.audc},
            {"qnc", std::isnan(r.qnc.value) ? json(nullptr) : json(r.qnc.value)},
            {"peak", r.peak},
            {"config_hash", config_hash},
            {"cost_axis", {{"normalizer", "c_max_always_most_expensive"}, {"c_max", r.c_max}}}};
  if (r.qnc.flag != QncFlag::none) j["qnc_flag"] = to_string(r.qnc.flag);
  return j;
}

inline json significance_json(const BootstrapResult& b, const McNemarResult& m, const std::string& config_hash) {
  return json{{"delta_audc", b.delta},
              {"ci", {b.ci_low, b.ci_high}},
              {"p_bootstrap", b.p_one_sided},
              {"n10", m.n10},
              {"n01", m.n01},
              {"p_mcnemar", m.p_exact},
              {"mcnemar_undefined", m.undefined},
              {"budget", m.budget},
              {"config_hash", config_hash}};
}

}  // namespace cscr
