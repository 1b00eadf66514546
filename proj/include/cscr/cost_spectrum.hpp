#pragma once

#include <algorithm>
#include <vector>

#include "cscr/common.hpp"
#include "cscr/dataio.hpp"

namespace cscr {

struct CostModel {
  std::vector<double> cost;  // min-max normalized, pool order
  double raw_min = 0.0;
  double raw_max = 0.0;
};

struct BandPartition {
  std::vector<double> edges;         // beta_0 = 0 < ... < beta_K = 1
  std::vector<std::size_t> band_of;  // per expert
  std::vector<double> mean_cost;     // per band
  std::vector<double> temperature;   // per band, tau_min + alpha * mean_cost
  double tau_min = 0.0;
  double alpha = 0.0;

  std::size_t num_bands() const { return mean_cost.size(); }

  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> out(num_bands());
    for (std::size_t m = 0; m < band_of.size(); ++m) out[band_of[m]].push_back(m);
    return out;
  }
};

inline CostModel normalize_costs(const std::vector<double>& raw) {
  if (raw.empty()) throw ContractError("cannot normalize an empty cost vector");
  CostModel cm;
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  cm.raw_min = *lo;
  cm.raw_max = *hi;
  const double span = cm.raw_max - cm.raw_min;
  cm.cost.reserve(raw.size());
  for (double c : raw) cm.cost.push_back(span > 0.0 ? (c - cm.raw_min) / span : 0.0);
  return cm;
}

inline CostModel normalize_costs(const ExpertPool& pool) { return normalize_costs(pool.raw_costs()); }

// Quantile cost bands with temperatures tau_k = tau_min + alpha * mean_cost_k.
//
// Interior edge k sits at sorted[floor(k*M/K)], so with distinct costs band k holds the k-th
// contiguous chunk of the sorted experts. Expert m lands in band k iff cost in [edge_k, edge_k+1),
// with the top band closed at 1. Bands left empty by ties are merged into their lower neighbour
// and indices compacted.
inline BandPartition partition_bands(const CostModel& costs, std::size_t K, double tau_min, double alpha) {
  const std::size_t M = costs.cost.size();
  if (K < 1) throw ContractError("need at least one cost band");
  if (K > M) throw ContractError("band count " + std::to_string(K) + " exceeds expert count " + std::to_string(M));
  if (tau_min < 0.0 || alpha < 0.0) throw ContractError("tau_min and alpha must be non-negative");

  std::vector<double> sorted = costs.cost;
  std::sort(sorted.begin(), sorted.end());

  std::vector<double> raw_edges(K + 1);
  raw_edges.front() = 0.0;
  raw_edges.back() = 1.0;
  for (std::size_t k = 1; k < K; ++k) raw_edges[k] = sorted[k * M / K];

  auto raw_band = [&](double c) {
    for (std::size_t k = 0; k + 1 < K; ++k)
      if (c >= raw_edges[k] && c < raw_edges[k + 1]) return k;
    return K - 1;
  };

  std::vector<std::size_t> raw_of(M);
  std::vector<std::size_t> count(K, 0);
  for (std::size_t m = 0; m < M; ++m) {
    raw_of[m] = raw_band(costs.cost[m]);
    ++count[raw_of[m]];
  }

  // Keep non-empty bands; an empty band's interval folds into the band below it.
  BandPartition bp;
  bp.tau_min = tau_min;
  bp.alpha = alpha;
  std::vector<std::size_t> compact(K, 0);
  bp.edges.push_back(0.0);
  std::size_t next = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (count[k] == 0) continue;
    if (next > 0) bp.edges.push_back(raw_edges[k]);
    compact[k] = next++;
  }
  bp.edges.push_back(1.0);

  bp.band_of.resize(M);
  bp.mean_cost.assign(next, 0.0);
  std::vector<std::size_t> size(next, 0);
  for (std::size_t m = 0; m < M; ++m) {
    bp.band_of[m] = compact[raw_of[m]];
    bp.mean_cost[bp.band_of[m]] += costs.cost[m];
    ++size[bp.band_of[m]];
  }
  for (std::size_t k = 0; k < next; ++k) {
    bp.mean_cost[k] /= static_cast<double>(size[k]);
    bp.temperature.push_back(tau_min + alpha * bp.mean_cost[k]);
  }
  return bp;
}

inline json to_json(const BandPartition& bp) {
  return json{{"edges", bp.edges},
              {"band_of", bp.band_of},
              {"mean_cost", bp.mean_cost},
              {"temperature", bp.temperature},
              {"tau_min", bp.tau_min},
              {"alpha", bp.alpha}};
}

}  // namespace cscr
