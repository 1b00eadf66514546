#pragma once

// Expert fingerprints. Every descriptor is a unit vector; logit footprints and perplexity
// fingerprints share one metric space when the footprint basis size equals the probe count.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "cscr/common.hpp"
#include "cscr/dataio.hpp"

namespace cscr {

struct TokenBasis {
  std::vector<std::int64_t> token_ids;  // ascending id order
};

struct Descriptor {
  std::string expert_id;
  DescriptorKind kind = DescriptorKind::logit;
  std::vector<double> vector;

  bool operator==(const Descriptor&) const = default;
};

inline constexpr double kUnitNormTolerance = 1e-9;

// Selects the K tokens carrying the most probability mass over all experts, probes and steps.
// Ties go to the smaller token id. The basis is returned in ascending id order so that
// coordinates do not depend on mass ranking.
inline TokenBasis select_token_basis(const LogitProbeTensor& probes, std::size_t K) {
  if (K == 0) throw ContractError("token basis size must be at least 1");
  if (K > probes.n_tokens())
    throw ContractError("token basis size " + std::to_string(K) + " exceeds the " + std::to_string(probes.n_tokens()) +
                        " available tokens");
  std::vector<double> mass(probes.n_tokens(), 0.0);
  for (std::size_t e = 0; e < probes.n_experts(); ++e)
    for (std::size_t i = 0; i < probes.n_probes; ++i)
      for (std::size_t t = 0; t < probes.n_steps; ++t)
        for (std::size_t v = 0; v < probes.n_tokens(); ++v) mass[v] += probes.at(e, i, t, v);

  std::vector<std::size_t> order(probes.n_tokens());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(K), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (mass[a] != mass[b]) return mass[a] > mass[b];
                      return probes.token_ids[a] < probes.token_ids[b];
                    });
  TokenBasis basis;
  for (std::size_t j = 0; j < K; ++j) basis.token_ids.push_back(probes.token_ids[order[j]]);
  std::sort(basis.token_ids.begin(), basis.token_ids.end());
  return basis;
}

// Mean basis-token probability over probes and steps, l2-normalized.
inline Descriptor logit_footprint(const LogitProbeTensor& probes, const TokenBasis& basis, std::string_view expert_id) {
  const auto e = probes.expert_index(expert_id);
  if (!e) throw DataError("logit probes have no expert \"" + std::string(expert_id) + "\"");

  std::vector<std::size_t> columns;
  columns.reserve(basis.token_ids.size());
  for (auto tok : basis.token_ids) {
    auto it = std::find(probes.token_ids.begin(), probes.token_ids.end(), tok);
    if (it == probes.token_ids.end()) throw ContractError("basis token " + std::to_string(tok) + " not in probe tensor");
    columns.push_back(static_cast<std::size_t>(it - probes.token_ids.begin()));
  }

  Descriptor d{std::string(expert_id), DescriptorKind::logit, std::vector<double>(columns.size(), 0.0)};
  for (std::size_t i = 0; i < probes.n_probes; ++i)
    for (std::size_t t = 0; t < probes.n_steps; ++t)
      for (std::size_t k = 0; k < columns.size(); ++k) d.vector[k] += probes.at(*e, i, t, columns[k]);
  const double inv = 1.0 / static_cast<double>(probes.n_probes * probes.n_steps);
  for (auto& x : d.vector) x *= inv;

  if (normalize_inplace(d.vector) == 0.0)
    throw DataError("logit footprint of \"" + std::string(expert_id) + "\" is zero on every basis token");
  return d;
}

// Standardized (zero mean, unit population variance) score vector, then l2-normalized.
inline std::vector<double> standardize_scores(std::span<const double> scores) {
  const double n = static_cast<double>(scores.size());
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  var /= n;
  std::vector<double> out(scores.size());
  if (!(var > 0.0)) return out;
  const double sd = std::sqrt(var);
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - mean) / sd;
  return out;
}

inline Descriptor perplexity_fingerprint(const PerplexityTable& table, std::string_view expert_id) {
  const auto e = table.expert_index(expert_id);
  if (!e) throw DataError("perplexity table has no expert \"" + std::string(expert_id) + "\"");
  if (table.n_probes() < 2) throw ContractError("perplexity fingerprints need at least 2 probes");

  auto z = standardize_scores(table.scores.row(*e));
  if (normalize_inplace(z) == 0.0)
    throw DataError("perplexity scores of \"" + std::string(expert_id) + "\" have zero variance across probes");
  return Descriptor{std::string(expert_id), DescriptorKind::perplexity, std::move(z)};
}

inline Matrix descriptor_similarity_matrix(const std::vector<Descriptor>& descs) {
  Matrix sim(descs.size(), descs.size());
  for (std::size_t i = 0; i < descs.size(); ++i) {
    if (descs[i].vector.size() != descs.front().vector.size())
      throw ContractError("descriptor \"" + descs[i].expert_id + "\" has dimension " +
                          std::to_string(descs[i].vector.size()) + ", expected " +
                          std::to_string(descs.front().vector.size()));
  }
  for (std::size_t i = 0; i < descs.size(); ++i)
    for (std::size_t j = i; j < descs.size(); ++j) sim(i, j) = sim(j, i) = dot(descs[i].vector, descs[j].vector);
  return sim;
}

// Builds one descriptor per pool expert in pool order, dispatching on the expert's kind.
// Mixed pools require the footprint basis size to equal the perplexity probe count.
inline std::vector<Descriptor> build_descriptors(const ExpertPool& pool, const LogitProbeTensor* logit,
                                                 const PerplexityTable* ppl, std::size_t basis_size) {
  const bool need_logit = pool.has_kind(DescriptorKind::logit);
  const bool need_ppl = pool.has_kind(DescriptorKind::perplexity);
  if (need_logit && !logit) throw DataError("pool has logit experts but no logit probes were supplied");
  if (need_ppl && !ppl) throw DataError("pool has perplexity experts but no perplexity probes were supplied");
  if (need_logit && need_ppl && basis_size != ppl->n_probes())
    throw DataError("mixed pool: token basis size " + std::to_string(basis_size) +
                    " must equal the perplexity probe count " + std::to_string(ppl->n_probes()));

  TokenBasis basis;
  if (need_logit) basis = select_token_basis(*logit, basis_size);

  std::vector<Descriptor> out;
  out.reserve(pool.size());
  for (const auto& e : pool.experts)
    out.push_back(e.kind == DescriptorKind::logit ? logit_footprint(*logit, basis, e.id)
                                                  : perplexity_fingerprint(*ppl, e.id));
  return out;
}

// descriptors.jsonl: {"id", "kind", "vector"}
inline void write_descriptors(const fs::path& path, const std::vector<Descriptor>& descs) {
  auto out = detail::open_out(path);
  for (const auto& d : descs) out << json{{"id", d.expert_id}, {"kind", to_string(d.kind)}, {"vector", d.vector}}.dump() << '\n';
}

// Loads descriptors and reorders them to pool order. Experts absent from the pool are dropped.
inline std::vector<Descriptor> load_descriptors(const fs::path& path, const ExpertPool& pool) {
  std::map<std::string, Descriptor> by_id;
  detail::for_each_jsonl(path, [&](std::size_t lineno, const json& obj) {
    Descriptor d;
    d.expert_id = detail::required<std::string>(obj, "id", detail::where(path, lineno, "id"));
    d.kind = parse_kind(detail::required<std::string>(obj, "kind", detail::where(path, lineno, "kind")));
    d.vector = detail::required<std::vector<double>>(obj, "vector", detail::where(path, lineno, "vector"));
    if (std::abs(norm2(d.vector) - 1.0) > kUnitNormTolerance)
      throw DataError(detail::where(path, lineno, "vector") + ": descriptor \"" + d.expert_id + "\" is not unit norm");
    if (!by_id.emplace(d.expert_id, d).second)
      throw DataError(detail::where(path, lineno, "id") + ": duplicate descriptor \"" + d.expert_id + "\"");
  });
  std::vector<Descriptor> out;
  for (const auto& e : pool.experts) {
    auto it = by_id.find(e.id);
    if (it == by_id.end()) throw DataError("descriptors file missing expert \"" + e.id + "\"");
    out.push_back(it->second);
  }
  return out;
}

// Loads every descriptor in file order, no pool alignment.
inline std::vector<Descriptor> load_descriptors(const fs::path& path) {
  std::vector<Descriptor> out;
  detail::for_each_jsonl(path, [&](std::size_t lineno, const json& obj) {
    Descriptor d;
    d.expert_id = detail::required<std::string>(obj, "id", detail::where(path, lineno, "id"));
    d.kind = parse_kind(detail::required<std::string>(obj, "kind", detail::where(path, lineno, "kind")));
    d.vector = detail::required<std::vector<double>>(obj, "vector", detail::where(path, lineno, "vector"));
    out.push_back(std::move(d));
  });
  return out;
}

}  // namespace cscr
