#pragma once

// Cost-Spectrum InfoNCE: per-band contrastive terms with band temperatures and a cost
// penalty on the partition function, averaged over the bands that contain a positive.
// Also hosts the vanilla InfoNCE special case and the AdamW training loop for the head.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "cscr/common.hpp"
#include "cscr/cost_spectrum.hpp"
#include "cscr/dataio.hpp"
#include "cscr/descriptors.hpp"
#include "cscr/encoder.hpp"

namespace cscr {

enum class ThresholdMode { absolute, relative };
enum class LossKind { cost_spectrum, vanilla };

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 512;
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double gamma = 0.2;
  std::size_t num_bands = 5;
  double alpha = 0.25;
  double tau_min = 0.05;
  double tau = 0.1;  // global temperature, vanilla loss only
  std::uint64_t seed = 0;
  double theta_pos = 0.5;
  ThresholdMode threshold_mode = ThresholdMode::absolute;
  std::size_t hidden_mult = 1;
  Activation activation = Activation::tanh;
  LossKind loss = LossKind::cost_spectrum;

  void validate() const {
    if (gamma < 0.0) throw ContractError("gamma must be >= 0");
    if (num_bands < 1) throw ContractError("num_bands must be >= 1");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (theta_pos < 0.0 || theta_pos > 1.0) throw ContractError("theta_pos must lie in [0,1]");
    if (hidden_mult < 1) throw ContractError("hidden_mult must be >= 1");
    if (learning_rate < 0.0) throw ContractError("learning_rate must be >= 0");
    if (loss == LossKind::vanilla && !(tau > 0.0)) throw ContractError("tau must be > 0");
  }
};

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"gamma", c.gamma},
              {"num_bands", c.num_bands},
              {"alpha", c.alpha},
              {"tau_min", c.tau_min},
              {"tau", c.tau},
              {"seed", c.seed},
              {"theta_pos", c.theta_pos},
              {"threshold_mode", c.threshold_mode == ThresholdMode::absolute ? "absolute" : "relative"},
              {"hidden_mult", c.hidden_mult},
              {"activation", to_string(c.activation)},
              {"loss", c.loss == LossKind::cost_spectrum ? "cost_spectrum" : "vanilla"}};
}

// Threshold used to call an expert "correct" on a query with the given quality row.
inline double positive_threshold(std::span<const double> quality, double theta_pos, ThresholdMode mode) {
  if (mode == ThresholdMode::absolute) return theta_pos;
  const double mx = quality.empty() ? 0.0 : *std::max_element(quality.begin(), quality.end());
  return theta_pos * mx;
}

inline bool is_positive(double quality, double threshold) { return quality > 0.0 && quality >= threshold; }

struct QueryPositives {
  std::vector<std::size_t> all;                 // P(i), ascending
  std::vector<std::vector<std::size_t>> by_band;  // P_ik per band
  bool excluded() const { return all.empty(); }
};

struct PositiveSets {
  std::vector<QueryPositives> queries;
  std::size_t excluded_count = 0;
};

// Quality exactly 0 never counts as correct, so an all-zero row is excluded in both threshold modes.
inline QueryPositives query_positives(std::span<const double> quality, const BandPartition& bands, double theta_pos,
                                      ThresholdMode mode) {
  QueryPositives qp;
  qp.by_band.resize(bands.num_bands());
  const double thr = positive_threshold(quality, theta_pos, mode);
  for (std::size_t m = 0; m < quality.size(); ++m)
    if (is_positive(quality[m], thr)) {
      qp.all.push_back(m);
      qp.by_band[bands.band_of[m]].push_back(m);
    }
  return qp;
}

inline PositiveSets build_positives(const std::vector<QueryRecord>& queries, const BandPartition& bands,
                                    double theta_pos, ThresholdMode mode = ThresholdMode::absolute) {
  PositiveSets ps;
  ps.queries.reserve(queries.size());
  for (const auto& q : queries) {
    ps.queries.push_back(query_positives(q.quality, bands, theta_pos, mode));
    if (ps.queries.back().excluded()) ++ps.excluded_count;
  }
  return ps;
}

// Descriptors stacked as an M x D' key matrix in pool order.
inline Matrix key_matrix(const std::vector<Descriptor>& descs) {
  if (descs.empty()) throw ContractError("no descriptors");
  Matrix keys(descs.size(), descs.front().vector.size());
  for (std::size_t m = 0; m < descs.size(); ++m) {
    if (descs[m].vector.size() != keys.cols) throw ContractError("descriptor dimensions differ");
    std::copy(descs[m].vector.begin(), descs[m].vector.end(), keys.row(m).begin());
  }
  return keys;
}

// Single-query Cost-Spectrum InfoNCE. When dq is non-empty it receives dloss/dq (overwritten).
inline double cs_infonce_query(std::span<const double> q, const Matrix& keys, std::span<const double> cost,
                               const BandPartition& bands, const QueryPositives& pos, double gamma,
                               std::span<double> dq = {}) {
  if (pos.excluded()) throw ContractError("query has no positive expert");
  const std::size_t M = keys.rows;
  std::vector<double> sim(M);
  for (std::size_t m = 0; m < M; ++m) sim[m] = dot(q, keys.row(m));

  std::vector<double> dsim(M, 0.0);
  double loss = 0.0;
  std::size_t active = 0;
  std::vector<double> den_w(M);
  for (std::size_t k = 0; k < bands.num_bands(); ++k) {
    const auto& pk = pos.by_band[k];
    if (pk.empty()) continue;
    ++active;
    const double tau = bands.temperature[k];
    if (!(tau > 0.0)) throw ContractError("band temperature must be positive");

    // Shared shift: s/tau bounds every numerator and denominator exponent.
    double shift = -INFINITY;
    for (std::size_t m = 0; m < M; ++m) shift = std::max(shift, sim[m] / tau);
    double num = 0.0;
    for (std::size_t m : pk) num += std::exp(sim[m] / tau - shift);
    double den = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      den_w[m] = std::exp((sim[m] - gamma * cost[m]) / tau - shift);
      den += den_w[m];
    }
    loss += std::log(num) - std::log(den);

    if (!dq.empty()) {
      for (std::size_t m : pk) dsim[m] += std::exp(sim[m] / tau - shift) / num / tau;
      for (std::size_t m = 0; m < M; ++m) dsim[m] -= den_w[m] / den / tau;
    }
  }
  const double scale = -1.0 / static_cast<double>(active);
  if (!dq.empty()) {
    std::fill(dq.begin(), dq.end(), 0.0);
    for (std::size_t m = 0; m < M; ++m) {
      const double g = scale * dsim[m];
      const auto e = keys.row(m);
      for (std::size_t j = 0; j < dq.size(); ++j) dq[j] += g * e[j];
    }
  }
  return scale * loss;
}

// Single-query classic InfoNCE with one global temperature.
inline double vanilla_infonce_query(std::span<const double> q, const Matrix& keys, std::span<const std::size_t> positives,
                                    double tau, std::span<double> dq = {}) {
  if (positives.empty()) throw ContractError("query has no positive expert");
  if (!(tau > 0.0)) throw ContractError("temperature must be positive");
  const std::size_t M = keys.rows;
  std::vector<double> logits(M);
  for (std::size_t m = 0; m < M; ++m) logits[m] = dot(q, keys.row(m)) / tau;
  std::vector<double> pos_logits;
  for (std::size_t m : positives) pos_logits.push_back(logits[m]);
  const double lse_all = log_sum_exp(logits);
  const double lse_pos = log_sum_exp(pos_logits);
  if (!dq.empty()) {
    std::vector<double> dlogit(M);
    for (std::size_t m = 0; m < M; ++m) dlogit[m] = std::exp(logits[m] - lse_all);
    for (std::size_t m : positives) dlogit[m] -= std::exp(logits[m] - lse_pos);
    std::fill(dq.begin(), dq.end(), 0.0);
    for (std::size_t m = 0; m < M; ++m) {
      const auto e = keys.row(m);
      for (std::size_t j = 0; j < dq.size(); ++j) dq[j] += dlogit[m] / tau * e[j];
    }
  }
  return lse_all - lse_pos;
}

// Batch means. Every query in the batch must have at least one positive.
inline double cs_infonce_loss(const std::vector<std::vector<double>>& q_batch, const Matrix& keys,
                              std::span<const double> cost, const BandPartition& bands,
                              const std::vector<QueryPositives>& positives, double gamma) {
  if (q_batch.empty()) throw ContractError("empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < q_batch.size(); ++i)
    total += cs_infonce_query(q_batch[i], keys, cost, bands, positives[i], gamma);
  return total / static_cast<double>(q_batch.size());
}

inline double vanilla_infonce_loss(const std::vector<std::vector<double>>& q_batch, const Matrix& keys,
                                   const std::vector<QueryPositives>& positives, double tau) {
  if (q_batch.empty()) throw ContractError("empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < q_batch.size(); ++i) total += vanilla_infonce_query(q_batch[i], keys, positives[i].all, tau);
  return total / static_cast<double>(q_batch.size());
}

// Everything the loss needs besides the query vectors.
struct LossContext {
  Matrix keys;
  std::vector<double> cost;
  BandPartition bands;
  double gamma = 0.0;
  LossKind kind = LossKind::cost_spectrum;
  double tau = 0.1;

  double query_loss(std::span<const double> q, const QueryPositives& pos, std::span<double> dq = {}) const {
    return kind == LossKind::cost_spectrum ? cs_infonce_query(q, keys, cost, bands, pos, gamma, dq)
                                           : vanilla_infonce_query(q, keys, pos.all, tau, dq);
  }
};

// Mean loss over a batch of embeddings pushed through the head, plus its parameter gradient.
inline double batch_loss_and_grad(const MlpHead& head, const LossContext& ctx,
                                  const std::vector<const QueryRecord*>& batch,
                                  const std::vector<const QueryPositives*>& positives, std::vector<double>* grad,
                                  std::vector<double>* per_query = nullptr) {
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  if (grad) grad->assign(head.param_count(), 0.0);
  std::vector<double> dq(head.out_dim);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ForwardCache cache;
    try {
      cache = forward_cached(head, batch[i]->embedding);
    } catch (const DegenerateOutput& e) {
      throw DegenerateOutput(std::string(e.what()) + " for query \"" + batch[i]->id + "\"");
    }
    const double li = ctx.query_loss(cache.q, *positives[i], grad ? std::span<double>(dq) : std::span<double>());
    if (per_query) per_query->push_back(li);
    total += li;
    if (grad) {
      for (auto& g : dq) g *= inv_b;
      backward_accumulate(head, cache, dq, *grad);
    }
  }
  return total * inv_b;
}

class AdamW {
 public:
  AdamW(std::size_t n, const TrainConfig& cfg) : m_(n, 0.0), v_(n, 0.0), cfg_(cfg) {}

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    ++t_;
    const double lr = cfg_.learning_rate;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i] -= lr * cfg_.weight_decay * params[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.adam_eps);
    }
  }

 private:
  std::vector<double> m_, v_;
  TrainConfig cfg_;
  std::uint64_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::size_t excluded_queries = 0;
};

struct TrainResult {
  MlpHead head;
  std::vector<EpochLog> epochs;
  BandPartition bands;
  CostModel costs;
  std::size_t excluded_queries = 0;
  json manifest;
};

class NonFiniteLoss : public DataError {
 public:
  using DataError::DataError;
};

inline std::string config_hash(const json& resolved) { return hex64(fnv1a64(resolved.dump())); }

// Seeded minibatch AdamW over the training queries. Queries without any positive expert are
// excluded up front. The epoch loss is the mean per-query loss observed during that epoch,
// summed in query-index order so it does not depend on the shuffle.
inline TrainResult train(const std::vector<QueryRecord>& train_queries, const ExpertPool& pool,
                         const std::vector<Descriptor>& descriptors, const TrainConfig& cfg) {
  cfg.validate();
  if (descriptors.size() != pool.size()) throw ContractError("need one descriptor per pool expert");
  if (train_queries.empty()) throw ContractError("no training queries");

  TrainResult res;
  res.costs = normalize_costs(pool);
  res.bands = partition_bands(res.costs, cfg.num_bands, cfg.tau_min, cfg.alpha);
  const auto positives = build_positives(train_queries, res.bands, cfg.theta_pos, cfg.threshold_mode);
  res.excluded_queries = positives.excluded_count;

  std::vector<std::size_t> included;
  for (std::size_t i = 0; i < train_queries.size(); ++i)
    if (!positives.queries[i].excluded()) included.push_back(i);
  if (included.empty()) throw DataError("every training query lacks a positive expert");

  LossContext ctx{key_matrix(descriptors), res.costs.cost, res.bands, cfg.gamma, cfg.loss, cfg.tau};
  const std::size_t D = train_queries.front().embedding.size();
  res.head = init_head(D, D * cfg.hidden_mult, ctx.keys.cols, cfg.seed, cfg.activation);

  AdamW opt(res.head.param_count(), cfg);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<double> grad;
  std::vector<double> per_query_loss(train_queries.size(), 0.0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = included;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const QueryRecord*> batch;
      std::vector<const QueryPositives*> pos;
      for (std::size_t j = start; j < end; ++j) {
        batch.push_back(&train_queries[order[j]]);
        pos.push_back(&positives.queries[order[j]]);
      }
      std::vector<double> losses;
      const double loss = batch_loss_and_grad(res.head, ctx, batch, pos, &grad, &losses);
      if (!std::isfinite(loss)) {
        std::string ids;
        for (const auto* q : batch) ids += (ids.empty() ? "" : ",") + q->id;
        throw NonFiniteLoss("non-finite loss in epoch " + std::to_string(epoch + 1) + " batch [" + ids + "]");
      }
      for (std::size_t j = start; j < end; ++j) per_query_loss[order[j]] = losses[j - start];
      opt.step(res.head.params, grad);
    }
    double total = 0.0;
    for (std::size_t i : included) total += per_query_loss[i];
    res.epochs.push_back({epoch + 1, total / static_cast<double>(included.size()), res.excluded_queries});
  }

  json cfg_json = to_json(cfg);
  res.manifest = json{{"config", cfg_json},
                      {"config_hash", config_hash(cfg_json)},
                      {"bands", to_json(res.bands)},
                      {"normalized_costs", res.costs.cost},
                      {"expert_ids", pool.ids()},
                      {"train_queries", train_queries.size()},
                      {"excluded_queries", res.excluded_queries},
                      {"head", {{"in_dim", res.head.in_dim},
                                {"hidden_dim", res.head.hidden_dim},
                                {"out_dim", res.head.out_dim},
                                {"activation", to_string(res.head.activation)}}}};
  json losses = json::array();
  for (const auto& e : res.epochs) losses.push_back(e.loss);
  res.manifest["epoch_loss"] = losses;
  return res;
}

}  // namespace cscr
