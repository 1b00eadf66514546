#pragma once

// On-disk formats and validated in-memory records.
//
//   pool.jsonl      {"id": str, "cost": float, "kind": "logit"|"perplexity"}
//   queries.jsonl   {"id": str, "split": "train"|"test", "embedding": [...], "quality": {id: float}}
//   probes.bin      row-major little-endian f32 payload
//   probes.json     {"kind", "expert_ids", "shape", "dtype": "f32", "token_ids" (logit only)}
//
// The pool file order is the canonical expert index everywhere downstream. Query quality
// columns and probe expert axes are realigned to it by id; positional matching never happens.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cscr/common.hpp"

namespace cscr {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct Expert {
  std::string id;
  double cost_raw = 0.0;
  DescriptorKind kind = DescriptorKind::logit;

  bool operator==(const Expert&) const = default;
};

struct ExpertPool {
  std::vector<Expert> experts;

  std::size_t size() const { return experts.size(); }

  std::optional<std::size_t> index_of(std::string_view id) const {
    for (std::size_t m = 0; m < experts.size(); ++m)
      if (experts[m].id == id) return m;
    return std::nullopt;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(experts.size());
    for (const auto& e : experts) out.push_back(e.id);
    return out;
  }

  std::vector<double> raw_costs() const {
    std::vector<double> out;
    out.reserve(experts.size());
    for (const auto& e : experts) out.push_back(e.cost_raw);
    return out;
  }

  bool has_kind(DescriptorKind k) const {
    for (const auto& e : experts)
      if (e.kind == k) return true;
    return false;
  }

  bool operator==(const ExpertPool&) const = default;
};

// Throws DataError on any invariant violation.
inline void validate_pool(const ExpertPool& pool) {
  if (pool.experts.empty()) throw DataError("empty pool");
  std::unordered_set<std::string> seen;
  for (const auto& e : pool.experts) {
    if (e.id.empty()) throw DataError("expert with empty id");
    if (!seen.insert(e.id).second) throw DataError("duplicate expert id \"" + e.id + "\"");
    if (!std::isfinite(e.cost_raw)) throw DataError("non-finite cost for expert \"" + e.id + "\"");
    if (e.cost_raw < 0.0) throw DataError("negative cost for expert \"" + e.id + "\"");
  }
  if (pool.size() >= 2) {
    bool distinct = false;
    for (const auto& e : pool.experts) distinct |= e.cost_raw != pool.experts.front().cost_raw;
    if (!distinct) throw DataError("pool needs at least two distinct cost values");
  }
}

struct LogitProbeTensor {
  std::vector<std::string> expert_ids;
  std::vector<std::int64_t> token_ids;
  std::size_t n_probes = 0;
  std::size_t n_steps = 0;
  std::vector<float> probs;  // (expert, probe, step, token), row-major

  std::size_t n_experts() const { return expert_ids.size(); }
  std::size_t n_tokens() const { return token_ids.size(); }

  std::size_t offset(std::size_t e, std::size_t i, std::size_t t, std::size_t v) const {
    return ((e * n_probes + i) * n_steps + t) * token_ids.size() + v;
  }
  float at(std::size_t e, std::size_t i, std::size_t t, std::size_t v) const { return probs[offset(e, i, t, v)]; }
  float& at(std::size_t e, std::size_t i, std::size_t t, std::size_t v) { return probs[offset(e, i, t, v)]; }

  std::optional<std::size_t> expert_index(std::string_view id) const {
    for (std::size_t e = 0; e < expert_ids.size(); ++e)
      if (expert_ids[e] == id) return e;
    return std::nullopt;
  }

  bool operator==(const LogitProbeTensor&) const = default;
};

struct PerplexityTable {
  std::vector<std::string> expert_ids;
  Matrix scores;  // (expert, probe)

  std::size_t n_probes() const { return scores.cols; }

  std::optional<std::size_t> expert_index(std::string_view id) const {
    for (std::size_t e = 0; e < expert_ids.size(); ++e)
      if (expert_ids[e] == id) return e;
    return std::nullopt;
  }

  bool operator==(const PerplexityTable&) const = default;
};

enum class Split { train, test };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct QueryRecord {
  std::string id;
  std::vector<double> embedding;
  std::vector<double> quality;  // pool index order
  Split split = Split::train;

  bool operator==(const QueryRecord&) const = default;
};

inline void validate_probes(const LogitProbeTensor& t) {
  const std::size_t expected = t.n_experts() * t.n_probes * t.n_steps * t.n_tokens();
  if (t.probs.size() != expected) throw DataError("logit probe payload size does not match shape");
  std::unordered_set<std::int64_t> tok(t.token_ids.begin(), t.token_ids.end());
  if (tok.size() != t.token_ids.size()) throw DataError("duplicate token id in logit probe header");
  for (std::size_t e = 0; e < t.n_experts(); ++e)
    for (std::size_t i = 0; i < t.n_probes; ++i)
      for (std::size_t s = 0; s < t.n_steps; ++s) {
        double mass = 0.0;
        for (std::size_t v = 0; v < t.n_tokens(); ++v) {
          const float p = t.at(e, i, s, v);
          if (!(p >= 0.0f && p <= 1.0f))
            throw DataError("probability out of [0,1] for expert \"" + t.expert_ids[e] + "\" probe " +
                            std::to_string(i) + " step " + std::to_string(s));
          mass += p;
        }
        // f32 payload: allow accumulated rounding on the top-slice mass.
        if (mass > 1.0 + 1e-4)
          throw DataError("probability mass exceeds 1 for expert \"" + t.expert_ids[e] + "\" probe " +
                          std::to_string(i) + " step " + std::to_string(s));
      }
}

inline void validate_probes(const PerplexityTable& t) {
  if (t.scores.rows != t.expert_ids.size()) throw DataError("perplexity table row count mismatch");
  for (std::size_t e = 0; e < t.scores.rows; ++e)
    for (std::size_t i = 0; i < t.scores.cols; ++i) {
      const double s = t.scores(e, i);
      if (!std::isfinite(s))
        throw DataError("non-finite perplexity score for expert \"" + t.expert_ids[e] + "\" probe " +
                        std::to_string(i));
      if (s < 0.0)
        throw DataError("negative perplexity score for expert \"" + t.expert_ids[e] + "\" probe " +
                        std::to_string(i));
    }
}

namespace detail {

inline std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

// Calls fn(line_number, object) for every non-blank line.
template <typename Fn>
void for_each_jsonl(const fs::path& path, Fn&& fn) {
  auto in = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(path.filename().string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!obj.is_object()) throw DataError(path.filename().string() + ":" + std::to_string(lineno) + ": not an object");
    fn(lineno, obj);
  }
}

inline std::string where(const fs::path& path, std::size_t lineno, std::string_view field) {
  return path.filename().string() + ":" + std::to_string(lineno) + ": field \"" + std::string(field) + "\"";
}

template <typename T>
T required(const json& obj, std::string_view field, const std::string& ctx) {
  auto it = obj.find(field);
  if (it == obj.end()) throw DataError(ctx + " missing");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw DataError(ctx + " has the wrong type");
  }
}

inline double required_number(const json& obj, std::string_view field, const std::string& ctx) {
  auto it = obj.find(field);
  if (it == obj.end()) throw DataError(ctx + " missing");
  if (!it->is_number()) throw DataError(ctx + " must be a number");
  return it->get<double>();
}

}  // namespace detail

inline ExpertPool load_expert_pool(const fs::path& path) {
  ExpertPool pool;
  detail::for_each_jsonl(path, [&](std::size_t lineno, const json& obj) {
    Expert e;
    e.id = detail::required<std::string>(obj, "id", detail::where(path, lineno, "id"));
    e.cost_raw = detail::required_number(obj, "cost", detail::where(path, lineno, "cost"));
    e.kind = parse_kind(detail::required<std::string>(obj, "kind", detail::where(path, lineno, "kind")));
    pool.experts.push_back(std::move(e));
  });
  validate_pool(pool);
  return pool;
}

inline void write_expert_pool(const fs::path& path, const ExpertPool& pool) {
  auto out = detail::open_out(path);
  for (const auto& e : pool.experts)
    out << json{{"id", e.id}, {"cost", e.cost_raw}, {"kind", to_string(e.kind)}}.dump() << '\n';
}

inline std::vector<QueryRecord> load_query_dataset(const fs::path& path, const ExpertPool& pool) {
  std::vector<QueryRecord> records;
  std::optional<std::size_t> dim;
  std::unordered_set<std::string> seen;
  detail::for_each_jsonl(path, [&](std::size_t lineno, const json& obj) {
    QueryRecord q;
    q.id = detail::required<std::string>(obj, "id", detail::where(path, lineno, "id"));
    if (!seen.insert(q.id).second) throw DataError(detail::where(path, lineno, "id") + ": duplicate query id \"" + q.id + "\"");
    const auto split = detail::required<std::string>(obj, "split", detail::where(path, lineno, "split"));
    if (split == "train")
      q.split = Split::train;
    else if (split == "test")
      q.split = Split::test;
    else
      throw DataError(detail::where(path, lineno, "split") + ": unknown split \"" + split + "\"");

    q.embedding = detail::required<std::vector<double>>(obj, "embedding", detail::where(path, lineno, "embedding"));
    if (q.embedding.empty()) throw DataError(detail::where(path, lineno, "embedding") + ": empty embedding");
    if (!dim) dim = q.embedding.size();
    if (q.embedding.size() != *dim)
      throw DataError(detail::where(path, lineno, "embedding") + ": dimension " + std::to_string(q.embedding.size()) +
                      " differs from " + std::to_string(*dim));
    for (double x : q.embedding)
      if (!std::isfinite(x)) throw DataError(detail::where(path, lineno, "embedding") + ": non-finite value");

    const auto qit = obj.find("quality");
    if (qit == obj.end() || !qit->is_object())
      throw DataError(detail::where(path, lineno, "quality") + " missing or not an object");
    q.quality.assign(pool.size(), 0.0);
    for (const auto& [key, value] : qit->items())
      if (!pool.index_of(key)) throw DataError(detail::where(path, lineno, "quality") + ": unknown expert \"" + key + "\"");
    for (std::size_t m = 0; m < pool.size(); ++m) {
      const auto& eid = pool.experts[m].id;
      auto it = qit->find(eid);
      if (it == qit->end()) throw DataError(detail::where(path, lineno, "quality") + ": missing expert column \"" + eid + "\"");
      if (!it->is_number()) throw DataError(detail::where(path, lineno, "quality") + ": \"" + eid + "\" must be a number");
      const double v = it->get<double>();
      if (!std::isfinite(v) || v < 0.0 || v > 1.0)
        throw DataError(detail::where(path, lineno, "quality") + ": \"" + eid + "\" value out of range [0,1]");
      q.quality[m] = v;
    }
    records.push_back(std::move(q));
  });
  return records;
}

inline void write_query_dataset(const fs::path& path, const ExpertPool& pool, const std::vector<QueryRecord>& records) {
  auto out = detail::open_out(path);
  for (const auto& q : records) {
    json quality = json::object();
    for (std::size_t m = 0; m < pool.size(); ++m) quality[pool.experts[m].id] = q.quality[m];
    json obj = {{"id", q.id}, {"split", to_string(q.split)}, {"embedding", q.embedding}, {"quality", quality}};
    out << obj.dump() << '\n';
  }
}

inline std::vector<QueryRecord> select_split(const std::vector<QueryRecord>& records, Split split) {
  std::vector<QueryRecord> out;
  for (const auto& q : records)
    if (q.split == split) out.push_back(q);
  return out;
}

using ProbeData = std::variant<LogitProbeTensor, PerplexityTable>;

// Sidecar path convention: "x.bin" pairs with "x.json".
inline fs::path sidecar_path(const fs::path& bin) {
  fs::path p = bin;
  return p.replace_extension(".json");
}

namespace detail {

inline std::vector<float> read_f32_payload(const fs::path& path, std::size_t count) {
  static_assert(std::endian::native == std::endian::little, "f32 payloads are little-endian");
  auto in = open_in(path, std::ios::binary);
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(float))
    throw DataError(path.filename().string() + ": payload has " + std::to_string(bytes) + " bytes, header implies " +
                    std::to_string(count * sizeof(float)));
  in.seekg(0);
  std::vector<float> data(count);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  return data;
}

inline void write_f32_payload(const fs::path& path, std::span<const float> data) {
  auto out = open_out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
}

}  // namespace detail

// Reads a probe container without pool alignment. Throws DataError on malformed headers.
inline ProbeData read_probe_container(const fs::path& bin_path) {
  json header;
  {
    auto in = detail::open_in(sidecar_path(bin_path));
    try {
      in >> header;
    } catch (const json::exception& e) {
      throw DataError(sidecar_path(bin_path).filename().string() + ": " + e.what());
    }
  }
  const std::string ctx = sidecar_path(bin_path).filename().string();
  const auto kind = parse_kind(detail::required<std::string>(header, "kind", ctx + ": field \"kind\""));
  const auto dtype = detail::required<std::string>(header, "dtype", ctx + ": field \"dtype\"");
  if (dtype != "f32") throw DataError(ctx + ": unsupported dtype \"" + dtype + "\"");
  auto ids = detail::required<std::vector<std::string>>(header, "expert_ids", ctx + ": field \"expert_ids\"");
  const auto shape = detail::required<std::vector<std::size_t>>(header, "shape", ctx + ": field \"shape\"");
  if (shape.empty() || shape[0] != ids.size()) throw DataError(ctx + ": shape[0] must equal the number of expert_ids");

  if (kind == DescriptorKind::logit) {
    if (shape.size() != 4) throw DataError(ctx + ": logit probes need a 4-D shape");
    LogitProbeTensor t;
    t.expert_ids = std::move(ids);
    t.token_ids = detail::required<std::vector<std::int64_t>>(header, "token_ids", ctx + ": field \"token_ids\"");
    if (t.token_ids.size() != shape[3]) throw DataError(ctx + ": token_ids length must equal shape[3]");
    t.n_probes = shape[1];
    t.n_steps = shape[2];
    t.probs = detail::read_f32_payload(bin_path, shape[0] * shape[1] * shape[2] * shape[3]);
    validate_probes(t);
    return t;
  }
  if (shape.size() != 2) throw DataError(ctx + ": perplexity probes need a 2-D shape");
  PerplexityTable t;
  t.expert_ids = std::move(ids);
  const auto raw = detail::read_f32_payload(bin_path, shape[0] * shape[1]);
  t.scores = Matrix(shape[0], shape[1]);
  for (std::size_t i = 0; i < raw.size(); ++i) t.scores.data[i] = raw[i];
  validate_probes(t);
  return t;
}

// Keeps exactly the pool experts of the tensor's kind, in pool order.
inline LogitProbeTensor align_to_pool(const LogitProbeTensor& t, const ExpertPool& pool) {
  LogitProbeTensor out;
  out.token_ids = t.token_ids;
  out.n_probes = t.n_probes;
  out.n_steps = t.n_steps;
  const std::size_t block = t.n_probes * t.n_steps * t.n_tokens();
  for (const auto& e : pool.experts) {
    if (e.kind != DescriptorKind::logit) continue;
    auto idx = t.expert_index(e.id);
    if (!idx) throw DataError("logit probes missing expert \"" + e.id + "\"");
    out.expert_ids.push_back(e.id);
    out.probs.insert(out.probs.end(), t.probs.begin() + static_cast<std::ptrdiff_t>(*idx * block),
                     t.probs.begin() + static_cast<std::ptrdiff_t>((*idx + 1) * block));
  }
  return out;
}

inline PerplexityTable align_to_pool(const PerplexityTable& t, const ExpertPool& pool) {
  PerplexityTable out;
  std::vector<std::size_t> rows;
  for (const auto& e : pool.experts) {
    if (e.kind != DescriptorKind::perplexity) continue;
    auto idx = t.expert_index(e.id);
    if (!idx) throw DataError("perplexity probes missing expert \"" + e.id + "\"");
    out.expert_ids.push_back(e.id);
    rows.push_back(*idx);
  }
  out.scores = Matrix(rows.size(), t.scores.cols);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < t.scores.cols; ++c) out.scores(r, c) = t.scores(rows[r], c);
  return out;
}

inline ProbeData load_probe_data(const fs::path& bin_path, const ExpertPool& pool, DescriptorKind kind) {
  auto raw = read_probe_container(bin_path);
  const bool is_logit = std::holds_alternative<LogitProbeTensor>(raw);
  if (is_logit != (kind == DescriptorKind::logit))
    throw DataError(sidecar_path(bin_path).filename().string() + ": header kind does not match requested kind \"" +
                    std::string(to_string(kind)) + "\"");
  return std::visit([&](const auto& t) -> ProbeData { return align_to_pool(t, pool); }, raw);
}

inline void write_probe_data(const fs::path& bin_path, const LogitProbeTensor& t) {
  json header = {{"kind", "logit"},
                 {"dtype", "f32"},
                 {"expert_ids", t.expert_ids},
                 {"token_ids", t.token_ids},
                 {"shape", {t.n_experts(), t.n_probes, t.n_steps, t.n_tokens()}}};
  detail::open_out(sidecar_path(bin_path)) << header.dump(2) << '\n';
  detail::write_f32_payload(bin_path, t.probs);
}

inline void write_probe_data(const fs::path& bin_path, const PerplexityTable& t) {
  json header = {{"kind", "perplexity"},
                 {"dtype", "f32"},
                 {"expert_ids", t.expert_ids},
                 {"shape", {t.scores.rows, t.scores.cols}}};
  detail::open_out(sidecar_path(bin_path)) << header.dump(2) << '\n';
  std::vector<float> payload(t.scores.data.begin(), t.scores.data.end());
  detail::write_f32_payload(bin_path, payload);
}

}  // namespace cscr
