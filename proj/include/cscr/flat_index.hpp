#pragma once

// Exact inner-product top-k over unit descriptors. Keys are copied at build time and never
// mutated, so concurrent top_k calls need no synchronization.

#include <algorithm>
#include <string>
#include <vector>

#include "cscr/common.hpp"
#include "cscr/descriptors.hpp"

namespace cscr {

struct Neighbor {
  std::size_t index = 0;  // row in the index (pool order)
  std::string expert_id;
  double similarity = 0.0;
};

class FlatIndex {
 public:
  FlatIndex() = default;

  explicit FlatIndex(const std::vector<Descriptor>& descs) {
    if (descs.empty()) throw ContractError("cannot build an index over zero descriptors");
    keys_ = Matrix(descs.size(), descs.front().vector.size());
    for (std::size_t m = 0; m < descs.size(); ++m) {
      const auto& v = descs[m].vector;
      if (v.size() != keys_.cols)
        throw ContractError("descriptor \"" + descs[m].expert_id + "\" has dimension " + std::to_string(v.size()) +
                            ", index dimension is " + std::to_string(keys_.cols));
      if (std::abs(norm2(v) - 1.0) > kUnitNormTolerance)
        throw ContractError("descriptor \"" + descs[m].expert_id + "\" is not unit norm");
      std::copy(v.begin(), v.end(), keys_.row(m).begin());
      ids_.push_back(descs[m].expert_id);
    }
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return keys_.cols; }
  const std::vector<std::string>& ids() const { return ids_; }
  const Matrix& keys() const { return keys_; }

  std::vector<double> similarities(std::span<const double> q) const {
    if (q.size() != dim()) throw ContractError("query dimension does not match index");
    std::vector<double> s(size());
    for (std::size_t m = 0; m < size(); ++m) s[m] = dot(q, keys_.row(m));
    return s;
  }

  // k largest inner products, descending; equal similarities keep index order.
  std::vector<Neighbor> top_k(std::span<const double> q, std::size_t k) const {
    if (k < 1 || k > size())
      throw ContractError("k=" + std::to_string(k) + " outside [1, " + std::to_string(size()) + "]");
    const auto s = similarities(q);
    std::vector<std::size_t> order(size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
    std::vector<Neighbor> out;
    out.reserve(k);
    for (std::size_t j = 0; j < k; ++j) out.push_back({order[j], ids_[order[j]], s[order[j]]});
    return out;
  }

 private:
  Matrix keys_;
  std::vector<std::string> ids_;
};

inline FlatIndex build_index(const std::vector<Descriptor>& descs) { return FlatIndex(descs); }

}  // namespace cscr
