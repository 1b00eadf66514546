#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cscr {

// Raised for malformed or inconsistent input data. The CLI maps it to exit code 1.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a caller violates an operation precondition (k out of range, K > M, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DescriptorKind { logit, perplexity };

inline std::string_view to_string(DescriptorKind kind) {
  return kind == DescriptorKind::logit ? "logit" : "perplexity";
}

inline DescriptorKind parse_kind(std::string_view s) {
  if (s == "logit") return DescriptorKind::logit;
  if (s == "perplexity") return DescriptorKind::perplexity;
  throw DataError("unknown descriptor kind \"" + std::string(s) + "\"");
}

// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Scales v to unit length in place; returns the original norm (0 leaves v untouched).
inline double normalize_inplace(std::span<double> v) {
  const double n = norm2(v);
  if (n > 0.0)
    for (auto& x : v) x /= n;
  return n;
}

// Numerically stable log(sum(exp(x_i))).
inline double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return -INFINITY;
  double mx = xs[0];
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

// 64-bit FNV-1a. Used for config hashes, which must be stable across runs and platforms.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace cscr
