#pragma once

// Two-layer projection head q = normalize(W2 * act(W1 x + b1) + b2) with exact gradients.

#include <random>
#include <string>
#include <vector>

#include "cscr/common.hpp"
#include "cscr/dataio.hpp"

namespace cscr {

enum class Activation { tanh, identity };

inline std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw DataError("unknown activation \"" + std::string(s) + "\"");
}

// Parameters live in one flat buffer: W1 (H x D), b1 (H), W2 (Dp x H), b2 (Dp).
// Gradients and optimizer state use the same layout.
struct MlpHead {
  std::size_t in_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;
  std::vector<double> params;

  static std::size_t param_count(std::size_t D, std::size_t H, std::size_t Dp) { return H * D + H + Dp * H + Dp; }
  std::size_t param_count() const { return params.size(); }

  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return hidden_dim * in_dim; }
  std::size_t w2_offset() const { return b1_offset() + hidden_dim; }
  std::size_t b2_offset() const { return w2_offset() + out_dim * hidden_dim; }

  double& w1(std::size_t h, std::size_t d) { return params[w1_offset() + h * in_dim + d]; }
  double w1(std::size_t h, std::size_t d) const { return params[w1_offset() + h * in_dim + d]; }
  double& b1(std::size_t h) { return params[b1_offset() + h]; }
  double b1(std::size_t h) const { return params[b1_offset() + h]; }
  double& w2(std::size_t o, std::size_t h) { return params[w2_offset() + o * hidden_dim + h]; }
  double w2(std::size_t o, std::size_t h) const { return params[w2_offset() + o * hidden_dim + h]; }
  double& b2(std::size_t o) { return params[b2_offset() + o]; }
  double b2(std::size_t o) const { return params[b2_offset() + o]; }

  bool operator==(const MlpHead&) const = default;
};

inline double activate(Activation a, double x) { return a == Activation::tanh ? std::tanh(x) : x; }

inline double activate_grad(Activation a, double x) {
  if (a == Activation::identity) return 1.0;
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
inline MlpHead init_head(std::size_t D, std::size_t H, std::size_t Dp, std::uint64_t seed,
                         Activation act = Activation::tanh) {
  if (D == 0 || H == 0 || Dp == 0) throw ContractError("head dimensions must be at least 1");
  MlpHead head{D, H, Dp, act, seed, std::vector<double>(MlpHead::param_count(D, H, Dp), 0.0)};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u1(-1.0 / std::sqrt(double(D)), 1.0 / std::sqrt(double(D)));
  std::uniform_real_distribution<double> u2(-1.0 / std::sqrt(double(H)), 1.0 / std::sqrt(double(H)));
  for (std::size_t i = 0; i < H * D; ++i) head.params[head.w1_offset() + i] = u1(rng);
  for (std::size_t i = 0; i < Dp * H; ++i) head.params[head.w2_offset() + i] = u2(rng);
  return head;
}

struct ForwardCache {
  std::vector<double> x;
  std::vector<double> pre;     // W1 x + b1
  std::vector<double> hidden;  // act(pre)
  std::vector<double> q;       // unit output
  double out_norm = 0.0;       // ||W2 hidden + b2|| before normalization
};

class DegenerateOutput : public DataError {
 public:
  using DataError::DataError;
};

inline ForwardCache forward_cached(const MlpHead& head, std::span<const double> x) {
  if (x.size() != head.in_dim)
    throw ContractError("embedding has dimension " + std::to_string(x.size()) + ", head expects " +
                        std::to_string(head.in_dim));
  ForwardCache c;
  c.x.assign(x.begin(), x.end());
  c.pre.resize(head.hidden_dim);
  c.hidden.resize(head.hidden_dim);
  for (std::size_t h = 0; h < head.hidden_dim; ++h) {
    double s = head.b1(h);
    for (std::size_t d = 0; d < head.in_dim; ++d) s += head.w1(h, d) * x[d];
    c.pre[h] = s;
    c.hidden[h] = activate(head.activation, s);
  }
  c.q.resize(head.out_dim);
  for (std::size_t o = 0; o < head.out_dim; ++o) {
    double s = head.b2(o);
    for (std::size_t h = 0; h < head.hidden_dim; ++h) s += head.w2(o, h) * c.hidden[h];
    c.q[o] = s;
  }
  c.out_norm = normalize_inplace(c.q);
  if (!(c.out_norm > 0.0) || !std::isfinite(c.out_norm)) throw DegenerateOutput("projection head produced a zero or non-finite output");
  return c;
}

inline std::vector<double> forward(const MlpHead& head, std::span<const double> x) { return forward_cached(head, x).q; }

// Accumulates into `grad` the parameter gradient given dL/dq for one cached sample,
// including the Jacobian of the l2 normalization.
inline void backward_accumulate(const MlpHead& head, const ForwardCache& c, std::span<const double> dq,
                                std::span<double> grad) {
  const double qg = dot(c.q, dq);
  std::vector<double> dz(head.out_dim);
  for (std::size_t o = 0; o < head.out_dim; ++o) dz[o] = (dq[o] - c.q[o] * qg) / c.out_norm;

  std::vector<double> dhidden(head.hidden_dim, 0.0);
  for (std::size_t o = 0; o < head.out_dim; ++o) {
    grad[head.b2_offset() + o] += dz[o];
    for (std::size_t h = 0; h < head.hidden_dim; ++h) {
      grad[head.w2_offset() + o * head.hidden_dim + h] += dz[o] * c.hidden[h];
      dhidden[h] += head.w2(o, h) * dz[o];
    }
  }
  for (std::size_t h = 0; h < head.hidden_dim; ++h) {
    const double da = dhidden[h] * activate_grad(head.activation, c.pre[h]);
    grad[head.b1_offset() + h] += da;
    for (std::size_t d = 0; d < head.in_dim; ++d) grad[head.w1_offset() + h * head.in_dim + d] += da * c.x[d];
  }
}

// Sum of per-sample parameter gradients over a batch.
inline std::vector<double> backward(const MlpHead& head, const std::vector<ForwardCache>& batch,
                                    const std::vector<std::vector<double>>& upstream) {
  if (batch.size() != upstream.size()) throw ContractError("batch and upstream gradient counts differ");
  std::vector<double> grad(head.param_count(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) backward_accumulate(head, batch[i], upstream[i], grad);
  return grad;
}

// Checkpoint: one JSON header line, then the parameters as little-endian f64.
inline void save_checkpoint(const fs::path& path, const MlpHead& head, const std::string& config_hash) {
  json header = {{"in_dim", head.in_dim},         {"hidden_dim", head.hidden_dim},
                 {"out_dim", head.out_dim},       {"activation", to_string(head.activation)},
                 {"seed", head.seed},             {"config_hash", config_hash},
                 {"param_count", head.params.size()}, {"dtype", "f64"}};
  auto out = detail::open_out(path, std::ios::binary);
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(head.params.data()),
            static_cast<std::streamsize>(head.params.size() * sizeof(double)));
}

inline MlpHead load_checkpoint(const fs::path& path) {
  auto in = detail::open_in(path, std::ios::binary);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty checkpoint");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": bad checkpoint header: " + e.what());
  }
  const std::string ctx = path.filename().string() + ": header field";
  MlpHead head;
  head.in_dim = detail::required<std::size_t>(header, "in_dim", ctx + " \"in_dim\"");
  head.hidden_dim = detail::required<std::size_t>(header, "hidden_dim", ctx + " \"hidden_dim\"");
  head.out_dim = detail::required<std::size_t>(header, "out_dim", ctx + " \"out_dim\"");
  head.activation = parse_activation(detail::required<std::string>(header, "activation", ctx + " \"activation\""));
  head.seed = detail::required<std::uint64_t>(header, "seed", ctx + " \"seed\"");
  const auto n = MlpHead::param_count(head.in_dim, head.hidden_dim, head.out_dim);
  if (detail::required<std::size_t>(header, "param_count", ctx + " \"param_count\"") != n)
    throw DataError(path.string() + ": param_count inconsistent with dims");
  head.params.resize(n);
  in.read(reinterpret_cast<char*>(head.params.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(double)) throw DataError(path.string() + ": truncated payload");
  for (double p : head.params)
    if (!std::isfinite(p)) throw DataError(path.string() + ": non-finite parameter");
  return head;
}

}  // namespace cscr
