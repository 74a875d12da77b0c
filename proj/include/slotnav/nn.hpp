#pragma once

// Parameter registry and the small composite layers the model is built
// from: affine stacks, GRU cell, residual MLP. All parameters live in a
// ParamStore under dot-separated paths with deterministic (lexicographic)
// iteration order.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "slotnav/rng.hpp"
#include "slotnav/tensor.hpp"

namespace slotnav {

class ParamStore {
 public:
  Tensor& create(const std::string& path, Shape shape, std::vector<double> data) {
    if (params_.count(path)) throw std::invalid_argument("ParamStore: duplicate path " + path);
    auto [it, ok] = params_.emplace(path, Tensor::param(std::move(shape), std::move(data)));
    (void)ok;
    return it->second;
  }

  Tensor& create_zeros(const std::string& path, Shape shape) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return create(path, std::move(shape), std::move(d));
  }

  Tensor& create_ones(const std::string& path, Shape shape) {
    std::vector<double> d(shape_numel(shape), 1.0);
    return create(path, std::move(shape), std::move(d));
  }

  /// Gaussian entries scaled by 1/sqrt(fan_in).
  Tensor& create_gaussian(const std::string& path, Shape shape, std::size_t fan_in, Rng& rng) {
    std::vector<double> d(shape_numel(shape));
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in ? fan_in : 1));
    for (auto& x : d) x = rng.gaussian() * s;
    return create(path, std::move(shape), std::move(d));
  }

  Tensor& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown path " + path);
    return it->second;
  }
  const Tensor& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown path " + path);
    return it->second;
  }

  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  std::size_t size() const { return params_.size(); }

  void zero_grads() {
    for (auto& [_, t] : params_) {
      auto& g = t.grad();
      std::fill(g.begin(), g.end(), 0.0);
    }
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;  // ordered => deterministic iteration
};

// ---------------------------------------------------------------------------
// layer-norm parameters
// ---------------------------------------------------------------------------

struct LayerNormParams {
  Tensor gain, bias;
  double eps = 1e-6;
};

inline LayerNormParams make_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t d,
                                       double eps = 1e-6) {
  return {ps.create_ones(prefix + ".gain", {d}), ps.create_zeros(prefix + ".bias", {d}), eps};
}

inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  return layer_norm(x, p.gain, p.bias, p.eps);
}

// ---------------------------------------------------------------------------
// GRU cell
// ---------------------------------------------------------------------------

struct GruParams {
  Tensor w_update, w_reset, w_cand;  // (d_in + d_h) x d_h
  Tensor b_update, b_reset, b_cand;  // d_h
};

inline GruParams make_gru(ParamStore& ps, const std::string& prefix, std::size_t d_in,
                          std::size_t d_h, Rng& rng) {
  const std::size_t d = d_in + d_h;
  return {ps.create_gaussian(prefix + ".w_update", {d, d_h}, d, rng),
          ps.create_gaussian(prefix + ".w_reset", {d, d_h}, d, rng),
          ps.create_gaussian(prefix + ".w_cand", {d, d_h}, d, rng),
          ps.create_zeros(prefix + ".b_update", {d_h}),
          ps.create_zeros(prefix + ".b_reset", {d_h}),
          ps.create_zeros(prefix + ".b_cand", {d_h})};
}

/// Standard GRU recurrence over n rows:
///   z = sigmoid([in,st] Wz + bz), r = sigmoid([in,st] Wr + br),
///   cand = tanh([in, r*st] Wh + bh), out = (1-z)*st + z*cand.
inline Tensor gru_cell(const Tensor& state, const Tensor& input, const GruParams& p) {
  if (state.rank() != 2 || input.rank() != 2 || state.dim(0) != input.dim(0))
    shape_error("gru_cell", state.shape(), input.shape());
  if (input.dim(1) + state.dim(1) != p.w_update.dim(0))
    shape_error("gru_cell params", {input.dim(1) + state.dim(1)}, p.w_update.shape());
  const Tensor both = concat_cols({input, state});
  const Tensor z = sigmoid(affine(both, p.w_update, p.b_update));
  const Tensor r = sigmoid(affine(both, p.w_reset, p.b_reset));
  const Tensor gated = concat_cols({input, mul(r, state)});
  const Tensor cand = tanh_op(affine(gated, p.w_cand, p.b_cand));
  const Tensor keep = add_scalar(neg(z), 1.0);  // 1 - z
  return add(mul(keep, state), mul(z, cand));
}

// ---------------------------------------------------------------------------
// residual MLP block (the residual addition is the caller's)
// ---------------------------------------------------------------------------

struct MlpParams {
  LayerNormParams ln;
  Tensor w1, b1, w2, b2;
};

inline MlpParams make_mlp(ParamStore& ps, const std::string& prefix, std::size_t d_in,
                          std::size_t d_hidden, std::size_t d_out, Rng& rng) {
  return {make_layer_norm(ps, prefix + ".ln", d_in),
          ps.create_gaussian(prefix + ".w1", {d_in, d_hidden}, d_in, rng),
          ps.create_zeros(prefix + ".b1", {d_hidden}),
          ps.create_gaussian(prefix + ".w2", {d_hidden, d_out}, d_hidden, rng),
          ps.create_zeros(prefix + ".b2", {d_out})};
}

/// MLP(LN(x)) with one ReLU between two affine layers.
inline Tensor residual_mlp(const Tensor& x, const MlpParams& p) {
  return affine(relu(affine(layer_norm(x, p.ln), p.w1, p.b1)), p.w2, p.b2);
}

}  // namespace slotnav
