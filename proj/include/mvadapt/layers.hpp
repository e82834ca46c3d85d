#pragma once

// Building blocks shared by the backbone, the adapters and the normal probe.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mvadapt/rng.hpp"
#include "mvadapt/tensor.hpp"

namespace mvadapt {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
std::size_t count_parameters(const ParamList<T>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.tensor.numel();
  return n;
}

template <class T>
Tensor<T> random_tensor(Shape shape, double stddev, Rng& rng, bool truncated = true) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(truncated ? truncated_normal(rng, stddev) : gaussian(rng, stddev));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

// y = x W + b, plus an optional low-rank delta (alpha/r) * x A^T B^T.
template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
  Tensor<T> lora_a;  // [r, in]
  Tensor<T> lora_b;  // [out, r], zero at init
  T lora_scale = T(0);

  static Linear init(std::size_t in, std::size_t out, Rng& rng, double stddev = 0.02) {
    return {random_tensor<T>({in, out}, stddev, rng), Tensor<T>::zeros({out}), {}, {}, T(0)};
  }
  static Linear zero(std::size_t in, std::size_t out) {
    return {Tensor<T>::zeros({in, out}), Tensor<T>::zeros({out}), {}, {}, T(0)};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  bool has_lora() const { return lora_a.defined(); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = add_rowwise(matmul(x, weight), bias);
    if (has_lora()) y = add(y, scale(matmul(matmul(x, lora_a, false, true), lora_b, false, true), lora_scale));
    return y;
  }

  void collect(const std::string& prefix, ParamList<T>& out, bool with_base = true, bool with_lora = true) const {
    if (with_base) {
      out.push_back({prefix + ".weight", weight});
      out.push_back({prefix + ".bias", bias});
    }
    if (with_lora && has_lora()) {
      out.push_back({prefix + ".lora_a", lora_a});
      out.push_back({prefix + ".lora_b", lora_b});
    }
  }
};

template <class T>
struct LayerNormAffine {
  Tensor<T> gain;  // [C]
  Tensor<T> bias;  // [C]

  static LayerNormAffine init(std::size_t c) { return {Tensor<T>::full({c}, T(1)), Tensor<T>::zeros({c})}; }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_rowwise(mul_rowwise(layer_norm(x), gain), bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

// Scaled dot-product attention of q against (k, v), split into `heads`
// column groups. q: [Nq, W], k, v: [Nk, W]. Optionally returns the per-head
// attention matrices.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               std::vector<Tensor<T>>* weights = nullptr) {
  const std::size_t w = q.dim(1);
  if (heads == 0 || w % heads != 0) throw ShapeError("attention", "width " + std::to_string(w) + " not divisible by " + std::to_string(heads) + " heads");
  if (k.shape() != v.shape() || k.dim(1) != w) throw ShapeError("attention", k.shape(), v.shape());
  const std::size_t hd = w / heads;
  const T temperature = std::sqrt(static_cast<T>(hd));
  if (heads == 1) {
    auto a = softmax(matmul(q, k, false, true), 1, temperature);
    if (weights) weights->push_back(a);
    return matmul(a, v);
  }
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = slice(q, 1, h * hd, (h + 1) * hd);
    auto kh = slice(k, 1, h * hd, (h + 1) * hd);
    auto vh = slice(v, 1, h * hd, (h + 1) * hd);
    auto a = softmax(matmul(qh, kh, false, true), 1, temperature);
    if (weights) weights->push_back(a);
    outs.push_back(matmul(a, vh));
  }
  return concat(outs, 1);
}

template <class T>
struct Mlp {
  Linear<T> fc1, fc2;

  static Mlp init(std::size_t width, std::size_t hidden, Rng& rng) {
    return {Linear<T>::init(width, hidden, rng), Linear<T>::init(hidden, width, rng)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, ParamList<T>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// Pre-norm transformer layer: x + attn(ln(x)), then + mlp(ln(x)).
template <class T>
struct TransformerLayer {
  LayerNormAffine<T> ln1;
  Linear<T> q, k, v, o;
  LayerNormAffine<T> ln2;
  Mlp<T> mlp;
  std::size_t heads = 1;

  static TransformerLayer init(std::size_t width, std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
    TransformerLayer l;
    l.ln1 = LayerNormAffine<T>::init(width);
    l.q = Linear<T>::init(width, width, rng);
    l.k = Linear<T>::init(width, width, rng);
    l.v = Linear<T>::init(width, width, rng);
    l.o = Linear<T>::init(width, width, rng);
    l.ln2 = LayerNormAffine<T>::init(width);
    l.mlp = Mlp<T>::init(width, width * mlp_ratio, rng);
    l.heads = heads;
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x, std::vector<Tensor<T>>* weights = nullptr) const {
    const auto h = ln1(x);
    auto y = add(x, o(multi_head_attention(q(h), k(h), v(h), heads, weights)));
    return add(y, mlp(ln2(y)));
  }

  void collect(const std::string& prefix, ParamList<T>& out, bool with_base = true, bool with_lora = true) const {
    if (with_base) ln1.collect(prefix + ".ln1", out);
    q.collect(prefix + ".attn.q", out, with_base, with_lora);
    k.collect(prefix + ".attn.k", out, with_base, with_lora);
    v.collect(prefix + ".attn.v", out, with_base, with_lora);
    o.collect(prefix + ".attn.o", out, with_base, with_lora);
    if (with_base) {
      ln2.collect(prefix + ".ln2", out);
      mlp.collect(prefix + ".mlp", out);
    }
  }
};

}  // namespace mvadapt
