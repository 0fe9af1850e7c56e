#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "amort/autodiff.hpp"
#include "amort/masking.hpp"
#include "amort/tensor.hpp"

namespace amort {

enum class MaskingScheme { causal, non_causal };

inline const char* to_string(MaskingScheme m) {
  return m == MaskingScheme::causal ? "causal" : "non_causal";
}

// Backbone hyperparameters. The desk preset is sized for CPU training; the
// paper preset matches the reference configuration (512/2048/8/8).
struct SequenceModelConfig {
  int d_model = 128;
  int d_ffn = 512;
  int n_heads = 4;
  int n_layers = 4;
  int max_context = 100;
  MaskingScheme masking = MaskingScheme::causal;

  void validate() const {
    if (d_model <= 0 || d_ffn <= 0 || n_heads <= 0 || n_layers <= 0)
      throw std::invalid_argument("sequence model: non-positive dimension");
    if (d_model % n_heads != 0)
      throw std::invalid_argument(
          "sequence model: d_model must be divisible by n_heads");
    if (max_context < 1)
      throw std::invalid_argument("sequence model: max_context < 1");
  }

  static SequenceModelConfig desk() { return SequenceModelConfig{}; }

  static SequenceModelConfig paper() {
    SequenceModelConfig c;
    c.d_model = 512;
    c.d_ffn = 2048;
    c.n_heads = 8;
    c.n_layers = 8;
    c.max_context = 100;
    return c;
  }
};

enum class TokenRole { observation, gradient, state, query };

// Counts (query, key) pairs admitted by attention masks, for runtime-cost
// accounting. Disabled by default.
namespace attn_stats {
inline thread_local bool enabled = false;
inline thread_local int64_t pair_count = 0;

inline void reset() { pair_count = 0; }
}  // namespace attn_stats

template <typename T>
struct Linear {
  ad::Var<T> W, b;

  Linear() = default;
  Linear(ad::ParamStore<T>& ps, const std::string& name, int in, int out,
         Rng& rng) {
    T bound = T(1.0 / std::sqrt(double(in)));
    W = ps.create(name + ".w",
                  TensorT<T>::uniform(in, out, rng, -bound, bound));
    b = ps.create(name + ".b", TensorT<T>::zeros(1, out));
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    return ad::add_rowvec(ad::matmul(x, W), b);
  }

  int64_t in_dim() const { return W.rows(); }
  int64_t out_dim() const { return W.cols(); }
};

// Pre-norm transformer encoder with gelu feed-forward blocks and a final
// layer norm. There are no positional encodings anywhere: inputs are
// exchangeable observation sets, and all ordering structure a pass needs is
// supplied by its attention mask.
template <typename T>
class Transformer {
 public:
  Transformer() = default;

  Transformer(ad::ParamStore<T>& ps, const std::string& prefix,
              const SequenceModelConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    layers_.resize(size_t(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::string base = prefix + ".layer" + std::to_string(l);
      Layer& L = layers_[size_t(l)];
      L.ln1_g = ps.create(base + ".ln1.g", TensorT<T>::ones(1, cfg.d_model));
      L.ln1_b = ps.create(base + ".ln1.b", TensorT<T>::zeros(1, cfg.d_model));
      L.wq = Linear<T>(ps, base + ".wq", cfg.d_model, cfg.d_model, rng);
      L.wk = Linear<T>(ps, base + ".wk", cfg.d_model, cfg.d_model, rng);
      L.wv = Linear<T>(ps, base + ".wv", cfg.d_model, cfg.d_model, rng);
      L.wo = Linear<T>(ps, base + ".wo", cfg.d_model, cfg.d_model, rng);
      L.ln2_g = ps.create(base + ".ln2.g", TensorT<T>::ones(1, cfg.d_model));
      L.ln2_b = ps.create(base + ".ln2.b", TensorT<T>::zeros(1, cfg.d_model));
      L.ffn1 = Linear<T>(ps, base + ".ffn1", cfg.d_model, cfg.d_ffn, rng);
      L.ffn2 = Linear<T>(ps, base + ".ffn2", cfg.d_ffn, cfg.d_model, rng);
    }
    lnf_g_ = ps.create(prefix + ".lnf.g", TensorT<T>::ones(1, cfg.d_model));
    lnf_b_ = ps.create(prefix + ".lnf.b", TensorT<T>::zeros(1, cfg.d_model));
  }

  const SequenceModelConfig& config() const { return cfg_; }

  ad::Var<T> forward(const ad::Var<T>& tokens, const TensorT<T>& mask) const {
    std::vector<const TensorT<T>*> masks{&mask};
    return forward(tokens, masks);
  }

  // One mask per layer (cycled when fewer masks than layers are given).
  ad::Var<T> forward(const ad::Var<T>& tokens,
                     const std::vector<const TensorT<T>*>& masks) const {
    if (tokens.cols() != cfg_.d_model)
      throw std::invalid_argument("transformer: token width != d_model");
    if (masks.empty()) throw std::invalid_argument("transformer: no mask");
    for (const auto* m : masks)
      if (m->rows() != tokens.rows() || m->cols() != tokens.rows())
        throw std::invalid_argument("transformer: mask/token shape mismatch");
    ad::Var<T> x = tokens;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const TensorT<T>& mask = *masks[size_t(l) % masks.size()];
      x = ad::add(x, attention(x, layers_[size_t(l)], mask));
      x = ad::add(x, ffn(x, layers_[size_t(l)]));
    }
    return ad::layer_norm_rows(x, lnf_g_, lnf_b_);
  }

 private:
  struct Layer {
    ad::Var<T> ln1_g, ln1_b;
    Linear<T> wq, wk, wv, wo;
    ad::Var<T> ln2_g, ln2_b;
    Linear<T> ffn1, ffn2;
  };

  ad::Var<T> attention(const ad::Var<T>& x, const Layer& L,
                       const TensorT<T>& mask) const {
    if (attn_stats::enabled) {
      for (T v : mask.data())
        if (double(v) > kMaskBlocked / 2) ++attn_stats::pair_count;
    }
    ad::Var<T> xn = ad::layer_norm_rows(x, L.ln1_g, L.ln1_b);
    ad::Var<T> q = L.wq(xn);
    ad::Var<T> k = L.wk(xn);
    ad::Var<T> v = L.wv(xn);
    int dh = cfg_.d_model / cfg_.n_heads;
    T inv_sqrt_dh = T(1.0 / std::sqrt(double(dh)));
    std::vector<ad::Var<T>> heads;
    heads.reserve(size_t(cfg_.n_heads));
    for (int h = 0; h < cfg_.n_heads; ++h) {
      ad::Var<T> qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
      ad::Var<T> kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
      ad::Var<T> vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
      ad::Var<T> scores =
          ad::scale(ad::matmul(qh, kh, false, true), inv_sqrt_dh);
      ad::Var<T> weights = ad::softmax_rows(scores, &mask);
      heads.push_back(ad::matmul(weights, vh));
    }
    return L.wo(ad::concat_cols(heads));
  }

  ad::Var<T> ffn(const ad::Var<T>& x, const Layer& L) const {
    ad::Var<T> xn = ad::layer_norm_rows(x, L.ln2_g, L.ln2_b);
    return L.ffn2(ad::gelu(L.ffn1(xn)));
  }

  SequenceModelConfig cfg_;
  std::vector<Layer> layers_;
  ad::Var<T> lnf_g_, lnf_b_;
};

}  // namespace amort
