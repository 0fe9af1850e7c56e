#pragma once

#include <stdexcept>
#include <vector>

#include "amort/tensor.hpp"

// Additive attention masks: 0 = attend, kMaskBlocked = blocked. The large
// negative constant underflows to exactly zero weight after the softmax
// exponentiation, so blocked tokens cannot leak into permitted outputs even
// at the bit level.
namespace amort {

constexpr double kMaskBlocked = -1e9;

template <typename T>
TensorT<T> full_mask(int n) {
  return TensorT<T>::zeros(n, n);
}

template <typename T>
TensorT<T> causal_mask(int n) {
  TensorT<T> m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m(i, j) = T(kMaskBlocked);
  return m;
}

// Mask for the prefix-parallel state-refinement pass: n_prefix leading
// tokens (the carried state, plus an optional gradient token) followed by
// n_obs observation tokens, all under a causal ordering. The output read at
// observation position i then conditions on the carried state and
// observations 1..i only; the last observation position carries the state
// for the full context.
template <typename T>
TensorT<T> parametric_causal_mask(int n_obs, int n_prefix = 1) {
  if (n_obs < 1)
    throw std::invalid_argument("parametric_causal_mask: n_obs < 1");
  if (n_prefix < 1)
    throw std::invalid_argument("parametric_causal_mask: n_prefix < 1");
  return causal_mask<T>(n_prefix + n_obs);
}

// Mask for per-query prediction refinement: n_ctx context tokens followed by
// one token per query. Context tokens are causally masked among themselves
// (or fully connected when causal_context is false) and never see queries.
// Query q attends to context tokens 1..prefix[q] and to itself only, so
// queries with different prefixes model different dataset sizes in one pass
// and stay isolated from each other.
template <typename T>
TensorT<T> implicit_mask(int n_ctx, const std::vector<int>& query_prefixes,
                         bool causal_context = true) {
  if (n_ctx < 1) throw std::invalid_argument("implicit_mask: n_ctx < 1");
  int n_q = int(query_prefixes.size());
  int n = n_ctx + n_q;
  TensorT<T> m = TensorT<T>::full(n, n, T(kMaskBlocked));
  for (int i = 0; i < n_ctx; ++i)
    for (int j = 0; j < n_ctx; ++j)
      if (!causal_context || j <= i) m(i, j) = T(0);
  for (int q = 0; q < n_q; ++q) {
    int prefix = query_prefixes[size_t(q)];
    if (prefix < 1 || prefix > n_ctx)
      throw std::out_of_range("implicit_mask: prefix length out of range");
    int row = n_ctx + q;
    for (int j = 0; j < prefix; ++j) m(row, j) = T(0);
    m(row, row) = T(0);
  }
  return m;
}

// Token i attends to token j iff they share a group id. Used for axial
// attention over a (sample x node) grid by alternating row groups and
// column groups across layers.
template <typename T>
TensorT<T> same_group_mask(const std::vector<int>& groups) {
  int n = int(groups.size());
  TensorT<T> m = TensorT<T>::full(n, n, T(kMaskBlocked));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (groups[size_t(i)] == groups[size_t(j)]) m(i, j) = T(0);
  return m;
}

// Context length for one non-causal training iteration, uniform on
// {1..max_context}.
inline int sample_noncausal_context(Rng& rng, int max_context) {
  if (max_context < 1)
    throw std::invalid_argument("sample_noncausal_context: max_context < 1");
  std::uniform_int_distribution<int> dist(1, max_context);
  return dist(rng);
}

}  // namespace amort
