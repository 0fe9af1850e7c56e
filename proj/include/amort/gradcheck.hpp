#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "amort/autodiff.hpp"
#include "amort/tensor.hpp"

namespace amort::ad {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_coord = -1;
  std::map<std::string, double> per_param;

  bool passes(double tol) const { return max_rel_err < tol; }
};

// Central-difference check of backward() against the loss built by fn().
// fn must be deterministic for fixed parameter values. When
// max_coords_per_param >= 0, only that many randomly chosen coordinates of
// each parameter are probed (the analytic side is still the full backward
// pass); -1 probes every coordinate.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Var<T>()>& fn,
                                  ParamStore<T>& store, double step,
                                  int max_coords_per_param = -1,
                                  uint64_t coord_seed = 0) {
  if (step <= 0) throw std::invalid_argument("finite_diff_check: step <= 0");
  Var<T> loss = fn();
  if (!loss.val().all_finite())
    throw std::runtime_error("finite_diff_check: fn returned non-finite loss");
  auto grads = backward_named(loss, store);

  Rng coord_rng(derive_seed(coord_seed, 0x5eedc0de));
  GradCheckReport report;
  auto eval = [&]() {
    NoGradGuard ng;
    double v = double(fn().val().item());
    if (!std::isfinite(v))
      throw std::runtime_error("finite_diff_check: fn returned non-finite");
    return v;
  };

  for (const auto& name : store.names()) {
    Var<T>& p = store.get(name);
    const TensorT<T>& g = grads.at(name);
    int64_t n = p.val().numel();
    std::vector<int64_t> coords;
    if (max_coords_per_param < 0 || int64_t(max_coords_per_param) >= n) {
      coords.resize(size_t(n));
      for (int64_t i = 0; i < n; ++i) coords[size_t(i)] = i;
    } else {
      std::vector<int64_t> pool(size_t(n), 0);
      for (int64_t i = 0; i < n; ++i) pool[size_t(i)] = i;
      for (int i = 0; i < max_coords_per_param; ++i) {
        std::uniform_int_distribution<int64_t> pick(i, n - 1);
        std::swap(pool[size_t(i)], pool[size_t(pick(coord_rng))]);
        coords.push_back(pool[size_t(i)]);
      }
    }
    double param_max = 0.0;
    for (int64_t i : coords) {
      T saved = p.mutable_val().data()[size_t(i)];
      p.mutable_val().data()[size_t(i)] = saved + T(step);
      double f_plus = eval();
      p.mutable_val().data()[size_t(i)] = saved - T(step);
      double f_minus = eval();
      p.mutable_val().data()[size_t(i)] = saved;
      double numeric = (f_plus - f_minus) / (2.0 * step);
      double analytic = double(g.data()[size_t(i)]);
      double rel = std::abs(analytic - numeric) /
                   (std::abs(analytic) + std::abs(numeric) + 1e-12);
      param_max = std::max(param_max, rel);
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_coord = i;
      }
    }
    report.per_param[name] = param_max;
  }
  return report;
}

}  // namespace amort::ad
