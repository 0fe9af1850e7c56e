#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "amort/tensor.hpp"

// Task-distribution generators. Every generator is a pure function of
// (config, seed): the same pair always reproduces the same task, and the
// hidden ground truth stays out of anything a model consumes.
namespace amort {

enum class TaskFamily { linreg, projection, gmm, scm };

inline const char* to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::linreg: return "linreg";
    case TaskFamily::projection: return "projection";
    case TaskFamily::gmm: return "gmm";
    case TaskFamily::scm: return "scm";
  }
  return "?";
}

inline TaskFamily task_family_from_string(const std::string& s) {
  if (s == "linreg") return TaskFamily::linreg;
  if (s == "projection") return TaskFamily::projection;
  if (s == "gmm") return TaskFamily::gmm;
  if (s == "scm") return TaskFamily::scm;
  throw std::invalid_argument("unknown task family: " + s);
}

enum class ScmMechanism { lin, rff };
enum class ScmGraph { erdos_renyi, scale_free };
enum class ScmNoise { gaussian, laplace };

struct TaskFamilyConfig {
  TaskFamily family = TaskFamily::linreg;
  int n_train = 512;
  int n_valid = 128;

  // linreg
  int dim = 16;
  double noise = 0.25;

  // projection + built-in base dataset
  int classes = 10;
  int per_class = 64;
  int raw_dim = 64;
  double base_noise = 0.1;
  double prototype_shift = 0.0;  // nonzero for shifted (OoD) base families
  int proj_dim = 16;
  bool permutation_labels_only = false;
  std::string idx_images;  // optional external base in IDX format
  std::string idx_labels;

  // gmm
  int gmm_dim = 2;
  int k_max = 8;

  // scm
  int scm_nodes = 5;
  ScmMechanism mechanism = ScmMechanism::lin;
  ScmGraph graph = ScmGraph::erdos_renyi;
  ScmNoise scm_noise = ScmNoise::gaussian;
  bool scm_ood_params = false;
  int rff_features = 16;
  double scm_noise_min = 0.5;
  double scm_noise_max = 1.0;
};

template <typename T>
struct Dataset {
  TensorT<T> x;            // [n, d_x]
  TensorT<T> y;            // [n, d_y] regression targets; empty otherwise
  std::vector<int> labels; // classification labels; empty otherwise
  int64_t size() const { return x.rows(); }
};

// Hidden ground truth. Never fed to a model; metrics may read it.
template <typename T>
struct LinRegTruth {
  TensorT<T> w;  // [dim, 1]
  double noise = 0.0;
};

template <typename T>
struct ProjectionTruth {
  TensorT<T> projection;       // [raw_dim, proj_dim]
  std::vector<int> label_map;  // old class -> new class slot
};

template <typename T>
struct GmmTruth {
  TensorT<T> means;  // [n_components, dim]
  double component_std = 0.3;
};

struct ScmNodeMechanism {
  ScmMechanism kind = ScmMechanism::lin;
  std::vector<double> lin_weights;  // one per parent
  double bias = 0.0;
  // rff: f(z) = out_scale * sqrt(2/R) * sum_r amp[r] * cos(omega[r].z + phase[r])
  std::vector<std::vector<double>> rff_omega;
  std::vector<double> rff_phase;
  std::vector<double> rff_amp;
  double rff_out_scale = 1.0;
  ScmNoise noise = ScmNoise::gaussian;
  double noise_scale = 1.0;
};

struct ScmSpec {
  int d = 0;
  std::vector<uint8_t> adj;    // adj[i*d+j] == 1 iff edge i -> j
  std::vector<int> order;      // topological order, parents first
  std::vector<ScmNodeMechanism> mechanisms;

  bool edge(int i, int j) const { return adj[size_t(i) * size_t(d) + size_t(j)] != 0; }
  int n_edges() const {
    int e = 0;
    for (uint8_t v : adj) e += v;
    return e;
  }
  std::vector<int> parents(int j) const {
    std::vector<int> out;
    for (int i = 0; i < d; ++i)
      if (edge(i, j)) out.push_back(i);
    return out;
  }
};

template <typename T>
struct Task {
  TaskFamily family = TaskFamily::linreg;
  Dataset<T> train;
  Dataset<T> valid;
  std::variant<LinRegTruth<T>, ProjectionTruth<T>, GmmTruth<T>, ScmSpec> hidden;
  uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Linear regression: x ~ N(0,I), w ~ N(0,I), y = w'x + noise.

template <typename T>
Task<T> sample_linreg_task(const TaskFamilyConfig& cfg, uint64_t seed) {
  if (cfg.dim < 1) throw std::invalid_argument("linreg: dim < 1");
  Rng rng(derive_seed(seed, 1));
  Task<T> task;
  task.family = TaskFamily::linreg;
  task.seed = seed;
  TensorT<double> w = TensorT<double>::randn(cfg.dim, 1, rng);
  auto draw = [&](int n) {
    Dataset<T> d;
    TensorT<double> x = TensorT<double>::randn(n, cfg.dim, rng);
    TensorT<double> y(n, 1);
    y.map().noalias() = x.map() * w.map();
    if (cfg.noise > 0) {
      std::normal_distribution<double> eps(0.0, cfg.noise);
      for (auto& v : y.data()) v += eps(rng);
    }
    d.x = x.template cast<T>();
    d.y = y.template cast<T>();
    return d;
  };
  task.train = draw(cfg.n_train);
  task.valid = draw(cfg.n_valid);
  task.hidden = LinRegTruth<T>{w.template cast<T>(), cfg.noise};
  return task;
}

// ---------------------------------------------------------------------------
// Built-in labeled base dataset: one Gaussian prototype per class plus
// per-sample noise. Linearly separable at low noise; a desk-scale stand-in
// for file-based image datasets (which load through the IDX reader).

template <typename T>
Dataset<T> builtin_base_dataset(int classes, int per_class, int raw_dim,
                                double noise, double prototype_shift,
                                uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("base dataset: classes < 2");
  if (per_class < 1 || raw_dim < 1)
    throw std::invalid_argument("base dataset: bad dimensions");
  Rng rng(derive_seed(seed, 2));
  TensorT<double> prototypes = TensorT<double>::randn(classes, raw_dim, rng);
  if (prototype_shift != 0.0)
    prototypes.map().array() += prototype_shift;
  Dataset<T> d;
  d.x = TensorT<T>(int64_t(classes) * per_class, raw_dim);
  d.labels.resize(size_t(classes) * size_t(per_class));
  std::normal_distribution<double> eps(0.0, 1.0);
  int64_t row = 0;
  for (int c = 0; c < classes; ++c) {
    for (int s = 0; s < per_class; ++s, ++row) {
      for (int64_t f = 0; f < raw_dim; ++f)
        d.x(row, f) = T(prototypes(c, f) + noise * eps(rng));
      d.labels[size_t(row)] = c;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Random-projection classification: x -> P'x with P ~ N(0,1), labels pushed
// through a class map that may merge or rename classes but never splits one.

template <typename T>
Task<T> sample_projection_task(const Dataset<T>& base,
                               const TaskFamilyConfig& cfg, uint64_t seed,
                               bool debug_identity = false) {
  if (base.size() == 0) throw std::invalid_argument("projection: empty base");
  int n_classes = 1 + *std::max_element(base.labels.begin(), base.labels.end());
  if (n_classes < 2) throw std::invalid_argument("projection: need >= 2 classes");
  int raw_dim = int(base.x.cols());
  int proj_dim = debug_identity ? raw_dim : cfg.proj_dim;

  Rng rng(derive_seed(seed, 3));
  TensorT<double> proj(raw_dim, proj_dim);
  std::vector<int> label_map(size_t(n_classes), 0);
  if (debug_identity) {
    for (int i = 0; i < raw_dim; ++i) proj(i, i) = 1.0;
    for (int c = 0; c < n_classes; ++c) label_map[size_t(c)] = c;
  } else {
    proj = TensorT<double>::randn(raw_dim, proj_dim, rng);
    if (cfg.permutation_labels_only) {
      std::iota(label_map.begin(), label_map.end(), 0);
      std::shuffle(label_map.begin(), label_map.end(), rng);
    } else {
      std::uniform_int_distribution<int> slot(0, n_classes - 1);
      for (auto& m : label_map) m = slot(rng);
    }
  }

  // Disjoint train/valid index sets over the base.
  std::vector<int64_t> idx(size_t(base.size()));
  std::iota(idx.begin(), idx.end(), 0);
  if (!debug_identity) std::shuffle(idx.begin(), idx.end(), rng);
  int64_t want = cfg.n_train + cfg.n_valid;
  if (want > base.size())
    throw std::invalid_argument("projection: base dataset too small for splits");

  TensorT<double> base_x = base.x.template cast<double>();
  auto take = [&](int64_t from, int64_t count) {
    Dataset<T> d;
    TensorT<double> x(count, proj_dim);
    d.labels.resize(size_t(count));
    for (int64_t r = 0; r < count; ++r) {
      int64_t src = idx[size_t(from + r)];
      x.map().row(r).noalias() = base_x.map().row(src) * proj.map();
      d.labels[size_t(r)] = label_map[size_t(base.labels[size_t(src)])];
    }
    d.x = x.template cast<T>();
    return d;
  };

  Task<T> task;
  task.family = TaskFamily::projection;
  task.seed = seed;
  task.train = take(0, cfg.n_train);
  task.valid = take(cfg.n_train, cfg.n_valid);
  task.hidden = ProjectionTruth<T>{proj.template cast<T>(), label_map};
  return task;
}

template <typename T>
Task<T> sample_projection_task(const TaskFamilyConfig& cfg, uint64_t seed) {
  Dataset<T> base;
  if (!cfg.idx_images.empty()) {
    throw std::invalid_argument(
        "projection: IDX base must be loaded by the caller (see idx.hpp)");
  }
  base = builtin_base_dataset<T>(cfg.classes, cfg.per_class, cfg.raw_dim,
                                 cfg.base_noise, cfg.prototype_shift,
                                 derive_seed(seed, 4));
  return sample_projection_task<T>(base, cfg, seed);
}

// ---------------------------------------------------------------------------
// Gaussian mixture generation: component count uniform on {1..k_max},
// means ~ N(0, 5^2 I), fixed component std 0.3, equal weights, no labels.

template <typename T>
Task<T> sample_gmm_task(const TaskFamilyConfig& cfg, uint64_t seed) {
  if (cfg.k_max < 1) throw std::invalid_argument("gmm: k_max < 1");
  constexpr double kMeanStd = 5.0;
  constexpr double kComponentStd = 0.3;
  Rng rng(derive_seed(seed, 5));
  std::uniform_int_distribution<int> kd(1, cfg.k_max);
  int n_comp = kd(rng);
  TensorT<double> means =
      TensorT<double>::randn(n_comp, cfg.gmm_dim, rng, kMeanStd);
  auto draw = [&](int n) {
    Dataset<T> d;
    TensorT<double> x(n, cfg.gmm_dim);
    std::uniform_int_distribution<int> comp(0, n_comp - 1);
    std::normal_distribution<double> eps(0.0, kComponentStd);
    for (int64_t r = 0; r < n; ++r) {
      int c = comp(rng);
      for (int64_t f = 0; f < cfg.gmm_dim; ++f)
        x(r, f) = means(c, f) + eps(rng);
    }
    d.x = x.template cast<T>();
    return d;
  };
  Task<T> task;
  task.family = TaskFamily::gmm;
  task.seed = seed;
  task.train = draw(cfg.n_train);
  task.valid = draw(cfg.n_valid);
  task.hidden = GmmTruth<T>{means.template cast<T>(), kComponentStd};
  return task;
}

// ---------------------------------------------------------------------------
// Structural causal models.

namespace detail {

inline std::vector<uint8_t> sample_dag(int d, ScmGraph kind,
                                       const std::vector<int>& order,
                                       Rng& rng) {
  std::vector<uint8_t> adj(size_t(d) * size_t(d), 0);
  auto add_edge = [&](int from_pos, int to_pos) {
    adj[size_t(order[size_t(from_pos)]) * size_t(d) +
        size_t(order[size_t(to_pos)])] = 1;
  };
  if (kind == ScmGraph::erdos_renyi) {
    double p = std::min(1.0, 2.0 / std::max(1, d - 1));  // expected degree 2
    std::bernoulli_distribution edge(p);
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j)
        if (edge(rng)) add_edge(i, j);
  } else {
    // Preferential attachment (m = 1), oriented along the sampling order.
    std::vector<int> degree(size_t(d), 0);
    for (int j = 1; j < d; ++j) {
      int total = 0;
      for (int i = 0; i < j; ++i) total += degree[size_t(i)] + 1;
      std::uniform_int_distribution<int> pick(1, total);
      int ball = pick(rng);
      int target = 0;
      for (int i = 0; i < j; ++i) {
        ball -= degree[size_t(i)] + 1;
        if (ball <= 0) {
          target = i;
          break;
        }
      }
      add_edge(target, j);
      degree[size_t(target)]++;
      degree[size_t(j)]++;
    }
  }
  return adj;
}

inline double sample_signed_uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  double v = mag(rng);
  return sign(rng) ? v : -v;
}

inline double sample_two_band(Rng& rng, double a0, double a1, double b0,
                              double b1) {
  std::bernoulli_distribution which(0.5);
  std::uniform_real_distribution<double> first(a0, a1), second(b0, b1);
  return which(rng) ? first(rng) : second(rng);
}

}  // namespace detail

inline ScmSpec sample_scm_spec(const TaskFamilyConfig& cfg, uint64_t seed) {
  if (cfg.scm_nodes < 2) throw std::invalid_argument("scm: d < 2");
  Rng rng(derive_seed(seed, 6));
  ScmSpec spec;
  spec.d = cfg.scm_nodes;
  spec.order.resize(size_t(spec.d));
  std::iota(spec.order.begin(), spec.order.end(), 0);
  std::shuffle(spec.order.begin(), spec.order.end(), rng);
  spec.adj = detail::sample_dag(spec.d, cfg.graph, spec.order, rng);

  std::uniform_real_distribution<double> bias_dist(-3.0, 3.0);
  std::uniform_real_distribution<double> noise_dist(cfg.scm_noise_min,
                                                    cfg.scm_noise_max);
  spec.mechanisms.resize(size_t(spec.d));
  for (int j = 0; j < spec.d; ++j) {
    ScmNodeMechanism& m = spec.mechanisms[size_t(j)];
    m.kind = cfg.mechanism;
    m.noise = cfg.scm_noise;
    m.noise_scale = noise_dist(rng);
    m.bias = bias_dist(rng);
    auto parents = spec.parents(j);
    if (m.kind == ScmMechanism::lin) {
      for (size_t p = 0; p < parents.size(); ++p)
        m.lin_weights.push_back(
            cfg.scm_ood_params
                ? (std::bernoulli_distribution(0.5)(rng)
                       ? detail::sample_signed_uniform(rng, 0.5, 2.0)
                       : detail::sample_signed_uniform(rng, 2.0, 4.0))
                : detail::sample_signed_uniform(rng, 1.0, 3.0));
    } else if (!parents.empty()) {
      double length_scale =
          cfg.scm_ood_params
              ? std::uniform_real_distribution<double>(10.0, 20.0)(rng)
              : std::uniform_real_distribution<double>(7.0, 10.0)(rng);
      m.rff_out_scale = cfg.scm_ood_params
                            ? detail::sample_two_band(rng, 8, 12, 18, 22)
                            : detail::sample_two_band(rng, 5, 8, 8, 12);
      std::normal_distribution<double> omega(0.0, 1.0 / length_scale);
      std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
      std::normal_distribution<double> amp(0.0, 1.0);
      m.rff_omega.resize(size_t(cfg.rff_features));
      for (int r = 0; r < cfg.rff_features; ++r) {
        m.rff_omega[size_t(r)].resize(parents.size());
        for (size_t p = 0; p < parents.size(); ++p)
          m.rff_omega[size_t(r)][p] = omega(rng);
        m.rff_phase.push_back(phase(rng));
        m.rff_amp.push_back(amp(rng));
      }
    }
  }
  return spec;
}

inline TensorT<double> sample_scm_data(const ScmSpec& spec, int n, Rng& rng) {
  TensorT<double> x(n, spec.d);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  for (int64_t r = 0; r < n; ++r) {
    for (int pos = 0; pos < spec.d; ++pos) {
      int j = spec.order[size_t(pos)];
      const ScmNodeMechanism& m = spec.mechanisms[size_t(j)];
      auto parents = spec.parents(j);
      double v = m.bias;
      if (m.kind == ScmMechanism::lin) {
        for (size_t p = 0; p < parents.size(); ++p)
          v += m.lin_weights[p] * x(r, parents[p]);
      } else if (!parents.empty()) {
        int R = int(m.rff_amp.size());
        double acc = 0.0;
        for (int f = 0; f < R; ++f) {
          double arg = m.rff_phase[size_t(f)];
          for (size_t p = 0; p < parents.size(); ++p)
            arg += m.rff_omega[size_t(f)][p] * x(r, parents[p]);
          acc += m.rff_amp[size_t(f)] * std::cos(arg);
        }
        v += m.rff_out_scale * std::sqrt(2.0 / std::max(1, R)) * acc;
      }
      double noise = m.noise == ScmNoise::gaussian
                         ? gauss(rng) * m.noise_scale
                         : (unit(rng) < 0.5 ? -1.0 : 1.0) * expo(rng) *
                               m.noise_scale / std::sqrt(2.0);
      x(r, j) = v + noise;
    }
  }
  return x;
}

template <typename T>
Task<T> sample_scm_task(const TaskFamilyConfig& cfg, uint64_t seed) {
  ScmSpec spec = sample_scm_spec(cfg, seed);
  Rng rng(derive_seed(seed, 7));
  Task<T> task;
  task.family = TaskFamily::scm;
  task.seed = seed;
  task.train.x = sample_scm_data(spec, cfg.n_train, rng).template cast<T>();
  task.valid.x = sample_scm_data(spec, cfg.n_valid, rng).template cast<T>();
  task.hidden = spec;
  return task;
}

// ---------------------------------------------------------------------------
// Dispatch plus record-based serialization: a task is reproduced exactly
// from (family config, seed).

template <typename T>
Task<T> sample_task(const TaskFamilyConfig& cfg, uint64_t seed) {
  switch (cfg.family) {
    case TaskFamily::linreg: return sample_linreg_task<T>(cfg, seed);
    case TaskFamily::projection: return sample_projection_task<T>(cfg, seed);
    case TaskFamily::gmm: return sample_gmm_task<T>(cfg, seed);
    case TaskFamily::scm: return sample_scm_task<T>(cfg, seed);
  }
  throw std::logic_error("sample_task: bad family");
}

// ---------------------------------------------------------------------------
// Refinement minibatches: k random subsets of the train split (each batch is
// drawn without replacement so a batch is a proper subset; batches are
// independent of each other) plus one validation batch from the valid split,
// disjoint from train by construction.

struct MinibatchPlan {
  std::vector<std::vector<int64_t>> train_batches;
  std::vector<int64_t> valid_batch;
};

template <typename T>
MinibatchPlan split_minibatches(const Task<T>& task, int batch_size, int k,
                                uint64_t seed, int valid_batch_size = 32) {
  if (batch_size < 1 || k < 1)
    throw std::invalid_argument("split_minibatches: bad batch/k");
  if (task.train.size() < batch_size)
    throw std::invalid_argument("split_minibatches: train split too small");
  Rng rng(derive_seed(seed, 8));
  MinibatchPlan plan;
  std::vector<int64_t> pool(size_t(task.train.size()));
  std::iota(pool.begin(), pool.end(), 0);
  for (int b = 0; b < k; ++b) {
    for (int i = 0; i < batch_size; ++i) {
      std::uniform_int_distribution<int64_t> pick(i, int64_t(pool.size()) - 1);
      std::swap(pool[size_t(i)], pool[size_t(pick(rng))]);
    }
    plan.train_batches.emplace_back(pool.begin(), pool.begin() + batch_size);
  }
  int64_t vb = std::min<int64_t>(valid_batch_size, task.valid.size());
  std::vector<int64_t> vpool(size_t(task.valid.size()));
  std::iota(vpool.begin(), vpool.end(), 0);
  for (int64_t i = 0; i < vb; ++i) {
    std::uniform_int_distribution<int64_t> pick(i, int64_t(vpool.size()) - 1);
    std::swap(vpool[size_t(i)], vpool[size_t(pick(rng))]);
  }
  plan.valid_batch.assign(vpool.begin(), vpool.begin() + vb);
  return plan;
}

template <typename T>
Dataset<T> gather_rows(const Dataset<T>& d, const std::vector<int64_t>& idx) {
  Dataset<T> out;
  out.x = TensorT<T>(int64_t(idx.size()), d.x.cols());
  for (size_t r = 0; r < idx.size(); ++r)
    for (int64_t c = 0; c < d.x.cols(); ++c)
      out.x(int64_t(r), c) = d.x(idx[r], c);
  if (d.y.numel() > 0) {
    out.y = TensorT<T>(int64_t(idx.size()), d.y.cols());
    for (size_t r = 0; r < idx.size(); ++r)
      for (int64_t c = 0; c < d.y.cols(); ++c)
        out.y(int64_t(r), c) = d.y(idx[r], c);
  }
  if (!d.labels.empty()) {
    out.labels.resize(idx.size());
    for (size_t r = 0; r < idx.size(); ++r)
      out.labels[r] = d.labels[size_t(idx[r])];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recursive topological-order inference. The scorer maps an n x m data
// matrix (columns = currently active nodes) to one leaf score per column;
// each round removes the argmax column (lowest index wins ties). Leaves are
// found last-to-first, so the removal sequence reversed is the order.

template <typename T>
std::vector<int> infer_topological_order(
    const std::function<std::vector<double>(const TensorT<T>&)>& leaf_scores,
    const TensorT<T>& data) {
  int d = int(data.cols());
  std::vector<int> active(size_t(d), 0);
  std::iota(active.begin(), active.end(), 0);
  std::vector<int> removal;
  while (!active.empty()) {
    TensorT<T> sub(data.rows(), int64_t(active.size()));
    for (int64_t r = 0; r < data.rows(); ++r)
      for (size_t c = 0; c < active.size(); ++c)
        sub(r, int64_t(c)) = data(r, active[c]);
    std::vector<double> scores = leaf_scores(sub);
    if (scores.size() != active.size())
      throw std::runtime_error("leaf scorer returned wrong arity");
    size_t best = 0;
    for (size_t c = 1; c < scores.size(); ++c)
      if (scores[c] > scores[best]) best = c;
    removal.push_back(active[best]);
    active.erase(active.begin() + int64_t(best));
  }
  return {removal.rbegin(), removal.rend()};
}

}  // namespace amort
