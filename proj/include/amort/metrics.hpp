#pragma once

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "amort/tasks.hpp"
#include "amort/tensor.hpp"

namespace amort {

// ---------------------------------------------------------------------------
// Exact minimum-cost assignment (Hungarian with potentials, O(n^3)).
// Approximate transport solvers are deliberately not used here: the
// point-set distance below is defined through the exact optimum.

inline std::vector<int> min_cost_assignment(const TensorT<double>& cost) {
  if (cost.rows() != cost.cols())
    throw std::invalid_argument("assignment: cost matrix must be square");
  int n = int(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(size_t(n) + 1, 0.0), v(size_t(n) + 1, 0.0);
  std::vector<int> match(size_t(n) + 1, 0), way(size_t(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(size_t(n) + 1, inf);
    std::vector<char> used(size_t(n) + 1, 0);
    do {
      used[size_t(j0)] = 1;
      int i0 = match[size_t(j0)], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[size_t(j)]) continue;
        double cur = cost(i0 - 1, j - 1) - u[size_t(i0)] - v[size_t(j)];
        if (cur < minv[size_t(j)]) {
          minv[size_t(j)] = cur;
          way[size_t(j)] = j0;
        }
        if (minv[size_t(j)] < delta) {
          delta = minv[size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[size_t(j)]) {
          u[size_t(match[size_t(j)])] += delta;
          v[size_t(j)] -= delta;
        } else {
          minv[size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[size_t(j0)] != 0);
    do {
      int j1 = way[size_t(j0)];
      match[size_t(j0)] = match[size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(size_t(n), -1);
  for (int j = 1; j <= n; ++j)
    if (match[size_t(j)] > 0) row_to_col[size_t(match[size_t(j)] - 1)] = j - 1;
  return row_to_col;
}

// Permutation point-set distance: (min over pairings of the mean p-norm^p)
// ^(1/p) between two equally sized sample sets.
template <typename T>
double wasserstein(const TensorT<T>& a, const TensorT<T>& b, int p) {
  if (p != 1 && p != 2) throw std::invalid_argument("wasserstein: p must be 1 or 2");
  if (a.rows() != b.rows())
    throw std::invalid_argument("wasserstein: sample counts differ");
  if (a.cols() != b.cols())
    throw std::invalid_argument("wasserstein: dimensions differ");
  int64_t n = a.rows();
  if (n == 0) throw std::invalid_argument("wasserstein: empty sets");
  TensorT<double> cost(n, n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double c = 0.0;
      for (int64_t f = 0; f < a.cols(); ++f) {
        double d = double(a(i, f)) - double(b(j, f));
        c += p == 1 ? std::abs(d) : d * d;
      }
      cost(i, j) = c;
    }
  }
  std::vector<int> assign = min_cost_assignment(cost);
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) total += cost(i, assign[size_t(i)]);
  double mean = total / double(n);
  return p == 1 ? mean : std::sqrt(mean);
}

// ---------------------------------------------------------------------------
// Pointwise metrics

template <typename T>
double mse(const TensorT<T>& pred, const TensorT<T>& target) {
  pred.require_same_shape(target);
  if (pred.numel() == 0) throw std::invalid_argument("mse: empty input");
  double s = 0.0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    double d = double(pred.data()[size_t(i)]) - double(target.data()[size_t(i)]);
    s += d * d;
  }
  return s / double(pred.numel());
}

// Lowest index wins ties.
template <typename T>
int argmax_row(const TensorT<T>& m, int64_t row) {
  int best = 0;
  for (int64_t c = 1; c < m.cols(); ++c)
    if (m(row, c) > m(row, best)) best = int(c);
  return best;
}

inline double classification_error(const std::vector<int>& predictions,
                                   const std::vector<int>& labels) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("classification_error: length mismatch");
  if (predictions.empty())
    throw std::invalid_argument("classification_error: empty input");
  int correct = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (predictions[i] == labels[i]) ++correct;
  return 100.0 * (1.0 - double(correct) / double(labels.size()));
}

template <typename T>
double classification_error_logits(const TensorT<T>& logits,
                                   const std::vector<int>& labels) {
  std::vector<int> preds(size_t(logits.rows()));
  for (int64_t r = 0; r < logits.rows(); ++r) preds[size_t(r)] = argmax_row(logits, r);
  return classification_error(preds, labels);
}

// Fraction of directed edges whose endpoints the predicted order reverses.
inline double order_error(const std::vector<int>& predicted_order,
                          const ScmSpec& spec) {
  if (int(predicted_order.size()) != spec.d)
    throw std::invalid_argument("order_error: order has wrong length");
  std::vector<int> position(size_t(spec.d), -1);
  for (int pos = 0; pos < spec.d; ++pos) {
    int node = predicted_order[size_t(pos)];
    if (node < 0 || node >= spec.d || position[size_t(node)] != -1)
      throw std::invalid_argument("order_error: not a permutation");
    position[size_t(node)] = pos;
  }
  int edges = 0, violated = 0;
  for (int i = 0; i < spec.d; ++i) {
    for (int j = 0; j < spec.d; ++j) {
      if (!spec.edge(i, j)) continue;
      ++edges;
      if (position[size_t(i)] > position[size_t(j)]) ++violated;
    }
  }
  return edges == 0 ? 0.0 : double(violated) / double(edges);
}

// ---------------------------------------------------------------------------
// Aggregated evaluation records

struct MetricsRecord {
  std::string family;
  std::string regime;
  std::string signal;
  int steps = 0;
  std::string metric;
  double mean = 0.0;
  double se = 0.0;
  int n_tasks = 0;
  bool ood = false;
  bool se_defined = true;  // false when n_tasks < 2 (se reported as 0)
};

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  bool se_defined = false;
};

inline MeanSe mean_and_se(const std::vector<double>& xs) {
  MeanSe out;
  if (xs.empty()) return out;
  double m = 0.0;
  for (double x : xs) m += x;
  m /= double(xs.size());
  out.mean = m;
  if (xs.size() >= 2) {
    double var = 0.0;
    for (double x : xs) var += (x - m) * (x - m);
    var /= double(xs.size() - 1);
    out.se = std::sqrt(var / double(xs.size()));
    out.se_defined = true;
  }
  return out;
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median: empty");
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline std::string metrics_csv_header() {
  return "family,regime,signal,steps,metric,mean,se,n_tasks,ood";
}

inline std::string to_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream out;
  out.precision(17);
  out << metrics_csv_header() << "\n";
  for (const auto& r : records)
    out << r.family << ',' << r.regime << ',' << r.signal << ',' << r.steps
        << ',' << r.metric << ',' << r.mean << ',' << r.se << ',' << r.n_tasks
        << ',' << (r.ood ? 1 : 0) << "\n";
  return out.str();
}

inline std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header())
    throw std::runtime_error("metrics csv: bad header");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    MetricsRecord r;
    std::getline(ls, r.family, ',');
    std::getline(ls, r.regime, ',');
    std::getline(ls, r.signal, ',');
    std::getline(ls, field, ',');
    r.steps = std::stoi(field);
    std::getline(ls, r.metric, ',');
    std::getline(ls, field, ',');
    r.mean = std::stod(field);
    std::getline(ls, field, ',');
    r.se = std::stod(field);
    std::getline(ls, field, ',');
    r.n_tasks = std::stoi(field);
    std::getline(ls, field, ',');
    r.ood = field == "1";
    r.se_defined = r.n_tasks >= 2;
    out.push_back(r);
  }
  return out;
}

}  // namespace amort
