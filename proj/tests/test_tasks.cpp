#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <set>

#include "amort/idx.hpp"
#include "amort/tasks.hpp"

using namespace amort;

namespace {

// Test-side ordinary-least-squares oracle (independent of the library).
TensorT<double> ols_fit(const TensorT<double>& x, const TensorT<double>& y) {
  Eigen::MatrixXd X(x.rows(), x.cols());
  Eigen::VectorXd Y(y.rows());
  for (int64_t r = 0; r < x.rows(); ++r) {
    for (int64_t c = 0; c < x.cols(); ++c) X(r, c) = x(r, c);
    Y(r) = y(r, 0);
  }
  Eigen::VectorXd w = (X.transpose() * X).ldlt().solve(X.transpose() * Y);
  TensorT<double> out(x.cols(), 1);
  for (int64_t i = 0; i < x.cols(); ++i) out(i, 0) = w(i);
  return out;
}

template <typename T>
bool bit_equal(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[size_t(i)] != b.data()[size_t(i)]) return false;
  return true;
}

}  // namespace

TEST_CASE("linear regression tasks") {
  TaskFamilyConfig cfg;
  cfg.family = TaskFamily::linreg;

  SECTION("paper-scale dimension runs") {
    cfg.dim = 100;
    cfg.n_train = 32;
    cfg.n_valid = 8;
    auto task = sample_linreg_task<float>(cfg, 1);
    CHECK(task.train.x.cols() == 100);
    CHECK(task.train.x.rows() == 32);
    CHECK(std::get<LinRegTruth<float>>(task.hidden).w.rows() == 100);
  }

  SECTION("noiseless tasks are exactly linear and OLS recovers w") {
    cfg.dim = 8;
    cfg.noise = 0.0;
    cfg.n_train = 64;
    auto task = sample_linreg_task<double>(cfg, 7);
    auto w_hat = ols_fit(task.train.x, task.train.y);
    const auto& w = std::get<LinRegTruth<double>>(task.hidden).w;
    for (int64_t i = 0; i < 8; ++i)
      CHECK(std::abs(w_hat(i, 0) - w(i, 0)) < 1e-4);
  }

  SECTION("output variance matches |w|^2 + noise^2") {
    cfg.dim = 8;
    cfg.noise = 0.25;
    cfg.n_train = 60000;
    cfg.n_valid = 1;
    auto task = sample_linreg_task<double>(cfg, 11);
    const auto& w = std::get<LinRegTruth<double>>(task.hidden).w;
    double expected = double(w.squared_norm()) + 0.0625;
    double mean = 0.0, var = 0.0;
    for (auto v : task.train.y.data()) mean += v;
    mean /= double(task.train.y.numel());
    for (auto v : task.train.y.data()) var += (v - mean) * (v - mean);
    var /= double(task.train.y.numel() - 1);
    CHECK(std::abs(var - expected) / expected < 0.05);
  }

  SECTION("same seed reproduces the task exactly") {
    auto a = sample_linreg_task<float>(cfg, 123);
    auto b = sample_linreg_task<float>(cfg, 123);
    auto c = sample_linreg_task<float>(cfg, 124);
    CHECK(bit_equal(a.train.x, b.train.x));
    CHECK(bit_equal(a.train.y, b.train.y));
    CHECK_FALSE(bit_equal(a.train.y, c.train.y));
  }
}

TEST_CASE("builtin base dataset") {
  SECTION("zero noise collapses samples onto prototypes") {
    auto d = builtin_base_dataset<float>(3, 4, 8, 0.0, 0.0, 5);
    for (int c = 0; c < 3; ++c)
      for (int s = 1; s < 4; ++s)
        CHECK(bit_equal(d.x.row(c * 4), d.x.row(c * 4 + s)));
  }
  SECTION("fixed seed gives identical bytes") {
    auto a = builtin_base_dataset<float>(10, 8, 64, 0.1, 0.0, 42);
    auto b = builtin_base_dataset<float>(10, 8, 64, 0.1, 0.0, 42);
    CHECK(bit_equal(a.x, b.x));
    CHECK(a.labels == b.labels);
  }
  SECTION("linear probe reaches under 2% error at noise 0.1") {
    auto d = builtin_base_dataset<double>(10, 40, 64, 0.1, 0.0, 9);
    // Ridge one-vs-all probe as the oracle.
    int n = int(d.size());
    Eigen::MatrixXd X(n, 65);
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, 10);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < 64; ++c) X(r, c) = d.x(r, c);
      X(r, 64) = 1.0;
      Y(r, d.labels[size_t(r)]) = 1.0;
    }
    Eigen::MatrixXd A =
        X.transpose() * X + 1e-3 * Eigen::MatrixXd::Identity(65, 65);
    Eigen::MatrixXd W = A.ldlt().solve(X.transpose() * Y);
    Eigen::MatrixXd scores = X * W;
    int wrong = 0;
    for (int r = 0; r < n; ++r) {
      int best = 0;
      for (int c = 1; c < 10; ++c)
        if (scores(r, c) > scores(r, best)) best = c;
      if (best != d.labels[size_t(r)]) ++wrong;
    }
    CHECK(double(wrong) / n < 0.02);
  }
  SECTION("rejects fewer than two classes") {
    CHECK_THROWS(builtin_base_dataset<float>(1, 4, 8, 0.1, 0.0, 0));
  }
}

TEST_CASE("projection tasks") {
  TaskFamilyConfig cfg;
  cfg.family = TaskFamily::projection;
  cfg.classes = 3;
  cfg.per_class = 4;
  cfg.raw_dim = 6;
  cfg.proj_dim = 5;
  cfg.base_noise = 0.1;
  cfg.n_train = 8;
  cfg.n_valid = 4;

  SECTION("debug preset reproduces the base dataset") {
    auto base = builtin_base_dataset<float>(3, 4, 6, 0.1, 0.0, 3);
    auto task = sample_projection_task<float>(base, cfg, 1, true);
    CHECK(task.train.x.cols() == 6);
    for (int64_t r = 0; r < 8; ++r) {
      for (int64_t c = 0; c < 6; ++c)
        CHECK(task.train.x(r, c) == Catch::Approx(base.x(r, c)).margin(1e-5));
      CHECK(task.train.labels[size_t(r)] == base.labels[size_t(r)]);
    }
  }

  SECTION("sampled maps never split a class, checked exhaustively") {
    // Zero base noise makes same-class rows identical, so a split class
    // would show as identical inputs with different labels.
    auto base = builtin_base_dataset<float>(3, 2, 4, 0.0, 0.0, 8);
    TaskFamilyConfig small = cfg;
    small.per_class = 2;
    small.raw_dim = 4;
    small.proj_dim = 3;
    small.n_train = 4;
    small.n_valid = 2;
    int violations = 0;
    for (uint64_t seed = 0; seed < 10000; ++seed) {
      auto task = sample_projection_task<float>(base, small, seed);
      const auto& map =
          std::get<ProjectionTruth<float>>(task.hidden).label_map;
      for (int m : map) {
        if (m < 0 || m >= 3) ++violations;
      }
      for (int split = 0; split < 2; ++split) {
        const auto& ds = split == 0 ? task.train : task.valid;
        for (int64_t i = 0; i < ds.size(); ++i)
          for (int64_t j = i + 1; j < ds.size(); ++j)
            if (bit_equal(ds.x.row(i), ds.x.row(j)) &&
                ds.labels[size_t(i)] != ds.labels[size_t(j)])
              ++violations;
      }
    }
    CHECK(violations == 0);
  }

  SECTION("permutation-only mode keeps classes distinct") {
    auto base = builtin_base_dataset<float>(4, 3, 5, 0.05, 0.0, 2);
    TaskFamilyConfig small = cfg;
    small.classes = 4;
    small.per_class = 3;
    small.raw_dim = 5;
    small.proj_dim = 4;
    small.n_train = 8;
    small.n_valid = 4;
    small.permutation_labels_only = true;
    for (uint64_t seed = 0; seed < 50; ++seed) {
      auto task = sample_projection_task<float>(base, small, seed);
      const auto& map =
          std::get<ProjectionTruth<float>>(task.hidden).label_map;
      std::set<int> image(map.begin(), map.end());
      CHECK(image.size() == 4);
    }
  }

  SECTION("paper-scale projection dimensions") {
    TaskFamilyConfig big = cfg;
    big.classes = 10;
    big.per_class = 70;
    big.raw_dim = 784;
    big.proj_dim = 100;
    big.n_train = 512;
    big.n_valid = 128;
    auto task = sample_projection_task<float>(big, 0);
    CHECK(task.train.x.cols() == 100);
    CHECK(std::get<ProjectionTruth<float>>(task.hidden).projection.rows() ==
          784);
  }

  SECTION("empty base is rejected") {
    Dataset<float> empty;
    CHECK_THROWS(sample_projection_task<float>(empty, cfg, 0));
  }
}

TEST_CASE("gmm tasks") {
  TaskFamilyConfig cfg;
  cfg.family = TaskFamily::gmm;
  cfg.gmm_dim = 2;
  cfg.k_max = 1;
  cfg.n_train = 10000;
  cfg.n_valid = 16;

  SECTION("single component: sample mean near the hidden mean") {
    auto task = sample_gmm_task<double>(cfg, 3);
    const auto& truth = std::get<GmmTruth<double>>(task.hidden);
    REQUIRE(truth.means.rows() == 1);
    for (int64_t f = 0; f < 2; ++f) {
      double mean = 0.0;
      for (int64_t r = 0; r < task.train.x.rows(); ++r)
        mean += task.train.x(r, f);
      mean /= double(task.train.x.rows());
      CHECK(std::abs(mean - truth.means(0, f)) <
            3.0 * 0.3 / std::sqrt(double(cfg.n_train)));
    }
  }

  SECTION("component std close to 0.3 at n = 1e4") {
    auto task = sample_gmm_task<double>(cfg, 5);
    const auto& truth = std::get<GmmTruth<double>>(task.hidden);
    for (int64_t f = 0; f < 2; ++f) {
      double mean = 0.0, var = 0.0;
      for (int64_t r = 0; r < task.train.x.rows(); ++r)
        mean += task.train.x(r, f);
      mean /= double(task.train.x.rows());
      for (int64_t r = 0; r < task.train.x.rows(); ++r) {
        double d = task.train.x(r, f) - mean;
        var += d * d;
      }
      var /= double(task.train.x.rows() - 1);
      CHECK(std::abs(std::sqrt(var) - truth.component_std) / 0.3 < 0.1);
    }
  }

  SECTION("presets for 2 and 5 dimensions") {
    for (int dim : {2, 5}) {
      TaskFamilyConfig c = cfg;
      c.gmm_dim = dim;
      c.k_max = 100;
      c.n_train = 64;
      auto task = sample_gmm_task<float>(c, 9);
      CHECK(task.train.x.cols() == dim);
      CHECK(std::get<GmmTruth<float>>(task.hidden).means.rows() <= 100);
    }
  }
}

TEST_CASE("scm tasks") {
  TaskFamilyConfig cfg;
  cfg.family = TaskFamily::scm;
  cfg.scm_nodes = 5;
  cfg.n_train = 256;
  cfg.n_valid = 64;

  SECTION("two-node graph has the single edge and correlated data") {
    TaskFamilyConfig two = cfg;
    two.scm_nodes = 2;
    two.n_train = 500;
    auto task = sample_scm_task<double>(two, 1);
    const auto& spec = std::get<ScmSpec>(task.hidden);
    REQUIRE(spec.n_edges() == 1);  // ER(2/(d-1)) is certain at d = 2
    int from = spec.order[0], to = spec.order[1];
    CHECK(spec.edge(from, to));
    double mx = 0, my = 0, cxy = 0, vx = 0, vy = 0;
    for (int64_t r = 0; r < 500; ++r) {
      mx += task.train.x(r, 0);
      my += task.train.x(r, 1);
    }
    mx /= 500;
    my /= 500;
    for (int64_t r = 0; r < 500; ++r) {
      double dx = task.train.x(r, 0) - mx, dy = task.train.x(r, 1) - my;
      cxy += dx * dy;
      vx += dx * dx;
      vy += dy * dy;
    }
    CHECK(std::abs(cxy / std::sqrt(vx * vy)) > 0.2);
  }

  SECTION("stored order is topologically consistent") {
    for (uint64_t seed = 0; seed < 100; ++seed) {
      TaskFamilyConfig c = cfg;
      c.graph = seed % 2 ? ScmGraph::scale_free : ScmGraph::erdos_renyi;
      c.mechanism = seed % 3 ? ScmMechanism::lin : ScmMechanism::rff;
      auto spec = sample_scm_spec(c, seed);
      std::vector<int> pos(size_t(spec.d));
      for (int p = 0; p < spec.d; ++p) pos[size_t(spec.order[size_t(p)])] = p;
      for (int i = 0; i < spec.d; ++i)
        for (int j = 0; j < spec.d; ++j)
          if (spec.edge(i, j)) CHECK(pos[size_t(i)] < pos[size_t(j)]);
    }
  }

  SECTION("scale-free attachment produces exactly d-1 edges") {
    TaskFamilyConfig c = cfg;
    c.graph = ScmGraph::scale_free;
    for (uint64_t seed = 0; seed < 20; ++seed)
      CHECK(sample_scm_spec(c, seed).n_edges() == cfg.scm_nodes - 1);
  }

  SECTION("lin parameter ranges over 1e3 draws") {
    int checked = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
      auto spec = sample_scm_spec(cfg, seed);
      for (const auto& m : spec.mechanisms) {
        CHECK(m.bias >= -3.0);
        CHECK(m.bias <= 3.0);
        for (double w : m.lin_weights) {
          double mag = std::abs(w);
          CHECK(mag >= 1.0);
          CHECK(mag <= 3.0);
          ++checked;
        }
      }
    }
    CHECK(checked > 1000);
  }

  SECTION("out-of-distribution lin weights use the shifted bands") {
    TaskFamilyConfig c = cfg;
    c.scm_ood_params = true;
    bool saw_low = false, saw_high = false;
    for (uint64_t seed = 0; seed < 200; ++seed) {
      auto spec = sample_scm_spec(c, seed);
      for (const auto& m : spec.mechanisms)
        for (double w : m.lin_weights) {
          double mag = std::abs(w);
          CHECK(mag >= 0.5);
          CHECK(mag <= 4.0);
          if (mag < 1.0) saw_low = true;
          if (mag > 3.0) saw_high = true;
        }
    }
    CHECK(saw_low);
    CHECK(saw_high);
  }

  SECTION("distinct seeds give distinct data") {
    auto a = sample_scm_task<float>(cfg, 1);
    auto b = sample_scm_task<float>(cfg, 2);
    CHECK_FALSE(bit_equal(a.train.x, b.train.x));
  }

  SECTION("laplace noise and rff mechanisms sample finite data") {
    TaskFamilyConfig c = cfg;
    c.mechanism = ScmMechanism::rff;
    c.scm_noise = ScmNoise::laplace;
    auto task = sample_scm_task<double>(c, 3);
    CHECK(task.train.x.all_finite());
  }
}

TEST_CASE("topological order inference") {
  SECTION("single column needs one call") {
    int calls = 0;
    TensorT<float> data = TensorT<float>::ones(4, 1);
    auto order = infer_topological_order<float>(
        [&](const TensorT<float>& sub) {
          ++calls;
          return std::vector<double>(size_t(sub.cols()), 0.5);
        },
        data);
    CHECK(order == std::vector<int>{0});
    CHECK(calls == 1);
  }

  SECTION("chain graph with a spec-reading oracle recovers the chain") {
    // chain 2 -> 0 -> 1
    ScmSpec spec;
    spec.d = 3;
    spec.adj.assign(9, 0);
    spec.adj[2 * 3 + 0] = 1;
    spec.adj[0 * 3 + 1] = 1;
    spec.order = {2, 0, 1};
    Rng rng(4);
    TensorT<float> data = TensorT<float>::randn(5, 3, rng);
    // The oracle matches submatrix columns back to node ids, then scores
    // the true leaves of the remaining subgraph.
    auto oracle = [&](const TensorT<float>& sub) {
      std::vector<int> ids;
      for (int64_t c = 0; c < sub.cols(); ++c)
        for (int64_t full = 0; full < 3; ++full)
          if (sub(0, c) == data(0, full)) ids.push_back(int(full));
      std::vector<double> scores(size_t(sub.cols()), 0.0);
      for (size_t c = 0; c < ids.size(); ++c) {
        bool leaf = true;
        for (size_t c2 = 0; c2 < ids.size(); ++c2)
          if (spec.edge(ids[c], ids[c2])) leaf = false;
        scores[c] = leaf ? 1.0 : 0.0;
      }
      return scores;
    };
    auto order = infer_topological_order<float>(oracle, data);
    CHECK(order == std::vector<int>{2, 0, 1});
  }
}

TEST_CASE("minibatch splits") {
  TaskFamilyConfig cfg;
  cfg.dim = 4;
  cfg.n_train = 16;
  cfg.n_valid = 8;
  auto task = sample_linreg_task<float>(cfg, 0);

  SECTION("full-size single batch covers the train split") {
    auto plan = split_minibatches(task, 16, 1, 3);
    REQUIRE(plan.train_batches.size() == 1);
    std::vector<int64_t> sorted = plan.train_batches[0];
    std::sort(sorted.begin(), sorted.end());
    for (int64_t i = 0; i < 16; ++i) CHECK(sorted[size_t(i)] == i);
  }

  SECTION("batches index the train split, validation the valid split") {
    auto plan = split_minibatches(task, 4, 3, 5);
    CHECK(plan.train_batches.size() == 3);
    for (const auto& b : plan.train_batches) {
      CHECK(b.size() == 4);
      std::set<int64_t> unique(b.begin(), b.end());
      CHECK(unique.size() == 4);  // each batch is a proper subset
      for (int64_t i : b) {
        CHECK(i >= 0);
        CHECK(i < 16);
      }
    }
    for (int64_t i : plan.valid_batch) {
      CHECK(i >= 0);
      CHECK(i < 8);
    }
  }

  SECTION("fixed seed reproduces indices") {
    auto a = split_minibatches(task, 4, 3, 7);
    auto b = split_minibatches(task, 4, 3, 7);
    CHECK(a.train_batches == b.train_batches);
    CHECK(a.valid_batch == b.valid_batch);
  }

  SECTION("insufficient data is an error") {
    CHECK_THROWS(split_minibatches(task, 17, 1, 0));
  }
}

TEST_CASE("idx loader") {
  auto tmp = std::string("/tmp/amort_idx_test");
  {
    std::ofstream img(tmp + "_images", std::ios::binary);
    unsigned char header[] = {0, 0, 8, 3, 0, 0, 0, 2,   // magic, n=2
                              0, 0, 0, 2, 0, 0, 0, 2};  // rows=2, cols=2
    img.write(reinterpret_cast<char*>(header), 16);
    unsigned char pixels[] = {0, 255, 128, 64, 255, 0, 0, 32};
    img.write(reinterpret_cast<char*>(pixels), 8);
  }
  {
    std::ofstream lab(tmp + "_labels", std::ios::binary);
    unsigned char header[] = {0, 0, 8, 1, 0, 0, 0, 2};
    lab.write(reinterpret_cast<char*>(header), 8);
    unsigned char labels[] = {7, 3};
    lab.write(reinterpret_cast<char*>(labels), 2);
  }
  auto d = load_idx_dataset(tmp + "_images", tmp + "_labels");
  CHECK(d.x.rows() == 2);
  CHECK(d.x.cols() == 4);
  CHECK(d.x(0, 1) == 1.0f);
  CHECK(d.x(0, 2) == Catch::Approx(128.0 / 255.0));
  CHECK(d.labels == std::vector<int>{7, 3});
  CHECK_THROWS(load_idx_labels(tmp + "_images"));
  CHECK_THROWS(load_idx_images(tmp + "_labels"));
  std::remove((tmp + "_images").c_str());
  std::remove((tmp + "_labels").c_str());
}
