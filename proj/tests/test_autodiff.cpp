#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "amort/autodiff.hpp"
#include "amort/gradcheck.hpp"
#include "amort/masking.hpp"

using namespace amort;
using namespace amort::ad;

namespace {

// Fixed random projection so any-shaped op output reduces to a scalar loss
// while keeping the loss deterministic across repeated evaluations.
template <typename T>
struct Projector {
  TensorT<T> r;
  Projector(int64_t rows, int64_t cols, uint64_t seed) {
    Rng rng(seed);
    r = TensorT<T>::randn(rows, cols, rng);
  }
  Var<T> operator()(const Var<T>& x) const {
    return sum_all(mul(x, Var<T>::constant(r)));
  }
};

}  // namespace

TEST_CASE("quadratic gradient") {
  ParamStore<float> ps;
  Var<float> w = ps.create("w", Tensor(1, 2, {1.0f, 2.0f}));
  Var<float> loss = sum_all(mul(w, w));
  auto grads = backward_named(loss, ps);
  CHECK(grads.at("w")(0, 0) == 2.0f);
  CHECK(grads.at("w")(0, 1) == 4.0f);
}

TEST_CASE("constant loss has zero gradients") {
  ParamStore<float> ps;
  ps.create("w", Tensor(1, 3, {1.0f, -1.0f, 2.0f}));
  Var<float> loss = Var<float>::constant(Tensor::scalar(5.0f));
  auto grads = backward_named(loss, ps);
  for (float v : grads.at("w").data()) CHECK(v == 0.0f);
}

TEST_CASE("backward rejects non-scalar loss") {
  ParamStore<float> ps;
  Var<float> w = ps.create("w", Tensor(1, 2, {1.0f, 2.0f}));
  CHECK_THROWS(backward(mul(w, w)));
}

TEST_CASE("backward rejects non-finite loss") {
  ParamStore<float> ps;
  Var<float> w = ps.create("w", Tensor(1, 1, {1.0f}));
  Var<float> loss = sum_all(w);
  loss.mutable_val()(0, 0) = std::nanf("");
  CHECK_THROWS(backward(loss));
}

TEST_CASE("op outputs are checked for finiteness") {
  Var<float> x = Var<float>::leaf(Tensor(1, 1, {-1.0f}), true);
  CHECK_THROWS(log_elem(x));
}

TEST_CASE("stop_gradient") {
  SECTION("forward is the identity") {
    Var<float> x = Var<float>::constant(Tensor(1, 2, {3.0f, -1.0f}));
    Var<float> y = stop_gradient(x);
    CHECK(y.val()(0, 0) == 3.0f);
    CHECK(y.val()(0, 1) == -1.0f);
  }
  SECTION("blocks exactly one factor of a product") {
    ParamStore<float> ps;
    Var<float> w = ps.create("w", Tensor(1, 2, {1.0f, 2.0f}));
    Var<float> loss = sum_all(mul(stop_gradient(w), w));
    auto grads = backward_named(loss, ps);
    CHECK(grads.at("w")(0, 0) == 1.0f);
    CHECK(grads.at("w")(0, 1) == 2.0f);
  }
  SECTION("fully blocked path gives exact zeros") {
    ParamStore<float> ps;
    Var<float> w = ps.create("w", Tensor(1, 2, {1.0f, 2.0f}));
    Var<float> loss = sum_all(stop_gradient(w));
    auto grads = backward_named(loss, ps);
    CHECK(grads.at("w")(0, 0) == 0.0f);
    CHECK(grads.at("w")(0, 1) == 0.0f);
  }
  SECTION("grad of g(x) + sg(f(x)) equals grad of g(x)") {
    Rng rng(7);
    ParamStore<float> ps;
    Var<float> x = ps.create("x", Tensor::randn(3, 3, rng));
    Var<float> g_only = mean_all(gelu(matmul(x, x)));
    auto grads_g = backward_named(g_only, ps);
    Var<float> f_part = stop_gradient(softmax_rows(matmul(x, x, true, false)));
    Var<float> combined = add(mean_all(gelu(matmul(x, x))),
                              mean_all(mul(f_part, f_part)));
    auto grads_c = backward_named(combined, ps);
    for (int64_t i = 0; i < 9; ++i)
      CHECK(grads_g.at("x").data()[size_t(i)] ==
            grads_c.at("x").data()[size_t(i)]);
  }
}

TEST_CASE("two-layer mlp matches finite differences in 32-bit") {
  // Weights and input are drawn from positive ranges so no gradient
  // coordinate vanishes; otherwise the float32 rounding floor of the
  // central difference dominates the per-coordinate relative error.
  Rng rng(11);
  ParamStore<float> ps;
  Var<float> w1 = ps.create("w1", Tensor::uniform(4, 8, rng, 0.3f, 0.9f));
  Var<float> b1 = ps.create("b1", Tensor::uniform(1, 8, rng, 0.1f, 0.3f));
  Var<float> w2 = ps.create("w2", Tensor::uniform(8, 1, rng, 0.5f, 1.5f));
  Var<float> b2 = ps.create("b2", Tensor::uniform(1, 1, rng, 0.1f, 0.3f));
  Tensor x = Tensor::uniform(1, 4, rng, 0.5f, 1.5f);
  Tensor y(1, 1);
  {
    NoGradGuard ng;
    Var<float> h = gelu(add_rowvec(matmul(Var<float>::constant(x), w1), b1));
    y(0, 0) = add_rowvec(matmul(h, w2), b2).val()(0, 0) + 1.0f;
  }
  auto fn = [&]() {
    Var<float> h = gelu(add_rowvec(matmul(Var<float>::constant(x), w1), b1));
    Var<float> out = add_rowvec(matmul(h, w2), b2);
    return mse_loss(out, y);
  };
  auto report = finite_diff_check<float>(fn, ps, 1e-3);
  INFO("worst: " << report.worst_param << " err " << report.max_rel_err);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("finite_diff_check oracle cases") {
  SECTION("half squared norm") {
    Rng rng(3);
    ParamStore<double> ps;
    Var<double> w = ps.create("w", TensorT<double>::randn(1, 6, rng));
    auto fn = [&]() { return ad::scale(sum_all(mul(w, w)), 0.5); };
    auto report = finite_diff_check<double>(fn, ps, 1e-3);
    CHECK(report.max_rel_err < 1e-4);
  }
  SECTION("constant function reports exactly zero") {
    ParamStore<double> ps;
    ps.create("w", TensorT<double>::ones(1, 4));
    auto fn = [&]() { return Var<double>::constant(TensorT<double>::scalar(2.0)); };
    auto report = finite_diff_check<double>(fn, ps, 1e-3);
    CHECK(report.max_rel_err == 0.0);
  }
  SECTION("softmax cross entropy on 4 logits") {
    Rng rng(5);
    ParamStore<float> ps;
    Var<float> z = ps.create("z", Tensor::randn(1, 4, rng));
    auto fn = [&]() { return cross_entropy_loss(z, {2}); };
    auto report = finite_diff_check<float>(fn, ps, 1e-3);
    CHECK(report.max_rel_err < 1e-3);
  }
  SECTION("rejects non-positive step") {
    ParamStore<double> ps;
    auto fn = [&]() { return Var<double>::constant(TensorT<double>::scalar(0.0)); };
    CHECK_THROWS(finite_diff_check<double>(fn, ps, 0.0));
  }
}

TEST_CASE("per-op finite difference sweep") {
  Rng rng(17);
  ParamStore<double> ps;
  Var<double> a = ps.create("a", TensorT<double>::randn(4, 5, rng));
  Var<double> b = ps.create("b", TensorT<double>::randn(4, 5, rng));
  Var<double> m = ps.create("m", TensorT<double>::randn(5, 3, rng));
  Var<double> row = ps.create("row", TensorT<double>::randn(1, 5, rng));
  Var<double> gain = ps.create("gain", TensorT<double>::uniform(1, 5, rng, 0.5, 1.5));
  Var<double> bias = ps.create("bias", TensorT<double>::randn(1, 5, rng, 0.1));
  Var<double> pos = ps.create("pos", TensorT<double>::uniform(4, 5, rng, 0.5, 2.0));
  TensorT<double> mask = TensorT<double>::zeros(4, 4);
  mask(0, 2) = kMaskBlocked;
  mask(3, 1) = kMaskBlocked;
  TensorT<double> bce_targets = TensorT<double>::uniform(4, 5, rng, 0.0, 1.0);

  int check_id = 0;
  auto check = [&](const char* tag, std::function<Var<double>()> build,
                   double tol = 1e-6) {
    Var<double> probe;
    {
      NoGradGuard ng;
      probe = build();
    }
    Projector<double> proj(probe.rows(), probe.cols(), uint64_t(++check_id));
    auto fn = [&] { return proj(build()); };
    auto report = finite_diff_check<double>(fn, ps, 1e-5);
    INFO(tag << " worst=" << report.worst_param
             << " err=" << report.max_rel_err);
    CHECK(report.max_rel_err < tol);
  };

  check("add", [&] { return add(a, b); });
  check("sub", [&] { return sub(a, b); });
  check("mul", [&] { return mul(a, b); });
  check("scale", [&] { return ad::scale(a, 1.7); });
  check("add_scalar", [&] { return add_scalar(a, 0.3); });
  check("add_rowvec", [&] { return add_rowvec(a, row); });
  check("matmul_nn", [&] { return matmul(a, m); });
  check("matmul_tn", [&] { return matmul(a, b, true, false); });
  check("matmul_nt", [&] { return matmul(a, b, false, true); });
  check("matmul_tt", [&] { return matmul(m, a, true, true); });
  check("gelu", [&] { return gelu(a); });
  check("softmax_masked", [&] {
    return softmax_rows(matmul(a, b, false, true), &mask);
  });
  check("log_softmax", [&] { return log_softmax_rows(a); });
  check("layer_norm", [&] { return layer_norm_rows(a, gain, bias); }, 1e-5);
  check("concat_rows", [&] { return concat_rows<double>({a, b}); });
  check("concat_cols", [&] { return concat_cols<double>({a, b}); });
  check("slice_rows", [&] { return ad::slice_rows(a, 1, 3); });
  check("slice_cols", [&] { return ad::slice_cols(a, 2, 5); });
  check("reshape", [&] { return ad::reshape(a, 2, 10); });
  check("mean_all", [&] { return mean_all(mul(a, b)); });
  check("sum_all", [&] { return ad::scale(sum_all(mul(a, a)), 0.25); });
  check("pick_cols", [&] { return pick_cols(a, {4, 0, 2, 1}); });
  check("gather_rows", [&] { return gather_rows(a, {3, 1, 1, 0, 2}); });
  check("exp", [&] { return exp_elem(a); });
  check("log", [&] { return log_elem(pos); });
  check("bce_with_logits", [&] {
    return mean_all(bce_with_logits(a, bce_targets));
  });
}

TEST_CASE("gradient accumulates through repeated parents") {
  ParamStore<float> ps;
  Var<float> w = ps.create("w", Tensor(1, 1, {3.0f}));
  // w^3 built as w*w*w: grad = 3w^2 = 27
  Var<float> loss = sum_all(mul(mul(w, w), w));
  auto grads = backward_named(loss, ps);
  CHECK(grads.at("w")(0, 0) == Catch::Approx(27.0f));
}

TEST_CASE("forward determinism under a fixed seed") {
  auto build = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn(6, 6, rng);
    Var<float> vx = Var<float>::constant(x);
    Var<float> g = Var<float>::constant(Tensor::ones(1, 6));
    Var<float> b = Var<float>::constant(Tensor::zeros(1, 6));
    return layer_norm_rows(gelu(matmul(vx, vx, false, true)), g, b).val();
  };
  Tensor a = build(42), b = build(42), c = build(43);
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(a.data()[size_t(i)] == b.data()[size_t(i)]);
  bool any_diff = false;
  for (int64_t i = 0; i < a.numel(); ++i)
    any_diff = any_diff || a.data()[size_t(i)] != c.data()[size_t(i)];
  CHECK(any_diff);
}

TEST_CASE("no-grad mode skips graph construction") {
  ParamStore<float> ps;
  Var<float> w = ps.create("w", Tensor(1, 2, {1.0f, 2.0f}));
  NoGradGuard ng;
  Var<float> y = mul(w, w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("param store rejects duplicate names") {
  ParamStore<float> ps;
  ps.create("w", Tensor::zeros(1, 1));
  CHECK_THROWS(ps.create("w", Tensor::zeros(1, 1)));
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS(Tensor(2, 2, {1.0f, 2.0f, 3.0f}));
  Tensor t(2, 3);
  CHECK(t.numel() == 6);
  CHECK(t.shape() == std::vector<int64_t>{2, 3});
  CHECK_THROWS(t.reshaped(4, 2));
}
