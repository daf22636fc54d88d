#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "f2x/tensor.hpp"

using namespace f2x::ag;

TEST_CASE("matmul identity") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor c = matmul(a, id);
  CHECK(*c.data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("softmax symmetry and row-stochasticity") {
  Tensor x = Tensor::from({1, 3}, {0, 0, 0});
  Tensor y = softmax_last(x);
  for (double v : *y.data) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-5, 5);
  std::vector<double> vals(6 * 11);
  for (double& v : vals) v = d(rng);
  Tensor r = softmax_last(Tensor::from({6, 11}, vals));
  for (int row = 0; row < 6; ++row) {
    double s = 0;
    for (int i = 0; i < 11; ++i) {
      double p = (*r.data)[row * 11 + i];
      CHECK(p >= 0.0);
      s += p;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("kl_divergence closed-form scalar") {
  // KL([1,0] || softmax([2,0])) = -log(e^2/(e^2+1)) = log(1+e^-2)
  Tensor h = Tensor::from({1, 2}, {1, 0});
  Tensor lp = log_softmax_last(Tensor::from({1, 2}, {2, 0}));
  Tensor w = Tensor::from({1}, {1});
  Tensor kl = kl_divergence_rowwise(h, lp, w);
  const double expected = std::log1p(std::exp(-2.0));
  CHECK(kl.item() == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("backward of simple reductions") {
  {
    Graph g;
    Tensor x = g.leaf(Tensor::from({3}, {5, -1, 2}));
    Tensor loss = reduce_sum(x);
    g.backward(loss);
    CHECK(*g.grad(x.node) == std::vector<double>{1, 1, 1});
  }
  {
    Graph g;
    Tensor x = g.leaf(Tensor::from({3}, {1, 2, 3}));
    Tensor loss = reduce_sum(multiply(x, x));
    g.backward(loss);
    CHECK(*g.grad(x.node) == std::vector<double>{2, 4, 6});
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph g;
  Tensor x = g.leaf(Tensor::from({3}, {1, 2, 3}));
  Tensor y = multiply(x, x);
  CHECK_THROWS_AS(g.backward(y), TensorError);
}

TEST_CASE("shape mismatch and non-finite inputs are rejected") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3, 3}, std::vector<double>(9, 1.0));
  CHECK_THROWS_AS(add(a, b), TensorError);
  CHECK_THROWS_AS(matmul(a, Tensor::from({2, 2}, {1, 0, 0, 1})), TensorError);

  Tensor bad = Tensor::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(add(bad, Tensor::from({2}, {0, 0})), TensorError);
}

TEST_CASE("dropout with all-ones mask is identity") {
  Tensor x = Tensor::from({2, 3}, {1, -2, 3, 4, -5, 6});
  Tensor mask = Tensor::full({2, 3}, 1.0);
  Tensor y = dropout_with_given_mask(x, mask);
  CHECK(*y.data == *x.data);
}

TEST_CASE("stop_gradient blocks the tape exactly") {
  Graph g;
  Tensor x = g.leaf(Tensor::from({2}, {1, 2}));
  Tensor y = multiply(x, x);
  Tensor z = stop_gradient(y);
  // loss = sum(x * stop_grad(x^2)); gradient wrt x is stop_grad(x^2) only.
  Tensor loss = reduce_sum(multiply(x, z));
  g.backward(loss);
  CHECK(*g.grad(x.node) == std::vector<double>{1, 4});
  CHECK(!z.tracked());
}

namespace {

// Central finite differences on an arbitrary scalar-valued tensor program.
template <typename Fn>
void check_fd(Fn fn, Tensor& param, double tol = 1e-5) {
  Graph g;
  Tensor leaf = g.leaf(param);
  Tensor loss = fn(leaf);
  g.backward(loss);
  const std::vector<double>& analytic = *g.grad(leaf.node);

  const double eps = 1e-5;
  for (std::int64_t i = 0; i < param.size(); ++i) {
    double orig = (*param.data)[i];
    (*param.data)[i] = orig + eps;
    double fp = fn(param).item();
    (*param.data)[i] = orig - eps;
    double fm = fn(param).item();
    (*param.data)[i] = orig;
    double numeric = (fp - fm) / (2 * eps);
    double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-4});
    CHECK(std::abs(numeric - analytic[i]) / denom < tol);
  }
}

}  // namespace

TEST_CASE("finite differences across the primitive suite") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(-1.5, 1.5);
  auto rand_tensor = [&](Shape s) {
    std::vector<double> v(numel(s));
    for (double& x : v) x = d(rng);
    return Tensor::from(s, std::move(v));
  };

  Tensor w = rand_tensor({4, 3});
  Tensor other = rand_tensor({4, 3});
  Tensor m2 = rand_tensor({3, 5});
  Tensor gain = rand_tensor({3});
  Tensor bias = rand_tensor({3});
  Tensor weights = Tensor::from({4}, {1, 1, 0, 1});
  Tensor labels = softmax_last(rand_tensor({4, 3}));

  check_fd([&](const Tensor& x) { return reduce_sum(multiply(softmax_last(x), other)); }, w);
  check_fd([&](const Tensor& x) { return reduce_sum(multiply(log_softmax_last(x), other)); }, w);
  check_fd([&](const Tensor& x) { return reduce_sum(relu(matmul(x, m2))); }, w);
  check_fd([&](const Tensor& x) { return reduce_mean(layer_norm(x, gain, bias)); }, w);
  check_fd([&](const Tensor& x) { return reduce_sum(multiply(transpose(x), transpose(other))); },
           w);
  check_fd(
      [&](const Tensor& x) {
        return kl_divergence_rowwise(labels, log_softmax_last(x), weights);
      },
      w);
  check_fd(
      [&](const Tensor& x) {
        Tensor s1 = slice_last(x, 0, 2);
        Tensor s2 = slice_last(x, 2, 1);
        return reduce_sum(multiply(concat_last({s2, s1}), other));
      },
      w);
  check_fd([&](const Tensor& x) { return reduce_sum(row_scale(x, weights)); }, w);
  // layer_norm gain/bias path
  {
    Graph g;
    Tensor gl = g.leaf(gain);
    Tensor loss = reduce_sum(multiply(layer_norm(w, gl, bias), other));
    g.backward(loss);
    const std::vector<double>& an = *g.grad(gl.node);
    const double eps = 1e-5;
    for (int i = 0; i < 3; ++i) {
      double orig = (*gain.data)[i];
      (*gain.data)[i] = orig + eps;
      double fp = reduce_sum(multiply(layer_norm(w, gain, bias), other)).item();
      (*gain.data)[i] = orig - eps;
      double fm = reduce_sum(multiply(layer_norm(w, gain, bias), other)).item();
      (*gain.data)[i] = orig;
      CHECK(std::abs((fp - fm) / (2 * eps) - an[i]) < 1e-6);
    }
  }
}

TEST_CASE("embedding_gather gradients scatter-add") {
  Graph g;
  Tensor table = g.leaf(Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}));
  Tensor e = embedding_gather(table, {2, 0, 2}, {3});
  g.backward(reduce_sum(e));
  CHECK(*g.grad(table.node) == std::vector<double>{1, 1, 0, 0, 2, 2});
}

TEST_CASE("gradient_check on a quadratic form is exact to roundoff") {
  Tensor theta = Tensor::from({4}, {0.5, -1.0, 2.0, 0.25});
  GradCheckFn f = [&](std::vector<std::vector<double>*>* grads) {
    Graph g;
    Tensor x = g.leaf(theta);
    Tensor loss = reduce_sum(multiply(x, x));
    if (grads) {
      g.backward(loss);
      *(*grads)[0] = *g.grad(x.node);
    }
    return loss.item();
  };
  auto report = gradient_check(f, {{"theta", &theta}}, 1e-5, 1e-8, 100, 1);
  CHECK(report.pass);
  CHECK(report.max_rel_err <= 1e-8);
  CHECK(report.checked == 4);
}

TEST_CASE("tape gradient behind stop-gradient is exactly zero") {
  Graph g;
  Tensor x = g.leaf(Tensor::from({3}, {1.0, 2.0, 3.0}));
  Tensor y = g.leaf(Tensor::from({3}, {4.0, 5.0, 6.0}));
  Tensor loss = add(reduce_sum(multiply(x, x)), reduce_sum(stop_gradient(multiply(y, y))));
  g.backward(loss);
  CHECK(*g.grad(x.node) == std::vector<double>{2, 4, 6});
  // y is never reached through the tape.
  CHECK(g.grad(y.node) == nullptr);
}

TEST_CASE("gradient_check rejects a non-deterministic objective") {
  Tensor theta = Tensor::from({1}, {1.0});
  int calls = 0;
  GradCheckFn f = [&](std::vector<std::vector<double>*>* grads) {
    (void)grads;
    return static_cast<double>(++calls);
  };
  CHECK_THROWS_AS(gradient_check(f, {{"theta", &theta}}, 1e-5, 1e-5, 10, 3), TensorError);
}

TEST_CASE("reshape is a differentiable view") {
  Graph g;
  Tensor x = g.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  Tensor y = reshape(x, {3, 2});
  g.backward(reduce_sum(multiply(y, y)));
  CHECK(*g.grad(x.node) == std::vector<double>{2, 4, 6, 8, 10, 12});
}
