#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dera/diffcore/autograd.hpp"
#include "dera/diffcore/gradcheck.hpp"
#include "dera/diffcore/ops.hpp"

using namespace dera;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

template <class T>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0, 1);
  std::vector<T> v(numel(s));
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Tensor<T>::constant(std::move(s), std::move(v));
}

}  // namespace

TEST_CASE("backward of x*x at 3 is 6", "[diffcore]") {
  ParameterSet<float> ps;
  auto x = ps.add("x", {}, {3.0f});
  auto g = backward(mul(x, x), ps);
  REQUIRE(g.flat.size() == 1);
  CHECK(g.flat[0] == 6.0f);
}

TEST_CASE("backward of elementwise product sum is the other factor", "[diffcore]") {
  ParameterSet<float> ps;
  auto a = ps.add("a", {1, 2}, {1, 2});
  auto b = Tensor<float>::constant({1, 2}, {3, 4});
  auto g = backward(sum(mul(a, b)), ps);
  CHECK(g.flat == std::vector<float>{3, 4});
}

TEST_CASE("layer_norm gradient matches central differences in double", "[diffcore]") {
  std::mt19937_64 rng(11);
  auto x = random_tensor<double>({4, 8}, rng);
  ParameterSet<double> ps;
  auto xp = ps.add("x", {4, 8}, std::vector<double>(x.data().begin(), x.data().end()));
  auto gain = Tensor<double>::full({8}, 1.0);
  auto bias = Tensor<double>::zeros({8});
  auto weights = random_tensor<double>({4, 8}, rng);
  auto f = [&](const Tensor<double>& in) { return sum(mul(layer_norm(in, gain, bias), weights)); };
  auto g = backward(f(xp), ps);
  auto work = Tensor<double>::constant({4, 8}, std::vector<double>(x.data().begin(), x.data().end()));
  auto d = work.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x0 = d[i];
    d[i] = x0 + 1e-5;
    const double up = f(work).item();
    d[i] = x0 - 1e-5;
    const double down = f(work).item();
    d[i] = x0;
    CHECK(fd_rel_err(g.flat[i], (up - down) / 2e-5) < 1e-4);
  }
}

TEST_CASE("stop_gradient is identity on values and blocks gradients", "[diffcore]") {
  auto v = stop_gradient(Tensor<float>::constant({2}, {1.5f, -2.0f}));
  CHECK(std::vector<float>(v.data().begin(), v.data().end()) == std::vector<float>{1.5f, -2.0f});

  ParameterSet<float> ps;
  auto x = ps.add("x", {}, {3.0f});
  CHECK(backward(mul(stop_gradient(x), x), ps).flat[0] == 3.0f);

  ParameterSet<float> ps2;
  auto y = ps2.add("y", {3}, {1, 2, 3});
  auto loss = sum(stop_gradient(y));
  CHECK_FALSE(loss.requires_grad());
  CHECK(backward(loss, ps2).flat == std::vector<float>{0, 0, 0});
}

TEST_CASE("grad_check examples from the primitive catalogue", "[diffcore]") {
  std::mt19937_64 rng(3);
  auto m = grad_check("matmul", {random_tensor<double>({3, 4}, rng), random_tensor<double>({4, 2}, rng)}, 1e-4);
  CHECK(m.passed);
  auto s = grad_check("softmax", {random_tensor<double>({7}, rng)}, 1e-4);
  CHECK(s.passed);
  auto c = grad_check("cosine_similarity", {random_tensor<double>({16}, rng), random_tensor<double>({16}, rng)}, 1e-4);
  CHECK(c.passed);
  CHECK_THROWS_AS(grad_check("no_such_op", {}, 1e-4), ValidationError);
}

TEST_CASE("every primitive agrees with finite differences", "[diffcore][slow]") {
  for (const auto& r : run_gradient_suite<double>(10, 1e-4)) {
    INFO(r.op);
    CHECK(r.passed);
  }
  for (const auto& r : run_gradient_suite<float>(10, 1e-2)) {
    INFO(r.op << " (float)");
    CHECK(r.passed);
  }
}

TEST_CASE("backward is linear in the loss", "[diffcore]") {
  std::mt19937_64 rng(5);
  ParameterSet<double> ps;
  auto w = ps.add("w", {4, 3}, std::vector<double>(12, 0.0));
  {
    auto init = random_tensor<double>({4, 3}, rng);
    std::copy(init.data().begin(), init.data().end(), w.mutable_data().begin());
  }
  auto x = random_tensor<double>({5, 4}, rng);
  auto h = gelu(matmul(x, w));
  auto l1 = sum(softmax(h));
  auto l2 = mean(exp(h));
  const double a = 0.7, b = -1.3;
  auto combo = add(scale(l1, a), scale(l2, b));
  auto g1 = backward(l1, ps);
  auto g2 = backward(l2, ps);
  auto gc = backward(combo, ps);
  for (std::size_t i = 0; i < gc.size(); ++i) {
    CHECK_THAT(gc.flat[i], WithinRel(a * g1.flat[i] + b * g2.flat[i], 1e-6) ||
                               WithinAbs(a * g1.flat[i] + b * g2.flat[i], 1e-12));
  }
}

TEST_CASE("repeated backward calls match independent runs bitwise", "[diffcore]") {
  std::mt19937_64 rng(9);
  auto xw = random_tensor<float>({6, 5}, rng);
  auto ww = random_tensor<float>({5, 5}, rng);
  auto run = [&](ParameterSet<float>& ps) {
    auto w = ps.add("w", {5, 5}, std::vector<float>(ww.data().begin(), ww.data().end()));
    auto h = layer_norm(matmul(xw, w), Tensor<float>::full({5}, 1.f), Tensor<float>::zeros({5}));
    auto la = mean(gelu(h));
    auto lb = sum(mul(h, h));
    return std::pair{la, lb};
  };
  ParameterSet<float> shared;
  auto [la, lb] = run(shared);
  auto ga = backward(la, shared);
  auto gb = backward(lb, shared);

  ParameterSet<float> fresh_a, fresh_b;
  auto ia = backward(run(fresh_a).first, fresh_a);
  auto ib = backward(run(fresh_b).second, fresh_b);
  CHECK(ga.flat == ia.flat);
  CHECK(gb.flat == ib.flat);
}

TEST_CASE("cutting the upstream of a detached branch leaves gradients unchanged", "[diffcore]") {
  std::mt19937_64 rng(21);
  ParameterSet<double> ps;
  auto w = ps.add("w", {3, 3}, std::vector<double>(9, 0.25));
  auto x = random_tensor<double>({4, 3}, rng);
  auto h = matmul(x, w);
  auto live = sum(mul(h, h));
  auto g_detached = backward(add(live, sum(mul(stop_gradient(h), h))), ps);
  auto frozen = Tensor<double>::constant({4, 3}, {h.data().begin(), h.data().end()});
  auto g_cut = backward(add(live, sum(mul(frozen, h))), ps);
  CHECK(g_detached.flat == g_cut.flat);
}

TEST_CASE("non-scalar loss is a contract violation, unreachable params get zeros", "[diffcore]") {
  ParameterSet<float> ps;
  auto a = ps.add("a", {2}, {1, 2});
  ps.add("unused", {3}, {1, 1, 1});
  CHECK_THROWS_AS(backward(mul(a, a), ps), ContractError);
  auto g = backward(sum(a), ps);
  CHECK(g.param_names == std::vector<std::string>{"a", "unused"});
  CHECK(std::vector<float>(g.block("unused").begin(), g.block("unused").end()) == std::vector<float>{0, 0, 0});
}

TEST_CASE("NaN produced by a primitive names the op", "[diffcore]") {
  auto x = Tensor<float>::constant({2}, {-1.0f, 4.0f});
  try {
    (void)sqrt(x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.op() == "sqrt");
  }
}

TEST_CASE("argmin ties resolve to the lowest index", "[diffcore]") {
  auto d = Tensor<float>::constant({2, 4}, {3, 1, 1, 2, 5, 5, 5, 5});
  CHECK(argmin_rows(d) == std::vector<std::size_t>{1, 0});
}

TEST_CASE("broadcasting row vectors and scalars", "[diffcore]") {
  ParameterSet<double> ps;
  auto b = ps.add("b", {3}, {1, 2, 3});
  auto x = Tensor<double>::constant({2, 3}, {1, 1, 1, 2, 2, 2});
  auto y = add(x, b);
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{2, 3, 4, 3, 4, 5});
  auto g = backward(sum(mul(y, y)), ps);
  // d/db sum((x+b)^2) = 2*sum_rows(x+b)
  CHECK(g.flat == std::vector<double>{10, 14, 18});
  CHECK_THROWS_AS(add(x, Tensor<double>::zeros({2})), ContractError);
}
