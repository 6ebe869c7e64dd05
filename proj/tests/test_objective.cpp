#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dera/diffcore/gradcheck.hpp"
#include "dera/objective/objective.hpp"

using namespace dera;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("recon_l1 reference values", "[objective]") {
  const auto x = Tensor<double>::constant({2, 3}, randn(6, 1));
  CHECK(recon_l1(x, x).item() == 0.0);
  CHECK(recon_l1(x, add(x, Tensor<double>::scalar(0.5))).item() == Catch::Approx(0.5).margin(1e-12));
  const auto y = Tensor<double>::constant({2, 3}, randn(6, 2));
  double ref = 0;
  for (std::size_t i = 0; i < 6; ++i) ref += std::abs(x.data()[i] - y.data()[i]);
  CHECK(recon_l1(x, y).item() == Catch::Approx(ref / 6).margin(1e-12));
  CHECK_THROWS_AS(recon_l1(x, Tensor<double>::zeros({3, 2})), ValidationError);

  VideoClip a(1, 2, 2, 3, 0.25f), b(1, 2, 2, 3, -0.25f);
  CHECK(recon_l1(a, b) == Catch::Approx(0.5));
}

TEST_CASE("vq_objective values and gradient", "[objective]") {
  const auto e = Tensor<double>::constant({3, 4}, randn(12, 3));
  CHECK(vq_objective(e, e, 0.25).item() == 0.0);

  ParameterSet<double> ps;
  auto z = ps.add("z", {3, 4}, randn(12, 4));
  auto codes = ps.add("codes", {3, 4}, std::vector<double>(e.data().begin(), e.data().end()));
  const double beta = 0.25;
  const double no_commit = vq_objective(z, codes, 0.0).item();
  double ref = 0;
  for (std::size_t i = 0; i < 12; ++i) ref += std::pow(z.data()[i] - codes.data()[i], 2);
  CHECK(no_commit == Catch::Approx(ref / 12));

  const auto g = backward(vq_objective(z, codes, beta), ps);
  const auto gz = g.block("z");
  const auto gc = g.block("codes");
  for (std::size_t i = 0; i < 12; ++i) {
    const double diff = z.data()[i] - codes.data()[i];
    CHECK(gz[i] == Catch::Approx(2 * beta * diff / 12).margin(1e-12));
    CHECK(gc[i] == Catch::Approx(-2 * diff / 12).margin(1e-12));
  }
  // finite differences on the surrogate with both stop-gradients frozen
  DetachTape tape(DetachTape::Mode::kRecord);
  {
    DetachTapeScope scope(tape);
    vq_objective(z, codes, beta);
  }
  auto values = z.mutable_data();
  for (std::size_t i = 0; i < 12; ++i) {
    const double x0 = values[i];
    auto eval = [&](double x) {
      values[i] = x;
      tape.set_mode(DetachTape::Mode::kReplay);
      DetachTapeScope scope(tape);
      return vq_objective(z, codes, beta).item();
    };
    const double fd = (eval(x0 + 1e-5) - eval(x0 - 1e-5)) / 2e-5;
    values[i] = x0;
    CHECK(fd_rel_err(gz[i], fd) < 1e-6);
  }
}

TEST_CASE("total_loss assembles the weighted sum", "[objective]") {
  LossParts<double> p;
  p.recon = Tensor<double>::scalar(0.4);
  p.vq = Tensor<double>::scalar(0.1);
  p.align_a = Tensor<double>::scalar(-0.6);
  p.align_m = Tensor<double>::scalar(-0.3);
  p.align_a_re = Tensor<double>::scalar(-0.5);
  p.align_m_re = Tensor<double>::scalar(-0.2);
  LossWeights w;
  const auto t = total_loss(p, w, true);
  CHECK(t.value() == Catch::Approx(1.0 * -0.5 + 0.5 * -0.2 + 0.4 + 0.1));
  double sum = 0;
  for (const auto& term : t.terms) sum += term.weight * term.value;
  CHECK(std::abs(sum - t.value()) <= 1e-6 * std::abs(t.value()));
  CHECK(total_loss(p, w, false).value() == Catch::Approx(-0.6 - 0.15 + 0.5));

  LossWeights only_rec;
  only_rec.align_a = only_rec.align_m = 0;
  LossParts<double> bare;
  bare.recon = p.recon;
  bare.vq = Tensor<double>::scalar(0.0);
  CHECK(total_loss(bare, only_rec, false).value() == 0.4);
  CHECK_THROWS_AS(total_loss(bare, w, false), ValidationError);

  // pass-through step: reformulated pair equals the raw pair
  p.align_a_re = p.align_a;
  p.align_m_re = p.align_m;
  CHECK(total_loss(p, w, true).value() == total_loss(p, w, false).value());

  LossWeights neg;
  neg.beta = -1;
  CHECK_THROWS_AS(total_loss(p, neg, false), ValidationError);
  LossWeights aux;
  aux.aux["lpips"] = 0.1;
  CHECK_THROWS_AS(total_loss(p, aux, false), ValidationError);
  p.aux["lpips"] = Tensor<double>::scalar(2.0);
  CHECK(total_loss(p, aux, false).value() == Catch::Approx(-0.6 - 0.15 + 0.5 + 0.2));
}
