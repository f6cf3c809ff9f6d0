#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "iclab/convergence.hpp"
#include "iclab/layers.hpp"
#include "iclab/tensor_ops.hpp"

using namespace iclab;

namespace {

// test-side copy of the planted-spectrum construction so library bugs can't
// cancel: X^T X must come out as V diag(n*spec) V^T
TensorD make_design(Rng& rng, std::size_t n, std::size_t d, const std::vector<double>& spec) {
  return iclab::detail::planted_design(rng, n, d, spec);
}

}  // namespace

TEST_CASE("hessian_condition") {
  Rng rng(1201);

  SUBCASE("whitened design gives kappa 1") {
    TensorD x = make_design(rng, 40, 5, {1, 1, 1, 1, 1});
    CHECK(hessian_condition(x) == doctest::Approx(1.0).epsilon(1e-8));
  }

  SUBCASE("planted {100, 1} spectrum gives kappa 100") {
    TensorD x = make_design(rng, 16, 2, {100.0, 1.0});
    CHECK(hessian_condition(x) == doctest::Approx(100.0).epsilon(1e-6 / 100.0));
  }

  SUBCASE("duplicate feature column is singular") {
    TensorD x = sample_gaussian(rng, {10, 3});
    for (std::size_t i = 0; i < 10; ++i) x.at(i, std::size_t(2)) = x.at(i, std::size_t(1));
    CHECK(std::isinf(hessian_condition(x)));
  }

  SUBCASE("scale invariance") {
    TensorD x = make_design(rng, 24, 4, {7.0, 3.0, 2.0, 1.0});
    const double k1 = hessian_condition(x);
    const double k2 = hessian_condition(scale(x, 3.7));
    CHECK(k1 == doctest::Approx(k2).epsilon(1e-8));
  }

  SUBCASE("preconditions") {
    TensorD wide({2, 5}, 1.0);
    CHECK_THROWS_AS(hessian_condition(wide), ValueError);
    TensorD huge({70, 65}, 1.0);
    CHECK_THROWS_AS(hessian_condition(huge), ValueError);
  }
}

TEST_CASE("gd_least_squares primitive") {
  Rng rng(1301);
  const std::size_t n = 32, d = 4, k = 3;
  TensorD x = make_design(rng, n, d, {4.0, 3.0, 2.0, 1.0});
  TensorD astar = sample_gaussian(rng, {k, d});
  TensorD y({n, k});
  y.as_matrix(n, k).noalias() = x.as_matrix(n, d) * astar.as_matrix(k, d).transpose();

  SUBCASE("exact solution start takes zero iterations") {
    GdRun run = gd_least_squares(x, y, astar, 1e-3, 1e-10, 1000, "exact-start");
    CHECK(run.iterations == 0);
    CHECK(run.final_loss <= 1e-10);
  }

  SUBCASE("oversized step diverges with a named error") {
    TensorD a0({k, d}, 0.0);
    const double lmax = double(n) * 4.0;
    CHECK_THROWS_AS(gd_least_squares(x, y, a0, 2.5 / lmax, 1e-10, 100000, "hot"),
                    DivergenceError);
  }

  SUBCASE("measured iterations match the modal recurrence oracle within 1") {
    // project the initial error onto the Hessian eigenbasis and iterate the
    // closed-form per-mode decay loss(t) = 0.5 sum_i mu_i (1-lr mu_i)^{2t} ||e_i||^2
    TensorD a0({k, d}, 0.0);
    Eigen::MatrixXd xm = x.as_matrix(n, d).cast<double>();
    Eigen::MatrixXd h = xm.transpose() * xm;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    Eigen::MatrixXd e0 = -astar.as_matrix(k, d).cast<double>();  // A0 - A*
    Eigen::MatrixXd coords = e0 * es.eigenvectors();             // k x d modal coords
    const double lr = 1.0 / es.eigenvalues()(d - 1);
    const double tol = 1e-8;
    std::size_t predicted = 0;
    auto modal_loss = [&](std::size_t t) {
      double l = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const double mu = es.eigenvalues()(static_cast<Eigen::Index>(i));
        const double decay = std::pow(1.0 - lr * mu, 2.0 * double(t));
        l += 0.5 * mu * decay * coords.col(static_cast<Eigen::Index>(i)).squaredNorm();
      }
      return l;
    };
    while (modal_loss(predicted) > tol) ++predicted;
    GdRun run = gd_least_squares(x, y, a0, lr, tol, 1000000, "oracle-race");
    CHECK(std::llabs(static_cast<long long>(run.iterations) -
                     static_cast<long long>(predicted)) <= 1);
  }
}

TEST_CASE("whitened vs correlated race") {
  SUBCASE("kappa 1 ties within one iteration") {
    Rng rng(1401);
    RacePair pair = linreg_gd_race(rng, 6, 1.0, 1e-8);
    CHECK(pair.whitened.kappa == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(pair.correlated.kappa == doctest::Approx(1.0).epsilon(1e-6));
    const auto wi = static_cast<long long>(pair.whitened.iterations_to_tol);
    const auto ci = static_cast<long long>(pair.correlated.iterations_to_tol);
    CHECK(std::llabs(wi - ci) <= 1);
  }

  SUBCASE("kappa 100 at d=8: whitened wins by 10x or more") {
    Rng rng(1402);
    RacePair pair = linreg_gd_race(rng, 8, 100.0, 1e-8);
    CHECK(pair.correlated.kappa == doctest::Approx(100.0).epsilon(1e-4));
    CHECK(pair.whitened.iterations_to_tol < pair.correlated.iterations_to_tol);
    CHECK(double(pair.correlated.iterations_to_tol) /
              double(pair.whitened.iterations_to_tol) >= 10.0);
    CHECK(pair.whitened.final_loss <= 1e-8);
    CHECK(pair.correlated.final_loss <= 1e-8);
  }

  SUBCASE("iterations are non-increasing in the step size up to 1/lambda_max") {
    Rng rng(1403);
    std::size_t prev = std::size_t(-1);
    for (double s : {0.2, 0.4, 0.6, 0.8, 1.0}) {
      Rng fork(1404);  // same data each time
      RacePair pair = linreg_gd_race(fork, 6, 30.0, 1e-8, s);
      CHECK(pair.correlated.iterations_to_tol <= prev);
      prev = pair.correlated.iterations_to_tol;
    }
  }

  SUBCASE("preconditions") {
    Rng rng(1405);
    CHECK_THROWS_AS(linreg_gd_race(rng, 1, 10.0, 1e-8), ValueError);
    CHECK_THROWS_AS(linreg_gd_race(rng, 8, 0.5, 1e-8), ValueError);
    CHECK_THROWS_AS(linreg_gd_race(rng, 8, 10.0, -1.0), ValueError);
  }
}

TEST_CASE("sign coherence of per-sample dense gradients") {
  SUBCASE("relu-fed inputs give exactly 1.0 across 100 random nets") {
    Rng rng(1501);
    for (int t = 0; t < 100; ++t) {
      const std::size_t in = 2 + rng.below(8), out = 1 + rng.below(6);
      DenseLayer<double> dense(in, out, rng);
      TensorD x = relu(sample_gaussian(rng, {1, in}));
      if (x.as_array().maxCoeff() == 0.0) x[0] = 0.3;  // ensure some positive input
      dense.forward(x, true);
      zero_grads(dense);
      dense.backward(sample_gaussian(rng, {1, out}));
      dense.visit_parameters([&](const std::string& name, TensorD&, TensorD& g) {
        if (name != "w") return;
        SignCoherenceReport rep = sign_coherence(g);
        CHECK(!rep.empty);
        CHECK(rep.coherent_fraction == 1.0);
      });
    }
  }

  SUBCASE("zero-mean inputs break coherence as width grows") {
    Rng rng(1502);
    int nets_with_mixed_rows = 0;
    double fraction_sum = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
      const std::size_t in = 6, out = 4;
      DenseLayer<double> dense(in, out, rng);
      TensorD x = sample_gaussian(rng, {1, in});  // sign-symmetric, zero mean
      dense.forward(x, true);
      zero_grads(dense);
      dense.backward(sample_gaussian(rng, {1, out}));
      dense.visit_parameters([&](const std::string& name, TensorD&, TensorD& g) {
        if (name != "w") return;
        SignCoherenceReport rep = sign_coherence(g);
        fraction_sum += rep.coherent_fraction;
        if (rep.coherent_fraction < 1.0) ++nets_with_mixed_rows;
      });
    }
    // per-row coherence probability is 2/2^6 = 1/32; nearly every net mixed
    CHECK(nets_with_mixed_rows >= 90);
    CHECK(fraction_sum / trials < 0.5);
  }

  SUBCASE("per-row probability matches 2/2^n within 3 sigma over 10^4 trials") {
    Rng rng(1503);
    for (std::size_t n : {std::size_t(4), std::size_t(6)}) {
      const int trials = 10000;
      int coherent = 0;
      for (int t = 0; t < trials; ++t) {
        TensorD row = sample_gaussian(rng, {1, n});
        SignCoherenceReport rep = sign_coherence(row);
        if (rep.coherent_fraction == 1.0) ++coherent;
      }
      const double p = 2.0 / std::pow(2.0, double(n));
      const double sigma = std::sqrt(p * (1 - p) / trials);
      CHECK(std::abs(double(coherent) / trials - p) <= 3.0 * sigma);
    }
  }

  SUBCASE("single column is trivially coherent") {
    Rng rng(1504);
    TensorD g = sample_gaussian(rng, {5, 1});
    SignCoherenceReport rep = sign_coherence(g);
    CHECK(rep.coherent_fraction == 1.0);
    CHECK(rep.n_rows_measured == 5);
  }

  SUBCASE("zero rows are excluded; all-zero matrix flags empty") {
    TensorD g({3, 4}, 0.0);
    g.at(std::size_t(1), std::size_t(0)) = 1.0;
    g.at(std::size_t(1), std::size_t(2)) = -2.0;  // mixed row
    SignCoherenceReport rep = sign_coherence(g);
    CHECK(rep.n_rows_measured == 1);
    CHECK(rep.coherent_fraction == 0.0);
    CHECK(!rep.empty);

    TensorD z({3, 4}, 0.0);
    SignCoherenceReport zrep = sign_coherence(z);
    CHECK(zrep.empty);
    CHECK(zrep.n_rows_measured == 0);
  }
}
