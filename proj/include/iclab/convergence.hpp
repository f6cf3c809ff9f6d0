#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "iclab/rng.hpp"
#include "iclab/tensor.hpp"
#include "iclab/tensor_ops.hpp"

namespace iclab {

// ---------------------------------------------------------------------------
// Conditioning of the least-squares Hessian
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMaxEigenDim = 64;

/// Condition number lambda_max/lambda_min of X^T X (the Hessian of the
/// least-squares objective). Returns +infinity when the smallest eigenvalue
/// falls below 1e-12 of the largest (rank-deficient data: many optima).
/// Eigen's self-adjoint solver stands in for hand-rolled Jacobi sweeps; at
/// d <= 64 both are exact to working precision.
inline double hessian_condition(const TensorD& x) {
  if (x.rank() != 2) throw ShapeError("hessian_condition: expected n x d, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n < d)
    throw ValueError("hessian_condition: need at least d rows, got " + std::to_string(n) +
                     " x " + std::to_string(d));
  if (d > kMaxEigenDim)
    throw ValueError("hessian_condition: d capped at " + std::to_string(kMaxEigenDim));

  Eigen::MatrixXd h(d, d);
  {
    auto xm = x.as_matrix(n, d);
    h = (xm.transpose() * xm).eval().cast<double>();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h, Eigen::EigenvaluesOnly);
  const double lmin = es.eigenvalues()(0);
  const double lmax = es.eigenvalues()(static_cast<Eigen::Index>(d) - 1);
  if (lmax <= 0 || lmin <= 1e-12 * lmax) return std::numeric_limits<double>::infinity();
  return lmax / lmin;
}

// ---------------------------------------------------------------------------
// Gradient-descent race
// ---------------------------------------------------------------------------

struct ConditioningReport {
  double kappa = 1.0;
  std::size_t iterations_to_tol = 0;
  double final_loss = 0.0;
};

struct GdRun {
  std::size_t iterations = 0;
  double final_loss = 0.0;
};

/// Full-batch gradient descent on L(A) = 0.5 * sum_i ||y_i - A x_i||^2,
/// starting from `a` and stepping by lr. Stops once loss <= tol; throws
/// DivergenceError (naming `label`) after 10 consecutive loss increases.
inline GdRun gd_least_squares(const TensorD& x, const TensorD& y, TensorD a, double lr,
                              double tol, std::size_t max_iters, const std::string& label) {
  const std::size_t n = x.dim(0), d = x.dim(1), k = y.dim(1);
  if (y.rank() != 2 || y.dim(0) != n)
    throw ShapeError("gd_least_squares: targets " + shape_str(y.shape()));
  if (a.rank() != 2 || a.dim(0) != k || a.dim(1) != d)
    throw ShapeError("gd_least_squares: start point " + shape_str(a.shape()));

  auto xm = x.as_matrix(n, d);
  auto ym = y.as_matrix(n, k);
  auto am = a.as_matrix(k, d);
  using MatrixRM = TensorD::MatrixRM;

  auto loss_of = [&]() {
    MatrixRM r = xm * am.transpose() - ym;  // n x k residual
    return 0.5 * r.squaredNorm();
  };

  GdRun run;
  double loss = loss_of();
  double prev = loss;
  int rises = 0;
  while (loss > tol) {
    if (run.iterations >= max_iters)
      throw Error("gd_least_squares: " + label + " did not reach tol in " +
                  std::to_string(max_iters) + " iterations");
    MatrixRM r = xm * am.transpose() - ym;
    am.noalias() -= lr * (r.transpose() * xm);
    loss = loss_of();
    ++run.iterations;
    rises = loss > prev ? rises + 1 : 0;
    if (rises >= 10)
      throw DivergenceError("gd_least_squares: " + label + " rose for 10 consecutive steps (lr " +
                            std::to_string(lr) + ")");
    prev = loss;
  }
  run.final_loss = loss;
  return run;
}

namespace detail {

// X = U diag(sqrt(n * spectrum)) V^T with orthonormal U columns and orthogonal
// V, so X^T X = V diag(n * spectrum) V^T exactly (up to QR roundoff).
inline TensorD planted_design(Rng& rng, std::size_t n, std::size_t d,
                              const std::vector<double>& spectrum) {
  TensorD gu = sample_gaussian(rng, {n, d});
  TensorD gv = sample_gaussian(rng, {d, d});
  Eigen::MatrixXd u = Eigen::HouseholderQR<Eigen::MatrixXd>(
                          Eigen::Map<TensorD::MatrixRM>(gu.data(), n, d).cast<double>())
                          .householderQ() *
                      Eigen::MatrixXd::Identity(n, d);
  Eigen::MatrixXd v = Eigen::HouseholderQR<Eigen::MatrixXd>(
                          Eigen::Map<TensorD::MatrixRM>(gv.data(), d, d).cast<double>())
                          .householderQ();
  Eigen::VectorXd s(d);
  for (std::size_t i = 0; i < d; ++i) s(static_cast<Eigen::Index>(i)) =
      std::sqrt(double(n) * spectrum[i]);
  Eigen::MatrixXd xm = u * s.asDiagonal() * v.transpose();
  TensorD x({n, d});
  Eigen::Map<TensorD::MatrixRM>(x.data(), n, d) = xm;
  return x;
}

}  // namespace detail

struct RacePair {
  ConditioningReport whitened;
  ConditioningReport correlated;
};

/// Races gradient descent on two synthetic least-squares problems sharing the
/// same ground-truth map and step rule (lr_scale / lambda_max, lr_scale = 1 by
/// default): one with whitened inputs (X^T X proportional to I) and one with
/// planted condition number kappa_target. Targets are realizable, so loss 0 is
/// the optimum and tol is always reachable.
inline RacePair linreg_gd_race(Rng& rng, std::size_t d, double kappa_target, double tol,
                               double lr_scale = 1.0) {
  if (d < 2 || d > kMaxEigenDim) throw ValueError("linreg_gd_race: d must be in [2, 64]");
  if (kappa_target < 1.0) throw ValueError("linreg_gd_race: kappa_target must be >= 1");
  if (!(tol > 0)) throw ValueError("linreg_gd_race: tol must be positive");

  const std::size_t n = 8 * d, k = 4;
  std::vector<double> flat(d, 1.0);
  std::vector<double> planted(d);
  // log-spaced spectrum from kappa_target down to 1
  for (std::size_t i = 0; i < d; ++i)
    planted[i] = std::pow(kappa_target, double(d - 1 - i) / double(d - 1));

  TensorD xw = detail::planted_design(rng, n, d, flat);
  TensorD xc = detail::planted_design(rng, n, d, planted);
  TensorD astar = sample_gaussian(rng, {k, d});

  auto run_one = [&](const TensorD& x, double lmax, const char* label) {
    TensorD y({n, k});
    y.as_matrix(n, k).noalias() = x.as_matrix(n, d) * astar.as_matrix(k, d).transpose();
    TensorD a0({k, d}, 0.0);
    GdRun run = gd_least_squares(x, y, std::move(a0), lr_scale / lmax, tol, 10'000'000, label);
    ConditioningReport rep;
    rep.kappa = hessian_condition(x);
    rep.iterations_to_tol = run.iterations;
    rep.final_loss = run.final_loss;
    return rep;
  };

  RacePair pair;
  pair.whitened = run_one(xw, double(n) * 1.0, "whitened racer");
  pair.correlated = run_one(xc, double(n) * kappa_target, "correlated racer");
  return pair;
}

// ---------------------------------------------------------------------------
// Gradient sign coherence
// ---------------------------------------------------------------------------

struct SignCoherenceReport {
  double coherent_fraction = 0.0;
  std::size_t n_rows_measured = 0;  // rows with at least one nonzero entry
  bool empty = false;               // no measurable rows at all
};

/// Classifies each row of a per-sample weight-gradient matrix by whether its
/// nonzero entries share one sign. Zero entries are excluded outright (they
/// carry no sign information and would inflate coherence).
inline SignCoherenceReport sign_coherence(const TensorD& grads) {
  if (grads.rank() != 2)
    throw ShapeError("sign_coherence: expected a 2-d gradient matrix, got " +
                     shape_str(grads.shape()));
  const std::size_t m = grads.dim(0), n = grads.dim(1);
  SignCoherenceReport rep;
  std::size_t coherent = 0;
  for (std::size_t i = 0; i < m; ++i) {
    bool pos = false, neg = false, any = false;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = grads.at(i, j);
      if (v == 0.0) continue;
      any = true;
      (v > 0 ? pos : neg) = true;
    }
    if (!any) continue;
    ++rep.n_rows_measured;
    if (!(pos && neg)) ++coherent;
  }
  if (rep.n_rows_measured == 0) {
    rep.empty = true;
    return rep;
  }
  rep.coherent_fraction = double(coherent) / double(rep.n_rows_measured);
  return rep;
}

}  // namespace iclab
