#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "iclab/rng.hpp"
#include "iclab/tensor.hpp"

namespace iclab {

// ---------------------------------------------------------------------------
// Discrete joint distributions. All information quantities are in bits.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Container>
inline void check_pmf(const Container& p, const char* who) {
  double sum = 0;
  for (double v : p) {
    if (v < -1e-15 || !std::isfinite(v))
      throw DistributionError(std::string(who) + ": negative or non-finite probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-12)
    throw DistributionError(std::string(who) + ": pmf sums to " + std::to_string(sum));
}

inline void check_support(const std::vector<double>& s, const char* who) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == 0.0)
      throw DistributionError(std::string(who) +
                              ": support contains 0 (zero-mass-at-zero assumption)");
    for (std::size_t j = i + 1; j < s.size(); ++j)
      if (s[i] == s[j]) throw DistributionError(std::string(who) + ": duplicate support value");
  }
}

}  // namespace detail

/// Joint pmf of a pair of discrete variables whose support excludes 0,
/// matching the assumption that mass at zero is negligible before gating.
struct DiscreteJoint {
  std::vector<double> support_x, support_y;
  TensorD pmf;  // [x-support size, y-support size]

  void validate() const {
    detail::check_support(support_x, "DiscreteJoint");
    detail::check_support(support_y, "DiscreteJoint");
    if (pmf.rank() != 2 || pmf.dim(0) != support_x.size() || pmf.dim(1) != support_y.size())
      throw DistributionError("DiscreteJoint: pmf shape does not match supports");
    detail::check_pmf(pmf.storage(), "DiscreteJoint");
  }

  std::vector<double> marginal_x() const {
    std::vector<double> m(pmf.dim(0), 0.0);
    for (std::size_t i = 0; i < pmf.dim(0); ++i)
      for (std::size_t j = 0; j < pmf.dim(1); ++j) m[i] += pmf.at(i, j);
    return m;
  }
  std::vector<double> marginal_y() const {
    std::vector<double> m(pmf.dim(1), 0.0);
    for (std::size_t i = 0; i < pmf.dim(0); ++i)
      for (std::size_t j = 0; j < pmf.dim(1); ++j) m[j] += pmf.at(i, j);
    return m;
  }

  /// Random valid instance: distinct nonzero supports, strictly positive pmf.
  static DiscreteJoint random(Rng& rng, std::size_t nx, std::size_t ny) {
    auto draw_support = [&](std::size_t n) {
      std::vector<double> s;
      while (s.size() < n) {
        double v = rng.uniform(-3.0, 3.0);
        if (std::abs(v) < 0.1) continue;
        bool dup = false;
        for (double u : s) dup = dup || u == v;
        if (!dup) s.push_back(v);
      }
      return s;
    };
    DiscreteJoint j;
    j.support_x = draw_support(nx);
    j.support_y = draw_support(ny);
    j.pmf = TensorD({nx, ny});
    double sum = 0;
    for (std::size_t i = 0; i < nx * ny; ++i) {
      j.pmf[i] = 0.05 + rng.uniform();
      sum += j.pmf[i];
    }
    j.pmf.as_array() /= sum;
    return j;
  }
};

/// Pushforward of a DiscreteJoint under independent Bernoulli gating; the
/// supports gain the value 0 as their last entry.
struct GatedJoint {
  std::vector<double> support_x, support_y;  // nonzero values then 0
  TensorD pmf;

  void validate() const {
    if (pmf.rank() != 2 || pmf.dim(0) != support_x.size() || pmf.dim(1) != support_y.size())
      throw DistributionError("GatedJoint: pmf shape does not match supports");
    detail::check_pmf(pmf.storage(), "GatedJoint");
  }

  std::vector<double> marginal_x() const {
    std::vector<double> m(pmf.dim(0), 0.0);
    for (std::size_t i = 0; i < pmf.dim(0); ++i)
      for (std::size_t j = 0; j < pmf.dim(1); ++j) m[i] += pmf.at(i, j);
    return m;
  }
  std::vector<double> marginal_y() const {
    std::vector<double> m(pmf.dim(1), 0.0);
    for (std::size_t i = 0; i < pmf.dim(0); ++i)
      for (std::size_t j = 0; j < pmf.dim(1); ++j) m[j] += pmf.at(i, j);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Entropy and mutual information
// ---------------------------------------------------------------------------

/// Shannon entropy in bits, with 0 log 0 := 0.
inline double entropy(const std::vector<double>& pmf) {
  detail::check_pmf(pmf, "entropy");
  double h = 0;
  for (double p : pmf)
    if (p > 0) h -= p * std::log2(p);
  return h;
}

namespace detail {

inline double mi_bits(const TensorD& pmf, const std::vector<double>& mx,
                      const std::vector<double>& my) {
  double mi = 0;
  for (std::size_t i = 0; i < pmf.dim(0); ++i)
    for (std::size_t j = 0; j < pmf.dim(1); ++j) {
      const double p = pmf.at(i, j);
      if (p > 0) mi += p * std::log2(p / (mx[i] * my[j]));
    }
  // theory guarantees nonnegativity; clear rounding dust
  return mi < 0 && mi > -1e-12 ? 0.0 : mi;
}

}  // namespace detail

inline double mutual_information(const DiscreteJoint& j) {
  j.validate();
  return detail::mi_bits(j.pmf, j.marginal_x(), j.marginal_y());
}

inline double mutual_information(const GatedJoint& j) {
  j.validate();
  return detail::mi_bits(j.pmf, j.marginal_x(), j.marginal_y());
}

// ---------------------------------------------------------------------------
// Gating
// ---------------------------------------------------------------------------

/// Exact distribution of (g1 x, g2 y) with independent Bernoulli(p_keep) gates:
/// nonzero cells scale by p^2, the new zero row/column carries p(1-p) times the
/// opposite marginal, and the (0,0) cell carries (1-p)^2.
inline GatedJoint apply_gates(const DiscreteJoint& j, double p_keep) {
  j.validate();
  if (!(p_keep > 0.0 && p_keep <= 1.0))
    throw ValueError("apply_gates: p_keep must be in (0, 1], got " + std::to_string(p_keep));
  const double p = p_keep, q = 1.0 - p_keep;
  const std::size_t nx = j.support_x.size(), ny = j.support_y.size();
  GatedJoint g;
  g.support_x = j.support_x;
  g.support_x.push_back(0.0);
  g.support_y = j.support_y;
  g.support_y.push_back(0.0);
  g.pmf = TensorD({nx + 1, ny + 1}, 0.0);
  const auto mx = j.marginal_x();
  const auto my = j.marginal_y();
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t k = 0; k < ny; ++k) g.pmf.at(i, k) = p * p * j.pmf.at(i, k);
  for (std::size_t i = 0; i < nx; ++i) g.pmf.at(i, ny) = p * q * mx[i];
  for (std::size_t k = 0; k < ny; ++k) g.pmf.at(nx, k) = q * p * my[k];
  g.pmf.at(nx, ny) = q * q;
  return g;
}

// ---------------------------------------------------------------------------
// Claim checks
// ---------------------------------------------------------------------------

/// Entropy cost of the gate itself: -p log2 p - (1-p) log2 (1-p).
inline double gate_entropy(double p_keep) {
  double h = 0;
  if (p_keep > 0 && p_keep < 1)
    h = -p_keep * std::log2(p_keep) - (1 - p_keep) * std::log2(1 - p_keep);
  return h;
}

/// Checks the two closed forms for a gated pair: mutual information scales by
/// p_keep^2, and each gated marginal entropy is p*H + gate_entropy(p).
struct Theorem1Report {
  double p_keep = 0;
  double mi_orig = 0;
  double mi_gated = 0;
  double mi_ratio = 0;  // mi_gated / mi_orig (NaN when mi_orig ~ 0)
  double mi_residual = 0;
  double entropy_residual = 0;  // worst of the two marginals
  double tolerance = 0;
  bool pass = false;
};

inline Theorem1Report verify_theorem1(const DiscreteJoint& j, double p_keep,
                                      double tolerance = 1e-10) {
  Theorem1Report r;
  r.p_keep = p_keep;
  r.tolerance = tolerance;
  r.mi_orig = mutual_information(j);
  GatedJoint g = apply_gates(j, p_keep);
  r.mi_gated = mutual_information(g);
  r.mi_residual = std::abs(r.mi_gated - p_keep * p_keep * r.mi_orig);
  r.mi_ratio = r.mi_orig > 1e-15 ? r.mi_gated / r.mi_orig
                                 : std::numeric_limits<double>::quiet_NaN();

  const double eps_p = gate_entropy(p_keep);
  const double hx = entropy(j.marginal_x());
  const double hy = entropy(j.marginal_y());
  const double hgx = entropy(g.marginal_x());
  const double hgy = entropy(g.marginal_y());
  r.entropy_residual = std::max(std::abs(hgx - (p_keep * hx + eps_p)),
                                std::abs(hgy - (p_keep * hy + eps_p)));
  r.pass = r.mi_residual <= tolerance && r.entropy_residual <= tolerance;
  return r;
}

/// Monte-Carlo check that raw gating scales the correlation of a standardized
/// pair by p_keep. Inputs are population-standardized, so correlations are raw
/// product moments; the gated normalizer uses the derived variance p_keep.
struct CorrelationReport {
  double p_keep = 0;
  double c_target = 0;
  double c_before = 0;   // sample E[x1 x2]
  double c_after = 0;    // sample E[g1 x1 g2 x2] / p_keep
  double predicted = 0;  // p_keep * c_before
  double residual = 0;   // |c_after - predicted|
  double mc_stderr = 0;  // standard error of c_after around predicted
  std::size_t n_samples = 0;
  bool pass = false;
};

inline CorrelationReport correlation_scaling_check(Rng& rng, double p_keep, double c,
                                                   std::size_t n_samples) {
  if (!(p_keep > 0.0 && p_keep <= 1.0))
    throw ValueError("correlation_scaling_check: p_keep must be in (0, 1]");
  if (!(c >= -1.0 && c <= 1.0))
    throw ValueError("correlation_scaling_check: correlation must be in [-1, 1]");
  CorrelationReport r;
  r.p_keep = p_keep;
  r.c_target = c;
  r.n_samples = n_samples;
  const double root = std::sqrt(1.0 - c * c);
  double sum_xy = 0, sum_w = 0, sum_w2 = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double z1 = rng.normal(), z2 = rng.normal();
    const double x1 = z1;
    const double x2 = c * z1 + root * z2;
    sum_xy += x1 * x2;
    const double g1 = rng.bernoulli(p_keep) ? 1.0 : 0.0;
    const double g2 = rng.bernoulli(p_keep) ? 1.0 : 0.0;
    const double w = g1 * x1 * g2 * x2;
    sum_w += w;
    sum_w2 += w * w;
  }
  const double n = static_cast<double>(n_samples);
  r.c_before = sum_xy / n;
  r.c_after = sum_w / (n * p_keep);
  r.predicted = p_keep * r.c_before;
  r.residual = std::abs(r.c_after - r.predicted);
  const double var_w = sum_w2 / n - (sum_w / n) * (sum_w / n);
  r.mc_stderr = std::sqrt(std::max(var_w, 0.0) / n) / p_keep;
  // 3-sigma Monte-Carlo band, with an absolute floor for the p_keep=1 case
  // where gating is deterministic and the residual is exactly zero
  r.pass = r.residual <= std::max(3.0 * r.mc_stderr, 1e-12);
  return r;
}

// ---------------------------------------------------------------------------
// Histogram MI estimator
// ---------------------------------------------------------------------------

struct EmpiricalMi {
  double bits = 0;
  bool degenerate = false;  // constant input; estimate forced to 0
};

/// Plug-in estimate from an equal-width 2-D histogram over the observed range.
inline EmpiricalMi empirical_mi(const TensorD& samples_a, const TensorD& samples_b,
                                std::size_t n_bins) {
  if (samples_a.size() != samples_b.size())
    throw ShapeError("empirical_mi: sample counts differ");
  if (samples_a.size() < 1000)
    throw ValueError("empirical_mi: need at least 1000 samples, got " +
                     std::to_string(samples_a.size()));
  if (n_bins < 2) throw ValueError("empirical_mi: need at least 2 bins");

  const std::size_t n = samples_a.size();
  const double amin = samples_a.as_array().minCoeff(), amax = samples_a.as_array().maxCoeff();
  const double bmin = samples_b.as_array().minCoeff(), bmax = samples_b.as_array().maxCoeff();
  EmpiricalMi out;
  if (amin == amax || bmin == bmax) {
    out.degenerate = true;
    return out;
  }
  const double aw = (amax - amin) / double(n_bins), bw = (bmax - bmin) / double(n_bins);
  std::vector<double> joint(n_bins * n_bins, 0.0);
  auto bin = [&](double v, double lo, double w) {
    auto k = static_cast<std::size_t>((v - lo) / w);
    return k >= n_bins ? n_bins - 1 : k;
  };
  for (std::size_t i = 0; i < n; ++i)
    joint[bin(samples_a[i], amin, aw) * n_bins + bin(samples_b[i], bmin, bw)] += 1.0;
  for (double& v : joint) v /= double(n);
  std::vector<double> ma(n_bins, 0.0), mb(n_bins, 0.0);
  for (std::size_t i = 0; i < n_bins; ++i)
    for (std::size_t j = 0; j < n_bins; ++j) {
      ma[i] += joint[i * n_bins + j];
      mb[j] += joint[i * n_bins + j];
    }
  double mi = 0;
  for (std::size_t i = 0; i < n_bins; ++i)
    for (std::size_t j = 0; j < n_bins; ++j) {
      const double p = joint[i * n_bins + j];
      if (p > 0) mi += p * std::log2(p / (ma[i] * mb[j]));
    }
  out.bits = mi < 0 ? 0.0 : mi;
  return out;
}

}  // namespace iclab
