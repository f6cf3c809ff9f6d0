#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "iclab/layers.hpp"
#include "iclab/rng.hpp"
#include "iclab/tensor.hpp"

namespace iclab {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

/// |a - n| / max(|a|, |n|, 1): relative for large gradients, absolute near zero.
inline double gradcheck_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

struct CoordRef {
  double* slot;
  double analytic;
};

// Collects (value slot, analytic grad) pairs for the input tensor and every
// parameter, then compares against central differences of `eval`.
template <typename Eval>
GradCheckReport compare_coords(std::vector<CoordRef>& coords, Eval&& eval, double h,
                               std::size_t max_coords, std::uint64_t subsample_seed) {
  if (max_coords > 0 && coords.size() > max_coords) {
    Rng pick(subsample_seed);
    for (std::size_t i = 0; i < max_coords; ++i) {
      const std::size_t j = i + pick.below(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
  }
  GradCheckReport rep;
  for (const CoordRef& c : coords) {
    const double orig = *c.slot;
    *c.slot = orig + h;
    const double fp = eval();
    *c.slot = orig - h;
    const double fm = eval();
    *c.slot = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    rep.max_rel_err = std::max(rep.max_rel_err, gradcheck_rel_err(c.analytic, numeric));
    ++rep.coords_checked;
  }
  return rep;
}

}  // namespace detail

/// Checks the layer's backward against central finite differences of the
/// probe loss sum(w ⊙ forward(x)), w a fixed random weighting. Any sampling
/// inside the layer is frozen by reseeding `seed` before every forward.
/// max_coords > 0 checks a seeded random subsample instead of every coordinate.
inline GradCheckReport gradcheck_layer(Layer<double>& layer, TensorD x, std::uint64_t seed,
                                       double h = 1e-5, std::size_t max_coords = 0) {
  Rng wseed(seed ^ 0x77e1c0de);
  Rng first(seed);
  TensorD y0 = layer.forward(x, true, &first);
  TensorD w = sample_gaussian(wseed, y0.shape());

  auto eval = [&]() {
    Rng r(seed);
    TensorD y = layer.forward(x, true, &r);
    return (y.as_array() * w.as_array()).sum();
  };

  // analytic pass
  zero_grads(layer);
  Rng r(seed);
  layer.forward(x, true, &r);
  TensorD dx = layer.backward(w);

  std::vector<detail::CoordRef> coords;
  for (std::size_t i = 0; i < x.size(); ++i) coords.push_back({&x[i], dx[i]});
  std::vector<TensorD> grad_copies;
  std::vector<TensorD*> param_ptrs;
  layer.visit_parameters([&](const std::string&, TensorD& v, TensorD& g) {
    grad_copies.push_back(g);
    param_ptrs.push_back(&v);
  });
  for (std::size_t t = 0; t < param_ptrs.size(); ++t)
    for (std::size_t i = 0; i < param_ptrs[t]->size(); ++i)
      coords.push_back({&(*param_ptrs[t])[i], grad_copies[t][i]});

  return detail::compare_coords(coords, eval, h, max_coords, seed ^ 0x5ab5e7);
}

/// Same scheme for a whole classifier: loss is mean softmax cross-entropy of
/// net(x) against labels. Checks parameter coordinates only.
inline GradCheckReport gradcheck_network(Layer<double>& net, const TensorD& x,
                                         const std::vector<std::size_t>& labels,
                                         std::uint64_t seed, double h = 1e-5,
                                         std::size_t max_coords = 0) {
  auto eval = [&]() {
    Rng r(seed);
    TensorD logits = net.forward(x, true, &r);
    return static_cast<double>(softmax_cross_entropy(logits, labels).first);
  };

  zero_grads(net);
  Rng r(seed);
  TensorD logits = net.forward(x, true, &r);
  auto [loss, dlogits] = softmax_cross_entropy(logits, labels);
  (void)loss;
  net.backward(dlogits);

  std::vector<TensorD> grad_copies;
  std::vector<TensorD*> param_ptrs;
  net.visit_parameters([&](const std::string&, TensorD& v, TensorD& g) {
    grad_copies.push_back(g);
    param_ptrs.push_back(&v);
  });
  std::vector<detail::CoordRef> coords;
  for (std::size_t t = 0; t < param_ptrs.size(); ++t)
    for (std::size_t i = 0; i < param_ptrs[t]->size(); ++i)
      coords.push_back({&(*param_ptrs[t])[i], grad_copies[t][i]});

  return detail::compare_coords(coords, eval, h, max_coords, seed ^ 0xacce55);
}

}  // namespace iclab
