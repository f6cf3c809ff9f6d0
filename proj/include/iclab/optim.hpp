#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "iclab/layers.hpp"
#include "iclab/tensor.hpp"

namespace iclab {

/// Piecewise-constant decay: the base rate divided by every milestone divisor
/// whose epoch has been reached. Divisors > 1 keep the schedule non-increasing.
struct LrMilestone {
  std::size_t epoch = 0;
  double divisor = 10.0;
};

struct LrSchedule {
  double base = 0.001;
  std::vector<LrMilestone> milestones;

  void validate() const {
    if (!(base > 0.0)) throw ValueError("LrSchedule: base rate must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (!(milestones[i].divisor >= 1.0))
        throw ValueError("LrSchedule: divisors below 1 would make the schedule increase");
      if (i > 0 && milestones[i].epoch <= milestones[i - 1].epoch)
        throw ValueError("LrSchedule: milestone epochs must be strictly increasing");
    }
  }

  double at(std::size_t epoch) const {
    double lr = base;
    for (const auto& m : milestones)
      if (epoch >= m.epoch) lr /= m.divisor;
    return lr;
  }
};

template <typename Scalar>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(Layer<Scalar>& net) = 0;
  virtual std::string kind() const = 0;

  void set_lr(double lr) {
    if (!(lr > 0.0)) throw ValueError("Optimizer: learning rate must be positive");
    lr_ = lr;
  }
  double lr() const { return lr_; }

 protected:
  explicit Optimizer(double lr) { set_lr(lr); }

  // Slot state is keyed by parameter-walk order; the walk must not change
  // between steps.
  struct Slot {
    std::string name;
    Tensor<Scalar> a, b;
  };

  template <typename Update>
  void walk(Layer<Scalar>& net, Update&& update) {
    std::size_t i = 0;
    net.visit_parameters([&](const std::string& name, Tensor<Scalar>& v, Tensor<Scalar>& g) {
      if (i == slots_.size())
        slots_.push_back({name, Tensor<Scalar>(g.shape(), Scalar(0)),
                          Tensor<Scalar>(g.shape(), Scalar(0))});
      Slot& s = slots_[i];
      if (s.name != name)
        throw UsageError("optimizer: parameter walk changed ('" + name + "' vs '" + s.name + "')");
      if (s.a.shape() != g.shape())
        throw ShapeError("optimizer: gradient shape changed for '" + name + "'");
      update(v, g, s);
      ++i;
    });
    if (i != slots_.size()) throw UsageError("optimizer: parameter walk shrank");
  }

  double lr_ = 0.001;
  std::vector<Slot> slots_;
};

template <typename Scalar>
class Sgd final : public Optimizer<Scalar> {
 public:
  explicit Sgd(double lr, double momentum = 0.0) : Optimizer<Scalar>(lr), momentum_(momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("Sgd: momentum must be in [0, 1)");
  }

  void step(Layer<Scalar>& net) override {
    using Slot = typename Optimizer<Scalar>::Slot;
    this->walk(net, [&](Tensor<Scalar>& v, Tensor<Scalar>& g, Slot& s) {
      if (momentum_ > 0.0) {
        s.a.as_array() = Scalar(momentum_) * s.a.as_array() + g.as_array();
        v.as_array() -= Scalar(this->lr_) * s.a.as_array();
      } else {
        v.as_array() -= Scalar(this->lr_) * g.as_array();
      }
    });
  }
  std::string kind() const override { return "sgd"; }

 private:
  double momentum_;
};

/// Bias-corrected Adam (b1 0.9, b2 0.999, eps 1e-8).
template <typename Scalar>
class Adam final : public Optimizer<Scalar> {
 public:
  explicit Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : Optimizer<Scalar>(lr), b1_(b1), b2_(b2), eps_(eps) {
    if (!(b1 >= 0.0 && b1 < 1.0 && b2 >= 0.0 && b2 < 1.0))
      throw ValueError("Adam: betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ValueError("Adam: eps must be positive");
  }

  void step(Layer<Scalar>& net) override {
    ++t_;
    const Scalar c1 = Scalar(1.0 - std::pow(b1_, double(t_)));
    const Scalar c2 = Scalar(1.0 - std::pow(b2_, double(t_)));
    using Slot = typename Optimizer<Scalar>::Slot;
    this->walk(net, [&](Tensor<Scalar>& v, Tensor<Scalar>& g, Slot& s) {
      auto m = s.a.as_array();
      auto w = s.b.as_array();
      m = Scalar(b1_) * m + Scalar(1.0 - b1_) * g.as_array();
      w = Scalar(b2_) * w + Scalar(1.0 - b2_) * g.as_array().square();
      v.as_array() -=
          Scalar(this->lr_) * (m / c1) / ((w / c2).sqrt() + Scalar(eps_));
    });
  }
  std::string kind() const override { return "adam"; }

  std::size_t steps_taken() const { return t_; }

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
};

}  // namespace iclab
