#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "iclab/rng.hpp"
#include "iclab/tensor.hpp"
#include "iclab/tensor_ops.hpp"

namespace iclab {

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// theorem: multiply by the raw gate g, so gated moments match the analysis
/// (E[x-hat] = p E[x], E[x-hat^2] = p E[x^2]).
/// inverted: multiply by g / p_keep, the usual framework behavior whose
/// expectation matches the ungated activation. Training default.
enum class DropoutMode { kTheorem, kInverted };

struct DropoutSpec {
  double p_keep = 1.0;
  DropoutMode mode = DropoutMode::kInverted;

  void validate() const {
    if (!(p_keep > 0.0 && p_keep <= 1.0))
      throw ValueError("DropoutSpec: p_keep must be in (0, 1], got " + std::to_string(p_keep));
  }
};

/// Gates each entry with an i.i.d. Bernoulli(p_keep) mask during training;
/// identity at inference in both modes. Returns (output, mask).
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> dropout_forward(const Tensor<Scalar>& x,
                                                          const DropoutSpec& spec, Rng& rng,
                                                          bool training) {
  spec.validate();
  if (!training || spec.p_keep == 1.0) {
    Tensor<Scalar> mask(x.shape(), Scalar(1));
    return {x, std::move(mask)};
  }
  Tensor<Scalar> mask = sample_bernoulli<Scalar>(rng, spec.p_keep, x.shape());
  Tensor<Scalar> out(x.shape());
  const Scalar s =
      spec.mode == DropoutMode::kInverted ? Scalar(1.0 / spec.p_keep) : Scalar(1);
  out.as_array() = x.as_array() * mask.as_array() * s;
  return {std::move(out), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Learnable scale/shift plus running statistics, one entry per channel.
template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> gamma, beta;
  Tensor<Scalar> running_mean, running_var;
  Scalar momentum = Scalar(0.99);
  Scalar epsilon = Scalar(1e-3);

  static BatchNormState make(std::size_t channels, Scalar momentum = Scalar(0.99),
                             Scalar epsilon = Scalar(1e-3)) {
    if (!(epsilon > Scalar(0))) throw ValueError("BatchNormState: epsilon must be positive");
    if (!(momentum > Scalar(0) && momentum < Scalar(1)))
      throw ValueError("BatchNormState: momentum must be in (0, 1)");
    BatchNormState s;
    s.gamma = Tensor<Scalar>({channels}, Scalar(1));
    s.beta = Tensor<Scalar>({channels}, Scalar(0));
    s.running_mean = Tensor<Scalar>({channels}, Scalar(0));
    s.running_var = Tensor<Scalar>({channels}, Scalar(1));
    s.momentum = momentum;
    s.epsilon = epsilon;
    return s;
  }
};

/// Forward cache needed by the batch-coupled backward pass.
template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> x_hat;
  std::vector<Scalar> inv_std;  // per channel, 1/sqrt(var + eps)
};

namespace detail {

// x is [N x C] or [N x C x H x W]; channel axis is 1.
template <typename Scalar>
void check_bn_shape(const Tensor<Scalar>& x, std::size_t channels) {
  if (x.rank() != 2 && x.rank() != 4)
    throw ShapeError("batchnorm: expected rank-2 or rank-4 input, got " + shape_str(x.shape()));
  if (x.dim(1) != channels)
    throw ShapeError("batchnorm: input has " + std::to_string(x.dim(1)) +
                     " channels, state has " + std::to_string(channels));
}

// Per-channel mean and population variance over batch and spatial axes.
template <typename Scalar>
void channel_moments(const Tensor<Scalar>& x, std::vector<Scalar>& mean,
                     std::vector<Scalar>& var) {
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.size() / (n * c);
  mean.assign(c, Scalar(0));
  var.assign(c, Scalar(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar* p = x.data() + (i * c + j) * hw;
      Scalar s = 0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      mean[j] += s;
    }
  const Scalar m = static_cast<Scalar>(n * hw);
  for (std::size_t j = 0; j < c; ++j) mean[j] /= m;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar* p = x.data() + (i * c + j) * hw;
      Scalar s = 0;
      for (std::size_t k = 0; k < hw; ++k) {
        const Scalar d = p[k] - mean[j];
        s += d * d;
      }
      var[j] += s;
    }
  for (std::size_t j = 0; j < c; ++j) var[j] /= m;
}

}  // namespace detail

/// Training: standardize per channel with batch statistics, then scale/shift;
/// running stats updated as running <- momentum*running + (1-momentum)*batch.
/// Inference: standardize with the running statistics.
template <typename Scalar>
Tensor<Scalar> batchnorm_forward(const Tensor<Scalar>& x, BatchNormState<Scalar>& state,
                                 bool training, BatchNormCache<Scalar>* cache = nullptr) {
  const std::size_t c = state.gamma.dim(0);
  detail::check_bn_shape(x, c);
  const std::size_t n = x.dim(0);
  const std::size_t hw = x.size() / (n * c);

  std::vector<Scalar> mean(c), var(c);
  if (training) {
    if (n < 2)
      throw BatchTooSmallError("batchnorm: training forward needs batch size >= 2, got " +
                               std::to_string(n));
    detail::channel_moments(x, mean, var);
    for (std::size_t j = 0; j < c; ++j) {
      state.running_mean[j] =
          state.momentum * state.running_mean[j] + (Scalar(1) - state.momentum) * mean[j];
      state.running_var[j] =
          state.momentum * state.running_var[j] + (Scalar(1) - state.momentum) * var[j];
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] = state.running_mean[j];
      var[j] = state.running_var[j];
    }
  }

  Tensor<Scalar> out(x.shape());
  std::vector<Scalar> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = Scalar(1) / std::sqrt(var[j] + state.epsilon);

  Tensor<Scalar>* xhat_dst = nullptr;
  if (cache) {
    cache->x_hat = Tensor<Scalar>(x.shape());
    cache->inv_std = inv_std;
    xhat_dst = &cache->x_hat;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar* px = x.data() + (i * c + j) * hw;
      Scalar* po = out.data() + (i * c + j) * hw;
      Scalar* ph = xhat_dst ? xhat_dst->data() + (i * c + j) * hw : nullptr;
      const Scalar mu = mean[j], is = inv_std[j], g = state.gamma[j], b = state.beta[j];
      for (std::size_t k = 0; k < hw; ++k) {
        const Scalar h = (px[k] - mu) * is;
        if (ph) ph[k] = h;
        po[k] = g * h + b;
      }
    }
  return out;
}

/// Full batch-coupled gradient (mean and variance treated as functions of x):
///   dx = gamma*inv_std/M * (M*dy - sum(dy) - x_hat * sum(dy*x_hat))
template <typename Scalar>
Tensor<Scalar> batchnorm_backward(const Tensor<Scalar>& dy, const BatchNormState<Scalar>& state,
                                  const BatchNormCache<Scalar>& cache, Tensor<Scalar>& dgamma,
                                  Tensor<Scalar>& dbeta) {
  const std::size_t c = state.gamma.dim(0);
  detail::check_bn_shape(dy, c);
  if (!dy.same_shape(cache.x_hat))
    throw ShapeError("batchnorm backward: upstream shape " + shape_str(dy.shape()) +
                     " does not match cached forward " + shape_str(cache.x_hat.shape()));
  const std::size_t n = dy.dim(0);
  const std::size_t hw = dy.size() / (n * c);
  const Scalar m = static_cast<Scalar>(n * hw);

  dgamma = Tensor<Scalar>({c}, Scalar(0));
  dbeta = Tensor<Scalar>({c}, Scalar(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar* pd = dy.data() + (i * c + j) * hw;
      const Scalar* ph = cache.x_hat.data() + (i * c + j) * hw;
      Scalar sg = 0, sb = 0;
      for (std::size_t k = 0; k < hw; ++k) {
        sg += pd[k] * ph[k];
        sb += pd[k];
      }
      dgamma[j] += sg;
      dbeta[j] += sb;
    }

  Tensor<Scalar> dx(dy.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const Scalar* pd = dy.data() + (i * c + j) * hw;
      const Scalar* ph = cache.x_hat.data() + (i * c + j) * hw;
      Scalar* px = dx.data() + (i * c + j) * hw;
      const Scalar a = state.gamma[j] * cache.inv_std[j] / m;
      const Scalar sum_dy = dbeta[j], sum_dyh = dgamma[j];
      for (std::size_t k = 0; k < hw; ++k)
        px[k] = a * (m * pd[k] - sum_dy - ph[k] * sum_dyh);
    }
  return dx;
}

/// BatchNorm then Dropout, in that order. The normalize-then-gate composite
/// placed in front of weight layers.
template <typename Scalar>
Tensor<Scalar> ic_forward(const Tensor<Scalar>& x, BatchNormState<Scalar>& bn,
                          const DropoutSpec& drop, Rng& rng, bool training) {
  Tensor<Scalar> normalized = batchnorm_forward(x, bn, training);
  return dropout_forward(normalized, drop, rng, training).first;
}

// ---------------------------------------------------------------------------
// Initialization and loss
// ---------------------------------------------------------------------------

/// I.i.d. normal with mean 0 and variance 2/fan_in.
template <typename Scalar = double>
Tensor<Scalar> he_init(Rng& rng, Shape shape, std::size_t fan_in) {
  if (fan_in < 1) throw ValueError("he_init: fan_in must be >= 1");
  return sample_gaussian<Scalar>(rng, std::move(shape), 0.0, std::sqrt(2.0 / double(fan_in)));
}

/// Mean softmax cross-entropy over the batch plus the logits gradient.
/// Row-max subtraction keeps the exponentials bounded.
template <typename Scalar>
std::pair<Scalar, Tensor<Scalar>> softmax_cross_entropy(const Tensor<Scalar>& logits,
                                                        const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_cross_entropy: expected NxK logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  Tensor<Scalar> dlogits(logits.shape());
  Scalar loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw ValueError("softmax_cross_entropy: label out of range");
    const Scalar* row = logits.data() + i * k;
    Scalar* drow = dlogits.data() + i * k;
    Scalar mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    Scalar z = 0;
    for (std::size_t j = 0; j < k; ++j) {
      drow[j] = std::exp(row[j] - mx);
      z += drow[j];
    }
    loss -= std::log(drow[labels[i]] / z);
    const Scalar inv = Scalar(1) / (z * Scalar(n));
    for (std::size_t j = 0; j < k; ++j) drow[j] *= inv;
    drow[labels[i]] -= Scalar(1) / Scalar(n);
  }
  return {loss / Scalar(n), std::move(dlogits)};
}

// ---------------------------------------------------------------------------
// Composable layer nodes
// ---------------------------------------------------------------------------

/// Base of the network graph. backward is only valid after a forward with
/// training=true on the same instance (caches are armed by that call).
template <typename Scalar>
class Layer {
 public:
  using ParamVisitor =
      std::function<void(const std::string&, Tensor<Scalar>&, Tensor<Scalar>&)>;
  using BufferVisitor = std::function<void(const std::string&, Tensor<Scalar>&)>;

  virtual ~Layer() = default;
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* rng = nullptr) = 0;
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& dy) = 0;
  /// Calls fn(name, value, grad) for every trainable tensor, in a stable order.
  virtual void visit_parameters(const ParamVisitor& fn) { (void)fn; }
  /// Calls fn(name, value) for persistent non-trainable state (running stats).
  virtual void visit_buffers(const BufferVisitor& fn) { (void)fn; }
  virtual std::string kind() const = 0;

 protected:
  void require_cache(bool have, const char* who) const {
    if (!have)
      throw UsageError(std::string(who) + ": backward called without a training-mode forward");
  }
};

template <typename Scalar>
using LayerPtr = std::unique_ptr<Layer<Scalar>>;

/// y = x W^T + b with W stored [out x in], so row j of the weight gradient is
/// the upstream component j times the input vector.
template <typename Scalar>
class DenseLayer final : public Layer<Scalar> {
 public:
  DenseLayer(std::size_t in, std::size_t out, Rng& rng)
      : w_(he_init<Scalar>(rng, {out, in}, in)),
        b_({out}, Scalar(0)),
        gw_({out, in}, Scalar(0)),
        gb_({out}, Scalar(0)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* = nullptr) override {
    if (x.rank() != 2 || x.dim(1) != w_.dim(1))
      throw ShapeError("dense: input " + shape_str(x.shape()) + " incompatible with weight " +
                       shape_str(w_.shape()));
    const std::size_t n = x.dim(0), in = w_.dim(1), out = w_.dim(0);
    Tensor<Scalar> y({n, out});
    y.as_matrix(n, out).noalias() = x.as_matrix(n, in) * w_.as_matrix(out, in).transpose();
    y.as_matrix(n, out).rowwise() += b_.as_matrix(1, out).row(0);
    if (training) {
      x_ = x;
      have_cache_ = true;
    }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    this->require_cache(have_cache_, "dense");
    const std::size_t n = x_.dim(0), in = w_.dim(1), out = w_.dim(0);
    if (dy.rank() != 2 || dy.dim(0) != n || dy.dim(1) != out)
      throw ShapeError("dense backward: upstream " + shape_str(dy.shape()));
    gw_.as_matrix(out, in).noalias() += dy.as_matrix(n, out).transpose() * x_.as_matrix(n, in);
    gb_.as_matrix(1, out).row(0) += dy.as_matrix(n, out).colwise().sum();
    Tensor<Scalar> dx({n, in});
    dx.as_matrix(n, in).noalias() = dy.as_matrix(n, out) * w_.as_matrix(out, in);
    return dx;
  }

  void visit_parameters(const typename Layer<Scalar>::ParamVisitor& fn) override {
    fn("w", w_, gw_);
    fn("b", b_, gb_);
  }
  std::string kind() const override { return "dense"; }

  Tensor<Scalar>& weight() { return w_; }
  Tensor<Scalar>& bias() { return b_; }

 private:
  Tensor<Scalar> w_, b_, gw_, gb_, x_;
  bool have_cache_ = false;
};

/// Bias-free 2-D cross-correlation (a normalization layer typically follows,
/// which makes a bias redundant). Caches the im2col patch matrices from the
/// forward pass so backward reuses them.
template <typename Scalar>
class Conv2DLayer final : public Layer<Scalar> {
 public:
  Conv2DLayer(std::size_t in_c, std::size_t filters, std::size_t ksize, std::size_t stride,
              Pad pad, Rng& rng)
      : k_(he_init<Scalar>(rng, {filters, in_c, ksize, ksize}, in_c * ksize * ksize)),
        gk_({filters, in_c, ksize, ksize}, Scalar(0)),
        stride_(stride),
        pad_(pad) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* = nullptr) override {
    geom_ = conv2d_geometry(x.shape(), k_.shape(), stride_, pad_);
    const std::size_t ckk = geom_.in_c * geom_.kh * geom_.kw;
    const std::size_t ohw = geom_.out_h * geom_.out_w;
    Tensor<Scalar> out({geom_.batch, geom_.filters, geom_.out_h, geom_.out_w});
    auto kmat = k_.as_matrix(geom_.filters, ckk);
    using MatrixRM = typename Tensor<Scalar>::MatrixRM;
    if (training) cols_.resize(geom_.batch);
    std::vector<Scalar> scratch;
    for (std::size_t n = 0; n < geom_.batch; ++n) {
      std::vector<Scalar>& col = training ? cols_[n] : scratch;
      col.resize(ckk * ohw);
      im2col_image(x.data() + n * geom_.in_c * geom_.in_h * geom_.in_w, geom_, col.data());
      Eigen::Map<const MatrixRM> colmat(col.data(), static_cast<Eigen::Index>(ckk),
                                        static_cast<Eigen::Index>(ohw));
      Eigen::Map<MatrixRM> omat(out.data() + n * geom_.filters * ohw,
                                static_cast<Eigen::Index>(geom_.filters),
                                static_cast<Eigen::Index>(ohw));
      omat.noalias() = kmat * colmat;
    }
    have_cache_ = training;
    return out;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    this->require_cache(have_cache_, "conv2d");
    const std::size_t ckk = geom_.in_c * geom_.kh * geom_.kw;
    const std::size_t ohw = geom_.out_h * geom_.out_w;
    if (dy.rank() != 4 || dy.dim(0) != geom_.batch || dy.dim(1) != geom_.filters ||
        dy.dim(2) != geom_.out_h || dy.dim(3) != geom_.out_w)
      throw ShapeError("conv2d backward: upstream " + shape_str(dy.shape()));
    Tensor<Scalar> dx({geom_.batch, geom_.in_c, geom_.in_h, geom_.in_w}, Scalar(0));
    auto gkmat = gk_.as_matrix(geom_.filters, ckk);
    auto kmat = k_.as_matrix(geom_.filters, ckk);
    using MatrixRM = typename Tensor<Scalar>::MatrixRM;
    std::vector<Scalar> dcol(ckk * ohw);
    for (std::size_t n = 0; n < geom_.batch; ++n) {
      Eigen::Map<const MatrixRM> dymat(dy.data() + n * geom_.filters * ohw,
                                       static_cast<Eigen::Index>(geom_.filters),
                                       static_cast<Eigen::Index>(ohw));
      Eigen::Map<const MatrixRM> colmat(cols_[n].data(), static_cast<Eigen::Index>(ckk),
                                        static_cast<Eigen::Index>(ohw));
      gkmat.noalias() += dymat * colmat.transpose();
      Eigen::Map<MatrixRM> dcolmat(dcol.data(), static_cast<Eigen::Index>(ckk),
                                   static_cast<Eigen::Index>(ohw));
      dcolmat.noalias() = kmat.transpose() * dymat;
      col2im_add_image(dcol.data(), geom_,
                       dx.data() + n * geom_.in_c * geom_.in_h * geom_.in_w);
    }
    return dx;
  }

  void visit_parameters(const typename Layer<Scalar>::ParamVisitor& fn) override {
    fn("k", k_, gk_);
  }
  std::string kind() const override { return "conv2d"; }

  Tensor<Scalar>& kernel() { return k_; }

 private:
  Tensor<Scalar> k_, gk_;
  std::size_t stride_;
  Pad pad_;
  Conv2dGeometry geom_{};
  std::vector<std::vector<Scalar>> cols_;
  bool have_cache_ = false;
};

template <typename Scalar>
class ReLULayer final : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* = nullptr) override {
    Tensor<Scalar> y = relu(x);
    if (training) {
      mask_ = Tensor<Scalar>(x.shape());
      mask_.as_array() = (x.as_array() > Scalar(0)).template cast<Scalar>();
      have_cache_ = true;
    }
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    this->require_cache(have_cache_, "relu");
    if (!dy.same_shape(mask_)) throw ShapeError("relu backward: upstream " + shape_str(dy.shape()));
    return hadamard(dy, mask_);
  }
  std::string kind() const override { return "relu"; }

 private:
  Tensor<Scalar> mask_;
  bool have_cache_ = false;
};

template <typename Scalar>
class BatchNormLayer final : public Layer<Scalar> {
 public:
  explicit BatchNormLayer(std::size_t channels, Scalar momentum = Scalar(0.99),
                          Scalar epsilon = Scalar(1e-3))
      : state_(BatchNormState<Scalar>::make(channels, momentum, epsilon)),
        ggamma_({channels}, Scalar(0)),
        gbeta_({channels}, Scalar(0)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* = nullptr) override {
    Tensor<Scalar> y = batchnorm_forward(x, state_, training, training ? &cache_ : nullptr);
    have_cache_ = training;
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    this->require_cache(have_cache_, "batchnorm");
    Tensor<Scalar> dg, db;
    Tensor<Scalar> dx = batchnorm_backward(dy, state_, cache_, dg, db);
    ggamma_.as_array() += dg.as_array();
    gbeta_.as_array() += db.as_array();
    return dx;
  }
  void visit_parameters(const typename Layer<Scalar>::ParamVisitor& fn) override {
    fn("gamma", state_.gamma, ggamma_);
    fn("beta", state_.beta, gbeta_);
  }
  void visit_buffers(const typename Layer<Scalar>::BufferVisitor& fn) override {
    fn("running_mean", state_.running_mean);
    fn("running_var", state_.running_var);
  }
  std::string kind() const override { return "batchnorm"; }

  BatchNormState<Scalar>& state() { return state_; }

 private:
  BatchNormState<Scalar> state_;
  BatchNormCache<Scalar> cache_;
  Tensor<Scalar> ggamma_, gbeta_;
  bool have_cache_ = false;
};

template <typename Scalar>
class DropoutLayer final : public Layer<Scalar> {
 public:
  explicit DropoutLayer(DropoutSpec spec) : spec_(spec) { spec_.validate(); }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* rng = nullptr) override {
    if (training && spec_.p_keep < 1.0 && rng == nullptr)
      throw UsageError("dropout: training forward needs an rng");
    Rng dummy(0);
    auto [y, mask] = dropout_forward(x, spec_, rng ? *rng : dummy, training);
    if (training) {
      mask_ = std::move(mask);
      have_cache_ = true;
    }
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    this->require_cache(have_cache_, "dropout");
    if (!dy.same_shape(mask_))
      throw ShapeError("dropout backward: upstream " + shape_str(dy.shape()));
    Tensor<Scalar> dx = hadamard(dy, mask_);
    if (spec_.mode == DropoutMode::kInverted)
      dx.as_array() *= Scalar(1.0 / spec_.p_keep);
    return dx;
  }
  std::string kind() const override { return "dropout"; }

  const DropoutSpec& spec() const { return spec_; }
  const Tensor<Scalar>& last_mask() const { return mask_; }

 private:
  DropoutSpec spec_;
  Tensor<Scalar> mask_;
  bool have_cache_ = false;
};

/// BatchNorm then Dropout as one node.
template <typename Scalar>
class ICLayer final : public Layer<Scalar> {
 public:
  ICLayer(std::size_t channels, DropoutSpec drop, Scalar momentum = Scalar(0.99),
          Scalar epsilon = Scalar(1e-3))
      : bn_(channels, momentum, epsilon), drop_(drop) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* rng = nullptr) override {
    return drop_.forward(bn_.forward(x, training, rng), training, rng);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    return bn_.backward(drop_.backward(dy));
  }
  void visit_parameters(const typename Layer<Scalar>::ParamVisitor& fn) override {
    bn_.visit_parameters(fn);
  }
  void visit_buffers(const typename Layer<Scalar>::BufferVisitor& fn) override {
    bn_.visit_buffers(fn);
  }
  std::string kind() const override { return "ic"; }

  BatchNormLayer<Scalar>& bn() { return bn_; }
  DropoutLayer<Scalar>& dropout() { return drop_; }

 private:
  BatchNormLayer<Scalar> bn_;
  DropoutLayer<Scalar> drop_;
};

template <typename Scalar>
class GlobalAvgPoolLayer final : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* = nullptr) override {
    Tensor<Scalar> y = global_avg_pool(x);
    if (training) {
      in_shape_ = x.shape();
      have_cache_ = true;
    }
    return y;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    this->require_cache(have_cache_, "global_avg_pool");
    const std::size_t n = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
    if (dy.rank() != 2 || dy.dim(0) != n || dy.dim(1) != c)
      throw ShapeError("global_avg_pool backward: upstream " + shape_str(dy.shape()));
    Tensor<Scalar> dx(in_shape_);
    const Scalar inv = Scalar(1) / static_cast<Scalar>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
      Scalar* p = dx.data() + i * hw;
      const Scalar v = dy[i] * inv;
      for (std::size_t k = 0; k < hw; ++k) p[k] = v;
    }
    return dx;
  }
  std::string kind() const override { return "global_avg_pool"; }

 private:
  Shape in_shape_;
  bool have_cache_ = false;
};

/// Runs children in order; backward in reverse order.
template <typename Scalar>
class Sequential final : public Layer<Scalar> {
 public:
  Sequential() = default;
  explicit Sequential(std::vector<LayerPtr<Scalar>> layers) : layers_(std::move(layers)) {}

  void push_back(LayerPtr<Scalar> l) { layers_.push_back(std::move(l)); }
  std::size_t size() const { return layers_.size(); }
  Layer<Scalar>& at(std::size_t i) { return *layers_.at(i); }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* rng = nullptr) override {
    Tensor<Scalar> h = x;
    for (auto& l : layers_) h = l->forward(h, training, rng);
    return h;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    Tensor<Scalar> g = dy;
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
    return g;
  }
  void visit_parameters(const typename Layer<Scalar>::ParamVisitor& fn) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = std::to_string(i) + "." + layers_[i]->kind() + ".";
      layers_[i]->visit_parameters(
          [&](const std::string& name, Tensor<Scalar>& v, Tensor<Scalar>& g) {
            fn(prefix + name, v, g);
          });
    }
  }
  void visit_buffers(const typename Layer<Scalar>::BufferVisitor& fn) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = std::to_string(i) + "." + layers_[i]->kind() + ".";
      layers_[i]->visit_buffers(
          [&](const std::string& name, Tensor<Scalar>& v) { fn(prefix + name, v); });
    }
  }
  std::string kind() const override { return "sequential"; }

 private:
  std::vector<LayerPtr<Scalar>> layers_;
};

/// y = main(x) + skip(x). An empty skip branch is the identity.
template <typename Scalar>
class ResidualUnit final : public Layer<Scalar> {
 public:
  ResidualUnit(LayerPtr<Scalar> main, LayerPtr<Scalar> skip)
      : main_(std::move(main)), skip_(std::move(skip)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training, Rng* rng = nullptr) override {
    Tensor<Scalar> m = main_->forward(x, training, rng);
    Tensor<Scalar> s = skip_ ? skip_->forward(x, training, rng) : x;
    if (!m.same_shape(s))
      throw ShapeError("residual unit: branch shapes differ, " + shape_str(m.shape()) + " vs " +
                       shape_str(s.shape()));
    return add(m, s);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override {
    Tensor<Scalar> dm = main_->backward(dy);
    Tensor<Scalar> ds = skip_ ? skip_->backward(dy) : dy;
    return add(dm, ds);
  }
  void visit_parameters(const typename Layer<Scalar>::ParamVisitor& fn) override {
    main_->visit_parameters(
        [&](const std::string& n, Tensor<Scalar>& v, Tensor<Scalar>& g) { fn("main." + n, v, g); });
    if (skip_)
      skip_->visit_parameters(
          [&](const std::string& n, Tensor<Scalar>& v, Tensor<Scalar>& g) { fn("skip." + n, v, g); });
  }
  void visit_buffers(const typename Layer<Scalar>::BufferVisitor& fn) override {
    main_->visit_buffers(
        [&](const std::string& n, Tensor<Scalar>& v) { fn("main." + n, v); });
    if (skip_)
      skip_->visit_buffers([&](const std::string& n, Tensor<Scalar>& v) { fn("skip." + n, v); });
  }
  std::string kind() const override { return "residual"; }

  Layer<Scalar>& main() { return *main_; }
  bool has_projection() const { return skip_ != nullptr; }

 private:
  LayerPtr<Scalar> main_;
  LayerPtr<Scalar> skip_;  // null means identity
};

// ---------------------------------------------------------------------------
// Parameter utilities
// ---------------------------------------------------------------------------

template <typename Scalar>
std::size_t parameter_count(Layer<Scalar>& net) {
  std::size_t total = 0;
  net.visit_parameters(
      [&](const std::string&, Tensor<Scalar>& v, Tensor<Scalar>&) { total += v.size(); });
  return total;
}

template <typename Scalar>
void zero_grads(Layer<Scalar>& net) {
  net.visit_parameters(
      [](const std::string&, Tensor<Scalar>&, Tensor<Scalar>& g) { g.as_array() = Scalar(0); });
}

}  // namespace iclab
