#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "iclab/checkpoint.hpp"
#include "iclab/config.hpp"
#include "iclab/dataset.hpp"
#include "iclab/optim.hpp"
#include "iclab/resnet.hpp"

namespace iclab {

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
  std::int64_t wall_ms = 0;
};

/// Mean over all sliding windows of the population standard deviation of
/// test accuracy. Lower is a steadier curve.
inline double stability_metric(const std::vector<EpochRecord>& records, std::size_t window) {
  if (window < 1) throw ValueError("stability_metric: window must be >= 1");
  if (records.size() < window)
    throw ValueError("stability_metric: " + std::to_string(records.size()) +
                     " records for window " + std::to_string(window));
  double total = 0.0;
  const std::size_t n_windows = records.size() - window + 1;
  for (std::size_t w = 0; w < n_windows; ++w) {
    double mean = 0.0;
    for (std::size_t i = 0; i < window; ++i) mean += records[w + i].test_acc;
    mean /= double(window);
    double var = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
      const double d = records[w + i].test_acc - mean;
      var += d * d;
    }
    total += std::sqrt(var / double(window));
  }
  return total / double(n_windows);
}

/// Mean loss and accuracy over a dataset in inference mode.
template <typename Scalar>
std::pair<double, double> evaluate(Layer<Scalar>& net, const Dataset& data,
                                   std::size_t batch_size) {
  const Shape& s = data.images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(data.size(), lo + batch_size);
    Tensor<Scalar> x({hi - lo, s[1], s[2], s[3]});
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < per; ++j)
        x[(i - lo) * per + j] = Scalar(data.images[i * per + j]);
    std::vector<std::size_t> labels(data.labels.begin() + long(lo), data.labels.begin() + long(hi));
    Tensor<Scalar> logits = net.forward(x, false);
    auto [loss, dl] = softmax_cross_entropy(logits, labels);
    (void)dl;
    loss_sum += double(loss) * double(hi - lo);
    auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (pred[i] == labels[i]) ++correct;
  }
  return {loss_sum / double(data.size()), double(correct) / double(data.size())};
}

struct TrainResult {
  std::vector<EpochRecord> records;
  double initial_train_loss = 0.0;
  std::string output_dir;
  std::string metrics_path;
  std::string report_path;
  std::string checkpoint_path;
};

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string resolve_output_dir(const std::string& configured) {
  if (const char* env = std::getenv("IC_LAB_OUT"); env && *env) return env;
  return configured;
}

template <typename Scalar>
nlohmann::json norm_dump(Layer<Scalar>& net) {
  nlohmann::json out = nlohmann::json::array();
  net.visit_parameters([&](const std::string& name, Tensor<Scalar>& v, Tensor<Scalar>& g) {
    out.push_back({{"name", name},
                   {"value_l2", std::sqrt(double(v.as_array().square().sum()))},
                   {"grad_l2", std::sqrt(double(g.as_array().square().sum()))}});
  });
  return out;
}

}  // namespace detail

/// Runs the full training loop described by the config: seeded shuffle,
/// augmentation, training-mode forward, softmax cross-entropy, backward,
/// optimizer step, learning-rate milestones, per-epoch test evaluation.
/// Persists metrics.csv, report.json, and a checkpoint into the output
/// directory (IC_LAB_OUT overrides the configured one). A non-finite loss
/// aborts with a diagnostic dump naming epoch, batch, and layer norms.
inline TrainResult train_run(const RunConfig& cfg,
                             const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  namespace fs = std::filesystem;
  using clock = std::chrono::steady_clock;
  cfg.validate();

  TrainResult result;
  result.output_dir = detail::resolve_output_dir(cfg.output_dir);
  fs::create_directories(result.output_dir);

  DataBundle data = load_data(cfg.data_source());
  if (data.train.num_classes != cfg.num_classes)
    throw ConfigError("dataset has " + std::to_string(data.train.num_classes) +
                      " classes, config says " + std::to_string(cfg.num_classes));
  const Shape& ishape = data.train.images.shape();
  if (ishape[1] != cfg.in_channels || ishape[2] != cfg.input_hw || ishape[3] != cfg.input_hw)
    throw ConfigError("dataset images are " + std::to_string(ishape[1]) + "x" +
                      std::to_string(ishape[2]) + "x" + std::to_string(ishape[3]) +
                      ", config wants " + std::to_string(cfg.in_channels) + "x" +
                      std::to_string(cfg.input_hw) + "x" + std::to_string(cfg.input_hw));

  Rng master(cfg.seed);
  Rng init_rng = master.child(0);
  Rng shuffle_rng = master.child(1);
  Rng augment_rng = master.child(2);
  Rng dropout_rng = master.child(3);

  auto net = build_network<float>(cfg.net_spec(), init_rng);

  std::unique_ptr<Optimizer<float>> opt;
  if (cfg.optimizer == "adam")
    opt = std::make_unique<Adam<float>>(cfg.lr);
  else
    opt = std::make_unique<Sgd<float>>(cfg.lr, cfg.momentum);
  const LrSchedule schedule = cfg.lr_schedule();

  result.initial_train_loss = evaluate(*net, data.train, cfg.batch_size).first;

  const std::size_t per = ishape[1] * ishape[2] * ishape[3];
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = clock::now();
    opt->set_lr(schedule.at(epoch));

    for (std::size_t i = 0; i + 1 < order.size(); ++i)
      std::swap(order[i], order[i + shuffle_rng.below(order.size() - i)]);

    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, batch_index = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size, ++batch_index) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      if (hi - lo < 2) continue;  // batch statistics need two samples

      TensorF x({hi - lo, ishape[1], ishape[2], ishape[3]});
      std::vector<std::size_t> labels(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        const float* src = data.train.images.data() + order[i] * per;
        std::copy(src, src + per, x.data() + (i - lo) * per);
        labels[i - lo] = data.train.labels[order[i]];
      }
      if (cfg.augment_data) x = augment(x, augment_rng);

      zero_grads(*net);
      TensorF logits = net->forward(x, true, &dropout_rng);
      auto [loss, dlogits] = softmax_cross_entropy(logits, labels);

      if (!std::isfinite(double(loss))) {
        nlohmann::json dump = {{"epoch", epoch},
                               {"batch", batch_index},
                               {"loss", "non-finite"},
                               {"lr", opt->lr()},
                               {"layer_norms", detail::norm_dump(*net)}};
        const std::string dump_path = (fs::path(result.output_dir) / "nan_dump.json").string();
        std::ofstream(dump_path) << dump.dump(2) << "\n";
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index) + "; diagnostics in " + dump_path);
      }

      net->backward(dlogits);
      opt->step(*net);

      loss_sum += double(loss) * double(hi - lo);
      auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (pred[i] == labels[i]) ++correct;
      seen += hi - lo;
    }

    auto [test_loss, test_acc] = evaluate(*net, data.test, cfg.batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = seen ? loss_sum / double(seen) : 0.0;
    rec.train_acc = seen ? double(correct) / double(seen) : 0.0;
    rec.test_loss = test_loss;
    rec.test_acc = test_acc;
    rec.wall_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(clock::now() - t0).count();
    result.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  // metrics.csv: fixed column order, one row per epoch
  result.metrics_path = (fs::path(result.output_dir) / "metrics.csv").string();
  {
    std::ofstream f(result.metrics_path);
    f << "epoch,train_loss,train_acc,test_loss,test_acc,wall_ms\n";
    for (const auto& r : result.records)
      f << r.epoch << "," << detail::fmt_real(r.train_loss) << "," << detail::fmt_real(r.train_acc)
        << "," << detail::fmt_real(r.test_loss) << "," << detail::fmt_real(r.test_acc) << ","
        << r.wall_ms << "\n";
  }

  result.checkpoint_path = (fs::path(result.output_dir) / "checkpoint.ickp").string();
  nlohmann::json meta = {{"config", serialize_config(cfg)},
                         {"epochs_trained", result.records.size()}};
  save_checkpoint(result.checkpoint_path, *net, meta);

  result.report_path = (fs::path(result.output_dir) / "report.json").string();
  {
    const EpochRecord& last = result.records.back();
    double best = 0.0;
    std::int64_t total_ms = 0;
    for (const auto& r : result.records) {
      best = std::max(best, r.test_acc);
      total_ms += r.wall_ms;
    }
    nlohmann::json report = {
        {"config", serialize_config(cfg)},
        {"epochs", result.records.size()},
        {"initial_train_loss", result.initial_train_loss},
        {"final",
         {{"epoch", last.epoch},
          {"train_loss", last.train_loss},
          {"train_acc", last.train_acc},
          {"test_loss", last.test_loss},
          {"test_acc", last.test_acc}}},
        {"best_test_acc", best},
        {"total_wall_ms", total_ms},
        {"checkpoint", "checkpoint.ickp"},
        {"metrics", "metrics.csv"}};
    if (result.records.size() >= 5)
      report["stability_window5"] = stability_metric(result.records, 5);
    std::ofstream(result.report_path) << report.dump(2) << "\n";
  }
  return result;
}

}  // namespace iclab
