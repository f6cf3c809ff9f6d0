#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "iclab/trainer.hpp"

using namespace iclab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("iclab_train_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig blob_config(const std::string& outdir) {
  RunConfig cfg;
  cfg.seed = 1;
  cfg.epochs = 15;
  cfg.batch_size = 32;
  cfg.layout = UnitLayout::kV1;
  cfg.n = 1;
  cfg.num_classes = 3;
  cfg.input_hw = 16;
  cfg.drop_rate = 0.05;
  cfg.optimizer = "adam";
  cfg.lr = 0.002;
  cfg.data_format = "synthetic";
  cfg.subset_size = 240;
  cfg.augment_data = false;
  cfg.output_dir = outdir;
  return cfg;
}

std::string strip_wall_column(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream out;
  std::string line;
  while (std::getline(f, line)) {
    const auto cut = line.rfind(',');
    out << line.substr(0, cut) << "\n";
  }
  return out.str();
}

std::vector<char> file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("stability metric: windowed standard deviation of test accuracy") {
  auto recs = [](std::vector<double> accs) {
    std::vector<EpochRecord> out;
    for (std::size_t i = 0; i < accs.size(); ++i) {
      EpochRecord r;
      r.epoch = i;
      r.test_acc = accs[i];
      out.push_back(r);
    }
    return out;
  };

  CHECK(stability_metric(recs({0.7, 0.7, 0.7, 0.7}), 3) == doctest::Approx(0.0));
  // alternating +-0.1 around 0.5: every width-2 window has std 0.1
  CHECK(stability_metric(recs({0.4, 0.6, 0.4, 0.6, 0.4}), 2) == doctest::Approx(0.1));
  CHECK_THROWS_AS(stability_metric(recs({0.5}), 2), ValueError);
  CHECK_THROWS_AS(stability_metric(recs({0.5, 0.5}), 0), ValueError);
}

TEST_CASE("synthetic blobs are separable and the network learns them") {
  const fs::path dir = temp_dir("blobs");
  RunConfig cfg = blob_config(dir.string());

  // independent oracle: multinomial logistic regression on raw pixels gets
  // high accuracy, so the target is honestly reachable
  DataBundle data = load_data(cfg.data_source());
  {
    const Shape& s = data.train.images.shape();
    const std::size_t dim = s[1] * s[2] * s[3];
    TensorD flat({data.train.size(), dim});
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = double(data.train.images[i]);
    Rng rng(2);
    DenseLayer<double> logreg(dim, cfg.num_classes, rng);
    Sgd<double> opt(0.5);
    for (int step = 0; step < 300; ++step) {
      zero_grads(logreg);
      TensorD logits = logreg.forward(flat, true);
      auto [loss, dlogits] = softmax_cross_entropy(logits, data.train.labels);
      (void)loss;
      logreg.backward(dlogits);
      opt.step(logreg);
    }
    TensorD logits = logreg.forward(flat, false);
    auto pred = argmax_rows(logits);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == data.train.labels[i]) ++correct;
    CHECK(double(correct) / double(pred.size()) >= 0.95);
  }

  TrainResult res = train_run(cfg);
  REQUIRE(res.records.size() == 15);
  CHECK(res.records.back().train_acc >= 0.95);
  CHECK(res.records.back().train_loss < res.initial_train_loss);
  for (const auto& r : res.records) {
    CHECK(r.train_acc >= 0.0);
    CHECK(r.train_acc <= 1.0);
    CHECK(r.test_acc >= 0.0);
    CHECK(r.test_acc <= 1.0);
  }

  // persisted artifacts
  REQUIRE(fs::exists(res.metrics_path));
  REQUIRE(fs::exists(res.report_path));
  REQUIRE(fs::exists(res.checkpoint_path));
  {
    std::ifstream f(res.metrics_path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "epoch,train_loss,train_acc,test_loss,test_acc,wall_ms");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(f, line)) {
      CHECK(line.substr(0, line.find(',')) == std::to_string(rows));
      ++rows;
    }
    CHECK(rows == 15);
  }
  {
    nlohmann::json report;
    std::ifstream(res.report_path) >> report;
    CHECK(report["epochs"] == 15);
    CHECK(report["final"]["test_acc"] == doctest::Approx(res.records.back().test_acc));
    CHECK(report.contains("stability_window5"));
    CHECK(double(report["initial_train_loss"]) > double(report["final"]["train_loss"]));
  }

  // the checkpoint reproduces the trained network's evaluation
  {
    Rng rng(123);
    auto net = build_network<float>(cfg.net_spec(), rng);
    load_checkpoint(res.checkpoint_path, *net);
    auto [loss, acc] = evaluate(*net, data.test, cfg.batch_size);
    CHECK(loss == doctest::Approx(res.records.back().test_loss).epsilon(1e-9));
    CHECK(acc == doctest::Approx(res.records.back().test_acc).epsilon(1e-9));
  }
}

TEST_CASE("equal seeds give identical metrics and checkpoints") {
  const fs::path d1 = temp_dir("det1");
  RunConfig cfg = blob_config(d1.string());
  cfg.epochs = 3;
  cfg.subset_size = 120;
  cfg.augment_data = true;
  TrainResult a = train_run(cfg);
  std::vector<EpochRecord> first = a.records;
  const std::string metrics_a = strip_wall_column(a.metrics_path);
  const std::vector<char> ckpt_a = file_bytes(a.checkpoint_path);

  // identical config into the same directory: every byte must reproduce
  TrainResult b = train_run(cfg);
  REQUIRE(first.size() == b.records.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    CHECK(first[i].train_loss == b.records[i].train_loss);
    CHECK(first[i].train_acc == b.records[i].train_acc);
    CHECK(first[i].test_loss == b.records[i].test_loss);
    CHECK(first[i].test_acc == b.records[i].test_acc);
  }
  CHECK(metrics_a == strip_wall_column(b.metrics_path));
  CHECK(ckpt_a == file_bytes(b.checkpoint_path));

  // different seed, different trajectory
  cfg.seed = 2;
  cfg.output_dir = (temp_dir("det2")).string();
  TrainResult c = train_run(cfg);
  bool differs = false;
  for (std::size_t i = 0; i < first.size() && !differs; ++i)
    differs = first[i].train_loss != c.records[i].train_loss;
  CHECK(differs);
}

TEST_CASE("loss drops within the first epoch for every layout") {
  for (UnitLayout layout :
       {UnitLayout::kBaseline, UnitLayout::kV1, UnitLayout::kV2, UnitLayout::kV3}) {
    CAPTURE(layout_name(layout));
    const fs::path dir = temp_dir(std::string("first_") + layout_name(layout));
    RunConfig cfg = blob_config(dir.string());
    cfg.layout = layout;
    cfg.epochs = 1;
    cfg.subset_size = 160;
    cfg.dropout_mode = layout == UnitLayout::kV3 ? DropoutMode::kTheorem : DropoutMode::kInverted;
    TrainResult res = train_run(cfg);
    REQUIRE(res.records.size() == 1);
    CHECK(res.records[0].train_loss < res.initial_train_loss);
  }
}

TEST_CASE("IC_LAB_OUT overrides the configured output directory") {
  const fs::path configured = temp_dir("cfgdir");
  const fs::path forced = temp_dir("envdir");
  RunConfig cfg = blob_config((configured / "sub").string());
  cfg.epochs = 1;
  cfg.subset_size = 64;

  setenv("IC_LAB_OUT", forced.c_str(), 1);
  TrainResult res = train_run(cfg);
  unsetenv("IC_LAB_OUT");

  CHECK(res.output_dir == forced.string());
  CHECK(fs::exists(forced / "metrics.csv"));
  CHECK(!fs::exists(configured / "sub" / "metrics.csv"));
}

TEST_CASE("non-finite loss aborts with a diagnostic dump") {
  const fs::path dir = temp_dir("nan");
  RunConfig cfg = blob_config(dir.string());
  cfg.layout = UnitLayout::kBaseline;
  cfg.epochs = 1;
  cfg.subset_size = 96;
  cfg.optimizer = "sgd";
  cfg.lr = 1e38;

  CHECK_THROWS_AS(train_run(cfg), DivergenceError);
  REQUIRE(fs::exists(dir / "nan_dump.json"));
  nlohmann::json dump;
  std::ifstream(dir / "nan_dump.json") >> dump;
  CHECK(dump.contains("epoch"));
  CHECK(dump.contains("batch"));
  CHECK(dump["layer_norms"].is_array());
  CHECK(dump["layer_norms"].size() > 0);
}

TEST_CASE("config and dataset must agree") {
  const fs::path dir = temp_dir("mismatch");
  // 8x8 single-channel idx data vs a config demanding 32x32 RGB
  auto be32 = [](std::ofstream& f, std::uint32_t v) {
    f.put(char(v >> 24)).put(char(v >> 16)).put(char(v >> 8)).put(char(v));
  };
  {
    std::ofstream fi(dir / "train-images-idx3-ubyte", std::ios::binary);
    be32(fi, 0x803);
    be32(fi, 4);
    be32(fi, 8);
    be32(fi, 8);
    for (int i = 0; i < 4 * 64; ++i) fi.put(char(i));
    std::ofstream fl(dir / "train-labels-idx1-ubyte", std::ios::binary);
    be32(fl, 0x801);
    be32(fl, 4);
    for (int i = 0; i < 4; ++i) fl.put(char(i % 2));
    std::ofstream ti(dir / "t10k-images-idx3-ubyte", std::ios::binary);
    be32(ti, 0x803);
    be32(ti, 2);
    be32(ti, 8);
    be32(ti, 8);
    for (int i = 0; i < 2 * 64; ++i) ti.put(char(i));
    std::ofstream tl(dir / "t10k-labels-idx1-ubyte", std::ios::binary);
    be32(tl, 0x801);
    be32(tl, 2);
    for (int i = 0; i < 2; ++i) tl.put(char(i));
  }
  RunConfig cfg = blob_config((dir / "out").string());
  cfg.data_format = "idx";
  cfg.data_path = dir.string();
  cfg.subset_size = 0;
  cfg.num_classes = 2;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_run(cfg), ConfigError);  // 1x8x8 images vs 3x16x16 config
}
