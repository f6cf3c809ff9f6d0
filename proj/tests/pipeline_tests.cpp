#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iclab/checkpoint.hpp"
#include "iclab/config.hpp"
#include "iclab/dataset.hpp"
#include "iclab/optim.hpp"
#include "iclab/resnet.hpp"

using namespace iclab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("iclab_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Scalar re-simulation of the bias-corrected first/second moment recurrences.
struct AdamSim {
  double m = 0.0, v = 0.0;
  std::size_t t = 0;
  double step(double w, double g, double lr, double b1 = 0.9, double b2 = 0.999,
              double eps = 1e-8) {
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, double(t)));
    const double vhat = v / (1.0 - std::pow(b2, double(t)));
    return w - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

double& dense_weight(DenseLayer<double>& lay) { return lay.weight()[0]; }

void set_grads(DenseLayer<double>& lay, double gw, double gb) {
  lay.visit_parameters([&](const std::string& name, TensorD&, TensorD& g) {
    g.as_array() = (name == "w") ? gw : gb;
  });
}

}  // namespace

TEST_CASE("adam follows the scalar recurrence oracle and reaches the minimum") {
  Rng rng(3);
  DenseLayer<double> lay(1, 1, rng);
  dense_weight(lay) = 3.5;
  const double b0 = lay.bias()[0];
  Adam<double> opt(1e-2);
  AdamSim sim;
  double w_sim = 3.5;

  for (int t = 0; t < 200; ++t) {
    const double g = 2.0 * (dense_weight(lay) - 3.0);  // d/dw of (w-3)^2
    w_sim = sim.step(w_sim, 2.0 * (w_sim - 3.0), 1e-2);
    set_grads(lay, g, 0.0);
    opt.step(lay);
    CHECK(dense_weight(lay) == doctest::Approx(w_sim).epsilon(1e-12));
  }
  CHECK(std::abs(dense_weight(lay) - 3.0) <= 1e-4);
  // zero bias gradient throughout: bias untouched
  CHECK(lay.bias()[0] == b0);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  Rng rng(4);
  DenseLayer<double> lay(2, 3, rng);
  TensorD w_before = lay.weight();
  Adam<double> opt(0.1);
  for (int t = 0; t < 5; ++t) {
    set_grads(lay, 0.0, 0.0);
    opt.step(lay);
  }
  for (std::size_t i = 0; i < w_before.size(); ++i) CHECK(lay.weight()[i] == w_before[i]);
}

TEST_CASE("adam's step size approaches lr under a constant gradient") {
  Rng rng(5);
  DenseLayer<double> lay(1, 1, rng);
  Adam<double> opt(0.01);
  double prev = dense_weight(lay);
  double last_step = 0.0;
  for (int t = 0; t < 400; ++t) {
    set_grads(lay, 0.7, 0.0);
    opt.step(lay);
    last_step = prev - dense_weight(lay);
    prev = dense_weight(lay);
  }
  CHECK(last_step == doctest::Approx(0.01).epsilon(0.01));
}

TEST_CASE("sgd matches its hand recurrences") {
  Rng rng(6);
  DenseLayer<double> lay(1, 1, rng);
  const double w0 = dense_weight(lay);

  SUBCASE("plain step") {
    Sgd<double> opt(0.1);
    set_grads(lay, 2.0, 0.0);
    opt.step(lay);
    CHECK(dense_weight(lay) == doctest::Approx(w0 - 0.2).epsilon(1e-15));
  }
  SUBCASE("momentum accumulates") {
    Sgd<double> opt(0.1, 0.9);
    double u = 0.0, w = w0;
    for (int t = 0; t < 5; ++t) {
      set_grads(lay, 1.0, 0.0);
      opt.step(lay);
      u = 0.9 * u + 1.0;
      w -= 0.1 * u;
      CHECK(dense_weight(lay) == doctest::Approx(w).epsilon(1e-12));
    }
  }
  SUBCASE("bad momentum rejected") {
    CHECK_THROWS_AS(Sgd<double>(0.1, 1.0), ValueError);
    CHECK_THROWS_AS(Sgd<double>(0.1, -0.1), ValueError);
  }
}

TEST_CASE("optimizer state is keyed to the parameter walk") {
  Rng rng(7);
  DenseLayer<double> a(2, 2, rng), b(3, 2, rng);
  Adam<double> opt(0.01);
  set_grads(a, 0.1, 0.1);
  opt.step(a);
  // same names, different shapes
  CHECK_THROWS_AS(opt.step(b), ShapeError);
}

TEST_CASE("lr schedule applies milestone divisors cumulatively") {
  LrSchedule s{0.001, {{80, 10.0}, {120, 10.0}, {160, 10.0}}};
  s.validate();
  CHECK(s.at(0) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(s.at(79) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(s.at(80) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(s.at(130) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(s.at(160) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(s.at(1000) == doctest::Approx(1e-6).epsilon(1e-12));

  // piecewise-constant and non-increasing across the whole range
  double prev = s.at(0);
  for (std::size_t e = 1; e <= 200; ++e) {
    CHECK(s.at(e) <= prev);
    prev = s.at(e);
  }

  CHECK_THROWS_AS((LrSchedule{0.001, {{10, 0.5}}}.validate()), ValueError);
  CHECK_THROWS_AS((LrSchedule{0.001, {{20, 10.0}, {10, 10.0}}}.validate()), ValueError);
  CHECK_THROWS_AS((LrSchedule{0.0, {}}.validate()), ValueError);
}

TEST_CASE("config text round-trips through parse and serialize") {
  const std::string text =
      "# experiment alpha\n"
      "seed = 11\n"
      "epochs = 30\n"
      "batch_size = 64\n"
      "layout = v2   # the middle variant\n"
      "bottleneck = true\n"
      "n = 2\n"
      "drop_rate = 0.05\n"
      "dropout_mode = theorem\n"
      "optimizer = adam\n"
      "lr = 0.001\n"
      "lr_milestones = 80:10, 120:10, 160:10\n"
      "data_format = synthetic\n"
      "subset_size = 512\n"
      "output_dir = runs/alpha\n";
  RunConfig cfg = parse_config(text);
  CHECK(cfg.seed == 11);
  CHECK(cfg.layout == UnitLayout::kV2);
  CHECK(cfg.bottleneck);
  CHECK(cfg.dropout_mode == DropoutMode::kTheorem);
  REQUIRE(cfg.lr_milestones.size() == 3);
  CHECK(cfg.lr_milestones[1].epoch == 120);
  CHECK(cfg.lr_milestones[1].divisor == 10.0);

  const std::string once = serialize_config(cfg);
  const std::string twice = serialize_config(parse_config(once));
  CHECK(once == twice);
}

TEST_CASE("config parser reports bad input precisely") {
  CHECK_THROWS_WITH_AS(parse_config("seed = 1\nepochs = 2\nwat = 9\n"),
                       doctest::Contains("line 3"), ConfigError);
  CHECK_THROWS_AS(parse_config("layout = v9\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("epochs twelve\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("epochs = twelve\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("bottleneck = maybe\n"), ConfigError);

  RunConfig cfg;
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.data_format = "cifar10-binary";
  cfg.data_path = "/nonexistent/cifar";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.data_format = "parquet";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  // milestone shorthand: bare epoch means divide by 10
  CHECK(parse_config("lr_milestones = 7\n").lr_milestones[0].divisor == 10.0);
}

TEST_CASE("synthetic data is seeded, class-complete, and mean-centered") {
  DataSourceSpec src;
  src.format = DataFormat::kSynthetic;
  src.subset_size = 300;
  src.data_seed = 9;
  src.synthetic_classes = 4;
  src.synthetic_hw = 16;

  DataBundle a = load_data(src);
  DataBundle b = load_data(src);
  CHECK(a.train.size() == 300);
  CHECK(a.test.size() == 150);
  CHECK(a.train.num_classes == 4);
  CHECK(a.train.images.shape() == Shape{300, 3, 16, 16});

  // identical bits for identical seeds
  for (std::size_t i = 0; i < a.train.images.size(); ++i)
    REQUIRE(a.train.images[i] == b.train.images[i]);
  CHECK(a.train.labels == b.train.labels);

  src.data_seed = 10;
  DataBundle c = load_data(src);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.train.images.size() && !any_diff; ++i)
    any_diff = a.train.images[i] != c.train.images[i];
  CHECK(any_diff);

  // per-pixel train mean is zero after subtraction
  TensorF sum({3, 16, 16}, 0.0f);
  const std::size_t per = sum.size();
  for (std::size_t i = 0; i < a.train.size(); ++i)
    for (std::size_t j = 0; j < per; ++j) sum[j] += a.train.images[i * per + j];
  for (std::size_t j = 0; j < per; ++j) CHECK(std::abs(sum[j] / 300.0f) <= 1e-6f);

  for (std::size_t l : a.train.labels) CHECK(l < 4);
}

TEST_CASE("cifar10 binary files parse bit-exactly") {
  fs::path dir = temp_dir("cifar");
  // 9 constant-valued records: record r is filled with byte 20*r, label r
  auto write_batch = [&](const fs::path& p, int first, int count) {
    std::ofstream f(p, std::ios::binary);
    for (int r = first; r < first + count; ++r) {
      f.put(char(r));
      for (int j = 0; j < 3072; ++j) f.put(char(20 * r));
    }
  };

  SUBCASE("single file splits 2:1") {
    write_batch(dir / "one.bin", 0, 9);
    DataSourceSpec src;
    src.format = DataFormat::kCifar10Binary;
    src.path = (dir / "one.bin").string();
    src.data_seed = 3;
    DataBundle d = load_data(src);
    CHECK(d.train.size() == 6);
    CHECK(d.test.size() == 3);
    CHECK(d.train.num_classes == 10);

    // adding the mean back recovers a constant multiple of 20/255
    const std::size_t per = 3 * 32 * 32;
    for (std::size_t i = 0; i < d.test.size(); ++i) {
      const float v0 = d.test.images[i * per] + d.test.per_pixel_mean[0];
      const int r = int(std::lround(v0 * 255.0f / 20.0f));
      CHECK(std::size_t(r) == d.test.labels[i]);
      for (std::size_t j = 0; j < per; ++j)
        CHECK(d.test.images[i * per + j] + d.test.per_pixel_mean[j] ==
              doctest::Approx(20.0f * float(r) / 255.0f).epsilon(1e-6));
    }
  }

  SUBCASE("directory layout with explicit test batch") {
    write_batch(dir / "data_batch_1.bin", 0, 6);
    write_batch(dir / "test_batch.bin", 6, 3);
    DataSourceSpec src;
    src.format = DataFormat::kCifar10Binary;
    src.path = dir.string();
    DataBundle d = load_data(src);
    CHECK(d.train.size() == 6);
    CHECK(d.test.size() == 3);
    CHECK(d.test.labels == std::vector<std::size_t>{6, 7, 8});
  }

  SUBCASE("malformed files carry byte offsets") {
    {
      std::ofstream f(dir / "short.bin", std::ios::binary);
      for (int i = 0; i < 100; ++i) f.put(char(i));
    }
    DataSourceSpec src;
    src.format = DataFormat::kCifar10Binary;
    src.path = (dir / "short.bin").string();
    CHECK_THROWS_AS(load_data(src), FormatError);

    {
      std::ofstream f(dir / "badlabel.bin", std::ios::binary);
      f.put(char(11));
      for (int j = 0; j < 3072; ++j) f.put(char(0));
    }
    src.path = (dir / "badlabel.bin").string();
    try {
      load_data(src);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset == 0);
    }
  }
}

TEST_CASE("idx pairs parse big-endian headers") {
  fs::path dir = temp_dir("idx");
  auto be32 = [](std::ofstream& f, std::uint32_t v) {
    f.put(char(v >> 24)).put(char(v >> 16)).put(char(v >> 8)).put(char(v));
  };
  auto write_pair = [&](const std::string& img_name, const std::string& lab_name, int n) {
    std::ofstream fi(dir / img_name, std::ios::binary);
    be32(fi, 0x803);
    be32(fi, n);
    be32(fi, 8);
    be32(fi, 8);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 64; ++j) fi.put(char(i * 5 + j % 7));
    std::ofstream fl(dir / lab_name, std::ios::binary);
    be32(fl, 0x801);
    be32(fl, n);
    for (int i = 0; i < n; ++i) fl.put(char(i % 3));
  };
  write_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 6);
  write_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 3);

  DataSourceSpec src;
  src.format = DataFormat::kIdx;
  src.path = dir.string();
  DataBundle d = load_data(src);
  CHECK(d.train.size() == 6);
  CHECK(d.train.images.shape() == Shape{6, 1, 8, 8});
  CHECK(d.train.num_classes == 3);
  CHECK(d.train.labels == std::vector<std::size_t>{0, 1, 2, 0, 1, 2});
  // value + mean recovers raw byte / 255
  CHECK(d.train.images[65] + d.train.per_pixel_mean[1] ==
        doctest::Approx((5.0f + 1 % 7) / 255.0f).epsilon(1e-6));

  std::ofstream bad(dir / "train-images-idx3-ubyte", std::ios::binary);
  bad << "nope";
  bad.close();
  CHECK_THROWS_AS(load_data(src), FormatError);
}

TEST_CASE("stratified subsets take exact per-class quotas") {
  detail::RawSet raw;
  const std::size_t n = 100;
  raw.images = TensorF({n, 1, 8, 8});
  for (std::size_t i = 0; i < n; ++i) {
    raw.labels.push_back(i % 4);
    raw.images[i * 64] = float(i);
  }
  Rng rng(17);
  detail::RawSet sub = stratified_subset(raw, 22, 4, rng);
  CHECK(sub.labels.size() == 22);
  std::vector<int> counts(4, 0);
  for (std::size_t l : sub.labels) ++counts[l];
  // 22 = 6 + 6 + 5 + 5
  CHECK(counts == std::vector<int>{6, 6, 5, 5});
  // images follow their labels
  for (std::size_t i = 0; i < sub.labels.size(); ++i)
    CHECK(std::size_t(std::lround(sub.images[i * 64])) % 4 == sub.labels[i]);

  CHECK_THROWS_AS(stratified_subset(raw, 0, 4, rng), ValueError);
  CHECK_THROWS_AS(stratified_subset(raw, 101, 4, rng), ValueError);
}

TEST_CASE("augment equals an independently replayed shift-then-flip") {
  Rng data_rng(23);
  TensorF batch = sample_gaussian(data_rng, {20, 3, 10, 10}).cast<float>();

  Rng a(501), b(501);
  TensorF out = augment(batch, a);

  const std::size_t c = 3, h = 10, w = 10;
  for (std::size_t i = 0; i < 20; ++i) {
    const long dy = b.between(-4, 4);
    const long dx = b.between(-4, 4);
    const bool flip = b.uniform() < 0.5;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (long y = 0; y < long(h); ++y)
        for (long x = 0; x < long(w); ++x) {
          // reference: zero-padded shift, then horizontal mirror
          const long sy = y - dy;
          const long px = flip ? long(w) - 1 - x : x;
          const long sx = px - dx;
          float want = 0.0f;
          if (sy >= 0 && sy < long(h) && sx >= 0 && sx < long(w))
            want = batch.at(i, ch, std::size_t(sy), std::size_t(sx));
          REQUIRE(out.at(i, ch, std::size_t(y), std::size_t(x)) == want);
        }
    }
  }

  // statistics over many draws: flips fair, shifts uniform over 9 values
  TensorF one({1, 1, 8, 8}, 1.0f);
  Rng s(77);
  const int trials = 10000;
  int flips = 0;
  std::vector<int> dys(9, 0);
  Rng replay(77);
  for (int t = 0; t < trials; ++t) {
    (void)augment(one, s);
    const long dy = replay.between(-4, 4);
    (void)replay.between(-4, 4);
    if (replay.uniform() < 0.5) ++flips;
    ++dys[dy + 4];
  }
  const double se_flip = std::sqrt(0.25 / trials);
  CHECK(std::abs(double(flips) / trials - 0.5) <= 3 * se_flip);
  const double p9 = 1.0 / 9.0;
  const double se9 = std::sqrt(p9 * (1 - p9) / trials);
  for (int k = 0; k < 9; ++k)
    CHECK(std::abs(double(dys[k]) / trials - p9) <= 3 * se9);

  CHECK_THROWS_AS(augment(TensorF({2, 3, 4, 4}, 0.0f), s), ShapeError);
}

TEST_CASE("checkpoints restore parameters, buffers, and metadata") {
  NetSpec spec;
  spec.layout = UnitLayout::kV2;
  spec.input_hw = 8;
  spec.num_classes = 4;
  fs::path dir = temp_dir("ckpt");
  const std::string path = (dir / "net.ickp").string();

  Rng r1(100);
  auto net = build_network<float>(spec, r1);
  // move running statistics off their init values
  Rng data(7), drop(8);
  TensorF x = sample_gaussian(data, {4, 3, 8, 8}).cast<float>();
  (void)net->forward(x, true, &drop);
  save_checkpoint(path, *net, {{"note", "trained-ish"}, {"epoch", 3}});

  Rng r2(999);
  auto fresh = build_network<float>(spec, r2);
  TensorF before = fresh->forward(x, false);
  nlohmann::json meta = load_checkpoint(path, *fresh);
  CHECK(meta["note"] == "trained-ish");
  CHECK(meta["epoch"] == 3);

  TensorF want = net->forward(x, false);
  TensorF got = fresh->forward(x, false);
  bool moved = false;
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(got[i] == want[i]);
    moved = moved || before[i] != want[i];
  }
  CHECK(moved);

  SUBCASE("wrong architecture is rejected by name") {
    NetSpec other = spec;
    other.layout = UnitLayout::kBaseline;  // same count, different layer names
    Rng r3(5);
    auto wrong = build_network<float>(other, r3);
    CHECK_THROWS_AS(load_checkpoint(path, *wrong), FormatError);
  }
  SUBCASE("scalar width must match") {
    Rng r3(5);
    auto dnet = build_network<double>(spec, r3);
    CHECK_THROWS_AS(load_checkpoint(path, *dnet), FormatError);
  }
  SUBCASE("truncation is detected with an offset") {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();
    const std::string cut = (dir / "cut.ickp").string();
    std::ofstream(cut, std::ios::binary).write(bytes.data(), long(bytes.size()) / 2);
    Rng r4(6);
    auto victim = build_network<float>(spec, r4);
    CHECK_THROWS_AS(load_checkpoint(cut, *victim), FormatError);
  }
  SUBCASE("bad magic is rejected") {
    const std::string badp = (dir / "bad.ickp").string();
    std::ofstream(badp, std::ios::binary) << "NOPE12345678";
    Rng r5(6);
    auto victim = build_network<float>(spec, r5);
    CHECK_THROWS_AS(load_checkpoint(badp, *victim), FormatError);
  }
}

TEST_CASE("buffer walk exposes running statistics for every normalizer") {
  NetSpec spec;
  spec.layout = UnitLayout::kV1;
  spec.input_hw = 8;
  Rng rng(1);
  auto net = build_network<float>(spec, rng);
  std::size_t buffers = 0, gammas = 0;
  net->visit_buffers([&](const std::string& name, TensorF&) {
    ++buffers;
    CHECK((name.find("running_mean") != std::string::npos ||
           name.find("running_var") != std::string::npos));
  });
  net->visit_parameters([&](const std::string& name, TensorF&, TensorF&) {
    if (name.find("gamma") != std::string::npos) ++gammas;
  });
  CHECK(buffers == 2 * gammas);
}
