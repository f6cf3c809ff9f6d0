#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "iclab/gradcheck.hpp"
#include "iclab/resnet.hpp"

using namespace iclab;

namespace {

NetSpec make_spec(UnitLayout layout, std::size_t n, bool bottleneck,
                  std::size_t classes = 10) {
  NetSpec s;
  s.n = n;
  s.layout = layout;
  s.bottleneck = bottleneck;
  s.num_classes = classes;
  return s;
}

std::size_t count_params(const NetSpec& spec, std::uint64_t seed = 1) {
  Rng rng(seed);
  auto net = build_network<float>(spec, rng);
  return parameter_count(*net);
}

bool has_shape(const std::vector<LayerShape>& shapes, const Shape& want) {
  return std::any_of(shapes.begin(), shapes.end(),
                     [&](const LayerShape& s) { return s.shape == want; });
}

void zero_conv_kernels(Layer<double>& layer) {
  layer.visit_parameters([](const std::string& name, TensorD& v, TensorD&) {
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".k") == 0)
      v.as_array() = 0.0;
  });
}

}  // namespace

TEST_CASE("smallest plain baseline matches the hand-computed parameter sum") {
  // stem conv + stem norm
  const std::size_t stem = 3 * 3 * 3 * 16 + 2 * 16;
  // stage 1 unit: two 3x3 convs at width 16, a norm pair after each
  const std::size_t stage1 = (3 * 3 * 16 * 16 + 2 * 16) * 2;
  // stage 2 unit subsamples 16->32 and needs a 1x1 projection
  const std::size_t stage2 =
      3 * 3 * 16 * 32 + 2 * 32 + 3 * 3 * 32 * 32 + 2 * 32 + 1 * 1 * 16 * 32;
  // stage 3 unit subsamples 32->64
  const std::size_t stage3 =
      3 * 3 * 32 * 64 + 2 * 64 + 3 * 3 * 64 * 64 + 2 * 64 + 1 * 1 * 32 * 64;
  // head: 64 -> 10 dense with bias
  const std::size_t head = 64 * 10 + 10;
  const std::size_t expected = stem + stage1 + stage2 + stage3 + head;
  CHECK(expected == 77850);

  CHECK(count_params(make_spec(UnitLayout::kBaseline, 1, false)) == expected);
}

TEST_CASE("every layout has exactly the baseline's parameter count") {
  for (bool bottleneck : {false, true}) {
    for (std::size_t n : {std::size_t(1), std::size_t(2), std::size_t(3)}) {
      CAPTURE(bottleneck);
      CAPTURE(n);
      const std::size_t base = count_params(make_spec(UnitLayout::kBaseline, n, bottleneck));
      CHECK(count_params(make_spec(UnitLayout::kV1, n, bottleneck)) == base);
      CHECK(count_params(make_spec(UnitLayout::kV2, n, bottleneck)) == base);
      CHECK(count_params(make_spec(UnitLayout::kV3, n, bottleneck)) == base);
    }
    CHECK(count_params(make_spec(UnitLayout::kBaseline, 1, bottleneck)) <
          count_params(make_spec(UnitLayout::kBaseline, 2, bottleneck)));
  }
}

TEST_CASE("weighted-layer depth follows the 6n+2 and 9n+2 conventions") {
  for (UnitLayout layout :
       {UnitLayout::kBaseline, UnitLayout::kV1, UnitLayout::kV2, UnitLayout::kV3}) {
    for (bool bottleneck : {false, true}) {
      for (std::size_t n : {std::size_t(1), std::size_t(2), std::size_t(3)}) {
        const NetSpec spec = make_spec(layout, n, bottleneck);
        CAPTURE(layout_name(layout));
        CAPTURE(bottleneck);
        CAPTURE(n);
        CHECK(spec.weighted_layers() == (bottleneck ? 9 * n + 2 : 6 * n + 2));
        Rng rng(3);
        auto net = build_network<float>(spec, rng);
        CHECK(weighted_layer_count(*net) == spec.weighted_layers());
      }
    }
  }
  CHECK(make_spec(UnitLayout::kV1, 2, false).weighted_layers() == 14);
}

TEST_CASE("stage outputs have the documented shapes") {
  SUBCASE("plain") {
    auto shapes = forward_shapes(make_spec(UnitLayout::kBaseline, 2, false), 3);
    CHECK(has_shape(shapes, {3, 16, 32, 32}));
    CHECK(has_shape(shapes, {3, 32, 16, 16}));
    CHECK(has_shape(shapes, {3, 64, 8, 8}));
    CHECK(has_shape(shapes, {3, 64}));
    CHECK(shapes.back().shape == Shape{3, 10});
  }
  SUBCASE("bottleneck widths are 4x") {
    auto shapes = forward_shapes(make_spec(UnitLayout::kV2, 1, true, 7), 2);
    CHECK(has_shape(shapes, {2, 64, 32, 32}));
    CHECK(has_shape(shapes, {2, 128, 16, 16}));
    CHECK(has_shape(shapes, {2, 256, 8, 8}));
    CHECK(has_shape(shapes, {2, 256}));
    CHECK(shapes.back().shape == Shape{2, 7});
  }
}

TEST_CASE("zeroing branch weights turns a non-subsampling unit into the identity") {
  for (UnitLayout layout :
       {UnitLayout::kBaseline, UnitLayout::kV1, UnitLayout::kV2, UnitLayout::kV3}) {
    CAPTURE(layout_name(layout));
    NetSpec spec = make_spec(layout, 1, false);
    Rng rng(11);
    detail::NetBuilder<double> builder(spec, rng);

    auto unit = builder.unit(16, 16, 1);
    zero_conv_kernels(*unit);
    Rng data(5);
    TensorD x = sample_gaussian(data, {2, 16, 6, 6});
    TensorD y = unit->forward(x, false);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);

    auto sub = builder.unit(16, 32, 2);
    TensorD ys = sub->forward(x, false);
    CHECK(ys.shape() == Shape{2, 32, 3, 3});
  }
}

TEST_CASE("full-network gradients match finite differences") {
  Rng data(21);
  TensorD x = sample_gaussian(data, {4, 3, 8, 8});
  const std::vector<std::size_t> labels = {0, 1, 2, 3};

  auto check = [&](UnitLayout layout, DropoutMode mode, double drop_rate) {
    NetSpec spec = make_spec(layout, 1, false, 5);
    spec.input_hw = 8;
    spec.drop_rate = drop_rate;
    spec.dropout_mode = mode;
    Rng rng(9);
    auto net = build_network<double>(spec, rng);
    auto rep = gradcheck_network(*net, x, labels, 1700, 1e-5, 100);
    CAPTURE(layout_name(layout));
    CHECK(rep.coords_checked == 100);
    CHECK(rep.max_rel_err < 1e-3);
  };

  check(UnitLayout::kBaseline, DropoutMode::kInverted, 0.0);
  check(UnitLayout::kV2, DropoutMode::kInverted, 0.1);
  check(UnitLayout::kV3, DropoutMode::kTheorem, 0.1);
}

TEST_CASE("invalid specs are rejected") {
  auto bad = [](auto mutate) {
    NetSpec s = make_spec(UnitLayout::kV1, 1, false);
    mutate(s);
    Rng rng(1);
    CHECK_THROWS_AS(build_network<float>(s, rng), SpecError);
  };
  bad([](NetSpec& s) { s.n = 0; });
  bad([](NetSpec& s) { s.num_classes = 1; });
  bad([](NetSpec& s) { s.in_channels = 0; });
  bad([](NetSpec& s) { s.input_hw = 10; });
  bad([](NetSpec& s) { s.input_hw = 4; });
  bad([](NetSpec& s) { s.drop_rate = 1.0; });
  bad([](NetSpec& s) { s.drop_rate = -0.1; });
}

TEST_CASE("inference is deterministic and ignores dropout") {
  NetSpec spec = make_spec(UnitLayout::kV2, 1, false);
  spec.input_hw = 8;
  Rng data(2);
  TensorF x = sample_gaussian(data, {2, 3, 8, 8}).cast<float>();

  Rng r1(42), r2(42);
  auto a = build_network<float>(spec, r1);
  auto b = build_network<float>(spec, r2);
  TensorF ya = a->forward(x, false);
  TensorF yb = b->forward(x, false);
  TensorF ya2 = a->forward(x, false);
  REQUIRE(ya.shape() == yb.shape());
  for (std::size_t i = 0; i < ya.size(); ++i) {
    CHECK(ya[i] == yb[i]);
    CHECK(ya[i] == ya2[i]);
  }
}
