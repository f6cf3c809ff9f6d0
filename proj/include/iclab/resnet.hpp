#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "iclab/layers.hpp"
#include "iclab/rng.hpp"
#include "iclab/tensor.hpp"

namespace iclab {

// ---------------------------------------------------------------------------
// Residual families: a classical baseline plus three unit layouts that move
// the normalize-then-gate composite around the weight layer.
// ---------------------------------------------------------------------------

/// baseline: Conv-BN-ReLU (post-activation classical unit, ReLU after the add)
/// v1: ReLU-IC-Conv   v2: IC-Conv-ReLU   v3: Conv-ReLU-IC
enum class UnitLayout { kBaseline, kV1, kV2, kV3 };

inline const char* layout_name(UnitLayout l) {
  switch (l) {
    case UnitLayout::kBaseline: return "baseline";
    case UnitLayout::kV1: return "v1";
    case UnitLayout::kV2: return "v2";
    case UnitLayout::kV3: return "v3";
  }
  return "?";
}

struct NetSpec {
  std::size_t n = 1;  // units per stage
  UnitLayout layout = UnitLayout::kBaseline;
  bool bottleneck = false;
  std::size_t num_classes = 10;
  std::size_t in_channels = 3;
  std::size_t input_hw = 32;  // square inputs
  double drop_rate = 0.05;    // gate probability is 1 - drop_rate
  DropoutMode dropout_mode = DropoutMode::kInverted;

  /// Stem and head count as weighted layers; projection shortcuts do not.
  std::size_t weighted_layers() const { return (bottleneck ? 9 : 6) * n + 2; }

  void validate() const {
    if (n < 1) throw SpecError("NetSpec: n must be >= 1");
    if (num_classes < 2) throw SpecError("NetSpec: num_classes must be >= 2");
    if (in_channels < 1) throw SpecError("NetSpec: in_channels must be >= 1");
    if (input_hw < 8 || input_hw % 4 != 0)
      throw SpecError("NetSpec: input_hw must be a multiple of 4, at least 8");
    if (!(drop_rate >= 0.0 && drop_rate < 1.0))
      throw SpecError("NetSpec: drop_rate must be in [0, 1)");
  }
};

namespace detail {

// The four layouts place their normalization at different widths; the stem
// and trailing-extra conventions below keep total parameter counts identical
// across all of them (the post-conv layouts pick up what the pre-conv
// layouts carry in their trailing extras).
template <typename Scalar>
struct NetBuilder {
  const NetSpec& spec;
  Rng& rng;
  DropoutSpec drop;

  NetBuilder(const NetSpec& s, Rng& r)
      : spec(s), rng(r), drop{1.0 - s.drop_rate, s.dropout_mode} {}

  LayerPtr<Scalar> conv(std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t stride) {
    return std::make_unique<Conv2DLayer<Scalar>>(in_c, out_c, k, stride, Pad::kSame, rng);
  }
  LayerPtr<Scalar> bn(std::size_t c) { return std::make_unique<BatchNormLayer<Scalar>>(c); }
  LayerPtr<Scalar> ic(std::size_t c) { return std::make_unique<ICLayer<Scalar>>(c, drop); }
  LayerPtr<Scalar> relu() { return std::make_unique<ReLULayer<Scalar>>(); }

  // One weight layer with the layout's companions. `last` marks the final
  // triple of a baseline unit, whose ReLU moves past the addition.
  void emit_triple(Sequential<Scalar>& seq, std::size_t in_c, std::size_t out_c, std::size_t k,
                   std::size_t stride, bool last) {
    switch (spec.layout) {
      case UnitLayout::kBaseline:
        seq.push_back(conv(in_c, out_c, k, stride));
        seq.push_back(bn(out_c));
        if (!last) seq.push_back(relu());
        break;
      case UnitLayout::kV1:
        seq.push_back(relu());
        seq.push_back(ic(in_c));
        seq.push_back(conv(in_c, out_c, k, stride));
        break;
      case UnitLayout::kV2:
        seq.push_back(ic(in_c));
        seq.push_back(conv(in_c, out_c, k, stride));
        seq.push_back(relu());
        break;
      case UnitLayout::kV3:
        seq.push_back(conv(in_c, out_c, k, stride));
        seq.push_back(relu());
        seq.push_back(ic(out_c));
        break;
    }
  }

  // Residual unit: plain = two 3x3 triples, bottleneck = 1x1 / strided 3x3 /
  // 1x1 triples with 4x output width. Projection shortcut (bare 1x1 conv)
  // only where shape changes.
  LayerPtr<Scalar> unit(std::size_t in_c, std::size_t width, std::size_t stride) {
    auto main = std::make_unique<Sequential<Scalar>>();
    std::size_t out_c;
    if (spec.bottleneck) {
      out_c = 4 * width;
      emit_triple(*main, in_c, width, 1, 1, false);
      emit_triple(*main, width, width, 3, stride, false);
      emit_triple(*main, width, out_c, 1, 1, true);
    } else {
      out_c = width;
      emit_triple(*main, in_c, width, 3, stride, false);
      emit_triple(*main, width, width, 3, 1, true);
    }
    LayerPtr<Scalar> skip;
    if (in_c != out_c || stride != 1) {
      auto s = std::make_unique<Sequential<Scalar>>();
      s->push_back(conv(in_c, out_c, 1, stride));
      skip = std::move(s);
    }
    return std::make_unique<ResidualUnit<Scalar>>(std::move(main), std::move(skip));
  }

  LayerPtr<Scalar> build() {
    spec.validate();
    auto net = std::make_unique<Sequential<Scalar>>();

    // stem: the baseline normalizes before its activation, v3 after (its own
    // triple order), v1/v2 leave normalization to the first unit
    net->push_back(conv(spec.in_channels, 16, 3, 1));
    if (spec.layout == UnitLayout::kBaseline) {
      net->push_back(bn(16));
      net->push_back(relu());
    } else if (spec.layout == UnitLayout::kV3) {
      net->push_back(relu());
      net->push_back(ic(16));
    }

    const std::size_t widths[3] = {16, 32, 64};
    std::size_t in_c = 16;
    for (int stage = 0; stage < 3; ++stage) {
      for (std::size_t u = 0; u < spec.n; ++u) {
        const std::size_t stride = (stage > 0 && u == 0) ? 2 : 1;
        net->push_back(unit(in_c, widths[stage], stride));
        if (spec.layout == UnitLayout::kBaseline) net->push_back(relu());
        in_c = spec.bottleneck ? 4 * widths[stage] : widths[stage];
      }
    }

    // extras after the very last addition; together with the stem choice these
    // equalize parameter counts across layouts
    if (spec.layout == UnitLayout::kV1) {
      net->push_back(relu());
      net->push_back(ic(in_c));
    } else if (spec.layout == UnitLayout::kV2) {
      net->push_back(ic(in_c));
    }

    net->push_back(std::make_unique<GlobalAvgPoolLayer<Scalar>>());
    net->push_back(std::make_unique<DenseLayer<Scalar>>(in_c, spec.num_classes, rng));
    return net;
  }
};

}  // namespace detail

/// Builds the full classifier: stem conv, three stages of n residual units at
/// widths {16,32,64} (4x for bottleneck) with stride-2 subsampling at stage
/// boundaries, trailing extras per layout, global average pooling, and a
/// fully-connected head. Softmax lives in the loss, not the network.
template <typename Scalar>
LayerPtr<Scalar> build_network(const NetSpec& spec, Rng& rng) {
  return detail::NetBuilder<Scalar>(spec, rng).build();
}

/// Counts weight layers by their parameter tensors: conv kernels outside skip
/// branches plus dense weights. Matches the 6n+2 / 9n+2 depth convention
/// (stem and head in, projections out).
template <typename Scalar>
std::size_t weighted_layer_count(Layer<Scalar>& net) {
  std::size_t count = 0;
  net.visit_parameters([&](const std::string& name, Tensor<Scalar>&, Tensor<Scalar>&) {
    const bool is_kernel = name.size() > 2 && name.compare(name.size() - 2, 2, ".k") == 0;
    const bool is_dense_w = name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0;
    const bool in_skip = name.find("skip.") != std::string::npos;
    if ((is_kernel && !in_skip) || is_dense_w) ++count;
  });
  return count;
}

struct LayerShape {
  std::string name;
  Shape shape;
};

/// Output shape after every top-level node for a single-sample inference
/// forward (batch axis retained).
inline std::vector<LayerShape> forward_shapes(const NetSpec& spec, std::size_t batch = 1) {
  Rng rng(1);
  auto net = build_network<float>(spec, rng);
  auto* seq = dynamic_cast<Sequential<float>*>(net.get());
  TensorF x({batch, spec.in_channels, spec.input_hw, spec.input_hw}, 0.0f);
  std::vector<LayerShape> out;
  for (std::size_t i = 0; i < seq->size(); ++i) {
    x = seq->at(i).forward(x, false);
    out.push_back({std::to_string(i) + "." + seq->at(i).kind(), x.shape()});
  }
  return out;
}

}  // namespace iclab
