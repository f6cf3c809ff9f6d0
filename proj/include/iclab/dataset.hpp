#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iclab/errors.hpp"
#include "iclab/rng.hpp"
#include "iclab/tensor.hpp"
#include "iclab/tensor_ops.hpp"

namespace iclab {

/// Images are N x C x H x W in [0,1] scale with the training split's
/// per-pixel mean already subtracted (exactly once, by the loader).
struct Dataset {
  TensorF images{{1, 1, 1, 1}, 0.0f};
  std::vector<std::size_t> labels;
  TensorF per_pixel_mean{{1, 1, 1}, 0.0f};
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

struct DataBundle {
  Dataset train;
  Dataset test;
};

namespace detail {

struct RawSet {
  TensorF images{{1, 1, 1, 1}, 0.0f};  // [0,1] scale, no mean subtraction yet
  std::vector<std::size_t> labels;
};

// CIFAR-10 binary batch: records of 1 label byte + 3072 image bytes (R,G,B
// planes of 32x32), nothing else in the file.
inline RawSet read_cifar10_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("cannot open: " + path, 0);
  const std::size_t bytes = static_cast<std::size_t>(f.tellg());
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  if (bytes == 0 || bytes % kRecord != 0)
    throw FormatError(path + ": size " + std::to_string(bytes) + " is not a multiple of " +
                          std::to_string(kRecord),
                      bytes - bytes % kRecord);
  const std::size_t n = bytes / kRecord;
  f.seekg(0);

  RawSet out;
  out.images = TensorF({n, 3, 32, 32});
  out.labels.resize(n);
  std::vector<unsigned char> rec(kRecord);
  for (std::size_t i = 0; i < n; ++i) {
    f.read(reinterpret_cast<char*>(rec.data()), kRecord);
    if (!f) throw FormatError(path + ": truncated record", i * kRecord);
    if (rec[0] > 9) throw FormatError(path + ": label byte out of range", i * kRecord);
    out.labels[i] = rec[0];
    float* dst = out.images.data() + i * 3072;
    for (std::size_t j = 0; j < 3072; ++j) dst[j] = float(rec[1 + j]) / 255.0f;
  }
  return out;
}

inline RawSet concat_raw(const std::vector<RawSet>& parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.labels.size();
  RawSet out;
  const Shape& s = parts.front().images.shape();
  out.images = TensorF({n, s[1], s[2], s[3]});
  out.labels.reserve(n);
  float* dst = out.images.data();
  for (const auto& p : parts) {
    std::copy(p.images.data(), p.images.data() + p.images.size(), dst);
    dst += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

inline std::uint32_t read_be32(std::istream& in, std::size_t offset, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError(std::string("truncated ") + what, offset);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

// IDX pair: image file magic 0x803 (u8, 3 dims), label file magic 0x801.
inline RawSet read_idx_pair(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw FormatError("cannot open: " + images_path, 0);
  if (read_be32(fi, 0, "magic") != 0x00000803)
    throw FormatError(images_path + ": not an idx3 u8 image file", 0);
  const std::size_t n = read_be32(fi, 4, "count");
  const std::size_t h = read_be32(fi, 8, "height");
  const std::size_t w = read_be32(fi, 12, "width");
  if (n == 0 || h == 0 || w == 0 || h * w > (1u << 24))
    throw FormatError(images_path + ": unreasonable dimensions", 4);

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw FormatError("cannot open: " + labels_path, 0);
  if (read_be32(fl, 0, "magic") != 0x00000801)
    throw FormatError(labels_path + ": not an idx1 label file", 0);
  if (read_be32(fl, 4, "count") != n)
    throw FormatError(labels_path + ": label count does not match image count", 4);

  RawSet out;
  out.images = TensorF({n, 1, h, w});
  out.labels.resize(n);
  std::vector<unsigned char> row(h * w);
  for (std::size_t i = 0; i < n; ++i) {
    fi.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!fi) throw FormatError(images_path + ": truncated pixels", 16 + i * h * w);
    float* dst = out.images.data() + i * h * w;
    for (std::size_t j = 0; j < h * w; ++j) dst[j] = float(row[j]) / 255.0f;
    unsigned char lab;
    fl.read(reinterpret_cast<char*>(&lab), 1);
    if (!fl) throw FormatError(labels_path + ": truncated labels", 8 + i);
    out.labels[i] = lab;
  }
  return out;
}

// Class-structured blobs: each class owns a bump position on a circle and a
// per-channel amplitude signature. `noise` sets three per-sample corruptions
// at once: pixel noise of that std, bump-center wobble of noise*hw/4 pixels,
// and relative corruption of the channel signature. At 0.05 classes stay
// nearly separable; around 0.5 neighboring classes overlap heavily.
inline RawSet synthetic_raw(Rng& rng, std::size_t n, std::size_t classes, std::size_t channels,
                            std::size_t hw, double noise = 0.05) {
  RawSet out;
  out.images = TensorF({n, channels, hw, hw});
  out.labels.resize(n);
  const double cx0 = (double(hw) - 1.0) / 2.0;
  const double radius = double(hw) / 3.5;
  const double sigma = double(hw) / 6.0;
  const double jitter = noise * double(hw) / 4.0;

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = rng.below(classes);
    out.labels[i] = k;
    const double ang = 2.0 * 3.14159265358979323846 * double(k) / double(classes);
    const double cy = cx0 + radius * std::sin(ang) + jitter * rng.normal();
    const double cx = cx0 + radius * std::cos(ang) + jitter * rng.normal();
    const double scale = 0.8 + 0.4 * rng.uniform();
    float* img = out.images.data() + i * channels * hw * hw;
    for (std::size_t c = 0; c < channels; ++c) {
      // signature in [0.25, 1]: distinct per (class, channel)
      double amp = 0.25 + 0.75 * (0.5 + 0.5 * std::cos(ang * double(c + 1) + 1.3 * double(c)));
      amp = std::max(0.05, amp * (1.0 + noise * rng.normal()));
      for (std::size_t y = 0; y < hw; ++y)
        for (std::size_t x = 0; x < hw; ++x) {
          const double d2 = (double(y) - cy) * (double(y) - cy) + (double(x) - cx) * (double(x) - cx);
          double v = scale * amp * std::exp(-d2 / (2.0 * sigma * sigma));
          v += noise * rng.normal();
          img[(c * hw + y) * hw + x] = float(std::clamp(v, 0.0, 1.0));
        }
    }
  }
  return out;
}

inline TensorF mean_image(const TensorF& images) {
  const Shape& s = images.shape();
  TensorF mean({s[1], s[2], s[3]}, 0.0f);
  const std::size_t per = s[1] * s[2] * s[3];
  for (std::size_t i = 0; i < s[0]; ++i) {
    const float* src = images.data() + i * per;
    for (std::size_t j = 0; j < per; ++j) mean[j] += src[j];
  }
  mean.as_array() /= float(s[0]);
  return mean;
}

inline void subtract_mean(TensorF& images, const TensorF& mean) {
  const std::size_t per = mean.size();
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    float* dst = images.data() + i * per;
    for (std::size_t j = 0; j < per; ++j) dst[j] -= mean[j];
  }
}

}  // namespace detail

/// Seeded stratified pick of `total` examples: equal per-class quotas,
/// remainder spread over the lowest class ids.
inline detail::RawSet stratified_subset(const detail::RawSet& raw, std::size_t total,
                                        std::size_t classes, Rng& rng) {
  if (total == 0 || total > raw.labels.size())
    throw ValueError("stratified_subset: requested " + std::to_string(total) + " of " +
                     std::to_string(raw.labels.size()));
  std::vector<std::vector<std::size_t>> per_class(classes);
  for (std::size_t i = 0; i < raw.labels.size(); ++i) per_class.at(raw.labels[i]).push_back(i);

  std::vector<std::size_t> pick;
  for (std::size_t k = 0; k < classes; ++k) {
    auto& idx = per_class[k];
    for (std::size_t i = 0; i + 1 < idx.size(); ++i)
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    const std::size_t quota = total / classes + (k < total % classes ? 1 : 0);
    if (quota > idx.size())
      throw ValueError("stratified_subset: class " + std::to_string(k) + " has only " +
                       std::to_string(idx.size()) + " examples, need " + std::to_string(quota));
    pick.insert(pick.end(), idx.begin(), idx.begin() + quota);
  }
  std::sort(pick.begin(), pick.end());

  detail::RawSet out;
  const Shape& s = raw.images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  out.images = TensorF({pick.size(), s[1], s[2], s[3]});
  out.labels.reserve(pick.size());
  for (std::size_t i = 0; i < pick.size(); ++i) {
    std::copy(raw.images.data() + pick[i] * per, raw.images.data() + (pick[i] + 1) * per,
              out.images.data() + i * per);
    out.labels.push_back(raw.labels[pick[i]]);
  }
  return out;
}

/// Random shift of up to 4 pixels per axis (zero padding) followed by a
/// fair-coin horizontal flip, independently per image.
inline TensorF augment(const TensorF& batch, Rng& rng) {
  if (batch.rank() != 4) throw ShapeError("augment: expected N x C x H x W");
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (h < 8 || w < 8) throw ShapeError("augment: images must be at least 8x8");
  TensorF out(batch.shape(), 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    const long dy = rng.between(-4, 4);
    const long dx = rng.between(-4, 4);
    const bool flip = rng.uniform() < 0.5;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* src = batch.data() + (i * c + ch) * h * w;
      float* dst = out.data() + (i * c + ch) * h * w;
      for (long y = 0; y < long(h); ++y) {
        const long sy = y - dy;
        if (sy < 0 || sy >= long(h)) continue;
        for (long x = 0; x < long(w); ++x) {
          const long sx0 = x - dx;
          if (sx0 < 0 || sx0 >= long(w)) continue;
          const long ox = flip ? long(w) - 1 - x : x;
          dst[y * long(w) + ox] = src[sy * long(w) + sx0];
        }
      }
    }
  }
  return out;
}

/// Known dataset source formats. Unknown names in configs are rejected there.
enum class DataFormat { kCifar10Binary, kIdx, kSynthetic };

struct DataSourceSpec {
  DataFormat format = DataFormat::kSynthetic;
  std::string path;             // unused for synthetic
  std::size_t subset_size = 0;  // 0 = everything; test split gets half
  std::uint64_t data_seed = 1;  // task identity: generation, split, and subset draws
  std::size_t synthetic_classes = 10;
  std::size_t synthetic_hw = 32;
  std::size_t synthetic_channels = 3;
  double synthetic_noise = 0.05;
};

/// Loads train and test splits, scales to [0,1], applies a seeded stratified
/// subset when requested, and subtracts the training split's per-pixel mean
/// from both splits.
inline DataBundle load_data(const DataSourceSpec& src) {
  namespace fs = std::filesystem;
  detail::RawSet train_raw, test_raw;
  std::size_t classes = 0;

  switch (src.format) {
    case DataFormat::kSynthetic: {
      Rng rng(src.data_seed ^ 0x5e9dULL);
      const std::size_t n_train = src.subset_size ? src.subset_size : 2000;
      const std::size_t n_test = std::max<std::size_t>(n_train / 2, 1);
      classes = src.synthetic_classes;
      train_raw = detail::synthetic_raw(rng, n_train, classes, src.synthetic_channels,
                                        src.synthetic_hw, src.synthetic_noise);
      test_raw = detail::synthetic_raw(rng, n_test, classes, src.synthetic_channels,
                                       src.synthetic_hw, src.synthetic_noise);
      break;
    }
    case DataFormat::kCifar10Binary: {
      classes = 10;
      if (fs::is_directory(src.path)) {
        std::vector<detail::RawSet> parts;
        for (int b = 1; b <= 5; ++b) {
          fs::path p = fs::path(src.path) / ("data_batch_" + std::to_string(b) + ".bin");
          if (fs::exists(p)) parts.push_back(detail::read_cifar10_file(p.string()));
        }
        if (parts.empty()) throw FormatError(src.path + ": no data_batch_*.bin files", 0);
        train_raw = detail::concat_raw(parts);
        fs::path t = fs::path(src.path) / "test_batch.bin";
        if (!fs::exists(t)) throw FormatError(src.path + ": missing test_batch.bin", 0);
        test_raw = detail::read_cifar10_file(t.string());
      } else {
        // single batch file: seeded 2:1 split
        detail::RawSet all = detail::read_cifar10_file(src.path);
        Rng rng(src.data_seed ^ 0xc1fa);
        std::vector<std::size_t> idx(all.labels.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (std::size_t i = 0; i + 1 < idx.size(); ++i)
          std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        const std::size_t cut = idx.size() * 2 / 3;
        auto take = [&](std::size_t lo, std::size_t hi) {
          detail::RawSet out;
          const Shape& s = all.images.shape();
          const std::size_t per = s[1] * s[2] * s[3];
          out.images = TensorF({hi - lo, s[1], s[2], s[3]});
          for (std::size_t i = lo; i < hi; ++i) {
            std::copy(all.images.data() + idx[i] * per, all.images.data() + (idx[i] + 1) * per,
                      out.images.data() + (i - lo) * per);
            out.labels.push_back(all.labels[idx[i]]);
          }
          return out;
        };
        train_raw = take(0, cut);
        test_raw = take(cut, idx.size());
      }
      if (src.subset_size > 0 && src.subset_size < train_raw.labels.size()) {
        Rng rng(src.data_seed ^ 0x5ab5e7ULL);
        train_raw = stratified_subset(train_raw, src.subset_size, classes, rng);
        const std::size_t test_take =
            std::min<std::size_t>(std::max<std::size_t>(src.subset_size / 2, 1),
                                  test_raw.labels.size());
        test_raw = stratified_subset(test_raw, test_take, classes, rng);
      }
      break;
    }
    case DataFormat::kIdx: {
      fs::path dir(src.path);
      if (!fs::is_directory(dir)) throw FormatError(src.path + ": idx format expects a directory", 0);
      train_raw = detail::read_idx_pair((dir / "train-images-idx3-ubyte").string(),
                                        (dir / "train-labels-idx1-ubyte").string());
      test_raw = detail::read_idx_pair((dir / "t10k-images-idx3-ubyte").string(),
                                       (dir / "t10k-labels-idx1-ubyte").string());
      for (std::size_t l : train_raw.labels) classes = std::max(classes, l + 1);
      for (std::size_t l : test_raw.labels) classes = std::max(classes, l + 1);
      if (src.subset_size > 0 && src.subset_size < train_raw.labels.size()) {
        Rng rng(src.data_seed ^ 0x1d);
        train_raw = stratified_subset(train_raw, src.subset_size, classes, rng);
      }
      break;
    }
  }

  DataBundle out;
  out.train.per_pixel_mean = detail::mean_image(train_raw.images);
  out.test.per_pixel_mean = out.train.per_pixel_mean;
  detail::subtract_mean(train_raw.images, out.train.per_pixel_mean);
  detail::subtract_mean(test_raw.images, out.train.per_pixel_mean);
  out.train.images = std::move(train_raw.images);
  out.train.labels = std::move(train_raw.labels);
  out.test.images = std::move(test_raw.images);
  out.test.labels = std::move(test_raw.labels);
  out.train.num_classes = out.test.num_classes = classes;
  for (std::size_t l : out.train.labels)
    if (l >= classes) throw FormatError("train label out of range", 0);
  for (std::size_t l : out.test.labels)
    if (l >= classes) throw FormatError("test label out of range", 0);
  return out;
}

}  // namespace iclab
