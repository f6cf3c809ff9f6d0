#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "iclab/layers.hpp"
#include "iclab/tensor_io.hpp"

namespace iclab {

// Checkpoint container: "ICKP" magic, u64 manifest length, manifest JSON,
// then one ICT1 tensor blob per manifest entry, in manifest order. Entries
// cover trainable parameters and persistent buffers (running statistics), so
// a loaded network is inference-ready.

inline constexpr char kCheckpointMagic[4] = {'I', 'C', 'K', 'P'};

namespace detail {

template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>*>> checkpoint_slots(Layer<Scalar>& net) {
  std::vector<std::pair<std::string, Tensor<Scalar>*>> slots;
  net.visit_parameters([&](const std::string& name, Tensor<Scalar>& v, Tensor<Scalar>&) {
    slots.emplace_back("param:" + name, &v);
  });
  net.visit_buffers(
      [&](const std::string& name, Tensor<Scalar>& v) { slots.emplace_back("buffer:" + name, &v); });
  return slots;
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const std::string& path, Layer<Scalar>& net,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  auto slots = detail::checkpoint_slots(net);

  nlohmann::json manifest;
  manifest["format"] = "ickp-1";
  manifest["scalar_bytes"] = sizeof(Scalar);
  manifest["meta"] = meta;
  auto& tensors = manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : slots)
    tensors.push_back({{"name", name}, {"shape", t->shape()}});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path, 0);
  f.write(kCheckpointMagic, 4);
  const std::string m = manifest.dump();
  const std::uint64_t mlen = m.size();
  f.write(reinterpret_cast<const char*>(&mlen), 8);
  f.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& [name, t] : slots) write_tensor(f, *t);
  if (!f) throw FormatError("short write: " + path, 0);
}

inline nlohmann::json read_checkpoint_manifest(std::istream& in) {
  char magic[4];
  detail::read_exact(in, magic, 4, 0, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("bad checkpoint magic", 0);
  std::uint64_t mlen = 0;
  detail::read_exact(in, reinterpret_cast<char*>(&mlen), 8, 4, "manifest length");
  if (mlen == 0 || mlen > (std::uint64_t(1) << 30))
    throw FormatError("unreasonable manifest length", 4);
  std::string m(mlen, '\0');
  detail::read_exact(in, m.data(), mlen, 12, "manifest");
  nlohmann::json manifest = nlohmann::json::parse(m, nullptr, false);
  if (manifest.is_discarded()) throw FormatError("manifest is not valid JSON", 12);
  if (manifest.value("format", "") != "ickp-1")
    throw FormatError("unknown checkpoint format", 12);
  return manifest;
}

/// Loads tensors into an already-built network of the same architecture.
/// Manifest order and names must match the network's walk exactly.
/// Returns the stored metadata.
template <typename Scalar>
nlohmann::json load_checkpoint(const std::string& path, Layer<Scalar>& net) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for reading: " + path, 0);
  nlohmann::json manifest = read_checkpoint_manifest(f);
  if (manifest.value("scalar_bytes", 0) != int(sizeof(Scalar)))
    throw FormatError("checkpoint scalar width does not match network", 12);

  auto slots = detail::checkpoint_slots(net);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != slots.size())
    throw FormatError("checkpoint has " + std::to_string(tensors.size()) +
                          " tensors, network has " + std::to_string(slots.size()),
                      12);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::string stored = tensors[i].value("name", "");
    if (stored != slots[i].first)
      throw FormatError("checkpoint tensor '" + stored + "' does not match network slot '" +
                            slots[i].first + "'",
                        12);
    Tensor<Scalar> t = read_tensor<Scalar>(f);
    if (t.shape() != slots[i].second->shape())
      throw FormatError("shape mismatch for '" + stored + "'", 12);
    *slots[i].second = std::move(t);
  }
  return manifest["meta"];
}

}  // namespace iclab
