#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "iclab/dataset.hpp"
#include "iclab/errors.hpp"
#include "iclab/optim.hpp"
#include "iclab/resnet.hpp"

namespace iclab {

/// Full description of one training run. Text form is flat `key = value`
/// lines with `#` comments; lists are comma-separated, milestones are
/// `epoch:divisor` pairs.
struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;

  // architecture
  UnitLayout layout = UnitLayout::kBaseline;
  bool bottleneck = false;
  std::size_t n = 1;
  std::size_t num_classes = 10;
  std::size_t in_channels = 3;
  std::size_t input_hw = 32;
  double drop_rate = 0.05;
  DropoutMode dropout_mode = DropoutMode::kInverted;

  // optimization
  std::string optimizer = "adam";
  double lr = 0.001;
  double momentum = 0.0;  // sgd only
  std::vector<LrMilestone> lr_milestones;

  // data
  std::string data_format = "synthetic";
  std::string data_path;
  std::size_t subset_size = 2000;
  std::uint64_t data_seed = 1;  // task identity; independent of the run seed
  double synthetic_noise = 0.05;
  bool augment_data = true;

  std::string output_dir = "runs/out";

  NetSpec net_spec() const {
    NetSpec s;
    s.n = n;
    s.layout = layout;
    s.bottleneck = bottleneck;
    s.num_classes = num_classes;
    s.in_channels = in_channels;
    s.input_hw = input_hw;
    s.drop_rate = drop_rate;
    s.dropout_mode = dropout_mode;
    return s;
  }

  LrSchedule lr_schedule() const { return LrSchedule{lr, lr_milestones}; }

  DataFormat parsed_format() const {
    if (data_format == "synthetic") return DataFormat::kSynthetic;
    if (data_format == "cifar10-binary") return DataFormat::kCifar10Binary;
    if (data_format == "idx") return DataFormat::kIdx;
    throw ConfigError("unknown data_format '" + data_format + "'");
  }

  DataSourceSpec data_source() const {
    DataSourceSpec src;
    src.format = parsed_format();
    src.path = data_path;
    src.subset_size = subset_size;
    src.data_seed = data_seed;
    src.synthetic_classes = num_classes;
    src.synthetic_hw = input_hw;
    src.synthetic_channels = in_channels;
    src.synthetic_noise = synthetic_noise;
    return src;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch statistics need it)");
    if (optimizer != "adam" && optimizer != "sgd")
      throw ConfigError("unknown optimizer '" + optimizer + "'");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    if (synthetic_noise < 0.0 || !std::isfinite(synthetic_noise))
      throw ConfigError("synthetic_noise must be finite and >= 0");
    parsed_format();
    if (parsed_format() != DataFormat::kSynthetic) {
      if (data_path.empty()) throw ConfigError("data_path is required for format " + data_format);
      if (!std::filesystem::exists(data_path))
        throw ConfigError("data_path does not exist: " + data_path);
    }
    try {
      net_spec().validate();
      lr_schedule().validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

template <typename T>
T parse_number(const std::string& value, const std::string& key) {
  std::istringstream in(value);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof())
    throw ConfigError("bad value '" + value + "' for key '" + key + "'");
  return v;
}

inline bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("bad value '" + value + "' for key '" + key + "' (want true/false)");
}

inline UnitLayout parse_layout(const std::string& v) {
  if (v == "baseline") return UnitLayout::kBaseline;
  if (v == "v1") return UnitLayout::kV1;
  if (v == "v2") return UnitLayout::kV2;
  if (v == "v3") return UnitLayout::kV3;
  throw ConfigError("unknown layout '" + v + "'");
}

inline DropoutMode parse_dropout_mode(const std::string& v) {
  if (v == "inverted") return DropoutMode::kInverted;
  if (v == "theorem") return DropoutMode::kTheorem;
  throw ConfigError("unknown dropout_mode '" + v + "'");
}

inline std::vector<LrMilestone> parse_milestones(const std::string& value) {
  std::vector<LrMilestone> out;
  if (trim(value).empty()) return out;
  for (const std::string& item : split(value, ',')) {
    const auto colon = item.find(':');
    LrMilestone m;
    if (colon == std::string::npos) {
      m.epoch = parse_number<std::size_t>(item, "lr_milestones");
      m.divisor = 10.0;
    } else {
      m.epoch = parse_number<std::size_t>(trim(item.substr(0, colon)), "lr_milestones");
      m.divisor = parse_number<double>(trim(item.substr(colon + 1)), "lr_milestones");
    }
    out.push_back(m);
  }
  return out;
}

}  // namespace detail

/// Parses config text. Unknown keys and malformed values raise ConfigError
/// with the line number. Does not touch the filesystem; call validate() (or
/// load_config) for path checks.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));

    if (key == "seed") cfg.seed = detail::parse_number<std::uint64_t>(value, key);
    else if (key == "epochs") cfg.epochs = detail::parse_number<std::size_t>(value, key);
    else if (key == "batch_size") cfg.batch_size = detail::parse_number<std::size_t>(value, key);
    else if (key == "layout") cfg.layout = detail::parse_layout(value);
    else if (key == "bottleneck") cfg.bottleneck = detail::parse_bool(value, key);
    else if (key == "n") cfg.n = detail::parse_number<std::size_t>(value, key);
    else if (key == "num_classes") cfg.num_classes = detail::parse_number<std::size_t>(value, key);
    else if (key == "in_channels") cfg.in_channels = detail::parse_number<std::size_t>(value, key);
    else if (key == "input_hw") cfg.input_hw = detail::parse_number<std::size_t>(value, key);
    else if (key == "drop_rate") cfg.drop_rate = detail::parse_number<double>(value, key);
    else if (key == "dropout_mode") cfg.dropout_mode = detail::parse_dropout_mode(value);
    else if (key == "optimizer") cfg.optimizer = value;
    else if (key == "lr") cfg.lr = detail::parse_number<double>(value, key);
    else if (key == "momentum") cfg.momentum = detail::parse_number<double>(value, key);
    else if (key == "lr_milestones") cfg.lr_milestones = detail::parse_milestones(value);
    else if (key == "data_format") cfg.data_format = value;
    else if (key == "data_path") cfg.data_path = value;
    else if (key == "subset_size") cfg.subset_size = detail::parse_number<std::size_t>(value, key);
    else if (key == "data_seed") cfg.data_seed = detail::parse_number<std::uint64_t>(value, key);
    else if (key == "synthetic_noise") cfg.synthetic_noise = detail::parse_number<double>(value, key);
    else if (key == "augment") cfg.augment_data = detail::parse_bool(value, key);
    else if (key == "output_dir") cfg.output_dir = value;
    else throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "seed = " << cfg.seed << "\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "layout = " << layout_name(cfg.layout) << "\n";
  out << "bottleneck = " << (cfg.bottleneck ? "true" : "false") << "\n";
  out << "n = " << cfg.n << "\n";
  out << "num_classes = " << cfg.num_classes << "\n";
  out << "in_channels = " << cfg.in_channels << "\n";
  out << "input_hw = " << cfg.input_hw << "\n";
  out << "drop_rate = " << cfg.drop_rate << "\n";
  out << "dropout_mode = "
      << (cfg.dropout_mode == DropoutMode::kInverted ? "inverted" : "theorem") << "\n";
  out << "optimizer = " << cfg.optimizer << "\n";
  out << "lr = " << cfg.lr << "\n";
  out << "momentum = " << cfg.momentum << "\n";
  out << "lr_milestones = ";
  for (std::size_t i = 0; i < cfg.lr_milestones.size(); ++i) {
    if (i) out << ", ";
    out << cfg.lr_milestones[i].epoch << ":" << cfg.lr_milestones[i].divisor;
  }
  out << "\n";
  out << "data_format = " << cfg.data_format << "\n";
  out << "data_path = " << cfg.data_path << "\n";
  out << "subset_size = " << cfg.subset_size << "\n";
  out << "data_seed = " << cfg.data_seed << "\n";
  out << "synthetic_noise = " << cfg.synthetic_noise << "\n";
  out << "augment = " << (cfg.augment_data ? "true" : "false") << "\n";
  out << "output_dir = " << cfg.output_dir << "\n";
  return out.str();
}

/// Reads and parses a config file, then validates it (including path checks).
inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  RunConfig cfg = parse_config(buf.str());
  cfg.validate();
  return cfg;
}

}  // namespace iclab
