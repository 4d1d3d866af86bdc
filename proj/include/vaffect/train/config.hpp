#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "vaffect/cells/model.hpp"

namespace vaffect {

enum class StrategyCase { FrozenBackbone = 0, LastConv = 1, FullyTrainable = 2, FromRecurrent = 3 };

inline StrategyCase parse_case(int c) {
  if (c < 0 || c > 3) throw ContractError("case must be 0, 1, 2 or 3");
  return static_cast<StrategyCase>(c);
}

inline Trainability trainability_for(StrategyCase c) {
  switch (c) {
    case StrategyCase::FrozenBackbone: return Trainability::Frozen;
    case StrategyCase::LastConv: return Trainability::LastConvOnly;
    default: return Trainability::All;
  }
}

/// Everything needed to rebuild a model and resume its training.
struct RunConfig {
  ModelConfig model;
  bool published_backbone = false;
  std::size_t seq_length = 80;
  std::size_t batch_size = 2;
  double learning_rate = 1e-4;
  StrategyCase strategy = StrategyCase::FullyTrainable;
  std::uint64_t seed = 1;
};

inline nlohmann::json model_json(const RunConfig& c) {
  return {
      {"backbone", backbone_name(c.model.backbone.kind)},
      {"backbone_scale", c.published_backbone ? "published" : "toy"},
      {"cell", cell_name(c.model.cell.kind)},
      {"hidden", c.model.cell.hidden},
      {"layers", c.model.cell.layers},
      {"peepholes", c.model.cell.peepholes},
      {"attention", c.model.attention},
      {"attention_window", c.model.attention_window},
      {"attention_projection", c.model.attention_projection},
      {"time_steps", c.model.cell.time_steps},
  };
}

/// FNV-1a over the canonical model description; two runs share weights
/// only when their fingerprints agree.
inline std::string fingerprint(const RunConfig& c) {
  const std::string s = model_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {
      {"model", model_json(c)},
      {"seq_length", c.seq_length},
      {"batch_size", c.batch_size},
      {"learning_rate", c.learning_rate},
      {"case", static_cast<int>(c.strategy)},
      {"seed", c.seed},
      {"fingerprint", fingerprint(c)},
  };
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    const auto& m = j.at("model");
    const BackboneKind kind = parse_backbone(m.at("backbone").get<std::string>());
    c.published_backbone = m.at("backbone_scale").get<std::string>() == "published";
    c.model.backbone = c.published_backbone ? BackboneConfig::published(kind) : BackboneConfig::toy(kind);
    c.model.cell.kind = parse_cell(m.at("cell").get<std::string>());
    c.model.cell.hidden = m.at("hidden").get<std::size_t>();
    c.model.cell.layers = m.at("layers").get<std::size_t>();
    c.model.cell.peepholes = m.at("peepholes").get<bool>();
    c.model.attention = m.at("attention").get<bool>();
    c.model.attention_window = m.at("attention_window").get<std::size_t>();
    c.model.attention_projection = m.at("attention_projection").get<std::size_t>();
    c.model.cell.time_steps = m.at("time_steps").get<std::size_t>();
    c.seq_length = j.at("seq_length").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.strategy = parse_case(j.at("case").get<int>());
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run config: ") + e.what());
  }
  c.model.seed = c.seed;
  if (j.contains("fingerprint") && j["fingerprint"].get<std::string>() != fingerprint(c)) {
    throw FormatError("run config: fingerprint does not match its model description");
  }
  return c;
}

inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kDoneMarker = "train.done";

inline void write_run_config(const std::filesystem::path& dir, const RunConfig& c) {
  std::ofstream out(dir / kConfigFile);
  if (!out) throw FormatError("cannot write " + (dir / kConfigFile).string());
  out << to_json(c).dump(2) << '\n';
}

inline RunConfig read_run_config(const std::filesystem::path& dir) {
  std::ifstream in(dir / kConfigFile);
  if (!in) throw FormatError("missing " + (dir / kConfigFile).string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / kConfigFile).string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace vaffect
