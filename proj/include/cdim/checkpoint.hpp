#pragma once

// On-disk model: one "<layer>.<param>.cdtf" file per tensor plus a
// manifest.json listing names and shapes, the backbone config and the
// fusion spec.

#include <filesystem>
#include <fstream>

#include "cdim/cdtf.hpp"
#include "cdim/fusion.hpp"

namespace cdim {

struct Checkpoint {
  BackboneConfig backbone;
  FusionSpec fusion;
  NetworkParams<float> params;
};

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : ck.params.tensors) {
    const std::string file = name + ".cdtf";
    cdtf::write(dir / file, t);
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  }
  const nlohmann::json manifest{{"format", "cdim-checkpoint"},
                                {"version", 1},
                                {"tensors", tensors},
                                {"backbone", to_json(ck.backbone)},
                                {"fusion", to_json(ck.fusion)}};
  const auto path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  Checkpoint ck;
  try {
    ck.backbone = backbone_from_json(j.at("backbone"));
    ck.fusion = fusion_from_json(j.at("fusion"));
    for (const auto& tj : j.at("tensors")) {
      const std::string name = tj.at("name").get<std::string>();
      Tensor<float> t = cdtf::read<float>(dir / tj.at("file").get<std::string>());
      const Shape declared = tj.at("shape").get<Shape>();
      if (t.shape() != declared) {
        throw IoError(name + ": file holds " + to_string(t.shape()) + " but manifest declares " +
                      to_string(declared));
      }
      ck.params.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid checkpoint manifest " + path.string() + ": " + e.what());
  }
  check_compatible(ck.params, ck.backbone);
  return ck;
}

}  // namespace cdim
