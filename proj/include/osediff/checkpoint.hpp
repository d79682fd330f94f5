#pragma once

#include <filesystem>

#include "json.hpp"
#include "osediff/layers.hpp"

namespace osediff {

/// On-disk layout:
///   weights/index.json   names, shapes and files of every array
///   weights/<file>.f32   little-endian IEEE-754 float32, row-major
///   config.json          resolved configuration
///   manifest.json        provenance and measured quantities
struct Checkpoint {
  WeightMap arrays;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json manifest = nlohmann::json::object();
};

/// Writes into a sibling temp directory and renames it over `dir`.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Arrays whose names start with `prefix`, with the prefix removed.
WeightMap select_prefix(const WeightMap& arrays, const std::string& prefix);
/// Adds `prefix` to every name of `src` and stores the tensors in `dst`.
void put_prefix(WeightMap& dst, const std::string& prefix, const WeightMap& src);

}  // namespace osediff
