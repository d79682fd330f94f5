#include "osediff/checkpoint.hpp"

#include <torch/torch.h>
#include <unistd.h>

#include <bit>
#include <cstring>

#include "osediff/errors.hpp"
#include "osediff/image.hpp"

namespace osediff {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

std::string file_for(const std::string& name) {
  std::string f;
  for (char c : name) {
    f.push_back(c == '/' ? '~' : c);
  }
  return f + ".f32";
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  const auto parent = dir.parent_path().empty() ? fs::path(".") : dir.parent_path();
  fs::create_directories(parent);
  const auto tmp = parent / ("." + dir.filename().string() + ".tmp-" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directories(tmp / "weights");
  json index = json::array();
  for (const auto& [name, tensor] : ckpt.arrays) {
    auto t = tensor.detach().to(torch::kCPU, torch::kFloat).contiguous();
    std::vector<uint8_t> bytes(static_cast<size_t>(t.numel()) * sizeof(float));
    if (!bytes.empty()) {
      std::memcpy(bytes.data(), t.data_ptr<float>(), bytes.size());
    }
    const auto file = file_for(name);
    write_file_atomic(tmp / "weights" / file, bytes);
    index.push_back({{"name", name}, {"file", file}, {"shape", t.sizes().vec()}});
  }
  write_file_atomic(tmp / "weights" / "index.json", json{{"arrays", index}}.dump(1) + "\n");
  write_file_atomic(tmp / "config.json", ckpt.config.dump(2) + "\n");
  write_file_atomic(tmp / "manifest.json", ckpt.manifest.dump(2) + "\n");
  std::error_code ec;
  if (fs::exists(dir)) {
    const auto old = parent / ("." + dir.filename().string() + ".old-" + std::to_string(::getpid()));
    fs::remove_all(old);
    fs::rename(dir, old, ec);
    if (ec) {
      throw IoError("cannot replace " + dir.string() + ": " + ec.message());
    }
    fs::rename(tmp, dir, ec);
    fs::remove_all(old);
  } else {
    fs::rename(tmp, dir, ec);
  }
  if (ec) {
    throw IoError("cannot move checkpoint into " + dir.string() + ": " + ec.message());
  }
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw IoError("checkpoint directory not found: " + dir.string());
  }
  auto parse = [](const fs::path& p) {
    const auto bytes = read_file(p);
    try {
      return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw IoError("cannot parse " + p.string() + ": " + e.what());
    }
  };
  Checkpoint ckpt;
  const auto index = parse(dir / "weights" / "index.json");
  for (const auto& e : index.at("arrays")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    const auto bytes = read_file(dir / "weights" / e.at("file").get<std::string>());
    int64_t numel = 1;
    for (auto s : shape) numel *= s;
    if (bytes.size() != static_cast<size_t>(numel) * sizeof(float)) {
      throw IoError("array '" + name + "' has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(numel * 4));
    }
    auto t = torch::empty(shape, torch::kFloat);
    if (numel > 0) {
      std::memcpy(t.data_ptr<float>(), bytes.data(), bytes.size());
    }
    ckpt.arrays[name] = t;
  }
  ckpt.config = parse(dir / "config.json");
  ckpt.manifest = parse(dir / "manifest.json");
  return ckpt;
}

WeightMap select_prefix(const WeightMap& arrays, const std::string& prefix) {
  WeightMap out;
  for (auto it = arrays.lower_bound(prefix); it != arrays.end(); ++it) {
    if (it->first.compare(0, prefix.size(), prefix) != 0) {
      break;
    }
    out[it->first.substr(prefix.size())] = it->second;
  }
  return out;
}

void put_prefix(WeightMap& dst, const std::string& prefix, const WeightMap& src) {
  for (const auto& [name, t] : src) {
    dst[prefix + name] = t;
  }
}

}  // namespace osediff
