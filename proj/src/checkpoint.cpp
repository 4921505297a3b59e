#include "ut/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace ut {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void append_f32_le(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out += static_cast<char>(bits & 0xFF);
  out += static_cast<char>((bits >> 8) & 0xFF);
  out += static_cast<char>((bits >> 16) & 0xFF);
  out += static_cast<char>((bits >> 24) & 0xFF);
}

float read_f32_le(const char* p) {
  const auto b = [&](int i) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(p[i]));
  };
  const std::uint32_t bits = b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void save_checkpoint(const Parameters& params, const RunConfig& cfg,
                     std::int64_t step, const std::string& path_prefix) {
  const auto named = params.named();
  json manifest;
  manifest["format"] = "ut-checkpoint";
  manifest["version"] = 1;
  manifest["step"] = step;
  manifest["dtype"] = "float32_le";
  manifest["blob"] = fs::path(path_prefix).filename().string() + ".bin";
  manifest["config"] = json::parse(dump_run_config(cfg));

  std::string blob;
  json entries = json::array();
  std::int64_t offset = 0;
  for (const auto& [name, t] : named) {
    json e;
    e["name"] = name;
    e["shape"] = t->shape;
    e["offset"] = offset;
    e["count"] = static_cast<std::int64_t>(t->size());
    entries.push_back(std::move(e));
    for (double v : t->data) append_f32_le(blob, static_cast<float>(v));
    offset += static_cast<std::int64_t>(t->size()) * 4;
  }
  manifest["params"] = std::move(entries);

  {
    std::ofstream out(path_prefix + ".json", std::ios::binary);
    if (!out)
      throw std::runtime_error("cannot write manifest: " + path_prefix +
                               ".json");
    out << manifest.dump(2) << "\n";
  }
  {
    std::ofstream out(path_prefix + ".bin", std::ios::binary);
    if (!out)
      throw std::runtime_error("cannot write blob: " + path_prefix + ".bin");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
}

LoadedCheckpoint load_checkpoint(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw config_error("cannot open checkpoint: " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw config_error("checkpoint manifest is not valid JSON: " +
                       std::string(e.what()));
  }
  if (manifest.value("format", "") != "ut-checkpoint")
    throw config_error("not a checkpoint manifest: " + manifest_path);

  LoadedCheckpoint ck;
  ck.config = parse_run_config(manifest.at("config").dump());
  ck.step = manifest.at("step").get<std::int64_t>();

  const fs::path blob_path =
      fs::path(manifest_path).parent_path() /
      manifest.at("blob").get<std::string>();
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw config_error("cannot open blob: " + blob_path.string());
  std::ostringstream ss;
  ss << bin.rdbuf();
  const std::string blob = ss.str();

  Rng scratch_rng(0);
  ck.params = Parameters::init(ck.config.model, scratch_rng);
  const auto named = ck.params.named();
  const auto& entries = manifest.at("params");
  if (entries.size() != named.size())
    throw config_error("manifest lists " + std::to_string(entries.size()) +
                       " parameters, model has " +
                       std::to_string(named.size()));
  std::int64_t expected_offset = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, t] = named[i];
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != name)
      throw config_error("manifest parameter '" +
                         e.at("name").get<std::string>() +
                         "' does not match expected '" + name + "'");
    if (e.at("shape").get<std::vector<int>>() != t->shape)
      throw config_error("parameter '" + name + "' has manifest shape " +
                         shape_str(e.at("shape").get<std::vector<int>>()) +
                         ", model expects " + shape_str(t->shape));
    const std::int64_t offset = e.at("offset").get<std::int64_t>();
    const std::int64_t count = e.at("count").get<std::int64_t>();
    if (count != static_cast<std::int64_t>(t->size()))
      throw config_error("parameter '" + name + "' count mismatch");
    if (offset != expected_offset)
      throw config_error("parameter '" + name + "' offset " +
                         std::to_string(offset) +
                         " does not tile the blob (expected " +
                         std::to_string(expected_offset) + ")");
    expected_offset += count * 4;
  }
  if (expected_offset != static_cast<std::int64_t>(blob.size()))
    throw config_error("blob has " + std::to_string(blob.size()) +
                       " bytes, manifest describes " +
                       std::to_string(expected_offset));
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& e = entries[i];
    const std::int64_t offset = e.at("offset").get<std::int64_t>();
    TensorPtr t = named[i].second;
    for (std::size_t k = 0; k < t->size(); ++k)
      t->data[k] = static_cast<double>(
          read_f32_le(blob.data() + offset + static_cast<std::int64_t>(k) * 4));
    t->zero_grad();
  }
  return ck;
}

}  // namespace ut
