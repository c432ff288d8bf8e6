#pragma once

// Binary checkpoint format:
//
//   "KDWB"            4 bytes magic
//   u32 LE            format version (1)
//   u32 LE            header length in bytes
//   header            JSON: {"config": ModelConfig, "params": [{"name", "shape"}...], "param_count": N}
//   payload           f32 LE values, parameters concatenated in manifest order
//
// Values are stored at 32-bit precision; loading widens back to f64.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kdwb/error.hpp"
#include "kdwb/model.hpp"

namespace kdwb {

inline constexpr std::array<char, 4> kCheckpointMagic = {'K', 'D', 'W', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline nlohmann::json checkpoint_header(const Model& model) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : model.params()) manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  return {{"config", model.config()}, {"params", manifest}, {"param_count", model.scalar_count()}};
}

inline std::string serialize_checkpoint(const Model& model) {
  const std::string header = checkpoint_header(model).dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out.reserve(out.size() + 4 * model.scalar_count());
  for (const auto& p : model.params()) {
    for (double v : p.value.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline Model deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12) throw FormatError("checkpoint truncated: missing preamble");
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw FormatError("checkpoint magic mismatch (expected KDWB)");
  }
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t header_len = detail::get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len)) throw FormatError("checkpoint truncated: header");

  nlohmann::json header;
  ModelConfig config;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    config = header.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header unreadable: ") + e.what());
  }
  config.validate();

  const auto expected = parameter_manifest(config);
  const auto& listed = header.at("params");
  if (listed.size() != expected.size()) throw FormatError("checkpoint manifest does not match its config");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (listed[i].at("name").get<std::string>() != expected[i].name ||
        listed[i].at("shape").get<Shape>() != expected[i].shape) {
      throw FormatError("checkpoint manifest entry '" + listed[i].at("name").get<std::string>() +
                        "' does not match the parameter set implied by its config");
    }
  }
  if (header.contains("param_count") && header.at("param_count").get<std::uint64_t>() != param_count(config)) {
    throw FormatError("checkpoint param_count disagrees with config");
  }

  std::size_t offset = 12 + header_len;
  const std::size_t payload = 4 * static_cast<std::size_t>(param_count(config));
  if (bytes.size() < offset + payload) throw FormatError("checkpoint truncated: payload");
  if (bytes.size() > offset + payload) throw FormatError("checkpoint has trailing bytes");

  std::vector<NamedParam> params;
  for (const auto& spec : expected) {
    std::vector<double> values(shape_numel(spec.shape));
    for (auto& v : values) {
      v = static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes, offset)));
      offset += 4;
    }
    params.push_back({spec.name, Tensor(spec.shape, std::move(values), true)});
  }
  return Model(config, std::move(params));
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = serialize_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// Config declared in a checkpoint header, without reading the payload.
inline nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path.string() + "'");
  std::string pre(12, '\0');
  in.read(pre.data(), 12);
  if (in.gcount() != 12 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), pre.begin())) {
    throw FormatError("not a KDWB checkpoint: " + path.string());
  }
  std::string header(detail::get_u32(pre, 8), '\0');
  in.read(header.data(), static_cast<std::streamsize>(header.size()));
  if (in.gcount() != static_cast<std::streamsize>(header.size())) throw FormatError("checkpoint truncated: header");
  return nlohmann::json::parse(header);
}

}  // namespace kdwb
