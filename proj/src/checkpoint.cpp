#include "mixssm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "json.hpp"
#include "mixssm/config.hpp"
#include "mixssm/errors.hpp"

namespace mixssm {
namespace {

using Json = nlohmann::ordered_json;
using Kind = CheckpointError::Kind;

constexpr char kMagic[8] = {'M', 'I', 'X', 'S', 'S', 'M', '0', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

[[noreturn]] void fail(Kind kind, const std::string& path, const std::string& what) {
  throw CheckpointError(kind, "checkpoint '" + path + "': " + what);
}

template <typename T>
void fill_model(Model<T>& model, const CheckpointContents& c, const std::string& path) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : c.entries) by_name[e.name] = &e;
  std::size_t used = 0;
  for_each_parameter(model, [&](const std::string& name, const Tensor<T>& t) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) fail(Kind::shape_mismatch, path, "missing tensor '" + name + "'");
    const auto& e = *it->second;
    if (e.shape != t.shape()) {
      fail(Kind::shape_mismatch, path,
           "tensor '" + name + "' stored as " + shape_string(e.shape) + ", model expects " + shape_string(t.shape()));
    }
    auto handle = t;
    auto dst = handle.mutable_data();
    for (std::size_t i = 0; i < e.length; ++i) dst[i] = static_cast<T>(c.payload[e.offset + i]);
    ++used;
  });
  if (used != c.entries.size()) {
    fail(Kind::shape_mismatch, path,
         std::to_string(c.entries.size() - used) + " stored tensors do not belong to the configured model");
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  Json tensors = Json::array();
  std::string payload;
  std::size_t offset = 0;
  for_each_parameter(model, [&](const std::string& name, const Tensor<T>& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", t.numel()}});
    for (auto x : t.data()) put_f32(payload, static_cast<float>(x));
    offset += t.numel();
  });
  Json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = Json::parse(model_config_to_json(model.config, -1));
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();

  std::string bytes(kMagic, sizeof kMagic);
  put_u64(bytes, text.size());
  bytes += text;
  bytes += payload;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(Kind::io, path, "cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(Kind::io, path, "write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) fail(Kind::io, path, "cannot move temporary file into place");
}

CheckpointContents read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Kind::io, path, "cannot open for reading");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 8) fail(Kind::truncated, path, "file ends inside the magic");
  if (!std::equal(kMagic, kMagic + 8, bytes.begin())) fail(Kind::bad_magic, path, "not a checkpoint (bad magic)");
  if (bytes.size() < 16) fail(Kind::truncated, path, "file ends inside the header length");
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16) fail(Kind::truncated, path, "file ends inside the header");

  CheckpointContents c;
  Json header;
  try {
    header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(Kind::malformed_header, path, std::string("header is not valid JSON: ") + e.what());
  }
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      fail(Kind::bad_version, path,
           "format version " + std::to_string(version) + " (supported: " + std::to_string(kCheckpointVersion) + ")");
    }
    try {
      c.config = parse_model_config(header.at("config").dump());
    } catch (const ConfigError& e) {
      fail(Kind::malformed_header, path, std::string("stored config is invalid: ") + e.what());
    }
    for (const auto& t : header.at("tensors")) {
      CheckpointEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<std::size_t>();
      e.length = t.at("length").get<std::size_t>();
      c.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Kind::malformed_header, path, std::string("header is missing fields: ") + e.what());
  }

  std::set<std::string> names;
  std::size_t needed = 0;
  for (const auto& e : c.entries) {
    if (!names.insert(e.name).second) fail(Kind::malformed_header, path, "duplicate tensor '" + e.name + "'");
    if (shape_numel(e.shape) != e.length) {
      fail(Kind::shape_mismatch, path,
           "tensor '" + e.name + "' has shape " + shape_string(e.shape) + " but length " + std::to_string(e.length));
    }
    needed = std::max(needed, e.offset + e.length);
  }
  const std::size_t payload_bytes = bytes.size() - 16 - header_len;
  if (payload_bytes < needed * 4) {
    fail(Kind::truncated, path,
         "payload holds " + std::to_string(payload_bytes / 4) + " floats, header needs " + std::to_string(needed));
  }
  if (payload_bytes != needed * 4) {
    fail(Kind::malformed_header, path, "payload has " + std::to_string(payload_bytes - needed * 4) + " trailing bytes");
  }
  c.payload.resize(needed);
  const unsigned char* p = bytes.data() + 16 + header_len;
  for (std::size_t i = 0; i < needed; ++i) c.payload[i] = get_f32(p + 4 * i);
  return c;
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  const auto c = read_checkpoint(path);
  auto model = init_model<T>(c.config);
  fill_model(model, c, path);
  return model;
}

template <typename T>
void load_into(Model<T>& model, const std::string& path) {
  const auto c = read_checkpoint(path);
  if (!(c.config == model.config)) {
    fail(Kind::config_mismatch, path,
         "stored config differs from the model's:\n" + model_config_to_json(c.config, -1) + "\nvs\n" +
             model_config_to_json(model.config, -1));
  }
  fill_model(model, c, path);
}

template void save_checkpoint(const Model<float>&, const std::string&);
template void save_checkpoint(const Model<double>&, const std::string&);
template Model<float> load_checkpoint<float>(const std::string&);
template Model<double> load_checkpoint<double>(const std::string&);
template void load_into(Model<float>&, const std::string&);
template void load_into(Model<double>&, const std::string&);

}  // namespace mixssm
