#include "structie/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "structie/error.hpp"

namespace structie {

namespace {

constexpr const char* kFormat = "structie-checkpoint-v1";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const std::vector<Tensor>& params, const nlohmann::json& meta) {
  nlohmann::json header;
  header["format"] = kFormat;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& p : params) {
    header["tensors"].push_back({{"name", p.name()},
                                 {"shape", {p.rows(), p.cols()}},
                                 {"offset", payload.size()},
                                 {"count", p.size()}});
    for (double x : p.data()) put_u64(payload, std::bit_cast<std::uint64_t>(x));
  }
  const std::string text = header.dump();
  std::string blob;
  put_u64(blob, text.size());
  blob += text;
  blob += payload;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError(path, "write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open checkpoint");
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 8) throw IoError(path, "truncated checkpoint");
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint64_t header_len = get_u64(bytes);
  if (8 + header_len > blob.size()) throw IoError(path, "truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path, std::string("bad checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != kFormat) throw IoError(path, "unknown checkpoint format");

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  const std::size_t base = 8 + header_len;
  for (const auto& entry : header.at("tensors")) {
    CheckpointTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = {entry.at("shape").at(0).get<std::size_t>(), entry.at("shape").at(1).get<std::size_t>()};
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (count != t.shape.size() || base + offset + 8 * count > blob.size()) {
      throw IoError(path, "tensor '" + t.name + "' exceeds payload");
    }
    t.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      t.values[i] = std::bit_cast<double>(get_u64(bytes + base + offset + 8 * i));
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, std::vector<Tensor>& params) {
  for (auto& p : params) {
    const CheckpointTensor* stored = ckpt.find(p.name());
    if (stored == nullptr) throw ConfigError("checkpoint has no tensor named '" + p.name() + "'");
    if (stored->shape != p.shape()) {
      throw ShapeError("checkpoint tensor '" + p.name() + "' has shape " + to_string(stored->shape) +
                       ", parameter has " + to_string(p.shape()));
    }
    std::copy(stored->values.begin(), stored->values.end(), p.mutable_data().begin());
  }
}

}  // namespace structie
