#include "instformer/core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "instformer/core/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian host");

namespace instformer::core {

void Checkpoint::put(const std::string& name, const std::vector<int>& shape, const std::vector<double>& data) {
  tensors[name] = {shape, data};
}

void Checkpoint::put(const std::string& name, const Var& v) { tensors[name] = {v->shape, v->val}; }

const std::pair<std::vector<int>, std::vector<double>>& Checkpoint::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw IoError("checkpoint: missing tensor " + name);
  return it->second;
}

std::vector<uint8_t> Checkpoint::raw_bytes(const std::string& name) const {
  const auto& [shape, data] = get(name);
  std::vector<uint8_t> out(data.size() * 4);
  for (size_t i = 0; i < data.size(); ++i) {
    float f = float(data[i]);
    std::memcpy(out.data() + i * 4, &f, 4);
  }
  return out;
}

void Checkpoint::save(const std::string& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const auto& [shape, data] = t;
    nlohmann::json entry;
    entry["dtype"] = "f32";
    entry["shape"] = shape;
    entry["offset"] = offset;
    entry["nbytes"] = data.size() * 4;
    header["tensors"][name] = entry;
    offset += data.size() * 4;
  }
  std::string hs = header.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), std::streamsize(hs.size()));
  for (const auto& [name, t] : tensors) {
    const auto& data = t.second;
    std::vector<float> f32(data.size());
    for (size_t i = 0; i < data.size(); ++i) f32[i] = float(data[i]);
    f.write(reinterpret_cast<const char*>(f32.data()), std::streamsize(f32.size() * 4));
  }
  if (!f) throw IoError("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen == 0 || hlen > (1ull << 30)) throw IoError("corrupt checkpoint header: " + path);
  std::string hs(hlen, '\0');
  f.read(hs.data(), std::streamsize(hlen));
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw IoError("corrupt checkpoint JSON: " + path);

  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  std::vector<char> payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (header.contains("tensors")) {
    for (auto& [name, entry] : header["tensors"].items()) {
      std::vector<int> shape = entry["shape"].get<std::vector<int>>();
      uint64_t offset = entry["offset"].get<uint64_t>();
      uint64_t nbytes = entry["nbytes"].get<uint64_t>();
      if (offset + nbytes > payload.size()) throw IoError("checkpoint payload truncated: " + path);
      std::vector<double> data(nbytes / 4);
      for (size_t i = 0; i < data.size(); ++i) {
        float v;
        std::memcpy(&v, payload.data() + offset + i * 4, 4);
        data[i] = double(v);
      }
      ck.tensors[name] = {std::move(shape), std::move(data)};
    }
  }
  return ck;
}

}  // namespace instformer::core
