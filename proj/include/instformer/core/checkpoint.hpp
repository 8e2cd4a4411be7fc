#pragma once

#include <map>
#include <string>
#include <vector>

#include "instformer/core/autograd.hpp"

#include "json.hpp"

namespace instformer::core {

// Repo-wide checkpoint container: an 8-byte little-endian header length,
// a JSON header mapping tensor name -> {dtype, shape, offset, nbytes} plus a
// free-form "meta" object, then the concatenated little-endian float32 blobs.
struct Checkpoint {
  std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> tensors;
  nlohmann::json meta;

  void put(const std::string& name, const std::vector<int>& shape, const std::vector<double>& data);
  void put(const std::string& name, const Var& v);
  const std::pair<std::vector<int>, std::vector<double>>& get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  // Raw float32 payload of one tensor, for bit-level audits.
  std::vector<uint8_t> raw_bytes(const std::string& name) const;
};

}  // namespace instformer::core
