#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "wcnn/params.hpp"
#include "wcnn/tensor.hpp"

namespace wcnn::checkpoint {

// File layout:
//   8 bytes   magic "WCNNCKPT"
//   u32       format version
//   u64       manifest length in bytes
//   manifest  UTF-8 JSON: {"config": ..., "tensors": [{name, dims, dtype, offset, nbytes}, ...]}
//   data      raw little-endian scalars; offsets are relative to the data start
// All integers are little-endian.

struct Entry {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct Manifest {
  /// Resolved run configuration in key = value form (may be empty).
  std::string config_text;
  std::vector<Entry> tensors;
};

/// Writes every tensor of `store` (parameters and buffers) in declaration order.
void save(const std::filesystem::path& path, const ParamStore& store, const std::string& config_text = "");

Manifest read_manifest(const std::filesystem::path& path);
std::map<std::string, Tensor> read_tensors(const std::filesystem::path& path);

/// Copies the checkpoint into an initialized store. The manifest must list
/// exactly the store's tensors with matching dims; the error names the first
/// offending tensor. Values are converted to the store's dtype if needed.
void load_into(const std::filesystem::path& path, ParamStore& store);

}  // namespace wcnn::checkpoint
