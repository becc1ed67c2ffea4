#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cranio/layers.hpp"

namespace cranio {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

// Values are held as double in memory; float32 entries widen losslessly and
// narrow back to the same bits.
struct StoredTensor {
  Shape shape;
  DType dtype = DType::F64;
  std::vector<double> values;
};

// File layout (all integers little-endian):
//   "CRANIOCK" | u32 version | u64 header bytes | JSON header
//   u32 tensor count, then per tensor:
//   u32 name bytes | name | u8 dtype | u32 rank | u64 dims[rank] | data
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, StoredTensor> tensors;
};

template <typename S>
void store_parameters(Checkpoint& ck, const ParameterList<S>& params, const std::string& prefix);

// Copies stored values into the given (leaf) parameters. Missing names and
// shape or dtype differences are architecture mismatches.
template <typename S>
void restore_parameters(const Checkpoint& ck, const ParameterList<S>& params, const std::string& prefix);

// Writes to a sibling temporary and renames, so an interrupted save never
// clobbers the previous file.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace cranio
