#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dsatrack/tensor.hpp"

namespace dsa {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// DSAW container: "DSAW", u32 version (=1), u32 count, then per tensor
// u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim], binary32 LE payload.
inline constexpr std::uint32_t kWeightsVersion = 1;

std::string encode_weights(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_weights(const std::string& bytes);

void write_weights(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_weights(const std::filesystem::path& path);

}  // namespace dsa
