#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "icmlm/tensor.hpp"

namespace icmlm::io {

inline constexpr std::uint32_t kWeightsVersion = 1;

// weights.bin layout, all integers little-endian:
//   "ICMW" | u32 version | u32 count
//   count x ( u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 data[prod(dims)] )
using TensorList = std::vector<std::pair<std::string, const Tensor<float>*>>;

void write_tensors(const std::filesystem::path& path, const TensorList& tensors);
std::map<std::string, Tensor<float>> read_tensors(const std::filesystem::path& path);

}  // namespace icmlm::io
