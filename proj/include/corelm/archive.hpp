#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "corelm/tensor.hpp"

namespace corelm {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Tensor archive layout, all integers unsigned 32-bit little-endian:
//   count
//   count x { name_length, name bytes (UTF-8), rank, shape[rank] }
//   payloads: each tensor's values as little-endian IEEE-754 doubles,
//             concatenated in header order
void write_archive(std::ostream& out, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_archive(std::istream& in);

void save_archive(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_archive(const std::filesystem::path& path);

}  // namespace corelm
