#include "corelm/archive.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "corelm/error.hpp"

namespace corelm {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  out.write(b, 8);
}

void read_exact(std::istream& in, char* dst, std::size_t n) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw CheckpointError("tensor archive is truncated");
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  read_exact(in, reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  read_exact(in, reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw CheckpointError(std::string(what) + " does not fit the archive's 32-bit field");
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_archive(std::ostream& out, std::span<const NamedTensor> tensors) {
  put_u32(out, checked_u32(tensors.size(), "tensor count"));
  for (const NamedTensor& t : tensors) {
    put_u32(out, checked_u32(t.name.size(), "name length"));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(out, checked_u32(t.tensor.rank(), "rank"));
    for (std::size_t d : t.tensor.shape()) put_u32(out, checked_u32(d, "shape entry"));
  }
  for (const NamedTensor& t : tensors) {
    for (double v : t.tensor.data()) put_f64(out, v);
  }
  if (!out) throw IoError("failed writing tensor archive");
}

std::vector<NamedTensor> read_archive(std::istream& in) {
  const std::uint32_t count = get_u32(in);
  std::vector<std::pair<std::string, Shape>> header;
  header.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(in);
    std::string name(len, '\0');
    read_exact(in, name.data(), len);
    const std::uint32_t rank = get_u32(in);
    Shape shape(rank);
    for (auto& d : shape) {
      d = get_u32(in);
      if (d == 0) throw CheckpointError("tensor '" + name + "' has a zero-sized dimension");
    }
    header.emplace_back(std::move(name), std::move(shape));
  }
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (auto& [name, shape] : header) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = get_f64(in);
    tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after tensor archive");
  return tensors;
}

void save_archive(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_archive(out, tensors);
}

std::vector<NamedTensor> load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_archive(in);
}

}  // namespace corelm
