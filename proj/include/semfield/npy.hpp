#pragma once

// Reader/writer for the subset of the NumPy .npy format used for diagnostic
// dumps: little-endian float32, any rank. Files are written in C order;
// Fortran-ordered files are reordered on load.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

#include "semfield/common.hpp"

namespace semfield::npy {

struct Array {
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

inline void save(const std::string& path, const std::vector<std::size_t>& shape, std::span<const float> data) {
  std::size_t count = 1;
  for (auto s : shape) count *= s;
  if (count != data.size()) throw Error("npy: shape does not match data length for " + path);
  std::string dims;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    dims += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) dims += ",";
    if (i + 1 < shape.size()) dims += " ";
  }
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (" + dims + "), }";
  // magic(6) + version(2) + length(2) + header + '\n' padded to 64 bytes
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("npy: cannot write " + path);
  out.write("\x93NUMPY", 6);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const std::uint16_t length = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(length & 0xFF), static_cast<char>(length >> 8)};
  out.write(len_bytes, 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
}

inline Array load(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw Error("npy: bad magic in " + path);
  const std::size_t length =
      static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
  if (bytes.size() < 10 + length) throw Error("npy: truncated header in " + path);
  const std::string header = bytes.substr(10, length);
  if (header.find("'<f4'") == std::string::npos) throw Error("npy: only float32 arrays are supported: " + path);
  std::smatch match;
  if (!std::regex_search(header, match, std::regex(R"('shape':\s*\(([^)]*)\))")))
    throw Error("npy: missing shape in " + path);
  Array array;
  const std::string dims = match[1];
  std::regex number(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), number); it != std::sregex_iterator(); ++it)
    array.shape.push_back(std::stoul(it->str()));
  std::size_t count = 1;
  for (auto s : array.shape) count *= s;
  if (bytes.size() != 10 + length + count * sizeof(float)) throw Error("npy: payload size mismatch in " + path);
  array.data.resize(count);
  std::memcpy(array.data.data(), bytes.data() + 10 + length, count * sizeof(float));
  if (header.find("'fortran_order': True") != std::string::npos && array.shape.size() > 1) {
    // Column-major payload: reorder into C order.
    const std::size_t rank = array.shape.size();
    std::vector<float> c_order(count);
    std::vector<std::size_t> index(rank, 0);
    for (std::size_t f = 0; f < count; ++f) {
      std::size_t c = 0;
      for (std::size_t d = 0; d < rank; ++d) c = c * array.shape[d] + index[d];
      c_order[c] = array.data[f];
      for (std::size_t d = 0; d < rank && ++index[d] == array.shape[d]; ++d) index[d] = 0;
    }
    array.data = std::move(c_order);
  }
  return array;
}

}  // namespace semfield::npy
