#pragma once

// Versioned binary container for named weight arrays plus a JSON header.
//
//   bytes 0..7   magic "SEMFCKPT"
//   u32          format version
//   u64          header length, followed by UTF-8 JSON header
//   u64          tensor count, then per tensor:
//                  u32 name length, name bytes
//                  u8  dtype (0 = float32, 1 = float64)
//                  u8  trainable flag
//                  i64 rows, i64 cols
//                  row-major payload
//
// All integers are little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "semfield/common.hpp"
#include "semfield/nn.hpp"

namespace semfield {

inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'M', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  nn::ParameterSet<T> params;
};

namespace detail {

template <class V>
void put(std::ostream& out, V value) {
  static_assert(std::is_trivially_copyable_v<V>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <class V>
V get(std::istream& in, const std::string& path) {
  V value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(V));
  if (!in) throw Error("checkpoint truncated: " + path);
  return value;
}

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    const std::string header = ckpt.header.dump();
    detail::put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::put<std::uint64_t>(out, ckpt.params.size());
    for (const auto& [name, p] : ckpt.params) {
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put<std::uint8_t>(out, detail::dtype_code<T>());
      detail::put<std::uint8_t>(out, p.trainable ? 1 : 0);
      detail::put<std::int64_t>(out, p.value.rows());
      detail::put<std::int64_t>(out, p.value.cols());
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(T)));
    }
    if (!out) throw Error("failed while writing checkpoint: " + path);
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw Error("not a checkpoint file: " + path);
  const auto version = detail::get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw Error("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  Checkpoint<T> ckpt;
  const auto header_size = detail::get<std::uint64_t>(in, path);
  std::string header(header_size, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_size));
  ckpt.header = nlohmann::json::parse(header);
  const auto count = detail::get<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_size = detail::get<std::uint32_t>(in, path);
    std::string name(name_size, '\0');
    in.read(name.data(), name_size);
    const auto dtype = detail::get<std::uint8_t>(in, path);
    const bool trainable = detail::get<std::uint8_t>(in, path) != 0;
    const auto rows = detail::get<std::int64_t>(in, path);
    const auto cols = detail::get<std::int64_t>(in, path);
    if (rows < 0 || cols < 0) throw Error("corrupt tensor shape in checkpoint: " + path);
    nn::Matrix<T> value(rows, cols);
    if (dtype == detail::dtype_code<T>()) {
      in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.size() * sizeof(T)));
    } else if (dtype == 0) {
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> raw(rows, cols);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
      value = raw.template cast<T>();
    } else if (dtype == 1) {
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> raw(rows, cols);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(double)));
      value = raw.template cast<T>();
    } else {
      throw Error("unknown tensor dtype in checkpoint: " + path);
    }
    if (!in) throw Error("checkpoint truncated: " + path);
    ckpt.params.add(name, std::move(value), trainable);
  }
  return ckpt;
}

}  // namespace semfield
