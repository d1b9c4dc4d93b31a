#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "adl/errors.hpp"

namespace adl {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file for reading: " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

/// Write-to-temp-then-rename so concurrent readers never observe a torn file.
inline void write_file_atomic(const fs::path& path, std::string_view data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open file for writing: " + tmp.string());
    out.write(data.data(), std::streamsize(data.size()));
    if (!out) throw ValidationError("short write: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::vector<float> bytes_to_floats(std::string_view bytes) {
  if (bytes.size() % sizeof(float) != 0)
    throw ValidationError("float blob size not a multiple of 4");
  std::vector<float> out(bytes.size() / sizeof(float));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline std::string floats_to_bytes(const float* data, size_t count) {
  std::string out(count * sizeof(float), '\0');
  std::memcpy(out.data(), data, out.size());
  return out;
}

// All on-disk float payloads are little-endian float32.
static_assert(std::endian::native == std::endian::little,
              "on-disk tensor format assumes a little-endian host");

}  // namespace adl
