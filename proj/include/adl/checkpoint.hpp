#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "adl/errors.hpp"
#include "adl/io.hpp"
#include "adl/tokenizer.hpp"

namespace adl {

using RMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Minimal safetensors read/write (float32 tensors only). A checkpoint is a
// directory holding config.json, vocab.json and model.safetensors.
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::vector<int64_t> shape;
  std::vector<float> data;
};

using TensorMap = std::map<std::string, NamedTensor>;

inline void write_safetensors(const fs::path& path, const TensorMap& tensors) {
  nlohmann::json header = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    uint64_t nbytes = uint64_t(t.data.size()) * sizeof(float);
    header[name] = {{"dtype", "F32"},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  std::string head = header.dump();
  // Pad the header to 8 bytes with spaces, as the format prescribes.
  while (head.size() % 8 != 0) head += ' ';
  std::string out;
  out.reserve(8 + head.size() + offset);
  uint64_t hlen = head.size();
  out.append(reinterpret_cast<const char*>(&hlen), 8);
  out += head;
  for (const auto& [name, t] : tensors) {
    out += floats_to_bytes(t.data.data(), t.data.size());
  }
  write_file_atomic(path, out);
}

inline TensorMap read_safetensors(const fs::path& path) {
  std::string raw = read_file(path);
  if (raw.size() < 8) throw ValidationError("safetensors file too small: " + path.string());
  uint64_t hlen = 0;
  std::memcpy(&hlen, raw.data(), 8);
  if (8 + hlen > raw.size()) throw ValidationError("safetensors header overruns file");
  nlohmann::json header = nlohmann::json::parse(raw.substr(8, hlen));
  TensorMap out;
  const char* base = raw.data() + 8 + hlen;
  size_t body = raw.size() - 8 - hlen;
  for (auto& [name, meta] : header.items()) {
    if (name == "__metadata__") continue;
    if (meta.at("dtype") != "F32")
      throw ValidationError("unsupported tensor dtype in " + path.string());
    NamedTensor t;
    t.shape = meta.at("shape").get<std::vector<int64_t>>();
    auto offs = meta.at("data_offsets").get<std::vector<uint64_t>>();
    if (offs.size() != 2 || offs[1] < offs[0] || offs[1] > body)
      throw ValidationError("bad data_offsets for tensor " + name);
    size_t count = (offs[1] - offs[0]) / sizeof(float);
    int64_t want = 1;
    for (auto s : t.shape) want *= s;
    if (want != int64_t(count)) throw ValidationError("shape/offset mismatch for tensor " + name);
    t.data.resize(count);
    std::memcpy(t.data.data(), base + offs[0], offs[1] - offs[0]);
    out.emplace(name, std::move(t));
  }
  return out;
}

inline NamedTensor tensor_from(const RMatF& m) {
  NamedTensor t;
  t.shape = {m.rows(), m.cols()};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

inline NamedTensor tensor_from(const Eigen::VectorXf& v) {
  NamedTensor t;
  t.shape = {v.size()};
  t.data.assign(v.data(), v.data() + v.size());
  return t;
}

inline RMatF matrix_from(const NamedTensor& t, const std::string& name) {
  if (t.shape.size() != 2) throw ValidationError("tensor " + name + " is not 2-D");
  RMatF m(t.shape[0], t.shape[1]);
  std::memcpy(m.data(), t.data.data(), t.data.size() * sizeof(float));
  return m;
}

inline Eigen::VectorXf vector_from(const NamedTensor& t, const std::string& name) {
  if (t.shape.size() != 1) throw ValidationError("tensor " + name + " is not 1-D");
  Eigen::VectorXf v(t.shape[0]);
  std::memcpy(v.data(), t.data.data(), t.data.size() * sizeof(float));
  return v;
}

}  // namespace adl
