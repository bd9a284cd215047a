#pragma once

// Tensor blob format: one JSON header line {"shape":[...],"dtype":"f64"|"f32"}
// followed by the flat array as little-endian IEEE floats.

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "crosstrack/tensor.hpp"

namespace crosstrack {

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are little-endian; big-endian hosts unsupported");

template <typename S>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<S, double>)
    return "f64";
  else
    return "f32";
}

template <typename S>
void save_tensor(const std::filesystem::path& path, const Tensor<S>& t) {
  nlohmann::json header;
  header["shape"] = t.shape();
  header["dtype"] = dtype_name<S>();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail<IoError>("cannot open ", path.string(), " for writing");
  out << header.dump() << "\n";
  const auto& d = t.values();
  out.write(reinterpret_cast<const char*>(d.data()),
            std::streamsize(sizeof(S) * size_t(d.size())));
  if (!out) fail<IoError>("write failed: ", path.string());
}

template <typename S>
Tensor<S> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail<IoError>("cannot open ", path.string());
  std::string line;
  if (!std::getline(in, line)) fail<IoError>("missing header line: ", path.string());
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.contains("shape") || !header.contains("dtype"))
    fail<IoError>("malformed tensor header in ", path.string());
  const std::string dtype = header["dtype"].get<std::string>();
  if (dtype != dtype_name<S>())
    fail<IoError>("dtype mismatch in ", path.string(), ": file is ", dtype,
                  ", runtime expects ", dtype_name<S>());
  Shape shape = header["shape"].get<Shape>();
  const long n = numel(shape);
  FlatArray<S> d(n);
  in.read(reinterpret_cast<char*>(d.data()), std::streamsize(sizeof(S) * size_t(n)));
  if (in.gcount() != std::streamsize(sizeof(S) * size_t(n)))
    fail<IoError>("truncated tensor data in ", path.string());
  return Tensor<S>(std::move(shape), std::move(d));
}

}  // namespace crosstrack
