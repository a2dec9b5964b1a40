#pragma once

// Binary I/O helpers and the named-tensor flat-file block used by
// checkpoints: versioned header, then (name, shape, raw little-endian f32
// values) per entry. Only little-endian hosts are supported.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mmae/common.hpp"
#include "mmae/nn/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little-endian");

namespace mmae::nn::io {

template <class T>
inline void put_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
inline T get_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of stream");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  uint32_t n = get_pod<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("unexpected end of stream");
  return s;
}

template <class T>
inline void put_vec(std::ostream& os, const std::vector<T>& v) {
  put_pod<uint64_t>(os, static_cast<uint64_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
inline std::vector<T> get_vec(std::istream& is) {
  uint64_t n = get_pod<uint64_t>(is);
  std::vector<T> v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(T)));
  if (!is) throw IoError("unexpected end of stream");
  return v;
}

// one tensor entry: name, ndim, dims, values
template <class T>
inline void put_tensor(std::ostream& os, const std::string& name,
                       const Tensor<T>& t) {
  put_string(os, name);
  put_pod<uint32_t>(os, static_cast<uint32_t>(t.shape().size()));
  for (int64_t d : t.shape()) put_pod<int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <class T>
inline std::pair<std::string, Tensor<T>> get_tensor(std::istream& is) {
  std::string name = get_string(is);
  uint32_t nd = get_pod<uint32_t>(is);
  Shape shape(nd);
  for (uint32_t i = 0; i < nd; ++i) shape[i] = get_pod<int64_t>(is);
  auto t = Tensor<T>::zeros(shape);
  is.read(reinterpret_cast<char*>(t.data().data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!is) throw IoError("unexpected end of stream");
  return {name, t};
}

template <class T>
inline void put_named_tensors(
    std::ostream& os,
    const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  put_pod<uint64_t>(os, static_cast<uint64_t>(tensors.size()));
  for (const auto& [name, t] : tensors) put_tensor(os, name, t);
}

template <class T>
inline std::vector<std::pair<std::string, Tensor<T>>> get_named_tensors(
    std::istream& is) {
  uint64_t n = get_pod<uint64_t>(is);
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(n);
  for (uint64_t i = 0; i < n; ++i) out.push_back(get_tensor<T>(is));
  return out;
}

}  // namespace mmae::nn::io
