#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "amort/tasks.hpp"
#include "amort/tensor.hpp"

// Reader for the big-endian IDX image/label format.
namespace amort {

namespace detail {

inline uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("idx: truncated header");
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) |
         (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

}  // namespace detail

// Images (magic 0x00000803): returns [n, rows*cols] scaled to [0,1].
inline Tensor load_idx_images(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("idx: cannot open " + path);
  uint32_t magic = detail::read_be32(in);
  if (magic != 0x00000803u)
    throw std::runtime_error("idx: bad image magic in " + path);
  uint32_t n = detail::read_be32(in);
  uint32_t rows = detail::read_be32(in);
  uint32_t cols = detail::read_be32(in);
  Tensor out(int64_t(n), int64_t(rows) * int64_t(cols));
  std::vector<unsigned char> buf(size_t(rows) * size_t(cols));
  for (uint32_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!in) throw std::runtime_error("idx: truncated image data");
    for (size_t p = 0; p < buf.size(); ++p)
      out(int64_t(i), int64_t(p)) = float(buf[p]) / 255.0f;
  }
  return out;
}

// Labels (magic 0x00000801).
inline std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("idx: cannot open " + path);
  uint32_t magic = detail::read_be32(in);
  if (magic != 0x00000801u)
    throw std::runtime_error("idx: bad label magic in " + path);
  uint32_t n = detail::read_be32(in);
  std::vector<int> labels(n);
  for (uint32_t i = 0; i < n; ++i) {
    unsigned char b;
    in.read(reinterpret_cast<char*>(&b), 1);
    if (!in) throw std::runtime_error("idx: truncated label data");
    labels[i] = int(b);
  }
  return labels;
}

inline Dataset<float> load_idx_dataset(const std::string& images,
                                       const std::string& labels) {
  Dataset<float> d;
  d.x = load_idx_images(images);
  d.labels = load_idx_labels(labels);
  if (int64_t(d.labels.size()) != d.x.rows())
    throw std::runtime_error("idx: image/label count mismatch");
  return d;
}

}  // namespace amort
