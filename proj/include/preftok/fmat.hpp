#pragma once

// FMAT v1: an ASCII header line "FMAT v1 <rows> <cols>\n" followed by
// rows*cols little-endian IEEE-754 binary32 values in row-major order.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "preftok/matrix.hpp"

namespace preftok {

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) |
           (v >> 24);
  }
}

}  // namespace detail

inline std::string encode_fmat(const Matrix<float>& m) {
  std::string out = "FMAT v1 " + std::to_string(m.rows()) + " " +
                    std::to_string(m.cols()) + "\n";
  const std::size_t header = out.size();
  out.resize(header + m.size() * 4);
  for (std::size_t k = 0; k < m.size(); ++k) {
    const auto bits =
        detail::to_little_endian(std::bit_cast<std::uint32_t>(m.storage()[k]));
    std::memcpy(out.data() + header + 4 * k, &bits, 4);
  }
  return out;
}

inline Matrix<float> decode_fmat(const std::string& bytes,
                                 const std::string& origin = "<memory>") {
  const auto newline = bytes.find('\n');
  if (newline == std::string::npos) {
    throw Error(origin + ": missing FMAT header line");
  }
  std::istringstream header(bytes.substr(0, newline));
  std::string magic, version;
  long long rows = -1, cols = -1;
  header >> magic >> version >> rows >> cols;
  std::string trailing;
  if (!header || magic != "FMAT" || version != "v1" || rows < 0 || cols < 0 ||
      (header >> trailing)) {
    throw Error(origin + ": malformed FMAT header '" +
                bytes.substr(0, newline) + "'");
  }
  const std::size_t expected =
      static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * 4;
  const std::size_t payload = bytes.size() - newline - 1;
  if (payload < expected) {
    throw Error(origin + ": truncated FMAT payload, expected " +
                std::to_string(expected) + " bytes, found " +
                std::to_string(payload));
  }
  if (payload > expected) {
    throw Error(origin + ": FMAT payload has " +
                std::to_string(payload - expected) + " trailing bytes");
  }
  Matrix<float> m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  const char* src = bytes.data() + newline + 1;
  for (std::size_t k = 0; k < m.size(); ++k) {
    std::uint32_t bits;
    std::memcpy(&bits, src + 4 * k, 4);
    const float v = std::bit_cast<float>(detail::to_little_endian(bits));
    if (!std::isfinite(v)) {
      throw Error(origin + ": non-finite value at row " +
                  std::to_string(k / m.cols()) + ", column " +
                  std::to_string(k % m.cols()));
    }
    m.storage()[k] = v;
  }
  return m;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

inline Matrix<float> read_fmat(const std::filesystem::path& path) {
  return decode_fmat(read_file_bytes(path), path.string());
}

inline void write_fmat(const std::filesystem::path& path, const Matrix<float>& m) {
  write_file_bytes(path, encode_fmat(m));
}

template <typename Real>
void write_fmat(const std::filesystem::path& path, const Matrix<Real>& m) {
  write_fmat(path, m.template cast<float>());
}

}  // namespace preftok
