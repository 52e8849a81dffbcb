#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace preftok {

// All recoverable failures (bad input files, shape mismatches, invalid
// configuration) surface as this exception type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Modality { kVisual, kText };

inline const char* modality_name(Modality m) {
  return m == Modality::kVisual ? "v" : "t";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "v") return Modality::kVisual;
  if (s == "t") return Modality::kText;
  throw Error("unknown modality '" + s + "'");
}

// Dense row-major matrix with value semantics.
template <typename Real>
class Matrix {
 public:
  using value_type = Real;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<Real> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
      throw Error("matrix value count " + std::to_string(data_.size()) +
                  " does not match shape " + std::to_string(rows_) + "x" +
                  std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<Real> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const Real> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename Other>
  Matrix<Other> cast() const {
    Matrix<Other> out(rows_, cols_);
    for (std::size_t k = 0; k < data_.size(); ++k) {
      out.storage()[k] = static_cast<Other>(data_[k]);
    }
    return out;
  }

  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

template <typename Real>
bool all_finite(std::span<const Real> v) {
  return std::all_of(v.begin(), v.end(),
                     [](Real x) { return std::isfinite(x); });
}

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    acc += static_cast<double>(a[k]) * static_cast<double>(b[k]);
  }
  return acc;
}

template <typename A, typename B>
double squared_distance(std::span<const A> a, std::span<const B> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    acc += diff * diff;
  }
  return acc;
}

template <typename Real>
double squared_norm(std::span<const Real> a) {
  return dot(a, a);
}

// FNV-1a over the raw bytes of a buffer; used for frozen-parameter checks.
inline std::uint64_t fnv1a(const void* data, std::size_t bytes,
                           std::uint64_t seed = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t k = 0; k < bytes; ++k) {
    h ^= p[k];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename Real>
std::uint64_t checksum(const Matrix<Real>& m,
                       std::uint64_t seed = 1469598103934665603ull) {
  return fnv1a(m.storage().data(), m.size() * sizeof(Real), seed);
}

}  // namespace preftok
