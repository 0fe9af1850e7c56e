#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace amort {

// 64-byte aligned storage keeps Eigen on one SIMD code path regardless of
// heap layout, which is what makes repeated forward passes bit-identical.
template <typename T, size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  T* allocate(size_t n) {
    if (n == 0) return nullptr;
    void* p = ::operator new(n * sizeof(T), std::align_val_t(Align));
    return static_cast<T*>(p);
  }
  void deallocate(T* p, size_t) noexcept {
    ::operator delete(p, std::align_val_t(Align));
  }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

// Dense row-major matrix of a real scalar type. Rank is fixed at two:
// a scalar is [1,1], a row vector [1,n], a column vector [n,1]. float is
// the runtime scalar; the numeric-oracle tests instantiate double.
template <typename T>
class TensorT {
 public:
  using Scalar = T;
  using Buffer = std::vector<T, AlignedAllocator<T>>;
  using EigenMatrix =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<EigenMatrix, Eigen::Aligned64>;
  using ConstMap = Eigen::Map<const EigenMatrix, Eigen::Aligned64>;

  TensorT() = default;
  TensorT(int64_t rows, int64_t cols)
      : rows_(rows), cols_(cols), data_(checked_size(rows, cols), T(0)) {}
  TensorT(int64_t rows, int64_t cols, std::vector<T> values)
      : rows_(rows), cols_(cols), data_(values.begin(), values.end()) {
    if (data_.size() != checked_size(rows, cols))
      throw std::invalid_argument("tensor: data length does not match shape");
  }
  TensorT(int64_t rows, int64_t cols, std::initializer_list<T> values)
      : TensorT(rows, cols, std::vector<T>(values)) {}

  static TensorT zeros(int64_t r, int64_t c) { return TensorT(r, c); }

  static TensorT full(int64_t r, int64_t c, T v) {
    TensorT t(r, c);
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static TensorT ones(int64_t r, int64_t c) { return full(r, c, T(1)); }

  static TensorT scalar(T v) { return full(1, 1, v); }

  template <typename Rng>
  static TensorT randn(int64_t r, int64_t c, Rng& rng, T stddev = T(1)) {
    TensorT t(r, c);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data_) v = static_cast<T>(dist(rng)) * stddev;
    return t;
  }

  template <typename Rng>
  static TensorT uniform(int64_t r, int64_t c, Rng& rng, T lo, T hi) {
    TensorT t(r, c);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  int64_t rows() const { return rows_; }
  int64_t cols() const { return cols_; }
  int64_t numel() const { return rows_ * cols_; }
  bool empty() const { return numel() == 0; }
  std::vector<int64_t> shape() const { return {rows_, cols_}; }

  T& at(int64_t r, int64_t c) { return data_[size_t(r * cols_ + c)]; }
  T at(int64_t r, int64_t c) const { return data_[size_t(r * cols_ + c)]; }
  T& operator()(int64_t r, int64_t c) { return at(r, c); }
  T operator()(int64_t r, int64_t c) const { return at(r, c); }

  T item() const {
    if (numel() != 1) throw std::logic_error("tensor: item() on non-scalar");
    return data_[0];
  }

  Buffer& data() { return data_; }
  const Buffer& data() const { return data_; }

  Map map() { return Map(data_.data(), rows_, cols_); }
  ConstMap map() const { return ConstMap(data_.data(), rows_, cols_); }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  TensorT reshaped(int64_t r, int64_t c) const {
    if (r * c != numel()) throw std::invalid_argument("tensor: bad reshape");
    TensorT out = *this;
    out.rows_ = r;
    out.cols_ = c;
    return out;
  }

  TensorT transposed() const {
    TensorT out(cols_, rows_);
    out.map() = map().transpose();
    return out;
  }

  TensorT row(int64_t r) const { return slice_rows(r, r + 1); }

  TensorT slice_rows(int64_t r0, int64_t r1) const {
    check_range(r0, r1, rows_);
    TensorT out(r1 - r0, cols_);
    std::copy(data_.begin() + r0 * cols_, data_.begin() + r1 * cols_,
              out.data_.begin());
    return out;
  }

  TensorT slice_cols(int64_t c0, int64_t c1) const {
    check_range(c0, c1, cols_);
    TensorT out(rows_, c1 - c0);
    for (int64_t r = 0; r < rows_; ++r)
      std::copy(data_.begin() + r * cols_ + c0, data_.begin() + r * cols_ + c1,
                out.data_.begin() + r * out.cols_);
    return out;
  }

  void add_inplace(const TensorT& other, T scale = T(1)) {
    require_same_shape(other);
    map() += scale * other.map();
  }

  T squared_norm() const {
    double s = 0;
    for (T v : data_) s += double(v) * double(v);
    return T(s);
  }

  bool same_shape(const TensorT& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  void require_same_shape(const TensorT& o) const {
    if (!same_shape(o)) throw std::invalid_argument("tensor: shape mismatch");
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(rows_, cols_);
    for (int64_t i = 0; i < numel(); ++i)
      out.data()[size_t(i)] = static_cast<U>(data_[size_t(i)]);
    return out;
  }

 private:
  static size_t checked_size(int64_t r, int64_t c) {
    if (r < 0 || c < 0) throw std::invalid_argument("tensor: negative extent");
    return size_t(r) * size_t(c);
  }
  static void check_range(int64_t a, int64_t b, int64_t n) {
    if (a < 0 || b < a || b > n)
      throw std::out_of_range("tensor: slice out of range");
  }

  int64_t rows_ = 0;
  int64_t cols_ = 0;
  Buffer data_;
};

using Tensor = TensorT<float>;

using Rng = std::mt19937_64;

// Derives an independent stream from a base seed; used wherever one
// config-level seed has to fan out into per-task or per-component streams.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace amort
