#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace nlran {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);

/// 64-byte aligned allocation. Eigen's vector kernels pick their summation
/// order from the operand address, so every buffer fed to them starts on the
/// same boundary to keep results independent of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;
std::string to_string(const Shape& shape);

/// Dense row-major array, last axis fastest. Volumetric activations use
/// N,C,D,H,W. Gradients and the requires-grad flag live on the tape
/// (see autodiff.hpp), so a Tensor is a plain value.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  /// Copy of the elements as a plain vector.
  std::vector<T> storage() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Row-major element access; index count must equal rank.
  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  /// Value of a single-element tensor.
  T item() const;

  void fill(T value);
  void reshape(Shape shape);
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  AlignedVector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

// ---------------------------------------------------------------------------
// "NLT1" container: magic, u8 dtype (1=f32, 2=f64), u8 rank, rank x u32 LE
// extents, raw LE data. Readers convert to the requested element type.

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor);

template <typename T>
Tensor<T> read_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& tensor);

template <typename T>
Tensor<T> load_tensor(const std::string& path);

}  // namespace nlran
