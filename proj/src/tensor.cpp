#include "nlran/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "nlran/errors.hpp"

namespace nlran {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  check_extents(shape_);
  if (numel(shape_) != data_.size()) {
    throw ShapeError("shape " + to_string(shape_) + " needs " + std::to_string(numel(shape_)) +
                     " values, got " + std::to_string(data_.size()));
  }
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " != tensor rank " +
                     std::to_string(shape_.size()));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw ShapeError("index out of range on axis " + std::to_string(axis));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw RankError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  check_extents(shape);
  if (numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  shape_ = std::move(shape);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  Tensor copy = *this;
  copy.reshape(std::move(shape));
  return copy;
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

// ---------------------------------------------------------------------------

namespace {

constexpr char kTensorMagic[4] = {'N', 'L', 'T', '1'};

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  }
}

template <typename U>
void put(std::ostream& out, U v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw FormatError("tensor container truncated");
  return to_little(v);
}

template <typename Stored, typename T>
std::vector<T> read_values(std::istream& in, std::size_t count) {
  std::vector<T> out(count);
  if constexpr (std::is_same_v<Stored, T> && std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (!in) throw FormatError("tensor container truncated");
  } else {
    for (auto& v : out) v = static_cast<T>(get<Stored>(in));
  }
  return out;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor) {
  if (tensor.rank() > 255) throw FormatError("tensor rank exceeds container limit");
  out.write(kTensorMagic, 4);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
  for (auto e : tensor.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw FormatError("extent exceeds u32");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  }
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(T)));
  } else {
    for (auto v : tensor.values()) put<T>(out, v);
  }
  if (!out) throw FormatError("failed writing tensor container");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in) throw FormatError("tensor container truncated");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic (expected NLT1)");
  auto code = get<std::uint8_t>(in);
  auto rank = get<std::uint8_t>(in);
  if (rank == 0) throw FormatError("tensor container with rank 0");
  Shape shape(rank);
  for (auto& e : shape) {
    e = get<std::uint32_t>(in);
    if (e == 0) throw FormatError("tensor container with zero extent");
  }
  const auto count = numel(shape);
  switch (static_cast<DType>(code)) {
    case DType::F32:
      return Tensor<T>(std::move(shape), read_values<float, T>(in, count));
    case DType::F64:
      return Tensor<T>(std::move(shape), read_values<double, T>(in, count));
  }
  throw FormatError("unknown tensor dtype code " + std::to_string(code));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_tensor(out, tensor);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_tensor<T>(in);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);
template void save_tensor(const std::string&, const Tensor<float>&);
template void save_tensor(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::string&);
template Tensor<double> load_tensor<double>(const std::string&);

}  // namespace nlran
