#ifndef TAINTRADAR_TENSOR_HPP_
#define TAINTRADAR_TENSOR_HPP_

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace taintradar {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<Mat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Mat<S>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Image tensors use NCHW (or CHW for a single image).
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vec<S>::Constant(shape_size(shape_), fill);
  }
  Tensor(Shape shape, Vec<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  /// Rank-1 tensor holding `values`.
  static Tensor from(std::initializer_list<S> values) {
    Tensor t(Shape{static_cast<Index>(values.size())});
    Index i = 0;
    for (S v : values) t.data_[i++] = v;
    return t;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), S(1)); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vec<S>& flat() { return data_; }
  const Vec<S>& flat() const { return data_; }
  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](Index i) { return data_[i]; }
  S operator[](Index i) const { return data_[i]; }

  /// Element access for rank-3 CHW tensors.
  S& at(Index c, Index h, Index w) { return data_[(c * shape_[1] + h) * shape_[2] + w]; }
  S at(Index c, Index h, Index w) const { return data_[(c * shape_[1] + h) * shape_[2] + w]; }

  MatMap<S> matrix(Index rows, Index cols) {
    if (rows * cols != size()) throw ShapeError("matrix view size mismatch");
    return MatMap<S>(data_.data(), rows, cols);
  }
  ConstMatMap<S> matrix(Index rows, Index cols) const {
    if (rows * cols != size()) throw ShapeError("matrix view size mismatch");
    return ConstMatMap<S>(data_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, data_.template cast<T>().eval());
  }

  bool all_finite() const { return data_.allFinite(); }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] <= 0) {
        throw ShapeError("dimension " + std::to_string(i) + " must be positive in shape " +
                         shape_string(shape));
      }
    }
  }

  Shape shape_;
  Vec<S> data_;
};

// RT1 raw tensor files: "RT1\n", u32 rank, u32 dims, f32 payload, all little-endian.
void write_rt1(const std::filesystem::path& path, const Tensor<float>& tensor);
Tensor<float> read_rt1(const std::filesystem::path& path);
std::vector<char> encode_rt1(const Tensor<float>& tensor);
Tensor<float> decode_rt1(const std::vector<char>& bytes);

}  // namespace taintradar

#endif  // TAINTRADAR_TENSOR_HPP_
