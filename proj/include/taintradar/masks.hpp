#ifndef TAINTRADAR_MASKS_HPP_
#define TAINTRADAR_MASKS_HPP_

#include <cstdint>
#include <memory>

#include "taintradar/tensor.hpp"

namespace taintradar {

/// Boolean grid at input resolution.
class BinaryMask {
 public:
  using Bits = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  BinaryMask() = default;
  BinaryMask(Index height, Index width) : bits_(Bits::Zero(height, width)) {}
  explicit BinaryMask(Bits bits) : bits_(std::move(bits)) {}

  static BinaryMask full(Index height, Index width) { return BinaryMask(Bits::Ones(height, width)); }
  /// Axis-aligned block [top, top+h) x [left, left+w).
  static BinaryMask block(Index height, Index width, Index top, Index left, Index h, Index w);

  Index height() const { return bits_.rows(); }
  Index width() const { return bits_.cols(); }
  Index area() const { return bits_.template cast<Index>().sum(); }
  bool none() const { return area() == 0; }

  bool operator()(Index y, Index x) const { return bits_(y, x) != 0; }
  void set(Index y, Index x, bool on = true) { bits_(y, x) = on ? 1 : 0; }

  const Bits& bits() const { return bits_; }

  BinaryMask operator&(const BinaryMask& other) const;
  BinaryMask operator|(const BinaryMask& other) const;
  BinaryMask operator~() const { return BinaryMask(Bits((1 - bits_).eval())); }
  bool operator==(const BinaryMask& other) const {
    return height() == other.height() && width() == other.width() && (bits_ == other.bits_).all();
  }

  /// H x W tensor of 0/1 values.
  Tensor<float> to_tensor() const;

 private:
  Bits bits_;
};

/// 1 where value >= threshold. Accepts rank-2 tensors (or rank-3 with one channel).
template <typename S>
BinaryMask binarize(const Tensor<S>& map, S threshold);

/// Divides by the maximum; an identically non-positive map becomes all zeros.
template <typename S>
Tensor<S> normalize_by_max(const Tensor<S>& map);

/// Row-major (out_h*out_w) x (in_h*in_w) bilinear interpolation matrix with
/// half-pixel centres and edge clamping. Cached per geometry.
template <typename S>
std::shared_ptr<const Mat<S>> bilinear_matrix(Index in_h, Index in_w, Index out_h, Index out_w);

template <typename S>
Tensor<S> upsample_bilinear(const Tensor<S>& map, Index out_h, Index out_w);

/// Normalise, bilinearly upsample to input resolution, then threshold.
template <typename S>
BinaryMask heatmap_to_mask(const Tensor<S>& heatmap, S threshold, Index out_h, Index out_w);

/// |E n G| / |E u G|; 0 when both are empty.
double iou(const BinaryMask& e, const BinaryMask& g);

}  // namespace taintradar

#endif  // TAINTRADAR_MASKS_HPP_
