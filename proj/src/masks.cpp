#include "taintradar/masks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

namespace taintradar {

BinaryMask BinaryMask::block(Index height, Index width, Index top, Index left, Index h, Index w) {
  if (top < 0 || left < 0 || h < 0 || w < 0 || top + h > height || left + w > width) {
    throw ShapeError("mask block out of bounds");
  }
  BinaryMask m(height, width);
  m.bits_.block(top, left, h, w).setOnes();
  return m;
}

namespace {
void require_same_geometry(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("mask resolutions differ: " + std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                     " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
  }
}
}  // namespace

BinaryMask BinaryMask::operator&(const BinaryMask& other) const {
  require_same_geometry(*this, other);
  return BinaryMask(Bits(bits_ * other.bits_));
}

BinaryMask BinaryMask::operator|(const BinaryMask& other) const {
  require_same_geometry(*this, other);
  return BinaryMask(Bits(bits_.max(other.bits_)));
}

Tensor<float> BinaryMask::to_tensor() const {
  Tensor<float> t({height(), width()});
  for (Index y = 0; y < height(); ++y) {
    for (Index x = 0; x < width(); ++x) t[y * width() + x] = bits_(y, x) ? 1.0f : 0.0f;
  }
  return t;
}

template <typename S>
BinaryMask binarize(const Tensor<S>& map, S threshold) {
  Index h, w;
  if (map.rank() == 2) {
    h = map.dim(0);
    w = map.dim(1);
  } else if (map.rank() == 3 && map.dim(0) == 1) {
    h = map.dim(1);
    w = map.dim(2);
  } else {
    throw ShapeError("binarize needs a 2-D map, got " + shape_string(map.shape()));
  }
  BinaryMask m(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) m.set(y, x, map[y * w + x] >= threshold);
  }
  return m;
}

template <typename S>
Tensor<S> normalize_by_max(const Tensor<S>& map) {
  Tensor<S> out = map;
  const S peak = map.flat().maxCoeff();
  if (peak > S(0)) {
    out.flat() /= peak;
  } else {
    out.flat().setZero();
  }
  return out;
}

template <typename S>
std::shared_ptr<const Mat<S>> bilinear_matrix(Index in_h, Index in_w, Index out_h, Index out_w) {
  static std::mutex mu;
  static std::map<std::tuple<Index, Index, Index, Index>, std::shared_ptr<const Mat<S>>> cache;
  const auto key = std::make_tuple(in_h, in_w, out_h, out_w);
  std::lock_guard<std::mutex> lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  auto taps = [](Index in, Index out, Index o) {
    const double src = std::clamp((static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5,
                                  0.0, static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    const Index hi = std::min(lo + 1, in - 1);
    return std::make_tuple(lo, hi, src - static_cast<double>(lo));
  };
  auto m = std::make_shared<Mat<S>>(Mat<S>::Zero(out_h * out_w, in_h * in_w));
  for (Index oy = 0; oy < out_h; ++oy) {
    const auto [y0, y1, fy] = taps(in_h, out_h, oy);
    for (Index ox = 0; ox < out_w; ++ox) {
      const auto [x0, x1, fx] = taps(in_w, out_w, ox);
      const Index row = oy * out_w + ox;
      (*m)(row, y0 * in_w + x0) += static_cast<S>((1 - fy) * (1 - fx));
      (*m)(row, y0 * in_w + x1) += static_cast<S>((1 - fy) * fx);
      (*m)(row, y1 * in_w + x0) += static_cast<S>(fy * (1 - fx));
      (*m)(row, y1 * in_w + x1) += static_cast<S>(fy * fx);
    }
  }
  cache.emplace(key, m);
  return m;
}

template <typename S>
Tensor<S> upsample_bilinear(const Tensor<S>& map, Index out_h, Index out_w) {
  if (map.rank() != 2) throw ShapeError("upsample needs a 2-D map, got " + shape_string(map.shape()));
  const auto m = bilinear_matrix<S>(map.dim(0), map.dim(1), out_h, out_w);
  return Tensor<S>({out_h, out_w}, Vec<S>(*m * map.flat()));
}

template <typename S>
BinaryMask heatmap_to_mask(const Tensor<S>& heatmap, S threshold, Index out_h, Index out_w) {
  return binarize(upsample_bilinear(normalize_by_max(heatmap), out_h, out_w), threshold);
}

double iou(const BinaryMask& e, const BinaryMask& g) {
  require_same_geometry(e, g);
  const Index uni = (e | g).area();
  if (uni == 0) return 0.0;
  return static_cast<double>((e & g).area()) / static_cast<double>(uni);
}

#define TAINTRADAR_INSTANTIATE_MASKS(S)                                                        \
  template BinaryMask binarize(const Tensor<S>&, S);                                           \
  template Tensor<S> normalize_by_max(const Tensor<S>&);                                       \
  template std::shared_ptr<const Mat<S>> bilinear_matrix<S>(Index, Index, Index, Index);       \
  template Tensor<S> upsample_bilinear(const Tensor<S>&, Index, Index);                        \
  template BinaryMask heatmap_to_mask(const Tensor<S>&, S, Index, Index);

TAINTRADAR_INSTANTIATE_MASKS(float)
TAINTRADAR_INSTANTIATE_MASKS(double)

#undef TAINTRADAR_INSTANTIATE_MASKS

}  // namespace taintradar
