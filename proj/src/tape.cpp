#include "taintradar/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace taintradar {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kDense: return "dense";
    case OpKind::kRelu: return "relu";
    case OpKind::kMaxPool2d: return "maxpool2d";
    case OpKind::kFlatten: return "flatten";
    case OpKind::kReshape: return "reshape";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAffine: return "affine";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kLog: return "log";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kMaxAll: return "max_all";
    case OpKind::kDivByScalar: return "div_by_scalar";
    case OpKind::kSquare: return "square";
    case OpKind::kAbs: return "abs";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kPick: return "pick";
    case OpKind::kLinearMap: return "linear_map";
    case OpKind::kEmbed: return "embed";
    case OpKind::kConcat: return "concat";
  }
  return "?";
}

Index conv_output_size(Index in, Index kernel, Index stride, Index padding) {
  if (stride <= 0) throw std::invalid_argument("unsupported stride " + std::to_string(stride));
  if (padding < 0) throw std::invalid_argument("unsupported padding " + std::to_string(padding));
  const Index span = in + 2 * padding - kernel;
  if (span < 0) {
    throw ShapeError("kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * padding));
  }
  return span / stride + 1;
}

namespace {

[[noreturn]] void mismatch(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

void require_same_shape(OpKind kind, const Shape& a, const Shape& b) {
  if (a != b) mismatch(kind, "operand shapes " + shape_string(a) + " and " + shape_string(b) + " differ");
}

// Image geometry of an NCHW (or CHW) tensor.
struct Geometry {
  Index n, c, h, w;
  bool batched;
};

Geometry image_geometry(OpKind kind, const Shape& s) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  mismatch(kind, "expected rank 3 or 4 image tensor, got " + shape_string(s));
}

template <typename S>
void im2col(const S* img, Index channels, Index height, Index width, Index kh, Index kw,
            Index stride, Index pad, Index out_h, Index out_w, S* cols) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        S* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ki;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kj;
            row[oy * out_w + ox] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                       ? img[(c * height + iy) * width + ix]
                                       : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* cols, Index channels, Index height, Index width, Index kh, Index kw,
            Index stride, Index pad, Index out_h, Index out_w, S* img) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        const S* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= height) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kj;
            if (ix < 0 || ix >= width) continue;
            img[(c * height + iy) * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

template <typename S>
Index row_length(OpKind kind, const Tensor<S>& x) {
  if (x.rank() < 1) mismatch(kind, "empty operand");
  return x.shape().back();
}

template <typename S>
Tensor<S> forward(const Node<S>& node, const std::vector<const Tensor<S>*>& in,
                  std::vector<Index>* argmax) {
  const OpParams<S>& p = node.params;
  const OpKind kind = node.kind;
  switch (kind) {
    case OpKind::kLeaf:
      return node.value;

    case OpKind::kConv2d: {
      const Tensor<S>& x = *in[0];
      const Tensor<S>& w = *in[1];
      const Tensor<S>& b = *in[2];
      const Geometry g = image_geometry(kind, x.shape());
      if (w.rank() != 4) mismatch(kind, "kernel must be rank 4, got " + shape_string(w.shape()));
      if (w.dim(1) != g.c) {
        mismatch(kind, "input channels " + std::to_string(g.c) + " do not match kernel input channels " +
                           std::to_string(w.dim(1)));
      }
      const Index oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      if (b.rank() != 1 || b.dim(0) != oc) mismatch(kind, "bias length must equal output channels");
      const Index oh = conv_output_size(g.h, kh, p.stride, p.padding);
      const Index ow = conv_output_size(g.w, kw, p.stride, p.padding);
      Shape out_shape = g.batched ? Shape{g.n, oc, oh, ow} : Shape{oc, oh, ow};
      Tensor<S> out(out_shape);
      const Index ckk = g.c * kh * kw;
      Mat<S> cols(ckk, oh * ow);
      const ConstMatMap<S> wm(w.data(), oc, ckk);
      for (Index n = 0; n < g.n; ++n) {
        im2col(x.data() + n * g.c * g.h * g.w, g.c, g.h, g.w, kh, kw, p.stride, p.padding, oh, ow,
               cols.data());
        MatMap<S> om(out.data() + n * oc * oh * ow, oc, oh * ow);
        om.noalias() = wm * cols;
        om.colwise() += b.flat();
      }
      return out;
    }

    case OpKind::kDense: {
      const Tensor<S>& x = *in[0];
      const Tensor<S>& w = *in[1];
      const Tensor<S>& b = *in[2];
      if (w.rank() != 2) mismatch(kind, "weight must be rank 2");
      const Index features = w.dim(1), outputs = w.dim(0);
      if (x.rank() > 2 || x.shape().back() != features) {
        mismatch(kind, "input " + shape_string(x.shape()) + " does not match weight input dimension " +
                           std::to_string(features));
      }
      if (b.rank() != 1 || b.dim(0) != outputs) mismatch(kind, "bias length must equal outputs");
      const Index rows = x.rank() == 2 ? x.dim(0) : 1;
      Tensor<S> out(x.rank() == 2 ? Shape{rows, outputs} : Shape{outputs});
      MatMap<S> om(out.data(), rows, outputs);
      om.noalias() = x.matrix(rows, features) * w.matrix(outputs, features).transpose();
      om.rowwise() += b.flat().transpose();
      return out;
    }

    case OpKind::kRelu: {
      Tensor<S> out = *in[0];
      out.flat() = out.flat().cwiseMax(S(0));
      return out;
    }

    case OpKind::kMaxPool2d: {
      const Tensor<S>& x = *in[0];
      const Geometry g = image_geometry(kind, x.shape());
      const Index oh = conv_output_size(g.h, p.kernel, p.stride, 0);
      const Index ow = conv_output_size(g.w, p.kernel, p.stride, 0);
      Tensor<S> out(g.batched ? Shape{g.n, g.c, oh, ow} : Shape{g.c, oh, ow});
      argmax->assign(static_cast<std::size_t>(out.size()), 0);
      Index o = 0;
      for (Index nc = 0; nc < g.n * g.c; ++nc) {
        const Index base = nc * g.h * g.w;
        for (Index oy = 0; oy < oh; ++oy) {
          for (Index ox = 0; ox < ow; ++ox, ++o) {
            Index best = base + (oy * p.stride) * g.w + ox * p.stride;
            for (Index ky = 0; ky < p.kernel; ++ky) {
              for (Index kx = 0; kx < p.kernel; ++kx) {
                const Index idx = base + (oy * p.stride + ky) * g.w + ox * p.stride + kx;
                if (x[idx] > x[best]) best = idx;  // first maximum wins ties
              }
            }
            out[o] = x[best];
            (*argmax)[static_cast<std::size_t>(o)] = best;
          }
        }
      }
      return out;
    }

    case OpKind::kFlatten: {
      const Tensor<S>& x = *in[0];
      if (x.rank() == 4) return x.reshaped({x.dim(0), x.size() / x.dim(0)});
      return x.reshaped({x.size()});
    }

    case OpKind::kReshape:
      return in[0]->reshaped(p.shape);

    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      require_same_shape(kind, in[0]->shape(), in[1]->shape());
      Tensor<S> out = *in[0];
      if (kind == OpKind::kAdd) out.flat() += in[1]->flat();
      if (kind == OpKind::kSub) out.flat() -= in[1]->flat();
      if (kind == OpKind::kMul) out.flat().array() *= in[1]->flat().array();
      return out;
    }

    case OpKind::kScale: {
      Tensor<S> out = *in[0];
      out.flat() *= p.a;
      return out;
    }

    case OpKind::kAffine: {
      Tensor<S> out = *in[0];
      out.flat() = (out.flat().array() * p.a + p.b).matrix();
      return out;
    }

    case OpKind::kSum:
      return Tensor<S>({1}, Vec<S>::Constant(1, in[0]->flat().sum()));

    case OpKind::kMean:
      return Tensor<S>({1}, Vec<S>::Constant(1, in[0]->flat().mean()));

    case OpKind::kSoftmax:
    case OpKind::kLogSoftmax: {
      const Tensor<S>& x = *in[0];
      if (!(p.a > S(0))) throw std::invalid_argument("softmax temperature must be positive");
      const Index m = row_length(kind, x);
      if (m < 2) mismatch(kind, "need at least 2 classes");
      const Index rows = x.size() / m;
      Tensor<S> out(x.shape());
      for (Index r = 0; r < rows; ++r) {
        const auto z = x.flat().segment(r * m, m).array() / p.a;
        const S zmax = z.maxCoeff();
        const auto shifted = (z - zmax).eval();
        const S lse = std::log(shifted.exp().sum());
        if (kind == OpKind::kSoftmax) {
          out.flat().segment(r * m, m) = (shifted - lse).exp().matrix();
        } else {
          out.flat().segment(r * m, m) = (shifted - lse).matrix();
        }
      }
      return out;
    }

    case OpKind::kLog: {
      Tensor<S> out = *in[0];
      out.flat() = out.flat().array().log().matrix();
      return out;
    }

    case OpKind::kSigmoid: {
      Tensor<S> out = *in[0];
      for (Index i = 0; i < out.size(); ++i) {
        const S v = out[i];
        out[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
      }
      return out;
    }

    case OpKind::kMatmul: {
      const Tensor<S>& a = *in[0];
      const Tensor<S>& b = *in[1];
      if (a.rank() != 2) mismatch(kind, "left operand must be rank 2");
      const Index r = a.dim(0), k = a.dim(1);
      const Index c = b.rank() == 1 ? 1 : b.dim(1);
      if (b.rank() > 2 || b.dim(0) != k) {
        mismatch(kind, "inner dimensions " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
      }
      Tensor<S> out(b.rank() == 1 ? Shape{r} : Shape{r, c});
      out.matrix(r, c).noalias() = a.matrix(r, k) * b.matrix(k, c);
      return out;
    }

    case OpKind::kMaxAll: {
      const Tensor<S>& x = *in[0];
      Index best = 0;
      for (Index i = 1; i < x.size(); ++i) {
        if (x[i] > x[best]) best = i;
      }
      argmax->assign(1, best);
      return Tensor<S>({1}, Vec<S>::Constant(1, x[best]));
    }

    case OpKind::kDivByScalar: {
      if (in[1]->size() != 1) mismatch(kind, "denominator must have one element");
      Tensor<S> out = *in[0];
      out.flat() /= (*in[1])[0];
      return out;
    }

    case OpKind::kSquare: {
      Tensor<S> out = *in[0];
      out.flat() = out.flat().array().square().matrix();
      return out;
    }

    case OpKind::kAbs: {
      Tensor<S> out = *in[0];
      out.flat() = out.flat().cwiseAbs();
      return out;
    }

    case OpKind::kSqrt: {
      Tensor<S> out = *in[0];
      out.flat() = (out.flat().array() + p.b).sqrt().matrix();
      return out;
    }

    case OpKind::kPick: {
      const Tensor<S>& x = *in[0];
      if (p.indices.empty()) mismatch(kind, "no indices");
      Tensor<S> out({static_cast<Index>(p.indices.size())});
      for (std::size_t i = 0; i < p.indices.size(); ++i) {
        const Index idx = p.indices[i];
        if (idx < 0 || idx >= x.size()) mismatch(kind, "index " + std::to_string(idx) + " out of range");
        out[static_cast<Index>(i)] = x[idx];
      }
      return out;
    }

    case OpKind::kLinearMap: {
      const Tensor<S>& x = *in[0];
      const Mat<S>& m = *p.matrix;
      if (m.cols() != x.size()) mismatch(kind, "matrix columns do not match operand size");
      if (shape_size(p.shape) != m.rows()) mismatch(kind, "matrix rows do not match output shape");
      Tensor<S> out(p.shape);
      out.flat().noalias() = m * x.flat();
      return out;
    }

    case OpKind::kEmbed: {
      const Tensor<S>& x = *in[0];
      if (x.rank() != 3 || p.shape.size() != 3 || p.shape[0] != x.dim(0)) {
        mismatch(kind, "embed needs CHW operand and canvas with equal channels");
      }
      if (p.offset_h < 0 || p.offset_w < 0 || p.offset_h + x.dim(1) > p.shape[1] ||
          p.offset_w + x.dim(2) > p.shape[2]) {
        mismatch(kind, "placement out of bounds");
      }
      Tensor<S> out(p.shape);
      for (Index c = 0; c < x.dim(0); ++c) {
        for (Index y = 0; y < x.dim(1); ++y) {
          for (Index xx = 0; xx < x.dim(2); ++xx) {
            out.at(c, y + p.offset_h, xx + p.offset_w) = x.at(c, y, xx);
          }
        }
      }
      return out;
    }

    case OpKind::kConcat: {
      const Shape tail(in[0]->shape().begin() + 1, in[0]->shape().end());
      Index rows = 0;
      for (const Tensor<S>* part : in) {
        if (part->rank() != static_cast<Index>(tail.size()) + 1 ||
            !std::equal(tail.begin(), tail.end(), part->shape().begin() + 1)) {
          mismatch(kind, "trailing dimensions differ: " + shape_string(part->shape()));
        }
        rows += part->dim(0);
      }
      Shape shape{rows};
      shape.insert(shape.end(), tail.begin(), tail.end());
      Tensor<S> out(shape);
      Index pos = 0;
      for (const Tensor<S>* part : in) {
        out.flat().segment(pos, part->size()) = part->flat();
        pos += part->size();
      }
      return out;
    }
  }
  mismatch(kind, "unknown operation");
}

template <typename S>
void accumulate(Tensor<S>& slot, const Tensor<S>& delta) {
  if (slot.empty()) {
    slot = delta;
  } else {
    slot.flat() += delta.flat();
  }
}

template <typename S>
void accumulate(Tensor<S>& slot, const Shape& shape, const Vec<S>& delta) {
  if (slot.empty()) {
    slot = Tensor<S>(shape, delta);
  } else {
    slot.flat() += delta;
  }
}

template <typename S>
void propagate(const Tape<S>& tape, const Node<S>& node, const Tensor<S>& g,
               std::vector<Tensor<S>>& grads) {
  const OpParams<S>& p = node.params;
  auto input = [&](std::size_t i) -> const Tensor<S>& { return tape.value(node.inputs[i]); };
  auto slot = [&](std::size_t i) -> Tensor<S>& { return grads[node.inputs[i].index]; };

  switch (node.kind) {
    case OpKind::kLeaf:
      return;

    case OpKind::kConv2d: {
      const Tensor<S>& x = input(0);
      const Tensor<S>& w = input(1);
      const Geometry geo = image_geometry(node.kind, x.shape());
      const Index oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const Index oh = node.value.shape()[node.value.rank() - 2];
      const Index ow = node.value.shape().back();
      const Index ckk = geo.c * kh * kw;
      Mat<S> cols(ckk, oh * ow);
      Mat<S> dcols(ckk, oh * ow);
      Mat<S> dw = Mat<S>::Zero(oc, ckk);
      Vec<S> db = Vec<S>::Zero(oc);
      Vec<S> dx = Vec<S>::Zero(x.size());
      const ConstMatMap<S> wm(w.data(), oc, ckk);
      for (Index n = 0; n < geo.n; ++n) {
        const ConstMatMap<S> gm(g.data() + n * oc * oh * ow, oc, oh * ow);
        im2col(x.data() + n * geo.c * geo.h * geo.w, geo.c, geo.h, geo.w, kh, kw, p.stride, p.padding,
               oh, ow, cols.data());
        dw.noalias() += gm * cols.transpose();
        db += gm.rowwise().sum();
        dcols.noalias() = wm.transpose() * gm;
        col2im(dcols.data(), geo.c, geo.h, geo.w, kh, kw, p.stride, p.padding, oh, ow,
               dx.data() + n * geo.c * geo.h * geo.w);
      }
      accumulate(slot(0), x.shape(), dx);
      accumulate(slot(1), w.shape(), Vec<S>(Eigen::Map<const Vec<S>>(dw.data(), dw.size())));
      accumulate(slot(2), input(2).shape(), db);
      return;
    }

    case OpKind::kDense: {
      const Tensor<S>& x = input(0);
      const Tensor<S>& w = input(1);
      const Index outputs = w.dim(0), features = w.dim(1);
      const Index rows = x.rank() == 2 ? x.dim(0) : 1;
      const ConstMatMap<S> gm(g.data(), rows, outputs);
      Mat<S> dx = gm * w.matrix(outputs, features);
      Mat<S> dw = gm.transpose() * x.matrix(rows, features);
      Vec<S> db = gm.colwise().sum().transpose();
      accumulate(slot(0), x.shape(), Vec<S>(Eigen::Map<const Vec<S>>(dx.data(), dx.size())));
      accumulate(slot(1), w.shape(), Vec<S>(Eigen::Map<const Vec<S>>(dw.data(), dw.size())));
      accumulate(slot(2), input(2).shape(), db);
      return;
    }

    case OpKind::kRelu: {
      // Subgradient 0 at exactly 0.
      const Tensor<S>& x = input(0);
      Vec<S> dx = (x.flat().array() > S(0)).select(g.flat(), S(0));
      accumulate(slot(0), x.shape(), dx);
      return;
    }

    case OpKind::kMaxPool2d: {
      const Tensor<S>& x = input(0);
      Vec<S> dx = Vec<S>::Zero(x.size());
      for (Index o = 0; o < g.size(); ++o) dx[node.argmax[static_cast<std::size_t>(o)]] += g[o];
      accumulate(slot(0), x.shape(), dx);
      return;
    }

    case OpKind::kFlatten:
    case OpKind::kReshape:
      accumulate(slot(0), input(0).shape(), g.flat());
      return;

    case OpKind::kAdd:
      accumulate(slot(0), g);
      accumulate(slot(1), g);
      return;

    case OpKind::kSub:
      accumulate(slot(0), g);
      accumulate(slot(1), g.shape(), Vec<S>(-g.flat()));
      return;

    case OpKind::kMul:
      accumulate(slot(0), g.shape(), Vec<S>(g.flat().cwiseProduct(input(1).flat())));
      accumulate(slot(1), g.shape(), Vec<S>(g.flat().cwiseProduct(input(0).flat())));
      return;

    case OpKind::kScale:
    case OpKind::kAffine:
      accumulate(slot(0), g.shape(), Vec<S>(g.flat() * p.a));
      return;

    case OpKind::kSum:
      accumulate(slot(0), input(0).shape(), Vec<S>(Vec<S>::Constant(input(0).size(), g[0])));
      return;

    case OpKind::kMean: {
      const Index n = input(0).size();
      accumulate(slot(0), input(0).shape(), Vec<S>(Vec<S>::Constant(n, g[0] / static_cast<S>(n))));
      return;
    }

    case OpKind::kSoftmax: {
      // dz = y * (g - <g, y>) / T per row.
      const Tensor<S>& y = node.value;
      const Index m = y.shape().back();
      Vec<S> dx(y.size());
      for (Index r = 0; r < y.size() / m; ++r) {
        const auto yr = y.flat().segment(r * m, m);
        const auto gr = g.flat().segment(r * m, m);
        const S dot = yr.dot(gr);
        dx.segment(r * m, m) = (yr.array() * (gr.array() - dot) / p.a).matrix();
      }
      accumulate(slot(0), y.shape(), dx);
      return;
    }

    case OpKind::kLogSoftmax: {
      // dz = (g - softmax * sum(g)) / T per row.
      const Tensor<S>& y = node.value;
      const Index m = y.shape().back();
      Vec<S> dx(y.size());
      for (Index r = 0; r < y.size() / m; ++r) {
        const auto gr = g.flat().segment(r * m, m);
        const S total = gr.sum();
        dx.segment(r * m, m) =
            ((gr.array() - y.flat().segment(r * m, m).array().exp() * total) / p.a).matrix();
      }
      accumulate(slot(0), y.shape(), dx);
      return;
    }

    case OpKind::kLog:
      accumulate(slot(0), g.shape(), Vec<S>(g.flat().cwiseQuotient(input(0).flat())));
      return;

    case OpKind::kSigmoid: {
      const auto& y = node.value.flat().array();
      accumulate(slot(0), g.shape(), Vec<S>((g.flat().array() * y * (S(1) - y)).matrix()));
      return;
    }

    case OpKind::kMatmul: {
      const Tensor<S>& a = input(0);
      const Tensor<S>& b = input(1);
      const Index r = a.dim(0), k = a.dim(1);
      const Index c = b.rank() == 1 ? 1 : b.dim(1);
      const ConstMatMap<S> gm(g.data(), r, c);
      Mat<S> da = gm * b.matrix(k, c).transpose();
      Mat<S> dbm = a.matrix(r, k).transpose() * gm;
      accumulate(slot(0), a.shape(), Vec<S>(Eigen::Map<const Vec<S>>(da.data(), da.size())));
      accumulate(slot(1), b.shape(), Vec<S>(Eigen::Map<const Vec<S>>(dbm.data(), dbm.size())));
      return;
    }

    case OpKind::kMaxAll: {
      Vec<S> dx = Vec<S>::Zero(input(0).size());
      dx[node.argmax[0]] = g[0];
      accumulate(slot(0), input(0).shape(), dx);
      return;
    }

    case OpKind::kDivByScalar: {
      const S d = input(1)[0];
      accumulate(slot(0), g.shape(), Vec<S>(g.flat() / d));
      const S dd = -g.flat().dot(input(0).flat()) / (d * d);
      accumulate(slot(1), input(1).shape(), Vec<S>(Vec<S>::Constant(1, dd)));
      return;
    }

    case OpKind::kSquare:
      accumulate(slot(0), g.shape(), Vec<S>(S(2) * g.flat().cwiseProduct(input(0).flat())));
      return;

    case OpKind::kAbs: {
      const auto& x = input(0).flat().array();
      const Vec<S> sign = ((x > S(0)).template cast<S>() - (x < S(0)).template cast<S>()).matrix();
      accumulate(slot(0), g.shape(), Vec<S>(g.flat().cwiseProduct(sign)));
      return;
    }

    case OpKind::kSqrt:
      accumulate(slot(0), g.shape(),
                 Vec<S>((g.flat().array() / (S(2) * node.value.flat().array())).matrix()));
      return;

    case OpKind::kPick: {
      Vec<S> dx = Vec<S>::Zero(input(0).size());
      for (std::size_t i = 0; i < p.indices.size(); ++i) dx[p.indices[i]] += g[static_cast<Index>(i)];
      accumulate(slot(0), input(0).shape(), dx);
      return;
    }

    case OpKind::kLinearMap:
      accumulate(slot(0), input(0).shape(), Vec<S>(p.matrix->transpose() * g.flat()));
      return;

    case OpKind::kEmbed: {
      const Tensor<S>& x = input(0);
      Tensor<S> dx(x.shape());
      for (Index c = 0; c < x.dim(0); ++c) {
        for (Index y = 0; y < x.dim(1); ++y) {
          for (Index xx = 0; xx < x.dim(2); ++xx) {
            dx.at(c, y, xx) = g.at(c, y + p.offset_h, xx + p.offset_w);
          }
        }
      }
      accumulate(slot(0), dx);
      return;
    }

    case OpKind::kConcat: {
      Index pos = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const Tensor<S>& part = input(i);
        accumulate(slot(i), part.shape(), Vec<S>(g.flat().segment(pos, part.size())));
        pos += part.size();
      }
      return;
    }
  }
}

}  // namespace

template <typename S>
NodeId Tape<S>::leaf(Tensor<S> value) {
  Node<S> node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return last();
}

template <typename S>
NodeId Tape<S>::record(OpKind kind, std::vector<NodeId> inputs, OpParams<S> params) {
  Node<S> node;
  node.kind = kind;
  node.inputs = std::move(inputs);
  node.params = std::move(params);
  std::vector<const Tensor<S>*> operands;
  operands.reserve(node.inputs.size());
  for (NodeId id : node.inputs) {
    if (id.index >= nodes_.size()) throw std::out_of_range("operand refers to an unrecorded node");
    operands.push_back(&nodes_[id.index].value);
  }
  node.value = forward(node, operands, &node.argmax);
  nodes_.push_back(std::move(node));
  return last();
}

template <typename S>
std::vector<Tensor<S>> Tape<S>::replay() const {
  std::vector<Tensor<S>> values;
  values.reserve(nodes_.size());
  for (const Node<S>& node : nodes_) {
    std::vector<const Tensor<S>*> operands;
    for (NodeId id : node.inputs) operands.push_back(&values[id.index]);
    std::vector<Index> scratch;
    values.push_back(forward(node, operands, &scratch));
  }
  return values;
}

template <typename S>
Gradients<S> backward(const Tape<S>& tape, NodeId root, NodeId floor) {
  if (root.index >= tape.size()) throw std::out_of_range("backward root not on tape");
  if (tape.value(root).size() != 1) {
    throw std::invalid_argument("backward root must hold exactly one element, got " +
                                shape_string(tape.value(root).shape()));
  }
  std::vector<Tensor<S>> grads(tape.size());
  grads[root.index] = Tensor<S>::ones(tape.value(root).shape());
  for (std::size_t i = root.index; i > floor.index; --i) {
    if (grads[i].empty()) continue;
    propagate(tape, tape.node(NodeId{i}), grads[i], grads);
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].empty()) grads[i] = Tensor<S>::zeros(tape.value(NodeId{i}).shape());
  }
  return Gradients<S>(std::move(grads));
}

template <typename S>
NodeId conv2d(Tape<S>& t, NodeId x, NodeId weight, NodeId bias, Conv2dParams p) {
  OpParams<S> params;
  params.stride = p.stride;
  params.padding = p.padding;
  if (p.stride <= 0) throw std::invalid_argument("conv2d: unsupported stride " + std::to_string(p.stride));
  if (p.padding < 0) throw std::invalid_argument("conv2d: unsupported padding " + std::to_string(p.padding));
  return t.record(OpKind::kConv2d, {x, weight, bias}, std::move(params));
}

template <typename S>
NodeId dense(Tape<S>& t, NodeId x, NodeId weight, NodeId bias) {
  return t.record(OpKind::kDense, {x, weight, bias});
}

template <typename S>
NodeId relu(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kRelu, {x});
}

template <typename S>
NodeId maxpool2d(Tape<S>& t, NodeId x, PoolParams p) {
  if (p.kernel <= 0 || p.stride <= 0) throw std::invalid_argument("maxpool2d: unsupported kernel/stride");
  OpParams<S> params;
  params.kernel = p.kernel;
  params.stride = p.stride;
  return t.record(OpKind::kMaxPool2d, {x}, std::move(params));
}

template <typename S>
NodeId flatten(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kFlatten, {x});
}

template <typename S>
NodeId reshape(Tape<S>& t, NodeId x, Shape shape) {
  OpParams<S> params;
  params.shape = std::move(shape);
  return t.record(OpKind::kReshape, {x}, std::move(params));
}

template <typename S>
NodeId add(Tape<S>& t, NodeId a, NodeId b) {
  return t.record(OpKind::kAdd, {a, b});
}

template <typename S>
NodeId sub(Tape<S>& t, NodeId a, NodeId b) {
  return t.record(OpKind::kSub, {a, b});
}

template <typename S>
NodeId mul(Tape<S>& t, NodeId a, NodeId b) {
  return t.record(OpKind::kMul, {a, b});
}

template <typename S>
NodeId scale(Tape<S>& t, NodeId x, S factor) {
  OpParams<S> params;
  params.a = factor;
  return t.record(OpKind::kScale, {x}, std::move(params));
}

template <typename S>
NodeId affine(Tape<S>& t, NodeId x, S factor, S offset) {
  OpParams<S> params;
  params.a = factor;
  params.b = offset;
  return t.record(OpKind::kAffine, {x}, std::move(params));
}

template <typename S>
NodeId sum(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kSum, {x});
}

template <typename S>
NodeId mean(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kMean, {x});
}

template <typename S>
NodeId softmax(Tape<S>& t, NodeId x, S temperature) {
  if (!(temperature > S(0))) throw std::invalid_argument("softmax temperature must be positive");
  OpParams<S> params;
  params.a = temperature;
  return t.record(OpKind::kSoftmax, {x}, std::move(params));
}

template <typename S>
NodeId log_softmax(Tape<S>& t, NodeId x, S temperature) {
  if (!(temperature > S(0))) throw std::invalid_argument("softmax temperature must be positive");
  OpParams<S> params;
  params.a = temperature;
  return t.record(OpKind::kLogSoftmax, {x}, std::move(params));
}

template <typename S>
NodeId log(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kLog, {x});
}

template <typename S>
NodeId sigmoid(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kSigmoid, {x});
}

template <typename S>
NodeId matmul(Tape<S>& t, NodeId a, NodeId b) {
  return t.record(OpKind::kMatmul, {a, b});
}

template <typename S>
NodeId max_all(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kMaxAll, {x});
}

template <typename S>
NodeId div_by_scalar(Tape<S>& t, NodeId x, NodeId denom) {
  return t.record(OpKind::kDivByScalar, {x, denom});
}

template <typename S>
NodeId square(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kSquare, {x});
}

template <typename S>
NodeId abs(Tape<S>& t, NodeId x) {
  return t.record(OpKind::kAbs, {x});
}

template <typename S>
NodeId sqrt(Tape<S>& t, NodeId x, S eps) {
  OpParams<S> params;
  params.b = eps;
  return t.record(OpKind::kSqrt, {x}, std::move(params));
}

template <typename S>
NodeId pick(Tape<S>& t, NodeId x, std::vector<Index> flat_indices) {
  OpParams<S> params;
  params.indices = std::move(flat_indices);
  return t.record(OpKind::kPick, {x}, std::move(params));
}

template <typename S>
NodeId linear_map(Tape<S>& t, NodeId x, std::shared_ptr<const Mat<S>> m, Shape out_shape) {
  OpParams<S> params;
  params.matrix = std::move(m);
  params.shape = std::move(out_shape);
  return t.record(OpKind::kLinearMap, {x}, std::move(params));
}

template <typename S>
NodeId embed(Tape<S>& t, NodeId x, Shape canvas, Index top, Index left) {
  OpParams<S> params;
  params.shape = std::move(canvas);
  params.offset_h = top;
  params.offset_w = left;
  return t.record(OpKind::kEmbed, {x}, std::move(params));
}

template <typename S>
NodeId concat(Tape<S>& t, const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  return t.record(OpKind::kConcat, parts);
}

template <typename S>
Tensor<S> softmax_with_temperature(const Tensor<S>& logits, S temperature) {
  if (!(temperature > S(0))) throw std::invalid_argument("softmax temperature must be positive");
  if (logits.rank() != 1 || logits.size() < 2) throw ShapeError("softmax needs a vector of length >= 2");
  const auto z = (logits.flat().array() / temperature).eval();
  const auto e = (z - z.maxCoeff()).exp().eval();
  return Tensor<S>(logits.shape(), (e / e.sum()).matrix());
}

template <typename S>
Tensor<S> finite_difference_gradient(const std::function<S(const Tensor<S>&)>& f, const Tensor<S>& x,
                                     S h) {
  if (!(h > S(0))) throw std::invalid_argument("finite difference step must be positive");
  Tensor<S> grad(x.shape());
  Tensor<S> probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const S orig = probe[i];
    probe[i] = orig + h;
    const S up = f(probe);
    probe[i] = orig - h;
    const S down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (S(2) * h);
  }
  return grad;
}

#define TAINTRADAR_INSTANTIATE_TAPE(S)                                                          \
  template class Tape<S>;                                                                       \
  template Gradients<S> backward(const Tape<S>&, NodeId, NodeId);                               \
  template NodeId conv2d(Tape<S>&, NodeId, NodeId, NodeId, Conv2dParams);                      \
  template NodeId dense(Tape<S>&, NodeId, NodeId, NodeId);                                      \
  template NodeId relu(Tape<S>&, NodeId);                                                       \
  template NodeId maxpool2d(Tape<S>&, NodeId, PoolParams);                                      \
  template NodeId flatten(Tape<S>&, NodeId);                                                    \
  template NodeId reshape(Tape<S>&, NodeId, Shape);                                             \
  template NodeId add(Tape<S>&, NodeId, NodeId);                                                \
  template NodeId sub(Tape<S>&, NodeId, NodeId);                                                \
  template NodeId mul(Tape<S>&, NodeId, NodeId);                                                \
  template NodeId scale(Tape<S>&, NodeId, S);                                                   \
  template NodeId affine(Tape<S>&, NodeId, S, S);                                               \
  template NodeId sum(Tape<S>&, NodeId);                                                        \
  template NodeId mean(Tape<S>&, NodeId);                                                       \
  template NodeId softmax(Tape<S>&, NodeId, S);                                                 \
  template NodeId log_softmax(Tape<S>&, NodeId, S);                                             \
  template NodeId log(Tape<S>&, NodeId);                                                        \
  template NodeId sigmoid(Tape<S>&, NodeId);                                                    \
  template NodeId matmul(Tape<S>&, NodeId, NodeId);                                             \
  template NodeId max_all(Tape<S>&, NodeId);                                                    \
  template NodeId div_by_scalar(Tape<S>&, NodeId, NodeId);                                      \
  template NodeId square(Tape<S>&, NodeId);                                                     \
  template NodeId abs(Tape<S>&, NodeId);                                                        \
  template NodeId sqrt(Tape<S>&, NodeId, S);                                                    \
  template NodeId pick(Tape<S>&, NodeId, std::vector<Index>);                                   \
  template NodeId linear_map(Tape<S>&, NodeId, std::shared_ptr<const Mat<S>>, Shape);           \
  template NodeId embed(Tape<S>&, NodeId, Shape, Index, Index);                                 \
  template NodeId concat(Tape<S>&, const std::vector<NodeId>&);                                 \
  template Tensor<S> softmax_with_temperature(const Tensor<S>&, S);                             \
  template Tensor<S> finite_difference_gradient(const std::function<S(const Tensor<S>&)>&,      \
                                                const Tensor<S>&, S);

TAINTRADAR_INSTANTIATE_TAPE(float)
TAINTRADAR_INSTANTIATE_TAPE(double)

#undef TAINTRADAR_INSTANTIATE_TAPE

}  // namespace taintradar
