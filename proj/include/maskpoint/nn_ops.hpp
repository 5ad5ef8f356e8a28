#pragma once

#include <cmath>
#include <cstring>
#include <memory>
#include <utility>
#include <vector>

#include "maskpoint/autograd.hpp"

namespace maskpoint {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

/// Gathers 3x3 (or KHxKW) patches of an NHWC tensor into GEMM rows.
template <typename S>
void im2col(const S* x, Eigen::Index n, Eigen::Index h, Eigen::Index w, Eigen::Index c,
            Eigen::Index kh, Eigen::Index kw, Eigen::Index stride, Eigen::Index pad,
            Eigen::Index oh, Eigen::Index ow, S* cols) {
  const Eigen::Index row_len = kh * kw * c;
  for (Eigen::Index in = 0; in < n; ++in)
    for (Eigen::Index iy = 0; iy < oh; ++iy)
      for (Eigen::Index ix = 0; ix < ow; ++ix) {
        S* row = cols + ((in * oh + iy) * ow + ix) * row_len;
        for (Eigen::Index ky = 0; ky < kh; ++ky) {
          const Eigen::Index sy = iy * stride + ky - pad;
          if (sy < 0 || sy >= h) {
            std::memset(row, 0, sizeof(S) * kw * c);
            row += kw * c;
            continue;
          }
          for (Eigen::Index kx = 0; kx < kw; ++kx, row += c) {
            const Eigen::Index sx = ix * stride + kx - pad;
            if (sx < 0 || sx >= w)
              std::memset(row, 0, sizeof(S) * c);
            else
              std::memcpy(row, x + ((in * h + sy) * w + sx) * c, sizeof(S) * c);
          }
        }
      }
}

/// Scatter-adds GEMM rows back onto the NHWC input gradient.
template <typename S>
void col2im_add(const S* cols, Eigen::Index n, Eigen::Index h, Eigen::Index w, Eigen::Index c,
                Eigen::Index kh, Eigen::Index kw, Eigen::Index stride, Eigen::Index pad,
                Eigen::Index oh, Eigen::Index ow, S* dx) {
  const Eigen::Index row_len = kh * kw * c;
  for (Eigen::Index in = 0; in < n; ++in)
    for (Eigen::Index iy = 0; iy < oh; ++iy)
      for (Eigen::Index ix = 0; ix < ow; ++ix) {
        const S* row = cols + ((in * oh + iy) * ow + ix) * row_len;
        for (Eigen::Index ky = 0; ky < kh; ++ky) {
          const Eigen::Index sy = iy * stride + ky - pad;
          if (sy < 0 || sy >= h) {
            row += kw * c;
            continue;
          }
          for (Eigen::Index kx = 0; kx < kw; ++kx, row += c) {
            const Eigen::Index sx = ix * stride + kx - pad;
            if (sx < 0 || sx >= w) continue;
            S* dst = dx + ((in * h + sy) * w + sx) * c;
            for (Eigen::Index ic = 0; ic < c; ++ic) dst[ic] += row[ic];
          }
        }
      }
}

}  // namespace detail

/// 2D convolution over NHWC input. Weights are [KH, KW, Cin, Cout], bias [Cout].
template <typename S>
NodePtrT<S> conv2d(const NodePtrT<S>& x, const NodePtrT<S>& w, const NodePtrT<S>& b,
                   Eigen::Index stride, Eigen::Index pad) {
  if (x->value.rank() != 4 || w->value.rank() != 4) throw ShapeError("conv2d: rank mismatch");
  const auto n = x->value.extent(0), h = x->value.extent(1), wd = x->value.extent(2),
             ci = x->value.extent(3);
  const auto kh = w->value.extent(0), kw = w->value.extent(1), co = w->value.extent(3);
  if (w->value.extent(2) != ci) throw ShapeError("conv2d: channel mismatch");
  const Eigen::Index oh = (h + 2 * pad - kh) / stride + 1;
  const Eigen::Index ow = (wd + 2 * pad - kw) / stride + 1;
  const Eigen::Index rows = n * oh * ow, klen = kh * kw * ci;

  auto cols = std::make_shared<RowMat<S>>(rows, klen);
  detail::im2col(x->value.data(), n, h, wd, ci, kh, kw, stride, pad, oh, ow, cols->data());

  TensorT<S> out({n, oh, ow, co});
  out.matrix(rows, co).noalias() = (*cols) * w->value.matrix(klen, co);
  out.matrix(rows, co).rowwise() += b->value.matrix(1, co).row(0);

  NodeT<S>*xp = x.get(), *wp = w.get(), *bp = b.get();
  return make_op<S>(std::move(out), {x, w, b}, [=](NodeT<S>& node) {
    auto dout = node.grad.matrix(rows, co);
    if (wp->requires_grad) wp->grad.matrix(klen, co).noalias() += cols->transpose() * dout;
    if (bp->requires_grad) bp->grad.matrix(1, co) += dout.colwise().sum();
    if (xp->requires_grad) {
      RowMat<S> dcols = dout * wp->value.matrix(klen, co).transpose();
      detail::col2im_add(dcols.data(), n, h, wd, ci, kh, kw, stride, pad, oh, ow,
                         xp->grad.data());
    }
  });
}

/// 2x upsampling transposed convolution (kernel 2, stride 2).
/// Weights are [Cin, 2, 2, Cout], bias [Cout]; output is [N, 2H, 2W, Cout].
template <typename S>
NodePtrT<S> conv_transpose2x2(const NodePtrT<S>& x, const NodePtrT<S>& w, const NodePtrT<S>& b) {
  if (x->value.rank() != 4 || w->value.rank() != 4) throw ShapeError("deconv: rank mismatch");
  const auto n = x->value.extent(0), h = x->value.extent(1), wd = x->value.extent(2),
             ci = x->value.extent(3);
  const auto co = w->value.extent(3);
  if (w->value.extent(0) != ci || w->value.extent(1) != 2 || w->value.extent(2) != 2)
    throw ShapeError("deconv: weight shape mismatch");
  const Eigen::Index rows = n * h * wd;

  RowMat<S> y = x->value.matrix(rows, ci) * w->value.matrix(ci, 4 * co);
  TensorT<S> out({n, 2 * h, 2 * wd, co});
  for (Eigen::Index in = 0; in < n; ++in)
    for (Eigen::Index iy = 0; iy < h; ++iy)
      for (Eigen::Index ix = 0; ix < wd; ++ix) {
        const S* src = y.data() + ((in * h + iy) * wd + ix) * 4 * co;
        for (Eigen::Index q = 0; q < 4; ++q) {
          S* dst = out.data() +
                   (((in * 2 * h + 2 * iy + q / 2) * 2 * wd) + (2 * ix + q % 2)) * co;
          for (Eigen::Index ic = 0; ic < co; ++ic) dst[ic] = src[q * co + ic] + b->value(ic);
        }
      }

  NodeT<S>*xp = x.get(), *wp = w.get(), *bp = b.get();
  return make_op<S>(std::move(out), {x, w, b}, [=](NodeT<S>& node) {
    RowMat<S> dy(rows, 4 * co);
    for (Eigen::Index in = 0; in < n; ++in)
      for (Eigen::Index iy = 0; iy < h; ++iy)
        for (Eigen::Index ix = 0; ix < wd; ++ix) {
          S* dst = dy.data() + ((in * h + iy) * wd + ix) * 4 * co;
          for (Eigen::Index q = 0; q < 4; ++q) {
            const S* src = node.grad.data() +
                           (((in * 2 * h + 2 * iy + q / 2) * 2 * wd) + (2 * ix + q % 2)) * co;
            std::memcpy(dst + q * co, src, sizeof(S) * co);
          }
        }
    if (bp->requires_grad) bp->grad.matrix(1, co) += node.grad.matrix(rows * 4, co).colwise().sum();
    if (wp->requires_grad)
      wp->grad.matrix(ci, 4 * co).noalias() += xp->value.matrix(rows, ci).transpose() * dy;
    if (xp->requires_grad)
      xp->grad.matrix(rows, ci).noalias() += dy * wp->value.matrix(ci, 4 * co).transpose();
  });
}

/// Fully connected layer: x [N, D] * w [D, U] + b [U].
template <typename S>
NodePtrT<S> linear(const NodePtrT<S>& x, const NodePtrT<S>& w, const NodePtrT<S>& b) {
  const auto n = x->value.extent(0), d = x->value.extent(1);
  const auto u = w->value.extent(1);
  if (w->value.extent(0) != d) throw ShapeError("linear: dimension mismatch");
  TensorT<S> out({n, u});
  out.matrix(n, u).noalias() = x->value.matrix(n, d) * w->value.matrix(d, u);
  out.matrix(n, u).rowwise() += b->value.matrix(1, u).row(0);
  NodeT<S>*xp = x.get(), *wp = w.get(), *bp = b.get();
  return make_op<S>(std::move(out), {x, w, b}, [=](NodeT<S>& node) {
    auto dout = node.grad.matrix(n, u);
    if (wp->requires_grad)
      wp->grad.matrix(d, u).noalias() += xp->value.matrix(n, d).transpose() * dout;
    if (bp->requires_grad) bp->grad.matrix(1, u) += dout.colwise().sum();
    if (xp->requires_grad)
      xp->grad.matrix(n, d).noalias() += dout * wp->value.matrix(d, u).transpose();
  });
}

template <typename S>
NodePtrT<S> relu(const NodePtrT<S>& x) {
  TensorT<S> out = x->value;
  out.array() = out.array().max(S(0));
  NodeT<S>* xp = x.get();
  return make_op<S>(std::move(out), {x}, [=](NodeT<S>& node) {
    if (xp->requires_grad)
      xp->grad.array() += node.grad.array() * (xp->value.array() > S(0)).template cast<S>();
  });
}

template <typename S>
NodePtrT<S> reshape(const NodePtrT<S>& x, std::vector<Eigen::Index> shape) {
  TensorT<S> out = x->value.reshaped(std::move(shape));
  NodeT<S>* xp = x.get();
  return make_op<S>(std::move(out), {x}, [=](NodeT<S>& node) {
    if (xp->requires_grad) xp->grad.array() += node.grad.array();
  });
}

enum class PoolKind { max, avg };

/// 2x2 stride-2 pooling; H and W must be even.
template <typename S>
NodePtrT<S> pool2x2(const NodePtrT<S>& x, PoolKind kind) {
  const auto n = x->value.extent(0), h = x->value.extent(1), w = x->value.extent(2),
             c = x->value.extent(3);
  if (h % 2 || w % 2) throw ShapeError("pool2x2: extents must be even");
  const Eigen::Index oh = h / 2, ow = w / 2;
  TensorT<S> out({n, oh, ow, c});
  auto winners = std::make_shared<std::vector<std::uint8_t>>();
  if (kind == PoolKind::max) winners->resize(static_cast<std::size_t>(n * oh * ow * c));
  const S* src = x->value.data();
  S* dst = out.data();
  for (Eigen::Index in = 0; in < n; ++in)
    for (Eigen::Index iy = 0; iy < oh; ++iy)
      for (Eigen::Index ix = 0; ix < ow; ++ix)
        for (Eigen::Index ic = 0; ic < c; ++ic) {
          const auto at = [&](Eigen::Index dy, Eigen::Index dx) {
            return src[((in * h + 2 * iy + dy) * w + 2 * ix + dx) * c + ic];
          };
          const Eigen::Index o = ((in * oh + iy) * ow + ix) * c + ic;
          if (kind == PoolKind::avg) {
            dst[o] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * S(0.25);
          } else {
            S best = at(0, 0);
            std::uint8_t arg = 0;
            for (std::uint8_t q = 1; q < 4; ++q) {
              const S v = at(q / 2, q % 2);
              if (v > best) best = v, arg = q;
            }
            dst[o] = best;
            (*winners)[static_cast<std::size_t>(o)] = arg;
          }
        }
  NodeT<S>* xp = x.get();
  return make_op<S>(std::move(out), {x}, [=](NodeT<S>& node) {
    if (!xp->requires_grad) return;
    for (Eigen::Index in = 0; in < n; ++in)
      for (Eigen::Index iy = 0; iy < oh; ++iy)
        for (Eigen::Index ix = 0; ix < ow; ++ix)
          for (Eigen::Index ic = 0; ic < c; ++ic) {
            const Eigen::Index o = ((in * oh + iy) * ow + ix) * c + ic;
            const S g = node.grad.data()[o];
            if (kind == PoolKind::avg) {
              for (std::uint8_t q = 0; q < 4; ++q)
                xp->grad.data()[((in * h + 2 * iy + q / 2) * w + 2 * ix + q % 2) * c + ic] +=
                    g * S(0.25);
            } else {
              const std::uint8_t q = (*winners)[static_cast<std::size_t>(o)];
              xp->grad.data()[((in * h + 2 * iy + q / 2) * w + 2 * ix + q % 2) * c + ic] += g;
            }
          }
  });
}

/// Sums the first `used` channels into a single-channel map.
template <typename S>
NodePtrT<S> channel_sum(const NodePtrT<S>& x, Eigen::Index used) {
  const auto n = x->value.extent(0), h = x->value.extent(1), w = x->value.extent(2),
             c = x->value.extent(3);
  if (used < 1 || used > c) throw ShapeError("channel_sum: bad channel count");
  TensorT<S> out({n, h, w, 1});
  const Eigen::Index pixels = n * h * w;
  for (Eigen::Index p = 0; p < pixels; ++p) {
    const S* row = x->value.data() + p * c;
    S acc = 0;
    for (Eigen::Index ic = 0; ic < used; ++ic) acc += row[ic];
    out.data()[p] = acc;
  }
  NodeT<S>* xp = x.get();
  return make_op<S>(std::move(out), {x}, [=](NodeT<S>& node) {
    if (!xp->requires_grad) return;
    for (Eigen::Index p = 0; p < pixels; ++p) {
      const S g = node.grad.data()[p];
      S* row = xp->grad.data() + p * c;
      for (Eigen::Index ic = 0; ic < used; ++ic) row[ic] += g;
    }
  });
}

enum class FuseMode { add, max, multiply };

/// Combines a single-channel map with every channel of a multi-channel map.
/// Ties under `max` resolve to the multi-channel operand.
template <typename S>
NodePtrT<S> broadcast_combine(const NodePtrT<S>& single, const NodePtrT<S>& multi,
                              FuseMode mode) {
  const auto n = multi->value.extent(0), h = multi->value.extent(1), w = multi->value.extent(2),
             c = multi->value.extent(3);
  if (single->value.extent(0) != n || single->value.extent(1) != h ||
      single->value.extent(2) != w || single->value.extent(3) != 1)
    throw ShapeError("broadcast_combine: operand shapes disagree");
  const Eigen::Index pixels = n * h * w;
  TensorT<S> out({n, h, w, c});
  auto multi_wins = std::make_shared<std::vector<std::uint8_t>>();
  if (mode == FuseMode::max) multi_wins->resize(static_cast<std::size_t>(pixels * c));
  for (Eigen::Index p = 0; p < pixels; ++p) {
    const S a = single->value.data()[p];
    const S* m = multi->value.data() + p * c;
    S* o = out.data() + p * c;
    for (Eigen::Index ic = 0; ic < c; ++ic) {
      switch (mode) {
        case FuseMode::multiply: o[ic] = a * m[ic]; break;
        case FuseMode::add: o[ic] = a + m[ic]; break;
        case FuseMode::max:
          if (m[ic] >= a) {
            o[ic] = m[ic];
            (*multi_wins)[static_cast<std::size_t>(p * c + ic)] = 1;
          } else {
            o[ic] = a;
            (*multi_wins)[static_cast<std::size_t>(p * c + ic)] = 0;
          }
          break;
      }
    }
  }
  NodeT<S>*sp = single.get(), *mp = multi.get();
  return make_op<S>(std::move(out), {single, multi}, [=](NodeT<S>& node) {
    for (Eigen::Index p = 0; p < pixels; ++p) {
      const S* g = node.grad.data() + p * c;
      const S a = sp->value.data()[p];
      const S* m = mp->value.data() + p * c;
      for (Eigen::Index ic = 0; ic < c; ++ic) {
        switch (mode) {
          case FuseMode::multiply:
            if (sp->requires_grad) sp->grad.data()[p] += g[ic] * m[ic];
            if (mp->requires_grad) mp->grad.data()[p * c + ic] += g[ic] * a;
            break;
          case FuseMode::add:
            if (sp->requires_grad) sp->grad.data()[p] += g[ic];
            if (mp->requires_grad) mp->grad.data()[p * c + ic] += g[ic];
            break;
          case FuseMode::max:
            if ((*multi_wins)[static_cast<std::size_t>(p * c + ic)]) {
              if (mp->requires_grad) mp->grad.data()[p * c + ic] += g[ic];
            } else if (sp->requires_grad) {
              sp->grad.data()[p] += g[ic];
            }
            break;
        }
      }
    }
  });
}

/// Rows kept from a leading-axis selection; backward scatters by row.
template <typename S>
NodePtrT<S> select_rows(const NodePtrT<S>& x, std::vector<Eigen::Index> rows) {
  const auto r = x->value.extent(0);
  const Eigen::Index stride = x->value.size() / std::max<Eigen::Index>(r, 1);
  std::vector<Eigen::Index> shape = x->value.shape();
  shape[0] = static_cast<Eigen::Index>(rows.size());
  TensorT<S> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.data() + static_cast<Eigen::Index>(i) * stride,
                x->value.data() + rows[i] * stride, sizeof(S) * stride);
  NodeT<S>* xp = x.get();
  auto idx = std::make_shared<std::vector<Eigen::Index>>(std::move(rows));
  return make_op<S>(std::move(out), {x}, [=](NodeT<S>& node) {
    if (!xp->requires_grad) return;
    for (std::size_t i = 0; i < idx->size(); ++i) {
      const S* src = node.grad.data() + static_cast<Eigen::Index>(i) * stride;
      S* dst = xp->grad.data() + (*idx)[i] * stride;
      for (Eigen::Index e = 0; e < stride; ++e) dst[e] += src[e];
    }
  });
}

struct RoiRef {
  Eigen::Index image = 0;
  Rect box;
};

/// Bilinear RoI feature extraction from a batched NHWC feature map.
/// One sample per output bin, taken at the bin center; feature pixel centers
/// sit at image coordinates (i + 0.5) * stride.
template <typename S>
NodePtrT<S> roi_bilinear_stack(const NodePtrT<S>& features, const std::vector<RoiRef>& rois,
                               Eigen::Index out_size, double stride) {
  const auto b = features->value.extent(0), fh = features->value.extent(1),
             fw = features->value.extent(2), c = features->value.extent(3);
  const Eigen::Index r = static_cast<Eigen::Index>(rois.size());
  for (const auto& roi : rois) {
    if (roi.box.height < 1.0 || roi.box.width < 1.0)
      throw DegenerateBox("roi_bilinear_stack: box smaller than one pixel");
    if (roi.image < 0 || roi.image >= b) throw ShapeError("roi_bilinear_stack: bad image index");
  }
  TensorT<S> out({r, out_size, out_size, c});
  const Eigen::Index samples = r * out_size * out_size;
  auto base = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(samples) * 4);
  auto weight = std::make_shared<std::vector<S>>(static_cast<std::size_t>(samples) * 4);

  for (Eigen::Index ir = 0; ir < r; ++ir) {
    const Rect& box = rois[static_cast<std::size_t>(ir)].box;
    const Eigen::Index img = rois[static_cast<std::size_t>(ir)].image;
    for (Eigen::Index iy = 0; iy < out_size; ++iy)
      for (Eigen::Index ix = 0; ix < out_size; ++ix) {
        const double py = box.top + (iy + 0.5) * box.height / out_size;
        const double px = box.left + (ix + 0.5) * box.width / out_size;
        double fy = py / stride - 0.5, fx = px / stride - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(fh - 1));
        fx = std::clamp(fx, 0.0, static_cast<double>(fw - 1));
        const Eigen::Index y0 = std::min(static_cast<Eigen::Index>(fy), fh - 2 >= 0 ? fh - 2 : 0);
        const Eigen::Index x0 = std::min(static_cast<Eigen::Index>(fx), fw - 2 >= 0 ? fw - 2 : 0);
        const double ty = fy - y0, tx = fx - x0;
        const Eigen::Index y1 = std::min(y0 + 1, fh - 1), x1 = std::min(x0 + 1, fw - 1);
        const Eigen::Index s = (ir * out_size + iy) * out_size + ix;
        const Eigen::Index corner[4] = {(img * fh + y0) * fw + x0, (img * fh + y0) * fw + x1,
                                        (img * fh + y1) * fw + x0, (img * fh + y1) * fw + x1};
        const S wgt[4] = {static_cast<S>((1 - ty) * (1 - tx)), static_cast<S>((1 - ty) * tx),
                          static_cast<S>(ty * (1 - tx)), static_cast<S>(ty * tx)};
        S* dst = out.data() + s * c;
        std::memset(dst, 0, sizeof(S) * c);
        for (int q = 0; q < 4; ++q) {
          (*base)[static_cast<std::size_t>(s * 4 + q)] = corner[q];
          (*weight)[static_cast<std::size_t>(s * 4 + q)] = wgt[q];
          const S* src = features->value.data() + corner[q] * c;
          for (Eigen::Index ic = 0; ic < c; ++ic) dst[ic] += wgt[q] * src[ic];
        }
      }
  }
  NodeT<S>* fp = features.get();
  return make_op<S>(std::move(out), {features}, [=](NodeT<S>& node) {
    if (!fp->requires_grad) return;
    for (Eigen::Index s = 0; s < samples; ++s) {
      const S* g = node.grad.data() + s * c;
      for (int q = 0; q < 4; ++q) {
        const S wq = (*weight)[static_cast<std::size_t>(s * 4 + q)];
        S* dst = fp->grad.data() + (*base)[static_cast<std::size_t>(s * 4 + q)] * c;
        for (Eigen::Index ic = 0; ic < c; ++ic) dst[ic] += wq * g[ic];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Scalar combinators.
// ---------------------------------------------------------------------------

template <typename S>
NodePtrT<S> add(const NodePtrT<S>& a, const NodePtrT<S>& b) {
  if (!a->value.same_shape(b->value)) throw ShapeError("add: shape mismatch");
  TensorT<S> out = a->value;
  out.array() += b->value.array();
  NodeT<S>*ap = a.get(), *bp = b.get();
  return make_op<S>(std::move(out), {a, b}, [=](NodeT<S>& node) {
    if (ap->requires_grad) ap->grad.array() += node.grad.array();
    if (bp->requires_grad) bp->grad.array() += node.grad.array();
  });
}

template <typename S>
NodePtrT<S> scale(const NodePtrT<S>& x, S factor) {
  TensorT<S> out = x->value;
  out.array() *= factor;
  NodeT<S>* xp = x.get();
  return make_op<S>(std::move(out), {x}, [=](NodeT<S>& node) {
    if (xp->requires_grad) xp->grad.array() += factor * node.grad.array();
  });
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

/// Softmax cross-entropy over the last axis of [N, K] logits, averaged over N.
template <typename S>
NodePtrT<S> softmax_ce(const NodePtrT<S>& logits, const std::vector<int>& targets) {
  const auto n = logits->value.extent(0), k = logits->value.extent(1);
  if (static_cast<Eigen::Index>(targets.size()) != n)
    throw ShapeError("softmax_ce: target count mismatch");
  for (const int t : targets)
    if (t < 0 || t >= k) throw TargetError("softmax_ce: class index out of range");
  auto probs = std::make_shared<RowMat<S>>(n, k);
  S total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = logits->value.matrix(n, k).row(i);
    const S m = row.maxCoeff();
    Eigen::Array<S, Eigen::Dynamic, 1> e = (row.array() - m).exp();
    const S z = e.sum();
    probs->row(i) = (e / z).matrix().transpose();
    total += std::log(z) + m - row(targets[static_cast<std::size_t>(i)]);
  }
  TensorT<S> out({1});
  out(0) = total / static_cast<S>(n);
  NodeT<S>* lp = logits.get();
  auto tgt = std::make_shared<std::vector<int>>(targets);
  return make_op<S>(std::move(out), {logits}, [=](NodeT<S>& node) {
    if (!lp->requires_grad) return;
    const S g = node.grad(0) / static_cast<S>(n);
    auto dl = lp->grad.matrix(n, k);
    dl += *probs * g;
    for (Eigen::Index i = 0; i < n; ++i) dl(i, (*tgt)[static_cast<std::size_t>(i)]) -= g;
  });
}

/// Per-channel spatial softmax cross-entropy for [R, M, M, K] logits against
/// one-hot cells (row, col) per (roi, channel); mean over R*K channels.
template <typename S>
NodePtrT<S> spatial_softmax_ce(const NodePtrT<S>& logits,
                               const std::vector<std::vector<std::pair<int, int>>>& cells) {
  const auto r = logits->value.extent(0), m = logits->value.extent(1), k = logits->value.extent(3);
  if (logits->value.extent(2) != m) throw ShapeError("spatial_softmax_ce: grid must be square");
  if (static_cast<Eigen::Index>(cells.size()) != r)
    throw ShapeError("spatial_softmax_ce: roi count mismatch");
  for (const auto& per_roi : cells) {
    if (static_cast<Eigen::Index>(per_roi.size()) != k)
      throw LabelError("spatial_softmax_ce: channel count mismatch");
    for (const auto& [cy, cx] : per_roi)
      if (cy < 0 || cy >= m || cx < 0 || cx >= m)
        throw LabelError("spatial_softmax_ce: cell outside grid");
  }
  auto probs = std::make_shared<TensorT<S>>(logits->value.shape());
  const Eigen::Index area = m * m;
  S total = 0;
  for (Eigen::Index ir = 0; ir < r; ++ir)
    for (Eigen::Index ic = 0; ic < k; ++ic) {
      const S* src = logits->value.data() + ir * area * k + ic;
      S mx = src[0];
      for (Eigen::Index p = 1; p < area; ++p) mx = std::max(mx, src[p * k]);
      S z = 0;
      S* dst = probs->data() + ir * area * k + ic;
      for (Eigen::Index p = 0; p < area; ++p) {
        const S e = std::exp(src[p * k] - mx);
        dst[p * k] = e;
        z += e;
      }
      for (Eigen::Index p = 0; p < area; ++p) dst[p * k] /= z;
      const auto& [cy, cx] = cells[static_cast<std::size_t>(ir)][static_cast<std::size_t>(ic)];
      total += std::log(z) + mx - src[(cy * m + cx) * k];
    }
  TensorT<S> out({1});
  out(0) = total / static_cast<S>(r * k);
  NodeT<S>* lp = logits.get();
  auto cl = std::make_shared<std::vector<std::vector<std::pair<int, int>>>>(cells);
  return make_op<S>(std::move(out), {logits}, [=](NodeT<S>& node) {
    if (!lp->requires_grad) return;
    const S g = node.grad(0) / static_cast<S>(r * k);
    lp->grad.array() += probs->array() * g;
    for (Eigen::Index ir = 0; ir < r; ++ir)
      for (Eigen::Index ic = 0; ic < k; ++ic) {
        const auto& [cy, cx] = (*cl)[static_cast<std::size_t>(ir)][static_cast<std::size_t>(ic)];
        lp->grad.data()[ir * area * k + (cy * m + cx) * k + ic] -= g;
      }
  });
}

/// Mean binary cross-entropy between logits and {0,1} targets of equal shape.
template <typename S>
NodePtrT<S> sigmoid_bce_mean(const NodePtrT<S>& logits, const TensorT<S>& targets) {
  if (!logits->value.same_shape(targets)) throw ShapeError("sigmoid_bce: shape mismatch");
  const Eigen::Index count = logits->value.size();
  S total = 0;
  for (Eigen::Index i = 0; i < count; ++i) {
    const S z = logits->value(i), t = targets(i);
    total += std::max(z, S(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  TensorT<S> out({1});
  out(0) = total / static_cast<S>(count);
  NodeT<S>* lp = logits.get();
  auto tgt = std::make_shared<TensorT<S>>(targets);
  return make_op<S>(std::move(out), {logits}, [=](NodeT<S>& node) {
    if (!lp->requires_grad) return;
    const S g = node.grad(0) / static_cast<S>(count);
    lp->grad.array() +=
        g * ((S(1) / (S(1) + (-lp->value.array()).exp())) - tgt->array());
  });
}

/// Smooth-L1 between [R, 4] rows, summed over the 4 coordinates and averaged
/// over rows.
template <typename S>
NodePtrT<S> smooth_l1(const NodePtrT<S>& pred, const TensorT<S>& target) {
  if (!pred->value.same_shape(target)) throw ShapeError("smooth_l1: shape mismatch");
  const auto r = pred->value.extent(0);
  S total = 0;
  for (Eigen::Index i = 0; i < pred->value.size(); ++i) {
    const S d = pred->value(i) - target(i);
    total += std::abs(d) < S(1) ? S(0.5) * d * d : std::abs(d) - S(0.5);
  }
  TensorT<S> out({1});
  out(0) = total / static_cast<S>(r);
  NodeT<S>* pp = pred.get();
  auto tgt = std::make_shared<TensorT<S>>(target);
  return make_op<S>(std::move(out), {pred}, [=](NodeT<S>& node) {
    if (!pp->requires_grad) return;
    const S g = node.grad(0) / static_cast<S>(r);
    for (Eigen::Index i = 0; i < pp->value.size(); ++i) {
      const S d = pp->value(i) - tgt->array()(i);
      pp->grad.array()(i) += g * std::clamp(d, S(-1), S(1));
    }
  });
}

/// Picks channel classes[r] of an [R, A, B, C] tensor per row: result [R, A, B].
template <typename S>
NodePtrT<S> gather_channel(const NodePtrT<S>& x, const std::vector<int>& classes) {
  const auto r = x->value.extent(0), a = x->value.extent(1), b = x->value.extent(2),
             c = x->value.extent(3);
  if (static_cast<Eigen::Index>(classes.size()) != r)
    throw ShapeError("gather_channel: class count mismatch");
  TensorT<S> out({r, a, b});
  for (Eigen::Index ir = 0; ir < r; ++ir) {
    const int cls = classes[static_cast<std::size_t>(ir)];
    if (cls < 0 || cls >= c) throw TargetError("gather_channel: class out of range");
    for (Eigen::Index p = 0; p < a * b; ++p)
      out.data()[ir * a * b + p] = x->value.data()[(ir * a * b + p) * c + cls];
  }
  NodeT<S>* xp = x.get();
  auto cl = std::make_shared<std::vector<int>>(classes);
  return make_op<S>(std::move(out), {x}, [=](NodeT<S>& node) {
    if (!xp->requires_grad) return;
    for (Eigen::Index ir = 0; ir < r; ++ir) {
      const int cls = (*cl)[static_cast<std::size_t>(ir)];
      for (Eigen::Index p = 0; p < a * b; ++p)
        xp->grad.data()[(ir * a * b + p) * c + cls] += node.grad.data()[ir * a * b + p];
    }
  });
}

/// Picks the 4-delta block of the target class from [R, 4C] rows: result [R, 4].
template <typename S>
NodePtrT<S> gather_deltas(const NodePtrT<S>& x, const std::vector<int>& classes) {
  const auto r = x->value.extent(0), d = x->value.extent(1);
  if (static_cast<Eigen::Index>(classes.size()) != r)
    throw ShapeError("gather_deltas: class count mismatch");
  TensorT<S> out({r, 4});
  for (Eigen::Index ir = 0; ir < r; ++ir) {
    const int cls = classes[static_cast<std::size_t>(ir)];
    if (cls < 0 || 4 * cls + 4 > d) throw TargetError("gather_deltas: class out of range");
    for (int q = 0; q < 4; ++q) out(ir, q) = x->value(ir, 4 * cls + q);
  }
  NodeT<S>* xp = x.get();
  auto cl = std::make_shared<std::vector<int>>(classes);
  return make_op<S>(std::move(out), {x}, [=](NodeT<S>& node) {
    if (!xp->requires_grad) return;
    for (Eigen::Index ir = 0; ir < r; ++ir) {
      const int cls = (*cl)[static_cast<std::size_t>(ir)];
      for (int q = 0; q < 4; ++q) xp->grad(ir, 4 * cls + q) += node.grad(ir, q);
    }
  });
}

// ---------------------------------------------------------------------------
// Plain-tensor helpers (no graph) used at inference time.
// ---------------------------------------------------------------------------

template <typename S>
void softmax_rows_inplace(TensorT<S>& t) {
  const auto n = t.extent(0), k = t.extent(1);
  auto m = t.matrix(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mx = m.row(i).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (m.row(i).array() - mx).exp();
    m.row(i) = (e / e.sum()).matrix();
  }
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& t) {
  TensorT<S> out = t;
  out.array() = S(1) / (S(1) + (-out.array()).exp());
  return out;
}

}  // namespace maskpoint
