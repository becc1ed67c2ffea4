#include "cranio/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cranio {

namespace {

template <typename S>
using MapRM = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMapRM = Eigen::Map<const RowMatrix<S>>;

[[noreturn]] void shape_error(const char* op, const std::string& what) { throw Error(ErrorKind::Shape, op, what); }

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) shape_error(op, "operand shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename S>
void require_rank(const char* op, const Tensor<S>& x, std::size_t rank, const char* role = "input") {
  if (x.rank() != rank)
    shape_error(op, std::string(role) + " must have rank " + std::to_string(rank) + ", got " + to_string(x.shape()));
}

template <typename S>
void accumulate(Node<S>& parent, const Array<S>& delta) {
  if (parent.requires_grad) parent.grad_buffer() += delta;
}

// Maps an out-of-range coordinate back into [0, n) by mirror reflection
// without repeating the edge sample.
inline Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

struct ConvGeometry {
  Index channels, height, width;
  Index kh, kw;
  Index stride, padding;
  PadMode mode;
  Index out_h, out_w;

  Index rows() const { return channels * kh * kw; }
  Index cols() const { return out_h * out_w; }
};

// Per-kernel-offset source rows and columns (-1 for zero padding), so the
// inner loops below are plain gathers.
struct ConvTables {
  std::vector<Index> rows, cols;  // [kh * out_h], [kw * out_w]

  explicit ConvTables(const ConvGeometry& g) : rows(g.kh * g.out_h), cols(g.kw * g.out_w) {
    auto source = [&](Index o, Index k, Index n) {
      Index i = o * g.stride - g.padding + k;
      if (g.mode == PadMode::Reflect) return reflect_index(i, n);
      return i < 0 || i >= n ? Index{-1} : i;
    };
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index oh = 0; oh < g.out_h; ++oh) rows[ki * g.out_h + oh] = source(oh, ki, g.height);
    for (Index kj = 0; kj < g.kw; ++kj)
      for (Index ow = 0; ow < g.out_w; ++ow) cols[kj * g.out_w + ow] = source(ow, kj, g.width);
    // Interior output columns [lo, hi) read input column ow * stride - padding + kj.
    for (Index kj = 0; kj < g.kw; ++kj) {
      Index lo = 0;
      while (lo < g.out_w && lo * g.stride - g.padding + kj < 0) ++lo;
      Index hi = g.out_w;
      while (hi > lo && (hi - 1) * g.stride - g.padding + kj >= g.width) --hi;
      interior.emplace_back(lo, hi);
    }
  }

  std::vector<std::pair<Index, Index>> interior;
};

template <typename S>
void im2col(const S* image, const ConvGeometry& g, S* col) {
  const ConvTables t(g);
  const Index plane = g.height * g.width;
  for (Index c = 0; c < g.channels; ++c) {
    const S* src = image + c * plane;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        S* dst = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        const Index* cidx = t.cols.data() + kj * g.out_w;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          S* out = dst + oh * g.out_w;
          const Index ih = t.rows[ki * g.out_h + oh];
          if (ih < 0) {
            std::fill(out, out + g.out_w, S(0));
            continue;
          }
          const S* row = src + ih * g.width;
          const auto [lo, hi] = t.interior[kj];
          for (Index ow = 0; ow < lo; ++ow) out[ow] = cidx[ow] < 0 ? S(0) : row[cidx[ow]];
          const S* base = row - g.padding + kj;
          if (g.stride == 1)
            std::copy(base + lo, base + hi, out + lo);
          else
            for (Index ow = lo; ow < hi; ++ow) out[ow] = base[ow * g.stride];
          for (Index ow = hi; ow < g.out_w; ++ow) out[ow] = cidx[ow] < 0 ? S(0) : row[cidx[ow]];
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* col, const ConvGeometry& g, S* image) {
  const ConvTables t(g);
  const Index plane = g.height * g.width;
  for (Index c = 0; c < g.channels; ++c) {
    S* dst = image + c * plane;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const S* src = col + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        const Index* cidx = t.cols.data() + kj * g.out_w;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = t.rows[ki * g.out_h + oh];
          if (ih < 0) continue;
          S* row = dst + ih * g.width;
          const S* in = src + oh * g.out_w;
          const auto [lo, hi] = t.interior[kj];
          for (Index ow = 0; ow < lo; ++ow)
            if (cidx[ow] >= 0) row[cidx[ow]] += in[ow];
          S* base = row - g.padding + kj;
          if (g.stride == 1)
            for (Index ow = lo; ow < hi; ++ow) base[ow] += in[ow];
          else
            for (Index ow = lo; ow < hi; ++ow) base[ow * g.stride] += in[ow];
          for (Index ow = hi; ow < g.out_w; ++ow)
            if (cidx[ow] >= 0) row[cidx[ow]] += in[ow];
        }
      }
    }
  }
}

template <typename S, typename F, typename G>
Tensor<S> unary(const char* op, const Tensor<S>& x, F forward, G derivative) {
  Array<S> out = x.values().unaryExpr(forward);
  return detail::make_result<S>(op, x.shape(), std::move(out), {x}, [derivative](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (!in.requires_grad) return;
    in.grad_buffer() += self.grad * derivative(in.value, self.value);
  });
}

struct AxisSplit {
  Index outer, length, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("add", a, b);
  return detail::make_result<S>("add", a.shape(), a.values() + b.values(), {a, b}, [](Node<S>& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("sub", a, b);
  return detail::make_result<S>("sub", a.shape(), a.values() - b.values(), {a, b}, [](Node<S>& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->grad_buffer() -= self.grad;
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("mul", a, b);
  return detail::make_result<S>("mul", a.shape(), a.values() * b.values(), {a, b}, [](Node<S>& self) {
    Node<S>& l = *self.parents[0];
    Node<S>& r = *self.parents[1];
    if (l.requires_grad) l.grad_buffer() += self.grad * r.value;
    if (r.requires_grad) r.grad_buffer() += self.grad * l.value;
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return detail::make_result<S>("scale", a.shape(), a.values() * factor, {a}, [factor](Node<S>& self) {
    accumulate(*self.parents[0], Array<S>(self.grad * factor));
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S offset) {
  return detail::make_result<S>("add_scalar", a.shape(), a.values() + offset, {a},
                                [](Node<S>& self) { accumulate(*self.parents[0], self.grad); });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool transpose_b) {
  require_rank("matmul", a, 2, "left operand");
  require_rank("matmul", b, 2, "right operand");
  const Index m = a.dim(0), k = a.dim(1);
  const Index n = transpose_b ? b.dim(0) : b.dim(1);
  const Index kb = transpose_b ? b.dim(1) : b.dim(0);
  if (k != kb) shape_error("matmul", "inner dims differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Array<S> out(m * n);
  ConstMapRM<S> A(a.values().data(), m, k);
  ConstMapRM<S> B(b.values().data(), b.dim(0), b.dim(1));
  MapRM<S> C(out.data(), m, n);
  if (transpose_b)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A * B;
  return detail::make_result<S>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n, transpose_b](Node<S>& self) {
    Node<S>& l = *self.parents[0];
    Node<S>& r = *self.parents[1];
    ConstMapRM<S> G(self.grad.data(), m, n);
    ConstMapRM<S> A(l.value.data(), m, k);
    if (transpose_b) {
      ConstMapRM<S> B(r.value.data(), n, k);
      if (l.requires_grad) MapRM<S>(l.grad_buffer().data(), m, k).noalias() += G * B;
      if (r.requires_grad) MapRM<S>(r.grad_buffer().data(), n, k).noalias() += G.transpose() * A;
    } else {
      ConstMapRM<S> B(r.value.data(), k, n);
      if (l.requires_grad) MapRM<S>(l.grad_buffer().data(), m, k).noalias() += G * B.transpose();
      if (r.requires_grad) MapRM<S>(r.grad_buffer().data(), k, n).noalias() += A.transpose() * G;
    }
  });
}

template <typename S>
Tensor<S> add_row_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  require_rank("add_row_bias", x, 2);
  const Index rows = x.dim(0), n = x.dim(1);
  if (bias.size() != n) shape_error("add_row_bias", "bias " + to_string(bias.shape()) + " vs rows of width " + std::to_string(n));
  Array<S> out = x.values();
  MapRM<S>(out.data(), rows, n).rowwise() += bias.values().matrix().transpose();
  return detail::make_result<S>("add_row_bias", x.shape(), std::move(out), {x, bias}, [rows, n](Node<S>& self) {
    accumulate(*self.parents[0], self.grad);
    Node<S>& b = *self.parents[1];
    if (b.requires_grad)
      b.grad_buffer().matrix() += ConstMapRM<S>(self.grad.data(), rows, n).colwise().sum().transpose();
  });
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, ConvParams params) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4, "kernel");
  const Index batch = x.dim(0);
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), params.stride, params.padding,
                 params.pad_mode, 0, 0};
  const Index out_channels = weight.dim(0);
  if (weight.dim(1) != g.channels)
    shape_error("conv2d", "kernel expects " + std::to_string(weight.dim(1)) + " input channels, input " +
                              to_string(x.shape()) + " has " + std::to_string(g.channels));
  if (params.stride < 1 || params.padding < 0) shape_error("conv2d", "stride must be >= 1 and padding >= 0");
  if (g.kh > g.height + 2 * g.padding || g.kw > g.width + 2 * g.padding)
    shape_error("conv2d", "kernel " + to_string(weight.shape()) + " exceeds padded input " + to_string(x.shape()));
  if (params.pad_mode == PadMode::Reflect && (g.padding >= g.height || g.padding >= g.width))
    shape_error("conv2d", "reflect padding " + std::to_string(g.padding) + " needs spatial dims larger than it");
  if (bias.defined() && bias.size() != out_channels)
    shape_error("conv2d", "bias " + to_string(bias.shape()) + " vs " + std::to_string(out_channels) + " output channels");
  g.out_h = (g.height + 2 * g.padding - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kw) / g.stride + 1;

  const Index in_plane = g.channels * g.height * g.width;
  const Index out_plane = out_channels * g.cols();
  auto cols = std::make_shared<std::vector<RowMatrix<S>>>(batch);
  Array<S> out(batch * out_plane);
  ConstMapRM<S> W(weight.values().data(), out_channels, g.rows());
  for (Index n = 0; n < batch; ++n) {
    RowMatrix<S>& col = (*cols)[n];
    col.resize(g.rows(), g.cols());
    im2col(x.values().data() + n * in_plane, g, col.data());
    MapRM<S> O(out.data() + n * out_plane, out_channels, g.cols());
    O.noalias() = W * col;
    if (bias.defined()) O.colwise() += bias.values().matrix();
  }
  std::vector<Tensor<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return detail::make_result<S>(
      "conv2d", {batch, out_channels, g.out_h, g.out_w}, std::move(out), std::move(inputs),
      [g, cols, batch, out_channels, in_plane, out_plane, has_bias](Node<S>& self) {
        Node<S>& xin = *self.parents[0];
        Node<S>& w = *self.parents[1];
        ConstMapRM<S> W(w.value.data(), out_channels, g.rows());
        RowMatrix<S> dcol;
        for (Index n = 0; n < batch; ++n) {
          ConstMapRM<S> G(self.grad.data() + n * out_plane, out_channels, g.cols());
          if (w.requires_grad)
            MapRM<S>(w.grad_buffer().data(), out_channels, g.rows()).noalias() += G * (*cols)[n].transpose();
          if (has_bias && self.parents[2]->requires_grad)
            self.parents[2]->grad_buffer().matrix() += G.rowwise().sum();
          if (xin.requires_grad) {
            dcol.noalias() = W.transpose() * G;
            col2im(dcol.data(), g, xin.grad_buffer().data() + n * in_plane);
          }
        }
      });
}

template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           ConvTransposeParams params) {
  require_rank("conv_transpose2d", x, 4);
  require_rank("conv_transpose2d", weight, 4, "kernel");
  const Index batch = x.dim(0), in_channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (weight.dim(0) != in_channels)
    shape_error("conv_transpose2d", "kernel expects " + std::to_string(weight.dim(0)) + " input channels, input " +
                                        to_string(x.shape()) + " has " + std::to_string(in_channels));
  if (params.stride < 1 || params.padding < 0 || params.output_padding < 0 || params.output_padding >= params.stride)
    shape_error("conv_transpose2d", "need stride >= 1, padding >= 0, 0 <= output_padding < stride");
  const Index out_channels = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const Index out_h = (h - 1) * params.stride - 2 * params.padding + kh + params.output_padding;
  const Index out_w = (w - 1) * params.stride - 2 * params.padding + kw + params.output_padding;
  if (out_h <= 0 || out_w <= 0) shape_error("conv_transpose2d", "empty output for input " + to_string(x.shape()));
  if (bias.defined() && bias.size() != out_channels)
    shape_error("conv_transpose2d", "bias " + to_string(bias.shape()) + " vs " + std::to_string(out_channels) + " output channels");
  // Geometry of the forward convolution that this operation transposes.
  ConvGeometry g{out_channels, out_h, out_w, kh, kw, params.stride, params.padding, PadMode::Zero, h, w};

  const Index in_plane = in_channels * h * w;
  const Index out_plane = out_channels * out_h * out_w;
  Array<S> out = Array<S>::Zero(batch * out_plane);
  ConstMapRM<S> Wm(weight.values().data(), in_channels, g.rows());
  RowMatrix<S> col(g.rows(), g.cols());
  for (Index n = 0; n < batch; ++n) {
    ConstMapRM<S> X(x.values().data() + n * in_plane, in_channels, h * w);
    col.noalias() = Wm.transpose() * X;
    col2im(col.data(), g, out.data() + n * out_plane);
    if (bias.defined())
      MapRM<S>(out.data() + n * out_plane, out_channels, out_h * out_w).colwise() += bias.values().matrix();
  }
  std::vector<Tensor<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return detail::make_result<S>(
      "conv_transpose2d", {batch, out_channels, out_h, out_w}, std::move(out), std::move(inputs),
      [g, batch, in_channels, h, w, in_plane, out_plane, has_bias](Node<S>& self) {
        Node<S>& xin = *self.parents[0];
        Node<S>& wt = *self.parents[1];
        ConstMapRM<S> Wm(wt.value.data(), in_channels, g.rows());
        RowMatrix<S> gcol(g.rows(), g.cols());
        for (Index n = 0; n < batch; ++n) {
          im2col(self.grad.data() + n * out_plane, g, gcol.data());
          if (xin.requires_grad)
            MapRM<S>(xin.grad_buffer().data() + n * in_plane, in_channels, h * w).noalias() += Wm * gcol;
          if (wt.requires_grad) {
            ConstMapRM<S> X(xin.value.data() + n * in_plane, in_channels, h * w);
            MapRM<S>(wt.grad_buffer().data(), in_channels, g.rows()).noalias() += X * gcol.transpose();
          }
          if (has_bias && self.parents[2]->requires_grad)
            self.parents[2]->grad_buffer().matrix() +=
                ConstMapRM<S>(self.grad.data() + n * out_plane, g.channels, g.height * g.width).rowwise().sum();
        }
      });
}

template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x, S epsilon) {
  require_rank("instance_norm", x, 4);
  const Index planes = x.dim(0) * x.dim(1);
  const Index size = x.dim(2) * x.dim(3);
  Array<S> out(x.size());
  auto inv_std = std::make_shared<Array<S>>(planes);
  for (Index p = 0; p < planes; ++p) {
    auto in = x.values().segment(p * size, size);
    const S mu = in.mean();
    const S var = (in - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + epsilon);
    (*inv_std)[p] = inv;
    out.segment(p * size, size) = (in - mu) * inv;
  }
  return detail::make_result<S>("instance_norm", x.shape(), std::move(out), {x}, [planes, size, inv_std](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (!in.requires_grad) return;
    Array<S>& dx = in.grad_buffer();
    for (Index p = 0; p < planes; ++p) {
      auto dy = self.grad.segment(p * size, size);
      auto y = self.value.segment(p * size, size);
      const S mean_dy = dy.mean();
      const S mean_dyy = (dy * y).mean();
      dx.segment(p * size, size) += (*inv_std)[p] * (dy - mean_dy - y * mean_dyy);
    }
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary<S>(
      "relu", x, [](S v) { return v > S(0) ? v : S(0); },
      [](const Array<S>& in, const Array<S>&) { return (in > S(0)).template cast<S>(); });
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope) {
  return unary<S>(
      "leaky_relu", x, [slope](S v) { return v > S(0) ? v : slope * v; },
      [slope](const Array<S>& in, const Array<S>&) { return (in > S(0)).select(Array<S>::Ones(in.size()), slope); });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  return unary<S>(
      "tanh", x, [](S v) { return std::tanh(v); },
      [](const Array<S>&, const Array<S>& out) { return S(1) - out.square(); });
}

template <typename S>
Tensor<S> atanh(const Tensor<S>& x) {
  if ((x.values().abs() >= S(1)).any()) throw Error(ErrorKind::Range, "atanh", "argument outside (-1, 1)");
  return unary<S>(
      "atanh", x, [](S v) { return std::atanh(v); },
      [](const Array<S>& in, const Array<S>&) { return S(1) / (S(1) - in.square()); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary<S>(
      "sigmoid", x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
      [](const Array<S>&, const Array<S>& out) { return out * (S(1) - out); });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  if ((x.values() <= S(0)).any()) throw Error(ErrorKind::Range, "log", "argument must be positive");
  return unary<S>(
      "log", x, [](S v) { return std::log(v); }, [](const Array<S>& in, const Array<S>&) { return in.inverse(); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary<S>(
      "exp", x, [](S v) { return std::exp(v); }, [](const Array<S>&, const Array<S>& out) { return out; });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  return unary<S>(
      "abs", x, [](S v) { return std::abs(v); },
      [](const Array<S>& in, const Array<S>&) { return in.sign(); });
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  return unary<S>(
      "clamp", x, [lo, hi](S v) { return std::clamp(v, lo, hi); },
      [lo, hi](const Array<S>& in, const Array<S>&) { return ((in >= lo) && (in <= hi)).template cast<S>(); });
}

template <typename S>
Tensor<S> log_sigmoid(const Tensor<S>& x) {
  return unary<S>(
      "log_sigmoid", x, [](S v) { return std::min(v, S(0)) - std::log1p(std::exp(-std::abs(v))); },
      [](const Array<S>& in, const Array<S>&) { return S(1) / (S(1) + in.exp()); });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error("log_softmax", "axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  Array<S> out(x.size());
  const S* in = x.values().data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index j = 0; j < s.inner; ++j) {
      const Index base = o * s.length * s.inner + j;
      S m = in[base];
      for (Index i = 1; i < s.length; ++i) m = std::max(m, in[base + i * s.inner]);
      S total = 0;
      for (Index i = 0; i < s.length; ++i) total += std::exp(in[base + i * s.inner] - m);
      const S lse = m + std::log(total);
      for (Index i = 0; i < s.length; ++i) out[base + i * s.inner] = in[base + i * s.inner] - lse;
    }
  }
  return detail::make_result<S>("log_softmax", x.shape(), std::move(out), {x}, [s](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (!in.requires_grad) return;
    Array<S>& dx = in.grad_buffer();
    for (Index o = 0; o < s.outer; ++o) {
      for (Index j = 0; j < s.inner; ++j) {
        const Index base = o * s.length * s.inner + j;
        S gsum = 0;
        for (Index i = 0; i < s.length; ++i) gsum += self.grad[base + i * s.inner];
        for (Index i = 0; i < s.length; ++i) {
          const Index k = base + i * s.inner;
          dx[k] += self.grad[k] - std::exp(self.value[k]) * gsum;
        }
      }
    }
  });
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error("softmax", "axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  Array<S> out(x.size());
  const S* in = x.values().data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index j = 0; j < s.inner; ++j) {
      const Index base = o * s.length * s.inner + j;
      S m = in[base];
      for (Index i = 1; i < s.length; ++i) m = std::max(m, in[base + i * s.inner]);
      S total = 0;
      for (Index i = 0; i < s.length; ++i) total += (out[base + i * s.inner] = std::exp(in[base + i * s.inner] - m));
      for (Index i = 0; i < s.length; ++i) out[base + i * s.inner] /= total;
    }
  }
  return detail::make_result<S>("softmax", x.shape(), std::move(out), {x}, [s](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (!in.requires_grad) return;
    Array<S>& dx = in.grad_buffer();
    for (Index o = 0; o < s.outer; ++o) {
      for (Index j = 0; j < s.inner; ++j) {
        const Index base = o * s.length * s.inner + j;
        S dot = 0;
        for (Index i = 0; i < s.length; ++i) dot += self.grad[base + i * s.inner] * self.value[base + i * s.inner];
        for (Index i = 0; i < s.length; ++i) {
          const Index k = base + i * s.inner;
          dx[k] += self.value[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const Index> targets) {
  require_rank("softmax_cross_entropy", logits, 2);
  const Index rows = logits.dim(0), classes = logits.dim(1);
  if (static_cast<Index>(targets.size()) != rows)
    shape_error("softmax_cross_entropy", std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  ConstMapRM<S> L(logits.values().data(), rows, classes);
  auto probs = std::make_shared<RowMatrix<S>>(rows, classes);
  auto target_copy = std::make_shared<std::vector<Index>>(targets.begin(), targets.end());
  Array<S> out(rows);
  for (Index r = 0; r < rows; ++r) {
    const Index t = targets[r];
    if (t < 0 || t >= classes)
      throw Error(ErrorKind::InvalidArgument, "softmax_cross_entropy", "target " + std::to_string(t) + " out of range");
    const S m = L.row(r).maxCoeff();
    probs->row(r) = (L.row(r).array() - m).exp().matrix();
    const S total = probs->row(r).sum();
    probs->row(r) /= total;
    out[r] = m + std::log(total) - L(r, t);
  }
  return detail::make_result<S>("softmax_cross_entropy", {rows}, std::move(out), {logits},
                                [rows, classes, probs, target_copy](Node<S>& self) {
                                  Node<S>& in = *self.parents[0];
                                  if (!in.requires_grad) return;
                                  MapRM<S> dL(in.grad_buffer().data(), rows, classes);
                                  for (Index r = 0; r < rows; ++r) {
                                    dL.row(r) += self.grad[r] * probs->row(r);
                                    dL(r, (*target_copy)[r]) -= self.grad[r];
                                  }
                                });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  return detail::make_result<S>("sum", {1}, Array<S>::Constant(1, x.values().sum()), {x}, [](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (in.requires_grad) in.grad_buffer() += self.grad[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S inv = S(1) / static_cast<S>(x.size());
  return detail::make_result<S>("mean", {1}, Array<S>::Constant(1, x.values().sum() * inv), {x}, [inv](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (in.requires_grad) in.grad_buffer() += self.grad[0] * inv;
  });
}

template <typename S>
Tensor<S> mean_spatial(const Tensor<S>& x) {
  require_rank("mean_spatial", x, 4);
  const Index planes = x.dim(0) * x.dim(1), size = x.dim(2) * x.dim(3);
  ConstMapRM<S> X(x.values().data(), planes, size);
  Array<S> out = X.rowwise().mean().array();
  return detail::make_result<S>("mean_spatial", {x.dim(0), x.dim(1)}, std::move(out), {x}, [planes, size](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (!in.requires_grad) return;
    MapRM<S>(in.grad_buffer().data(), planes, size).colwise() += self.grad.matrix() / static_cast<S>(size);
  });
}

template <typename S>
Tensor<S> l1_distance(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("l1_distance", a, b);
  const S inv = S(1) / static_cast<S>(a.size());
  const Array<S> diff = a.values() - b.values();
  return detail::make_result<S>("l1_distance", {1}, Array<S>::Constant(1, diff.abs().sum() * inv), {a, b},
                                [inv](Node<S>& self) {
                                  Node<S>& l = *self.parents[0];
                                  Node<S>& r = *self.parents[1];
                                  const Array<S> g = (l.value - r.value).sign() * (self.grad[0] * inv);
                                  if (l.requires_grad) l.grad_buffer() += g;
                                  if (r.requires_grad) r.grad_buffer() -= g;
                                });
}

template <typename S>
Tensor<S> squared_l2_distance(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("squared_l2_distance", a, b);
  const S inv = S(1) / static_cast<S>(a.size());
  const Array<S> diff = a.values() - b.values();
  return detail::make_result<S>("squared_l2_distance", {1}, Array<S>::Constant(1, diff.square().sum() * inv), {a, b},
                                [inv](Node<S>& self) {
                                  Node<S>& l = *self.parents[0];
                                  Node<S>& r = *self.parents[1];
                                  const Array<S> g = (l.value - r.value) * (S(2) * self.grad[0] * inv);
                                  if (l.requires_grad) l.grad_buffer() += g;
                                  if (r.requires_grad) r.grad_buffer() -= g;
                                });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return detail::make_result<S>("reshape", std::move(shape), x.values(), {x},
                                [](Node<S>& self) { accumulate(*self.parents[0], self.grad); });
}

template <typename S>
Tensor<S> concat(std::span<const Tensor<S>> parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "nothing to concatenate");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) shape_error("concat", "axis out of range for " + to_string(shape));
  std::vector<Index> lengths;
  Index total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) shape_error("concat", "rank mismatch: " + to_string(probe) + " vs " + to_string(shape));
    probe[axis] = shape[axis];
    if (probe != shape) shape_error("concat", "non-axis dims differ: " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
    lengths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  shape[axis] = total;
  const AxisSplit s = split_axis(shape, axis);
  Array<S> out(numel(shape));
  Index offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Index chunk = lengths[i] * s.inner;
    for (Index o = 0; o < s.outer; ++o)
      out.segment(o * total * s.inner + offset, chunk) = parts[i].values().segment(o * chunk, chunk);
    offset += chunk;
  }
  return detail::make_result<S>("concat", shape, std::move(out), std::vector<Tensor<S>>(parts.begin(), parts.end()),
                                [s, lengths, total](Node<S>& self) {
                                  Index offset = 0;
                                  for (std::size_t i = 0; i < lengths.size(); ++i) {
                                    const Index chunk = lengths[i] * s.inner;
                                    Node<S>& p = *self.parents[i];
                                    if (p.requires_grad) {
                                      Array<S>& g = p.grad_buffer();
                                      for (Index o = 0; o < s.outer; ++o)
                                        g.segment(o * chunk, chunk) += self.grad.segment(o * total * s.inner + offset, chunk);
                                    }
                                    offset += chunk;
                                  }
                                });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, std::size_t axis, Index begin, Index length) {
  if (axis >= x.rank()) shape_error("slice", "axis out of range for " + to_string(x.shape()));
  if (begin < 0 || length < 1 || begin + length > x.dim(axis))
    shape_error("slice", "range [" + std::to_string(begin) + ", " + std::to_string(begin + length) + ") outside " + to_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  const Index chunk = length * s.inner;
  Array<S> out(numel(shape));
  for (Index o = 0; o < s.outer; ++o)
    out.segment(o * chunk, chunk) = x.values().segment((o * s.length + begin) * s.inner, chunk);
  return detail::make_result<S>("slice", shape, std::move(out), {x}, [s, begin, chunk](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (!in.requires_grad) return;
    Array<S>& g = in.grad_buffer();
    for (Index o = 0; o < s.outer; ++o) g.segment((o * s.length + begin) * s.inner, chunk) += self.grad.segment(o * chunk, chunk);
  });
}

template <typename S>
Tensor<S> gather_locations(const Tensor<S>& x, std::span<const Index> locations) {
  require_rank("gather_locations", x, 4);
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Index count = static_cast<Index>(locations.size());
  if (count == 0) shape_error("gather_locations", "no locations requested");
  for (Index loc : locations)
    if (loc < 0 || loc >= plane)
      throw Error(ErrorKind::Range, "gather_locations",
                  "location " + std::to_string(loc) + " outside feature map " + to_string(x.shape()));
  auto locs = std::make_shared<std::vector<Index>>(locations.begin(), locations.end());
  Array<S> out(batch * count * channels);
  const S* in = x.values().data();
  for (Index n = 0; n < batch; ++n)
    for (Index i = 0; i < count; ++i)
      for (Index c = 0; c < channels; ++c)
        out[(n * count + i) * channels + c] = in[(n * channels + c) * plane + (*locs)[i]];
  return detail::make_result<S>("gather_locations", {batch * count, channels}, std::move(out), {x},
                                [batch, channels, plane, count, locs](Node<S>& self) {
                                  Node<S>& src = *self.parents[0];
                                  if (!src.requires_grad) return;
                                  Array<S>& g = src.grad_buffer();
                                  for (Index n = 0; n < batch; ++n)
                                    for (Index i = 0; i < count; ++i)
                                      for (Index c = 0; c < channels; ++c)
                                        g[(n * channels + c) * plane + (*locs)[i]] += self.grad[(n * count + i) * channels + c];
                                });
}

template <typename S>
Tensor<S> normalize_rows(const Tensor<S>& x, S epsilon) {
  require_rank("normalize_rows", x, 2);
  const Index rows = x.dim(0), width = x.dim(1);
  ConstMapRM<S> X(x.values().data(), rows, width);
  auto norms = std::make_shared<Array<S>>(X.rowwise().norm().array().max(epsilon));
  Array<S> out(x.size());
  MapRM<S>(out.data(), rows, width) = X.array().colwise() / (*norms);
  return detail::make_result<S>("normalize_rows", x.shape(), std::move(out), {x}, [rows, width, norms, epsilon](Node<S>& self) {
    Node<S>& in = *self.parents[0];
    if (!in.requires_grad) return;
    ConstMapRM<S> Y(self.value.data(), rows, width);
    ConstMapRM<S> G(self.grad.data(), rows, width);
    MapRM<S> dX(in.grad_buffer().data(), rows, width);
    for (Index r = 0; r < rows; ++r) {
      const S n = (*norms)[r];
      if (n > epsilon)
        dX.row(r) += (G.row(r) - Y.row(r) * Y.row(r).dot(G.row(r))) / n;
      else
        dX.row(r) += G.row(r) / n;
    }
  });
}

template <typename S>
Tensor<S> dropout(const Tensor<S>& x, S p, std::mt19937_64& rng) {
  if (!(p >= S(0) && p < S(1))) throw Error(ErrorKind::InvalidArgument, "dropout", "probability must be in [0, 1)");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  auto mask = std::make_shared<Array<S>>(x.size());
  const S scale_kept = S(1) / (S(1) - p);
  for (Index i = 0; i < x.size(); ++i) (*mask)[i] = keep(rng) ? scale_kept : S(0);
  return detail::make_result<S>("dropout", x.shape(), x.values() * (*mask), {x}, [mask](Node<S>& self) {
    accumulate(*self.parents[0], Array<S>(self.grad * (*mask)));
  });
}

#define CRANIO_INSTANTIATE_OPS(S)                                                                            \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> scale(const Tensor<S>&, S);                                                            \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                                       \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&, bool);                                      \
  template Tensor<S> add_row_bias(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, ConvParams);              \
  template Tensor<S> conv_transpose2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, ConvTransposeParams); \
  template Tensor<S> instance_norm(const Tensor<S>&, S);                                                    \
  template Tensor<S> relu(const Tensor<S>&);                                                                \
  template Tensor<S> leaky_relu(const Tensor<S>&, S);                                                       \
  template Tensor<S> tanh(const Tensor<S>&);                                                                \
  template Tensor<S> atanh(const Tensor<S>&);                                                               \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                             \
  template Tensor<S> log(const Tensor<S>&);                                                                 \
  template Tensor<S> exp(const Tensor<S>&);                                                                 \
  template Tensor<S> abs(const Tensor<S>&);                                                                 \
  template Tensor<S> clamp(const Tensor<S>&, S, S);                                                         \
  template Tensor<S> log_sigmoid(const Tensor<S>&);                                                         \
  template Tensor<S> softmax(const Tensor<S>&, std::size_t);                                                \
  template Tensor<S> log_softmax(const Tensor<S>&, std::size_t);                                            \
  template Tensor<S> softmax_cross_entropy(const Tensor<S>&, std::span<const Index>);                       \
  template Tensor<S> sum(const Tensor<S>&);                                                                 \
  template Tensor<S> mean(const Tensor<S>&);                                                                \
  template Tensor<S> mean_spatial(const Tensor<S>&);                                                        \
  template Tensor<S> l1_distance(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> squared_l2_distance(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                      \
  template Tensor<S> concat(std::span<const Tensor<S>>, std::size_t);                                       \
  template Tensor<S> slice(const Tensor<S>&, std::size_t, Index, Index);                                    \
  template Tensor<S> gather_locations(const Tensor<S>&, std::span<const Index>);                            \
  template Tensor<S> normalize_rows(const Tensor<S>&, S);                                                   \
  template Tensor<S> dropout(const Tensor<S>&, S, std::mt19937_64&);

CRANIO_INSTANTIATE_OPS(float)
CRANIO_INSTANTIATE_OPS(double)

}  // namespace cranio
