#include "dsbel/layers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace dsbel {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad == 0;
}

// Patch matrix of one sample: rows (ci, ki, kj), columns output pixels.
template <class T>
void im2col(const T* in, int channels, int in_h, int in_w, const ConvGeometry& g, int out_h,
            int out_w, T* col) {
  const std::size_t hw_out = static_cast<std::size_t>(out_h) * out_w;
  for (int ci = 0; ci < channels; ++ci) {
    const T* plane = in + static_cast<std::size_t>(ci) * in_h * in_w;
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        T* row = col + ((static_cast<std::size_t>(ci) * g.kernel_h + ki) * g.kernel_w + kj) * hw_out;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + ki * g.dilation;
          T* dst = row + static_cast<std::size_t>(oh) * out_w;
          if (ih < 0 || ih >= in_h) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * in_w;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * g.stride - g.pad + kj * g.dilation;
            dst[ow] = (iw >= 0 && iw < in_w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, int channels, int in_h, int in_w, const ConvGeometry& g, int out_h,
            int out_w, T* in) {
  const std::size_t hw_out = static_cast<std::size_t>(out_h) * out_w;
  for (int ci = 0; ci < channels; ++ci) {
    T* plane = in + static_cast<std::size_t>(ci) * in_h * in_w;
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        const T* row = col + ((static_cast<std::size_t>(ci) * g.kernel_h + ki) * g.kernel_w + kj) * hw_out;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + ki * g.dilation;
          if (ih < 0 || ih >= in_h) continue;
          const T* src = row + static_cast<std::size_t>(oh) * out_w;
          T* dst = plane + static_cast<std::size_t>(ih) * in_w;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * g.stride - g.pad + kj * g.dilation;
            if (iw >= 0 && iw < in_w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

void check_conv_input(const Shape& s, const ConvGeometry& g) {
  if (s.c != g.in_channels)
    throw ConfigError("conv2d: input has " + std::to_string(s.c) + " channels, filter expects " +
                      std::to_string(g.in_channels));
}

}  // namespace

int ConvGeometry::out_h(int in_h) const {
  if (stride < 1 || dilation < 1 || pad < 0) throw ConfigError("conv2d: invalid stride/dilation/pad");
  if (extent_h() > in_h + 2 * pad)
    throw ConfigError("conv2d: dilated kernel height " + std::to_string(extent_h()) +
                      " exceeds padded input " + std::to_string(in_h + 2 * pad));
  return (in_h + 2 * pad - extent_h()) / stride + 1;
}

int ConvGeometry::out_w(int in_w) const {
  if (stride < 1 || dilation < 1 || pad < 0) throw ConfigError("conv2d: invalid stride/dilation/pad");
  if (extent_w() > in_w + 2 * pad)
    throw ConfigError("conv2d: dilated kernel width " + std::to_string(extent_w()) +
                      " exceeds padded input " + std::to_string(in_w + 2 * pad));
  return (in_w + 2 * pad - extent_w()) / stride + 1;
}

template <class T>
ConvSpec<T>::ConvSpec(const ConvGeometry& g)
    : geom(g),
      weight(Shape{g.out_channels, g.in_channels, g.kernel_h, g.kernel_w}),
      bias(Shape{1, g.out_channels, 1, 1}) {}

int PoolSpec::out_side(int in) const {
  if (window < 1 || stride < 1) throw ConfigError("pool2d: window and stride must be >= 1");
  if (pad < 0 || pad >= window) throw ConfigError("pool2d: padding must be in [0, window)");
  if (window > in + 2 * pad)
    throw ConfigError("pool2d: window " + std::to_string(window) + " larger than padded input " +
                      std::to_string(in + 2 * pad));
  return (in + 2 * pad - window) / stride + 1;
}

template <class T>
DenseSpec<T>::DenseSpec(int in, int out)
    : in_dim(in),
      out_dim(out),
      weight(static_cast<std::size_t>(in) * out, T(0)),
      bias(static_cast<std::size_t>(out), T(0)) {
  if (in < 1 || out < 1) throw ConfigError("dense: dimensions must be >= 1");
}

template <class T>
void DenseSpec<T>::zero_grad() {
  weight_grad.assign(weight.size(), T(0));
  bias_grad.assign(bias.size(), T(0));
}

// conv2d --------------------------------------------------------------------

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const ConvSpec<T>& spec) {
  const ConvGeometry& g = spec.geom;
  const Shape& s = input.shape();
  check_conv_input(s, g);
  if (spec.weight.size() != g.weight_count())
    throw ConfigError("conv2d: weight count does not match geometry");
  const int oh = g.out_h(s.h);
  const int ow = g.out_w(s.w);
  BasicTensor<T> out(Shape{s.n, g.out_channels, oh, ow});
  const int k = g.in_channels * g.kernel_h * g.kernel_w;
  const int hw = oh * ow;
  ConstMapMat<T> w(spec.weight.data().data(), g.out_channels, k);
  const T* bias = spec.bias.data().data();
  const bool pointwise = is_pointwise(g);

  parallel_for(s.n, [&](int n) {
    std::vector<T> col;
    const T* patches = input.sample(n);
    if (!pointwise) {
      col.resize(static_cast<std::size_t>(k) * hw);
      im2col(input.sample(n), s.c, s.h, s.w, g, oh, ow, col.data());
      patches = col.data();
    }
    MapMat<T> y(out.sample(n), g.out_channels, hw);
    y.noalias() = w * ConstMapMat<T>(patches, k, hw);
    for (int co = 0; co < g.out_channels; ++co) y.row(co).array() += bias[co];
  });
  out.check_finite("conv2d");
  return out;
}

template <class T>
BasicTensor<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output,
                               ConvSpec<T>& spec, bool need_input_grad) {
  const ConvGeometry& g = spec.geom;
  const Shape& s = input.shape();
  check_conv_input(s, g);
  const int oh = g.out_h(s.h);
  const int ow = g.out_w(s.w);
  if (grad_output.shape() != Shape{s.n, g.out_channels, oh, ow})
    throw ConfigError("conv2d_backward: gradient shape " + to_string(grad_output.shape()) +
                      " does not match output shape");
  const int k = g.in_channels * g.kernel_h * g.kernel_w;
  const int hw = oh * ow;
  const bool pointwise = is_pointwise(g);
  ConstMapMat<T> w(spec.weight.data().data(), g.out_channels, k);

  BasicTensor<T> grad_input;
  if (need_input_grad) {
    grad_input = BasicTensor<T>(s);
    parallel_for(s.n, [&](int n) {
      ConstMapMat<T> gy(grad_output.sample(n), g.out_channels, hw);
      if (pointwise) {
        MapMat<T>(grad_input.sample(n), k, hw).noalias() = w.transpose() * gy;
      } else {
        std::vector<T> dcol(static_cast<std::size_t>(k) * hw);
        MapMat<T>(dcol.data(), k, hw).noalias() = w.transpose() * gy;
        col2im(dcol.data(), s.c, s.h, s.w, g, oh, ow, grad_input.sample(n));
      }
    });
  }

  // Parameter gradients are summed in sample order.
  MapMat<T> dw(spec.weight.grad().data(), g.out_channels, k);
  auto db = spec.bias.grad();
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(k) * hw);
  for (int n = 0; n < s.n; ++n) {
    const T* patches = input.sample(n);
    if (!pointwise) {
      im2col(input.sample(n), s.c, s.h, s.w, g, oh, ow, col.data());
      patches = col.data();
    }
    ConstMapMat<T> gy(grad_output.sample(n), g.out_channels, hw);
    dw.noalias() += gy * ConstMapMat<T>(patches, k, hw).transpose();
    for (int co = 0; co < g.out_channels; ++co) db[co] += gy.row(co).sum();
  }
  return grad_input;
}

// pool2d --------------------------------------------------------------------

template <class T>
BasicTensor<T> pool2d(const BasicTensor<T>& input, const PoolSpec& spec,
                      std::vector<std::int32_t>* argmax) {
  const Shape& s = input.shape();
  const int oh = spec.out_side(s.h);
  const int ow = spec.out_side(s.w);
  BasicTensor<T> out(Shape{s.n, s.c, oh, ow});
  if (input.size() > static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max()))
    throw ConfigError("pool2d: input too large for index bookkeeping");
  if (spec.mode == PoolMode::Max && argmax) argmax->assign(out.size(), -1);
  const T inv_area = T(1) / static_cast<T>(spec.window * spec.window);

  parallel_for(s.n, [&](int n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t plane_off = (static_cast<std::size_t>(n) * s.c + c) * s.plane();
      const T* plane = input.data().data() + plane_off;
      T* dst = out.data().data() + (static_cast<std::size_t>(n) * s.c + c) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        const int y0 = y * spec.stride - spec.pad;
        const int ya = std::max(y0, 0);
        const int yb = std::min(y0 + spec.window, s.h);
        for (int x = 0; x < ow; ++x) {
          const int x0 = x * spec.stride - spec.pad;
          const int xa = std::max(x0, 0);
          const int xb = std::min(x0 + spec.window, s.w);
          const std::size_t o = static_cast<std::size_t>(y) * ow + x;
          if (spec.mode == PoolMode::Avg) {
            T acc = 0;
            for (int iy = ya; iy < yb; ++iy)
              for (int ix = xa; ix < xb; ++ix) acc += plane[iy * s.w + ix];
            dst[o] = acc * inv_area;
          } else {
            T best = plane[ya * s.w + xa];
            int best_idx = ya * s.w + xa;
            for (int iy = ya; iy < yb; ++iy) {
              for (int ix = xa; ix < xb; ++ix) {
                const T v = plane[iy * s.w + ix];
                if (v > best) {
                  best = v;
                  best_idx = iy * s.w + ix;
                }
              }
            }
            dst[o] = best;
            if (argmax) {
              (*argmax)[(static_cast<std::size_t>(n) * s.c + c) * oh * ow + o] =
                  static_cast<std::int32_t>(plane_off + best_idx);
            }
          }
        }
      }
    }
  });
  return out;
}

template <class T>
BasicTensor<T> pool2d_backward(const Shape& s, const BasicTensor<T>& grad_output, const PoolSpec& spec,
                               std::span<const std::int32_t> argmax) {
  const int oh = spec.out_side(s.h);
  const int ow = spec.out_side(s.w);
  if (grad_output.shape() != Shape{s.n, s.c, oh, ow})
    throw ConfigError("pool2d_backward: gradient shape mismatch");
  BasicTensor<T> grad_input(s);
  auto gi = grad_input.data();
  auto go = grad_output.data();
  if (spec.mode == PoolMode::Max) {
    if (argmax.size() != go.size()) throw ConfigError("pool2d_backward: missing argmax record");
    for (std::size_t i = 0; i < go.size(); ++i) gi[static_cast<std::size_t>(argmax[i])] += go[i];
    return grad_input;
  }
  const T inv_area = T(1) / static_cast<T>(spec.window * spec.window);
  parallel_for(s.n, [&](int n) {
    for (int c = 0; c < s.c; ++c) {
      T* plane = gi.data() + (static_cast<std::size_t>(n) * s.c + c) * s.plane();
      const T* src = go.data() + (static_cast<std::size_t>(n) * s.c + c) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        const int y0 = y * spec.stride - spec.pad;
        const int ya = std::max(y0, 0);
        const int yb = std::min(y0 + spec.window, s.h);
        for (int x = 0; x < ow; ++x) {
          const int x0 = x * spec.stride - spec.pad;
          const int xa = std::max(x0, 0);
          const int xb = std::min(x0 + spec.window, s.w);
          const T g = src[y * ow + x] * inv_area;
          for (int iy = ya; iy < yb; ++iy)
            for (int ix = xa; ix < xb; ++ix) plane[iy * s.w + ix] += g;
        }
      }
    }
  });
  return grad_input;
}

// dense ---------------------------------------------------------------------

template <class T>
std::vector<T> dense(std::span<const T> input, const DenseSpec<T>& spec) {
  return dense_rows(input, 1, spec);
}

template <class T>
std::vector<T> dense_rows(std::span<const T> input, int rows, const DenseSpec<T>& spec) {
  if (input.size() != static_cast<std::size_t>(rows) * spec.in_dim)
    throw ConfigError("dense: input length " + std::to_string(input.size()) + " does not match " +
                      std::to_string(rows) + " x " + std::to_string(spec.in_dim));
  std::vector<T> out(static_cast<std::size_t>(rows) * spec.out_dim);
  ConstMapMat<T> x(input.data(), rows, spec.in_dim);
  ConstMapMat<T> w(spec.weight.data(), spec.out_dim, spec.in_dim);
  MapMat<T> y(out.data(), rows, spec.out_dim);
  y.noalias() = x * w.transpose();
  for (int r = 0; r < rows; ++r)
    for (int q = 0; q < spec.out_dim; ++q) y(r, q) += spec.bias[q];
  for (T v : out)
    if (!std::isfinite(v)) throw NumericError("dense: non-finite output");
  return out;
}

template <class T>
std::vector<T> dense_backward(std::span<const T> input, int rows, std::span<const T> grad_output,
                              DenseSpec<T>& spec) {
  if (input.size() != static_cast<std::size_t>(rows) * spec.in_dim ||
      grad_output.size() != static_cast<std::size_t>(rows) * spec.out_dim)
    throw ConfigError("dense_backward: length mismatch");
  if (spec.weight_grad.size() != spec.weight.size()) spec.zero_grad();
  ConstMapMat<T> x(input.data(), rows, spec.in_dim);
  ConstMapMat<T> gy(grad_output.data(), rows, spec.out_dim);
  ConstMapMat<T> w(spec.weight.data(), spec.out_dim, spec.in_dim);
  MapMat<T>(spec.weight_grad.data(), spec.out_dim, spec.in_dim).noalias() += gy.transpose() * x;
  for (int r = 0; r < rows; ++r)
    for (int q = 0; q < spec.out_dim; ++q) spec.bias_grad[q] += gy(r, q);
  std::vector<T> grad_input(static_cast<std::size_t>(rows) * spec.in_dim);
  MapMat<T>(grad_input.data(), rows, spec.in_dim).noalias() = gy * w;
  return grad_input;
}

// activations and regularizers ---------------------------------------------

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  auto src = input.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  return out;
}

template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_output) {
  if (output.shape() != grad_output.shape()) throw ConfigError("relu_backward: shape mismatch");
  BasicTensor<T> gi(output.shape());
  auto y = output.data();
  auto g = grad_output.data();
  auto d = gi.data();
  for (std::size_t i = 0; i < y.size(); ++i) d[i] = y[i] > T(0) ? g[i] : T(0);
  return gi;
}

template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, Rng& rng, bool train, std::vector<T>* mask) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) {
    if (mask) mask->assign(input.size(), T(1));
    return input;
  }
  BasicTensor<T> out(input.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> local;
  std::vector<T>& m = mask ? *mask : local;
  m.resize(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    m[i] = rng.bernoulli(rate) ? T(0) : keep_scale;
    out[i] = input[i] * m[i];
  }
  return out;
}

template <class T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_output, std::span<const T> mask) {
  if (mask.size() != grad_output.size()) throw ConfigError("dropout_backward: mask length mismatch");
  BasicTensor<T> gi(grad_output.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) gi[i] = grad_output[i] * mask[i];
  return gi;
}

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  const Shape& s = input.shape();
  BasicTensor<T> out(Shape{s.n, s.c, 1, 1});
  const std::size_t plane = s.plane();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T* p = input.data().data() + i * plane;
    T acc = 0;
    for (std::size_t j = 0; j < plane; ++j) acc += p[j];
    out[i] = acc / static_cast<T>(plane);
  }
  return out;
}

template <class T>
BasicTensor<T> global_avg_pool_backward(const Shape& s, const BasicTensor<T>& grad_output) {
  if (grad_output.shape() != Shape{s.n, s.c, 1, 1}) throw ConfigError("global_avg_pool_backward: shape mismatch");
  BasicTensor<T> gi(s);
  const std::size_t plane = s.plane();
  for (std::size_t i = 0; i < grad_output.size(); ++i) {
    const T g = grad_output[i] / static_cast<T>(plane);
    std::fill_n(gi.data().data() + i * plane, plane, g);
  }
  return gi;
}

// concat / slice ------------------------------------------------------------

template <class T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> parts) {
  if (parts.empty()) throw ConfigError("concat_channels: no inputs");
  const Shape& first = parts.front()->shape();
  int channels = 0;
  for (const auto* p : parts) {
    const Shape& s = p->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ConfigError("concat_channels: spatial mismatch " + to_string(s) + " vs " + to_string(first));
    channels += s.c;
  }
  BasicTensor<T> out(Shape{first.n, channels, first.h, first.w});
  for (int n = 0; n < first.n; ++n) {
    T* dst = out.sample(n);
    for (const auto* p : parts) {
      const std::size_t len = p->shape().sample();
      std::copy_n(p->sample(n), len, dst);
      dst += len;
    }
  }
  return out;
}

template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, int first, int count) {
  const Shape& s = input.shape();
  if (first < 0 || count < 0 || first + count > s.c) throw ConfigError("slice_channels: range out of bounds");
  BasicTensor<T> out(Shape{s.n, count, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    std::copy_n(input.sample(n) + static_cast<std::size_t>(first) * s.plane(), out.shape().sample(),
                out.sample(n));
  return out;
}

template <class T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad, std::span<const int> channels) {
  std::vector<BasicTensor<T>> parts;
  int first = 0;
  for (int c : channels) {
    parts.push_back(slice_channels(grad, first, c));
    first += c;
  }
  if (first != grad.shape().c) throw ConfigError("split_channels: channel counts do not sum to input");
  return parts;
}

// softmax / cross-entropy ---------------------------------------------------

template <class T>
std::vector<T> softmax(std::span<const T> logits) {
  if (logits.size() < 2) throw ConfigError("softmax: need at least two classes");
  T mx = logits[0];
  for (T v : logits) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
    mx = std::max(mx, v);
  }
  std::vector<T> p(logits.size());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (T& v : p) v /= sum;
  return p;
}

template <class T>
SoftmaxXent<T> softmax_xent(std::span<const T> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw ConfigError("softmax_xent: label out of range");
  SoftmaxXent<T> r;
  r.probabilities = softmax(logits);
  T mx = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (T v : logits) sum += std::exp(v - mx);
  r.loss = std::log(sum) - (logits[label] - mx);
  r.grad_logits = r.probabilities;
  r.grad_logits[label] -= T(1);
  return r;
}

#define DSBEL_INSTANTIATE(T)                                                                          \
  template struct ConvSpec<T>;                                                                        \
  template struct DenseSpec<T>;                                                                       \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const ConvSpec<T>&);                          \
  template BasicTensor<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, ConvSpec<T>&, \
                                          bool);                                                      \
  template BasicTensor<T> pool2d(const BasicTensor<T>&, const PoolSpec&, std::vector<std::int32_t>*); \
  template BasicTensor<T> pool2d_backward(const Shape&, const BasicTensor<T>&, const PoolSpec&,       \
                                          std::span<const std::int32_t>);                             \
  template std::vector<T> dense(std::span<const T>, const DenseSpec<T>&);                             \
  template std::vector<T> dense_rows(std::span<const T>, int, const DenseSpec<T>&);                   \
  template std::vector<T> dense_backward(std::span<const T>, int, std::span<const T>, DenseSpec<T>&); \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng&, bool, std::vector<T>*);        \
  template BasicTensor<T> dropout_backward(const BasicTensor<T>&, std::span<const T>);                \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                     \
  template BasicTensor<T> global_avg_pool_backward(const Shape&, const BasicTensor<T>&);              \
  template BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const>);                    \
  template BasicTensor<T> slice_channels(const BasicTensor<T>&, int, int);                            \
  template std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>&, std::span<const int>);   \
  template std::vector<T> softmax(std::span<const T>);                                                \
  template SoftmaxXent<T> softmax_xent(std::span<const T>, int);

DSBEL_INSTANTIATE(float)
DSBEL_INSTANTIATE(double)

#undef DSBEL_INSTANTIATE

}  // namespace dsbel
