#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dsbel/tensor.hpp"

namespace dsbel {

struct ConvGeometry {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int dilation = 1;
  int pad = 0;

  int extent_h() const { return (kernel_h - 1) * dilation + 1; }
  int extent_w() const { return (kernel_w - 1) * dilation + 1; }
  // Output side for an input side, or throws ConfigError if the dilated
  // kernel does not fit the padded input.
  int out_h(int in_h) const;
  int out_w(int in_w) const;
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel_h * kernel_w;
  }
};

// Filter bank (out, in, kh, kw) and per-output-channel bias (1, out, 1, 1).
template <class T>
struct ConvSpec {
  ConvGeometry geom;
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  ConvSpec() = default;
  explicit ConvSpec(const ConvGeometry& g);
};

enum class PoolMode { Avg, Max };

struct PoolSpec {
  int window = 2;
  int stride = 2;
  int pad = 0;
  PoolMode mode = PoolMode::Max;

  int out_side(int in) const;
};

// Weight layout is (out_dim, in_dim): out_q = sum_p w[q][p] * in_p + b_q.
template <class T>
struct DenseSpec {
  int in_dim = 0;
  int out_dim = 0;
  std::vector<T> weight;
  std::vector<T> bias;
  std::vector<T> weight_grad;
  std::vector<T> bias_grad;

  DenseSpec() = default;
  DenseSpec(int in, int out);
  void zero_grad();
};

// conv2d --------------------------------------------------------------------

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const ConvSpec<T>& spec);

// Accumulates into spec.weight.grad() and spec.bias.grad(). Returns the
// input gradient, or an empty tensor when need_input_grad is false.
template <class T>
BasicTensor<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output,
                               ConvSpec<T>& spec, bool need_input_grad = true);

// pool2d --------------------------------------------------------------------

// AVG divides by window^2 even where the window overlaps padding. MAX ignores
// padded cells and records the flat input index of the first maximum.
template <class T>
BasicTensor<T> pool2d(const BasicTensor<T>& input, const PoolSpec& spec,
                      std::vector<std::int32_t>* argmax = nullptr);

template <class T>
BasicTensor<T> pool2d_backward(const Shape& input_shape, const BasicTensor<T>& grad_output,
                               const PoolSpec& spec, std::span<const std::int32_t> argmax = {});

// dense ---------------------------------------------------------------------

template <class T>
std::vector<T> dense(std::span<const T> input, const DenseSpec<T>& spec);

// Batched form: input is rows x in_dim, row-major.
template <class T>
std::vector<T> dense_rows(std::span<const T> input, int rows, const DenseSpec<T>& spec);

// Accumulates weight/bias gradients, returns the input gradient (rows x in_dim).
template <class T>
std::vector<T> dense_backward(std::span<const T> input, int rows, std::span<const T> grad_output,
                              DenseSpec<T>& spec);

// activations and regularizers ---------------------------------------------

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& input);

// grad * (output > 0), using the forward output.
template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_output);

// Inverted dropout. In training mode each element is zeroed with probability
// `rate` and survivors are scaled by 1/(1-rate); `mask` receives the applied
// multipliers. Inference mode is the identity.
template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& input, double rate, Rng& rng, bool train,
                       std::vector<T>* mask = nullptr);

template <class T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_output, std::span<const T> mask);

// Global average pool: (n, c, h, w) -> (n, c, 1, 1).
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input);

template <class T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape, const BasicTensor<T>& grad_output);

// concat / slice ------------------------------------------------------------

template <class T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> parts);

template <class T>
BasicTensor<T> concat_channels(std::initializer_list<const BasicTensor<T>*> parts) {
  std::vector<const BasicTensor<T>*> v(parts);
  return concat_channels<T>(std::span<const BasicTensor<T>* const>(v));
}

// Channels [first, first + count) of every sample.
template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, int first, int count);

// Splits a gradient of a concatenation back into per-part gradients.
template <class T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad, std::span<const int> channels);

// softmax / cross-entropy ---------------------------------------------------

template <class T>
struct SoftmaxXent {
  std::vector<T> probabilities;
  T loss = 0;
  std::vector<T> grad_logits;  // p - onehot(label)
};

template <class T>
std::vector<T> softmax(std::span<const T> logits);

template <class T>
SoftmaxXent<T> softmax_xent(std::span<const T> logits, int label);

}  // namespace dsbel
