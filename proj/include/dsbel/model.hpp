#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsbel/layers.hpp"

namespace dsbel {

struct ModelConfig {
  int input_channels = 1;
  int input_side = 64;
  // Per-path squeeze widths; each STM block merges four paths to 4x this.
  std::vector<int> stm_widths{32, 64, 128};
  int fusion_width = 512;
  int surrogate_classes = 2;
  double dropout_rate = 0.5;
  std::uint64_t seed = 0;

  std::vector<int> merged_widths() const;
  // Channels entering the fusion conv: aux and main STM-2 and STM-3 outputs.
  int boosted_channels() const;
  // Spatial side of each STM block's output (after its 2x2 max-pool).
  std::array<int, 3> block_sides() const;

  void validate() const;

  // Canonical one-key-per-line text, stable across runs.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  // Applies one key=value setting; returns false for unknown keys.
  bool set(const std::string& key, const std::string& value);

  bool operator==(const ModelConfig&) const = default;
};

// Closed-form parameter count of a configuration.
std::size_t parameter_count(const ModelConfig& config);

// One split-transform-merge block: four parallel paths of `squeeze` channels
// (boundary: 3x3 max-pool then 1x1 conv, region: 3x3 avg-pool then 1x1 conv,
// 3x3 conv dilation 1, 3x3 conv dilation 2), each followed by ReLU, then
// concatenated and downsampled by a 2x2 max-pool.
template <class T>
struct StmBlock {
  ConvSpec<T> boundary;
  ConvSpec<T> region;
  ConvSpec<T> dilated1;
  ConvSpec<T> dilated2;

  StmBlock() = default;
  StmBlock(int in_channels, int squeeze);

  int squeeze() const { return boundary.geom.out_channels; }
  int merged() const { return 4 * squeeze(); }
};

template <class T>
struct StmCache {
  BasicTensor<T> input;
  BasicTensor<T> max_pooled;
  std::vector<std::int32_t> max_argmax;
  BasicTensor<T> avg_pooled;
  std::array<BasicTensor<T>, 4> paths;
  Shape merged_shape;
  std::vector<std::int32_t> merge_argmax;
};

template <class T>
BasicTensor<T> stm_forward(const StmBlock<T>& block, const BasicTensor<T>& input, StmCache<T>* cache);

template <class T>
BasicTensor<T> stm_backward(StmBlock<T>& block, const StmCache<T>& cache, const BasicTensor<T>& grad_output,
                            bool need_input_grad);

template <class T>
using Stem = std::array<StmBlock<T>, 3>;

template <class T>
struct ParamRef {
  std::string name;
  std::span<T> value;
  std::span<T> grad;
  bool frozen = false;
};

template <class T>
struct ForwardCache {
  std::array<StmCache<T>, 3> main;
  std::array<StmCache<T>, 3> aux;
  bool aux_cached = false;
  std::vector<std::int32_t> main_align_argmax;
  std::vector<std::int32_t> aux_align_argmax;
  Shape main_block2_shape;
  Shape aux_block2_shape;
  BasicTensor<T> boosted;
  BasicTensor<T> fused;  // post-ReLU block-F activations
  BasicTensor<T> pooled;
  std::vector<T> dropout_mask;
  std::vector<T> head_input;
};

template <class T>
struct ForwardOutput {
  int batch = 0;
  std::vector<T> logits;         // batch x 2
  std::vector<T> probabilities;  // batch x 2
  std::vector<T> features;       // batch x fusion_width, pre-dropout
};

// SB-BR-STM network: a trainable main stem and an auxiliary stem (frozen
// after surrogate pretraining), channel boosting of their STM-2/STM-3
// outputs, a 1x1 fusion conv, global average pooling, dropout and a
// two-class dense head.
template <class T>
class BasicModel {
 public:
  BasicModel() = default;
  // He-uniform weights (bound sqrt(6 / fan_in)), zero biases, seeded by
  // config.seed.
  static BasicModel build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  bool aux_frozen() const { return aux_frozen_; }
  void set_aux_frozen(bool frozen) { aux_frozen_ = frozen; }

  // Parameters in checkpoint traversal order.
  std::vector<ParamRef<T>> parameters();
  std::size_t parameter_count() const;
  void zero_grad();

  ForwardOutput<T> forward(const BasicTensor<T>& batch, bool train, Rng* rng = nullptr,
                           ForwardCache<T>* cache = nullptr) const;
  // grad_logits is batch x 2; accumulates parameter gradients. Aux stem
  // gradients are computed only when the aux stem is not frozen.
  void backward(const ForwardCache<T>& cache, std::span<const T> grad_logits);

  // Surrogate path: aux stem -> global average pool -> aux head.
  ForwardOutput<T> aux_forward(const BasicTensor<T>& batch, ForwardCache<T>* cache = nullptr) const;
  void aux_backward(const ForwardCache<T>& cache, std::span<const T> grad_logits);

  // Pre-head features: global-average-pooled fusion activations in
  // inference mode (n x fusion_width).
  std::vector<T> extract_features(const BasicTensor<T>& batch) const;

  Stem<T>& main_stem() { return main_; }
  Stem<T>& aux_stem() { return aux_; }
  const Stem<T>& main_stem() const { return main_; }
  const Stem<T>& aux_stem() const { return aux_; }
  ConvSpec<T>& fusion() { return fusion_; }
  DenseSpec<T>& head() { return head_; }
  DenseSpec<T>& aux_head() { return aux_head_; }

  // Copies all parameter values into a model with another scalar type.
  template <class U>
  BasicModel<U> cast() const;

  template <class>
  friend class BasicModel;

 private:
  void check_input(const BasicTensor<T>& batch) const;

  ModelConfig config_;
  Stem<T> main_;
  Stem<T> aux_;
  DenseSpec<T> aux_head_;
  ConvSpec<T> fusion_;
  DenseSpec<T> head_;
  bool aux_frozen_ = false;
};

using Model = BasicModel<float>;

extern template class BasicModel<float>;
extern template class BasicModel<double>;

// Raw bytes of every aux-stem and aux-head parameter, for freeze checks.
std::vector<std::uint8_t> aux_parameter_bytes(Model& model);

}  // namespace dsbel
