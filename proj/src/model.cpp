#include "dsbel/model.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace dsbel {

namespace {

const PoolSpec kBoundaryPool{3, 1, 1, PoolMode::Max};
const PoolSpec kRegionPool{3, 1, 1, PoolMode::Avg};
const PoolSpec kDownsample{2, 2, 0, PoolMode::Max};

std::vector<int> parse_int_list(const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (used != item.size()) throw ConfigError("malformed integer list '" + value + "'");
    out.push_back(v);
  }
  return out;
}

template <class T>
void he_uniform(std::span<T> values, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  for (T& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
void init_conv(ConvSpec<T>& conv, Rng& rng) {
  he_uniform(conv.weight.data(), conv.geom.in_channels * conv.geom.kernel_h * conv.geom.kernel_w, rng);
  std::fill(conv.bias.data().begin(), conv.bias.data().end(), T(0));
}

template <class T>
void init_dense(DenseSpec<T>& dense, Rng& rng) {
  he_uniform(std::span<T>(dense.weight), dense.in_dim, rng);
  std::fill(dense.bias.begin(), dense.bias.end(), T(0));
}

template <class T>
void add_conv(std::vector<ParamRef<T>>& out, const std::string& name, ConvSpec<T>& conv, bool frozen) {
  out.push_back({name + ".weight", conv.weight.data(), conv.weight.grad(), frozen});
  out.push_back({name + ".bias", conv.bias.data(), conv.bias.grad(), frozen});
}

template <class T>
void add_dense(std::vector<ParamRef<T>>& out, const std::string& name, DenseSpec<T>& dense, bool frozen) {
  if (dense.weight_grad.size() != dense.weight.size()) dense.zero_grad();
  out.push_back({name + ".weight", dense.weight, dense.weight_grad, frozen});
  out.push_back({name + ".bias", dense.bias, dense.bias_grad, frozen});
}

template <class T>
void add_stem(std::vector<ParamRef<T>>& out, const std::string& prefix, Stem<T>& stem, bool frozen) {
  for (std::size_t b = 0; b < stem.size(); ++b) {
    const std::string p = prefix + ".stm" + std::to_string(b + 1);
    add_conv(out, p + ".boundary", stem[b].boundary, frozen);
    add_conv(out, p + ".region", stem[b].region, frozen);
    add_conv(out, p + ".dilated1", stem[b].dilated1, frozen);
    add_conv(out, p + ".dilated2", stem[b].dilated2, frozen);
  }
}

template <class T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <class T, class U>
void copy_values(std::span<const T> src, std::span<U> dst) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<U>(src[i]);
}

}  // namespace

// ModelConfig -----------------------------------------------------------------

std::vector<int> ModelConfig::merged_widths() const {
  std::vector<int> out;
  for (int s : stm_widths) out.push_back(4 * s);
  return out;
}

int ModelConfig::boosted_channels() const {
  const auto m = merged_widths();
  return 2 * (m.at(1) + m.at(2));
}

std::array<int, 3> ModelConfig::block_sides() const {
  std::array<int, 3> sides{};
  int side = input_side;
  for (int& s : sides) {
    side = side / 2;
    s = side;
  }
  return sides;
}

void ModelConfig::validate() const {
  if (stm_widths.size() != 3)
    throw ConfigError("stm_widths must list exactly three STM blocks, got " + std::to_string(stm_widths.size()));
  for (int s : stm_widths)
    if (s < 1) throw ConfigError("stm_widths entries must be >= 1");
  if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
  if (input_side < 8) throw ConfigError("input_side must be >= 8 for three 2x2 downsamplings");
  if (fusion_width < 1) throw ConfigError("fusion_width must be >= 1");
  if (surrogate_classes < 2) throw ConfigError("surrogate_classes must be >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must be in [0, 1)");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "input_channels=" << input_channels << "\n";
  os << "input_side=" << input_side << "\n";
  os << "stm_widths=";
  for (std::size_t i = 0; i < stm_widths.size(); ++i) os << (i ? "," : "") << stm_widths[i];
  os << "\n";
  os << "fusion_width=" << fusion_width << "\n";
  os << "surrogate_classes=" << surrogate_classes << "\n";
  char rate[32];
  std::snprintf(rate, sizeof rate, "%.17g", dropout_rate);
  os << "dropout_rate=" << rate << "\n";
  os << "seed=" << seed << "\n";
  return os.str();
}

bool ModelConfig::set(const std::string& key, const std::string& value) {
  try {
    if (key == "input_channels") input_channels = std::stoi(value);
    else if (key == "input_side") input_side = std::stoi(value);
    else if (key == "stm_widths") stm_widths = parse_int_list(value);
    else if (key == "fusion_width") fusion_width = std::stoi(value);
    else if (key == "surrogate_classes") surrogate_classes = std::stoi(value);
    else if (key == "dropout_rate") dropout_rate = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else return false;
  } catch (const std::logic_error&) {
    throw ConfigError("invalid value '" + value + "' for key " + key);
  }
  return true;
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line without '=': " + line);
    if (!c.set(line.substr(0, eq), line.substr(eq + 1)))
      throw FormatError("unknown config key: " + line.substr(0, eq));
  }
  c.validate();
  return c;
}

std::size_t parameter_count(const ModelConfig& config) {
  config.validate();
  std::size_t stem = 0;
  std::size_t in = static_cast<std::size_t>(config.input_channels);
  for (int s : config.stm_widths) {
    const std::size_t sq = static_cast<std::size_t>(s);
    stem += 2 * (in * sq + sq) + 2 * (9 * in * sq + sq);
    in = 4 * sq;
  }
  const std::size_t merged3 = in;
  const std::size_t f = static_cast<std::size_t>(config.fusion_width);
  const std::size_t classes = static_cast<std::size_t>(config.surrogate_classes);
  return 2 * stem + (merged3 * classes + classes) + (config.boosted_channels() * f + f) + (f * 2 + 2);
}

// STM block -----------------------------------------------------------------

template <class T>
StmBlock<T>::StmBlock(int in_channels, int squeeze)
    : boundary(ConvGeometry{in_channels, squeeze, 1, 1, 1, 1, 0}),
      region(ConvGeometry{in_channels, squeeze, 1, 1, 1, 1, 0}),
      dilated1(ConvGeometry{in_channels, squeeze, 3, 3, 1, 1, 1}),
      dilated2(ConvGeometry{in_channels, squeeze, 3, 3, 1, 2, 2}) {}

template <class T>
BasicTensor<T> stm_forward(const StmBlock<T>& block, const BasicTensor<T>& input, StmCache<T>* cache) {
  std::vector<std::int32_t> max_argmax;
  BasicTensor<T> max_pooled = pool2d(input, kBoundaryPool, &max_argmax);
  BasicTensor<T> avg_pooled = pool2d(input, kRegionPool);
  std::array<BasicTensor<T>, 4> paths{
      relu(conv2d(max_pooled, block.boundary)),
      relu(conv2d(avg_pooled, block.region)),
      relu(conv2d(input, block.dilated1)),
      relu(conv2d(input, block.dilated2)),
  };
  BasicTensor<T> merged = concat_channels<T>({&paths[0], &paths[1], &paths[2], &paths[3]});
  std::vector<std::int32_t> merge_argmax;
  BasicTensor<T> out = pool2d(merged, kDownsample, cache ? &merge_argmax : nullptr);
  if (cache) {
    cache->input = input;
    cache->max_pooled = std::move(max_pooled);
    cache->max_argmax = std::move(max_argmax);
    cache->avg_pooled = std::move(avg_pooled);
    cache->paths = std::move(paths);
    cache->merged_shape = merged.shape();
    cache->merge_argmax = std::move(merge_argmax);
  }
  return out;
}

template <class T>
BasicTensor<T> stm_backward(StmBlock<T>& block, const StmCache<T>& cache, const BasicTensor<T>& grad_output,
                            bool need_input_grad) {
  const BasicTensor<T> grad_merged =
      pool2d_backward(cache.merged_shape, grad_output, kDownsample, cache.merge_argmax);
  const int s = block.squeeze();
  const std::array<int, 4> widths{s, s, s, s};
  auto grads = split_channels(grad_merged, std::span<const int>(widths));
  for (int p = 0; p < 4; ++p) grads[p] = relu_backward(cache.paths[p], grads[p]);

  const Shape& in_shape = cache.input.shape();
  BasicTensor<T> grad_max = conv2d_backward(cache.max_pooled, grads[0], block.boundary, need_input_grad);
  BasicTensor<T> grad_avg = conv2d_backward(cache.avg_pooled, grads[1], block.region, need_input_grad);
  BasicTensor<T> grad_d1 = conv2d_backward(cache.input, grads[2], block.dilated1, need_input_grad);
  BasicTensor<T> grad_d2 = conv2d_backward(cache.input, grads[3], block.dilated2, need_input_grad);
  if (!need_input_grad) return {};
  BasicTensor<T> grad_input = pool2d_backward(in_shape, grad_max, kBoundaryPool, cache.max_argmax);
  add_into(grad_input, pool2d_backward(in_shape, grad_avg, kRegionPool));
  add_into(grad_input, grad_d1);
  add_into(grad_input, grad_d2);
  return grad_input;
}

// Model ---------------------------------------------------------------------

template <class T>
BasicModel<T> BasicModel<T>::build(const ModelConfig& config) {
  config.validate();
  BasicModel<T> m;
  m.config_ = config;
  for (Stem<T>* stem : {&m.main_, &m.aux_}) {
    int in = config.input_channels;
    for (int b = 0; b < 3; ++b) {
      (*stem)[b] = StmBlock<T>(in, config.stm_widths[b]);
      in = 4 * config.stm_widths[b];
    }
  }
  const auto merged = config.merged_widths();
  m.aux_head_ = DenseSpec<T>(merged[2], config.surrogate_classes);
  m.fusion_ = ConvSpec<T>(ConvGeometry{config.boosted_channels(), config.fusion_width, 1, 1, 1, 1, 0});
  m.head_ = DenseSpec<T>(config.fusion_width, 2);

  Rng rng(config.seed);
  for (Stem<T>* stem : {&m.main_, &m.aux_}) {
    for (auto& block : *stem) {
      init_conv(block.boundary, rng);
      init_conv(block.region, rng);
      init_conv(block.dilated1, rng);
      init_conv(block.dilated2, rng);
    }
  }
  init_dense(m.aux_head_, rng);
  init_conv(m.fusion_, rng);
  init_dense(m.head_, rng);
  return m;
}

template <class T>
std::vector<ParamRef<T>> BasicModel<T>::parameters() {
  std::vector<ParamRef<T>> out;
  add_stem(out, "main", main_, false);
  add_stem(out, "aux", aux_, aux_frozen_);
  add_dense(out, "aux_head", aux_head_, aux_frozen_);
  add_conv(out, "fusion", fusion_, false);
  add_dense(out, "head", head_, false);
  return out;
}

template <class T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const Stem<T>* stem : {&main_, &aux_}) {
    for (const auto& b : *stem) {
      for (const ConvSpec<T>* c : {&b.boundary, &b.region, &b.dilated1, &b.dilated2})
        n += c->weight.size() + c->bias.size();
    }
  }
  n += aux_head_.weight.size() + aux_head_.bias.size();
  n += fusion_.weight.size() + fusion_.bias.size();
  n += head_.weight.size() + head_.bias.size();
  return n;
}

template <class T>
void BasicModel<T>::zero_grad() {
  for (auto& p : parameters()) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <class T>
void BasicModel<T>::check_input(const BasicTensor<T>& batch) const {
  const Shape& s = batch.shape();
  if (s.n < 1 || s.c != config_.input_channels || s.h != config_.input_side || s.w != config_.input_side)
    throw ConfigError("model input " + to_string(s) + " does not match configured (N," +
                      std::to_string(config_.input_channels) + "," + std::to_string(config_.input_side) + "," +
                      std::to_string(config_.input_side) + ")");
}

template <class T>
ForwardOutput<T> BasicModel<T>::forward(const BasicTensor<T>& batch, bool train, Rng* rng,
                                        ForwardCache<T>* cache) const {
  check_input(batch);
  const bool cache_aux = cache && !aux_frozen_;

  BasicTensor<T> m = batch;
  BasicTensor<T> main2;
  for (int b = 0; b < 3; ++b) {
    m = stm_forward(main_[b], m, cache ? &cache->main[b] : nullptr);
    if (b == 1) main2 = m;
  }
  BasicTensor<T> a = batch;
  BasicTensor<T> aux2;
  for (int b = 0; b < 3; ++b) {
    a = stm_forward(aux_[b], a, cache_aux ? &cache->aux[b] : nullptr);
    if (b == 1) aux2 = a;
  }

  // STM-2 outputs take one more 2x2 max-pool to reach the STM-3 grid.
  std::vector<std::int32_t> main_argmax, aux_argmax;
  BasicTensor<T> main2_aligned = pool2d(main2, kDownsample, cache ? &main_argmax : nullptr);
  BasicTensor<T> aux2_aligned = pool2d(aux2, kDownsample, cache_aux ? &aux_argmax : nullptr);
  BasicTensor<T> boosted = concat_channels<T>({&aux2_aligned, &a, &main2_aligned, &m});
  BasicTensor<T> fused = relu(conv2d(boosted, fusion_));
  BasicTensor<T> pooled = global_avg_pool(fused);

  ForwardOutput<T> out;
  out.batch = batch.shape().n;
  out.features = pooled.values();

  Rng fallback(0);
  std::vector<T> mask;
  BasicTensor<T> dropped = dropout(pooled, config_.dropout_rate, rng ? *rng : fallback, train && rng, &mask);
  out.logits = dense_rows<T>(dropped.data(), out.batch, head_);
  out.probabilities.resize(out.logits.size());
  for (int n = 0; n < out.batch; ++n) {
    const auto p = softmax<T>(std::span<const T>(out.logits).subspan(2 * n, 2));
    out.probabilities[2 * n] = p[0];
    out.probabilities[2 * n + 1] = p[1];
  }

  if (cache) {
    cache->aux_cached = cache_aux;
    cache->main_align_argmax = std::move(main_argmax);
    cache->aux_align_argmax = std::move(aux_argmax);
    cache->main_block2_shape = main2.shape();
    cache->aux_block2_shape = aux2.shape();
    cache->boosted = std::move(boosted);
    cache->fused = std::move(fused);
    cache->pooled = std::move(pooled);
    cache->dropout_mask = std::move(mask);
    cache->head_input = dropped.values();
  }
  return out;
}

template <class T>
void BasicModel<T>::backward(const ForwardCache<T>& cache, std::span<const T> grad_logits) {
  const Shape pooled_shape = cache.pooled.shape();
  const int n = pooled_shape.n;
  std::vector<T> g_head_in = dense_backward<T>(cache.head_input, n, grad_logits, head_);
  BasicTensor<T> g_pooled = dropout_backward(BasicTensor<T>(pooled_shape, std::move(g_head_in)),
                                             std::span<const T>(cache.dropout_mask));
  BasicTensor<T> g_fused = global_avg_pool_backward(cache.fused.shape(), g_pooled);
  g_fused = relu_backward(cache.fused, g_fused);
  BasicTensor<T> g_boosted = conv2d_backward(cache.boosted, g_fused, fusion_, true);

  const auto merged = config_.merged_widths();
  const std::array<int, 4> widths{merged[1], merged[2], merged[1], merged[2]};
  auto parts = split_channels(g_boosted, std::span<const int>(widths));

  auto run_stem = [](Stem<T>& stem, const std::array<StmCache<T>, 3>& caches, BasicTensor<T> g3,
                     const BasicTensor<T>& g2_aligned, const Shape& block2_shape,
                     const std::vector<std::int32_t>& align_argmax) {
    BasicTensor<T> g2 = stm_backward(stem[2], caches[2], g3, true);
    add_into(g2, pool2d_backward(block2_shape, g2_aligned, kDownsample, align_argmax));
    BasicTensor<T> g1 = stm_backward(stem[1], caches[1], g2, true);
    stm_backward(stem[0], caches[0], g1, false);
  };

  run_stem(main_, cache.main, std::move(parts[3]), parts[2], cache.main_block2_shape, cache.main_align_argmax);
  if (!aux_frozen_) {
    if (!cache.aux_cached) throw ConfigError("backward: aux stem is trainable but was not cached");
    run_stem(aux_, cache.aux, std::move(parts[1]), parts[0], cache.aux_block2_shape, cache.aux_align_argmax);
  }
}

template <class T>
ForwardOutput<T> BasicModel<T>::aux_forward(const BasicTensor<T>& batch, ForwardCache<T>* cache) const {
  check_input(batch);
  BasicTensor<T> a = batch;
  for (int b = 0; b < 3; ++b) a = stm_forward(aux_[b], a, cache ? &cache->aux[b] : nullptr);
  BasicTensor<T> pooled = global_avg_pool(a);
  ForwardOutput<T> out;
  out.batch = batch.shape().n;
  out.features = pooled.values();
  out.logits = dense_rows<T>(pooled.data(), out.batch, aux_head_);
  const int classes = aux_head_.out_dim;
  out.probabilities.resize(out.logits.size());
  for (int n = 0; n < out.batch; ++n) {
    const auto p = softmax<T>(std::span<const T>(out.logits).subspan(classes * n, classes));
    std::copy(p.begin(), p.end(), out.probabilities.begin() + classes * n);
  }
  if (cache) {
    cache->aux_cached = true;
    cache->pooled = std::move(pooled);
    cache->fused = a;
  }
  return out;
}

template <class T>
void BasicModel<T>::aux_backward(const ForwardCache<T>& cache, std::span<const T> grad_logits) {
  if (aux_frozen_) throw ConfigError("aux_backward: aux stem is frozen");
  if (!cache.aux_cached) throw ConfigError("aux_backward: missing aux cache");
  const Shape& pooled_shape = cache.pooled.shape();
  std::vector<T> g = dense_backward<T>(cache.pooled.data(), pooled_shape.n, grad_logits, aux_head_);
  BasicTensor<T> g3 = global_avg_pool_backward(cache.fused.shape(), BasicTensor<T>(pooled_shape, std::move(g)));
  BasicTensor<T> g2 = stm_backward(aux_[2], cache.aux[2], g3, true);
  BasicTensor<T> g1 = stm_backward(aux_[1], cache.aux[1], g2, true);
  stm_backward(aux_[0], cache.aux[0], g1, false);
}

template <class T>
std::vector<T> BasicModel<T>::extract_features(const BasicTensor<T>& batch) const {
  return forward(batch, false).features;
}

template <class T>
template <class U>
BasicModel<U> BasicModel<T>::cast() const {
  BasicModel<U> out = BasicModel<U>::build(config_);
  out.aux_frozen_ = aux_frozen_;
  auto& self = const_cast<BasicModel<T>&>(*this);
  auto src = self.parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i)
    copy_values<T, U>(std::span<const T>(src[i].value), dst[i].value);
  return out;
}

std::vector<std::uint8_t> aux_parameter_bytes(Model& model) {
  std::vector<std::uint8_t> bytes;
  for (const auto& p : model.parameters()) {
    if (p.name.rfind("aux", 0) != 0) continue;
    const auto* raw = reinterpret_cast<const std::uint8_t*>(p.value.data());
    bytes.insert(bytes.end(), raw, raw + p.value.size_bytes());
  }
  return bytes;
}

template struct StmBlock<float>;
template struct StmBlock<double>;
template BasicTensor<float> stm_forward(const StmBlock<float>&, const BasicTensor<float>&, StmCache<float>*);
template BasicTensor<double> stm_forward(const StmBlock<double>&, const BasicTensor<double>&, StmCache<double>*);
template BasicTensor<float> stm_backward(StmBlock<float>&, const StmCache<float>&, const BasicTensor<float>&, bool);
template BasicTensor<double> stm_backward(StmBlock<double>&, const StmCache<double>&, const BasicTensor<double>&,
                                          bool);
template class BasicModel<float>;
template class BasicModel<double>;
template BasicModel<double> BasicModel<float>::cast<double>() const;
template BasicModel<float> BasicModel<double>::cast<float>() const;
template BasicModel<float> BasicModel<float>::cast<float>() const;

}  // namespace dsbel
