#include "dsbel/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace dsbel {

// Splitting -------------------------------------------------------------------

const std::vector<std::size_t>& SplitPlan::get(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val" || name == "validation") return validation;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

ClassSplitSizes class_split_sizes(std::size_t class_n) {
  ClassSplitSizes s;
  s.test = 3 * class_n / 10;
  const std::size_t rest = class_n - s.test;
  s.validation = (2 * rest + 5) / 10;
  s.train = rest - s.validation;
  return s;
}

SplitPlan split_dataset(const LabeledDataset& ds, std::uint64_t seed) {
  SplitPlan plan;
  plan.seed = seed;
  Rng rng(seed);
  for (Label label : {Label::Benign, Label::Malware}) {
    std::vector<std::size_t> idx = ds.indices_of(label);
    if (idx.size() < 5)
      throw DataError(std::string(label == Label::Benign ? "benign" : "malware") + " class has " +
                      std::to_string(idx.size()) + " items; at least 5 are needed to split");
    rng.shuffle(idx);
    const ClassSplitSizes sizes = class_split_sizes(idx.size());
    auto it = idx.begin();
    plan.test.insert(plan.test.end(), it, it + static_cast<std::ptrdiff_t>(sizes.test));
    it += static_cast<std::ptrdiff_t>(sizes.test);
    plan.validation.insert(plan.validation.end(), it, it + static_cast<std::ptrdiff_t>(sizes.validation));
    it += static_cast<std::ptrdiff_t>(sizes.validation);
    plan.train.insert(plan.train.end(), it, idx.end());
  }
  std::sort(plan.train.begin(), plan.train.end());
  std::sort(plan.validation.begin(), plan.validation.end());
  std::sort(plan.test.begin(), plan.test.end());
  return plan;
}

// Augmentation ----------------------------------------------------------------

void AugmentSpec::validate() const {
  if (rotation_min_deg < 0.0 || rotation_max_deg > 360.0 || rotation_min_deg > rotation_max_deg)
    throw ConfigError("augment: rotation range must lie in [0, 360]");
  if (scale_min < 0.5 || scale_max > 1.0 || scale_min > scale_max)
    throw ConfigError("augment: scale range must lie in [0.5, 1.0]");
  if (shear_min < -0.5 || shear_max > 0.5 || shear_min > shear_max)
    throw ConfigError("augment: shear range must lie in [-0.5, 0.5]");
  if (probability < 0.0 || probability > 1.0) throw ConfigError("augment: probability must be in [0, 1]");
}

AffineDraw draw_affine(const AugmentSpec& spec, Rng& rng) {
  AffineDraw d;
  d.rotation_deg = rng.uniform(spec.rotation_min_deg, spec.rotation_max_deg);
  d.scale = rng.uniform(spec.scale_min, spec.scale_max);
  d.shear = rng.uniform(spec.shear_min, spec.shear_max);
  d.flip = spec.reflection && rng.bernoulli(0.5);
  return d;
}

GrayImage apply_affine(const GrayImage& img, const AffineDraw& draw) {
  const double theta = draw.rotation_deg * M_PI / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double f = draw.flip ? -1.0 : 1.0;
  // Forward map A = R * Sh * S * F on (x, y) offsets from the centre.
  const double a00 = (c * 1.0 + (-s) * 0.0) * draw.scale * f;
  const double a01 = (c * draw.shear + (-s) * 1.0) * draw.scale;
  const double a10 = (s * 1.0 + c * 0.0) * draw.scale * f;
  const double a11 = (s * draw.shear + c * 1.0) * draw.scale;
  const double det = a00 * a11 - a01 * a10;
  if (std::abs(det) < 1e-12) throw ConfigError("augment: singular affine map");
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;

  GrayImage out(img.width, img.height);
  const double cx = (img.width - 1) / 2.0;
  const double cy = (img.height - 1) / 2.0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx;
      const double dy = y - cy;
      const long sx = std::lround(cx + i00 * dx + i01 * dy);
      const long sy = std::lround(cy + i10 * dx + i11 * dy);
      if (sx >= 0 && sx < img.width && sy >= 0 && sy < img.height) out.at(y, x) = img.at(sy, sx);
    }
  }
  return out;
}

GrayImage augment(const GrayImage& img, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  return apply_affine(img, draw_affine(spec, rng));
}

// Configuration -----------------------------------------------------------------

namespace {

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

bool TrainConfig::set(const std::string& key, const std::string& value) {
  try {
    if (key == "learning_rate") learning_rate = std::stod(value);
    else if (key == "epochs") epochs = std::stoi(value);
    else if (key == "batch_size") batch_size = std::stoi(value);
    else if (key == "momentum") momentum = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "augment") augment = parse_bool(value);
    else if (key == "augment_probability") augment_spec.probability = std::stod(value);
    else if (key == "pretrain_epochs") pretrain_epochs = std::stoi(value);
    else if (key == "surrogate_per_class") surrogate_per_class = std::stoi(value);
    else if (key == "deterministic") deterministic = parse_bool(value);
    else return false;
  } catch (const std::logic_error&) {
    throw ConfigError("invalid value '" + value + "' for key " + key);
  }
  return true;
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "learning_rate=" << format_double(learning_rate) << "\n"
     << "epochs=" << epochs << "\n"
     << "batch_size=" << batch_size << "\n"
     << "momentum=" << format_double(momentum) << "\n"
     << "seed=" << seed << "\n"
     << "augment=" << (augment ? 1 : 0) << "\n"
     << "augment_probability=" << format_double(augment_spec.probability) << "\n"
     << "pretrain_epochs=" << pretrain_epochs << "\n"
     << "surrogate_per_class=" << surrogate_per_class << "\n"
     << "deterministic=" << (deterministic ? 1 : 0) << "\n";
  return os.str();
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (pretrain_epochs < 0) throw ConfigError("pretrain_epochs must be >= 0");
  if (surrogate_per_class < 1) throw ConfigError("surrogate_per_class must be >= 1");
  augment_spec.validate();
}

std::string TrainHistory::to_csv() const {
  std::string out = "epoch,train_loss,train_acc,val_loss,val_acc\n";
  char line[160];
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f,%.6f\n", e.epoch, e.train_loss, e.train_accuracy,
                  e.val_loss, e.val_accuracy);
    out += line;
  }
  return out;
}

// Optimiser -------------------------------------------------------------------

template <class T>
void SgdMomentum::step(std::vector<ParamRef<T>>& params) {
  if (velocity_.size() != params.size()) {
    velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].value.size(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.frozen) continue;
    auto& v = velocity_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      v[k] = mu_ * v[k] - lr_ * static_cast<double>(p.grad[k]);
      p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) + v[k]);
    }
  }
}

template void SgdMomentum::step(std::vector<ParamRef<float>>&);
template void SgdMomentum::step(std::vector<ParamRef<double>>&);

// Training --------------------------------------------------------------------

namespace {

int label_index(Label l) { return l == Label::Malware ? 1 : 0; }

// Mean cross-entropy over the batch; fills grad (batch x classes) with
// (p - onehot) / batch and returns (loss sum, correct count).
std::pair<double, int> batch_loss(const std::vector<float>& logits, int classes, std::span<const int> labels,
                                  std::vector<float>& grad) {
  const int n = static_cast<int>(labels.size());
  grad.assign(logits.size(), 0.0f);
  double loss = 0.0;
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    auto r = softmax_xent<float>(std::span<const float>(logits).subspan(i * classes, classes), labels[i]);
    loss += r.loss;
    const auto best = std::max_element(r.probabilities.begin(), r.probabilities.end()) - r.probabilities.begin();
    correct += best == labels[i] ? 1 : 0;
    for (int c = 0; c < classes; ++c) grad[i * classes + c] = r.grad_logits[c] / static_cast<float>(n);
  }
  return {loss, correct};
}

}  // namespace

TrainResult train(Model model, const LabeledDataset& ds, const SplitPlan& plan, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (plan.train.empty()) throw DataError("train: empty training split");
  const int side = model.config().input_side;
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  SgdMomentum opt(cfg.learning_rate, cfg.momentum);
  TrainResult result{model, model, {}};
  double best_acc = -1.0;

  std::vector<std::size_t> order = plan.train;
  ForwardCache<float> cache;
  std::vector<float> grad;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(order);
    double loss_sum = 0.0;
    int correct = 0;
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      ++batch_no;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor batch;
      if (cfg.augment) {
        LabeledDataset tmp;
        std::vector<std::size_t> local;
        for (std::size_t k = 0; k < idx.size(); ++k) {
          const GrayImage& src = ds.items[idx[k]].image;
          GrayImage img = rng.bernoulli(cfg.augment_spec.probability)
                              ? apply_affine(src, draw_affine(cfg.augment_spec, rng))
                              : src;
          tmp.add(std::move(img), ds.items[idx[k]].label, {});
          local.push_back(k);
        }
        batch = to_batch(tmp, local, side);
      } else {
        batch = to_batch(ds, idx, side);
      }
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(label_index(ds.items[i].label));

      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no);
      try {
        model.zero_grad();
        const auto out = model.forward(batch, true, &rng, &cache);
        const auto [loss, ok] = batch_loss(out.logits, 2, labels, grad);
        if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
        model.backward(cache, grad);
        auto params = model.parameters();
        opt.step(params);
        loss_sum += loss;
        correct += ok;
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at " + where);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    if (!plan.validation.empty()) {
      const auto v = evaluate_loss(model, ds, plan.validation, cfg.batch_size);
      rec.val_loss = v.loss;
      rec.val_accuracy = v.accuracy;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (rec.val_accuracy > best_acc) {
      best_acc = rec.val_accuracy;
      result.best_model = model;
      result.history.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec);
  }
  result.final_model = std::move(model);
  if (result.history.best_epoch == 0) result.best_model = result.final_model;
  return result;
}

std::vector<double> pretrain_auxiliary(Model& model, const LabeledDataset& surrogate, int epochs,
                                       const TrainConfig& cfg) {
  if (surrogate.size() == 0) throw DataError("pretrain_auxiliary: empty surrogate dataset");
  if (epochs < 0) throw ConfigError("pretrain_auxiliary: epochs must be >= 0");
  const int side = model.config().input_side;
  const int classes = model.config().surrogate_classes;
  model.set_aux_frozen(false);
  Rng rng(cfg.seed ^ 0xa5a5a5a5deadbeefULL);
  SgdMomentum opt(cfg.learning_rate, cfg.momentum);
  std::vector<std::size_t> order(surrogate.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> losses;
  ForwardCache<float> cache;
  std::vector<float> grad;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor batch = to_batch(surrogate, idx, side);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(label_index(surrogate.items[i].label) % classes);
      model.zero_grad();
      const auto out = model.aux_forward(batch, &cache);
      const auto [loss, ok] = batch_loss(out.logits, classes, labels, grad);
      (void)ok;
      if (!std::isfinite(loss)) throw NumericError("non-finite surrogate loss at epoch " + std::to_string(epoch + 1));
      model.aux_backward(cache, grad);
      auto params = model.parameters();
      std::vector<ParamRef<float>> aux;
      for (auto& p : params)
        if (p.name.rfind("aux", 0) == 0) aux.push_back(p);
      opt.step(aux);
      loss_sum += loss;
    }
    losses.push_back(loss_sum / static_cast<double>(order.size()));
  }
  model.set_aux_frozen(true);
  model.zero_grad();
  return losses;
}

// Scoring -----------------------------------------------------------------------

Scores score(const Model& model, const LabeledDataset& ds, std::span<const std::size_t> indices, int batch_size) {
  Scores s;
  const int side = model.config().input_side;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    auto idx = indices.subspan(start, end - start);
    const auto out = model.forward(to_batch(ds, idx, side), false);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double p0 = out.probabilities[2 * k];
      const double p1 = out.probabilities[2 * k + 1];
      s.malware_probability.push_back(p1);
      s.predictions.push_back(p1 > p0 ? 1 : 0);
      s.labels.push_back(label_index(ds.items[idx[k]].label));
    }
  }
  return s;
}

LossAccuracy evaluate_loss(const Model& model, const LabeledDataset& ds, std::span<const std::size_t> indices,
                           int batch_size) {
  LossAccuracy r;
  if (indices.empty()) return r;
  const int side = model.config().input_side;
  double loss = 0.0;
  int correct = 0;
  std::vector<float> grad;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    auto idx = indices.subspan(start, end - start);
    const auto out = model.forward(to_batch(ds, idx, side), false);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(label_index(ds.items[i].label));
    const auto [l, ok] = batch_loss(out.logits, 2, labels, grad);
    loss += l;
    correct += ok;
  }
  r.loss = loss / static_cast<double>(indices.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return r;
}

FeatureMatrix extract_feature_matrix(const Model& model, const LabeledDataset& ds,
                                     std::span<const std::size_t> indices, int batch_size) {
  const int side = model.config().input_side;
  const int dims = model.config().fusion_width;
  FeatureMatrix fm(static_cast<int>(indices.size()), dims);
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    auto idx = indices.subspan(start, end - start);
    const auto f = model.extract_features(to_batch(ds, idx, side));
    std::copy(f.begin(), f.end(), fm.values.begin() + static_cast<std::ptrdiff_t>(start * dims));
    for (std::size_t k = 0; k < idx.size(); ++k) fm.labels[start + k] = label_index(ds.items[idx[k]].label);
  }
  return fm;
}

}  // namespace dsbel
