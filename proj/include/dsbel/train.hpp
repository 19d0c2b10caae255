#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dsbel/dataset.hpp"
#include "dsbel/ensemble.hpp"
#include "dsbel/model.hpp"

namespace dsbel {

struct SplitPlan {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;

  const std::vector<std::size_t>& get(const std::string& name) const;
};

// Per-class sizes: test = floor(3n/10), validation = round-half-up of 20% of
// the remainder, train the rest.
struct ClassSplitSizes {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
};
ClassSplitSizes class_split_sizes(std::size_t class_n);

// Stratified 70/30 then 80/20 split with a seeded per-class shuffle.
SplitPlan split_dataset(const LabeledDataset& ds, std::uint64_t seed);

struct AugmentSpec {
  double rotation_min_deg = 0.0;
  double rotation_max_deg = 360.0;
  double scale_min = 0.5;
  double scale_max = 1.0;
  double shear_min = -0.5;
  double shear_max = 0.5;
  bool reflection = true;
  double probability = 0.5;

  void validate() const;
};

struct AffineDraw {
  double rotation_deg = 0.0;
  double scale = 1.0;
  double shear = 0.0;
  bool flip = false;
};

AffineDraw draw_affine(const AugmentSpec& spec, Rng& rng);

// Maps every output pixel through the inverse of
// rotate * shear * scale * flip about the image centre; nearest-neighbour
// reads, zero outside the source.
GrayImage apply_affine(const GrayImage& img, const AffineDraw& draw);

// Samples a draw from the spec ranges and applies it.
GrayImage augment(const GrayImage& img, const AugmentSpec& spec, Rng& rng);

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 20;
  int batch_size = 16;
  double momentum = 0.950;
  std::uint64_t seed = 0;
  bool augment = false;
  AugmentSpec augment_spec;
  // Surrogate pretraining of the auxiliary stem.
  int pretrain_epochs = 3;
  int surrogate_per_class = 64;
  bool deterministic = true;

  bool set(const std::string& key, const std::string& value);
  std::string to_text() const;
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran

  // epoch,train_loss,train_acc,val_loss,val_acc
  std::string to_csv() const;
};

// Classical momentum: v <- mu v - lr g; w <- w + v. Frozen parameters are
// skipped.
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum) : lr_(learning_rate), mu_(momentum) {}

  template <class T>
  void step(std::vector<ParamRef<T>>& params);

 private:
  double lr_;
  double mu_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainResult {
  Model final_model;
  Model best_model;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch training of the main stem, fusion and head on plan.train with
// per-epoch validation on plan.validation. The best model is the one with
// the highest validation accuracy (earliest on ties).
TrainResult train(Model model, const LabeledDataset& ds, const SplitPlan& plan, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Trains the aux stem and aux head on a surrogate task, then freezes them.
// Returns the mean surrogate loss of each epoch.
std::vector<double> pretrain_auxiliary(Model& model, const LabeledDataset& surrogate, int epochs,
                                       const TrainConfig& cfg);

struct Scores {
  std::vector<double> malware_probability;
  std::vector<int> labels;  // 1 = malware
  std::vector<int> predictions;
};

// Inference-mode softmax scores for the selected items.
Scores score(const Model& model, const LabeledDataset& ds, std::span<const std::size_t> indices,
             int batch_size = 16);

// Mean cross-entropy and accuracy of a batch-wise forward pass.
struct LossAccuracy {
  double loss = 0.0;
  double accuracy = 0.0;
};
LossAccuracy evaluate_loss(const Model& model, const LabeledDataset& ds, std::span<const std::size_t> indices,
                           int batch_size = 16);

// Pre-head deep features of the selected items, one row per index.
FeatureMatrix extract_feature_matrix(const Model& model, const LabeledDataset& ds,
                                     std::span<const std::size_t> indices, int batch_size = 16);

}  // namespace dsbel
