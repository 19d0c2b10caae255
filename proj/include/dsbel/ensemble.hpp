#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsbel/checkpoint.hpp"
#include "dsbel/layers.hpp"

namespace dsbel {

// N x D row-major features with one 0/1 label per row (1 = malware).
struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> values;
  std::vector<int> labels;

  FeatureMatrix() = default;
  FeatureMatrix(int n, int d);

  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  float& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  std::span<const float> row(int r) const {
    return std::span<const float>(values).subspan(static_cast<std::size_t>(r) * cols, cols);
  }
  void validate() const;
};

// CSV with header label,f0,...,f{D-1}.
std::string feature_matrix_to_csv(const FeatureMatrix& fm);
FeatureMatrix feature_matrix_from_csv(const std::string& text);

// Per-column standardisation fitted on training features; columns with
// stdev below 1e-8 map to 0.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stdev;

  static Standardizer fit(const FeatureMatrix& x);
  // Row-major N x D doubles.
  std::vector<double> transform(const FeatureMatrix& x) const;
};

inline constexpr double kStdevFloor = 1e-8;

// Linear SVM trained by stochastic subgradient descent on
// lambda/2 |w|^2 + mean hinge, with step 1/(lambda t).
struct SvmOptions {
  double lambda = 1e-4;
  int epochs = 100;
  std::uint64_t seed = 0;
};

struct LinearSvm {
  std::vector<double> weight;
  double bias = 0.0;
  // Objective on the full training set after every epoch.
  std::vector<double> objective_history;

  double margin(std::span<const double> x) const;
  int predict(std::span<const double> x) const { return margin(x) > 0.0 ? 1 : 0; }
  // Logistic squash of the margin.
  double score(std::span<const double> x) const;
};

// x is row-major rows x dims (already standardised), y in {0, 1}.
LinearSvm train_svm(std::span<const double> x, int rows, int dims, std::span<const int> y,
                    const SvmOptions& opt = {});
double svm_objective(const LinearSvm& svm, std::span<const double> x, int rows, int dims, std::span<const int> y,
                     double lambda);

struct MlpOptions {
  int hidden = 64;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  int epochs = 200;
  int batch_size = 16;
  std::uint64_t seed = 0;
};

// dims -> hidden (ReLU) -> 2-way softmax.
struct Mlp {
  DenseSpec<double> hidden;
  DenseSpec<double> output;

  // Row-major rows x 2 probabilities.
  std::vector<double> predict_proba(std::span<const double> x, int rows) const;
};

Mlp train_mlp(std::span<const double> x, int rows, int dims, std::span<const int> y, const MlpOptions& opt = {});

// h(x) = polarity if x[feature] > threshold else -polarity.
struct Stump {
  int feature = 0;
  double threshold = 0.0;
  int polarity = 1;
  double alpha = 0.0;

  int vote(std::span<const double> x) const { return x[feature] > threshold ? polarity : -polarity; }
};

struct AdaBoostOptions {
  int rounds = 100;
};

struct AdaBoost {
  std::vector<Stump> stumps;
  std::vector<double> round_errors;      // weighted error of each kept stump
  std::vector<double> weight_sums;       // sample-weight total after each round
  int fallback_label = 0;                // used when the weighted vote is 0

  // sum alpha_t h_t(x) / sum alpha_t, in [-1, 1].
  double normalized_margin(std::span<const double> x) const;
  int predict(std::span<const double> x) const;
  // Prediction using only the first `rounds` stumps.
  int predict_prefix(std::span<const double> x, std::size_t rounds) const;
  double score(std::span<const double> x) const { return 0.5 * (normalized_margin(x) + 1.0); }
};

inline const double kMaxAlpha = std::log(1e10);

AdaBoost train_adaboost(std::span<const double> x, int rows, int dims, std::span<const int> y,
                        const AdaBoostOptions& opt = {});

// Majority of hard labels; with an even count, a tie goes to the voter
// whose score is furthest from 0.5.
int majority_vote(std::span<const int> votes, std::span<const double> scores = {});

struct EnsembleOptions {
  SvmOptions svm;
  MlpOptions mlp;
  AdaBoostOptions adaboost;
};

struct MemberPredictions {
  std::vector<int> labels;
  std::vector<double> scores;
};

struct EnsemblePrediction {
  std::vector<int> labels;
  std::vector<double> scores;
  MemberPredictions svm;
  MemberPredictions mlp;
  MemberPredictions adaboost;
};

struct ClassifierEnsemble {
  Standardizer standardizer;
  LinearSvm svm;
  Mlp mlp;
  AdaBoost adaboost;

  int dims() const { return static_cast<int>(standardizer.mean.size()); }
  EnsemblePrediction predict(const FeatureMatrix& x) const;

  Section to_section() const;
  static ClassifierEnsemble from_section(const Section& section);
};

inline constexpr std::string_view kEnsembleTag = "ENSM";

// Standardises x and trains all three members on the same features.
ClassifierEnsemble fit_ensemble(const FeatureMatrix& x, const EnsembleOptions& opt = {});

struct PcaModel {
  std::vector<double> mean;
  int dims = 0;
  int components = 0;
  std::vector<double> eigenvectors;  // dims x components, column j = component j
  std::vector<double> eigenvalues;   // descending
  int sweeps = 0;

  // Row-major rows x components.
  std::vector<double> project(std::span<const double> x, int rows) const;
};

// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
struct JacobiResult {
  std::vector<double> values;   // unsorted, aligned with vector columns
  std::vector<double> vectors;  // n x n row-major, columns are eigenvectors
  int sweeps = 0;
  double off_norm = 0.0;
};
JacobiResult jacobi_eigen(std::vector<double> a, int n, double tol = 1e-10, int max_sweeps = 100);

// x is row-major rows x dims. Components are sorted by eigenvalue, and the
// largest-magnitude entry of each eigenvector is made positive.
PcaModel pca_fit(std::span<const double> x, int rows, int dims, int k = 3);

std::vector<double> to_double(const FeatureMatrix& fm);

}  // namespace dsbel
