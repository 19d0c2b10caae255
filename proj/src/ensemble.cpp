#include "dsbel/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace dsbel {

namespace {

void check_training_set(int rows, int dims, std::span<const double> x, std::span<const int> y, const char* who) {
  if (rows < 1 || dims < 1) throw DataError(std::string(who) + ": empty training set");
  if (x.size() != static_cast<std::size_t>(rows) * dims || y.size() != static_cast<std::size_t>(rows))
    throw ConfigError(std::string(who) + ": feature/label length mismatch");
  bool pos = false, neg = false;
  for (int v : y) {
    if (v != 0 && v != 1) throw ConfigError(std::string(who) + ": labels must be 0 or 1");
    (v ? pos : neg) = true;
  }
  if (!pos || !neg) throw DataError(std::string(who) + ": training labels contain a single class");
}

std::span<const double> row_of(std::span<const double> x, int dims, int r) {
  return x.subspan(static_cast<std::size_t>(r) * dims, static_cast<std::size_t>(dims));
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

// FeatureMatrix -----------------------------------------------------------------

FeatureMatrix::FeatureMatrix(int n, int d)
    : rows(n), cols(d), values(static_cast<std::size_t>(n) * d, 0.0f), labels(static_cast<std::size_t>(n), 0) {}

void FeatureMatrix::validate() const {
  if (values.size() != static_cast<std::size_t>(rows) * cols) throw ConfigError("feature matrix size mismatch");
  if (labels.size() != static_cast<std::size_t>(rows)) throw ConfigError("feature matrix label count mismatch");
  for (float v : values)
    if (!std::isfinite(v)) throw NumericError("feature matrix holds a non-finite value");
}

std::vector<double> to_double(const FeatureMatrix& fm) { return {fm.values.begin(), fm.values.end()}; }

std::string feature_matrix_to_csv(const FeatureMatrix& fm) {
  std::string out = "label";
  for (int c = 0; c < fm.cols; ++c) out += ",f" + std::to_string(c);
  out += "\n";
  char buf[32];
  for (int r = 0; r < fm.rows; ++r) {
    out += std::to_string(fm.labels[r]);
    for (int c = 0; c < fm.cols; ++c) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(fm.at(r, c)));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

FeatureMatrix feature_matrix_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("label", 0) != 0) throw FormatError("feature CSV: missing header");
  const int cols = static_cast<int>(std::count(line.begin(), line.end(), ','));
  FeatureMatrix fm;
  fm.cols = cols;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    int c = -1;
    while (std::getline(ls, cell, ',')) {
      try {
        if (c < 0) fm.labels.push_back(std::stoi(cell));
        else fm.values.push_back(std::stof(cell));
      } catch (const std::logic_error&) {
        throw FormatError("feature CSV line " + std::to_string(lineno) + ": bad cell '" + cell + "'");
      }
      ++c;
    }
    if (c != cols) throw FormatError("feature CSV line " + std::to_string(lineno) + ": wrong column count");
    ++fm.rows;
  }
  fm.validate();
  return fm;
}

// Standardizer ------------------------------------------------------------------

Standardizer Standardizer::fit(const FeatureMatrix& x) {
  x.validate();
  if (x.rows < 1) throw DataError("standardizer: no rows");
  Standardizer s;
  s.mean.assign(x.cols, 0.0);
  s.stdev.assign(x.cols, 0.0);
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) s.mean[c] += x.at(r, c);
  for (auto& m : s.mean) m /= x.rows;
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) {
      const double d = x.at(r, c) - s.mean[c];
      s.stdev[c] += d * d;
    }
  for (auto& v : s.stdev) v = std::sqrt(v / x.rows);
  return s;
}

std::vector<double> Standardizer::transform(const FeatureMatrix& x) const {
  if (static_cast<std::size_t>(x.cols) != mean.size())
    throw ConfigError("standardizer expects " + std::to_string(mean.size()) + " features, got " +
                      std::to_string(x.cols));
  std::vector<double> out(static_cast<std::size_t>(x.rows) * x.cols);
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c)
      out[static_cast<std::size_t>(r) * x.cols + c] =
          stdev[c] < kStdevFloor ? 0.0 : (x.at(r, c) - mean[c]) / stdev[c];
  return out;
}

// SVM ---------------------------------------------------------------------------

double LinearSvm::margin(std::span<const double> x) const { return dot(weight, x) + bias; }

double LinearSvm::score(std::span<const double> x) const { return 1.0 / (1.0 + std::exp(-margin(x))); }

double svm_objective(const LinearSvm& svm, std::span<const double> x, int rows, int dims, std::span<const int> y,
                     double lambda) {
  double hinge = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double yy = y[r] ? 1.0 : -1.0;
    hinge += std::max(0.0, 1.0 - yy * svm.margin(row_of(x, dims, r)));
  }
  const double norm2 = dot(svm.weight, svm.weight) + svm.bias * svm.bias;
  return 0.5 * lambda * norm2 + hinge / rows;
}

// The bias is handled as the weight of a constant feature, so it is
// regularised with w. With a small lambda the last iterate wanders far from
// the optimum, so at each epoch boundary three candidates are scored on the
// full set (last iterate, mean over the epoch, mean over the whole run) and
// the best seen so far is kept.
LinearSvm train_svm(std::span<const double> x, int rows, int dims, std::span<const int> y, const SvmOptions& opt) {
  check_training_set(rows, dims, x, y, "train_svm");
  if (!(opt.lambda > 0.0)) throw ConfigError("train_svm: lambda must be > 0");
  LinearSvm cur;
  cur.weight.assign(dims, 0.0);
  LinearSvm best = cur, run_mean = cur;
  double best_obj = svm_objective(best, x, rows, dims, y, opt.lambda);
  std::vector<int> order(rows);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opt.seed ^ 0x51f15e5ULL);
  const double radius = 1.0 / std::sqrt(opt.lambda);
  std::uint64_t t = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order);
    LinearSvm epoch_mean;
    epoch_mean.weight.assign(dims, 0.0);
    for (int r : order) {
      ++t;
      const double eta = 1.0 / (opt.lambda * static_cast<double>(t));
      const double yy = y[r] ? 1.0 : -1.0;
      const auto xr = row_of(x, dims, r);
      const bool violated = yy * cur.margin(xr) < 1.0;
      const double shrink = 1.0 - eta * opt.lambda;
      for (auto& w : cur.weight) w *= shrink;
      cur.bias *= shrink;
      if (violated) {
        for (int d = 0; d < dims; ++d) cur.weight[d] += eta * yy * xr[d];
        cur.bias += eta * yy;
      }
      const double norm = std::sqrt(dot(cur.weight, cur.weight) + cur.bias * cur.bias);
      if (norm > radius) {
        const double s = radius / norm;
        for (auto& w : cur.weight) w *= s;
        cur.bias *= s;
      }
      const double a = 1.0 / static_cast<double>(t);
      for (int d = 0; d < dims; ++d) {
        run_mean.weight[d] += a * (cur.weight[d] - run_mean.weight[d]);
        epoch_mean.weight[d] += cur.weight[d] / rows;
      }
      run_mean.bias += a * (cur.bias - run_mean.bias);
      epoch_mean.bias += cur.bias / rows;
    }
    for (const LinearSvm* cand : {&cur, &epoch_mean, &run_mean}) {
      const double obj = svm_objective(*cand, x, rows, dims, y, opt.lambda);
      if (obj < best_obj) {
        best_obj = obj;
        best.weight = cand->weight;
        best.bias = cand->bias;
      }
    }
    best.objective_history.push_back(best_obj);
  }
  return best;
}

// MLP ---------------------------------------------------------------------------

std::vector<double> Mlp::predict_proba(std::span<const double> x, int rows) const {
  const auto h = relu(BasicTensor<double>(Shape{rows, hidden.out_dim, 1, 1}, dense_rows(x, rows, hidden)));
  const auto logits = dense_rows<double>(h.data(), rows, output);
  std::vector<double> p(logits.size());
  for (int r = 0; r < rows; ++r) {
    const auto pr = softmax<double>(std::span<const double>(logits).subspan(2 * r, 2));
    p[2 * r] = pr[0];
    p[2 * r + 1] = pr[1];
  }
  return p;
}

Mlp train_mlp(std::span<const double> x, int rows, int dims, std::span<const int> y, const MlpOptions& opt) {
  check_training_set(rows, dims, x, y, "train_mlp");
  if (opt.hidden < 1 || opt.batch_size < 1 || opt.epochs < 0) throw ConfigError("train_mlp: invalid options");
  Rng rng(opt.seed ^ 0x3c6ef372fe94f82bULL);
  Mlp m;
  m.hidden = DenseSpec<double>(dims, opt.hidden);
  m.output = DenseSpec<double>(opt.hidden, 2);
  for (auto* layer : {&m.hidden, &m.output}) {
    const double bound = std::sqrt(6.0 / layer->in_dim);
    for (auto& w : layer->weight) w = rng.uniform(-bound, bound);
  }
  std::vector<double> vel_hw(m.hidden.weight.size()), vel_hb(m.hidden.bias.size());
  std::vector<double> vel_ow(m.output.weight.size()), vel_ob(m.output.bias.size());
  auto update = [&](std::vector<double>& w, std::vector<double>& v, const std::vector<double>& g) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = opt.momentum * v[i] - opt.learning_rate * g[i];
      w[i] += v[i];
    }
  };

  std::vector<int> order(rows);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> xb, grad;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order);
    for (int start = 0; start < rows; start += opt.batch_size) {
      const int n = std::min(opt.batch_size, rows - start);
      xb.resize(static_cast<std::size_t>(n) * dims);
      for (int k = 0; k < n; ++k) {
        const auto xr = row_of(x, dims, order[start + k]);
        std::copy(xr.begin(), xr.end(), xb.begin() + static_cast<std::ptrdiff_t>(k) * dims);
      }
      const auto h = relu(BasicTensor<double>(Shape{n, opt.hidden, 1, 1}, dense_rows<double>(xb, n, m.hidden)));
      const auto logits = dense_rows<double>(h.data(), n, m.output);
      grad.assign(logits.size(), 0.0);
      for (int k = 0; k < n; ++k) {
        const auto r = softmax_xent<double>(std::span<const double>(logits).subspan(2 * k, 2), y[order[start + k]]);
        grad[2 * k] = r.grad_logits[0] / n;
        grad[2 * k + 1] = r.grad_logits[1] / n;
      }
      m.hidden.zero_grad();
      m.output.zero_grad();
      auto gh = dense_backward<double>(h.data(), n, grad, m.output);
      const auto gh_relu = relu_backward(h, BasicTensor<double>(h.shape(), std::move(gh)));
      dense_backward<double>(xb, n, gh_relu.data(), m.hidden);
      update(m.hidden.weight, vel_hw, m.hidden.weight_grad);
      update(m.hidden.bias, vel_hb, m.hidden.bias_grad);
      update(m.output.weight, vel_ow, m.output.weight_grad);
      update(m.output.bias, vel_ob, m.output.bias_grad);
    }
  }
  m.hidden.weight_grad.clear();
  m.hidden.bias_grad.clear();
  m.output.weight_grad.clear();
  m.output.bias_grad.clear();
  return m;
}

// AdaBoostM1 --------------------------------------------------------------------

double AdaBoost::normalized_margin(std::span<const double> x) const {
  double num = 0.0, den = 0.0;
  for (const auto& s : stumps) {
    num += s.alpha * s.vote(x);
    den += s.alpha;
  }
  return den > 0.0 ? num / den : 0.0;
}

int AdaBoost::predict_prefix(std::span<const double> x, std::size_t rounds) const {
  double m = 0.0;
  for (std::size_t t = 0; t < std::min(rounds, stumps.size()); ++t) m += stumps[t].alpha * stumps[t].vote(x);
  if (m > 0.0) return 1;
  if (m < 0.0) return 0;
  return fallback_label;
}

int AdaBoost::predict(std::span<const double> x) const { return predict_prefix(x, stumps.size()); }

AdaBoost train_adaboost(std::span<const double> x, int rows, int dims, std::span<const int> y,
                        const AdaBoostOptions& opt) {
  check_training_set(rows, dims, x, y, "train_adaboost");
  AdaBoost model;
  const int positives = static_cast<int>(std::count(y.begin(), y.end(), 1));
  model.fallback_label = 2 * positives >= rows ? 1 : 0;

  // Column-wise sort order, computed once.
  std::vector<std::vector<int>> sorted(dims);
  for (int d = 0; d < dims; ++d) {
    auto& o = sorted[d];
    o.resize(rows);
    std::iota(o.begin(), o.end(), 0);
    std::stable_sort(o.begin(), o.end(), [&](int a, int b) {
      return x[static_cast<std::size_t>(a) * dims + d] < x[static_cast<std::size_t>(b) * dims + d];
    });
  }
  std::vector<double> w(rows, 1.0 / rows);
  std::vector<int> ys(rows);
  for (int r = 0; r < rows; ++r) ys[r] = y[r] ? 1 : -1;

  for (int round = 0; round < opt.rounds; ++round) {
    double total_pos = 0.0, total = 0.0;
    for (int r = 0; r < rows; ++r) {
      total += w[r];
      if (ys[r] > 0) total_pos += w[r];
    }
    Stump best;
    double best_err = 2.0;
    bool found = false;
    for (int d = 0; d < dims; ++d) {
      const auto& o = sorted[d];
      // Samples at or below the threshold vote -polarity.
      double below_pos = 0.0, below_neg = 0.0;
      for (int k = 0; k + 1 < rows; ++k) {
        const int i = o[k];
        (ys[i] > 0 ? below_pos : below_neg) += w[i];
        const double v = x[static_cast<std::size_t>(i) * dims + d];
        const double next = x[static_cast<std::size_t>(o[k + 1]) * dims + d];
        if (!(next > v)) continue;
        const double above_neg = (total - total_pos) - below_neg;
        const double err_pos = below_pos + above_neg;  // polarity +1
        const double err_neg = total - err_pos;        // polarity -1
        const double threshold = 0.5 * (v + next);
        if (err_pos < best_err) {
          best_err = err_pos;
          best = Stump{d, threshold, 1, 0.0};
          found = true;
        }
        if (err_neg < best_err) {
          best_err = err_neg;
          best = Stump{d, threshold, -1, 0.0};
          found = true;
        }
      }
    }
    if (!found) break;  // every feature constant
    const double eps = std::max(0.0, best_err / total);
    if (eps >= 0.5) break;
    const bool perfect = eps <= 0.0;
    best.alpha = perfect ? kMaxAlpha : std::min(kMaxAlpha, 0.5 * std::log((1.0 - eps) / eps));
    model.stumps.push_back(best);
    model.round_errors.push_back(eps);
    double sum = 0.0;
    for (int r = 0; r < rows; ++r) {
      w[r] *= std::exp(-best.alpha * ys[r] * best.vote(row_of(x, dims, r)));
      sum += w[r];
    }
    for (auto& v : w) v /= sum;
    model.weight_sums.push_back(std::accumulate(w.begin(), w.end(), 0.0));
    if (perfect) break;
  }
  return model;
}

// Voting ------------------------------------------------------------------------

int majority_vote(std::span<const int> votes, std::span<const double> scores) {
  if (votes.empty()) throw ConfigError("majority_vote: no voters");
  int ones = 0;
  for (int v : votes) ones += v ? 1 : 0;
  const int zeros = static_cast<int>(votes.size()) - ones;
  if (ones != zeros) return ones > zeros ? 1 : 0;
  if (scores.size() != votes.size()) throw ConfigError("majority_vote: tie without voter scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < votes.size(); ++i)
    if (std::abs(scores[i] - 0.5) > std::abs(scores[best] - 0.5)) best = i;
  return votes[best];
}

EnsemblePrediction ClassifierEnsemble::predict(const FeatureMatrix& x) const {
  if (x.cols != dims())
    throw ConfigError("ensemble expects " + std::to_string(dims()) + " features, got " + std::to_string(x.cols));
  const auto z = standardizer.transform(x);
  const auto mlp_p = mlp.predict_proba(z, x.rows);
  EnsemblePrediction out;
  for (int r = 0; r < x.rows; ++r) {
    const auto zr = row_of(z, x.cols, r);
    const double s_svm = svm.score(zr);
    const double s_mlp = mlp_p[2 * r + 1];
    const double s_ada = adaboost.score(zr);
    const int l_svm = svm.predict(zr);
    const int l_mlp = mlp_p[2 * r + 1] > mlp_p[2 * r] ? 1 : 0;
    const int l_ada = adaboost.predict(zr);
    out.svm.labels.push_back(l_svm);
    out.svm.scores.push_back(s_svm);
    out.mlp.labels.push_back(l_mlp);
    out.mlp.scores.push_back(s_mlp);
    out.adaboost.labels.push_back(l_ada);
    out.adaboost.scores.push_back(s_ada);
    const std::array<int, 3> votes{l_svm, l_mlp, l_ada};
    const std::array<double, 3> scores{s_svm, s_mlp, s_ada};
    out.labels.push_back(majority_vote(votes, scores));
    out.scores.push_back((s_svm + s_mlp + s_ada) / 3.0);
  }
  return out;
}

ClassifierEnsemble fit_ensemble(const FeatureMatrix& x, const EnsembleOptions& opt) {
  ClassifierEnsemble e;
  e.standardizer = Standardizer::fit(x);
  const auto z = e.standardizer.transform(x);
  e.svm = train_svm(z, x.rows, x.cols, x.labels, opt.svm);
  e.mlp = train_mlp(z, x.rows, x.cols, x.labels, opt.mlp);
  e.adaboost = train_adaboost(z, x.rows, x.cols, x.labels, opt.adaboost);
  return e;
}

// Serialisation -----------------------------------------------------------------

namespace {

void write_dense(ByteWriter& w, const DenseSpec<double>& d) {
  w.u32(static_cast<std::uint32_t>(d.in_dim));
  w.u32(static_cast<std::uint32_t>(d.out_dim));
  for (double v : d.weight) w.f64(v);
  for (double v : d.bias) w.f64(v);
}

DenseSpec<double> read_dense(ByteReader& r) {
  const int in = static_cast<int>(r.u32());
  const int out = static_cast<int>(r.u32());
  if (in < 1 || out < 1 || static_cast<std::size_t>(in) * out > r.remaining())
    throw FormatError("ensemble section: bad dense layer shape");
  DenseSpec<double> d(in, out);
  for (auto& v : d.weight) v = r.f64();
  for (auto& v : d.bias) v = r.f64();
  return d;
}

}  // namespace

Section ClassifierEnsemble::to_section() const {
  ByteWriter w;
  const auto d = static_cast<std::uint32_t>(dims());
  w.u32(d);
  for (double v : standardizer.mean) w.f64(v);
  for (double v : standardizer.stdev) w.f64(v);
  for (double v : svm.weight) w.f64(v);
  w.f64(svm.bias);
  write_dense(w, mlp.hidden);
  write_dense(w, mlp.output);
  w.u32(static_cast<std::uint32_t>(adaboost.fallback_label));
  w.u32(static_cast<std::uint32_t>(adaboost.stumps.size()));
  for (const auto& s : adaboost.stumps) {
    w.u32(static_cast<std::uint32_t>(s.feature));
    w.f64(s.threshold);
    w.u32(static_cast<std::uint32_t>(s.polarity));
    w.f64(s.alpha);
  }
  Section sec;
  std::copy(kEnsembleTag.begin(), kEnsembleTag.end(), sec.tag.begin());
  sec.payload = std::move(w.buffer());
  return sec;
}

ClassifierEnsemble ClassifierEnsemble::from_section(const Section& section) {
  ByteReader r(section.payload);
  ClassifierEnsemble e;
  const std::uint32_t d = r.u32();
  if (static_cast<std::size_t>(d) * 24 > r.remaining()) throw FormatError("ensemble section: truncated");
  e.standardizer.mean.resize(d);
  e.standardizer.stdev.resize(d);
  for (auto& v : e.standardizer.mean) v = r.f64();
  for (auto& v : e.standardizer.stdev) v = r.f64();
  e.svm.weight.resize(d);
  for (auto& v : e.svm.weight) v = r.f64();
  e.svm.bias = r.f64();
  e.mlp.hidden = read_dense(r);
  e.mlp.output = read_dense(r);
  if (e.mlp.hidden.in_dim != static_cast<int>(d) || e.mlp.output.in_dim != e.mlp.hidden.out_dim ||
      e.mlp.output.out_dim != 2)
    throw FormatError("ensemble section: inconsistent MLP shape");
  e.adaboost.fallback_label = static_cast<int>(r.u32());
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    Stump s;
    s.feature = static_cast<int>(r.u32());
    s.threshold = r.f64();
    s.polarity = static_cast<int>(r.u32());
    s.alpha = r.f64();
    if (s.feature < 0 || s.feature >= static_cast<int>(d)) throw FormatError("ensemble section: bad stump feature");
    e.adaboost.stumps.push_back(s);
  }
  if (r.remaining() != 0) throw FormatError("ensemble section: trailing bytes");
  return e;
}

}  // namespace dsbel
