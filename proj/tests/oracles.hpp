#pragma once

// Independent reference implementations used as test oracles. They are
// written for clarity, not speed, and share no code with the library.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dsbel/common.hpp"

namespace oracle {

// Direct summation of out[n][o][y][x] = b[o] + sum_{c,i,j} w[o][c][i][j] *
// in[n][c][y*s + i*d - p][x*s + j*d - p], zero outside the input.
inline std::vector<double> conv2d(const std::vector<double>& in, int n, int c, int h, int w,
                                  const std::vector<double>& weight, const std::vector<double>& bias, int out_c,
                                  int kh, int kw, int stride, int dil, int pad, int& oh, int& ow) {
  oh = (h + 2 * pad - ((kh - 1) * dil + 1)) / stride + 1;
  ow = (w + 2 * pad - ((kw - 1) * dil + 1)) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n) * out_c * oh * ow, 0.0);
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < out_c; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double s = bias[o];
          for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int iy = y * stride + i * dil - pad;
                const int ix = x * stride + j * dil - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                s += weight[((static_cast<std::size_t>(o) * c + ci) * kh + i) * kw + j] *
                     in[((static_cast<std::size_t>(b) * c + ci) * h + iy) * w + ix];
              }
          out[((static_cast<std::size_t>(b) * out_c + o) * oh + y) * ow + x] = s;
        }
  return out;
}

// Mann-Whitney pair counting: P(score_pos > score_neg) + 0.5 P(tie).
inline double auc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  double good = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) good += 1.0;
      else if (scores[i] == scores[j]) good += 0.5;
    }
  }
  return good / pairs;
}

struct Metrics {
  double accuracy, precision, recall, f1, mcc;
};

// Textbook formulas with the zero-denominator conventions spelled out.
inline Metrics metrics(double tp, double tn, double fp, double fn) {
  Metrics m{};
  m.accuracy = 100.0 * (tp + tn) / (tp + tn + fp + fn);
  const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  m.precision = 100.0 * p;
  m.recall = 100.0 * r;
  m.f1 = p + r > 0 ? 100.0 * 2.0 * p * r / (p + r) : 0.0;
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  m.mcc = den > 0 ? (tp * tn - fp * fn) / std::sqrt(den) : 0.0;
  return m;
}

}  // namespace oracle
