#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsbel/ensemble.hpp"

namespace dsbel {

namespace {

double off_diagonal_norm(const std::vector<double>& a, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) s += a[static_cast<std::size_t>(i) * n + j] * a[static_cast<std::size_t>(i) * n + j];
  return std::sqrt(s);
}

}  // namespace

// Cyclic-by-row Jacobi. Converged when the off-diagonal Frobenius norm drops
// below tol * max(1, |A|_F).
JacobiResult jacobi_eigen(std::vector<double> a, int n, double tol, int max_sweeps) {
  if (n < 1 || a.size() != static_cast<std::size_t>(n) * n) throw ConfigError("jacobi_eigen: not an n x n matrix");
  auto A = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };
  JacobiResult r;
  r.vectors.assign(static_cast<std::size_t>(n) * n, 0.0);
  auto V = [&](int i, int j) -> double& { return r.vectors[static_cast<std::size_t>(i) * n + j]; };
  for (int i = 0; i < n; ++i) V(i, i) = 1.0;

  double frob = 0.0;
  for (double v : a) frob += v * v;
  const double threshold = tol * std::max(1.0, std::sqrt(frob));

  r.off_norm = off_diagonal_norm(a, n);
  while (r.off_norm >= threshold && r.sweeps < max_sweeps) {
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (apq == 0.0) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = A(k, p);
          const double akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = A(p, k);
          const double aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        A(p, q) = 0.0;
        A(q, p) = 0.0;
        for (int k = 0; k < n; ++k) {
          const double vkp = V(k, p);
          const double vkq = V(k, q);
          V(k, p) = c * vkp - s * vkq;
          V(k, q) = s * vkp + c * vkq;
        }
      }
    }
    ++r.sweeps;
    r.off_norm = off_diagonal_norm(a, n);
  }
  if (r.off_norm >= threshold) throw NumericError("jacobi_eigen: no convergence");
  r.values.resize(n);
  for (int i = 0; i < n; ++i) r.values[i] = A(i, i);
  return r;
}

PcaModel pca_fit(std::span<const double> x, int rows, int dims, int k) {
  if (rows < 2) throw DataError("pca_fit: need at least two rows");
  if (k < 1 || k > dims) throw ConfigError("pca_fit: k must be in [1, dims]");
  if (x.size() != static_cast<std::size_t>(rows) * dims) throw ConfigError("pca_fit: size mismatch");
  PcaModel m;
  m.dims = dims;
  m.components = k;
  m.mean.assign(dims, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int d = 0; d < dims; ++d) m.mean[d] += x[static_cast<std::size_t>(r) * dims + d];
  for (auto& v : m.mean) v /= rows;

  std::vector<double> centered(x.begin(), x.end());
  for (int r = 0; r < rows; ++r)
    for (int d = 0; d < dims; ++d) centered[static_cast<std::size_t>(r) * dims + d] -= m.mean[d];
  std::vector<double> cov(static_cast<std::size_t>(dims) * dims, 0.0);
  for (int r = 0; r < rows; ++r) {
    const double* row = centered.data() + static_cast<std::size_t>(r) * dims;
    for (int i = 0; i < dims; ++i) {
      if (row[i] == 0.0) continue;
      double* ci = cov.data() + static_cast<std::size_t>(i) * dims;
      for (int j = i; j < dims; ++j) ci[j] += row[i] * row[j];
    }
  }
  for (int i = 0; i < dims; ++i)
    for (int j = i; j < dims; ++j) {
      const double v = cov[static_cast<std::size_t>(i) * dims + j] / (rows - 1);
      cov[static_cast<std::size_t>(i) * dims + j] = v;
      cov[static_cast<std::size_t>(j) * dims + i] = v;
    }

  const JacobiResult eig = jacobi_eigen(std::move(cov), dims);
  m.sweeps = eig.sweeps;
  std::vector<int> order(dims);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return eig.values[a] > eig.values[b]; });

  m.eigenvectors.assign(static_cast<std::size_t>(dims) * k, 0.0);
  for (int j = 0; j < k; ++j) {
    const int src = order[j];
    m.eigenvalues.push_back(std::max(0.0, eig.values[src]));
    int big = 0;
    for (int i = 1; i < dims; ++i)
      if (std::abs(eig.vectors[static_cast<std::size_t>(i) * dims + src]) >
          std::abs(eig.vectors[static_cast<std::size_t>(big) * dims + src]))
        big = i;
    const double sign = eig.vectors[static_cast<std::size_t>(big) * dims + src] < 0.0 ? -1.0 : 1.0;
    for (int i = 0; i < dims; ++i)
      m.eigenvectors[static_cast<std::size_t>(i) * k + j] = sign * eig.vectors[static_cast<std::size_t>(i) * dims + src];
  }
  return m;
}

std::vector<double> PcaModel::project(std::span<const double> x, int rows) const {
  if (x.size() != static_cast<std::size_t>(rows) * dims) throw ConfigError("pca project: dimension mismatch");
  std::vector<double> out(static_cast<std::size_t>(rows) * components, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < components; ++j) {
      double s = 0.0;
      for (int d = 0; d < dims; ++d)
        s += (x[static_cast<std::size_t>(r) * dims + d] - mean[d]) * eigenvectors[static_cast<std::size_t>(d) * components + j];
      out[static_cast<std::size_t>(r) * components + j] = s;
    }
  return out;
}

}  // namespace dsbel
