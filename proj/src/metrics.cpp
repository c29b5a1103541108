#include "sdgc/metrics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>

namespace sdgc::metrics {

double mse(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    throw Error(cat("mse: shape mismatch ", a.size(), " vs ", b.size()));
  double acc = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double psnr(const std::vector<double>& x, const std::vector<double>& xrec, double peak) {
  if (!(peak > 0)) throw Error(cat("psnr: peak must be > 0, got ", peak));
  double m = mse(x, xrec);
  if (m == 0.0) return kPsnrCapDb;
  double v = 10.0 * std::log10(peak * peak / m);
  return std::min(v, kPsnrCapDb);
}

namespace {

struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // full or diagonal-as-matrix
};

Moments fit(const std::vector<std::vector<double>>& set, bool full) {
  int64_t n = static_cast<int64_t>(set.size());
  int64_t d = static_cast<int64_t>(set[0].size());
  Moments m;
  m.mean = Eigen::VectorXd::Zero(d);
  for (const auto& v : set) {
    if (static_cast<int64_t>(v.size()) != d) throw Error("frechet: inconsistent latent dims");
    for (int64_t i = 0; i < d; ++i) m.mean(i) += v[static_cast<size_t>(i)];
  }
  m.mean /= static_cast<double>(n);
  m.cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& v : set) {
    Eigen::VectorXd c(d);
    for (int64_t i = 0; i < d; ++i) c(i) = v[static_cast<size_t>(i)] - m.mean(i);
    if (full)
      m.cov.noalias() += c * c.transpose();
    else
      for (int64_t i = 0; i < d; ++i) m.cov(i, i) += c(i) * c(i);
  }
  m.cov /= static_cast<double>(n);
  return m;
}

// symmetric PSD square root via eigen-decomposition, clamping tiny negatives
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& M) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_gaussian(const std::vector<std::vector<double>>& set_a, const std::vector<std::vector<double>>& set_b,
                        FrechetCov cov) {
  if (set_a.size() < 2 || set_b.size() < 2) throw Error("frechet: each set needs at least 2 samples");
  int64_t d = static_cast<int64_t>(set_a[0].size());
  bool full;
  switch (cov) {
    case FrechetCov::Full:
      if (static_cast<int64_t>(set_a.size()) < 2 * d || static_cast<int64_t>(set_b.size()) < 2 * d)
        throw Error(cat("frechet: full covariance needs >= ", 2 * d, " samples per set"));
      if (d > 64) throw Error(cat("frechet: full covariance limited to d <= 64, got ", d));
      full = true;
      break;
    case FrechetCov::Diagonal:
      full = false;
      break;
    case FrechetCov::Auto:
    default:
      full = d <= 64 && static_cast<int64_t>(set_a.size()) >= 2 * d && static_cast<int64_t>(set_b.size()) >= 2 * d;
      break;
  }

  Moments A = fit(set_a, full), B = fit(set_b, full);

  auto fix_degenerate = [&](Moments& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.cov);
    if (es.eigenvalues().minCoeff() < 1e-12) {
      std::fprintf(stderr, "[frechet] degenerate covariance; regularizing with 1e-6 I\n");
      m.cov += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    }
  };
  fix_degenerate(A);
  fix_degenerate(B);

  double mean_term = (A.mean - B.mean).squaredNorm();
  if (!full) {
    // diagonal case: Tr(Sa + Sb - 2 sqrt(Sa Sb)) with everything elementwise
    double tr = 0;
    for (int64_t i = 0; i < d; ++i) {
      double sa = A.cov(i, i), sb = B.cov(i, i);
      tr += sa + sb - 2.0 * std::sqrt(sa * sb);
    }
    return mean_term + tr;
  }
  Eigen::MatrixXd sa_half = psd_sqrt(A.cov);
  Eigen::MatrixXd inner = sa_half * B.cov * sa_half;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
  double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  double tr = A.cov.trace() + B.cov.trace() - 2.0 * tr_sqrt;
  return mean_term + tr;
}

}  // namespace sdgc::metrics
