#include "sdgc/oracles.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace sdgc::oracles {

void GaussianSpec::validate() const {
  int64_t d = dim();
  if (diagonal()) {
    if (static_cast<int64_t>(diag_cov.size()) != d) throw Error("gaussian: mean/cov size mismatch");
    for (double v : diag_cov)
      if (!(v > 0)) throw Error("gaussian: diagonal covariance must be positive");
    return;
  }
  if (static_cast<int64_t>(full_cov.size()) != d * d) throw Error("gaussian: full covariance must be d*d");
  if (d > 16) throw Error(cat("gaussian: full covariance supported for d <= 16, got ", d));
  Eigen::MatrixXd C(d, d);
  for (int64_t r = 0; r < d; ++r)
    for (int64_t c = 0; c < d; ++c) C(r, c) = full_cov[static_cast<size_t>(r * d + c)];
  if (!C.isApprox(C.transpose(), 1e-10)) throw Error("gaussian: covariance not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(C);
  if (llt.info() != Eigen::Success) throw Error("gaussian: covariance not positive definite");
}

GaussianSpec gaussian_posterior(const GaussianSpec& prior, const std::vector<double>& h, double sigma2,
                                const std::vector<double>& zprime) {
  prior.validate();
  if (!prior.diagonal()) throw Error("gaussian_posterior: diagonal priors only (flat or per-element channel)");
  if (!(sigma2 > 0)) throw Error(cat("gaussian_posterior: sigma2 must be > 0, got ", sigma2));
  int64_t d = prior.dim();
  if (static_cast<int64_t>(zprime.size()) != d) throw Error("gaussian_posterior: observation size mismatch");
  if (h.size() != 1 && static_cast<int64_t>(h.size()) != d)
    throw Error(cat("gaussian_posterior: channel must have 1 or ", d, " entries, got ", h.size()));

  GaussianSpec post;
  post.mean.resize(static_cast<size_t>(d));
  post.diag_cov.resize(static_cast<size_t>(d));
  for (int64_t i = 0; i < d; ++i) {
    double hi = h.size() == 1 ? h[0] : h[static_cast<size_t>(i)];
    double s = prior.diag_cov[static_cast<size_t>(i)];
    double var = 1.0 / (hi * hi / sigma2 + 1.0 / s);
    double mean = var * (hi * zprime[static_cast<size_t>(i)] / sigma2 + prior.mean[static_cast<size_t>(i)] / s);
    post.diag_cov[static_cast<size_t>(i)] = var;
    post.mean[static_cast<size_t>(i)] = mean;
  }
  return post;
}

ScoreEps analytic_gaussian_score(const std::vector<double>& z_t, int64_t t, const diffusion::NoiseSchedule& s,
                                 const GaussianSpec& prior) {
  prior.validate();
  int64_t d = prior.dim();
  if (static_cast<int64_t>(z_t.size()) != d) throw Error("analytic_gaussian_score: size mismatch");
  double ab = s.abar(t);
  double om = 1.0 - ab, sab = std::sqrt(ab);

  ScoreEps out;
  out.score.resize(static_cast<size_t>(d));
  out.eps.resize(static_cast<size_t>(d));
  if (prior.diagonal()) {
    for (int64_t i = 0; i < d; ++i) {
      double mv = ab * prior.diag_cov[static_cast<size_t>(i)] + om;
      double sc = -(z_t[static_cast<size_t>(i)] - sab * prior.mean[static_cast<size_t>(i)]) / mv;
      out.score[static_cast<size_t>(i)] = sc;
      out.eps[static_cast<size_t>(i)] = -std::sqrt(om) * sc;
    }
    return out;
  }
  Eigen::MatrixXd M(d, d);
  for (int64_t r = 0; r < d; ++r)
    for (int64_t c = 0; c < d; ++c)
      M(r, c) = ab * prior.full_cov[static_cast<size_t>(r * d + c)] + (r == c ? om : 0.0);
  Eigen::VectorXd centered(d);
  for (int64_t i = 0; i < d; ++i) centered(i) = z_t[static_cast<size_t>(i)] - sab * prior.mean[static_cast<size_t>(i)];
  Eigen::VectorXd sc = -M.ldlt().solve(centered);
  for (int64_t i = 0; i < d; ++i) {
    out.score[static_cast<size_t>(i)] = sc(i);
    out.eps[static_cast<size_t>(i)] = -std::sqrt(om) * sc(i);
  }
  return out;
}

double gaussian_marginal_logpdf(const std::vector<double>& z_t, int64_t t, const diffusion::NoiseSchedule& s,
                                const GaussianSpec& prior) {
  prior.validate();
  int64_t d = prior.dim();
  double ab = s.abar(t), om = 1.0 - ab, sab = std::sqrt(ab);
  const double log2pi = 1.8378770664093454836;
  if (prior.diagonal()) {
    double acc = 0;
    for (int64_t i = 0; i < d; ++i) {
      double mv = ab * prior.diag_cov[static_cast<size_t>(i)] + om;
      double dv = z_t[static_cast<size_t>(i)] - sab * prior.mean[static_cast<size_t>(i)];
      acc += -0.5 * (log2pi + std::log(mv) + dv * dv / mv);
    }
    return acc;
  }
  Eigen::MatrixXd M(d, d);
  for (int64_t r = 0; r < d; ++r)
    for (int64_t c = 0; c < d; ++c)
      M(r, c) = ab * prior.full_cov[static_cast<size_t>(r * d + c)] + (r == c ? om : 0.0);
  Eigen::VectorXd centered(d);
  for (int64_t i = 0; i < d; ++i) centered(i) = z_t[static_cast<size_t>(i)] - sab * prior.mean[static_cast<size_t>(i)];
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  double logdet = 0;
  for (int64_t i = 0; i < d; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  double quad = centered.dot(llt.solve(centered));
  return -0.5 * (static_cast<double>(d) * log2pi + logdet + quad);
}

std::vector<double> lasso_cd(const std::vector<double>& A, int64_t n, int64_t m, const std::vector<double>& y,
                             double lambda) {
  if (static_cast<int64_t>(A.size()) != n * m || static_cast<int64_t>(y.size()) != n)
    throw Error("lasso_cd: dimension mismatch");
  if (lambda < 0) throw Error(cat("lasso_cd: lambda must be >= 0, got ", lambda));

  std::vector<double> col_sq(static_cast<size_t>(m), 0.0);
  for (int64_t j = 0; j < m; ++j)
    for (int64_t i = 0; i < n; ++i) {
      double a = A[static_cast<size_t>(i * m + j)];
      col_sq[static_cast<size_t>(j)] += a * a;
    }

  std::vector<double> h(static_cast<size_t>(m), 0.0);
  std::vector<double> resid(y);  // y - A h
  const int64_t max_sweeps = 100000;
  for (int64_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double max_delta = 0.0;
    for (int64_t j = 0; j < m; ++j) {
      if (col_sq[static_cast<size_t>(j)] == 0.0) continue;
      double rho = 0.0;
      for (int64_t i = 0; i < n; ++i) rho += A[static_cast<size_t>(i * m + j)] * resid[static_cast<size_t>(i)];
      rho += col_sq[static_cast<size_t>(j)] * h[static_cast<size_t>(j)];
      double hj;
      if (rho > lambda)
        hj = (rho - lambda) / col_sq[static_cast<size_t>(j)];
      else if (rho < -lambda)
        hj = (rho + lambda) / col_sq[static_cast<size_t>(j)];
      else
        hj = 0.0;
      double delta = hj - h[static_cast<size_t>(j)];
      if (delta != 0.0) {
        for (int64_t i = 0; i < n; ++i) resid[static_cast<size_t>(i)] -= A[static_cast<size_t>(i * m + j)] * delta;
        h[static_cast<size_t>(j)] = hj;
      }
      max_delta = std::max(max_delta, std::abs(delta));
    }
    if (max_delta < 1e-10) return h;
  }
  throw NumericError("lasso_cd: no convergence within sweep budget");
}

std::vector<double> circulant_from_signal(const std::vector<double>& z, int64_t m) {
  int64_t d = static_cast<int64_t>(z.size());
  if (m < 1 || m > d) throw Error(cat("circulant_from_signal: bad tap count ", m));
  std::vector<double> A(static_cast<size_t>(d * m));
  for (int64_t i = 0; i < d; ++i)
    for (int64_t k = 0; k < m; ++k) A[static_cast<size_t>(i * m + k)] = z[static_cast<size_t>((i - k + d) % d)];
  return A;
}

}  // namespace sdgc::oracles
