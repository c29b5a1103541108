#pragma once

// Independent analytic references used for verification: conjugate Gaussian
// posteriors, the exact Gaussian diffusion score, and a coordinate-descent
// lasso solver that arbitrates the sparsity step.

#include <vector>

#include "sdgc/common.hpp"
#include "sdgc/diffusion.hpp"

namespace sdgc::oracles {

struct GaussianSpec {
  std::vector<double> mean;
  std::vector<double> diag_cov;  // diagonal path (any d)
  std::vector<double> full_cov;  // row-major d*d; enables the dense path (d <= 16)

  bool diagonal() const { return full_cov.empty(); }
  int64_t dim() const { return static_cast<int64_t>(mean.size()); }
  void validate() const;

  static GaussianSpec standard(int64_t d) {
    GaussianSpec g;
    g.mean.assign(static_cast<size_t>(d), 0.0);
    g.diag_cov.assign(static_cast<size_t>(d), 1.0);
    return g;
  }
};

// Posterior of z given z' = h .* z + n, n ~ N(0, sigma2 I), per coordinate:
// var = 1/(h^2/sigma2 + 1/s), mean = var * (h z'/sigma2 + mu/s).
// h has one entry (flat, applied to every coordinate) or d entries.
GaussianSpec gaussian_posterior(const GaussianSpec& prior, const std::vector<double>& h, double sigma2,
                                const std::vector<double>& zprime);

struct ScoreEps {
  std::vector<double> score;
  std::vector<double> eps;
};

// Exact score of the diffusion marginal N(sqrt(abar) mu, abar Cov + (1-abar) I)
// and the matching optimal noise prediction eps* = -sqrt(1-abar) * score.
ScoreEps analytic_gaussian_score(const std::vector<double>& z_t, int64_t t, const diffusion::NoiseSchedule& s,
                                 const GaussianSpec& prior);

// log-density of the same marginal (for finite-difference cross-checks)
double gaussian_marginal_logpdf(const std::vector<double>& z_t, int64_t t, const diffusion::NoiseSchedule& s,
                                const GaussianSpec& prior);

// Coordinate descent on 1/2 ||y - A h||^2 + lambda ||h||_1 run to a fixed
// point (max coordinate update < 1e-10). A is n x m row-major.
std::vector<double> lasso_cd(const std::vector<double>& A, int64_t n, int64_t m, const std::vector<double>& y,
                             double lambda);

// Circulant operator matrix of a fixed signal: (d x m), column k = roll(z, k);
// lets the lasso oracle see the same operator as the sparsity step.
std::vector<double> circulant_from_signal(const std::vector<double>& z, int64_t m);

}  // namespace sdgc::oracles
