#pragma once

// Evaluation metrics: PSNR and the desk-scale Fréchet distance between
// Gaussians fitted to codec-latent sets (reported as `lfd`).

#include <vector>

#include "sdgc/common.hpp"

namespace sdgc::metrics {

double mse(const std::vector<double>& a, const std::vector<double>& b);

// 10 log10(peak^2 / MSE); zero MSE reports the 100 dB sentinel, which also
// caps the scale in CSV output.
double psnr(const std::vector<double>& x, const std::vector<double>& xrec, double peak = 1.0);

constexpr double kPsnrCapDb = 100.0;

enum class FrechetCov { Auto, Full, Diagonal };

// Frechet distance between Gaussians fitted to two latent sets:
// ||mu_A - mu_B||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).
// Full covariance needs at least 2*d samples per set and d <= 64; otherwise
// (or when forced) the diagonal form is used. Degenerate covariances are
// regularized with 1e-6 I (warning on stderr).
double frechet_gaussian(const std::vector<std::vector<double>>& set_a, const std::vector<std::vector<double>>& set_b,
                        FrechetCov cov = FrechetCov::Auto);

}  // namespace sdgc::metrics
