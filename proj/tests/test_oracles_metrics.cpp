#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sdgc/metrics.hpp"
#include "sdgc/oracles.hpp"
#include "sdgc/psd_denoiser.hpp"

using namespace sdgc;
using oracles::GaussianSpec;

TEST_CASE("gaussian posterior: conjugate formula and limits") {
  GaussianSpec prior = GaussianSpec::standard(1);
  auto post = oracles::gaussian_posterior(prior, {1.0}, 1.0, {2.0});
  CHECK(post.mean[0] == doctest::Approx(1.0));
  CHECK(post.diag_cov[0] == doctest::Approx(0.5));

  // h = 0 leaves the prior untouched
  GaussianSpec p2;
  p2.mean = {0.3, -0.7};
  p2.diag_cov = {1.4, 0.5};
  auto post2 = oracles::gaussian_posterior(p2, {0.0}, 0.8, {5.0, -3.0});
  for (int i = 0; i < 2; ++i) {
    CHECK(post2.mean[size_t(i)] == doctest::Approx(p2.mean[size_t(i)]));
    CHECK(post2.diag_cov[size_t(i)] == doctest::Approx(p2.diag_cov[size_t(i)]));
  }

  // noiseless limit: mean -> z'/h, var -> 0
  auto post3 = oracles::gaussian_posterior(prior, {2.0}, 1e-12, {3.0});
  CHECK(post3.mean[0] == doctest::Approx(1.5).epsilon(1e-9));
  CHECK(post3.diag_cov[0] < 1e-11);

  CHECK_THROWS_AS(oracles::gaussian_posterior(prior, {1.0}, 0.0, {1.0}), Error);
  CHECK_THROWS_AS(oracles::gaussian_posterior(prior, {1.0}, -1.0, {1.0}), Error);
}

TEST_CASE("gaussian posterior agrees with numeric integration (oracle self-check)") {
  GaussianSpec prior;
  prior.mean = {0.3};
  prior.diag_cov = {1.7};
  double h = 0.8, sigma2 = 0.5, zp = 1.1;
  auto post = oracles::gaussian_posterior(prior, {h}, sigma2, {zp});

  // trapezoid over a wide grid: E[z | z'] = int z p(z) p(z'|z) dz / evidence
  double lo = -10, hi = 10;
  const int n = 20001;
  double num = 0, den = 0;
  for (int i = 0; i < n; ++i) {
    double z = lo + (hi - lo) * i / (n - 1);
    double pz = std::exp(-0.5 * (z - prior.mean[0]) * (z - prior.mean[0]) / prior.diag_cov[0]);
    double lik = std::exp(-0.5 * (zp - h * z) * (zp - h * z) / sigma2);
    double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
    num += w * z * pz * lik;
    den += w * pz * lik;
  }
  CHECK(post.mean[0] == doctest::Approx(num / den).epsilon(0.01));
}

TEST_CASE("analytic score matches numerically differentiated log-density") {
  auto s = diffusion::default_schedule_desk();
  GaussianSpec prior;
  prior.mean = {0.2, -0.5, 0.0};
  prior.diag_cov = {0.8, 1.5, 1.0};
  std::vector<double> zt = {0.7, -0.1, 1.3};
  for (int64_t t : {15L, 90L, 180L}) {
    auto se = oracles::analytic_gaussian_score(zt, t, s, prior);
    for (int i = 0; i < 3; ++i) {
      auto zp = zt, zm = zt;
      zp[size_t(i)] += 1e-5;
      zm[size_t(i)] -= 1e-5;
      double fd = (oracles::gaussian_marginal_logpdf(zp, t, s, prior) -
                   oracles::gaussian_marginal_logpdf(zm, t, s, prior)) /
                  2e-5;
      CHECK(se.score[size_t(i)] == doctest::Approx(fd).epsilon(1e-6));
    }
  }

  // dense covariance path
  GaussianSpec full;
  full.mean = {0.1, -0.2};
  full.diag_cov = {};
  full.full_cov = {1.2, 0.4, 0.4, 0.9};
  std::vector<double> z2 = {0.6, -0.9};
  auto se = oracles::analytic_gaussian_score(z2, 50, s, full);
  for (int i = 0; i < 2; ++i) {
    auto zp = z2, zm = z2;
    zp[size_t(i)] += 1e-5;
    zm[size_t(i)] -= 1e-5;
    double fd = (oracles::gaussian_marginal_logpdf(zp, 50, s, full) -
                 oracles::gaussian_marginal_logpdf(zm, 50, s, full)) /
                2e-5;
    CHECK(se.score[size_t(i)] == doctest::Approx(fd).epsilon(1e-6));
  }

  // standard-normal prior keeps a unit marginal: score = -z_t
  auto sn = oracles::analytic_gaussian_score(zt, 100, s, GaussianSpec::standard(3));
  for (int i = 0; i < 3; ++i) CHECK(sn.score[size_t(i)] == doctest::Approx(-zt[size_t(i)]).epsilon(1e-12));

  // abar -> 1: the marginal approaches the prior
  auto near = diffusion::make_schedule(10, 1e-6, 1e-6);
  auto s1 = oracles::analytic_gaussian_score(zt, 1, near, prior);
  for (int i = 0; i < 3; ++i) {
    double prior_score = -(zt[size_t(i)] - prior.mean[size_t(i)]) / prior.diag_cov[size_t(i)];
    CHECK(s1.score[size_t(i)] == doctest::Approx(prior_score).epsilon(1e-3));
  }
}

TEST_CASE("lasso coordinate descent") {
  // lambda = 0 on an invertible system reproduces least squares
  std::vector<double> A = {2.0, 0.3, 0.1, 1.5, -0.2, 0.4, 0.0, 0.9, 1.1};
  std::vector<double> y = {1.0, -0.5, 0.7};
  auto h0 = oracles::lasso_cd(A, 3, 3, y, 0.0);
  // Gaussian elimination cross-check via normal equations
  Eigen::Matrix3d Am;
  Am << 2.0, 0.3, 0.1, 1.5, -0.2, 0.4, 0.0, 0.9, 1.1;
  Eigen::Vector3d yv(1.0, -0.5, 0.7);
  Eigen::Vector3d ls = Am.colPivHouseholderQr().solve(yv);
  for (int i = 0; i < 3; ++i) CHECK(h0[size_t(i)] == doctest::Approx(ls(i)).epsilon(1e-7));

  // lambda above ||A^T y||_inf zeroes everything
  double linf = (Am.transpose() * yv).cwiseAbs().maxCoeff();
  auto hz = oracles::lasso_cd(A, 3, 3, y, linf * 1.001);
  for (double v : hz) CHECK(v == 0.0);

  // iterated sparsity_step reaches the same fixed point
  Rng rng(5);
  std::vector<double> z(4), taps = {0.8, 0.0, -0.5, 0.2};
  for (auto& v : z) v = rng.normal();
  auto zp = circular_convolve(taps, z);
  auto Ac = oracles::circulant_from_signal(z, 4);
  double lambda = 0.05;
  auto oracle = oracles::lasso_cd(Ac, 4, 4, zp, lambda);
  // step size below 1/L
  Eigen::MatrixXd Am2(4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) Am2(r, c) = Ac[size_t(r * 4 + c)];
  double L = (Am2.transpose() * Am2).eigenvalues().real().maxCoeff();
  double alpha = 0.9 / L;
  std::vector<double> h(4, 0.0);
  for (int it = 0; it < 20000; ++it) h = psd::sparsity_step(h, z, zp, alpha, lambda / alpha);
  for (int i = 0; i < 4; ++i) CHECK(h[size_t(i)] == doctest::Approx(oracle[size_t(i)]).epsilon(1e-4));
}

TEST_CASE("psnr") {
  std::vector<double> x = {0.1, 0.5, 0.9, 0.3};
  CHECK(metrics::psnr(x, x) == doctest::Approx(100.0));  // capped sentinel

  // MSE == peak^2 -> 0 dB
  std::vector<double> a = {1.0, 1.0}, b = {0.0, 0.0};
  CHECK(metrics::psnr(a, b, 1.0) == doctest::Approx(0.0));

  // peak 1, MSE 0.01 -> 20 dB
  std::vector<double> c = {0.5, 0.5}, d = {0.6, 0.4};
  CHECK(metrics::psnr(c, d, 1.0) == doctest::Approx(20.0));

  CHECK_THROWS_AS(metrics::psnr({1.0}, {1.0, 2.0}), Error);
  CHECK_THROWS_AS(metrics::psnr(x, x, 0.0), Error);

  // strictly decreasing as noise grows
  Rng rng(9);
  std::vector<double> img(256), noisy(256);
  for (auto& v : img) v = rng.uniform();
  double prev = metrics::psnr(img, img);
  for (double sd : {0.01, 0.03, 0.1, 0.3}) {
    Rng nr(4);
    for (size_t i = 0; i < img.size(); ++i) noisy[i] = img[i] + sd * nr.normal();
    double p = metrics::psnr(img, noisy);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("frechet distance on latent sets") {
  Rng rng(31);
  std::vector<std::vector<double>> A;
  for (int i = 0; i < 64; ++i) {
    std::vector<double> v(4);
    for (auto& x : v) x = rng.normal();
    A.push_back(v);
  }
  CHECK(metrics::frechet_gaussian(A, A) == doctest::Approx(0.0).epsilon(1e-8));

  // 1-D specialization: (mu_a - mu_b)^2 + (sd_a - sd_b)^2
  std::vector<std::vector<double>> a1, b1;
  Rng r1(3);
  for (int i = 0; i < 4000; ++i) {
    a1.push_back({2.0 + 0.5 * r1.normal()});
    b1.push_back({-1.0 + 1.5 * r1.normal()});
  }
  double expect = 9.0 + 1.0;  // (2-(-1))^2 + (0.5-1.5)^2
  CHECK(metrics::frechet_gaussian(a1, b1) == doctest::Approx(expect).epsilon(0.05));

  // disjoint shifted sets: mean term alone gives >= 36
  std::vector<std::vector<double>> B;
  for (const auto& v : A) {
    auto w = v;
    for (auto& x : w) x += 3.0;
    B.push_back(w);
  }
  CHECK(metrics::frechet_gaussian(A, B) >= 36.0 * 0.98);

  // symmetry and nonnegativity
  std::vector<std::vector<double>> C;
  for (int i = 0; i < 64; ++i) {
    std::vector<double> v(4);
    for (auto& x : v) x = 0.3 + 0.8 * rng.normal();
    C.push_back(v);
  }
  double ab = metrics::frechet_gaussian(A, C);
  double ba = metrics::frechet_gaussian(C, A);
  CHECK(ab == doctest::Approx(ba).epsilon(1e-9));
  CHECK(ab >= 0.0);

  // diagonal fallback for small sets
  std::vector<std::vector<double>> tiny_a(A.begin(), A.begin() + 4), tiny_b(C.begin(), C.begin() + 4);
  double dd = metrics::frechet_gaussian(tiny_a, tiny_b, metrics::FrechetCov::Diagonal);
  CHECK(dd >= 0.0);
  CHECK_THROWS_AS(metrics::frechet_gaussian(tiny_a, tiny_b, metrics::FrechetCov::Full), Error);

  // degenerate covariance is regularized rather than fatal
  std::vector<std::vector<double>> flat_set(16, std::vector<double>{1.0, 2.0});
  CHECK(metrics::frechet_gaussian(flat_set, flat_set, metrics::FrechetCov::Diagonal) == doctest::Approx(0.0));
}
