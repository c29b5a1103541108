#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sdgc/diffusion.hpp"
#include "sdgc/oracles.hpp"

using namespace sdgc;
using ad::Tensor;
using diffusion::NoiseSchedule;
using diffusion::TweedieForm;

TEST_CASE("schedule construction and identities") {
  auto ref = diffusion::default_schedule_reference();
  CHECK(ref.T == 1000);
  CHECK(ref.beta_at(1) == doctest::Approx(1e-4));
  CHECK(ref.beta_at(1000) == doctest::Approx(0.02));
  CHECK(ref.abar(1000) < 0.01);

  auto desk = diffusion::default_schedule_desk();
  CHECK(desk.T == 200);
  CHECK(desk.abar(desk.T) < 0.01);
  // rescaled endpoints keep the terminal signal level of the reference schedule
  CHECK(std::abs(desk.abar(desk.T) - ref.abar(ref.T)) < 1e-4);

  for (int64_t t = 1; t <= desk.T; ++t) {
    CHECK(desk.alpha_at(t) == 1.0 - desk.beta_at(t));  // exact
    CHECK(desk.abar(t) == desk.abar(t - 1) * desk.alpha_at(t));
  }

  // constant schedule: abar_t = (1-b)^t
  auto c = diffusion::make_schedule(50, 0.03, 0.03);
  for (int64_t t = 1; t <= 50; ++t) CHECK(c.abar(t) == doctest::Approx(std::pow(0.97, double(t))).epsilon(1e-12));

  CHECK_THROWS_AS(diffusion::make_schedule(0, 1e-4, 0.02), Error);
  CHECK_THROWS_AS(diffusion::make_schedule(10, 0.0, 0.02), Error);
  CHECK_THROWS_AS(diffusion::make_schedule(10, 0.1, 0.02), Error);
  CHECK_THROWS_AS(diffusion::make_schedule(10, 1e-4, 1.0), Error);
}

TEST_CASE("q_sample closed form and degenerate cases") {
  auto s = diffusion::default_schedule_desk();
  Rng rng(3);
  auto z0 = Tensor<double>::randn({1, 8}, rng);
  auto zero = Tensor<double>::zeros({1, 8});

  auto a = diffusion::q_sample(z0, 100, zero, s);
  double sab = std::sqrt(s.abar(100));
  for (int64_t i = 0; i < 8; ++i) CHECK(a.at(i) == doctest::Approx(sab * z0.at(i)).epsilon(1e-12));

  auto eps = Tensor<double>::randn({1, 8}, rng);
  auto b = diffusion::q_sample(zero, 150, eps, s);
  double som = std::sqrt(1.0 - s.abar(150));
  for (int64_t i = 0; i < 8; ++i) CHECK(b.at(i) == doctest::Approx(som * eps.at(i)).epsilon(1e-12));

  CHECK_THROWS_AS(diffusion::q_sample(z0, 0, eps, s), Error);
  CHECK_THROWS_AS(diffusion::q_sample(z0, 201, eps, s), Error);
}

TEST_CASE("iterated forward steps match the closed form in distribution") {
  auto s = diffusion::make_schedule(60, 1e-3, 0.15);
  Rng rng(17);
  const int64_t t_probe = 40;
  const int n = 4000;
  double z0 = 1.3;
  double mean = 0, var = 0;
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) {
    double z = z0;
    for (int64_t t = 1; t <= t_probe; ++t)
      z = std::sqrt(1.0 - s.beta_at(t)) * z + std::sqrt(s.beta_at(t)) * rng.normal();
    xs[size_t(i)] = z;
    mean += z;
  }
  mean /= n;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n;
  CHECK(mean == doctest::Approx(std::sqrt(s.abar(t_probe)) * z0).epsilon(0.05));
  CHECK(var == doctest::Approx(1.0 - s.abar(t_probe)).epsilon(0.05));
}

TEST_CASE("score_from_eps") {
  auto s = diffusion::make_schedule(1, 0.25, 0.25);  // abar_1 = 0.75
  auto eps = Tensor<double>::from({1, 1}, {1.0});
  auto sc = diffusion::score_from_eps(eps, 1, s);
  CHECK(sc.at(0) == doctest::Approx(-2.0));

  auto z = Tensor<double>::zeros({1, 4});
  auto sc0 = diffusion::score_from_eps(z, 1, s);
  for (int64_t i = 0; i < 4; ++i) CHECK(sc0.at(i) == 0.0);
}

TEST_CASE("tweedie inverts the closed form exactly; paper-literal form does not") {
  auto s = diffusion::default_schedule_desk();
  Rng rng(5);
  auto z0 = Tensor<double>::randn({1, 6}, rng);
  auto eps = Tensor<double>::randn({1, 6}, rng);
  int64_t t = 120;
  auto zt = diffusion::q_sample(z0, t, eps, s);

  auto back = diffusion::tweedie_z0(zt, t, eps, s, TweedieForm::Standard);
  for (int64_t i = 0; i < 6; ++i) CHECK(back.at(i) == doctest::Approx(z0.at(i)).epsilon(1e-10));

  auto lit = diffusion::tweedie_z0(zt, t, eps, s, TweedieForm::PaperLiteral);
  double diff = 0;
  for (int64_t i = 0; i < 6; ++i) diff += std::abs(lit.at(i) - z0.at(i));
  CHECK(diff > 0.1);  // the printed indices do not invert the forward process
}

TEST_CASE("tweedie with the analytic model matches the conjugate posterior mean") {
  auto s = diffusion::default_schedule_desk();
  std::vector<double> mu = {0.4, -0.2, 0.9, 0.0};
  std::vector<double> cov = {0.6, 1.8, 1.0, 0.3};
  diffusion::AnalyticGaussianEps<double> model(s, mu, cov);
  Rng rng(7);
  auto zt = Tensor<double>::randn({1, 4}, rng);
  for (int64_t t : {20L, 100L, 190L}) {
    auto zhat = diffusion::tweedie_z0(zt, t, model);
    double ab = s.abar(t), sab = std::sqrt(ab);
    for (int64_t i = 0; i < 4; ++i) {
      // E[z0|z_t] for a Gaussian prior, coordinatewise
      double mv = ab * cov[size_t(i)] + 1 - ab;
      double expect = mu[size_t(i)] + sab * cov[size_t(i)] / mv * (zt.at(i) - sab * mu[size_t(i)]);
      CHECK(zhat.at(i) == doctest::Approx(expect).epsilon(1e-9));
    }
  }
}

TEST_CASE("analytic eps matches the oracle score") {
  auto s = diffusion::default_schedule_desk();
  oracles::GaussianSpec prior = oracles::GaussianSpec::standard(4);
  diffusion::AnalyticGaussianEps<double> model(s, prior.mean, prior.diag_cov);
  Rng rng(9);
  auto zt = Tensor<double>::randn({1, 4}, rng);
  std::vector<double> ztv(4);
  for (int i = 0; i < 4; ++i) ztv[size_t(i)] = zt.at(i);
  for (int64_t t : {10L, 100L, 200L}) {
    nets::Ctx<double> ctx;
    auto eps = model.eps(ctx, zt, t);
    auto se = oracles::analytic_gaussian_score(ztv, t, s, prior);
    for (int i = 0; i < 4; ++i) CHECK(eps.at(i) == doctest::Approx(se.eps[size_t(i)]).epsilon(1e-9));
    // for N(0, I) the marginal stays N(0, I): score = -z_t
    auto sc = diffusion::score_from_eps(eps, t, s);
    for (int i = 0; i < 4; ++i) CHECK(sc.at(i) == doctest::Approx(-ztv[size_t(i)]).epsilon(1e-9));
  }
}

TEST_CASE("ancestral step: beta=0 keeps the state, t=1 adds no noise") {
  NoiseSchedule s;
  s.T = 2;
  s.beta = {0.0, 0.0};
  s.alpha = {1.0, 1.0};
  s.alpha_bar = {1.0, 1.0};
  Rng rng(1);
  auto z = Tensor<double>::from({1, 3}, {0.5, -1.0, 2.0});
  auto score = Tensor<double>::from({1, 3}, {9.0, 9.0, 9.0});
  auto next = diffusion::ancestral_step(z, 2, score, s, rng);
  for (int i = 0; i < 3; ++i) CHECK(next.at(i) == doctest::Approx(z.at(i)));

  auto s2 = diffusion::default_schedule_desk();
  Rng ra(10), rb(20);  // different noise streams
  auto a = diffusion::ancestral_step(z, 1, score, s2, ra);
  auto b = diffusion::ancestral_step(z, 1, score, s2, rb);
  for (int i = 0; i < 3; ++i) CHECK(a.at(i) == doctest::Approx(b.at(i)));
}

TEST_CASE("unconditional sampling with the analytic score matches prior moments") {
  auto s = diffusion::default_schedule_desk();
  diffusion::AnalyticGaussianEps<double> model(s, {0, 0, 0, 0}, {1, 1, 1, 1});
  Rng rng(77);
  const int runs = 2000;
  std::vector<double> mean(4, 0.0), var(4, 0.0);
  std::vector<std::vector<double>> samples;
  samples.reserve(runs);
  for (int r = 0; r < runs; ++r) {
    auto z = diffusion::sample_unconditional(model, rng);
    std::vector<double> v(4);
    for (int i = 0; i < 4; ++i) {
      v[size_t(i)] = z.at(i);
      mean[size_t(i)] += z.at(i) / runs;
    }
    samples.push_back(v);
  }
  for (const auto& v : samples)
    for (int i = 0; i < 4; ++i) var[size_t(i)] += (v[size_t(i)] - mean[size_t(i)]) * (v[size_t(i)] - mean[size_t(i)]) / runs;
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(mean[size_t(i)]) < 0.05);
    CHECK(var[size_t(i)] == doctest::Approx(1.0).epsilon(0.05));
  }
}

TEST_CASE("train_score learns a gaussian prior and leaves models unchanged at zero steps") {
  auto s = diffusion::make_schedule(100, 1e-3, 0.15);
  nets::NoisePredictorSpec spec;
  spec.input_dim = 4;
  spec.hidden = {64, 64};
  Rng rng(13);
  diffusion::MlpDiffusionModel<float> model(s, spec, "latent-z", rng);

  uint64_t h0 = model.net.param_hash();
  diffusion::TrainScoreCfg cfg0;
  cfg0.steps = 0;
  auto samples = Tensor<float>::randn({512, 4}, rng);
  diffusion::train_score(samples, model, cfg0, rng);
  CHECK(model.net.param_hash() == h0);
  CHECK(!model.is_trained());

  diffusion::TrainScoreCfg cfg;
  cfg.steps = 1200;
  cfg.batch = 32;
  diffusion::train_score(samples, model, cfg, rng);
  CHECK(model.is_trained());
  CHECK(model.trained_on() == "latent-z");

  // smoothed loss decreased
  const auto& c = model.train_curve;
  size_t w = c.size() / 5;
  double head = 0, tail = 0;
  for (size_t i = 0; i < w; ++i) head += c[i] / double(w);
  for (size_t i = c.size() - w; i < c.size(); ++i) tail += c[i] / double(w);
  CHECK(tail < head);

  // prediction error against the analytic optimum at a mid timestep
  oracles::GaussianSpec prior = oracles::GaussianSpec::standard(4);
  double mse = 0;
  const int n = 400;
  Rng eval(21);
  for (int i = 0; i < n; ++i) {
    std::vector<double> z0(4), zt(4);
    double ab = s.abar(50);
    std::vector<double> noise(4);
    for (int j = 0; j < 4; ++j) {
      z0[size_t(j)] = eval.normal();
      noise[size_t(j)] = eval.normal();
      zt[size_t(j)] = std::sqrt(ab) * z0[size_t(j)] + std::sqrt(1 - ab) * noise[size_t(j)];
    }
    auto se = oracles::analytic_gaussian_score(zt, 50, s, prior);
    auto ztt = Tensor<float>::zeros({1, 4});
    for (int j = 0; j < 4; ++j) ztt.data()[j] = float(zt[size_t(j)]);
    nets::Ctx<float> ctx;
    auto pred = model.eps(ctx, ztt, 50);
    for (int j = 0; j < 4; ++j) {
      double d = double(pred.at(j)) - se.eps[size_t(j)];
      mse += d * d / (4.0 * n);
    }
  }
  CHECK(mse < 0.2);  // coarse bound for a short run; the long run is gated in acceptance
}

TEST_CASE("timestep sampling covers deciles uniformly") {
  auto s = diffusion::default_schedule_reference();
  Rng rng(42);
  std::vector<int> decile(10, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    int64_t t = diffusion::sample_t(s, rng);
    REQUIRE(t >= 1);
    REQUIRE(t <= 1000);
    ++decile[size_t((t - 1) * 10 / 1000)];
  }
  for (int dcount : decile) CHECK(std::abs(dcount - 1000) <= 200);  // within 20%
}

TEST_CASE("train_score rejects mismatched inputs") {
  auto s = diffusion::make_schedule(10, 1e-3, 0.1);
  nets::NoisePredictorSpec spec;
  spec.input_dim = 4;
  Rng rng(1);
  diffusion::MlpDiffusionModel<float> model(s, spec, "latent-z", rng);
  diffusion::TrainScoreCfg cfg;
  auto bad = Tensor<float>::randn({16, 5}, rng);
  CHECK_THROWS_AS(diffusion::train_score(bad, model, cfg, rng), Error);
}
