#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sdgc/channel.hpp"

using namespace sdgc;

TEST_CASE("rayleigh draws have unit mean-square and the closed-form mean") {
  Rng rng(101);
  const int n = 100000;
  double sum = 0, sumsq = 0;
  SparseChannelSpec spec;
  for (int i = 0; i < n; ++i) {
    double h = sample_channel(ChannelMode::FlatScalar, 1, spec, rng)[0];
    sum += h;
    sumsq += h * h;
  }
  CHECK(sumsq / n == doctest::Approx(1.0).epsilon(0.02));
  CHECK(sum / n == doctest::Approx(std::sqrt(3.14159265358979 / 4.0)).epsilon(0.012));  // ~0.8862
}

TEST_CASE("sparse realizations have exactly s nonzero taps and unit energy on average") {
  Rng rng(7);
  SparseChannelSpec spec;  // m=16, s=3
  double energy = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    auto h = sample_channel(ChannelMode::SparseConv, 64, spec, rng);
    REQUIRE(h.size() == 16);
    int nz = 0;
    double e = 0;
    for (double v : h) {
      if (v != 0.0) ++nz;
      e += v * v;
    }
    CHECK(nz == 3);
    energy += e;
  }
  CHECK(energy / n == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("noise power from SNR") {
  CHECK(noise_sigma_from_snr(0.0, 1.0) == doctest::Approx(1.0));
  CHECK(noise_sigma_from_snr(10.0, 1.0) == doctest::Approx(0.1));
  CHECK(noise_sigma_from_snr(20.0, 4.0) == doctest::Approx(0.04));
  CHECK_THROWS_AS(noise_sigma_from_snr(10.0, 0.0), Error);
  CHECK_THROWS_AS(noise_sigma_from_snr(10.0, -1.0), Error);
}

TEST_CASE("transmit degenerates correctly") {
  std::vector<double> z = {0.3, -1.2, 0.8, 2.0};
  Rng rng(3);

  ChannelModel ch;
  ch.mode = ChannelMode::FlatScalar;
  ch.gain = {1.0};
  ch.sigma2 = 1e-30;
  auto zp = transmit(z, ch, rng);
  for (size_t i = 0; i < z.size(); ++i) CHECK(zp[i] == doctest::Approx(z[i]).epsilon(1e-9));

  // h = 0 passes pure noise: same seed reproduces n regardless of z
  ch.gain = {0.0};
  ch.sigma2 = 0.5;
  Rng ra(17), rb(17);
  auto za = transmit(z, ch, ra);
  auto zb = transmit(std::vector<double>(4, 0.0), ch, rb);
  CHECK(za == zb);

  // unit impulse taps act as identity
  ChannelModel sp;
  sp.mode = ChannelMode::SparseConv;
  sp.gain = {1.0, 0.0, 0.0};
  sp.sigma2 = 1e-30;
  auto zs = transmit(z, sp, rng);
  for (size_t i = 0; i < z.size(); ++i) CHECK(zs[i] == doctest::Approx(z[i]).epsilon(1e-9));
}

TEST_CASE("transmit is pure given the seed") {
  std::vector<double> z = {1, 2, 3};
  ChannelModel ch;
  ch.mode = ChannelMode::PerElement;
  ch.gain = {0.5, 1.0, 1.5};
  ch.sigma2 = 0.3;
  Rng a(99), b(99);
  CHECK(transmit(z, ch, a) == transmit(z, ch, b));
}

TEST_CASE("circular convolution is linear in the signal") {
  Rng rng(5);
  std::vector<double> h = {0.7, -0.2, 0.1};
  std::vector<double> z1(8), z2(8);
  for (auto& v : z1) v = rng.normal();
  for (auto& v : z2) v = rng.normal();
  double a = 1.3, b = -0.4;
  std::vector<double> mix(8);
  for (int i = 0; i < 8; ++i) mix[size_t(i)] = a * z1[size_t(i)] + b * z2[size_t(i)];
  auto c1 = circular_convolve(h, z1);
  auto c2 = circular_convolve(h, z2);
  auto cm = circular_convolve(h, mix);
  for (int i = 0; i < 8; ++i) CHECK(cm[size_t(i)] == doctest::Approx(a * c1[size_t(i)] + b * c2[size_t(i)]).epsilon(1e-12));
}

TEST_CASE("wiener equalization plug-in and noiseless pilot limit") {
  // scalar plug-in: h=1, sigma2=1, z'=2 -> 1
  ChannelModel ch;
  ch.mode = ChannelMode::FlatScalar;
  ch.gain = {1.0};
  ch.sigma2 = 1.0;
  auto zh = wiener_equalize({2.0}, ch);
  CHECK(zh[0] == doctest::Approx(1.0));

  // noiseless pilots: h_hat -> h and z_hat -> z
  Rng rng(11);
  std::vector<double> z = {0.4, -0.9, 1.3, 0.2};
  ChannelModel real;
  real.mode = ChannelMode::FlatScalar;
  real.gain = {1.37};
  real.sigma2 = 1e-12;
  auto zp = transmit(z, real, rng);
  auto eq = mmse_equalize(zp, real, 4, rng);
  CHECK(eq.h_hat[0] == doctest::Approx(1.37).epsilon(1e-5));
  for (size_t i = 0; i < z.size(); ++i) CHECK(eq.z_hat[i] == doctest::Approx(z[i]).epsilon(1e-4));

  // frequency-domain equalization inverts a known sparse channel at high SNR
  ChannelModel sp;
  sp.mode = ChannelMode::SparseConv;
  sp.gain = {0.9, 0.0, 0.4, 0.1};
  sp.sigma2 = 1e-10;
  std::vector<double> z8 = {1, -1, 0.5, 0.2, -0.7, 0.9, 0.0, 0.3};
  auto conv = apply_gain(z8, sp);
  auto rec = equalize_freq(conv, sp.gain, sp.sigma2);
  for (size_t i = 0; i < z8.size(); ++i) CHECK(rec[i] == doctest::Approx(z8[i]).epsilon(1e-4));
}

TEST_CASE("pilot count reduces channel estimation error") {
  Rng rng(21);
  SparseChannelSpec spec;
  const int trials = 4000;
  double nmse1 = 0, nmse4 = 0, nmse16 = 0;
  for (int i = 0; i < trials; ++i) {
    ChannelModel ch = make_channel(ChannelMode::FlatScalar, 10.0, 8, spec, rng);
    std::vector<double> z(8, 0.0);
    auto zp = transmit(z, ch, rng);
    nmse1 += channel_nmse(mmse_equalize(zp, ch, 1, rng).h_hat, ch.gain);
    nmse4 += channel_nmse(mmse_equalize(zp, ch, 4, rng).h_hat, ch.gain);
    nmse16 += channel_nmse(mmse_equalize(zp, ch, 16, rng).h_hat, ch.gain);
  }
  CHECK(nmse1 / trials > nmse4 / trials);
  CHECK(nmse4 / trials > nmse16 / trials);
}

TEST_CASE("channel_nmse basics") {
  std::vector<double> h = {0.5, -1.0, 0.2};
  CHECK(channel_nmse(h, h) == doctest::Approx(0.0));
  CHECK(channel_nmse({0, 0, 0}, h) == doctest::Approx(1.0));
  std::vector<double> h2 = {1.0, -2.0, 0.4};
  CHECK(channel_nmse(h2, h) == doctest::Approx(1.0));
  CHECK_THROWS_AS(channel_nmse({0.0}, {0.0}), Error);
  CHECK_THROWS_AS(channel_nmse({1.0, 2.0}, {1.0}), Error);
}

TEST_CASE("empirical SNR calibration within 0.3 dB") {
  Rng rng(31);
  SparseChannelSpec spec;
  for (double snr : {0.0, 10.0}) {
    for (auto mode : {ChannelMode::FlatScalar, ChannelMode::SparseConv}) {
      double sig = 0, noise = 0;
      const int n = 10000;
      const int d = 16;
      for (int i = 0; i < n; ++i) {
        std::vector<double> z(d);
        double ms = 0;
        for (auto& v : z) {
          v = rng.normal();
          ms += v * v;
        }
        double scale = std::sqrt(ms / d);
        for (auto& v : z) v /= scale;  // unit average power
        ChannelModel ch = make_channel(mode, snr, d, spec, rng);
        auto clean = apply_gain(z, ch);
        auto zp = transmit(z, ch, rng);
        for (int j = 0; j < d; ++j) {
          sig += z[size_t(j)] * z[size_t(j)];
          double e = zp[size_t(j)] - clean[size_t(j)];
          noise += e * e;
        }
      }
      double emp = 10.0 * std::log10(sig / noise);
      CHECK(std::abs(emp - snr) < 0.3);
    }
  }
}

TEST_CASE("mode parsing and validation errors") {
  CHECK(channel_mode_from_string("flat-scalar") == ChannelMode::FlatScalar);
  CHECK(channel_mode_from_string("per-element") == ChannelMode::PerElement);
  CHECK(channel_mode_from_string("sparse-conv") == ChannelMode::SparseConv);
  CHECK_THROWS_AS(channel_mode_from_string("qam"), DataError);

  ChannelModel ch;
  ch.mode = ChannelMode::PerElement;
  ch.gain = {1.0};
  ch.sigma2 = 0.1;
  std::vector<double> z = {1, 2, 3};
  Rng rng(1);
  CHECK_THROWS_AS(transmit(z, ch, rng), Error);  // gain/shape mismatch

  ch.mode = ChannelMode::FlatScalar;
  ch.sigma2 = 0.0;
  CHECK_THROWS_AS(transmit(z, ch, rng), Error);  // nonpositive noise power
}
