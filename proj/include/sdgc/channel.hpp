#pragma once

// Rayleigh fading channel simulation, SNR calibration, and the pilot-based
// MMSE equalizer baseline. Real-valued equivalent model: Rayleigh magnitudes
// for gains, real Gaussian noise.

#include <complex>
#include <string>
#include <vector>

#include "sdgc/common.hpp"
#include "sdgc/rng.hpp"

namespace sdgc {

enum class ChannelMode { FlatScalar, PerElement, SparseConv };

ChannelMode channel_mode_from_string(const std::string& s);
std::string to_string(ChannelMode m);

struct SparseChannelSpec {
  int64_t taps = 16;    // m
  int64_t active = 3;   // s nonzero taps per realization

  void validate(int64_t latent_dim) const {
    if (taps < 1 || taps > latent_dim) throw Error(cat("sparse channel: taps ", taps, " must be in [1, d=", latent_dim, "]"));
    if (active < 1 || active > taps) throw Error(cat("sparse channel: active ", active, " must be in [1, m=", taps, "]"));
  }
};

struct ChannelModel {
  ChannelMode mode = ChannelMode::FlatScalar;
  std::vector<double> gain;  // 1 (flat), d (per-element) or m (sparse taps) entries
  double sigma2 = 1.0;
  double snr_db = 0.0;

  void validate(int64_t latent_dim) const;
};

// Unit mean-square Rayleigh draws: flat -> 1 entry, per-element -> d entries,
// sparse -> m-tap vector with `active` nonzero taps at uniform positions.
std::vector<double> sample_channel(ChannelMode mode, int64_t latent_dim, const SparseChannelSpec& spec, Rng& rng);

// sigma^2 = signal_power * 10^(-snr_db / 10)
double noise_sigma_from_snr(double snr_db, double signal_power);

ChannelModel make_channel(ChannelMode mode, double snr_db, int64_t latent_dim, const SparseChannelSpec& spec,
                          Rng& rng, double signal_power = 1.0);

// out_i = sum_k taps_k * sig_{(i-k) mod d}
std::vector<double> circular_convolve(const std::vector<double>& taps, const std::vector<double>& sig);

// z' = h * z + n per the channel mode
std::vector<double> transmit(const std::vector<double>& z, const ChannelModel& ch, Rng& rng);

// Channel applied without noise (the deterministic part of transmit).
std::vector<double> apply_gain(const std::vector<double>& z, const ChannelModel& ch);

struct Equalized {
  std::vector<double> z_hat;
  std::vector<double> h_hat;  // same layout as ChannelModel::gain
};

// Pilot-based MMSE: each pilot is a unit-power symbol observed through the
// channel; the estimator is the scalar-gain MMSE formula p*y / (p^2 + sigma^2)
// averaged over pilots. In sparse-conv mode the pilot symbol rides tap 0 and
// the equalizer treats the channel as flat — the model mismatch is the
// baseline's story. Equalization is per-element (flat/per-element) or
// per-frequency-bin (sparse).
Equalized mmse_equalize(const std::vector<double>& zprime, const ChannelModel& ch, int pilots, Rng& rng);

// ||h_hat - h||^2 / ||h||^2
double channel_nmse(const std::vector<double>& h_hat, const std::vector<double>& h);

// Pure equalization given a gain estimate: z_hat = g z' / (g^2 + sigma^2)
// per element (flat/per-element) or per frequency bin (sparse).
std::vector<double> wiener_equalize(const std::vector<double>& zprime, const ChannelModel& ch);

// Naive DFT, O(d^2); d stays small at desk scale.
std::vector<std::complex<double>> dft(const std::vector<double>& x);

// Per-bin Wiener equalization of a circularly convolved signal.
std::vector<double> equalize_freq(const std::vector<double>& zprime, const std::vector<double>& taps, double sigma2);

}  // namespace sdgc
