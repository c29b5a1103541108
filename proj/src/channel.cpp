#include "sdgc/channel.hpp"

#include <algorithm>
#include <cmath>

namespace sdgc {

ChannelMode channel_mode_from_string(const std::string& s) {
  if (s == "flat-scalar" || s == "flat") return ChannelMode::FlatScalar;
  if (s == "per-element") return ChannelMode::PerElement;
  if (s == "sparse-conv" || s == "sparse") return ChannelMode::SparseConv;
  throw DataError(cat("channel: unknown mode '", s, "'"));
}

std::string to_string(ChannelMode m) {
  switch (m) {
    case ChannelMode::FlatScalar: return "flat-scalar";
    case ChannelMode::PerElement: return "per-element";
    case ChannelMode::SparseConv: return "sparse-conv";
  }
  return "?";
}

void ChannelModel::validate(int64_t d) const {
  if (!(sigma2 > 0)) throw Error(cat("channel: noise power must be > 0, got ", sigma2));
  for (double g : gain)
    if (!std::isfinite(g)) throw NumericError("channel: non-finite gain");
  switch (mode) {
    case ChannelMode::FlatScalar:
      if (gain.size() != 1) throw Error(cat("channel: flat mode needs 1 gain, got ", gain.size()));
      break;
    case ChannelMode::PerElement:
      if (static_cast<int64_t>(gain.size()) != d)
        throw Error(cat("channel: per-element mode needs ", d, " gains, got ", gain.size()));
      break;
    case ChannelMode::SparseConv:
      if (gain.empty() || static_cast<int64_t>(gain.size()) > d)
        throw Error(cat("channel: sparse mode needs 1..d taps, got ", gain.size()));
      break;
  }
}

namespace {
// E[h^2] = 1: h = sqrt(a^2 + b^2), a,b ~ N(0, 1/2)
double rayleigh_unit_ms(Rng& rng) {
  double a = rng.normal() * std::sqrt(0.5);
  double b = rng.normal() * std::sqrt(0.5);
  return std::sqrt(a * a + b * b);
}
}  // namespace

std::vector<double> sample_channel(ChannelMode mode, int64_t d, const SparseChannelSpec& spec, Rng& rng) {
  switch (mode) {
    case ChannelMode::FlatScalar:
      return {rayleigh_unit_ms(rng)};
    case ChannelMode::PerElement: {
      std::vector<double> h(static_cast<size_t>(d));
      for (auto& v : h) v = rayleigh_unit_ms(rng);
      return h;
    }
    case ChannelMode::SparseConv: {
      spec.validate(d);
      std::vector<double> h(static_cast<size_t>(spec.taps), 0.0);
      auto pos = rng.choose(static_cast<int>(spec.taps), static_cast<int>(spec.active));
      // per active tap E[tap^2] = 1/s so that E[||h||^2] = 1
      double sig = std::sqrt(1.0 / (2.0 * static_cast<double>(spec.active)));
      for (int p : pos) h[static_cast<size_t>(p)] = rng.rayleigh(sig);
      return h;
    }
  }
  throw Error("channel: bad mode");
}

double noise_sigma_from_snr(double snr_db, double signal_power) {
  if (!(signal_power > 0)) throw Error(cat("channel: signal power must be > 0, got ", signal_power));
  return signal_power * std::pow(10.0, -snr_db / 10.0);
}

ChannelModel make_channel(ChannelMode mode, double snr_db, int64_t d, const SparseChannelSpec& spec, Rng& rng,
                          double signal_power) {
  ChannelModel ch;
  ch.mode = mode;
  ch.snr_db = snr_db;
  ch.sigma2 = noise_sigma_from_snr(snr_db, signal_power);
  ch.gain = sample_channel(mode, d, spec, rng);
  ch.validate(d);
  return ch;
}

std::vector<double> circular_convolve(const std::vector<double>& taps, const std::vector<double>& sig) {
  int64_t m = static_cast<int64_t>(taps.size()), d = static_cast<int64_t>(sig.size());
  if (m > d) throw Error(cat("circular_convolve: ", m, " taps exceed signal length ", d));
  std::vector<double> out(static_cast<size_t>(d), 0.0);
  for (int64_t k = 0; k < m; ++k) {
    double hk = taps[static_cast<size_t>(k)];
    if (hk == 0.0) continue;
    for (int64_t i = 0; i < d; ++i) out[static_cast<size_t>(i)] += hk * sig[static_cast<size_t>((i - k + d) % d)];
  }
  return out;
}

std::vector<double> apply_gain(const std::vector<double>& z, const ChannelModel& ch) {
  int64_t d = static_cast<int64_t>(z.size());
  ch.validate(d);
  switch (ch.mode) {
    case ChannelMode::FlatScalar: {
      std::vector<double> out(z);
      for (auto& v : out) v *= ch.gain[0];
      return out;
    }
    case ChannelMode::PerElement: {
      std::vector<double> out(z);
      for (size_t i = 0; i < out.size(); ++i) out[i] *= ch.gain[i];
      return out;
    }
    case ChannelMode::SparseConv:
      return circular_convolve(ch.gain, z);
  }
  throw Error("channel: bad mode");
}

std::vector<double> transmit(const std::vector<double>& z, const ChannelModel& ch, Rng& rng) {
  std::vector<double> out = apply_gain(z, ch);
  double sd = std::sqrt(ch.sigma2);
  for (auto& v : out) v += sd * rng.normal();
  return out;
}

Equalized mmse_equalize(const std::vector<double>& zprime, const ChannelModel& ch, int pilots, Rng& rng) {
  int64_t d = static_cast<int64_t>(zprime.size());
  ch.validate(d);
  if (pilots < 1) throw Error(cat("mmse_equalize: needs at least one pilot, got ", pilots));
  double sd = std::sqrt(ch.sigma2);

  Equalized eq;
  switch (ch.mode) {
    case ChannelMode::FlatScalar:
    case ChannelMode::SparseConv: {
      // Scalar-gain estimate from unit-power pilot symbols. In sparse mode the
      // pilot symbol is observed through tap 0 only; the flat-gain model is
      // deliberately mismatched to the multipath channel.
      double tap0 = ch.gain[0];
      double acc = 0.0;
      for (int i = 0; i < pilots; ++i) {
        double y = tap0 + sd * rng.normal();
        acc += y / (1.0 + ch.sigma2);
      }
      double g = acc / pilots;
      if (ch.mode == ChannelMode::FlatScalar) {
        eq.h_hat = {g};
        eq.z_hat.resize(zprime.size());
        double denom = g * g + ch.sigma2;
        for (size_t i = 0; i < zprime.size(); ++i) eq.z_hat[i] = g * zprime[i] / denom;
      } else {
        eq.h_hat.assign(ch.gain.size(), 0.0);
        eq.h_hat[0] = g;
        eq.z_hat = equalize_freq(zprime, eq.h_hat, ch.sigma2);
      }
      return eq;
    }
    case ChannelMode::PerElement: {
      eq.h_hat.assign(static_cast<size_t>(d), 0.0);
      for (int p = 0; p < pilots; ++p)
        for (int64_t i = 0; i < d; ++i) {
          double y = ch.gain[static_cast<size_t>(i)] + sd * rng.normal();
          eq.h_hat[static_cast<size_t>(i)] += (y / (1.0 + ch.sigma2)) / pilots;
        }
      eq.z_hat.resize(zprime.size());
      for (size_t i = 0; i < zprime.size(); ++i) {
        double g = eq.h_hat[i];
        eq.z_hat[i] = g * zprime[i] / (g * g + ch.sigma2);
      }
      return eq;
    }
  }
  throw Error("channel: bad mode");
}

std::vector<double> wiener_equalize(const std::vector<double>& zprime, const ChannelModel& ch) {
  ch.validate(static_cast<int64_t>(zprime.size()));
  switch (ch.mode) {
    case ChannelMode::FlatScalar: {
      std::vector<double> out(zprime.size());
      double g = ch.gain[0];
      for (size_t i = 0; i < out.size(); ++i) out[i] = g * zprime[i] / (g * g + ch.sigma2);
      return out;
    }
    case ChannelMode::PerElement: {
      std::vector<double> out(zprime.size());
      for (size_t i = 0; i < out.size(); ++i) {
        double g = ch.gain[i];
        out[i] = g * zprime[i] / (g * g + ch.sigma2);
      }
      return out;
    }
    case ChannelMode::SparseConv:
      return equalize_freq(zprime, ch.gain, ch.sigma2);
  }
  throw Error("channel: bad mode");
}

double channel_nmse(const std::vector<double>& h_hat, const std::vector<double>& h) {
  if (h_hat.size() != h.size()) throw Error(cat("channel_nmse: size mismatch ", h_hat.size(), " vs ", h.size()));
  double num = 0, den = 0;
  for (size_t i = 0; i < h.size(); ++i) {
    double diff = h_hat[i] - h[i];
    num += diff * diff;
    den += h[i] * h[i];
  }
  if (den == 0) throw Error("channel_nmse: reference channel is zero");
  return num / den;
}

std::vector<std::complex<double>> dft(const std::vector<double>& x) {
  int64_t n = static_cast<int64_t>(x.size());
  std::vector<std::complex<double>> X(static_cast<size_t>(n));
  const double twopi = 6.283185307179586476925286766559;
  for (int64_t f = 0; f < n; ++f) {
    std::complex<double> acc = 0;
    for (int64_t i = 0; i < n; ++i) {
      double ang = -twopi * static_cast<double>(f) * static_cast<double>(i) / static_cast<double>(n);
      acc += x[static_cast<size_t>(i)] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    X[static_cast<size_t>(f)] = acc;
  }
  return X;
}

std::vector<double> equalize_freq(const std::vector<double>& zprime, const std::vector<double>& taps, double sigma2) {
  int64_t d = static_cast<int64_t>(zprime.size());
  std::vector<double> padded(taps);
  padded.resize(static_cast<size_t>(d), 0.0);
  auto H = dft(padded);
  auto Z = dft(zprime);
  std::vector<std::complex<double>> Y(static_cast<size_t>(d));
  for (int64_t f = 0; f < d; ++f) {
    auto Hf = H[static_cast<size_t>(f)];
    Y[static_cast<size_t>(f)] = std::conj(Hf) * Z[static_cast<size_t>(f)] / (std::norm(Hf) + sigma2);
  }
  std::vector<double> out(static_cast<size_t>(d));
  const double twopi = 6.283185307179586476925286766559;
  for (int64_t i = 0; i < d; ++i) {
    std::complex<double> acc = 0;
    for (int64_t f = 0; f < d; ++f) {
      double ang = twopi * static_cast<double>(f) * static_cast<double>(i) / static_cast<double>(d);
      acc += Y[static_cast<size_t>(f)] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[static_cast<size_t>(i)] = acc.real() / static_cast<double>(d);
  }
  return out;
}

}  // namespace sdgc
