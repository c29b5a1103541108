#pragma once

// Guided reverse diffusion conditioned on the received signal and a known
// channel gain. Each step forms the data residual through the Tweedie
// estimate (differentiating through the noise predictor on the tape), scales
// it per the configured coefficient mode, and folds it into the score.

#include <string>
#include <vector>

#include "sdgc/channel.hpp"
#include "sdgc/codec.hpp"
#include "sdgc/diffusion.hpp"

namespace sdgc::sd {

using ad::Tape;
using ad::Tensor;
using nets::Ctx;

enum class CoefficientMode {
  PaperLiteral,     // (1-abar_t) / ((1-alpha_t)(1-abar_{t-1})), denominator clamped at t=1
  DpsNormalized,    // zeta / ||residual||
  SigmaNormalized,  // zeta / (2 (sigma^2 + (1-abar_t) * channel power)); posterior-consistent
};

enum class ResidualMode { ThroughTweedie, OnZt };

inline CoefficientMode coefficient_mode_from_string(const std::string& s) {
  if (s == "paper-literal") return CoefficientMode::PaperLiteral;
  if (s == "dps-normalized" || s == "dps") return CoefficientMode::DpsNormalized;
  if (s == "sigma-normalized" || s == "sigma") return CoefficientMode::SigmaNormalized;
  throw DataError(cat("guidance: unknown coefficient mode '", s, "'"));
}

inline ResidualMode residual_mode_from_string(const std::string& s) {
  if (s == "through-tweedie") return ResidualMode::ThroughTweedie;
  if (s == "on-z_t" || s == "on-zt") return ResidualMode::OnZt;
  throw DataError(cat("guidance: unknown residual mode '", s, "'"));
}

inline std::string to_string(CoefficientMode m) {
  switch (m) {
    case CoefficientMode::PaperLiteral: return "paper-literal";
    case CoefficientMode::DpsNormalized: return "dps-normalized";
    case CoefficientMode::SigmaNormalized: return "sigma-normalized";
  }
  return "?";
}

inline std::string to_string(ResidualMode m) {
  return m == ResidualMode::ThroughTweedie ? "through-tweedie" : "on-z_t";
}

struct GuidanceConfig {
  CoefficientMode coefficient = CoefficientMode::SigmaNormalized;
  ResidualMode residual = ResidualMode::ThroughTweedie;
  double zeta = 1.0;  // 0 switches guidance off (unconditional sampling)
  diffusion::TweedieForm tweedie = diffusion::TweedieForm::Standard;
  bool init_from_received = false;

  void validate() const {
    if (zeta < 0) throw Error(cat("guidance: zeta must be >= 0, got ", zeta));
  }
};

namespace detail {

// Mean squared channel gain seen per output coordinate (chain-space scale
// handled by the caller): flat h^2, per-element mean h_i^2, sparse sum h_k^2.
inline double gain_power(const ChannelModel& ch) {
  double acc = 0;
  for (double g : ch.gain) acc += g * g;
  if (ch.mode == ChannelMode::PerElement) acc /= static_cast<double>(ch.gain.size());
  return acc;
}

// Applies the channel gain to a tracked (1,d) tensor.
template <typename T>
Tensor<T> apply_gain_op(const Tensor<T>& z_row, const ChannelModel& ch) {
  int64_t d = z_row.shape[1];
  Tensor<T> flat = ad::reshape(z_row, {d});
  switch (ch.mode) {
    case ChannelMode::FlatScalar:
      return ad::scalar_mul(flat, static_cast<T>(ch.gain[0]));
    case ChannelMode::PerElement: {
      Tensor<T> h = Tensor<T>::zeros({d});
      for (int64_t i = 0; i < d; ++i) h.data()[i] = static_cast<T>(ch.gain[static_cast<size_t>(i)]);
      return ad::mul(flat, h);
    }
    case ChannelMode::SparseConv: {
      Tensor<T> taps = Tensor<T>::zeros({static_cast<int64_t>(ch.gain.size())});
      for (size_t i = 0; i < ch.gain.size(); ++i) taps.data()[i] = static_cast<T>(ch.gain[i]);
      return ad::circconv(taps, flat);
    }
  }
  throw Error("guidance: bad channel mode");
}

inline double coefficient(const GuidanceConfig& cfg, const diffusion::NoiseSchedule& s, int64_t t, double sigma2,
                          double chan_power, double residual_norm) {
  switch (cfg.coefficient) {
    case CoefficientMode::PaperLiteral: {
      double denom = (1.0 - s.alpha_at(t)) * std::max(1.0 - s.abar(t - 1), s.beta_at(1));
      return cfg.zeta * (1.0 - s.abar(t)) / denom;
    }
    case CoefficientMode::DpsNormalized:
      return cfg.zeta / std::max(residual_norm, 1e-12);
    case CoefficientMode::SigmaNormalized:
      return cfg.zeta / (2.0 * (sigma2 + (1.0 - s.abar(t)) * chan_power));
  }
  throw Error("guidance: bad coefficient mode");
}

}  // namespace detail

template <typename T>
struct GuidanceResult {
  Tensor<T> grad;        // scaled guidance, same shape as z_t
  double residual_norm;  // ||z' - h * estimate||
};

// Gradient of the log-likelihood of the received signal w.r.t. the chain
// state. Returned already scaled per cfg (ready to add to the score).
template <typename T>
GuidanceResult<T> likelihood_grad(const Tensor<T>& z_t, const std::vector<double>& zprime, const ChannelModel& ch,
                                  int64_t t, diffusion::EpsModel<T>& model, const GuidanceConfig& cfg,
                                  double data_scale = -1.0) {
  cfg.validate();
  if (!model.is_trained()) throw Error("likelihood_grad: model is not trained");
  int64_t d = model.dim();
  if (z_t.shape.size() != 2 || z_t.shape[1] != d)
    throw Error(cat("likelihood_grad: expected (1,", d, "), got ", ad::shape_str(z_t.shape)));
  if (static_cast<int64_t>(zprime.size()) != d)
    throw Error(cat("likelihood_grad: received signal has ", zprime.size(), " entries, expected ", d));
  ch.validate(d);
  const auto& s = model.schedule();
  double scale = data_scale > 0 ? data_scale : 1.0;

  Tensor<T> zp = Tensor<T>::zeros({d});
  for (int64_t i = 0; i < d; ++i) zp.data()[i] = static_cast<T>(zprime[static_cast<size_t>(i)]);

  Tensor<T> state = z_t.clone();
  Tape<T> tape;
  Ctx<T> ctx{&tape, false};
  Tensor<T> tracked = tape.var(state);
  Tensor<T> estimate;
  if (cfg.residual == ResidualMode::ThroughTweedie) {
    Tensor<T> eps = model.eps(ctx, tracked, t);
    estimate = ad::scalar_mul(diffusion::tweedie_z0(tracked, t, eps, s, cfg.tweedie), static_cast<T>(scale));
  } else {
    estimate = tracked;  // residual on the raw chain state, as printed
  }
  Tensor<T> r = ad::sub(zp, detail::apply_gain_op(estimate, ch));
  Tensor<T> loss = ad::sqnorm(r);
  double rnorm = std::sqrt(static_cast<double>(loss.item()));
  tape.backward(loss);

  double chan_power = detail::gain_power(ch) * scale * scale;
  double c = detail::coefficient(cfg, s, t, ch.sigma2, chan_power, rnorm);

  GuidanceResult<T> out;
  out.residual_norm = rnorm;
  out.grad = Tensor<T>::zeros(z_t.shape);
  const auto& g = *state.grad;
  for (int64_t i = 0; i < d; ++i) out.grad.data()[i] = static_cast<T>(-c * static_cast<double>(g[static_cast<size_t>(i)]));
  return out;
}

template <typename T>
struct DenoiseResult {
  std::vector<double> z_tweedie;  // Tweedie estimate at the final step (output)
  std::vector<double> z_chain;    // raw terminal chain state
  double final_residual = 0.0;
};

// Reverse chain from z_T ~ N(0,I) guided by (z', h).
template <typename T>
DenoiseResult<T> sd_denoise(const std::vector<double>& zprime, const ChannelModel& ch, diffusion::EpsModel<T>& model,
                            const GuidanceConfig& cfg, Rng& rng, double data_scale = -1.0) {
  cfg.validate();
  if (!model.is_trained()) throw Error("sd_denoise: model is not trained");
  const auto& s = model.schedule();
  int64_t d = model.dim();
  ch.validate(d);
  double scale = data_scale > 0 ? data_scale : 1.0;

  Tensor<T> z = Tensor<T>::randn({1, d}, rng);
  if (cfg.init_from_received) {
    for (int64_t i = 0; i < d; ++i) z.data()[i] = static_cast<T>(zprime[static_cast<size_t>(i)] / scale);
  }
  Ctx<T> plain;
  DenoiseResult<T> out;
  Tensor<T> z_tweedie;
  for (int64_t t = s.T; t >= 1; --t) {
    try {
      Tensor<T> eps = model.eps(plain, z, t);
      Tensor<T> score = diffusion::score_from_eps(eps, t, s);
      double rnorm = 0.0;
      if (cfg.zeta > 0) {
        auto g = likelihood_grad(z, zprime, ch, t, model, cfg, scale);
        score = ad::add(score, g.grad);
        rnorm = g.residual_norm;
      }
      if (t == 1) {
        z_tweedie = diffusion::tweedie_z0(z, t, eps, s, cfg.tweedie);
        out.final_residual = rnorm;
      }
      z = diffusion::ancestral_step(z, t, score, s, rng);
    } catch (const NumericError& e) {
      throw NumericError(cat("sd_denoise: numeric failure at step t=", t, ": ", e.what()));
    }
  }
  out.z_tweedie.resize(static_cast<size_t>(d));
  out.z_chain.resize(static_cast<size_t>(d));
  for (int64_t i = 0; i < d; ++i) {
    out.z_tweedie[static_cast<size_t>(i)] = static_cast<double>(z_tweedie.at(i)) * scale;
    out.z_chain[static_cast<size_t>(i)] = static_cast<double>(z.at(i)) * scale;
  }
  return out;
}

}  // namespace sdgc::sd
