#pragma once

// DDPM machinery shared by both denoisers: the linear variance schedule,
// forward noising, noise-prediction training, score conversion, the Tweedie
// clean-sample estimate, and unconditional ancestral sampling.

#include <memory>
#include <string>
#include <vector>

#include "sdgc/nets.hpp"
#include "sdgc/tensor.hpp"

namespace sdgc::diffusion {

using ad::Tape;
using ad::Tensor;
using nets::Ctx;

struct NoiseSchedule {
  int64_t T = 0;
  std::vector<double> beta;       // beta[t-1] for t in 1..T
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // prod alpha

  double beta_at(int64_t t) const { check(t); return beta[static_cast<size_t>(t - 1)]; }
  double alpha_at(int64_t t) const { check(t); return alpha[static_cast<size_t>(t - 1)]; }
  // alpha_bar(0) == 1 by convention
  double abar(int64_t t) const {
    if (t == 0) return 1.0;
    check(t);
    return alpha_bar[static_cast<size_t>(t - 1)];
  }
  void check(int64_t t) const {
    if (t < 1 || t > T) throw Error(cat("schedule: step ", t, " out of range [1,", T, "]"));
  }
};

// Linear beta ramp. Desk default T=200 with endpoints rescaled so alpha_bar(T)
// matches the T=1000, 1e-4..0.02 reference value.
inline NoiseSchedule make_schedule(int64_t T, double beta1, double betaT) {
  if (T < 1) throw Error(cat("schedule: T must be >= 1, got ", T));
  if (!(beta1 > 0) || !(beta1 <= betaT) || !(betaT < 1))
    throw Error(cat("schedule: need 0 < beta1 <= betaT < 1, got ", beta1, ", ", betaT));
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<size_t>(T));
  s.alpha.resize(static_cast<size_t>(T));
  s.alpha_bar.resize(static_cast<size_t>(T));
  double prod = 1.0;
  for (int64_t t = 0; t < T; ++t) {
    double b = T == 1 ? beta1 : beta1 + (betaT - beta1) * static_cast<double>(t) / static_cast<double>(T - 1);
    s.beta[static_cast<size_t>(t)] = b;
    s.alpha[static_cast<size_t>(t)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<size_t>(t)] = prod;
  }
  return s;
}

inline NoiseSchedule default_schedule_desk() { return make_schedule(200, 5e-4, 0.1); }
inline NoiseSchedule default_schedule_reference() { return make_schedule(1000, 1e-4, 0.02); }

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int64_t t, const Tensor<T>& eps, const NoiseSchedule& s) {
  if (eps.shape != z0.shape)
    throw Error(cat("q_sample: eps shape ", ad::shape_str(eps.shape), " != z0 shape ", ad::shape_str(z0.shape)));
  double ab = s.abar(t);  // validates range
  return ad::add(ad::scalar_mul(z0, static_cast<T>(std::sqrt(ab))),
                 ad::scalar_mul(eps, static_cast<T>(std::sqrt(1.0 - ab))));
}

// score = -eps_hat / sqrt(1 - abar_t)
template <typename T>
Tensor<T> score_from_eps(const Tensor<T>& eps_hat, int64_t t, const NoiseSchedule& s) {
  double ab = s.abar(t);
  return ad::scalar_mul(eps_hat, static_cast<T>(-1.0 / std::sqrt(1.0 - ab)));
}

enum class TweedieForm {
  Standard,      // (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t): exact inversion of q_sample
  PaperLiteral,  // (z_t - sqrt(1-abar_{t-1}) eps) / sqrt(alpha_t): kept for comparison
};

// ---------------------------------------------------------------------------
// noise-prediction models

template <typename T>
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  // z_t: (N, dim). Builds tape nodes when ctx.tape is set and z_t is tracked.
  virtual Tensor<T> eps(const Ctx<T>& ctx, const Tensor<T>& z_t, int64_t t) = 0;
  virtual int64_t dim() const = 0;
  virtual const NoiseSchedule& schedule() const = 0;
  virtual bool is_trained() const = 0;
  virtual std::string trained_on() const = 0;
};

// Learned MLP predictor over standardized data (chain space = data / data_rms).
template <typename T>
class MlpDiffusionModel : public EpsModel<T> {
 public:
  NoiseSchedule sched;
  nets::MlpNoisePredictor<T> net;
  std::string descriptor;  // "latent-z" | "channel-h" | ...
  double data_rms = 1.0;
  bool trained = false;
  std::vector<double> train_curve;  // per-step losses of the last training run

  MlpDiffusionModel() = default;
  MlpDiffusionModel(const NoiseSchedule& s, const nets::NoisePredictorSpec& spec, std::string desc, Rng& rng)
      : sched(s), net(spec, rng), descriptor(std::move(desc)) {}

  Tensor<T> eps(const Ctx<T>& ctx, const Tensor<T>& z_t, int64_t t) override {
    sched.check(t);
    return net.forward(ctx, z_t, t);
  }
  int64_t dim() const override { return net.spec.input_dim; }
  const NoiseSchedule& schedule() const override { return sched; }
  bool is_trained() const override { return trained; }
  std::string trained_on() const override { return descriptor; }
};

// Exact noise predictor for a Gaussian prior N(mean, Cov): the marginal of z_t
// is N(sqrt(abar) mean, abar Cov + (1-abar) I), whose score is closed-form.
// Diagonal covariance everywhere; small dense covariances via eigen-decomp.
template <typename T>
class AnalyticGaussianEps : public EpsModel<T> {
 public:
  NoiseSchedule sched;
  std::vector<double> mean;
  std::vector<double> diag_cov;           // used when evecs empty
  std::vector<double> evals;              // dense path: Cov = V diag(evals) V^T
  std::vector<double> evecs;              // row-major d x d
  std::string descriptor = "analytic-gaussian";

  AnalyticGaussianEps() = default;
  AnalyticGaussianEps(const NoiseSchedule& s, std::vector<double> mu, std::vector<double> dcov)
      : sched(s), mean(std::move(mu)), diag_cov(std::move(dcov)) {
    if (mean.size() != diag_cov.size()) throw Error("analytic eps: mean/cov size mismatch");
    for (double v : diag_cov)
      if (!(v > 0)) throw Error("analytic eps: covariance must be positive");
  }

  Tensor<T> eps(const Ctx<T>& ctx, const Tensor<T>& z_t, int64_t t) override {
    (void)ctx;
    sched.check(t);
    int64_t d = dim();
    if (z_t.shape.size() != 2 || z_t.shape[1] != d)
      throw Error(cat("analytic eps: expected (N,", d, "), got ", ad::shape_str(z_t.shape)));
    double ab = sched.abar(t);
    double sab = std::sqrt(ab);
    double om = 1.0 - ab;
    int64_t N = z_t.shape[0];

    // eps* = -sqrt(1-abar) * score = sqrt(1-abar) * Minv (z_t - sqrt(abar) mu)
    // with M = abar Cov + (1-abar) I.
    Tensor<T> shift = Tensor<T>::zeros({1, d});
    for (int64_t i = 0; i < d; ++i) shift.data()[i] = static_cast<T>(-sab * mean[static_cast<size_t>(i)]);
    Tensor<T> shift_b = Tensor<T>::zeros(z_t.shape);
    for (int64_t n = 0; n < N; ++n)
      std::copy(shift.data(), shift.data() + d, shift_b.data() + n * d);
    Tensor<T> centered = ad::add(z_t, shift_b);

    if (evecs.empty()) {
      Tensor<T> w = Tensor<T>::zeros(z_t.shape);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < d; ++i)
          w.data()[n * d + i] = static_cast<T>(std::sqrt(om) / (ab * diag_cov[static_cast<size_t>(i)] + om));
      return ad::mul(centered, w);
    }
    // dense: Minv = V diag(1/(abar*evals + om)) V^T
    Tensor<T> V = Tensor<T>::zeros({d, d});
    Tensor<T> Vt_scaled = Tensor<T>::zeros({d, d});
    for (int64_t r = 0; r < d; ++r)
      for (int64_t c = 0; c < d; ++c) {
        V.data()[r * d + c] = static_cast<T>(evecs[static_cast<size_t>(r * d + c)]);
        double scale = std::sqrt(om) / (ab * evals[static_cast<size_t>(c)] + om);
        Vt_scaled.data()[c * d + r] = static_cast<T>(evecs[static_cast<size_t>(r * d + c)] * scale);
      }
    // centered (N,d) -> (N,d) @ V (d,d) -> scaled -> @ V^T
    return ad::matmul(ad::matmul(centered, V), ad::transpose_last(Vt_scaled));
  }

  int64_t dim() const override { return static_cast<int64_t>(mean.size()); }
  const NoiseSchedule& schedule() const override { return sched; }
  bool is_trained() const override { return true; }
  std::string trained_on() const override { return descriptor; }
};

// ---------------------------------------------------------------------------

// E[z0 | z_t] via the trained noise estimator.
template <typename T>
Tensor<T> tweedie_z0(const Tensor<T>& z_t, int64_t t, const Tensor<T>& eps_hat, const NoiseSchedule& s,
                     TweedieForm form = TweedieForm::Standard) {
  if (form == TweedieForm::Standard) {
    double ab = s.abar(t);
    return ad::scalar_mul(ad::sub(z_t, ad::scalar_mul(eps_hat, static_cast<T>(std::sqrt(1.0 - ab)))),
                          static_cast<T>(1.0 / std::sqrt(ab)));
  }
  double abp = s.abar(t - 1);
  double a = s.alpha_at(t);
  return ad::scalar_mul(ad::sub(z_t, ad::scalar_mul(eps_hat, static_cast<T>(std::sqrt(1.0 - abp)))),
                        static_cast<T>(1.0 / std::sqrt(a)));
}

template <typename T>
Tensor<T> tweedie_z0(const Tensor<T>& z_t, int64_t t, EpsModel<T>& model, TweedieForm form = TweedieForm::Standard) {
  Ctx<T> ctx;
  return tweedie_z0(z_t, t, model.eps(ctx, z_t, t), model.schedule(), form);
}

// One reverse step: z_{t-1} = (z_t + beta_t * score) / sqrt(alpha_t) + sqrt(beta_t) * xi.
// The t=1 step adds no noise so the chain ends on a clean sample.
template <typename T>
Tensor<T> ancestral_step(const Tensor<T>& z_t, int64_t t, const Tensor<T>& score, const NoiseSchedule& s, Rng& rng) {
  double b = s.beta_at(t);
  double a = s.alpha_at(t);
  Tensor<T> drift = ad::scalar_mul(ad::add(z_t, ad::scalar_mul(score, static_cast<T>(b))),
                                   static_cast<T>(1.0 / std::sqrt(a)));
  if (t <= 1 || b == 0.0) return drift;
  Tensor<T> xi = Tensor<T>::randn(z_t.shape, rng, std::sqrt(b));
  return ad::add(drift, xi);
}

template <typename T>
Tensor<T> sample_unconditional(EpsModel<T>& model, Rng& rng) {
  const auto& s = model.schedule();
  Tensor<T> z = Tensor<T>::randn({1, model.dim()}, rng);
  Ctx<T> ctx;
  for (int64_t t = s.T; t >= 1; --t) {
    Tensor<T> sc = score_from_eps(model.eps(ctx, z, t), t, s);
    z = ancestral_step(z, t, sc, s, rng);
  }
  return z;
}

// ---------------------------------------------------------------------------
// score training (noise-prediction objective)

struct TrainScoreCfg {
  int64_t steps = 3000;
  int64_t batch = 64;
  double lr = 1e-3;
  double momentum = 0.9;
};

inline int64_t sample_t(const NoiseSchedule& s, Rng& rng) {
  return 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(s.T)));
}

// samples: (N, d) clean draws from the target prior. Standardizes to unit RMS
// (scale kept on the model), then minimizes ||eps_theta(z_t, t) - eps||^2.
template <typename T>
void train_score(const Tensor<T>& samples, MlpDiffusionModel<T>& model, const TrainScoreCfg& cfg, Rng& rng) {
  if (samples.shape.size() != 2 || samples.shape[1] != model.dim())
    throw Error(cat("train_score: samples ", ad::shape_str(samples.shape), " incompatible with model dim ", model.dim()));
  int64_t N = samples.shape[0], d = model.dim();
  if (N < 1) throw Error("train_score: empty sample set");
  if (cfg.steps == 0) return;

  double ms = 0;
  for (int64_t i = 0; i < samples.size(); ++i) ms += static_cast<double>(samples.at(i)) * static_cast<double>(samples.at(i));
  model.data_rms = std::sqrt(ms / static_cast<double>(samples.size()));
  if (!(model.data_rms > 0)) throw NumericError("train_score: zero-power sample set");

  ad::SgdState<T> opt;
  opt.lr = cfg.lr;
  opt.momentum = cfg.momentum;
  model.train_curve.clear();
  model.train_curve.reserve(static_cast<size_t>(cfg.steps));

  nets::NamedParams<T> named;
  model.net.collect("eps", named);
  auto params = nets::param_pointers(named);
  const auto& s = model.schedule();

  for (int64_t step = 0; step < cfg.steps; ++step) {
    int64_t t = sample_t(s, rng);
    double sab = std::sqrt(s.abar(t)), som = std::sqrt(1.0 - s.abar(t));
    Tensor<T> z_t = Tensor<T>::zeros({cfg.batch, d});
    Tensor<T> eps = Tensor<T>::zeros({cfg.batch, d});
    for (int64_t b = 0; b < cfg.batch; ++b) {
      int64_t row = static_cast<int64_t>(rng.below(static_cast<uint64_t>(N)));
      for (int64_t i = 0; i < d; ++i) {
        double e = rng.normal();
        double z0 = static_cast<double>(samples.at(row * d + i)) / model.data_rms;
        eps.data()[b * d + i] = static_cast<T>(e);
        z_t.data()[b * d + i] = static_cast<T>(sab * z0 + som * e);
      }
    }
    Tape<T> tape;
    Ctx<T> ctx{&tape, true};
    Tensor<T> pred;
    try {
      pred = model.eps(ctx, tape.var(z_t), t);
    } catch (const NumericError& e) {
      throw NumericError(cat("train_score: numeric failure at step ", step, ": ", e.what()));
    }
    Tensor<T> loss = ad::scalar_mul(ad::sqnorm(ad::sub(pred, eps)), static_cast<T>(1.0 / static_cast<double>(cfg.batch * d)));
    double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) throw NumericError(cat("train_score: loss became non-finite at step ", step));
    model.train_curve.push_back(lv);
    tape.backward(loss);
    ad::sgd_step(params, opt);
  }
  model.trained = true;
}

}  // namespace sdgc::diffusion
