#pragma once

// Semantic encoder/decoder with VAE-style training. Images cross the public
// boundary as (H, W, C) tensors in [0, 1]; the nets run on (N, C, H, W).

#include <utility>
#include <vector>

#include "sdgc/nets.hpp"

namespace sdgc::codec {

using ad::Tape;
using ad::Tensor;
using nets::CodecConfig;
using nets::Ctx;

template <typename T>
struct LatentCode {
  Tensor<T> mu;      // (d)
  Tensor<T> logvar;  // (d)
  Tensor<T> z;       // mu at inference; reparameterized sample during training
};

// (H,W,C) -> (1,C,H,W)
template <typename T>
Tensor<T> image_to_nchw(const Tensor<T>& img) {
  if (img.shape.size() != 3) throw Error(cat("image: expected (H,W,C), got ", ad::shape_str(img.shape)));
  int64_t H = img.shape[0], W = img.shape[1], C = img.shape[2];
  Tensor<T> out = Tensor<T>::zeros({1, C, H, W});
  for (int64_t h = 0; h < H; ++h)
    for (int64_t w = 0; w < W; ++w)
      for (int64_t c = 0; c < C; ++c) out.data()[(c * H + h) * W + w] = img.at((h * W + w) * C + c);
  return out;
}

// (1,C,H,W) or (C,H,W) slice -> (H,W,C)
template <typename T>
Tensor<T> nchw_to_image(const Tensor<T>& x, int64_t n = 0) {
  if (x.shape.size() != 4) throw Error(cat("image: expected (N,C,H,W), got ", ad::shape_str(x.shape)));
  int64_t C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const T* base = x.data() + n * C * H * W;
  Tensor<T> out = Tensor<T>::zeros({H, W, C});
  for (int64_t h = 0; h < H; ++h)
    for (int64_t w = 0; w < W; ++w)
      for (int64_t c = 0; c < C; ++c) out.data()[(h * W + w) * C + c] = base[(c * H + h) * W + w];
  return out;
}

// Stack (H,W,C) images into an (N,C,H,W) batch.
template <typename T>
Tensor<T> batch_images(const std::vector<Tensor<T>>& imgs, const std::vector<int64_t>& idx) {
  if (idx.empty()) throw Error("batch_images: empty selection");
  const auto& first = imgs[static_cast<size_t>(idx[0])];
  int64_t H = first.shape[0], W = first.shape[1], C = first.shape[2];
  Tensor<T> out = Tensor<T>::zeros({static_cast<int64_t>(idx.size()), C, H, W});
  for (size_t b = 0; b < idx.size(); ++b) {
    const auto& img = imgs[static_cast<size_t>(idx[b])];
    if (img.shape != first.shape) throw Error("batch_images: inconsistent image shapes");
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w)
        for (int64_t c = 0; c < C; ++c)
          out.data()[((static_cast<int64_t>(b) * C + c) * H + h) * W + w] = img.at((h * W + w) * C + c);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
struct Codec {
  CodecConfig cfg;
  nets::EncoderNet<T> enc;
  nets::DecoderNet<T> dec;
  bool encoder_frozen = false;

  LatentCode<T> encode(const Tensor<T>& img) {
    if (img.shape.size() != 3 || img.shape[0] != cfg.height || img.shape[1] != cfg.width || img.shape[2] != cfg.channels)
      throw Error(cat("encode: expected (", cfg.height, ",", cfg.width, ",", cfg.channels, "), got ",
                      ad::shape_str(img.shape)));
    for (int64_t i = 0; i < img.size(); ++i) {
      T v = img.at(i);
      if (v < T(0) || v > T(1)) throw DataError(cat("encode: pixel value ", static_cast<double>(v), " outside [0,1]"));
    }
    auto x = image_to_nchw(img);
    auto [mu, lv] = enc.forward(Ctx<T>{}, x);
    LatentCode<T> code;
    code.mu = ad::reshape(mu, {cfg.latent_dim});
    code.logvar = ad::reshape(lv, {cfg.latent_dim});
    code.z = code.mu.clone();  // deterministic latent at inference
    return code;
  }

  Tensor<T> decode(const Tensor<T>& z) {
    if (z.shape.size() != 1 || z.shape[0] != cfg.latent_dim)
      throw Error(cat("decode: expected (", cfg.latent_dim, ") latent, got ", ad::shape_str(z.shape)));
    if (!ad::detail::all_finite(*z.values)) throw NumericError("decode: non-finite latent");
    auto out = dec.forward(Ctx<T>{}, ad::reshape(z, {1, cfg.latent_dim}));
    return nchw_to_image(out);
  }

  nets::NamedParams<T> encoder_params() {
    nets::NamedParams<T> named;
    enc.collect(named);
    return named;
  }
  nets::NamedParams<T> decoder_params() {
    nets::NamedParams<T> named;
    dec.collect(named);
    return named;
  }
  nets::NamedParams<T> all_params() {
    nets::NamedParams<T> named;
    enc.collect(named);
    dec.collect(named);
    return named;
  }
  uint64_t encoder_hash() { return nets::params_hash<T>(encoder_params()); }

  void freeze_encoder() { encoder_frozen = true; }
};

template <typename T>
Codec<T> build_codec(const CodecConfig& cfg, Rng& rng) {
  Codec<T> c;
  c.cfg = cfg;
  c.enc = nets::build_encoder<T>(cfg, rng);
  c.dec = nets::build_decoder<T>(cfg, rng);
  return c;
}

// ---------------------------------------------------------------------------
// loss: per-pixel MSE + kl_weight * mean KL, with
// KL = -1/2 sum_i (1 + log sigma_i^2 - mu_i^2 - sigma_i^2) per sample.

template <typename T>
Tensor<T> kl_term(const Tensor<T>& mu, const Tensor<T>& logvar) {
  auto inner = ad::sub(ad::sub(ad::add_scalar(logvar, T(1)), ad::mul(mu, mu)), ad::exp(logvar));
  return ad::scalar_mul(ad::sum(inner), T(-0.5));
}

template <typename T>
Tensor<T> vae_loss(const Tensor<T>& x, const Tensor<T>& xrec, const Tensor<T>& mu, const Tensor<T>& logvar,
                   double kl_weight) {
  if (kl_weight < 0) throw Error(cat("vae_loss: KL weight must be >= 0, got ", kl_weight));
  if (x.shape != xrec.shape)
    throw Error(cat("vae_loss: image shapes differ ", ad::shape_str(x.shape), " vs ", ad::shape_str(xrec.shape)));
  if (mu.shape != logvar.shape)
    throw Error(cat("vae_loss: latent shapes differ ", ad::shape_str(mu.shape), " vs ", ad::shape_str(logvar.shape)));
  int64_t batch = x.shape.size() == 4 ? x.shape[0] : 1;
  auto mse_term = ad::scalar_mul(ad::sqnorm(ad::sub(x, xrec)), static_cast<T>(1.0 / static_cast<double>(x.size())));
  auto kl = ad::scalar_mul(kl_term(mu, logvar), static_cast<T>(1.0 / static_cast<double>(batch)));
  return ad::add(mse_term, ad::scalar_mul(kl, static_cast<T>(kl_weight)));
}

// ---------------------------------------------------------------------------
// training

struct TrainCurve {
  std::vector<double> train_loss;   // per epoch
  std::vector<double> heldout_mse;  // [0] is the pre-training value
  std::vector<double> kl;           // per epoch, mean per-sample KL
};

template <typename T>
double heldout_mse(Codec<T>& codec, const std::vector<Tensor<T>>& imgs, int64_t max_n = -1) {
  int64_t n = static_cast<int64_t>(imgs.size());
  if (max_n > 0) n = std::min(n, max_n);
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    auto x = batch_images<T>(imgs, {i});
    auto [mu, lv] = codec.enc.forward(Ctx<T>{}, x);
    auto rec = codec.dec.forward(Ctx<T>{}, mu);
    auto diff = ad::sub(rec, x);
    acc += static_cast<double>(ad::sqnorm(diff).item()) / static_cast<double>(x.size());
  }
  return acc / static_cast<double>(n);
}

// Trains encoder+decoder jointly; records a per-epoch curve. Held-out MSE is
// evaluated with the deterministic latent (z = mu).
template <typename T>
TrainCurve train_codec(Codec<T>& codec, const std::vector<Tensor<T>>& train, const std::vector<Tensor<T>>& heldout,
                       Rng& rng) {
  const auto& cfg = codec.cfg;
  cfg.validate();
  if (train.empty()) throw DataError("train_codec: empty training set");

  ad::SgdState<T> opt;
  opt.lr = cfg.lr;
  opt.momentum = cfg.momentum;

  auto named = codec.all_params();
  auto params = nets::param_pointers(named);

  TrainCurve curve;
  curve.heldout_mse.push_back(heldout.empty() ? 0.0 : heldout_mse(codec, heldout));

  int64_t n = static_cast<int64_t>(train.size());
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // deterministic shuffle from the training stream
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.below(static_cast<uint64_t>(i + 1)))]);

    double ep_loss = 0, ep_kl = 0;
    int64_t steps = 0;
    for (int64_t start = 0; start + cfg.batch <= n; start += cfg.batch) {
      std::vector<int64_t> idx(order.begin() + start, order.begin() + start + cfg.batch);
      auto x = batch_images<T>(train, idx);
      Tape<T> tape;
      Ctx<T> ctx{&tape, true};
      auto [mu, lv] = codec.enc.forward(ctx, tape.var(x));
      // reparameterized sample z = mu + exp(logvar/2) .* eps
      auto eps = Tensor<T>::randn(mu.shape, rng);
      auto z = ad::add(mu, ad::mul(ad::exp(ad::scalar_mul(lv, T(0.5))), eps));
      auto rec = codec.dec.forward(ctx, z);
      auto kl = ad::scalar_mul(kl_term(mu, lv), static_cast<T>(1.0 / static_cast<double>(cfg.batch)));
      auto loss = ad::add(ad::scalar_mul(ad::sqnorm(ad::sub(x, rec)), static_cast<T>(1.0 / static_cast<double>(x.size()))),
                          ad::scalar_mul(kl, static_cast<T>(cfg.kl_weight)));
      double lvalue = static_cast<double>(loss.item());
      if (!std::isfinite(lvalue))
        throw NumericError(cat("train_codec: loss diverged (non-finite) at epoch ", epoch));
      ep_loss += lvalue;
      ep_kl += static_cast<double>(kl.item());
      ++steps;
      tape.backward(loss);
      ad::sgd_step(params, opt);
    }
    curve.train_loss.push_back(ep_loss / std::max<int64_t>(1, steps));
    curve.kl.push_back(ep_kl / std::max<int64_t>(1, steps));
    if (!heldout.empty()) curve.heldout_mse.push_back(heldout_mse(codec, heldout));
  }
  return curve;
}

// Decoder-only fine-tuning on (denoised latent, original image) pairs.
// The encoder must be frozen; its parameters are untouched by construction
// and verified by hash in the tests. The learning rate backs off whenever an
// epoch fails to improve, keeping the recorded curve non-increasing.
template <typename T>
std::vector<double> finetune_decoder(Codec<T>& codec, const std::vector<Tensor<T>>& latents,
                                     const std::vector<Tensor<T>>& originals, int epochs, double lr, Rng& rng) {
  if (!codec.encoder_frozen) throw Error("finetune_decoder: encoder must be frozen first");
  if (latents.size() != originals.size() || latents.empty())
    throw DataError(cat("finetune_decoder: need matching nonempty pairs, got ", latents.size(), "/", originals.size()));

  auto named = codec.decoder_params();
  auto params = nets::param_pointers(named);

  int64_t n = static_cast<int64_t>(latents.size());
  auto eval_mse = [&]() {
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
      auto x = batch_images<T>(originals, {i});
      auto z = ad::reshape(latents[static_cast<size_t>(i)], {1, codec.cfg.latent_dim});
      auto rec = codec.dec.forward(Ctx<T>{}, z);
      acc += static_cast<double>(ad::sqnorm(ad::sub(rec, x)).item()) / static_cast<double>(x.size());
    }
    return acc / static_cast<double>(n);
  };

  std::vector<double> curve;
  curve.push_back(eval_mse());
  if (epochs == 0) return curve;

  ad::SgdState<T> opt;
  opt.lr = lr;
  opt.momentum = 0.0;

  int64_t batch = std::min<int64_t>(16, n);
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  // parameter snapshot for backtracking
  auto snapshot = [&]() {
    std::vector<std::vector<T>> snap;
    for (auto* p : params) snap.push_back(*p->values);
    return snap;
  };
  auto restore = [&](const std::vector<std::vector<T>>& snap) {
    for (size_t i = 0; i < params.size(); ++i) *params[i]->values = snap[i];
  };

  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto snap = snapshot();
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.below(static_cast<uint64_t>(i + 1)))]);
    for (int64_t start = 0; start + batch <= n; start += batch) {
      std::vector<int64_t> idx(order.begin() + start, order.begin() + start + batch);
      auto x = batch_images<T>(originals, idx);
      Tensor<T> zb = Tensor<T>::zeros({batch, codec.cfg.latent_dim});
      for (int64_t b = 0; b < batch; ++b)
        std::copy(latents[static_cast<size_t>(idx[static_cast<size_t>(b)])].data(),
                  latents[static_cast<size_t>(idx[static_cast<size_t>(b)])].data() + codec.cfg.latent_dim,
                  zb.data() + b * codec.cfg.latent_dim);
      Tape<T> tape;
      Ctx<T> ctx{&tape, true};
      auto rec = codec.dec.forward(ctx, tape.var(zb));
      auto loss = ad::scalar_mul(ad::sqnorm(ad::sub(rec, x)), static_cast<T>(1.0 / static_cast<double>(x.size())));
      if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError(cat("finetune_decoder: loss diverged at epoch ", epoch));
      tape.backward(loss);
      ad::sgd_step(params, opt);
    }
    double m = eval_mse();
    if (m > curve.back()) {
      restore(snap);
      opt.lr *= 0.5;
      curve.push_back(curve.back());
    } else {
      curve.push_back(m);
    }
  }
  return curve;
}

// ---------------------------------------------------------------------------
// latent power normalization (unit average power, scale sent out-of-band)

struct PowerNorm {
  std::vector<double> z;
  double scale = 1.0;  // original = z * scale
};

inline PowerNorm normalize_power(const std::vector<double>& z) {
  double ms = 0;
  for (double v : z) ms += v * v;
  ms /= static_cast<double>(z.size());
  if (!(ms > 0)) throw NumericError("normalize_power: zero-power latent");
  PowerNorm out;
  out.scale = std::sqrt(ms);
  out.z.resize(z.size());
  for (size_t i = 0; i < z.size(); ++i) out.z[i] = z[i] / out.scale;
  return out;
}

template <typename T>
std::vector<double> latent_to_vec(const Tensor<T>& t) {
  std::vector<double> out(static_cast<size_t>(t.size()));
  for (int64_t i = 0; i < t.size(); ++i) out[static_cast<size_t>(i)] = static_cast<double>(t.at(i));
  return out;
}

template <typename T>
Tensor<T> vec_to_latent(const std::vector<double>& v) {
  Tensor<T> t = Tensor<T>::zeros({static_cast<int64_t>(v.size())});
  for (size_t i = 0; i < v.size(); ++i) t.data()[i] = static_cast<T>(v[i]);
  return t;
}

}  // namespace sdgc::codec
