#pragma once

// Network blocks: the U-Net-style encoder/decoder used by the semantic codec
// and the time-conditioned MLP noise predictors used by the diffusion chains.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sdgc/tensor.hpp"

namespace sdgc::nets {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

// ---------------------------------------------------------------------------

struct BlockSpec {
  enum class Kind { Conv, TransposedConv, Residual, Attention };
  Kind kind = Kind::Conv;
  int64_t in_ch = 0;
  int64_t out_ch = 0;
  int64_t kernel = 3;
  int64_t stride = 1;
  int64_t padding = 1;

  void validate() const {
    if (kernel != 3 || padding != 1) throw Error(cat("block: kernel must be 3 with padding 1, got ", kernel, "/", padding));
    if (stride != 1 && stride != 2) throw Error(cat("block: stride must be 1 or 2, got ", stride));
    if (in_ch < 1 || out_ch < 1) throw Error("block: channels must be positive");
  }
};

struct CodecConfig {
  int64_t height = 32;
  int64_t width = 32;
  int64_t channels = 3;
  int64_t latent_dim = 64;
  std::vector<int64_t> stage_widths = {16, 32, 64, 128};  // stem + three downsample stages
  int64_t stem_stride = 1;
  int64_t attn_max_positions = 256;  // attention applied where H*W is at most this
  double kl_weight = 1e-3;
  int epochs = 30;
  int batch = 32;
  double lr = 1e-3;
  double momentum = 0.9;

  static constexpr int kDownStages = 3;

  int64_t down_factor() const { return stem_stride * (1 << kDownStages); }
  int64_t map_h() const { return height / down_factor(); }
  int64_t map_w() const { return width / down_factor(); }
  int64_t flat_dim() const { return map_h() * map_w() * stage_widths.back(); }
  int64_t pixels() const { return height * width * channels; }

  void validate() const {
    if (stage_widths.size() != 4) throw Error(cat("codec: expected 4 stage widths, got ", stage_widths.size()));
    for (auto w : stage_widths)
      if (w < 1) throw Error("codec: stage widths must be positive");
    if (stem_stride != 1 && stem_stride != 2) throw Error(cat("codec: stem stride must be 1 or 2, got ", stem_stride));
    int64_t f = down_factor();
    if (height % f != 0 || width % f != 0)
      throw Error(cat("codec: dims ", height, "x", width, " not divisible by total downsample factor ", f));
    if (latent_dim < 1) throw Error("codec: latent dim must be >= 1");
    // latent must be narrow relative to the image
    if (latent_dim > pixels() / 8)
      throw Error(cat("codec: latent dim ", latent_dim, " too large for ", height, "x", width, "x", channels,
                      " (must be <= ", pixels() / 8, ")"));
    if (kl_weight < 0) throw Error(cat("codec: KL weight must be >= 0, got ", kl_weight));
    if (batch < 1 || epochs < 0) throw Error("codec: bad batch/epochs");
  }

  // The configuration used throughout the paper-scale description.
  static CodecConfig paper() {
    CodecConfig c;
    c.height = 256;
    c.width = 256;
    c.channels = 3;
    c.latent_dim = 256;
    c.stage_widths = {64, 128, 256, 512};
    c.stem_stride = 2;
    return c;
  }
};

struct NoisePredictorSpec {
  int64_t input_dim = 64;
  std::vector<int64_t> hidden = {256, 256};
  int64_t time_dim = 32;  // sinusoidal

  void validate() const {
    if (input_dim < 1) throw Error("noise predictor: input dim must be >= 1");
    if (time_dim < 2 || time_dim % 2 != 0) throw Error(cat("noise predictor: time dim must be even and >= 2, got ", time_dim));
    for (auto h : hidden)
      if (h < 1) throw Error("noise predictor: hidden widths must be positive");
  }
};

// Deterministic sinusoidal embedding of an integer timestep.
template <typename T>
std::vector<T> time_embedding(int64_t t, int64_t dim) {
  std::vector<T> out(static_cast<size_t>(dim));
  int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[static_cast<size_t>(2 * i)] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
    out[static_cast<size_t>(2 * i + 1)] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// layers

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
struct Ctx {
  Tape<T>* tape = nullptr;
  bool train = false;  // track parameters and use batch statistics

  Tensor<T> p(Tensor<T>& param) const { return (tape && train) ? tape->var(param) : param; }
};

template <typename T>
struct Linear {
  Tensor<T> w, b;

  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng) {
    w = Tensor<T>::randn({in, out}, rng, std::sqrt(2.0 / static_cast<double>(in)));
    b = Tensor<T>::zeros({out});
  }
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& x) {
    return ad::add_bias(ad::matmul(x, ctx.p(w)), ctx.p(b));
  }
  void collect(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

template <typename T>
struct Conv {
  Tensor<T> w, b;
  int64_t stride = 1, pad = 1;

  Conv() = default;
  Conv(int64_t cin, int64_t cout, int64_t k, int64_t stride_, int64_t pad_, Rng& rng) : stride(stride_), pad(pad_) {
    w = Tensor<T>::randn({cout, cin, k, k}, rng, std::sqrt(2.0 / static_cast<double>(cin * k * k)));
    b = Tensor<T>::zeros({cout});
  }
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& x) {
    return ad::conv2d(x, ctx.p(w), ctx.p(b), stride, pad);
  }
  void collect(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

template <typename T>
struct TConv {
  Tensor<T> w, b;
  int64_t stride = 1, pad = 1, out_pad = 0;

  TConv() = default;
  TConv(int64_t cin, int64_t cout, int64_t k, int64_t stride_, int64_t pad_, int64_t out_pad_, Rng& rng)
      : stride(stride_), pad(pad_), out_pad(out_pad_) {
    w = Tensor<T>::randn({cin, cout, k, k}, rng, std::sqrt(2.0 / static_cast<double>(cin * k * k)));
    b = Tensor<T>::zeros({cout});
  }
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& x) {
    return ad::tconv2d(x, ctx.p(w), ctx.p(b), stride, pad, out_pad);
  }
  void collect(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;  // persisted, updated in train mode
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(int64_t c) {
    gamma = Tensor<T>::full({c}, T(1));
    beta = Tensor<T>::zeros({c});
    running_mean = Tensor<T>::zeros({c});
    running_var = Tensor<T>::full({c}, T(1));
  }
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& x) {
    if (ctx.train) {
      std::vector<double> bm, bv;
      Tensor<T> y = ad::batchnorm_train(x, ctx.p(gamma), ctx.p(beta), eps, &bm, &bv);
      for (size_t c = 0; c < bm.size(); ++c) {
        running_mean.data()[c] = static_cast<T>((1 - momentum) * running_mean.at(static_cast<int64_t>(c)) + momentum * bm[c]);
        running_var.data()[c] = static_cast<T>((1 - momentum) * running_var.at(static_cast<int64_t>(c)) + momentum * bv[c]);
      }
      return y;
    }
    int64_t C = gamma.shape[0];
    Tensor<T> scale = Tensor<T>::zeros({C}), shift = Tensor<T>::zeros({C});
    for (int64_t c = 0; c < C; ++c) {
      double is = 1.0 / std::sqrt(static_cast<double>(running_var.at(c)) + eps);
      scale.data()[c] = static_cast<T>(static_cast<double>(gamma.at(c)) * is);
      shift.data()[c] = static_cast<T>(static_cast<double>(beta.at(c)) -
                                       static_cast<double>(gamma.at(c)) * static_cast<double>(running_mean.at(c)) * is);
    }
    return ad::channel_affine(x, scale, shift);
  }
  void collect(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
    out.push_back({prefix + ".rmean", &running_mean});
    out.push_back({prefix + ".rvar", &running_var});
  }
};

template <typename T>
struct GroupNorm {
  Tensor<T> gamma, beta;
  int64_t groups = 8;

  GroupNorm() = default;
  explicit GroupNorm(int64_t c) {
    gamma = Tensor<T>::full({c}, T(1));
    beta = Tensor<T>::zeros({c});
    groups = std::min<int64_t>(8, c);
    while (c % groups != 0) --groups;
  }
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& x) {
    return ad::groupnorm(x, ctx.p(gamma), ctx.p(beta), groups);
  }
  void collect(const std::string& prefix, NamedParams<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

// Pre-activation residual block: x + conv(relu(gn(conv(relu(gn(x))))))
template <typename T>
struct ResidualBlock {
  GroupNorm<T> gn1, gn2;
  Conv<T> conv1, conv2;

  ResidualBlock() = default;
  ResidualBlock(int64_t c, Rng& rng)
      : gn1(c), gn2(c), conv1(c, c, 3, 1, 1, rng), conv2(c, c, 3, 1, 1, rng) {}
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& x) {
    auto h = conv1.forward(ctx, ad::relu(gn1.forward(ctx, x)));
    h = conv2.forward(ctx, ad::relu(gn2.forward(ctx, h)));
    return ad::add(x, h);
  }
  void collect(const std::string& prefix, NamedParams<T>& out) {
    gn1.collect(prefix + ".gn1", out);
    conv1.collect(prefix + ".conv1", out);
    gn2.collect(prefix + ".gn2", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

// Single-head dot-product attention over flattened spatial positions.
template <typename T>
struct AttentionBlock {
  Conv<T> q, k, v, proj;  // 1x1 projections
  int64_t ch = 0;

  AttentionBlock() = default;
  AttentionBlock(int64_t c, Rng& rng)
      : q(c, c, 1, 1, 0, rng), k(c, c, 1, 1, 0, rng), v(c, c, 1, 1, 0, rng), proj(c, c, 1, 1, 0, rng), ch(c) {}
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& x) {
    int64_t N = x.shape[0], C = x.shape[1], P = x.shape[2] * x.shape[3];
    auto q3 = ad::reshape(q.forward(ctx, x), {N, C, P});
    auto k3 = ad::reshape(k.forward(ctx, x), {N, C, P});
    auto v3 = ad::reshape(v.forward(ctx, x), {N, C, P});
    auto scores = ad::scalar_mul(ad::bmm(ad::transpose_last(q3), k3), static_cast<T>(1.0 / std::sqrt(double(C))));
    auto attn = ad::softmax(scores);  // (N,P,P), rows sum to 1
    auto mixed = ad::bmm(v3, ad::transpose_last(attn));
    auto out = proj.forward(ctx, ad::reshape(mixed, x.shape));
    return ad::add(x, out);
  }
  void collect(const std::string& prefix, NamedParams<T>& out) {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    proj.collect(prefix + ".proj", out);
  }
};

// ---------------------------------------------------------------------------
// encoder / decoder

template <typename T>
struct EncoderNet {
  CodecConfig cfg;
  Conv<T> stem;
  BatchNorm<T> stem_bn;
  ResidualBlock<T> stem_res;
  AttentionBlock<T> stem_attn;
  bool stem_has_attn = false;
  std::vector<Conv<T>> down;
  std::vector<ResidualBlock<T>> res;
  std::vector<AttentionBlock<T>> attn;
  std::vector<bool> has_attn;
  GroupNorm<T> head_gn;
  Linear<T> head_mu, head_logvar;

  // (mu, logvar), each (N, d)
  std::pair<Tensor<T>, Tensor<T>> forward(const Ctx<T>& ctx, const Tensor<T>& x) {
    auto h = ad::relu(stem_bn.forward(ctx, stem.forward(ctx, x)));
    h = stem_res.forward(ctx, h);
    if (stem_has_attn) h = stem_attn.forward(ctx, h);
    for (size_t i = 0; i < down.size(); ++i) {
      h = down[i].forward(ctx, h);
      h = res[i].forward(ctx, h);
      if (has_attn[i]) h = attn[i].forward(ctx, h);
    }
    h = ad::relu(head_gn.forward(ctx, h));
    auto flat = ad::reshape(h, {h.shape[0], cfg.flat_dim()});
    return {head_mu.forward(ctx, flat), head_logvar.forward(ctx, flat)};
  }

  void collect(NamedParams<T>& out) {
    stem.collect("enc.stem", out);
    stem_bn.collect("enc.stem_bn", out);
    stem_res.collect("enc.stem_res", out);
    if (stem_has_attn) stem_attn.collect("enc.stem_attn", out);
    for (size_t i = 0; i < down.size(); ++i) {
      std::string p = "enc.stage" + std::to_string(i);
      down[i].collect(p + ".down", out);
      res[i].collect(p + ".res", out);
      if (has_attn[i]) attn[i].collect(p + ".attn", out);
    }
    head_gn.collect("enc.head_gn", out);
    head_mu.collect("enc.mu", out);
    head_logvar.collect("enc.logvar", out);
  }
};

template <typename T>
struct DecoderNet {
  CodecConfig cfg;
  Linear<T> head;
  std::vector<TConv<T>> up;
  std::vector<ResidualBlock<T>> res;
  std::vector<AttentionBlock<T>> attn;
  std::vector<bool> has_attn;
  bool has_stem_up = false;  // mirrors a stride-2 stem
  TConv<T> stem_up;
  TConv<T> final_tconv;

  // z (N, d) -> image (N, C, H, W) in [0, 1]
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& z) {
    auto h = ad::reshape(head.forward(ctx, z), {z.shape[0], cfg.stage_widths.back(), cfg.map_h(), cfg.map_w()});
    for (size_t i = 0; i < up.size(); ++i) {
      h = up[i].forward(ctx, h);
      h = res[i].forward(ctx, h);
      if (has_attn[i]) h = attn[i].forward(ctx, h);
    }
    if (has_stem_up) h = stem_up.forward(ctx, h);
    return ad::sigmoid(final_tconv.forward(ctx, h));
  }

  void collect(NamedParams<T>& out) {
    head.collect("dec.head", out);
    for (size_t i = 0; i < up.size(); ++i) {
      std::string p = "dec.stage" + std::to_string(i);
      up[i].collect(p + ".up", out);
      res[i].collect(p + ".res", out);
      if (has_attn[i]) attn[i].collect(p + ".attn", out);
    }
    if (has_stem_up) stem_up.collect("dec.stem_up", out);
    final_tconv.collect("dec.final", out);
  }
};

template <typename T>
EncoderNet<T> build_encoder(const CodecConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderNet<T> net;
  net.cfg = cfg;
  const auto& w = cfg.stage_widths;
  net.stem = Conv<T>(cfg.channels, w[0], 3, cfg.stem_stride, 1, rng);
  net.stem_bn = BatchNorm<T>(w[0]);
  net.stem_res = ResidualBlock<T>(w[0], rng);
  int64_t h = cfg.height / cfg.stem_stride, ww = cfg.width / cfg.stem_stride;
  net.stem_has_attn = h * ww <= cfg.attn_max_positions;
  if (net.stem_has_attn) net.stem_attn = AttentionBlock<T>(w[0], rng);
  for (int i = 0; i < CodecConfig::kDownStages; ++i) {
    h /= 2;
    ww /= 2;
    net.down.emplace_back(w[static_cast<size_t>(i)], w[static_cast<size_t>(i + 1)], 3, 2, 1, rng);
    net.res.emplace_back(w[static_cast<size_t>(i + 1)], rng);
    bool attn_here = h * ww <= cfg.attn_max_positions;
    net.has_attn.push_back(attn_here);
    net.attn.emplace_back(attn_here ? AttentionBlock<T>(w[static_cast<size_t>(i + 1)], rng) : AttentionBlock<T>());
  }
  net.head_gn = GroupNorm<T>(w[3]);
  net.head_mu = Linear<T>(cfg.flat_dim(), cfg.latent_dim, rng);
  net.head_logvar = Linear<T>(cfg.flat_dim(), cfg.latent_dim, rng);
  // keep initial logvar near zero so early KL terms stay tame
  for (auto& v : *net.head_logvar.w.values) v *= T(0.1);
  return net;
}

template <typename T>
DecoderNet<T> build_decoder(const CodecConfig& cfg, Rng& rng) {
  cfg.validate();
  DecoderNet<T> net;
  net.cfg = cfg;
  const auto& w = cfg.stage_widths;
  net.head = Linear<T>(cfg.latent_dim, cfg.flat_dim(), rng);
  int64_t h = cfg.map_h(), ww = cfg.map_w();
  for (int i = CodecConfig::kDownStages; i >= 1; --i) {
    h *= 2;
    ww *= 2;
    net.up.emplace_back(w[static_cast<size_t>(i)], w[static_cast<size_t>(i - 1)], 3, 2, 1, 1, rng);
    net.res.emplace_back(w[static_cast<size_t>(i - 1)], rng);
    bool attn_here = h * ww <= cfg.attn_max_positions;
    net.has_attn.push_back(attn_here);
    net.attn.emplace_back(attn_here ? AttentionBlock<T>(w[static_cast<size_t>(i - 1)], rng) : AttentionBlock<T>());
  }
  if (cfg.stem_stride == 2) {
    net.has_stem_up = true;
    net.stem_up = TConv<T>(w[0], w[0], 3, 2, 1, 1, rng);
  }
  net.final_tconv = TConv<T>(w[0], cfg.channels, 3, 1, 1, 0, rng);
  return net;
}

// ---------------------------------------------------------------------------
// noise predictor

template <typename T>
struct MlpNoisePredictor {
  NoisePredictorSpec spec;
  std::vector<Linear<T>> layers;

  MlpNoisePredictor() = default;
  MlpNoisePredictor(const NoisePredictorSpec& s, Rng& rng) : spec(s) {
    spec.validate();
    int64_t in = spec.input_dim + spec.time_dim;
    for (auto hdim : spec.hidden) {
      layers.emplace_back(in, hdim, rng);
      in = hdim;
    }
    layers.emplace_back(in, spec.input_dim, rng);
  }

  // x: (N, d); t broadcast over the batch
  Tensor<T> forward(const Ctx<T>& ctx, const Tensor<T>& x, int64_t t) {
    int64_t N = x.shape[0];
    auto emb1 = time_embedding<T>(t, spec.time_dim);
    std::vector<T> emb(static_cast<size_t>(N * spec.time_dim));
    for (int64_t n = 0; n < N; ++n)
      std::copy(emb1.begin(), emb1.end(), emb.begin() + n * spec.time_dim);
    auto h = ad::concat(x, Tensor<T>::from({N, spec.time_dim}, std::move(emb)), 1);
    for (size_t i = 0; i + 1 < layers.size(); ++i) h = ad::relu(layers[i].forward(ctx, h));
    return layers.back().forward(ctx, h);
  }

  void collect(const std::string& prefix, NamedParams<T>& out) {
    for (size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".l" + std::to_string(i), out);
  }

  uint64_t param_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& l : layers) {
      h = fnv1a(l.w.data(), l.w.values->size() * sizeof(T), h);
      h = fnv1a(l.b.data(), l.b.values->size() * sizeof(T), h);
    }
    return h;
  }
};

template <typename T>
MlpNoisePredictor<T> build_noise_predictor(const NoisePredictorSpec& spec, Rng& rng) {
  return MlpNoisePredictor<T>(spec, rng);
}

// ---------------------------------------------------------------------------

template <typename T>
std::vector<Tensor<T>*> param_pointers(NamedParams<T>& named) {
  std::vector<Tensor<T>*> out;
  out.reserve(named.size());
  for (auto& [name, t] : named) out.push_back(t);
  return out;
}

template <typename T>
uint64_t params_hash(const NamedParams<T>& named) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : named) {
    h = fnv1a(name, h);
    h = fnv1a(t->data(), t->values->size() * sizeof(T), h);
  }
  return h;
}

}  // namespace sdgc::nets
