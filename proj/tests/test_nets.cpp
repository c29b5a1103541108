#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sdgc/nets.hpp"

using namespace sdgc;
using ad::Tape;
using ad::Tensor;
using nets::CodecConfig;
using nets::Ctx;

namespace {
CodecConfig desk() { return CodecConfig{}; }
}  // namespace

TEST_CASE("desk encoder maps 32x32x3 to two 64-vectors through 4x4 maps") {
  auto cfg = desk();
  cfg.validate();
  CHECK(cfg.map_h() == 4);
  CHECK(cfg.map_w() == 4);
  CHECK(cfg.pixels() / cfg.latent_dim == 48);  // compression ratio 48:1

  Rng rng(5);
  auto enc = nets::build_encoder<float>(cfg, rng);
  auto x = Tensor<float>::randn({2, 3, 32, 32}, rng, 0.1);
  auto [mu, lv] = enc.forward(Ctx<float>{}, x);
  CHECK(mu.shape == ad::Shape{2, 64});
  CHECK(lv.shape == ad::Shape{2, 64});
}

TEST_CASE("paper configuration is accepted") {
  auto cfg = CodecConfig::paper();
  cfg.validate();
  CHECK(cfg.stage_widths == std::vector<int64_t>{64, 128, 256, 512});
  CHECK(cfg.map_h() == 16);  // 256 / (2 * 2^3)
  CHECK(cfg.flat_dim() == 16 * 16 * 512);
}

TEST_CASE("latent dim must stay far below the pixel count") {
  auto cfg = desk();
  cfg.latent_dim = cfg.pixels();  // d == H*W*C
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.latent_dim = cfg.pixels() / 8 + 1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.latent_dim = cfg.pixels() / 8;
  cfg.validate();
}

TEST_CASE("indivisible dims are rejected") {
  auto cfg = desk();
  cfg.height = 30;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("decoder maps latents to [0,1] images of the right shape") {
  auto cfg = desk();
  Rng rng(7);
  auto dec = nets::build_decoder<float>(cfg, rng);
  auto z = Tensor<float>::randn({2, 64}, rng);
  auto img = dec.forward(Ctx<float>{}, z);
  CHECK(img.shape == ad::Shape{2, 3, 32, 32});
  for (int64_t i = 0; i < img.size(); ++i) {
    CHECK(img.at(i) >= 0.0f);
    CHECK(img.at(i) <= 1.0f);
  }
}

TEST_CASE("encoder/decoder shape round-trip across configs") {
  for (auto [H, d] : {std::pair<int64_t, int64_t>{32, 64}, {16, 24}}) {
    CodecConfig cfg;
    cfg.height = cfg.width = H;
    cfg.latent_dim = d;
    if (H == 16) cfg.stage_widths = {8, 16, 32, 64};
    Rng rng(11);
    auto enc = nets::build_encoder<float>(cfg, rng);
    auto dec = nets::build_decoder<float>(cfg, rng);
    auto x = Tensor<float>::randn({1, 3, H, H}, rng, 0.1);
    auto [mu, lv] = enc.forward(Ctx<float>{}, x);
    auto back = dec.forward(Ctx<float>{}, mu);
    CHECK(back.shape == x.shape);
  }
}

TEST_CASE("stride-2 stem round-trips through the mirrored decoder stage") {
  CodecConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.stem_stride = 2;
  cfg.stage_widths = {8, 16, 32, 64};
  cfg.latent_dim = 16;
  cfg.validate();
  CHECK(cfg.map_h() == 2);
  Rng rng(3);
  auto enc = nets::build_encoder<float>(cfg, rng);
  auto dec = nets::build_decoder<float>(cfg, rng);
  auto x = Tensor<float>::randn({1, 3, 32, 32}, rng, 0.1);
  auto [mu, lv] = enc.forward(Ctx<float>{}, x);
  CHECK(mu.shape == ad::Shape{1, 16});
  CHECK(dec.forward(Ctx<float>{}, mu).shape == x.shape);
}

TEST_CASE("every block kind passes grad_check in isolation") {
  Rng rng(13);
  double tol = 1e-4;

  auto probe = Tensor<double>::randn({1, 4, 4, 4}, rng);
  auto scalarize = [&](const Tensor<double>& y) { return ad::sum(ad::mul(y, probe)); };

  {
    nets::ResidualBlock<double> block(4, rng);
    auto fn = [&](Tape<double>& tp, const Tensor<double>& x) {
      Ctx<double> ctx{&tp, false};
      return scalarize(block.forward(ctx, x));
    };
    auto rep = ad::grad_check<double>(fn, Tensor<double>::randn({1, 4, 4, 4}, rng, 0.5), tol);
    CHECK_MESSAGE(rep.pass, "residual max_rel_err=", rep.max_rel_err);
  }
  {
    nets::AttentionBlock<double> block(4, rng);
    auto fn = [&](Tape<double>& tp, const Tensor<double>& x) {
      Ctx<double> ctx{&tp, false};
      return scalarize(block.forward(ctx, x));
    };
    auto rep = ad::grad_check<double>(fn, Tensor<double>::randn({1, 4, 4, 4}, rng, 0.5), tol);
    CHECK_MESSAGE(rep.pass, "attention max_rel_err=", rep.max_rel_err);
  }
  {
    nets::Conv<double> conv(4, 3, 3, 2, 1, rng);
    auto p2 = Tensor<double>::randn({1, 3, 2, 2}, rng);
    auto fn = [&](Tape<double>& tp, const Tensor<double>& x) {
      Ctx<double> ctx{&tp, false};
      return ad::sum(ad::mul(conv.forward(ctx, x), p2));
    };
    CHECK(ad::grad_check<double>(fn, Tensor<double>::randn({1, 4, 4, 4}, rng, 0.5), tol).pass);
  }
  {
    nets::TConv<double> tc(4, 3, 3, 2, 1, 1, rng);
    auto p2 = Tensor<double>::randn({1, 3, 8, 8}, rng);
    auto fn = [&](Tape<double>& tp, const Tensor<double>& x) {
      Ctx<double> ctx{&tp, false};
      return ad::sum(ad::mul(tc.forward(ctx, x), p2));
    };
    CHECK(ad::grad_check<double>(fn, Tensor<double>::randn({1, 4, 4, 4}, rng, 0.5), tol).pass);
  }
  {
    // parameter gradients through a whole block, train-mode context
    nets::ResidualBlock<double> block(4, rng);
    auto x0 = Tensor<double>::randn({2, 4, 4, 4}, rng, 0.5);
    auto probe2 = Tensor<double>::randn({2, 4, 4, 4}, rng);
    auto fn = [&](Tape<double>& tp, const Tensor<double>& w) {
      block.conv1.w = w;
      Ctx<double> ctx{&tp, true};
      return ad::sum(ad::mul(block.forward(ctx, x0), probe2));
    };
    auto rep = ad::grad_check<double>(fn, block.conv1.w.clone(), tol);
    CHECK_MESSAGE(rep.pass, "residual conv1.w max_rel_err=", rep.max_rel_err);
  }
}

TEST_CASE("attention is permutation-equivariant over spatial positions") {
  Rng rng(17);
  nets::AttentionBlock<float> block(3, rng);
  auto x = Tensor<float>::randn({1, 3, 2, 2}, rng);
  auto y = block.forward(Ctx<float>{}, x);

  // permute the four spatial positions
  std::vector<int> perm = {2, 0, 3, 1};
  auto xp = Tensor<float>::zeros({1, 3, 2, 2});
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 4; ++p) xp.data()[c * 4 + p] = x.at(c * 4 + perm[size_t(p)]);
  auto yp = block.forward(Ctx<float>{}, xp);
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 4; ++p)
      CHECK(yp.at(c * 4 + p) == doctest::Approx(y.at(c * 4 + perm[size_t(p)])).epsilon(1e-5));
}

TEST_CASE("noise predictor shapes and determinism") {
  nets::NoisePredictorSpec spec;
  spec.input_dim = 64;
  Rng rng(23);
  auto net = nets::build_noise_predictor<float>(spec, rng);
  auto z = Tensor<float>::randn({1, 64}, rng);
  auto e1 = net.forward(Ctx<float>{}, z, 100);
  CHECK(e1.shape == ad::Shape{1, 64});

  // time embedding is deterministic
  auto emb1 = nets::time_embedding<double>(417, 32);
  auto emb2 = nets::time_embedding<double>(417, 32);
  CHECK(emb1 == emb2);
  CHECK(emb1 != nets::time_embedding<double>(418, 32));

  // two instances built independently share no parameters
  Rng r1(1), r2(2);
  auto a = nets::build_noise_predictor<float>(spec, r1);
  auto b = nets::build_noise_predictor<float>(spec, r2);
  CHECK(a.param_hash() != b.param_hash());
  for (size_t i = 0; i < a.layers.size(); ++i) CHECK(a.layers[i].w.values != b.layers[i].w.values);
}

TEST_CASE("bad predictor spec is rejected") {
  nets::NoisePredictorSpec spec;
  spec.time_dim = 31;
  CHECK_THROWS_AS(spec.validate(), Error);
}
