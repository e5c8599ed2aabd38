// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <set>

#include "momuse/model.hpp"
#include "test_util.hpp"

namespace momuse {
namespace {

using testing::random_signal;
using testing::random_tensor;
using testing::small_config;

TEST(ModelConfig, DefaultGeometry) {
  ModelConfig c;
  EXPECT_EQ(c.samples_per_frame(), 640u);
  EXPECT_EQ(c.upsample(), 32u);
  EXPECT_EQ(c.latent_length(16000), (16000u - 40u) / 20u + 1u);
  EXPECT_EQ(c.latent_length(16000), 799u);
  EXPECT_EQ(c.valid_length(16000), 16000u);
  EXPECT_EQ(c.valid_length(16001), 16020u);
  EXPECT_EQ(c.valid_length(10), 40u);
  EXPECT_THROW(c.latent_length(39), InputTooShortError);
}

TEST(ModelConfig, RejectsBadGeometry) {
  auto bad = [](auto edit) {
    ModelConfig c;
    edit(c);
    return c;
  };
  EXPECT_THROW(bad([](ModelConfig& c) { c.hidden = 2; }).validate(), ContractError);
  EXPECT_THROW(bad([](ModelConfig& c) { c.blocks = 0; }).validate(), ContractError);
  EXPECT_THROW(bad([](ModelConfig& c) { c.stride = 30; }).validate(), ContractError);
  EXPECT_THROW(bad([](ModelConfig& c) { c.video_fps = 24; c.sample_rate = 16001; }).validate(), ContractError);
  EXPECT_THROW(bad([](ModelConfig& c) { c.tcn_kernel = 4; }).validate(), ContractError);
  EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(ModelParams, NamesAreUniqueAndAttentionIsTagged) {
  auto m = ModelParams<float>::init(ModelConfig{}, 1);
  std::set<std::string> names;
  for (auto* p : m.all()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_EQ(m.aseu().size(), 10u * m.config.blocks);
  for (auto* p : m.aseu()) EXPECT_TRUE(is_aseu_param(p->name));
  EXPECT_NE(m.find("block3.mask.tcn1.weight"), nullptr);
  EXPECT_EQ(m.find("block4.mask.tcn1.weight"), nullptr);
}

TEST(ModelParams, InitIsSeededAndBounded) {
  auto a = ModelParams<double>::init(small_config(), 5);
  auto b = ModelParams<double>::init(small_config(), 5);
  auto c = ModelParams<double>::init(small_config(), 6);
  EXPECT_EQ(a.audio_enc.value, b.audio_enc.value);
  EXPECT_FALSE(a.audio_enc.value == c.audio_enc.value);
  const double bound = 1.0 / std::sqrt(8.0);  // fan-in 1 x K
  for (double v : a.audio_enc.value.values()) EXPECT_LE(std::abs(v), bound);
}

TEST(Forward, ShapesWithoutAnchors) {
  ModelConfig cfg = small_config();
  auto m = ModelParams<double>::init(cfg, 2);
  const std::size_t n = 256;
  const auto wave = random_tensor<double>({1, n}, 3, 0.3);
  const auto frames = random_tensor<double>({cfg.visual_dim, 4}, 4);
  Tape<double> tape(false);
  const auto out = forward<double>(tape, m, wave, frames);
  const std::size_t len = cfg.latent_length(n);
  EXPECT_EQ(out.latent.value().shape(), (std::vector<std::size_t>{cfg.hidden, len}));
  EXPECT_EQ(out.waveform.value().cols(), (len - 1) * cfg.stride + cfg.kernel);
  ASSERT_EQ(out.blocks.size(), cfg.blocks);
  for (const auto& b : out.blocks) {
    EXPECT_EQ(b.e_c.value().shape(), (std::vector<std::size_t>{cfg.hidden, 1}));
    EXPECT_FALSE(b.a_c.has_value());
    for (double v : b.mask.value().values()) EXPECT_GE(v, 0.0);
  }
}

TEST(Forward, AnchorAttentionContract) {
  ModelConfig cfg = small_config();
  auto m = ModelParams<double>::init(cfg, 7);
  const auto wave = random_tensor<double>({1, 256}, 8, 0.3);
  const auto frames = random_tensor<double>({cfg.visual_dim, 4}, 9);
  Tape<double> tape(false);
  std::vector<Var<double>> anchors;
  for (std::size_t r = 0; r < cfg.blocks; ++r) anchors.push_back(tape.constant(random_tensor<double>({cfg.hidden, 1}, 10 + r)));
  const auto out = forward<double>(tape, m, wave, frames, anchors);
  for (std::size_t r = 0; r < cfg.blocks; ++r) {
    const auto& b = out.blocks[r];
    ASSERT_TRUE(b.a_c && b.a_a && b.e_m);
    const Tensor<double>& ac = b.a_c->value();
    const Tensor<double>& em = b.e_m->value();
    for (std::size_t t = 0; t < ac.cols(); ++t) {
      EXPECT_NEAR(ac[t] + b.a_a->value()[t], 1.0, 1e-12);
      for (std::size_t h = 0; h < cfg.hidden; ++h) {
        const double ec = b.e_c.value()[h], ea = anchors[r].value()[h];
        EXPECT_GE(em(h, t), std::min(ec, ea) - 1e-12);
        EXPECT_LE(em(h, t), std::max(ec, ea) + 1e-12);
        EXPECT_NEAR(em(h, t), ac[t] * ec + (1.0 - ac[t]) * ea, 1e-12);
      }
    }
  }
  std::vector<Var<double>> one{anchors[0]};
  EXPECT_THROW(forward<double>(tape, m, wave, frames, one), DimensionError);
}

TEST(Forward, AnchorEqualToCurrentLeavesConditioningUnchanged) {
  ModelConfig cfg = small_config();
  const auto wave = random_tensor<double>({1, 256}, 13, 0.3);
  const auto frames = random_tensor<double>({cfg.visual_dim, 4}, 14);
  // With one block the anchor can be set to that block's own e_c.
  cfg.blocks = 1;
  auto m1 = ModelParams<double>::init(cfg, 12);
  Tape<double> t1(false);
  const auto ref = forward<double>(t1, m1, wave, frames);
  std::vector<Var<double>> anchors{t1.constant(ref.blocks[0].e_c.value())};
  const auto fused = forward<double>(t1, m1, wave, frames, anchors);
  const auto& a = ref.waveform.value();
  const auto& b = fused.waveform.value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(EncodeVisual, RepeatsFramesAndChecksAlignment) {
  ModelConfig cfg = small_config();
  const std::size_t u = cfg.upsample();
  ASSERT_EQ(u, 16u);
  auto m = ModelParams<double>::init(cfg, 15);
  const auto frames = random_tensor<double>({cfg.visual_dim, 3}, 16);
  Tape<double> tape(false);
  const Tensor<double> v = encode_visual(tape, m, frames, 40, 5).value();
  const Tensor<double> p = linear(tape.constant(frames), tape.constant(m.visual_w.value), tape.constant(m.visual_b.value)).value();
  for (std::size_t l = 0; l < 40; ++l)
    for (std::size_t h = 0; h < cfg.hidden; ++h) EXPECT_EQ(v(h, l), p(h, (l + 5) / u));
  EXPECT_THROW(encode_visual(tape, m, frames, 80, 0), AlignmentError);
  EXPECT_THROW(encode_visual(tape, m, frames, 40, u), AlignmentError);
  EXPECT_THROW(encode_visual(tape, m, Tensor<double>(cfg.visual_dim + 1, 3), 40), DimensionError);
}

TEST(MakeWindow, SelectsOverlappingFramesOnly) {
  ModelConfig cfg = small_config();
  const std::size_t spf = cfg.samples_per_frame();  // 64
  const auto audio = random_signal<double>(640, 17);
  Tensor<double> frames(cfg.visual_dim, 10);
  for (std::size_t f = 0; f < 10; ++f)
    for (std::size_t d = 0; d < cfg.visual_dim; ++d) frames(d, f) = static_cast<double>(f + 1);
  // [100, 300): frames 1 (64..127) through 4 (256..319).
  const auto w = make_window<double>(cfg, audio, 0, frames, 0, 100, 300);
  EXPECT_EQ(w.length, 200u);
  EXPECT_EQ(w.waveform.cols(), cfg.valid_length(200));
  EXPECT_EQ(w.visual_offset, (100 - spf) / cfg.stride);
  EXPECT_EQ(w.frames(0, 0), 2.0);
  for (std::size_t f = 0; f < w.frames.cols(); ++f) {
    if (f + 1 < 5) EXPECT_EQ(w.frames(0, f), static_cast<double>(f + 2));
    else EXPECT_EQ(w.frames(0, f), 0.0);
  }
  for (std::size_t i = 0; i < 200; ++i) EXPECT_EQ(w.waveform[i], audio[100 + i]);
  for (std::size_t i = 200; i < w.waveform.cols(); ++i) EXPECT_EQ(w.waveform[i], 0.0);
  EXPECT_THROW(make_window<double>(cfg, audio, 0, frames, 0, 300, 700), ContractError);
}

TEST(ExtractOffline, KeepsInputLength) {
  ModelConfig cfg = small_config();
  auto m = ModelParams<float>::init(cfg, 18);
  for (std::size_t n : {8u, 100u, 256u, 301u}) {
    const auto audio = random_signal<float>(n, n);
    const Tensor<float> frames(cfg.visual_dim, (n + 63) / 64);
    EXPECT_EQ(extract_offline<float>(m, audio, frames).size(), n);
  }
}

TEST(ExtractOffline, FloatTracksDouble) {
  ModelConfig cfg = small_config();
  auto md = ModelParams<double>::init(cfg, 19);
  auto mf = md.cast<float>();
  const auto ad = random_signal<double>(256, 20);
  const std::vector<float> af(ad.begin(), ad.end());
  const auto fd = random_tensor<double>({cfg.visual_dim, 4}, 21);
  const auto yd = extract_offline<double>(md, ad, fd);
  const auto yf = extract_offline<float>(mf, af, fd.cast<float>());
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-4);
}

}  // namespace
}  // namespace momuse
