// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include "momuse/streaming.hpp"
#include "test_util.hpp"

namespace momuse {
namespace {

using testing::narrow_config;
using testing::random_signal;
using testing::random_tensor;

std::size_t expected_steps(std::size_t total, std::size_t init, std::size_t shift) {
  return 1 + (total - init + shift - 1) / shift;
}

TEST(PlanWindows, ThreeSecondsIsElevenSteps) {
  StreamConfig cfg;
  const auto plan = plan_windows(48000, cfg);
  ASSERT_EQ(plan.size(), 11u);
  EXPECT_EQ(plan.size(), expected_steps(48000, 16000, 3200));
  EXPECT_EQ(plan[0].start, 0u);
  EXPECT_EQ(plan[0].end, 16000u);
  // Window grows to l_win, then slides.
  EXPECT_EQ(plan[1].start, 0u);
  EXPECT_EQ(plan[1].end, 19200u);
  EXPECT_EQ(plan[10].end, 48000u);
  EXPECT_EQ(plan[10].start, 48000u - 43200u);
  for (std::size_t i = 1; i < plan.size(); ++i) {
    EXPECT_EQ(plan[i].step, i + 1);
    EXPECT_EQ(plan[i].emit_start, plan[i - 1].emit_end);
    EXPECT_LE(plan[i].end - plan[i].start, 43200u);
    EXPECT_EQ(plan[i].emit_end, plan[i].end);
  }
}

TEST(PlanWindows, EmitSpansPartitionTheInput) {
  StreamConfig cfg;
  for (double seconds : {1.0, 1.07, 3.0, 10.0, 4.33}) {
    const auto total = static_cast<std::size_t>(std::llround(seconds * 16000));
    const auto plan = plan_windows(total, cfg);
    EXPECT_EQ(plan.size(), expected_steps(total, 16000, 3200)) << seconds;
    std::size_t covered = 0;
    for (const auto& w : plan) {
      EXPECT_EQ(w.emit_start, covered);
      covered = w.emit_end;
    }
    EXPECT_EQ(covered, total);
  }
  EXPECT_THROW(plan_windows(15999, cfg), InputTooShortError);
}

TEST(StreamConfig, RejectsFractionalSamplesAndBadOrder) {
  StreamConfig cfg;
  cfg.l_shift = 0.00001;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = StreamConfig{};
  cfg.l_shift = 3.0;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = StreamConfig{};
  cfg.g_min = 5.0;
  EXPECT_THROW(cfg.validate(), ContractError);
  EXPECT_EQ(normalization_from_string("none"), Normalization::None);
  EXPECT_THROW(normalization_from_string("rms"), ContractError);
}

TEST(OverlapGain, LeastSquaresAndClamp) {
  StreamConfig cfg;
  const std::vector<double> prev{1.0, -2.0, 0.5};
  const std::vector<double> cur{0.5, -1.0, 0.25};
  EXPECT_NEAR(overlap_gain<double>(prev, cur, cfg), 2.0, 1e-7);
  const std::vector<double> tiny{0.01, -0.02, 0.005};
  EXPECT_DOUBLE_EQ(overlap_gain<double>(prev, tiny, cfg), cfg.g_max);
  const std::vector<double> flipped{-0.5, 1.0, -0.25};
  EXPECT_DOUBLE_EQ(overlap_gain<double>(prev, flipped, cfg), cfg.g_min);
  EXPECT_DOUBLE_EQ(overlap_gain<double>({}, {}, cfg), 1.0);
}

TEST(NormalizeChunk, ScalesOnlyWithOverlapRescale) {
  StreamConfig cfg;
  const std::vector<double> prev{2.0, 2.0, 2.0, 2.0};  // samples 0..3
  const std::vector<double> cur{1.0, 1.0, 1.0, 3.0};   // samples 2..5
  double g = 0.0;
  auto out = normalize_chunk<double>(cur, 2, prev, 0, 4, 6, cfg, &g);
  EXPECT_NEAR(g, 2.0, 1e-7);
  EXPECT_NEAR(out[0], 2.0, 1e-6);
  EXPECT_NEAR(out[1], 6.0, 1e-6);
  cfg.normalization = Normalization::None;
  out = normalize_chunk<double>(cur, 2, prev, 0, 4, 6, cfg, &g);
  EXPECT_EQ(g, 1.0);
  EXPECT_EQ(out, (std::vector<double>{1.0, 3.0}));
  EXPECT_THROW(normalize_chunk<double>(cur, 2, prev, 0, 1, 6, cfg), ContractError);
}

struct Fixture : ::testing::Test {
  ModelConfig cfg = narrow_config();
  ModelParams<float> m = ModelParams<float>::init(cfg, 3);

  Tensor<float> frames_for(std::size_t samples, std::uint64_t seed) {
    return random_tensor<float>({cfg.visual_dim, (samples + 639) / 640}, seed);
  }
};

using StreamEngineTest = Fixture;

TEST_F(StreamEngineTest, OutputLengthEqualsInputLength) {
  for (double seconds : {1.0, 1.07, 3.0, 10.0}) {
    const auto n = static_cast<std::size_t>(std::llround(seconds * 16000));
    const auto audio = random_signal<float>(n, n);
    std::vector<EmittedChunk<float>> chunks;
    const auto out = stream_extract<float>(m, audio, frames_for(n, 7), StreamConfig{}, kDefaultTheta, true, &chunks);
    EXPECT_EQ(out.size(), n) << seconds;
    const auto plan = plan_windows(n, StreamConfig{});
    ASSERT_EQ(chunks.size(), plan.size());
    for (std::size_t i = 0; i < plan.size(); ++i) {
      EXPECT_EQ(chunks[i].start, plan[i].emit_start);
      EXPECT_EQ(chunks[i].samples.size(), plan[i].emit_end - plan[i].emit_start);
    }
    EXPECT_TRUE(chunks[0].initialized);
    for (std::size_t i = 1; i < chunks.size(); ++i) EXPECT_EQ(chunks[i].decisions.size(), cfg.blocks);
  }
}

TEST_F(StreamEngineTest, SampleBySampleMatchesBulk) {
  const std::size_t spf = cfg.samples_per_frame();
  for (double seconds : {1.07, 3.0}) {
    const auto n = static_cast<std::size_t>(std::llround(seconds * 16000));
    const auto audio = random_signal<float>(n, 11);
    const Tensor<float> frames = frames_for(n, 12);
    const auto bulk = stream_extract<float>(m, audio, frames, StreamConfig{});

    StreamEngine<float> engine(m, StreamConfig{});
    std::vector<float> out;
    for (std::size_t s = 0; s < n; ++s) {
      // Each frame arrives with its first sample.
      Tensor<float> fr(cfg.visual_dim, 0);
      if (s % spf == 0) {
        fr = Tensor<float>(cfg.visual_dim, 1);
        for (std::size_t d = 0; d < cfg.visual_dim; ++d) fr(d, 0) = frames(d, s / spf);
      }
      for (const auto& c : engine.push(std::span<const float>(&audio[s], 1), fr))
        out.insert(out.end(), c.samples.begin(), c.samples.end());
    }
    for (const auto& c : engine.flush()) out.insert(out.end(), c.samples.begin(), c.samples.end());
    EXPECT_EQ(out, bulk) << seconds;
  }
}

TEST_F(StreamEngineTest, IrregularChunksMatchBulk) {
  const std::size_t n = 40000, spf = cfg.samples_per_frame();
  const auto audio = random_signal<float>(n, 13);
  const Tensor<float> frames = frames_for(n, 14);
  const auto bulk = stream_extract<float>(m, audio, frames, StreamConfig{});
  StreamEngine<float> engine(m, StreamConfig{});
  std::vector<float> out;
  Rng rng(15);
  std::size_t s = 0, f = 0;
  while (s < n) {
    const std::size_t take = std::min<std::size_t>(n - s, static_cast<std::size_t>(rng.uniform_int(1, 5000)));
    const std::size_t f_end = std::min(frames.cols(), (s + take + spf - 1) / spf);
    Tensor<float> fr(cfg.visual_dim, f_end - f);
    for (std::size_t k = f; k < f_end; ++k)
      for (std::size_t d = 0; d < cfg.visual_dim; ++d) fr(d, k - f) = frames(d, k);
    for (const auto& c : engine.push(std::span<const float>(&audio[s], take), fr))
      out.insert(out.end(), c.samples.begin(), c.samples.end());
    s += take;
    f = f_end;
  }
  for (const auto& c : engine.flush()) out.insert(out.end(), c.samples.begin(), c.samples.end());
  EXPECT_EQ(out, bulk);
}

TEST_F(StreamEngineTest, FlushResidue) {
  // 1.0 + 0.2 s exactly: nothing left for flush.
  StreamEngine<float> exact(m, StreamConfig{});
  const auto a = random_signal<float>(19200, 16);
  EXPECT_EQ(exact.push(a, frames_for(19200, 17)).size(), 2u);
  EXPECT_TRUE(exact.flush().empty());

  // 0.07 s residue after the last full step: one final 1120-sample chunk.
  StreamEngine<float> residue(m, StreamConfig{});
  const auto b = random_signal<float>(20320, 18);
  EXPECT_EQ(residue.push(b, frames_for(20320, 19)).size(), 2u);
  const auto tail = residue.flush();
  ASSERT_EQ(tail.size(), 1u);
  EXPECT_EQ(tail[0].samples.size(), 1120u);
  EXPECT_EQ(tail[0].start, 19200u);
  EXPECT_EQ(residue.emitted(), 20320u);

  StreamEngine<float> empty(m, StreamConfig{});
  EXPECT_TRUE(empty.flush().empty());
  EXPECT_THROW(empty.push(a), StateError);
}

TEST_F(StreamEngineTest, ShortInputMatchesOffline) {
  const std::size_t n = 9000;
  const auto audio = random_signal<float>(n, 20);
  const Tensor<float> frames = frames_for(n, 21);
  const auto online = stream_extract<float>(m, audio, frames, StreamConfig{});
  const auto offline = extract_offline<float>(m, audio, frames);
  EXPECT_EQ(online, offline);
}

TEST_F(StreamEngineTest, AlignmentIsChecked) {
  StreamEngine<float> engine(m, StreamConfig{});
  const auto audio = random_signal<float>(3200, 22);
  EXPECT_THROW(engine.push(audio, Tensor<float>(cfg.visual_dim, 1)), AlignmentError);
  StreamEngine<float> wrong_dim(m, StreamConfig{});
  EXPECT_THROW(wrong_dim.push(audio, Tensor<float>(cfg.visual_dim + 1, 5)), DimensionError);
  StreamConfig other;
  other.sample_rate = 8000;
  EXPECT_THROW(StreamEngine<float>(m, other), ContractError);
}

TEST_F(StreamEngineTest, WaitsForFrames) {
  StreamEngine<float> engine(m, StreamConfig{});
  const auto audio = random_signal<float>(16000, 23);
  const Tensor<float> frames = frames_for(16000, 24);
  Tensor<float> first(cfg.visual_dim, 24);
  for (std::size_t f = 0; f < 24; ++f)
    for (std::size_t d = 0; d < cfg.visual_dim; ++d) first(d, f) = frames(d, f);
  EXPECT_TRUE(engine.push(audio, first).empty());
  Tensor<float> last(cfg.visual_dim, 1);
  for (std::size_t d = 0; d < cfg.visual_dim; ++d) last(d, 0) = frames(d, 24);
  EXPECT_EQ(engine.push({}, last).size(), 1u);
}

TEST_F(StreamEngineTest, BankDisabledRunsWithoutAnchors) {
  const std::size_t n = 32000;
  const auto audio = random_signal<float>(n, 25);
  std::vector<EmittedChunk<float>> chunks;
  const auto out = stream_extract<float>(m, audio, frames_for(n, 26), StreamConfig{}, kDefaultTheta, false, &chunks);
  EXPECT_EQ(out.size(), n);
  for (const auto& c : chunks) {
    EXPECT_FALSE(c.initialized);
    EXPECT_TRUE(c.decisions.empty());
  }
}

TEST_F(StreamEngineTest, VisualAbsenceKeepsAnchorsUnlessReplaced) {
  const std::size_t n = 48000;
  const auto audio = random_signal<float>(n, 27);
  Tensor<float> frames = frames_for(n, 28);
  for (std::size_t f = 25; f < frames.cols(); ++f)
    for (std::size_t d = 0; d < cfg.visual_dim; ++d) frames(d, f) = 0.0f;
  Tensor<float> head(cfg.visual_dim, 25), rest(cfg.visual_dim, frames.cols() - 25);
  for (std::size_t d = 0; d < cfg.visual_dim; ++d) {
    for (std::size_t f = 0; f < 25; ++f) head(d, f) = frames(d, f);
    for (std::size_t f = 25; f < frames.cols(); ++f) rest(d, f - 25) = frames(d, f);
  }
  for (double theta : {0.99, 0.01}) {
    StreamEngine<float> engine(m, StreamConfig{}, theta);
    auto chunks = engine.push(std::span<const float>(audio.data(), 16000), head);
    ASSERT_EQ(chunks.size(), 1u);
    const std::vector<Tensor<float>> step1 = engine.bank().anchors();
    for (auto& c : engine.push(std::span<const float>(audio.data() + 16000, n - 16000), rest)) chunks.push_back(c);
    for (auto& c : engine.flush()) chunks.push_back(std::move(c));
    ASSERT_EQ(chunks.size(), 11u);
    bool any = false;
    for (const auto& c : chunks)
      for (const auto& d : c.decisions) any = any || d.replaced;
    if (theta > 0.9) {
      EXPECT_FALSE(any);
      EXPECT_EQ(engine.bank().anchors(), step1);
    } else {
      EXPECT_TRUE(any);
      for (std::size_t r = 0; r < cfg.blocks; ++r) EXPECT_EQ(engine.bank().last_update_step()[r], 11);
    }
  }
}

}  // namespace
}  // namespace momuse
