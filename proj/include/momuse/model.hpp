// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Extraction network: audio encoder/decoder, visual adapter and a chain of
// extractor blocks. Each block fuses the previous estimate with the visual
// stream into a speaker embedding, optionally blends it with a stored anchor
// embedding through additive attention, and predicts a non-negative mask
// over the mixture latent.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "momuse/error.hpp"
#include "momuse/numerics.hpp"
#include "momuse/random.hpp"

namespace momuse {

struct ModelConfig {
  std::size_t hidden = 16;       // H, feature channels
  std::size_t kernel = 40;       // K, encoder kernel in samples
  std::size_t stride = 20;       // S, encoder hop in samples
  std::size_t blocks = 4;        // R, extractor blocks
  std::size_t visual_dim = 8;    // F_v, feature dim per video frame
  std::size_t tcn_depth = 2;     // residual dilated blocks per mask estimator
  std::size_t speakers = 4;      // N, classifier classes
  std::size_t sample_rate = 16000;
  std::size_t video_fps = 25;
  std::size_t spk_layers = 1;    // conv layers in the speaker encoder stack
  std::size_t spk_kernel = 3;
  std::size_t tcn_kernel = 3;

  std::size_t samples_per_frame() const { return sample_rate / video_fps; }

  /// Latent steps covered by one video frame.
  std::size_t upsample() const { return samples_per_frame() / stride; }

  /// Latent length produced by the encoder for `samples` input samples.
  std::size_t latent_length(std::size_t samples) const {
    if (samples < kernel) {
      throw InputTooShortError("encoder: " + std::to_string(samples) +
                               " samples is shorter than the kernel (" + std::to_string(kernel) + ")");
    }
    return (samples - kernel) / stride + 1;
  }

  /// Smallest length >= samples that the encoder tiles without a remainder.
  std::size_t valid_length(std::size_t samples) const {
    if (samples <= kernel) return kernel;
    const std::size_t hops = (samples - kernel + stride - 1) / stride;
    return kernel + hops * stride;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ContractError("model config: " + m); };
    if (hidden < 4) fail("hidden must be >= 4");
    if (blocks < 1) fail("blocks must be >= 1");
    if (kernel < 1 || stride < 1) fail("kernel and stride must be >= 1");
    if (visual_dim < 1 || speakers < 1) fail("visual_dim and speakers must be >= 1");
    if (video_fps == 0 || sample_rate % video_fps != 0) fail("sample_rate must be a multiple of video_fps");
    if (samples_per_frame() % stride != 0 || upsample() == 0) {
      fail("sample_rate / (stride * video_fps) must be a positive integer");
    }
    if (spk_kernel % 2 == 0 || tcn_kernel % 2 == 0) fail("conv kernels must be odd");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct BlockParams {
  Param<T> spk_in_w, spk_in_b;
  std::vector<Param<T>> spk_conv_w, spk_conv_b;
  // ASEU: per-branch embedding projections and score heads, shared visual
  // projection.
  Param<T> aseu_cur_w, aseu_cur_b, aseu_anc_w, aseu_anc_b, aseu_vis_w, aseu_vis_b;
  Param<T> aseu_cur_score_w, aseu_cur_score_b, aseu_anc_score_w, aseu_anc_score_b;
  Param<T> mask_in_w, mask_in_b;
  std::vector<Param<T>> tcn_w, tcn_b;
  Param<T> mask_out_w, mask_out_b;
  Param<T> classifier;  // [N x H]

  template <typename F>
  void visit(F&& f) {
    f(spk_in_w), f(spk_in_b);
    for (std::size_t j = 0; j < spk_conv_w.size(); ++j) f(spk_conv_w[j]), f(spk_conv_b[j]);
    f(aseu_cur_w), f(aseu_cur_b), f(aseu_anc_w), f(aseu_anc_b), f(aseu_vis_w), f(aseu_vis_b);
    f(aseu_cur_score_w), f(aseu_cur_score_b), f(aseu_anc_score_w), f(aseu_anc_score_b);
    f(mask_in_w), f(mask_in_b);
    for (std::size_t d = 0; d < tcn_w.size(); ++d) f(tcn_w[d]), f(tcn_b[d]);
    f(mask_out_w), f(mask_out_b);
    f(classifier);
  }
};

/// True for parameters belonging to the anchor-attention sub-module.
inline bool is_aseu_param(const std::string& name) {
  return name.find(".aseu.") != std::string::npos;
}

template <typename T>
class ModelParams {
 public:
  ModelConfig config;
  Param<T> audio_enc;  // [H x 1 x K]
  Param<T> audio_dec;  // [H x 1 x K]
  Param<T> visual_w;   // [H x F_v]
  Param<T> visual_b;   // [H]
  std::vector<BlockParams<T>> blocks;

  /// Builds every parameter with uniform +-1/sqrt(fan_in) weights drawn
  /// from `seed`. Values are drawn in double and rounded to T, so float and
  /// double models from the same seed agree up to rounding.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams m;
    m.config = cfg;
    const std::size_t h = cfg.hidden;
    m.audio_enc = Param<T>("audio_encoder.weight", Tensor<T>({h, 1, cfg.kernel}));
    m.audio_dec = Param<T>("audio_decoder.weight", Tensor<T>({h, 1, cfg.kernel}));
    m.visual_w = Param<T>("visual_adapter.weight", Tensor<T>({h, cfg.visual_dim}));
    m.visual_b = Param<T>("visual_adapter.bias", Tensor<T>({h}));
    m.blocks.resize(cfg.blocks);
    for (std::size_t r = 0; r < cfg.blocks; ++r) {
      BlockParams<T>& b = m.blocks[r];
      const std::string p = "block" + std::to_string(r) + ".";
      auto mat = [](const std::string& n, std::size_t o, std::size_t i) { return Param<T>(n, Tensor<T>({o, i})); };
      auto vec = [](const std::string& n, std::size_t o) { return Param<T>(n, Tensor<T>({o})); };
      auto ker = [](const std::string& n, std::size_t o, std::size_t i, std::size_t k) {
        return Param<T>(n, Tensor<T>({o, i, k}));
      };
      b.spk_in_w = mat(p + "speaker_encoder.in.weight", h, 2 * h);
      b.spk_in_b = vec(p + "speaker_encoder.in.bias", h);
      for (std::size_t j = 0; j < cfg.spk_layers; ++j) {
        const std::string q = p + "speaker_encoder.conv" + std::to_string(j);
        b.spk_conv_w.push_back(ker(q + ".weight", h, h, cfg.spk_kernel));
        b.spk_conv_b.push_back(vec(q + ".bias", h));
      }
      b.aseu_cur_w = mat(p + "aseu.current.weight", h, h);
      b.aseu_cur_b = vec(p + "aseu.current.bias", h);
      b.aseu_anc_w = mat(p + "aseu.anchor.weight", h, h);
      b.aseu_anc_b = vec(p + "aseu.anchor.bias", h);
      b.aseu_vis_w = mat(p + "aseu.visual.weight", h, h);
      b.aseu_vis_b = vec(p + "aseu.visual.bias", h);
      b.aseu_cur_score_w = mat(p + "aseu.current_score.weight", 1, h);
      b.aseu_cur_score_b = vec(p + "aseu.current_score.bias", 1);
      b.aseu_anc_score_w = mat(p + "aseu.anchor_score.weight", 1, h);
      b.aseu_anc_score_b = vec(p + "aseu.anchor_score.bias", 1);
      b.mask_in_w = mat(p + "mask.in.weight", h, 2 * h);
      b.mask_in_b = vec(p + "mask.in.bias", h);
      for (std::size_t d = 0; d < cfg.tcn_depth; ++d) {
        const std::string q = p + "mask.tcn" + std::to_string(d);
        b.tcn_w.push_back(ker(q + ".weight", h, h, cfg.tcn_kernel));
        b.tcn_b.push_back(vec(q + ".bias", h));
      }
      b.mask_out_w = mat(p + "mask.out.weight", h, h);
      b.mask_out_b = vec(p + "mask.out.bias", h);
      b.classifier = mat(p + "classifier.weight", cfg.speakers, h);
    }
    Rng rng(seed);
    m.visit([&](Param<T>& prm) { reseed_param(prm, cfg, rng); });
    return m;
  }

  /// Visits parameters in a fixed order (used for checkpoints and Adam).
  template <typename F>
  void visit(F&& f) {
    f(audio_enc), f(audio_dec), f(visual_w), f(visual_b);
    for (auto& b : blocks) b.visit(f);
  }

  std::vector<Param<T>*> all() {
    std::vector<Param<T>*> out;
    visit([&](Param<T>& p) { out.push_back(&p); });
    return out;
  }

  std::vector<Param<T>*> aseu() {
    std::vector<Param<T>*> out;
    visit([&](Param<T>& p) { if (is_aseu_param(p.name)) out.push_back(&p); });
    return out;
  }

  Param<T>* find(const std::string& name) {
    Param<T>* hit = nullptr;
    visit([&](Param<T>& p) { if (p.name == name) hit = &p; });
    return hit;
  }

  std::size_t count() {
    std::size_t n = 0;
    visit([&](Param<T>& p) { n += p.value.size(); });
    return n;
  }

  void zero_grads() {
    visit([](Param<T>& p) { p.zero_grad(); });
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::init(config, 0);
    auto src = const_cast<ModelParams*>(this)->all();
    auto dst = out.all();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
    return out;
  }

  /// Fan-in used for the uniform init bound of a parameter.
  static std::size_t fan_in(const Param<T>& p, const ModelConfig& cfg) {
    const auto& s = p.value.shape();
    if (p.name == "audio_decoder.weight") return cfg.hidden;
    if (s.size() == 3) return s[1] * s[2];
    if (s.size() == 2) return s[1];
    // Biases share the bound of their weight, whose fan-in is not visible
    // here; the input width is recovered from the sibling layer geometry.
    if (p.name == "visual_adapter.bias") return cfg.visual_dim;
    if (p.name.find(".in.bias") != std::string::npos) return 2 * cfg.hidden;
    if (p.name.find(".conv") != std::string::npos) return cfg.hidden * cfg.spk_kernel;
    if (p.name.find(".tcn") != std::string::npos) return cfg.hidden * cfg.tcn_kernel;
    return cfg.hidden;
  }

  static void reseed_param(Param<T>& p, const ModelConfig& cfg, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in(p, cfg)));
    for (auto& v : p.value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    p.zero_grad();
  }
};

// ---------------------------------------------------------------------------
// Sub-networks
// ---------------------------------------------------------------------------

/// Strided conv + relu. y: [1 x T] waveform -> [H x L].
template <typename T>
Var<T> encode_audio(Tape<T>& tape, ModelParams<T>& m, const Tensor<T>& y) {
  if (y.ndim() != 2 || y.rows() != 1) throw DimensionError("encode_audio: waveform must be [1 x T]");
  (void)m.config.latent_length(y.cols());
  return relu(conv1d(tape.constant(y), tape.param(m.audio_enc), m.config.stride));
}

/// Transposed conv back to a [1 x (L-1)*S+K] waveform.
template <typename T>
Var<T> decode_audio(Tape<T>& tape, ModelParams<T>& m, Var<T> latent) {
  return conv_transpose1d(latent, tape.param(m.audio_dec), m.config.stride);
}

/// Maps each visual frame to H channels and holds it for `upsample()` latent
/// steps. `offset` latent steps are dropped from the front so a window that
/// starts inside a frame stays aligned; the result is cut or zero-padded to
/// exactly `latent_len` columns.
template <typename T>
Var<T> encode_visual(Tape<T>& tape, ModelParams<T>& m, const Tensor<T>& frames, std::size_t latent_len,
                     std::size_t offset = 0) {
  const ModelConfig& cfg = m.config;
  if (frames.ndim() != 2 || frames.rows() != cfg.visual_dim) {
    throw DimensionError("encode_visual: frames must be [" + std::to_string(cfg.visual_dim) +
                         " x L_frames], got " + detail::shape_str(frames.shape()));
  }
  const std::size_t u = cfg.upsample();
  const std::size_t nf = frames.cols();
  const auto covered = static_cast<long long>(nf * u) - static_cast<long long>(offset);
  if (offset >= u || std::llabs(covered - static_cast<long long>(latent_len)) > static_cast<long long>(u)) {
    throw AlignmentError("encode_visual: " + std::to_string(nf) + " frames x " + std::to_string(u) +
                         " steps (offset " + std::to_string(offset) + ") cannot cover " +
                         std::to_string(latent_len) + " latent steps");
  }
  Var<T> proj = linear(tape.constant(frames), tape.param(m.visual_w), tape.param(m.visual_b));
  const std::size_t h = cfg.hidden;
  Tensor<T> out(h, latent_len);
  const Tensor<T>& pv = proj.value();
  for (std::size_t l = 0; l < latent_len; ++l) {
    const std::size_t f = (l + offset) / u;
    if (f >= nf) break;
    for (std::size_t r = 0; r < h; ++r) out(r, l) = pv(r, f);
  }
  const std::size_t pid = proj.id;
  return tape.record(std::move(out), {proj}, [pid, h, latent_len, offset, u, nf](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gp = tp.grad(pid);
    for (std::size_t l = 0; l < latent_len; ++l) {
      const std::size_t f = (l + offset) / u;
      if (f >= nf) break;
      for (std::size_t r = 0; r < h; ++r) gp(r, f) += g(r, l);
    }
  });
}

/// Fuses the previous estimate and the visual stream into an [H x 1]
/// speaker embedding: 1x1 conv, tanh, conv stack, mean over time.
template <typename T>
Var<T> speaker_encode(Tape<T>& tape, BlockParams<T>& b, Var<T> x_prev, Var<T> visual) {
  detail::require_same(x_prev.value(), visual.value(), "speaker_encode");
  Var<T> h = tanh(linear(concat_channels(x_prev, visual), tape.param(b.spk_in_w), tape.param(b.spk_in_b)));
  for (std::size_t j = 0; j < b.spk_conv_w.size(); ++j) {
    h = tanh(dilated_conv(h, tape.param(b.spk_conv_w[j]), tape.param(b.spk_conv_b[j]), 1));
  }
  return mean_over_time(h);
}

enum class Branch { Current, Anchor };

namespace detail {

template <typename T>
Var<T> aseu_score_head(Tape<T>& tape, BlockParams<T>& b, Branch branch, Var<T> projected_e, Var<T> projected_v) {
  Var<T> hidden = tanh(add(projected_e, projected_v));
  if (branch == Branch::Current) {
    return linear(hidden, tape.param(b.aseu_cur_score_w), tape.param(b.aseu_cur_score_b));
  }
  return linear(hidden, tape.param(b.aseu_anc_score_w), tape.param(b.aseu_anc_score_b));
}

template <typename T>
Var<T> aseu_project_embedding(Tape<T>& tape, BlockParams<T>& b, Branch branch, Var<T> e) {
  if (branch == Branch::Current) return linear(e, tape.param(b.aseu_cur_w), tape.param(b.aseu_cur_b));
  return linear(e, tape.param(b.aseu_anc_w), tape.param(b.aseu_anc_b));
}

}  // namespace detail

/// Additive attention scores s = Linear_out(tanh(Linear_e(E) + Linear_v(V))).
/// E_psi, V: [H x L] -> [1 x L].
template <typename T>
Var<T> aseu_scores(Tape<T>& tape, BlockParams<T>& b, Branch branch, Var<T> e_seq, Var<T> visual) {
  detail::require_same(e_seq.value(), visual.value(), "aseu_scores");
  Var<T> pv = linear(visual, tape.param(b.aseu_vis_w), tape.param(b.aseu_vis_b));
  return detail::aseu_score_head(tape, b, branch, detail::aseu_project_embedding(tape, b, branch, e_seq), pv);
}

/// Per-step two-way softmax of the current/anchor scores -> (a_c, a_a).
template <typename T>
std::pair<Var<T>, Var<T>> aseu_weights(Var<T> s_current, Var<T> s_anchor) {
  return softmax_over_pair(s_current, s_anchor);
}

/// E_m = a_c (x) E_c + a_a (x) E_a, weights broadcast down the channels.
template <typename T>
Var<T> fuse_momentum(Var<T> a_c, Var<T> a_a, Var<T> e_current, Var<T> e_anchor) {
  detail::require_same(e_current.value(), e_anchor.value(), "fuse_momentum");
  return add(mul_rows(a_c, e_current), mul_rows(a_a, e_anchor));
}

/// Non-negative mask from the mixture latent and a conditioning sequence.
template <typename T>
Var<T> estimate_mask(Tape<T>& tape, BlockParams<T>& b, Var<T> mixture, Var<T> cond) {
  detail::require_same(mixture.value(), cond.value(), "estimate_mask");
  Var<T> h = linear(concat_channels(mixture, cond), tape.param(b.mask_in_w), tape.param(b.mask_in_b));
  for (std::size_t d = 0; d < b.tcn_w.size(); ++d) {
    h = add(h, dilated_conv(tanh(h), tape.param(b.tcn_w[d]), tape.param(b.tcn_b[d]), std::size_t{1} << d));
  }
  return relu(linear(h, tape.param(b.mask_out_w), tape.param(b.mask_out_b)));
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

template <typename T>
struct BlockOutput {
  Var<T> x_hat;   // [H x L]
  Var<T> e_c;     // [H x 1]
  Var<T> mask;    // [H x L]
  std::optional<Var<T>> a_c, a_a;  // [1 x L], only with anchors
  std::optional<Var<T>> e_m;       // [H x L], only with anchors
};

template <typename T>
struct ForwardOutput {
  Var<T> waveform;  // [1 x (L-1)*S+K]
  Var<T> latent;    // Y
  Var<T> visual;    // V
  std::vector<BlockOutput<T>> blocks;
};

/// One pass over a window. Without anchors every block conditions its mask
/// on the repeated current embedding; with anchors (one [H x 1] per block)
/// the attention-fused sequence E_m is used instead. Masks always apply to
/// the mixture latent Y.
template <typename T>
ForwardOutput<T> forward(Tape<T>& tape, ModelParams<T>& m, const Tensor<T>& waveform, const Tensor<T>& frames,
                         std::span<const Var<T>> anchors = {}, std::size_t visual_offset = 0) {
  const ModelConfig& cfg = m.config;
  if (!anchors.empty() && anchors.size() != cfg.blocks) {
    throw DimensionError("forward: expected " + std::to_string(cfg.blocks) + " anchors, got " +
                         std::to_string(anchors.size()));
  }
  ForwardOutput<T> out;
  out.latent = encode_audio(tape, m, waveform);
  const std::size_t len = out.latent.value().cols();
  out.visual = encode_visual(tape, m, frames, len, visual_offset);
  Var<T> x_prev = out.latent;
  for (std::size_t r = 0; r < cfg.blocks; ++r) {
    BlockParams<T>& b = m.blocks[r];
    BlockOutput<T> bo;
    bo.e_c = speaker_encode(tape, b, x_prev, out.visual);
    Var<T> e_cur = repeat_columns(bo.e_c, len);
    Var<T> cond = e_cur;
    if (!anchors.empty()) {
      const Tensor<T>& av = anchors[r].value();
      if (av.rows() != cfg.hidden || av.cols() != 1) {
        throw DimensionError("forward: anchor must be [H x 1], got " + detail::shape_str(av.shape()));
      }
      Var<T> e_anc = repeat_columns(anchors[r], len);
      Var<T> pv = linear(out.visual, tape.param(b.aseu_vis_w), tape.param(b.aseu_vis_b));
      // Linear maps commute with column repetition, so the embeddings are
      // projected once and repeated afterwards.
      Var<T> pc = repeat_columns(detail::aseu_project_embedding(tape, b, Branch::Current, bo.e_c), len);
      Var<T> pa = repeat_columns(detail::aseu_project_embedding(tape, b, Branch::Anchor, anchors[r]), len);
      Var<T> s_c = detail::aseu_score_head(tape, b, Branch::Current, pc, pv);
      Var<T> s_a = detail::aseu_score_head(tape, b, Branch::Anchor, pa, pv);
      auto [a_c, a_a] = aseu_weights(s_c, s_a);
      bo.a_c = a_c;
      bo.a_a = a_a;
      bo.e_m = fuse_momentum(a_c, a_a, e_cur, e_anc);
      cond = *bo.e_m;
    }
    bo.mask = estimate_mask(tape, b, out.latent, cond);
    bo.x_hat = mul(bo.mask, out.latent);
    x_prev = bo.x_hat;
    out.blocks.push_back(bo);
  }
  out.waveform = decode_audio(tape, m, x_prev);
  return out;
}

// ---------------------------------------------------------------------------
// Window slicing shared by streaming inference and segment training
// ---------------------------------------------------------------------------

template <typename T>
struct WindowInput {
  Tensor<T> waveform;       // [1 x valid_length], zero-padded at the end
  Tensor<T> frames;         // [F_v x n] frames overlapping the window
  std::size_t visual_offset = 0;
  std::size_t length = 0;   // unpadded window length in samples
};

/// Cuts samples [start, end) of `audio` and the video frames whose spans
/// intersect it (floor on start, ceil on end). Frames that have not been
/// supplied are zero. `frame_origin` is the index of frames.col(0) and
/// `audio_origin` the sample index of audio[0].
template <typename T>
WindowInput<T> make_window(const ModelConfig& cfg, std::span<const T> audio, std::size_t audio_origin,
                           const Tensor<T>& frames, std::size_t frame_origin, std::size_t start, std::size_t end) {
  if (end <= start || start < audio_origin || end - audio_origin > audio.size()) {
    throw ContractError("make_window: range [" + std::to_string(start) + ", " + std::to_string(end) +
                        ") is not buffered");
  }
  WindowInput<T> w;
  w.length = end - start;
  const std::size_t padded = cfg.valid_length(w.length);
  w.waveform = Tensor<T>(1, padded);
  std::copy_n(audio.begin() + static_cast<std::ptrdiff_t>(start - audio_origin), w.length, w.waveform.data());

  const std::size_t spf = cfg.samples_per_frame();
  const std::size_t f0 = start / spf;
  w.visual_offset = (start - f0 * spf) / cfg.stride;
  // Last frame touched by the last latent step.
  const std::size_t latent = cfg.latent_length(padded);
  const std::size_t f1 = f0 + (latent - 1 + w.visual_offset) / cfg.upsample() + 1;
  w.frames = Tensor<T>(cfg.visual_dim, f1 - f0);
  // Frames past ceil(end / spf) lie outside the window and are never read.
  const std::size_t have_end = std::min(frame_origin + frames.cols(), (end + spf - 1) / spf);
  for (std::size_t f = f0; f < f1; ++f) {
    if (f < frame_origin || f >= have_end) continue;
    for (std::size_t d = 0; d < cfg.visual_dim; ++d) w.frames(d, f - f0) = frames(d, f - frame_origin);
  }
  return w;
}

/// Bank-free forward over a whole utterance, padded to a valid encoder
/// length and cropped back to the input length.
template <typename T>
std::vector<T> extract_offline(ModelParams<T>& m, std::span<const T> audio, const Tensor<T>& frames) {
  if (audio.empty()) return {};
  const WindowInput<T> w = make_window<T>(m.config, audio, 0, frames, 0, 0, audio.size());
  Tape<T> tape(false);
  const ForwardOutput<T> out = forward(tape, m, w.waveform, w.frames, {}, w.visual_offset);
  const Tensor<T>& wave = out.waveform.value();
  return std::vector<T>(wave.data(), wave.data() + w.length);
}

}  // namespace momuse
