// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Online extraction. The first window covers [0, l_init) and seeds the
// memory bank; every later step ends l_shift further on, looks back at most
// l_win, and emits only its newest l_shift samples.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "momuse/error.hpp"
#include "momuse/model.hpp"
#include "momuse/momentum.hpp"
#include "momuse/numerics.hpp"

namespace momuse {

enum class Normalization { None, OverlapRescale };

struct StreamConfig {
  double l_init = 1.0;   // seconds
  double l_win = 2.7;
  double l_shift = 0.2;
  std::size_t sample_rate = 16000;
  Normalization normalization = Normalization::OverlapRescale;
  double g_min = 0.25;
  double g_max = 4.0;

  static std::size_t to_samples(double seconds, std::size_t rate, const char* what) {
    const double exact = seconds * static_cast<double>(rate);
    const double rounded = std::round(exact);
    if (!(seconds > 0.0) || std::abs(exact - rounded) > 1e-6) {
      throw ContractError(std::string("stream config: ") + what + " must be a positive whole number of samples");
    }
    return static_cast<std::size_t>(rounded);
  }

  std::size_t init_samples() const { return to_samples(l_init, sample_rate, "l_init"); }
  std::size_t win_samples() const { return to_samples(l_win, sample_rate, "l_win"); }
  std::size_t shift_samples() const { return to_samples(l_shift, sample_rate, "l_shift"); }

  void validate() const {
    if (sample_rate == 0) throw ContractError("stream config: sample_rate must be positive");
    const std::size_t init = init_samples(), win = win_samples(), shift = shift_samples();
    (void)init;
    if (shift > win) throw ContractError("stream config: l_shift must not exceed l_win");
    if (!(g_min > 0.0 && g_min <= g_max)) throw ContractError("stream config: need 0 < g_min <= g_max");
  }
};

inline const char* to_string(Normalization n) {
  return n == Normalization::None ? "none" : "overlap-rescale";
}

inline Normalization normalization_from_string(const std::string& s) {
  if (s == "none") return Normalization::None;
  if (s == "overlap-rescale") return Normalization::OverlapRescale;
  throw ContractError("unknown normalization '" + s + "' (expected none or overlap-rescale)");
}

struct WindowPlan {
  std::size_t step = 0;  // 1-based
  std::size_t start = 0, end = 0;
  std::size_t emit_start = 0, emit_end = 0;
};

/// Window schedule for `total` samples; the emitted spans partition
/// [0, total).
inline std::vector<WindowPlan> plan_windows(std::size_t total, const StreamConfig& cfg) {
  cfg.validate();
  const std::size_t init = cfg.init_samples(), win = cfg.win_samples(), shift = cfg.shift_samples();
  if (total < init) {
    throw InputTooShortError("plan_windows: " + std::to_string(total) + " samples is shorter than l_init (" +
                             std::to_string(init) + ")");
  }
  std::vector<WindowPlan> plan;
  plan.push_back({1, 0, init, 0, init});
  std::size_t end = init;
  while (end < total) {
    const std::size_t next = std::min(end + shift, total);
    plan.push_back({plan.size() + 1, next > win ? next - win : 0, next, end, next});
    end = next;
  }
  return plan;
}

/// Least-squares gain mapping the current window onto the previous one over
/// their shared samples, clamped to [g_min, g_max].
template <typename T>
double overlap_gain(std::span<const T> prev_overlap, std::span<const T> cur_overlap, const StreamConfig& cfg) {
  if (prev_overlap.size() != cur_overlap.size()) throw DimensionError("overlap_gain: length mismatch");
  if (prev_overlap.empty()) return 1.0;
  double pc = 0.0, cc = 0.0;
  for (std::size_t i = 0; i < cur_overlap.size(); ++i) {
    pc += static_cast<double>(prev_overlap[i]) * cur_overlap[i];
    cc += static_cast<double>(cur_overlap[i]) * cur_overlap[i];
  }
  return std::clamp(pc / (cc + 1e-8), cfg.g_min, cfg.g_max);
}

/// Scales the emit span of the current window output. Window outputs are
/// given with their absolute start sample; `prev` may be empty (first step).
template <typename T>
std::vector<T> normalize_chunk(std::span<const T> cur, std::size_t cur_start, std::span<const T> prev,
                               std::size_t prev_start, std::size_t emit_start, std::size_t emit_end,
                               const StreamConfig& cfg, double* gain_out = nullptr) {
  if (emit_start < cur_start || emit_end > cur_start + cur.size() || emit_end < emit_start) {
    throw ContractError("normalize_chunk: emit span outside the window");
  }
  double g = 1.0;
  if (cfg.normalization == Normalization::OverlapRescale && !prev.empty()) {
    const std::size_t lo = std::max(cur_start, prev_start);
    const std::size_t hi = std::min(cur_start + cur.size(), prev_start + prev.size());
    if (hi > lo) {
      g = overlap_gain<T>(prev.subspan(lo - prev_start, hi - lo), cur.subspan(lo - cur_start, hi - lo), cfg);
    }
  }
  if (gain_out) *gain_out = g;
  std::vector<T> out(emit_end - emit_start);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(g * cur[emit_start - cur_start + i]);
  return out;
}

template <typename T>
struct EmittedChunk {
  std::size_t step = 0;
  std::size_t start = 0;  // absolute sample index of samples[0]
  std::vector<T> samples;
  double gain = 1.0;
  UpdateDecision decisions;  // empty at step 1 or without a bank
  bool initialized = false;  // bank seeded on this step
};

/// Incremental engine. Audio and features may arrive in any chunking; a
/// window runs once its audio and the frames overlapping it are buffered.
template <typename T>
class StreamEngine {
 public:
  StreamEngine(ModelParams<T>& model, StreamConfig cfg, double theta = kDefaultTheta, bool use_bank = true)
      : model_(model), cfg_(cfg), bank_(theta), use_bank_(use_bank) {
    cfg_.validate();
    if (cfg_.sample_rate != model.config.sample_rate) {
      throw ContractError("stream: sample rate " + std::to_string(cfg_.sample_rate) + " does not match the model (" +
                          std::to_string(model.config.sample_rate) + ")");
    }
    init_ = cfg_.init_samples();
    win_ = cfg_.win_samples();
    shift_ = cfg_.shift_samples();
    spf_ = model.config.samples_per_frame();
  }

  /// frames: [F_v x n] features continuing the previously pushed ones.
  std::vector<EmittedChunk<T>> push(std::span<const T> audio, const Tensor<T>& frames) {
    if (flushed_) throw StateError("stream: push after flush");
    const std::size_t fv = model_.config.visual_dim;
    if (frames.ndim() != 2 || (frames.rows() != fv && frames.size() > 0)) {
      throw DimensionError("stream: frames must be [" + std::to_string(fv) + " x n], got " +
                           detail::shape_str(frames.shape()));
    }
    audio_.insert(audio_.end(), audio.begin(), audio.end());
    received_ += audio.size();
    const std::size_t nf = frames.size() ? frames.cols() : 0;
    for (std::size_t f = 0; f < nf; ++f)
      for (std::size_t d = 0; d < fv; ++d) frames_.push_back(frames(d, f));
    frames_received_ += nf;
    const auto covered = static_cast<long long>(frames_received_ * spf_);
    if (std::llabs(covered - static_cast<long long>(received_)) > static_cast<long long>(spf_)) {
      throw AlignmentError("stream: " + std::to_string(frames_received_) + " frames vs " + std::to_string(received_) +
                           " samples differ by more than one frame");
    }
    std::vector<EmittedChunk<T>> out;
    while (true) {
      const std::size_t end = next_end();
      if (end > received_ || frames_received_ < (end + spf_ - 1) / spf_) break;
      out.push_back(run(next_start(end), end, emitted_));
    }
    return out;
  }

  std::vector<EmittedChunk<T>> push(std::span<const T> audio) {
    return push(audio, Tensor<T>(model_.config.visual_dim, 0));
  }

  /// Processes everything still buffered; missing frames count as zero.
  std::vector<EmittedChunk<T>> flush() {
    std::vector<EmittedChunk<T>> out;
    if (flushed_) return out;
    flushed_ = true;
    if (received_ == 0) return out;
    if (step_ == 0 && received_ < init_) {
      out.push_back(run(0, received_, 0));
      return out;
    }
    while (next_end() <= received_) out.push_back(run(next_start(next_end()), next_end(), emitted_));
    if (emitted_ < received_) out.push_back(run(next_start(received_), received_, emitted_));
    return out;
  }

  const MemoryBank<Tensor<T>>& bank() const { return bank_; }
  MemoryBank<Tensor<T>>& bank() { return bank_; }
  std::size_t steps() const { return step_; }
  std::size_t emitted() const { return emitted_; }
  std::size_t received() const { return received_; }

 private:
  std::size_t next_end() const { return step_ == 0 ? init_ : init_ + step_ * shift_; }
  std::size_t next_start(std::size_t end) const { return end > win_ ? end - win_ : 0; }

  EmittedChunk<T> run(std::size_t start, std::size_t end, std::size_t emit_start) {
    const ModelConfig& mc = model_.config;
    const std::size_t fv = mc.visual_dim;
    Tensor<T> frames({fv, frames_received_ - frame_origin_});
    for (std::size_t f = 0; f < frames.cols(); ++f)
      for (std::size_t d = 0; d < fv; ++d) frames(d, f) = frames_[f * fv + d];
    const WindowInput<T> w = make_window<T>(mc, audio_, audio_origin_, frames, frame_origin_, start, end);

    Tape<T> tape(false);
    std::vector<Var<T>> anchors;
    const bool with_bank = use_bank_ && !bank_.empty();
    if (with_bank)
      for (const auto& a : bank_.anchors()) anchors.push_back(tape.constant(a));
    const ForwardOutput<T> fwd = forward<T>(tape, model_, w.waveform, w.frames, anchors, w.visual_offset);

    EmittedChunk<T> chunk;
    chunk.step = ++step_;
    chunk.start = emit_start;
    if (use_bank_ && bank_.empty()) {
      std::vector<Tensor<T>> e1;
      for (const auto& b : fwd.blocks) e1.push_back(b.e_c.value());
      bank_.init(e1);
      chunk.initialized = true;
    } else if (with_bank) {
      for (std::size_t r = 0; r < fwd.blocks.size(); ++r) {
        const BlockOutput<T>& b = fwd.blocks[r];
        chunk.decisions.push_back(
            bank_.maybe_update(r, b.e_c.value(), mean_attention(b.a_c->value()), static_cast<int>(chunk.step)));
      }
    }

    const T* wave = fwd.waveform.value().data();
    std::vector<T> cur(wave, wave + w.length);
    chunk.samples = normalize_chunk<T>(cur, start, prev_, prev_start_, emit_start, end, cfg_, &chunk.gain);
    // The stored window carries the applied gain so the next overlap is
    // matched against what was actually emitted.
    if (chunk.gain != 1.0)
      for (T& v : cur) v = static_cast<T>(chunk.gain * v);
    prev_ = std::move(cur);
    prev_start_ = start;
    emitted_ = end;
    trim();
    return chunk;
  }

  void trim() {
    // The final truncated window may start up to l_shift before the next
    // planned one, so keep l_win behind the emitted edge.
    const std::size_t keep = emitted_ > win_ ? emitted_ - win_ : 0;
    if (keep > audio_origin_) {
      audio_.erase(audio_.begin(), audio_.begin() + static_cast<std::ptrdiff_t>(keep - audio_origin_));
      audio_origin_ = keep;
    }
    const std::size_t fkeep = std::min(keep / spf_, frames_received_);
    if (fkeep > frame_origin_) {
      const std::size_t fv = model_.config.visual_dim;
      frames_.erase(frames_.begin(), frames_.begin() + static_cast<std::ptrdiff_t>((fkeep - frame_origin_) * fv));
      frame_origin_ = fkeep;
    }
  }

  ModelParams<T>& model_;
  StreamConfig cfg_;
  MemoryBank<Tensor<T>> bank_;
  bool use_bank_;
  std::size_t init_ = 0, win_ = 0, shift_ = 0, spf_ = 0;

  std::vector<T> audio_;       // samples from audio_origin_
  std::size_t audio_origin_ = 0;
  std::vector<T> frames_;      // frame-major, frames from frame_origin_
  std::size_t frame_origin_ = 0;
  std::size_t received_ = 0, frames_received_ = 0;
  std::size_t step_ = 0, emitted_ = 0;
  std::vector<T> prev_;
  std::size_t prev_start_ = 0;
  bool flushed_ = false;
};

/// Runs a whole utterance through a fresh engine in one push plus flush.
template <typename T>
std::vector<T> stream_extract(ModelParams<T>& m, std::span<const T> audio, const Tensor<T>& frames,
                              const StreamConfig& cfg, double theta = kDefaultTheta, bool use_bank = true,
                              std::vector<EmittedChunk<T>>* chunks = nullptr) {
  StreamEngine<T> engine(m, cfg, theta, use_bank);
  std::vector<EmittedChunk<T>> all = engine.push(audio, frames);
  for (auto& c : engine.flush()) all.push_back(std::move(c));
  std::vector<T> out;
  out.reserve(audio.size());
  for (const auto& c : all) out.insert(out.end(), c.samples.begin(), c.samples.end());
  if (chunks) *chunks = std::move(all);
  return out;
}

}  // namespace momuse
