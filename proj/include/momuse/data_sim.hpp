// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Desk-scale data pipeline: speech-like synthetic sources, two-speaker
// mixing at a requested SNR, per-frame visual features tied to the target,
// and corruption of those features with the three visual impairments.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "momuse/error.hpp"
#include "momuse/metrics.hpp"
#include "momuse/model.hpp"
#include "momuse/numerics.hpp"
#include "momuse/random.hpp"

namespace momuse {

using Waveform = std::vector<float>;

// ---------------------------------------------------------------------------
// Synthetic speakers
// ---------------------------------------------------------------------------

/// Spectral identity of a synthetic talker.
struct SpeakerProfile {
  double f0 = 120.0;          // Hz
  double formant = 700.0;     // Hz, centre of the harmonic emphasis
  double bandwidth = 500.0;   // Hz
  double syllable_rate = 4.0; // syllables per second
};

/// Deterministic profile for speaker `id`. Neighbouring ids differ in both
/// pitch and spectral centre.
inline SpeakerProfile speaker_profile(std::size_t id) {
  SpeakerProfile p;
  p.f0 = 100.0 + 55.0 * static_cast<double>(id % 5);
  p.formant = 500.0 + 900.0 * static_cast<double>(id % 4) + 150.0 * static_cast<double>(id / 4 % 3);
  p.bandwidth = 400.0 + 100.0 * static_cast<double>(id % 3);
  p.syllable_rate = 3.5 + 0.5 * static_cast<double>(id % 4);
  return p;
}

/// Seeded sum of amplitude-modulated harmonics: syllable-shaped envelopes,
/// slow pitch drift, harmonic weights peaked around the formant, and a faint
/// noise floor. RMS is normalized to 0.1.
inline Waveform synth_speech(const SpeakerProfile& prof, std::size_t samples, std::size_t sample_rate,
                             std::uint64_t seed) {
  Rng rng(seed);
  const double sr = static_cast<double>(sample_rate);
  Waveform env(samples, 0.0f);
  // Syllables: Hann bumps of 100-300 ms separated by short gaps.
  double t = rng.uniform(0.0, 0.1);
  while (t * sr < static_cast<double>(samples)) {
    const double dur = rng.uniform(0.5, 1.2) / prof.syllable_rate;
    const double amp = rng.uniform(0.5, 1.0);
    const auto s0 = static_cast<std::size_t>(t * sr);
    const auto n = static_cast<std::size_t>(dur * sr);
    for (std::size_t i = 0; i < n && s0 + i < samples; ++i) {
      const double w = std::sin(std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
      env[s0 + i] = std::max(env[s0 + i], static_cast<float>(amp * w * w));
    }
    t += dur + rng.uniform(0.02, 0.12);
  }
  const double drift_rate = rng.uniform(0.3, 0.9);
  const double drift_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const std::size_t harmonics = static_cast<std::size_t>(0.45 * sr / prof.f0);
  std::vector<double> weight(harmonics + 1, 0.0);
  for (std::size_t k = 1; k <= harmonics; ++k) {
    const double fk = prof.f0 * static_cast<double>(k);
    const double z = (fk - prof.formant) / prof.bandwidth;
    weight[k] = std::exp(-0.5 * z * z) + 0.05 / static_cast<double>(k);
  }
  std::vector<double> phase(harmonics + 1);
  for (auto& ph : phase) ph = rng.uniform(0.0, 2.0 * std::numbers::pi);
  Waveform out(samples);
  double base_phase = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double ti = static_cast<double>(i) / sr;
    const double f = prof.f0 * (1.0 + 0.06 * std::sin(2.0 * std::numbers::pi * drift_rate * ti + drift_phase));
    base_phase += 2.0 * std::numbers::pi * f / sr;
    double v = 0.0;
    for (std::size_t k = 1; k <= harmonics; ++k) {
      if (prof.f0 * static_cast<double>(k) * 1.06 >= 0.5 * sr) break;
      v += weight[k] * std::sin(static_cast<double>(k) * base_phase + phase[k]);
    }
    out[i] = static_cast<float>(env[i] * v + 1e-3 * rng.normal());
  }
  const double rms = std::sqrt(power<float>(out));
  if (rms > 0.0) {
    for (auto& v : out) v = static_cast<float>(v * (0.1 / rms));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

struct Mixture {
  Waveform mixture;
  Waveform target;      // reference with the same peak gain as the mixture
  Waveform interferer;  // scaled interferer, same gain
};

/// Target plus interferer scaled to `snr_db`. The interferer is looped or
/// truncated to the target length. When the mix peak exceeds 0.9, all three
/// signals share the same attenuation.
inline Mixture mix_at_snr(std::span<const float> target, std::span<const float> interferer, double snr_db) {
  if (target.empty() || interferer.empty()) throw ContractError("mix_at_snr: empty input");
  const double pt = power(target);
  const double pi = power(interferer);
  if (pt <= 0.0 || pi <= 0.0) throw ContractError("mix_at_snr: zero-energy input");
  Mixture m;
  m.target.assign(target.begin(), target.end());
  m.interferer.resize(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) m.interferer[i] = interferer[i % interferer.size()];
  const double pi_looped = power<float>(m.interferer);
  const double gain = std::sqrt(pt / (pi_looped * std::pow(10.0, snr_db / 10.0)));
  for (auto& v : m.interferer) v = static_cast<float>(v * gain);
  m.mixture.resize(target.size());
  double peak = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    m.mixture[i] = m.target[i] + m.interferer[i];
    peak = std::max(peak, static_cast<double>(std::abs(m.mixture[i])));
  }
  if (peak > 0.9) {
    const double g = 0.9 / peak;
    for (auto* w : {&m.mixture, &m.target, &m.interferer})
      for (auto& v : *w) v = static_cast<float>(v * g);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Visual features
// ---------------------------------------------------------------------------

namespace detail {

/// Unnormalized per-frame features: row 0 log-energy, rows 1.. log band
/// energies of a Hann-windowed spectrum over 0..4 kHz.
inline Tensor<float> raw_visual_features(std::span<const float> target, const ModelConfig& cfg) {
  const std::size_t spf = cfg.samples_per_frame();
  const auto frames = static_cast<std::size_t>(
      std::llround(static_cast<double>(target.size()) / static_cast<double>(spf)));
  const std::size_t fv = cfg.visual_dim;
  Tensor<float> out(fv, frames);
  if (frames == 0) return out;

  const std::size_t bands = fv - 1;
  const double sr = static_cast<double>(cfg.sample_rate);
  const double top = std::min(4000.0, 0.5 * sr);
  const std::size_t bins = spf / 2;
  // Band index per DFT bin, or bands when the bin is above the range.
  std::vector<std::size_t> band_of(bins + 1, bands);
  for (std::size_t k = 0; k <= bins; ++k) {
    const double f = static_cast<double>(k) * sr / static_cast<double>(spf);
    if (bands > 0 && f < top) band_of[k] = static_cast<std::size_t>(f / top * static_cast<double>(bands));
  }
  std::vector<double> window(spf), cos_t(spf), sin_t(spf);
  for (std::size_t i = 0; i < spf; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(spf));
    cos_t[i] = std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(spf));
    sin_t[i] = std::sin(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(spf));
  }
  std::vector<double> seg(spf);
  std::vector<double> band_energy(bands);
  for (std::size_t f = 0; f < frames; ++f) {
    double energy = 0.0;
    for (std::size_t i = 0; i < spf; ++i) {
      const std::size_t s = f * spf + i;
      const double v = s < target.size() ? target[s] : 0.0;
      energy += v * v;
      seg[i] = v * window[i];
    }
    out(0, f) = static_cast<float>(std::log(energy / static_cast<double>(spf) + kEnergyEps));
    if (bands == 0) continue;
    std::fill(band_energy.begin(), band_energy.end(), 0.0);
    for (std::size_t k = 0; k <= bins; ++k) {
      if (band_of[k] >= bands) continue;
      double re = 0.0, im = 0.0;
      std::size_t idx = 0;
      for (std::size_t i = 0; i < spf; ++i) {
        re += seg[i] * cos_t[idx];
        im -= seg[i] * sin_t[idx];
        idx += k;
        if (idx >= spf) idx -= spf;
      }
      band_energy[band_of[k]] += re * re + im * im;
    }
    for (std::size_t b = 0; b < bands; ++b) {
      out(b + 1, f) = static_cast<float>(std::log(band_energy[b] / static_cast<double>(spf) + kEnergyEps));
    }
  }
  return out;
}

struct FeatureStats {
  std::vector<double> mean, sd;
};

inline constexpr std::size_t kReferenceSpeakers = 8;
inline constexpr double kReferenceSeconds = 2.0;

/// Per-channel mean and standard deviation of the raw features over a fixed
/// reference set (profiles 0..7, 2 s each). Computed once per geometry.
inline const FeatureStats& reference_feature_stats(const ModelConfig& cfg) {
  using Key = std::tuple<std::size_t, std::size_t, std::size_t>;
  static std::mutex mu;
  static std::map<Key, FeatureStats> cache;
  const Key key{cfg.sample_rate, cfg.video_fps, cfg.visual_dim};
  std::lock_guard<std::mutex> lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  const std::size_t fv = cfg.visual_dim;
  std::vector<double> sum(fv, 0.0), sq(fv, 0.0);
  std::size_t count = 0;
  const auto n = static_cast<std::size_t>(kReferenceSeconds * static_cast<double>(cfg.sample_rate));
  for (std::size_t id = 0; id < kReferenceSpeakers; ++id) {
    const Waveform w = synth_speech(speaker_profile(id), n, cfg.sample_rate, 1000 + id);
    const Tensor<float> raw = raw_visual_features(w, cfg);
    for (std::size_t f = 0; f < raw.cols(); ++f) {
      for (std::size_t d = 0; d < fv; ++d) {
        sum[d] += raw(d, f);
        sq[d] += static_cast<double>(raw(d, f)) * raw(d, f);
      }
    }
    count += raw.cols();
  }
  FeatureStats st;
  for (std::size_t d = 0; d < fv; ++d) {
    const double m = sum[d] / static_cast<double>(count);
    st.mean.push_back(m);
    st.sd.push_back(std::sqrt(std::max(sq[d] / static_cast<double>(count) - m * m, 1e-12)));
  }
  return cache.emplace(key, std::move(st)).first->second;
}

}  // namespace detail

/// Per video frame: [log-energy, log band energies of the first F_v-1 bands
/// of a Hann-windowed spectrum over 0..4 kHz], each channel standardized with
/// fixed statistics of a reference speaker set. Stands in for lip
/// embeddings: it moves with the target's articulation, and its level
/// carries the target's voice.
inline Tensor<float> synth_visual_features(std::span<const float> target, const ModelConfig& cfg) {
  Tensor<float> out = detail::raw_visual_features(target, cfg);
  if (out.empty()) return out;
  const detail::FeatureStats& st = detail::reference_feature_stats(cfg);
  for (std::size_t d = 0; d < out.rows(); ++d) {
    for (std::size_t f = 0; f < out.cols(); ++f) {
      out(d, f) = static_cast<float>((out(d, f) - st.mean[d]) / st.sd[d]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Visual impairments
// ---------------------------------------------------------------------------

enum class ImpairmentKind { VisualMissing, LipConcealment, LowResolution };

inline std::string_view to_string(ImpairmentKind k) {
  switch (k) {
    case ImpairmentKind::VisualMissing: return "visual_missing";
    case ImpairmentKind::LipConcealment: return "lip_concealment";
    case ImpairmentKind::LowResolution: return "low_resolution";
  }
  return "unknown";
}

inline ImpairmentKind impairment_from_string(std::string_view s) {
  if (s == "visual_missing") return ImpairmentKind::VisualMissing;
  if (s == "lip_concealment") return ImpairmentKind::LipConcealment;
  if (s == "low_resolution") return ImpairmentKind::LowResolution;
  throw ContractError("unknown impairment kind '" + std::string(s) + "'");
}

struct ImpairmentSpec {
  ImpairmentKind kind = ImpairmentKind::VisualMissing;
  double ratio = 0.0;  // fraction of frames, [0, 1)
  std::uint64_t seed = 0;
};

struct ImpairedFrames {
  Tensor<float> frames;
  double realized_ratio = 0.0;
  std::size_t span_start = 0;
  std::size_t span_length = 0;
};

/// Corrupts one contiguous span of round(ratio * L) frames at a seeded start.
///  - VisualMissing: span zeroed.
///  - LipConcealment: the lower half of each feature column (indices
///    F_v/2 .. F_v-1, the mouth-region proxy) zeroed.
///  - LowResolution: width-5 moving average along time plus N(0, 0.1^2).
inline ImpairedFrames apply_impairment(const Tensor<float>& frames, const ImpairmentSpec& spec) {
  if (!(spec.ratio >= 0.0 && spec.ratio < 1.0)) throw ContractError("apply_impairment: ratio must lie in [0, 1)");
  if (frames.ndim() != 2) throw DimensionError("apply_impairment: frames must be [F_v x L_frames]");
  ImpairedFrames out{frames, 0.0, 0, 0};
  const std::size_t fv = frames.rows(), len = frames.cols();
  if (len == 0) return out;
  Rng rng(spec.seed);
  const auto span = static_cast<std::size_t>(std::llround(spec.ratio * static_cast<double>(len)));
  const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(len - span)));
  out.span_start = start;
  out.span_length = span;
  out.realized_ratio = static_cast<double>(span) / static_cast<double>(len);
  for (std::size_t f = start; f < start + span; ++f) {
    switch (spec.kind) {
      case ImpairmentKind::VisualMissing:
        for (std::size_t d = 0; d < fv; ++d) out.frames(d, f) = 0.0f;
        break;
      case ImpairmentKind::LipConcealment:
        for (std::size_t d = fv / 2; d < fv; ++d) out.frames(d, f) = 0.0f;
        break;
      case ImpairmentKind::LowResolution: {
        const std::size_t lo = f >= 2 ? f - 2 : 0;
        const std::size_t hi = std::min(len, f + 3);
        for (std::size_t d = 0; d < fv; ++d) {
          double acc = 0.0;
          for (std::size_t g = lo; g < hi; ++g) acc += frames(d, g);
          out.frames(d, f) = static_cast<float>(acc / static_cast<double>(hi - lo) + 0.1 * rng.normal());
        }
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Utterances
// ---------------------------------------------------------------------------

/// A simulated training/evaluation item.
struct Utterance {
  Waveform mixture;
  Waveform target;
  Waveform interferer;
  Tensor<float> frames;  // clean target features
  std::size_t speaker_label = 0;
  std::size_t sample_rate = 16000;
  double snr_db = 0.0;
};

/// Two synthetic talkers `target_id` and `interferer_id` mixed at `snr_db`.
inline Utterance simulate_utterance(const ModelConfig& cfg, std::size_t target_id, std::size_t interferer_id,
                                    double seconds, double snr_db, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * static_cast<double>(cfg.sample_rate)));
  const Waveform a = synth_speech(speaker_profile(target_id), n, cfg.sample_rate, seed * 2 + 1);
  const Waveform b = synth_speech(speaker_profile(interferer_id), n, cfg.sample_rate, seed * 2 + 2);
  Mixture m = mix_at_snr(a, b, snr_db);
  Utterance u;
  u.frames = synth_visual_features(m.target, cfg);
  u.mixture = std::move(m.mixture);
  u.target = std::move(m.target);
  u.interferer = std::move(m.interferer);
  u.speaker_label = target_id % cfg.speakers;
  u.sample_rate = cfg.sample_rate;
  u.snr_db = snr_db;
  return u;
}

/// The same mixture seen from the interferer's side: the interferer becomes
/// the target, with its own features and label.
inline Utterance swap_roles(const Utterance& u, const ModelConfig& cfg, std::size_t interferer_label) {
  Utterance s = u;
  std::swap(s.target, s.interferer);
  s.frames = synth_visual_features(s.target, cfg);
  s.speaker_label = interferer_label % cfg.speakers;
  s.snr_db = -u.snr_db;
  return s;
}

}  // namespace momuse
