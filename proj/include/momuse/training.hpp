// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Losses and optimization.
//
//   L_utt   = SI-SNR loss on the whole utterance + lambda * sum_r CE(e_c^r)
//   L_seg   = SI-SNR loss on window 2 + lambda * sum_r CE(mean_t E_m^r(2)),
//             window 1 seeds the anchors and its graph stays attached
//   L_pe    = sum_r mean_t a_a^r(2)
//   L_total = alpha * L_utt + beta * L_seg + gamma * L_pe

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "momuse/data_sim.hpp"
#include "momuse/error.hpp"
#include "momuse/io.hpp"
#include "momuse/metrics.hpp"
#include "momuse/model.hpp"
#include "momuse/momentum.hpp"
#include "momuse/numerics.hpp"
#include "momuse/random.hpp"

namespace momuse {

struct LossWeights {
  double alpha = 0.3;
  double beta = 0.7;
  double gamma = 0.05;
  double lambda = 0.1;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0 || lambda < 0) throw ContractError("loss weights must be >= 0");
  }
};

template <typename T>
Tensor<T> to_row(std::span<const float> samples) {
  return Tensor<T>({1, samples.size()}, std::vector<T>(samples.begin(), samples.end()));
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// Negated SI-SNR (dB) of `estimate` against a constant target, with the
/// same zero-meaning, epsilon and +-80 dB clamp as si_snr_metric. The
/// gradient is zero where the clamp is active.
template <typename T>
Var<T> si_snr_loss(Var<T> estimate, const Tensor<T>& target) {
  const Tensor<T>& ev = estimate.value();
  if (ev.size() != target.size()) {
    throw DimensionError("si_snr_loss: estimate has " + std::to_string(ev.size()) + " samples, target " +
                         std::to_string(target.size()));
  }
  using A = detail::acc_t<T>;
  const auto p = detail::si_snr_parts<T>(target.values(), ev.values());
  const A snr = detail::ratio_db(p.signal, p.noise);
  const bool clamped = std::abs(snr) >= static_cast<A>(kDbCap);
  const std::size_t n = ev.size();
  Tensor<T> dloss(ev.shape());
  if (!clamped) {
    // d snr / d x_hat0 = c * (2 s / S - 2 e / (E + eps)); mean removal
    // projects the result onto zero-mean vectors.
    const A c = 10 / std::log(static_cast<A>(10));
    A mean_g = 0;
    std::vector<A> g(n);
    for (std::size_t i = 0; i < n; ++i) {
      const A s = p.alpha * p.target[i];
      const A e = p.estimate[i] - s;
      g[i] = -c * (2 * s / p.signal - 2 * e / (p.noise + static_cast<A>(kEnergyEps)));
      mean_g += g[i];
    }
    mean_g /= static_cast<A>(n);
    for (std::size_t i = 0; i < n; ++i) dloss[i] = static_cast<T>(g[i] - mean_g);
  }
  const std::size_t eid = estimate.id;
  return estimate.tape->record(Tensor<T>::scalar(static_cast<T>(-snr)), {estimate},
                               [eid, dloss = std::move(dloss)](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& ge = tp.grad(eid);
    for (std::size_t i = 0; i < dloss.size(); ++i) ge[i] += g[0] * dloss[i];
  });
}

template <typename T>
double si_snr_loss(std::span<const T> target, std::span<const T> estimate) {
  return -si_snr_metric(target, estimate);
}

/// Softmax cross-entropy of W e_c against a speaker label.
template <typename T>
Var<T> ce_loss(Tape<T>& tape, Var<T> embedding, Param<T>& classifier, std::size_t label) {
  return cross_entropy(linear(embedding, tape.param(classifier)), label);
}

/// Sum over blocks of the time-averaged anchor weight.
template <typename T>
Var<T> penalty_loss(std::span<const Var<T>> anchor_weights) {
  if (anchor_weights.empty()) throw ContractError("penalty_loss: no attention weights");
  Var<T> total = mean(anchor_weights[0]);
  for (std::size_t r = 1; r < anchor_weights.size(); ++r) total = add(total, mean(anchor_weights[r]));
  return total;
}

template <typename T>
double penalty_loss(std::span<const Tensor<T>> anchor_weights) {
  double total = 0.0;
  for (const auto& a : anchor_weights) {
    if (a.empty()) throw InputTooShortError("penalty_loss: empty attention row");
    double acc = 0.0;
    for (T v : a.values()) acc += v;
    total += acc / static_cast<double>(a.size());
  }
  return total;
}

template <typename T>
Var<T> total_loss(Var<T> utt, Var<T> seg, Var<T> pe, const LossWeights& w) {
  return add(add(scale(utt, static_cast<T>(w.alpha)), scale(seg, static_cast<T>(w.beta))),
             scale(pe, static_cast<T>(w.gamma)));
}

inline double total_loss(double utt, double seg, double pe, const LossWeights& w) {
  return w.alpha * utt + w.beta * seg + w.gamma * pe;
}

// ---------------------------------------------------------------------------
// Utterance-level and segment-level objectives
// ---------------------------------------------------------------------------

template <typename T>
struct UttTerms {
  Var<T> total;
  Var<T> si_snr;
  std::vector<Var<T>> ce;
};

/// Whole-utterance pass without anchors. `frames` may be impaired.
template <typename T>
UttTerms<T> utt_loss(Tape<T>& tape, ModelParams<T>& m, const Utterance& u, const Tensor<float>& frames,
                     double lambda) {
  const Tensor<T> mix = to_row<T>(u.mixture);
  const Tensor<T> fr = frames.template cast<T>();
  const WindowInput<T> w = make_window<T>(m.config, mix.values(), 0, fr, 0, 0, u.mixture.size());
  const ForwardOutput<T> out = forward(tape, m, w.waveform, w.frames, {}, w.visual_offset);
  UttTerms<T> terms;
  terms.si_snr = si_snr_loss(crop_cols(out.waveform, 0, w.length), to_row<T>(u.target));
  terms.total = terms.si_snr;
  for (std::size_t r = 0; r < m.config.blocks; ++r) {
    terms.ce.push_back(ce_loss(tape, out.blocks[r].e_c, m.blocks[r].classifier, u.speaker_label));
    terms.total = add(terms.total, scale(terms.ce.back(), static_cast<T>(lambda)));
  }
  return terms;
}

/// Window lengths in samples for one segment-training draw.
struct SegWindows {
  std::size_t init = 0;
  std::size_t shift = 0;
  std::size_t win = 0;
};

/// Uniform draws of (L_win, L_shift, L_init) in seconds, converted to
/// samples.
class SegSampler {
 public:
  struct Range {
    double lo, hi;
  };
  Range win{1.05, 3.2};
  Range shift{0.05, 0.2};
  Range init{0.05, 3.0};

  explicit SegSampler(std::uint64_t seed) : rng_(seed) {}

  SegWindows draw(std::size_t sample_rate) {
    auto samples = [&](Range r) {
      return static_cast<std::size_t>(std::llround(rng_.uniform(r.lo, r.hi) * static_cast<double>(sample_rate)));
    };
    SegWindows w;
    w.win = samples(win);
    w.shift = samples(shift);
    w.init = samples(init);
    return w;
  }

 private:
  Rng rng_;
};

template <typename T>
struct SegTerms {
  Var<T> total;
  Var<T> si_snr;
  Var<T> penalty;
  std::vector<Var<T>> ce;
  std::vector<Var<T>> a_c, a_a;
  std::size_t start2 = 0, end2 = 0;
};

/// Two-window simulation of streaming. Returns nothing when the utterance
/// cannot hold init + shift samples.
template <typename T>
std::optional<SegTerms<T>> seg_loss(Tape<T>& tape, ModelParams<T>& m, const Utterance& u,
                                    const Tensor<float>& frames, const SegWindows& sw, double lambda,
                                    double theta = kDefaultTheta) {
  if (sw.init == 0 || sw.shift == 0 || sw.win == 0) throw ContractError("seg_loss: window lengths must be positive");
  const std::size_t end2 = sw.init + sw.shift;
  if (end2 > u.mixture.size()) return std::nullopt;
  const std::size_t start2 = end2 > sw.win ? end2 - sw.win : 0;

  const Tensor<T> mix = to_row<T>(u.mixture);
  const Tensor<T> fr = frames.template cast<T>();
  const WindowInput<T> w1 = make_window<T>(m.config, mix.values(), 0, fr, 0, 0, sw.init);
  const ForwardOutput<T> out1 = forward(tape, m, w1.waveform, w1.frames, {}, w1.visual_offset);
  std::vector<Var<T>> e1;
  for (const auto& b : out1.blocks) e1.push_back(b.e_c);
  const MemoryBank<Var<T>> bank = init_bank<Var<T>>(e1, theta);

  const WindowInput<T> w2 = make_window<T>(m.config, mix.values(), 0, fr, 0, start2, end2);
  const ForwardOutput<T> out2 = forward<T>(tape, m, w2.waveform, w2.frames, bank.anchors(), w2.visual_offset);
  const std::span<const float> tgt(u.target.data() + start2, end2 - start2);

  SegTerms<T> terms;
  terms.start2 = start2;
  terms.end2 = end2;
  terms.si_snr = si_snr_loss(crop_cols(out2.waveform, 0, w2.length), to_row<T>(tgt));
  terms.total = terms.si_snr;
  for (std::size_t r = 0; r < m.config.blocks; ++r) {
    const BlockOutput<T>& b = out2.blocks[r];
    terms.ce.push_back(ce_loss(tape, mean_over_time(*b.e_m), m.blocks[r].classifier, u.speaker_label));
    terms.total = add(terms.total, scale(terms.ce.back(), static_cast<T>(lambda)));
    terms.a_c.push_back(*b.a_c);
    terms.a_a.push_back(*b.a_a);
  }
  terms.penalty = penalty_loss<T>(terms.a_a);
  return terms;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

inline constexpr double kLearningRateScratch = 1e-3;
inline constexpr double kLearningRatePretrained = 1e-4;
inline constexpr std::size_t kPlateauEpochs = 6;
inline constexpr std::size_t kStopEpochs = 10;
inline constexpr std::size_t kMaxEpochs = 100;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;
  double lr = kLearningRateScratch;
  std::size_t plateau_count = 0;
  std::size_t stop_count = 0;
  std::size_t epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// One bias-corrected Adam update from the gradients held by `params`.
template <typename T>
void adam_step(std::span<Param<T>* const> params, OptimState<T>& st, const AdamConfig& cfg = {}) {
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->value.shape());
      st.v.emplace_back(p->value.shape());
    }
  }
  if (st.m.size() != params.size()) throw StateError("adam: parameter list changed between steps");
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param<T>& p = *params[k];
    if (!p.trainable) continue;
    Tensor<T>& m = st.m[k];
    Tensor<T>& v = st.v[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] = static_cast<T>(p.value[i] - st.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

enum class ScheduleAction { Continue, Halve, Stop };

/// End-of-epoch plateau schedule on the best validation loss: halve the
/// learning rate after 6 epochs without improvement, stop after 10, and stop
/// at the epoch cap.
template <typename T>
ScheduleAction lr_schedule(OptimState<T>& st, double val_loss, std::size_t max_epochs = kMaxEpochs) {
  ++st.epoch;
  if (val_loss < st.best_val_loss) {
    st.best_val_loss = val_loss;
    st.plateau_count = 0;
    st.stop_count = 0;
  } else {
    ++st.plateau_count;
    ++st.stop_count;
  }
  if (st.stop_count >= kStopEpochs || st.epoch >= max_epochs) return ScheduleAction::Stop;
  if (st.plateau_count >= kPlateauEpochs) {
    st.lr *= 0.5;
    st.plateau_count = 0;
    return ScheduleAction::Halve;
  }
  return ScheduleAction::Continue;
}

/// Loads every non-attention parameter from `ckpt`, reseeds the attention
/// parameters and drops the learning rate to the fine-tuning value.
/// Attention tensors and "meta." entries in the checkpoint are ignored.
template <typename T>
void param_init_from_checkpoint(ModelParams<T>& m, const Checkpoint& ckpt, OptimState<T>& st,
                                std::uint64_t aseu_seed) {
  std::set<std::string> expected, present;
  m.visit([&](Param<T>& p) { if (!is_aseu_param(p.name)) expected.insert(p.name); });
  for (const auto& e : ckpt.entries()) {
    if (e.name.rfind("meta.", 0) == 0 || is_aseu_param(e.name)) continue;
    present.insert(e.name);
  }
  std::string missing, extra, shape;
  for (const auto& n : expected)
    if (!present.contains(n)) missing += " " + n;
  for (const auto& n : present)
    if (!expected.contains(n)) extra += " " + n;
  m.visit([&](Param<T>& p) {
    if (is_aseu_param(p.name)) return;
    if (const NamedTensor* e = ckpt.find(p.name); e && e->tensor.shape() != p.value.shape()) {
      shape += " " + p.name + " (checkpoint " + detail::shape_str(e->tensor.shape()) + ", model " +
               detail::shape_str(p.value.shape()) + ")";
    }
  });
  if (!missing.empty() || !extra.empty() || !shape.empty()) {
    std::string msg = "parameter init:";
    if (!missing.empty()) msg += " missing tensors:" + missing + ";";
    if (!extra.empty()) msg += " unexpected tensors:" + extra + ";";
    if (!shape.empty()) msg += " shape mismatch:" + shape + ";";
    throw FormatError(msg);
  }
  m.visit([&](Param<T>& p) {
    if (!is_aseu_param(p.name)) p.value = ckpt.find(p.name)->tensor.template cast<T>();
  });
  Rng rng(aseu_seed);
  m.visit([&](Param<T>& p) { if (is_aseu_param(p.name)) ModelParams<T>::reseed_param(p, m.config, rng); });
  m.zero_grads();
  st = OptimState<T>{};
  st.lr = kLearningRatePretrained;
}

// ---------------------------------------------------------------------------
// Overfit demo
// ---------------------------------------------------------------------------

struct TrainDemoOptions {
  std::size_t steps = 200;
  std::uint64_t seed = 1;        // simulated mixture
  std::uint64_t train_seed = 1;  // impairments and segment windows
  double seconds = 4.0;
  double snr_db = 0.0;
  double ratio_max = 0.8;  // impairment ratio drawn from [0, ratio_max)
  std::size_t pool = 20;   // examples per epoch
  double lr = kLearningRateScratch;
  LossWeights weights;
  double theta = kDefaultTheta;
};

struct LossRecord {
  std::size_t step = 0;
  double utt = 0.0, seg = 0.0, pe = 0.0, total = 0.0;
};

/// One training example: a target side of the demo mixture, its impaired
/// features and the segment windows used for it.
struct DemoExample {
  std::size_t side = 0;  // 0: speaker A is the target, 1: speaker B
  ImpairmentSpec impairment;
  Tensor<float> frames;
  SegWindows windows;
};

/// One fixed mixture of speakers 0 and 1, presented with either talker as
/// the target so that the conditioning decides what gets extracted. The
/// examples are simulated once, like an on-disk training set, and visited
/// in order every epoch.
struct DemoData {
  Utterance a, b;
  std::vector<DemoExample> examples;
  const Utterance& side(std::size_t i) const { return i % 2 ? b : a; }
};

inline DemoData make_demo_data(const ModelConfig& cfg, const TrainDemoOptions& opt) {
  if (opt.pool == 0) throw ContractError("train demo: pool must be positive");
  DemoData d;
  d.a = simulate_utterance(cfg, 0, 1, opt.seconds, opt.snr_db, opt.seed);
  d.b = swap_roles(d.a, cfg, 1);
  Rng rng(opt.train_seed * 104729 + 11);
  SegSampler sampler(opt.train_seed * 7919 + 3);
  for (std::size_t k = 0; k < opt.pool; ++k) {
    DemoExample ex;
    ex.side = k % 2;
    ex.impairment.kind = static_cast<ImpairmentKind>(rng.uniform_int(0, 2));
    ex.impairment.ratio = rng.uniform(0.0, opt.ratio_max);
    ex.impairment.seed = rng.next_u64();
    ex.frames = apply_impairment(d.side(ex.side).frames, ex.impairment).frames;
    do {
      ex.windows = sampler.draw(cfg.sample_rate);
    } while (ex.windows.init + ex.windows.shift > d.a.mixture.size());
    d.examples.push_back(std::move(ex));
  }
  return d;
}

/// Offline SI-SNR (dB) of the model on an utterance with clean visuals.
template <typename T>
double evaluate_si_snr(ModelParams<T>& m, const Utterance& u) {
  const std::vector<T> mix(u.mixture.begin(), u.mixture.end());
  const std::vector<T> est = extract_offline<T>(m, mix, u.frames.template cast<T>());
  const std::vector<T> tgt(u.target.begin(), u.target.end());
  return si_snr_metric<T>(tgt, est);
}

/// Utt + Seg training on the demo examples with Adam at a fixed learning
/// rate, one example per step.
inline std::vector<LossRecord> train_demo(ModelParams<float>& m, const DemoData& data, const TrainDemoOptions& opt,
                                          const std::function<void(const LossRecord&)>& on_step = {}) {
  opt.weights.validate();
  if (data.examples.empty()) throw ContractError("train demo: no examples");
  OptimState<float> st;
  st.lr = opt.lr;
  std::vector<Param<float>*> params = m.all();
  std::vector<LossRecord> log;
  for (std::size_t step = 1; step <= opt.steps; ++step) {
    const DemoExample& ex = data.examples[(step - 1) % data.examples.size()];
    const Utterance& u = data.side(ex.side);
    m.zero_grads();
    Tape<float> tape(true);
    UttTerms<float> utt = utt_loss(tape, m, u, ex.frames, opt.weights.lambda);
    std::optional<SegTerms<float>> seg = seg_loss(tape, m, u, ex.frames, ex.windows, opt.weights.lambda, opt.theta);
    if (!seg) throw ContractError("train demo: segment windows exceed the utterance");
    Var<float> total = total_loss(utt.total, seg->total, seg->penalty, opt.weights);
    tape.backward(total);
    adam_step<float>(params, st);

    LossRecord rec{step, utt.total.value()[0], seg->total.value()[0], seg->penalty.value()[0], total.value()[0]};
    log.push_back(rec);
    if (on_step) on_step(rec);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct LossGradCheck {
  GradCheckReport utt, seg;
  double max_rel_err() const { return std::max(utt.max_rel_err, seg.max_rel_err); }
};

/// Finite-difference check of L_utt and of L_seg + L_pe on a simulated
/// `samples`-long utterance, in long double. The segment windows are fixed
/// fractions of the utterance: init 1/2, shift 1/4, win 5/8.
inline LossGradCheck gradcheck_losses(const ModelConfig& cfg, std::size_t samples, double eps, std::uint64_t seed,
                                      double lambda = LossWeights{}.lambda) {
  using LD = long double;
  ModelParams<LD> m = ModelParams<LD>::init(cfg, seed);
  const double seconds = static_cast<double>(samples) / static_cast<double>(cfg.sample_rate);
  const Utterance u = simulate_utterance(cfg, 0, 1, seconds, 0.0, seed);
  const SegWindows sw{samples / 2, samples / 4, samples * 5 / 8};
  if (sw.shift == 0 || sw.init + sw.shift > u.mixture.size()) throw InputTooShortError("gradcheck: too few samples");
  std::vector<Param<LD>*> params = m.all();
  LossGradCheck out;
  out.utt = grad_check<LD>([&](Tape<LD>& t) { return utt_loss(t, m, u, u.frames, lambda).total; }, params, eps);
  out.seg = grad_check<LD>(
      [&](Tape<LD>& t) {
        SegTerms<LD> s = *seg_loss(t, m, u, u.frames, sw, lambda);
        return add(s.total, s.penalty);
      },
      params, eps);
  return out;
}

}  // namespace momuse
