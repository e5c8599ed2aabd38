// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "momuse/momuse.hpp"
#include "test_util.hpp"

using namespace momuse;
using testing::random_signal;
using testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("[%s] %2d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", id, name, secs, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1 ------------------------------------------------------------------------

Outcome attention_contract() {
  const ModelConfig cfg = testing::small_config();
  Rng rng(1);
  double worst_sum = 0.0, worst_env = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto m = ModelParams<double>::init(cfg, rng.next_u64());
    const auto n = static_cast<std::size_t>(rng.uniform_int(64, 400));
    const auto wave = random_tensor<double>({1, cfg.valid_length(n)}, rng.next_u64(), 0.3);
    const std::size_t latent = cfg.latent_length(wave.cols());
    const auto frames = random_tensor<double>({cfg.visual_dim, (latent + cfg.upsample() - 1) / cfg.upsample()},
                                              rng.next_u64(), 2.0);
    Tape<double> tape(false);
    std::vector<Var<double>> anchors;
    for (std::size_t r = 0; r < cfg.blocks; ++r)
      anchors.push_back(tape.constant(random_tensor<double>({cfg.hidden, 1}, rng.next_u64(), 3.0)));
    const auto out = forward<double>(tape, m, wave, frames, anchors);
    for (std::size_t r = 0; r < cfg.blocks; ++r) {
      const auto& b = out.blocks[r];
      const Tensor<double>& ac = b.a_c->value();
      const Tensor<double>& aa = b.a_a->value();
      const Tensor<double>& em = b.e_m->value();
      for (std::size_t t = 0; t < ac.size(); ++t) {
        worst_sum = std::max(worst_sum, std::abs(ac[t] + aa[t] - 1.0));
        for (std::size_t h = 0; h < cfg.hidden; ++h) {
          const double ec = b.e_c.value()[h], ea = anchors[r].value()[h];
          const double lo = std::min(ec, ea), hi = std::max(ec, ea);
          worst_env = std::max({worst_env, lo - em(h, t), em(h, t) - hi});
        }
      }
    }
  }
  return {worst_sum <= 1e-6 && worst_env <= 1e-12,
          fmt("1000 forwards, max |a_c + a_a - 1| = %.2e, max envelope excess = %.2e", worst_sum, worst_env)};
}

// 2 ------------------------------------------------------------------------

Outcome gradient_oracle() {
  const RunConfig rc = read_run_config(std::string(MOMUSE_CONFIG_DIR) + "/gradcheck.cfg");
  const LossGradCheck r = gradcheck_losses(rc.model, rc.gradcheck_samples, rc.gradcheck_eps, rc.init_seed);
  return {r.max_rel_err() < 1e-3, fmt("L_utt %.2e (%zu entries), L_seg %.2e, worst %s", r.utt.max_rel_err,
                                      r.utt.entries, r.seg.max_rel_err, r.seg.worst_param.c_str())};
}

// 3 ------------------------------------------------------------------------

Outcome si_snr_properties() {
  const std::vector<double> x{1.0, 0.0, -1.0}, y{1.0, 1.0, -2.0};
  // Projection by hand: alpha = 3/2, s = (1.5, 0, -1.5), e = (-0.5, 1, -0.5).
  const double oracle = 10.0 * std::log10(4.5 / 1.5);
  const double hand = si_snr_metric<double>(x, y);
  const auto t = random_signal<double>(1000, 3);
  auto e = random_signal<double>(1000, 4);
  for (std::size_t i = 0; i < e.size(); ++i) e[i] += 0.7 * t[i];
  const double base = si_snr_loss<double>(t, e);
  double worst = 0.0;
  for (double a : {0.5, 2.0, 10.0}) {
    std::vector<double> s(e);
    for (double& v : s) v *= a;
    worst = std::max(worst, std::abs(si_snr_loss<double>(t, s) - base));
  }
  return {std::abs(hand - oracle) < 1e-3 && std::abs(hand - 4.771) < 1e-3 && worst < 1e-6,
          fmt("hand case %.4f dB (oracle %.4f), scale drift %.2e dB", hand, oracle, worst)};
}

// 4 ------------------------------------------------------------------------

Outcome momentum_state_machine() {
  const std::vector<Tensor<float>> e1{random_tensor<float>({16, 1}, 5)};
  auto bank = init_bank<Tensor<float>>(e1, 0.7);
  const std::vector<double> script{0.8, 0.6, 0.9};
  std::string flags;
  bool identical = true;
  Tensor<float> before = bank.anchor(0);
  for (std::size_t i = 0; i < script.size(); ++i) {
    const Tensor<float> e = random_tensor<float>({16, 1}, 10 + i);
    const bool rep = bank.maybe_update(0, e, script[i], static_cast<int>(i) + 2).replaced;
    flags += rep ? '1' : '0';
    const Tensor<float>& now = bank.anchor(0);
    if (!rep) identical = identical && std::memcmp(now.data(), before.data(), now.size() * sizeof(float)) == 0;
    if (rep) identical = identical && now == e;
    before = now;
  }
  return {flags == "101" && identical, "replacement pattern " + flags + (identical ? ", anchors bit-identical between updates" : ", anchor drift")};
}

// 5 ------------------------------------------------------------------------

Outcome streaming_conservation() {
  const ModelConfig cfg = testing::narrow_config();
  auto m = ModelParams<float>::init(cfg, 6);
  const StreamConfig sc;
  std::string lengths;
  bool ok = plan_windows(48000, sc).size() == 11;
  for (double s : {1.0, 1.07, 3.0, 10.0}) {
    const auto n = static_cast<std::size_t>(std::llround(s * 16000));
    const auto audio = random_signal<float>(n, n);
    const auto frames = random_tensor<float>({cfg.visual_dim, (n + 639) / 640}, n + 1);
    const auto out = stream_extract<float>(m, audio, frames, sc);
    ok = ok && out.size() == n;
    lengths += fmt(" %zu/%zu", out.size(), n);
  }
  // Sample-by-sample against bulk on 3.0 s.
  const std::size_t n = 48000, spf = cfg.samples_per_frame();
  const auto audio = random_signal<float>(n, 7);
  const auto frames = random_tensor<float>({cfg.visual_dim, n / spf}, 8);
  const auto bulk = stream_extract<float>(m, audio, frames, sc);
  StreamEngine<float> engine(m, sc);
  std::vector<float> single;
  for (std::size_t s = 0; s < n; ++s) {
    Tensor<float> fr(cfg.visual_dim, s % spf == 0 ? 1 : 0);
    if (s % spf == 0)
      for (std::size_t d = 0; d < cfg.visual_dim; ++d) fr(d, 0) = frames(d, s / spf);
    for (const auto& c : engine.push(std::span<const float>(&audio[s], 1), fr))
      single.insert(single.end(), c.samples.begin(), c.samples.end());
  }
  for (const auto& c : engine.flush()) single.insert(single.end(), c.samples.begin(), c.samples.end());
  const bool same = single == bulk;
  return {ok && same, "emitted/input" + lengths + ", 3.0 s plan " + std::to_string(plan_windows(48000, sc).size()) +
                          " steps, sample-by-sample " + (same ? "identical" : "differs")};
}

// 6 and 7 ------------------------------------------------------------------

struct Trained {
  RunConfig rc;
  ModelParams<float> model;
  DemoData data;
  std::vector<LossRecord> log;
  double before[2] = {0, 0}, after[2] = {0, 0};
};

Trained& trained() {
  static Trained t = [] {
    Trained t;
    t.rc = read_run_config(std::string(MOMUSE_CONFIG_DIR) + "/tiny.cfg");
    TrainDemoOptions opt;
    opt.steps = t.rc.steps;
    opt.seed = t.rc.data_seed;
    opt.train_seed = t.rc.train_seed;
    opt.seconds = t.rc.seconds;
    opt.snr_db = t.rc.snr_db;
    opt.ratio_max = t.rc.ratio_max;
    opt.weights = t.rc.weights;
    opt.theta = t.rc.theta;
    t.model = ModelParams<float>::init(t.rc.model, t.rc.init_seed);
    t.data = make_demo_data(t.rc.model, opt);
    for (int s = 0; s < 2; ++s) t.before[s] = evaluate_si_snr(t.model, t.data.side(s));
    t.log = train_demo(t.model, t.data, opt);
    for (int s = 0; s < 2; ++s) t.after[s] = evaluate_si_snr(t.model, t.data.side(s));
    return t;
  }();
  return t;
}

Outcome overfit_demo() {
  Trained& t = trained();
  const double gain = 0.5 * ((t.after[0] - t.before[0]) + (t.after[1] - t.before[1]));
  std::vector<double> ma;
  for (std::size_t i = 0; i + 20 <= t.log.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = i; j < i + 20; ++j) acc += t.log[j].total;
    ma.push_back(acc / 20.0);
  }
  std::size_t rises = 0;
  for (std::size_t i = 1; i < ma.size(); ++i) rises += ma[i] >= ma[i - 1];
  return {gain >= 5.0 && rises == 0 && t.log.size() == 200,
          fmt("%zu steps, SI-SNR %.2f -> %.2f dB (A), %.2f -> %.2f dB (B), mean gain %.2f dB, "
              "moving-average rises %zu, total loss %.3f -> %.3f",
              t.log.size(), t.before[0], t.after[0], t.before[1], t.after[1], gain, rises, ma.front(), ma.back())};
}

Outcome momentum_benefit() {
  Trained& t = trained();
  StreamConfig sc = t.rc.stream;
  const std::size_t keep = static_cast<std::size_t>(std::llround(1.0 * t.rc.model.video_fps));
  std::string detail;
  bool ok = true;
  for (int s = 0; s < 2; ++s) {
    const Utterance& u = t.data.side(s);
    Tensor<float> frames = u.frames;
    for (std::size_t f = keep; f < frames.cols(); ++f)
      for (std::size_t d = 0; d < frames.rows(); ++d) frames(d, f) = 0.0f;
    std::vector<EmittedChunk<float>> chunks;
    const auto with = stream_extract<float>(t.model, u.mixture, frames, sc, t.rc.theta, true, &chunks);
    const auto without = stream_extract<float>(t.model, u.mixture, frames, sc, t.rc.theta, false);
    const double a = si_snr_metric<float>(u.target, with), b = si_snr_metric<float>(u.target, without);
    std::size_t replaced = 0;
    for (const auto& c : chunks)
      for (const auto& d : c.decisions) replaced += d.replaced;
    ok = ok && a > b;
    detail += fmt("%s%c: bank %.3f dB vs no bank %.3f dB (%zu replacements)", s ? "; " : "", s ? 'B' : 'A', a, b,
                  replaced);
  }
  return {ok, detail};
}

// 8 ------------------------------------------------------------------------

Outcome impairment_realization() {
  const Tensor<float> frames = random_tensor<float>({8, 100}, 9);
  double worst = 0.0;
  bool untouched = true, deterministic = true;
  for (auto kind : {ImpairmentKind::VisualMissing, ImpairmentKind::LipConcealment, ImpairmentKind::LowResolution}) {
    for (double ratio : {0.1, 0.5, 0.79}) {
      const ImpairmentSpec spec{kind, ratio, 77};
      const ImpairedFrames a = apply_impairment(frames, spec);
      worst = std::max(worst, std::abs(a.realized_ratio - ratio));
      for (std::size_t t = 0; t < 100; ++t) {
        if (t >= a.span_start && t < a.span_start + a.span_length) continue;
        for (std::size_t d = 0; d < 8; ++d) untouched = untouched && a.frames(d, t) == frames(d, t);
      }
      deterministic = deterministic && apply_impairment(frames, spec).frames == a.frames;
    }
  }
  return {worst <= 0.01 && untouched && deterministic,
          fmt("max |realized - requested| %.4f, outside span %s, %s", worst, untouched ? "bit-identical" : "changed",
              deterministic ? "deterministic" : "non-deterministic")};
}

// 9 ------------------------------------------------------------------------

Outcome format_round_trips() {
  auto m = ModelParams<float>::init(testing::small_config(), 10);
  const auto ck = checkpoint_encode(model_to_checkpoint(m));
  const bool ck_ok = checkpoint_encode(checkpoint_decode(ck)) == ck;
  auto back = model_from_checkpoint<float>(checkpoint_decode(ck));
  bool params_ok = true;
  auto a = m.all(), b = back.all();
  for (std::size_t i = 0; i < a.size(); ++i) params_ok = params_ok && a[i]->value == b[i]->value;

  const FeatureFile f{random_tensor<float>({8, 77}, 11), 25.0f};
  const auto fb = features_encode(f);
  const bool feat_ok = features_encode(features_decode(fb)) == fb && features_decode(fb).frames == f.frames;

  ModelConfig bigger = testing::small_config();
  bigger.hidden = 12;
  auto other = ModelParams<float>::init(bigger, 12);
  OptimState<float> st;
  std::string diag;
  try {
    param_init_from_checkpoint(other, checkpoint_decode(ck), st, 1);
  } catch (const FormatError& e) {
    diag = e.what();
  }
  const bool named = diag.find("audio_encoder.weight (checkpoint [8x1x8], model [12x1x8])") != std::string::npos;
  return {ck_ok && params_ok && feat_ok && named,
          fmt("checkpoint %s, features %s, PI shape mismatch %s", ck_ok && params_ok ? "bit-exact" : "differs",
              feat_ok ? "bit-exact" : "differs", named ? "rejected with tensor names" : "not diagnosed")};
}

// 10 -----------------------------------------------------------------------

Outcome penalty_loss_check() {
  const std::vector<Tensor<double>> half(2, Tensor<double>(1, 50, 0.5));
  const double p = penalty_loss<double>(half);
  Rng rng(13);
  bool bounded = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto r = static_cast<std::size_t>(rng.uniform_int(1, 8));
    std::vector<Tensor<double>> a;
    for (std::size_t k = 0; k < r; ++k) {
      Tensor<double> row(1, static_cast<std::size_t>(rng.uniform_int(1, 30)));
      for (auto& v : row.values()) v = rng.uniform();
      a.push_back(row);
    }
    const double v = penalty_loss<double>(a);
    bounded = bounded && v >= 0.0 && v <= static_cast<double>(r);
  }
  return {p == 1.0 && bounded, fmt("R=2, a_a=0.5 gives %.17g; 1000 random draws within [0, R]: %s", p,
                                   bounded ? "yes" : "no")};
}

}  // namespace

int main() {
  report(1, "attention contract", attention_contract);
  report(2, "gradient oracle", gradient_oracle);
  report(3, "SI-SNR properties", si_snr_properties);
  report(4, "momentum state machine", momentum_state_machine);
  report(5, "streaming conservation", streaming_conservation);
  report(6, "overfit demo", overfit_demo);
  report(7, "momentum benefit", momentum_benefit);
  report(8, "impairment realization", impairment_realization);
  report(9, "format round-trips", format_round_trips);
  report(10, "penalty loss", penalty_loss_check);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
