// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// momuse: simulate data, run offline/online extraction, train the demo
// model, check gradients and score outputs.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "momuse/momuse.hpp"

namespace fs = std::filesystem;
using namespace momuse;

namespace {

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig{} : read_run_config(path);
}

WavData read_audio(const std::string& path) {
  if (path != "-") return wav_read(path);
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(std::cin), std::istreambuf_iterator<char>()};
  return wav_decode(bytes, "stdin");
}

void check_inputs(const ModelConfig& cfg, const WavData& wav, const FeatureFile& feat) {
  if (wav.sample_rate != cfg.sample_rate) {
    throw ContractError("mixture is " + std::to_string(wav.sample_rate) + " Hz, model expects " +
                        std::to_string(cfg.sample_rate) + " Hz");
  }
  if (feat.frames.rows() != cfg.visual_dim) {
    throw DimensionError("features have F_v=" + std::to_string(feat.frames.rows()) + ", model expects " +
                         std::to_string(cfg.visual_dim));
  }
  if (feat.fps != static_cast<float>(cfg.video_fps)) {
    throw AlignmentError("features are at " + std::to_string(feat.fps) + " fps, model expects " +
                         std::to_string(cfg.video_fps));
  }
}

// simulate ------------------------------------------------------------------

struct SimulateArgs {
  std::string out, config;
  std::size_t count = 10;
  std::uint64_t seed = 1;
  double snr_min = -10.0, snr_max = 10.0, ratio_max = 0.8, seconds = 4.0;
  std::size_t pool = 8;
};

int run_simulate(const SimulateArgs& a) {
  if (a.snr_min > a.snr_max) throw ContractError("--snr-min exceeds --snr-max");
  if (!(a.ratio_max >= 0.0 && a.ratio_max < 1.0)) throw ContractError("--ratio-max must lie in [0, 1)");
  if (a.pool < 2) throw ContractError("--speakers must be at least 2");
  const ModelConfig cfg = load_config(a.config).model;
  fs::create_directories(a.out);
  std::vector<ManifestRecord> records;
  for (std::size_t i = 0; i < a.count; ++i) {
    const std::uint64_t seed = a.seed + i;
    Rng rng(seed);
    const auto target = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(a.pool) - 1));
    auto other = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(a.pool) - 2));
    if (other >= target) ++other;
    const double snr = rng.uniform(a.snr_min, a.snr_max);
    ImpairmentSpec imp;
    imp.kind = static_cast<ImpairmentKind>(rng.uniform_int(0, 2));
    imp.ratio = rng.uniform(0.0, a.ratio_max);
    imp.seed = rng.next_u64();
    const Utterance u = simulate_utterance(cfg, target, other, a.seconds, snr, seed);
    const ImpairedFrames f = apply_impairment(u.frames, imp);

    const std::string stem = "utt" + std::to_string(i);
    ManifestRecord r{stem + "_mix.wav", stem + "_target.wav", stem + "_feat.momv", u.speaker_label, imp.kind,
                     imp.ratio, f.realized_ratio, snr};
    wav_write((fs::path(a.out) / r.mixture).string(), u.mixture, static_cast<std::uint32_t>(cfg.sample_rate));
    wav_write((fs::path(a.out) / r.target).string(), u.target, static_cast<std::uint32_t>(cfg.sample_rate));
    features_write((fs::path(a.out) / r.features).string(), {f.frames, static_cast<float>(cfg.video_fps)});
    records.push_back(std::move(r));
  }
  manifest_write((fs::path(a.out) / "manifest.tsv").string(), records);
  std::cout << "wrote " << records.size() << " utterances to " << a.out << "\n";
  return 0;
}

// extract / stream ----------------------------------------------------------

struct ExtractArgs {
  std::string ckpt, mix, feat, out;
};

int run_extract(const ExtractArgs& a) {
  ModelParams<float> m = model_from_checkpoint<float>(checkpoint_read(a.ckpt));
  const WavData wav = read_audio(a.mix);
  const FeatureFile feat = features_read(a.feat);
  check_inputs(m.config, wav, feat);
  const std::vector<float> est = extract_offline<float>(m, wav.samples, feat.frames);
  wav_write(a.out, est, wav.sample_rate);
  return 0;
}

struct StreamArgs {
  std::string ckpt, mix, feat, out, log, bank_out, normalization = "overlap-rescale";
  double l_init = 1.0, l_win = 2.7, l_shift = 0.2, theta = kDefaultTheta;
  double chunk = 0.04;  // seconds pushed per call
  bool no_bank = false;
};

void log_chunk(std::ostream& os, const EmittedChunk<float>& c, std::size_t blocks) {
  os << "step=" << c.step << " start=" << c.start << " samples=" << c.samples.size();
  if (c.initialized) {
    os << " init";
  } else if (!c.decisions.empty()) {
    for (std::size_t r = 0; r < c.decisions.size(); ++r) {
      char buf[64];
      std::snprintf(buf, sizeof buf, " b%zu=%.6f:%d", r, c.decisions[r].a_c_mean, c.decisions[r].replaced ? 1 : 0);
      os << buf;
    }
  } else {
    for (std::size_t r = 0; r < blocks; ++r) os << " b" << r << "=off";
  }
  os << "\n";
}

int run_stream(const StreamArgs& a) {
  ModelParams<float> m = model_from_checkpoint<float>(checkpoint_read(a.ckpt));
  const WavData wav = read_audio(a.mix);
  const FeatureFile feat = features_read(a.feat);
  check_inputs(m.config, wav, feat);
  StreamConfig sc;
  sc.l_init = a.l_init;
  sc.l_win = a.l_win;
  sc.l_shift = a.l_shift;
  sc.sample_rate = m.config.sample_rate;
  sc.normalization = normalization_from_string(a.normalization);

  StreamEngine<float> engine(m, sc, a.theta, !a.no_bank);
  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log, std::ios::trunc);
    if (!log) throw FormatError("cannot open attention log '" + a.log + "'");
  }
  // Feed fixed-size chunks of whole video frames with their features.
  const std::size_t spf = m.config.samples_per_frame();
  const std::size_t per_push = std::max<std::size_t>(1, static_cast<std::size_t>(a.chunk * m.config.video_fps + 0.5));
  std::vector<float> out;
  out.reserve(wav.samples.size());
  auto take = [&](std::vector<EmittedChunk<float>> chunks) {
    for (const auto& c : chunks) {
      out.insert(out.end(), c.samples.begin(), c.samples.end());
      if (log.is_open()) log_chunk(log, c, m.config.blocks);
    }
  };
  const std::size_t nf = feat.frames.cols();
  for (std::size_t f = 0, s = 0; s < wav.samples.size() || f < nf; f += per_push) {
    const std::size_t f_end = std::min(nf, f + per_push);
    const std::size_t s_end = std::min(wav.samples.size(), f_end >= nf ? wav.samples.size() : f_end * spf);
    Tensor<float> fr({m.config.visual_dim, f_end > f ? f_end - f : 0});
    for (std::size_t k = f; k < f_end; ++k)
      for (std::size_t d = 0; d < m.config.visual_dim; ++d) fr(d, k - f) = feat.frames(d, k);
    take(engine.push(std::span<const float>(wav.samples.data() + s, s_end - s), fr));
    s = s_end;
    if (f_end >= nf && s >= wav.samples.size()) break;
  }
  take(engine.flush());
  wav_write(a.out, out, wav.sample_rate);
  if (!a.bank_out.empty()) {
    Checkpoint c;
    bank_to_checkpoint(engine.bank(), c);
    checkpoint_write(a.bank_out, c);
  }
  return 0;
}

// train-demo ----------------------------------------------------------------

struct TrainArgs {
  std::string config, out_ckpt, log;
  std::optional<std::size_t> steps;
};

int run_train_demo(const TrainArgs& a) {
  const RunConfig rc = load_config(a.config);
  TrainDemoOptions opt;
  opt.steps = a.steps.value_or(rc.steps);
  opt.seed = rc.data_seed;
  opt.train_seed = rc.train_seed;
  opt.seconds = rc.seconds;
  opt.snr_db = rc.snr_db;
  opt.ratio_max = rc.ratio_max;
  opt.weights = rc.weights;
  opt.theta = rc.theta;
  ModelParams<float> m = ModelParams<float>::init(rc.model, rc.init_seed);
  const DemoData data = make_demo_data(rc.model, opt);
  const double before = 0.5 * (evaluate_si_snr(m, data.a) + evaluate_si_snr(m, data.b));

  std::ofstream file;
  if (!a.log.empty()) {
    file.open(a.log, std::ios::trunc);
    if (!file) throw FormatError("cannot open loss log '" + a.log + "'");
  }
  std::ostream& log = a.log.empty() ? std::cout : file;
  log << "# step L_utt L_seg L_pe total\n";
  train_demo(m, data, opt, [&](const LossRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu %.6f %.6f %.6f %.6f\n", r.step, r.utt, r.seg, r.pe, r.total);
    log << buf << std::flush;
  });
  const double after = 0.5 * (evaluate_si_snr(m, data.a) + evaluate_si_snr(m, data.b));
  checkpoint_write(a.out_ckpt, model_to_checkpoint(m));
  std::fprintf(stderr, "si-snr before %.3f dB, after %.3f dB\n", before, after);
  return 0;
}

// gradcheck / metrics -------------------------------------------------------

int run_gradcheck(const std::string& config) {
  const RunConfig rc = load_config(config);
  const LossGradCheck r = gradcheck_losses(rc.model, rc.gradcheck_samples, rc.gradcheck_eps, rc.init_seed,
                                           rc.weights.lambda);
  std::printf("L_utt max_rel_err %.3e (%s[%zu], %zu entries)\n", r.utt.max_rel_err, r.utt.worst_param.c_str(),
              r.utt.worst_index, r.utt.entries);
  std::printf("L_seg max_rel_err %.3e (%s[%zu], %zu entries)\n", r.seg.max_rel_err, r.seg.worst_param.c_str(),
              r.seg.worst_index, r.seg.entries);
  std::printf("max_rel_err %.3e\n", r.max_rel_err());
  return r.max_rel_err() > 1e-3 ? 1 : 0;
}

int run_metrics(const std::string& ref_path, const std::string& est_path) {
  const WavData ref = wav_read(ref_path);
  const WavData est = wav_read(est_path);
  if (ref.samples.size() != est.samples.size()) {
    throw DimensionError("reference has " + std::to_string(ref.samples.size()) + " samples, estimate " +
                         std::to_string(est.samples.size()));
  }
  std::printf("si_snr_db %.4f\n", si_snr_metric<float>(ref.samples, est.samples));
  std::printf("simple_sdr_db %.4f\n", sdr_metric<float>(ref.samples, est.samples));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"momuse: momentum audio-visual target speaker extraction"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "Write simulated mixtures, targets, features and a manifest");
  c_sim->add_option("--out", sim.out, "Output directory")->required();
  c_sim->add_option("--count", sim.count, "Number of utterances")->required();
  c_sim->add_option("--seed", sim.seed, "Base seed; utterance i uses seed+i")->required();
  c_sim->add_option("--snr-min", sim.snr_min, "Lowest SNR (dB)");
  c_sim->add_option("--snr-max", sim.snr_max, "Highest SNR (dB)");
  c_sim->add_option("--ratio-max", sim.ratio_max, "Impairment ratio drawn from [0, ratio-max)");
  c_sim->add_option("--seconds", sim.seconds, "Utterance length");
  c_sim->add_option("--speakers", sim.pool, "Number of synthetic talkers");
  c_sim->add_option("--config", sim.config, "Run config (model geometry)");

  ExtractArgs ex;
  auto* c_ex = app.add_subcommand("extract", "Offline single-window extraction");
  c_ex->add_option("--ckpt", ex.ckpt)->required();
  c_ex->add_option("--mix", ex.mix, "Mixture WAV ('-' for stdin)")->required();
  c_ex->add_option("--feat", ex.feat, "Feature file")->required();
  c_ex->add_option("--out", ex.out)->required();

  StreamArgs st;
  auto* c_st = app.add_subcommand("stream", "Online extraction with the memory bank");
  c_st->add_option("--ckpt", st.ckpt)->required();
  c_st->add_option("--mix", st.mix, "Mixture WAV ('-' for stdin)")->required();
  c_st->add_option("--feat", st.feat, "Feature file")->required();
  c_st->add_option("--out", st.out)->required();
  c_st->add_option("--l-init", st.l_init, "Initialization window (s)");
  c_st->add_option("--l-win", st.l_win, "Maximum window (s)");
  c_st->add_option("--l-shift", st.l_shift, "Shift per step (s)");
  c_st->add_option("--theta", st.theta, "Anchor replacement threshold");
  c_st->add_option("--normalization", st.normalization, "none | overlap-rescale");
  c_st->add_option("--chunk", st.chunk, "Seconds of input per push");
  c_st->add_option("--log-attention", st.log, "Per-step attention and update log");
  c_st->add_option("--bank-out", st.bank_out, "Save the final memory bank");
  c_st->add_flag("--no-bank", st.no_bank, "Disable the memory bank (current embedding only)");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train-demo", "Utt + Seg training on one simulated mixture");
  c_tr->add_option("--config", tr.config, "Run config");
  c_tr->add_option("--out-ckpt", tr.out_ckpt)->required();
  c_tr->add_option("--steps", tr.steps, "Override train.steps");
  c_tr->add_option("--log", tr.log, "Loss log path (default stdout)");

  std::string gc_config;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of L_utt and L_seg");
  c_gc->add_option("--config", gc_config, "Run config");

  std::string ref, est;
  auto* c_me = app.add_subcommand("metrics", "SI-SNR and simple SDR of an estimate");
  c_me->add_option("--ref", ref)->required();
  c_me->add_option("--est", est)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (c_sim->parsed()) return run_simulate(sim);
    if (c_ex->parsed()) return run_extract(ex);
    if (c_st->parsed()) return run_stream(st);
    if (c_tr->parsed()) return run_train_demo(tr);
    if (c_gc->parsed()) return run_gradcheck(gc_config);
    if (c_me->parsed()) return run_metrics(ref, est);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "momuse: %s\n", e.what());
    return 2;
  }
  return 1;
}
