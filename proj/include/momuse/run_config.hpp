// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Model/bank <-> checkpoint conversion, key=value run configuration and the
// simulation manifest.

#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "momuse/data_sim.hpp"
#include "momuse/error.hpp"
#include "momuse/io.hpp"
#include "momuse/model.hpp"
#include "momuse/momentum.hpp"
#include "momuse/streaming.hpp"
#include "momuse/training.hpp"

namespace momuse {

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kMetaConfig = "meta.model_config";

namespace detail {

inline std::vector<std::size_t ModelConfig::*> config_fields() {
  return {&ModelConfig::hidden,     &ModelConfig::kernel,      &ModelConfig::stride,     &ModelConfig::blocks,
          &ModelConfig::visual_dim, &ModelConfig::tcn_depth,   &ModelConfig::speakers,   &ModelConfig::sample_rate,
          &ModelConfig::video_fps,  &ModelConfig::spk_layers,  &ModelConfig::spk_kernel, &ModelConfig::tcn_kernel};
}

}  // namespace detail

/// All parameters in visit order plus the config as a "meta." tensor.
template <typename T>
Checkpoint model_to_checkpoint(ModelParams<T>& m) {
  Checkpoint c;
  const auto fields = detail::config_fields();
  Tensor<float> meta({fields.size()});
  for (std::size_t i = 0; i < fields.size(); ++i) meta[i] = static_cast<float>(m.config.*fields[i]);
  c.add(kMetaConfig, std::move(meta));
  m.visit([&](Param<T>& p) { c.add(p.name, p.value.template cast<float>()); });
  return c;
}

inline ModelConfig config_from_checkpoint(const Checkpoint& c) {
  const NamedTensor* meta = c.find(kMetaConfig);
  const auto fields = detail::config_fields();
  if (!meta || meta->tensor.size() != fields.size()) throw FormatError("checkpoint: missing or malformed " + std::string(kMetaConfig));
  ModelConfig cfg;
  for (std::size_t i = 0; i < fields.size(); ++i) cfg.*fields[i] = static_cast<std::size_t>(meta->tensor[i]);
  cfg.validate();
  return cfg;
}

/// Rebuilds a model; every parameter must be present with its exact shape.
template <typename T>
ModelParams<T> model_from_checkpoint(const Checkpoint& c) {
  ModelParams<T> m = ModelParams<T>::init(config_from_checkpoint(c), 0);
  std::string problems;
  m.visit([&](Param<T>& p) {
    const NamedTensor* e = c.find(p.name);
    if (!e) {
      problems += " missing " + p.name + ";";
    } else if (e->tensor.shape() != p.value.shape()) {
      problems += " " + p.name + " has shape " + detail::shape_str(e->tensor.shape()) + ", expected " +
                  detail::shape_str(p.value.shape()) + ";";
    } else {
      p.value = e->tensor.template cast<T>();
    }
  });
  if (!problems.empty()) throw FormatError("checkpoint:" + problems);
  return m;
}

/// Adds "bank.anchor{r}", "bank.last_update" and "bank.theta" entries.
template <typename T>
void bank_to_checkpoint(const MemoryBank<Tensor<T>>& bank, Checkpoint& c) {
  if (bank.empty()) throw StateError("bank: nothing to save before initialization");
  for (std::size_t r = 0; r < bank.size(); ++r) c.add("bank.anchor" + std::to_string(r), bank.anchor(r).template cast<float>());
  Tensor<float> last({bank.size()});
  for (std::size_t r = 0; r < bank.size(); ++r) last[r] = static_cast<float>(bank.last_update_step()[r]);
  c.add("bank.last_update", std::move(last));
  c.add("bank.theta", Tensor<float>({1}, std::vector<float>{static_cast<float>(bank.theta())}));
}

template <typename T>
MemoryBank<Tensor<T>> bank_from_checkpoint(const Checkpoint& c) {
  const NamedTensor* theta = c.find("bank.theta");
  const NamedTensor* last = c.find("bank.last_update");
  if (!theta || !last) throw FormatError("checkpoint: no memory bank entries");
  MemoryBank<Tensor<T>> bank(theta->tensor[0]);
  std::vector<Tensor<T>> anchors;
  std::vector<int> steps;
  for (std::size_t r = 0; r < last->tensor.size(); ++r) {
    const NamedTensor* a = c.find("bank.anchor" + std::to_string(r));
    if (!a) throw FormatError("checkpoint: missing bank.anchor" + std::to_string(r));
    anchors.push_back(a->tensor.template cast<T>());
    steps.push_back(static_cast<int>(last->tensor[r]));
  }
  bank.restore(std::move(anchors), std::move(steps));
  return bank;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  StreamConfig stream;
  LossWeights weights;
  double theta = kDefaultTheta;
  std::uint64_t init_seed = 1;   // parameter init
  std::uint64_t data_seed = 1;   // simulated data
  std::uint64_t train_seed = 1;  // impairments and segment windows
  std::size_t steps = 200;
  double seconds = 4.0;          // demo utterance length
  double snr_db = 0.0;
  double ratio_max = 0.8;
  double gradcheck_eps = 1e-5;
  std::size_t gradcheck_samples = 256;
};

namespace detail {

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') throw FormatError("config: " + key + " expects an unsigned integer, got '" + v + "'");
  return static_cast<std::size_t>(out);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw FormatError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline std::string fmt_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline const std::map<std::string, ConfigKey>& config_keys() {
  static const std::map<std::string, ConfigKey> keys = [] {
    std::map<std::string, ConfigKey> k;
    auto size_key = [&](const std::string& name, auto getter) {
      k[name] = {[=](RunConfig& c, const std::string& v) { getter(c) = parse_size(name, v); },
                 [=](const RunConfig& c) { return std::to_string(getter(const_cast<RunConfig&>(c))); }};
    };
    auto real_key = [&](const std::string& name, auto getter) {
      k[name] = {[=](RunConfig& c, const std::string& v) { getter(c) = parse_real(name, v); },
                 [=](const RunConfig& c) { return fmt_real(getter(const_cast<RunConfig&>(c))); }};
    };
    auto seed_key = [&](const std::string& name, auto getter) {
      k[name] = {[=](RunConfig& c, const std::string& v) { getter(c) = parse_size(name, v); },
                 [=](const RunConfig& c) { return std::to_string(getter(const_cast<RunConfig&>(c))); }};
    };
    size_key("model.hidden", [](RunConfig& c) -> std::size_t& { return c.model.hidden; });
    size_key("model.kernel", [](RunConfig& c) -> std::size_t& { return c.model.kernel; });
    size_key("model.stride", [](RunConfig& c) -> std::size_t& { return c.model.stride; });
    size_key("model.blocks", [](RunConfig& c) -> std::size_t& { return c.model.blocks; });
    size_key("model.visual_dim", [](RunConfig& c) -> std::size_t& { return c.model.visual_dim; });
    size_key("model.tcn_depth", [](RunConfig& c) -> std::size_t& { return c.model.tcn_depth; });
    size_key("model.speakers", [](RunConfig& c) -> std::size_t& { return c.model.speakers; });
    size_key("model.sample_rate", [](RunConfig& c) -> std::size_t& { return c.model.sample_rate; });
    size_key("model.video_fps", [](RunConfig& c) -> std::size_t& { return c.model.video_fps; });
    size_key("model.spk_layers", [](RunConfig& c) -> std::size_t& { return c.model.spk_layers; });
    size_key("model.spk_kernel", [](RunConfig& c) -> std::size_t& { return c.model.spk_kernel; });
    size_key("model.tcn_kernel", [](RunConfig& c) -> std::size_t& { return c.model.tcn_kernel; });
    real_key("stream.l_init", [](RunConfig& c) -> double& { return c.stream.l_init; });
    real_key("stream.l_win", [](RunConfig& c) -> double& { return c.stream.l_win; });
    real_key("stream.l_shift", [](RunConfig& c) -> double& { return c.stream.l_shift; });
    real_key("stream.g_min", [](RunConfig& c) -> double& { return c.stream.g_min; });
    real_key("stream.g_max", [](RunConfig& c) -> double& { return c.stream.g_max; });
    k["stream.normalization"] = {
        [](RunConfig& c, const std::string& v) { c.stream.normalization = normalization_from_string(v); },
        [](const RunConfig& c) { return std::string(to_string(c.stream.normalization)); }};
    real_key("loss.alpha", [](RunConfig& c) -> double& { return c.weights.alpha; });
    real_key("loss.beta", [](RunConfig& c) -> double& { return c.weights.beta; });
    real_key("loss.gamma", [](RunConfig& c) -> double& { return c.weights.gamma; });
    real_key("loss.lambda", [](RunConfig& c) -> double& { return c.weights.lambda; });
    real_key("theta", [](RunConfig& c) -> double& { return c.theta; });
    seed_key("seed.init", [](RunConfig& c) -> std::uint64_t& { return c.init_seed; });
    seed_key("seed.data", [](RunConfig& c) -> std::uint64_t& { return c.data_seed; });
    seed_key("seed.train", [](RunConfig& c) -> std::uint64_t& { return c.train_seed; });
    size_key("train.steps", [](RunConfig& c) -> std::size_t& { return c.steps; });
    real_key("train.seconds", [](RunConfig& c) -> double& { return c.seconds; });
    real_key("train.snr_db", [](RunConfig& c) -> double& { return c.snr_db; });
    real_key("train.ratio_max", [](RunConfig& c) -> double& { return c.ratio_max; });
    real_key("gradcheck.eps", [](RunConfig& c) -> double& { return c.gradcheck_eps; });
    size_key("gradcheck.samples", [](RunConfig& c) -> std::size_t& { return c.gradcheck_samples; });
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  c.model.validate();
  c.weights.validate();
  StreamConfig s = c.stream;
  s.sample_rate = c.model.sample_rate;
  s.validate();
  if (!(c.theta > 0.0 && c.theta < 1.0)) throw ContractError("config: theta must lie in (0, 1)");
  if (!(c.ratio_max >= 0.0 && c.ratio_max < 1.0)) throw ContractError("config: train.ratio_max must lie in [0, 1)");
}

inline RunConfig parse_run_config(std::istream& in, const std::string& what = "config") {
  std::set<std::string> known;
  for (const auto& [k, _] : detail::config_keys()) known.insert(k);
  RunConfig c;
  for (const auto& [k, v] : parse_key_values(in, known, what)) detail::config_keys().at(k).set(c, v);
  c.stream.sample_rate = c.model.sample_rate;
  validate(c);
  return c;
}

inline RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config '" + path + "'");
  return parse_run_config(in, path);
}

/// Every key with its current value, one per line.
inline std::string format_run_config(const RunConfig& c) {
  std::string out;
  for (const auto& [k, key] : detail::config_keys()) out += k + " = " + key.get(c) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string mixture, target, features;
  std::size_t label = 0;
  ImpairmentKind impairment = ImpairmentKind::VisualMissing;
  double ratio = 0.0;
  double realized_ratio = 0.0;
  double snr_db = 0.0;
};

inline constexpr const char* kManifestHeader = "mixture\ttarget\tfeatures\tlabel\timpairment\tratio\trealized_ratio\tsnr_db";

inline void manifest_write(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open manifest '" + path + "' for writing");
  out << kManifestHeader << "\n";
  for (const auto& r : records) {
    out << r.mixture << '\t' << r.target << '\t' << r.features << '\t' << r.label << '\t' << to_string(r.impairment)
        << '\t' << detail::fmt_real(r.ratio) << '\t' << detail::fmt_real(r.realized_ratio) << '\t'
        << detail::fmt_real(r.snr_db) << "\n";
  }
}

inline std::vector<ManifestRecord> manifest_read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) throw FormatError(path + ": missing manifest header");
  std::vector<ManifestRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, '\t');) f.push_back(cell);
    if (f.size() != 8) throw FormatError(path + ":" + std::to_string(lineno) + ": expected 8 fields");
    ManifestRecord r;
    r.mixture = f[0], r.target = f[1], r.features = f[2];
    r.label = detail::parse_size("label", f[3]);
    r.impairment = impairment_from_string(f[4]);
    r.ratio = detail::parse_real("ratio", f[5]);
    r.realized_ratio = detail::parse_real("realized_ratio", f[6]);
    r.snr_db = detail::parse_real("snr_db", f[7]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace momuse
