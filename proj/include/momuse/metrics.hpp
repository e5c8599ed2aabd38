// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "momuse/error.hpp"
#include "momuse/numerics.hpp"

namespace momuse {

inline constexpr double kEnergyEps = 1e-8;
inline constexpr double kDbCap = 80.0;

namespace detail {

/// Zero-mean copies plus the projection quantities of SI-SNR, held in the
/// accumulator type A.
template <typename A>
struct SiSnrParts {
  std::vector<A> target, estimate;  // zero-meaned
  A alpha = 0;                      // <estimate, target> / ||target||^2
  A signal = 0;                     // ||alpha * target||^2
  A noise = 0;                      // ||estimate - alpha * target||^2
};

template <typename T, typename A = acc_t<T>>
SiSnrParts<A> si_snr_parts(std::span<const T> target, std::span<const T> estimate) {
  if (target.size() != estimate.size()) throw DimensionError("si-snr: length mismatch");
  if (target.size() < 2) throw InputTooShortError("si-snr: need at least two samples");
  SiSnrParts<A> p;
  const auto n = static_cast<A>(target.size());
  A mt = 0, me = 0;
  for (std::size_t i = 0; i < target.size(); ++i) mt += target[i], me += estimate[i];
  mt /= n, me /= n;
  p.target.resize(target.size());
  p.estimate.resize(target.size());
  A tt = 0, et = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    p.target[i] = target[i] - mt;
    p.estimate[i] = estimate[i] - me;
    tt += p.target[i] * p.target[i];
    et += p.estimate[i] * p.target[i];
  }
  if (tt <= 1e-20) throw ContractError("si-snr: invalid target (zero energy after mean removal)");
  p.alpha = et / tt;
  p.signal = p.alpha * p.alpha * tt;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const A e = p.estimate[i] - p.alpha * p.target[i];
    p.noise += e * e;
  }
  return p;
}

template <typename A>
A ratio_db(A signal, A noise) {
  if (signal <= 0) return -static_cast<A>(kDbCap);
  return std::clamp(10 * std::log10(signal / (noise + static_cast<A>(kEnergyEps))), -static_cast<A>(kDbCap),
                    static_cast<A>(kDbCap));
}

}  // namespace detail

/// Scale-invariant SNR in dB, both signals zero-meaned, clamped to +-80 dB.
template <typename T>
double si_snr_metric(std::span<const T> target, std::span<const T> estimate) {
  const auto p = detail::si_snr_parts<T>(target, estimate);
  return static_cast<double>(detail::ratio_db(p.signal, p.noise));
}

/// Simple energy-ratio SDR, 10 log10(||x||^2 / ||x - x_hat||^2), clamped to
/// +-80 dB. Not the BSS-Eval SDR.
template <typename T>
double sdr_metric(std::span<const T> target, std::span<const T> estimate) {
  if (target.size() != estimate.size()) throw DimensionError("sdr: length mismatch");
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(target[i]) - estimate[i];
    sig += static_cast<double>(target[i]) * target[i];
    err += d * d;
  }
  if (sig <= 0.0) throw ContractError("sdr: invalid target (zero energy)");
  return detail::ratio_db(sig, err);
}

template <typename T>
double power(std::span<const T> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (T v : x) acc += static_cast<double>(v) * v;
  return acc / static_cast<double>(x.size());
}

}  // namespace momuse
