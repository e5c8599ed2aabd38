// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "momuse/error.hpp"
#include "momuse/numerics.hpp"

namespace momuse {

inline constexpr double kDefaultTheta = 0.7;

struct BlockDecision {
  double a_c_mean = 0.0;
  bool replaced = false;
};

using UpdateDecision = std::vector<BlockDecision>;

/// Per-block anchor speaker embeddings plus the replacement threshold.
///
/// `Embedding` is Tensor<T> for inference. Segment training instantiates it
/// with Var<T> so gradients reach the step-1 embeddings through the anchors.
template <typename Embedding>
class MemoryBank {
 public:
  explicit MemoryBank(double theta = kDefaultTheta) : theta_(theta) {
    if (!(theta > 0.0 && theta < 1.0)) throw ContractError("memory bank: theta must lie in (0, 1)");
  }

  bool empty() const { return anchors_.empty(); }
  std::size_t size() const { return anchors_.size(); }
  double theta() const { return theta_; }
  const std::vector<Embedding>& anchors() const { return anchors_; }
  const Embedding& anchor(std::size_t r) const { return anchors_.at(r); }
  const std::vector<int>& last_update_step() const { return last_update_; }

  /// Stores copies of the step-1 embeddings, one per block.
  void init(std::span<const Embedding> embeddings) {
    if (!empty()) throw StateError("memory bank: already initialized");
    if (embeddings.empty()) throw ContractError("memory bank: need one embedding per block");
    anchors_.assign(embeddings.begin(), embeddings.end());
    last_update_.assign(anchors_.size(), 1);
  }

  /// Replaces anchor r with e_c when a_c_mean > theta (strict).
  BlockDecision maybe_update(std::size_t r, const Embedding& e_c, double a_c_mean, int step) {
    if (empty()) throw StateError("memory bank: update before initialization");
    if (step < 2) throw ContractError("memory bank: updates start at step 2; step 1 initializes");
    if (r >= anchors_.size()) throw ContractError("memory bank: block index " + std::to_string(r) + " out of range");
    BlockDecision d{a_c_mean, a_c_mean > theta_};
    if (d.replaced) {
      anchors_[r] = e_c;
      last_update_[r] = step;
    }
    return d;
  }

  /// Restores a previously serialized state.
  void restore(std::vector<Embedding> anchors, std::vector<int> last_update) {
    if (anchors.size() != last_update.size()) throw ContractError("memory bank: inconsistent restore");
    anchors_ = std::move(anchors);
    last_update_ = std::move(last_update);
  }

 private:
  std::vector<Embedding> anchors_;
  std::vector<int> last_update_;
  double theta_;
};

template <typename Embedding>
MemoryBank<Embedding> init_bank(std::span<const Embedding> embeddings, double theta = kDefaultTheta) {
  MemoryBank<Embedding> bank(theta);
  bank.init(embeddings);
  return bank;
}

/// Time average of an attention row; the update criterion.
template <typename T>
double mean_attention(const Tensor<T>& a_c) {
  if (a_c.empty()) throw InputTooShortError("mean_attention: empty attention row");
  double acc = 0.0;
  for (T v : a_c.values()) acc += v;
  return acc / static_cast<double>(a_c.size());
}

}  // namespace momuse
