// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <vector>

#include "momuse/momuse.hpp"

namespace momuse::testing {

template <typename T>
Tensor<T> random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.uniform(-1.0, 1.0));
  return t;
}

template <typename T>
std::vector<T> random_signal(std::size_t n, std::uint64_t seed, double scale = 0.1) {
  std::vector<T> out(n);
  Rng rng(seed);
  for (auto& v : out) v = static_cast<T>(scale * rng.normal());
  return out;
}

/// Fast geometry for tests: 1600 Hz, 25 fps, 16 latent steps per frame.
inline ModelConfig small_config() {
  ModelConfig c;
  c.hidden = 8;
  c.kernel = 8;
  c.stride = 4;
  c.blocks = 2;
  c.visual_dim = 4;
  c.tcn_depth = 2;
  c.speakers = 4;
  c.sample_rate = 1600;
  c.video_fps = 25;
  return c;
}

/// Default 16 kHz geometry with a narrow network.
inline ModelConfig narrow_config() {
  ModelConfig c;
  c.hidden = 8;
  c.blocks = 2;
  return c;
}

}  // namespace momuse::testing
