// Copyright 2026 The attnqat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Types shared by the reference and tiled attention implementations.

#ifndef ATTNQAT_ATTENTION_H_
#define ATTNQAT_ATTENTION_H_

#include <cstddef>
#include <optional>
#include <vector>

#include "attnqat/tensor.h"

namespace attnqat {

// Attention outputs for one head. L is the per-row log-sum-exp of the scaled
// scores; softmax statistics are always kept in double precision.
template <Real T>
struct AttnOutputs {
  Tensor<T> O;
  std::vector<double> L;
  // Output accumulated with unquantized probabilities. Present only in
  // training mode, where the backward pass needs it for rowsum(dO * O').
  std::optional<Tensor<T>> O_prime;
};

template <Real T>
struct AttnGrads {
  Tensor<T> dQ;
  Tensor<T> dK;
  Tensor<T> dV;
};

// How the attention probabilities are brought to FP4 in the forward pass.
//
// kNormalized quantizes P = exp(S - L), the same normalized probabilities
// the backward pass recomputes. The tiled forward obtains L from a first
// sweep over the key tiles, so results do not depend on the tiling.
//
// kRunningMax quantizes the unnormalized tile P~ = exp(S - m_running) inside
// the online-softmax loop and divides by l at the end. This grid depends on
// the key tiling and differs from the one the backward recomputes.
enum class PScaling { kNormalized, kRunningMax };

// SageAttention3-style outlier heuristics. smooth_q applies to the inference
// path only; training accepts smooth_k and two_level_p.
struct Sage3Options {
  bool smooth_q = false;
  bool smooth_k = false;
  bool two_level_p = false;

  bool any() const { return smooth_q || smooth_k || two_level_p; }
};

// Right-aligned causal mask: query i sees keys j <= i + (n_k - n_q).
inline bool CausalVisible(std::size_t i, std::size_t j, std::size_t n_q,
                          std::size_t n_k) {
  return j <= i + (n_k - n_q);
}

}  // namespace attnqat

#endif  // ATTNQAT_ATTENTION_H_
