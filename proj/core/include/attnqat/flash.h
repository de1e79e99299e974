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

// Tiled, linear-memory FP4 attention.
//
//   FlashForwardInference  real quantization: Q, K, V are quantized once and
//                          both products run through Fp4mm.
//   FlashForwardTraining   fake quantization of Q, K, V and P, plus the
//                          auxiliary output O' built from unquantized P.
//   FlashBackward          recomputes P from L, fake-quantizes it exactly as
//                          the forward did, and uses rowsum(dO * O') for the
//                          softmax Jacobian's row term.
//
// V is blocked along the token axis (the contraction axis of P * V), so with
// quantization on, b_k and n_k must be multiples of the block size and d must
// be one too.

#ifndef ATTNQAT_FLASH_H_
#define ATTNQAT_FLASH_H_

#include <cstddef>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "attnqat/attention.h"
#include "attnqat/fp4_codec.h"
#include "attnqat/tensor.h"

namespace attnqat {

// Online-softmax state of a query tile after one key tile has been folded in.
struct RowStateEvent {
  const char* pass;  // "stats" (first sweep) or "online" (running-max loop)
  std::size_t q_tile;
  std::size_t k_tile;
  std::size_t row0;
  std::span<const double> m;
  std::span<const double> l;
};

// A quantized probability tile as consumed by the P*V (or dV) product.
// For the running-max forward the normalized probabilities are
// probs * exp(row_shift - L); row_shift is empty when probs are normalized.
struct ProbTileEvent {
  const char* pass;  // "forward" or "backward"
  std::size_t q_tile;
  std::size_t k_tile;
  std::size_t row0;
  std::size_t col0;
  const Tensor<double>& probs;
  std::span<const double> row_shift;
};

class TileObserver {
 public:
  virtual ~TileObserver() = default;
  virtual void OnRowState(const RowStateEvent&) {}
  virtual void OnProbabilities(const ProbTileEvent&) {}
};

// Writes one JSON object per RowState snapshot, one per line.
class JsonTraceWriter : public TileObserver {
 public:
  explicit JsonTraceWriter(std::ostream& out) : out_(out) {}
  void OnRowState(const RowStateEvent& e) override;

 private:
  std::ostream& out_;
};

enum class BwdVariant {
  kCorrect,       // D from O', recomputed P fake-quantized
  kLowPrecO,      // D from O (the FP4-probability output)
  kNoFakeQuantP,  // dV from the unquantized recomputed P
  // Drop-in unquantized backward after an FP4 forward: no fake quantization
  // of Q, K, V or P, and D from O.
  kNaiveBf16,
};

// "correct", "lowpreco", "nofqp", "naive-bf16-bwd".
const char* ToString(BwdVariant v);
std::optional<BwdVariant> ParseBwdVariant(std::string_view s);

struct TileConfig {
  std::size_t b_q = 64;
  std::size_t b_k = 64;
  bool causal = false;
  BlockSpec spec = BlockSpec::Nvfp4();
  // false substitutes the identity for every quantizer (plain attention).
  bool quantize = true;
  PScaling p_scaling = PScaling::kNormalized;
  Sage3Options sage;
  // Forward: query tiles are spread over threads. Backward: key tiles are,
  // with per-thread dQ partials summed in ascending thread order. 1 runs
  // everything sequentially in a fixed order.
  unsigned threads = 1;
  TileObserver* observer = nullptr;
};

// Returns O and L. Throws ShapeError for inconsistent operands and TileError
// when b_q or b_k does not divide the sequence lengths.
template <Real T>
AttnOutputs<T> FlashForwardInference(const Tensor<T>& Q, const Tensor<T>& K,
                                     const Tensor<T>& V, const TileConfig& cfg);

// Returns O, L and O'.
template <Real T>
AttnOutputs<T> FlashForwardTraining(const Tensor<T>& Q, const Tensor<T>& K,
                                    const Tensor<T>& V, const TileConfig& cfg);

// Q, K, V are the original high-precision inputs; `fwd` is the training
// forward's result on the same inputs and config. Throws MissingOPrime when a
// variant that reads O' gets a forward result without it.
template <Real T>
AttnGrads<T> FlashBackward(const Tensor<T>& Q, const Tensor<T>& K,
                           const Tensor<T>& V, const Tensor<T>& dO,
                           const AttnOutputs<T>& fwd, const TileConfig& cfg,
                           BwdVariant variant = BwdVariant::kCorrect);

// Row term of the softmax Jacobian as the backward computes it:
// D_i = sum_c dO(i, c) * X(i, c), where X is O' (or O for the broken variants).
template <Real T>
std::vector<double> RowDot(const Tensor<T>& dO, const Tensor<T>& X);

}  // namespace attnqat

#endif  // ATTNQAT_FLASH_H_
