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

// SageAttention3's training-free heuristics:
//
//   smoothing      gamma(Q_i) = Q_i - mean(Q_i) per query tile,
//                  gamma(K)   = K - mean(K) over all tokens
//   decomposition  S_ij = gamma(Q_i) gamma(K_j)^T + dS_ij + b, with
//                  dS_ij = q_i gamma(K_j)^T and b = q_i k^T + gamma(Q_i) k^T
//   two-level P    each row is scaled so its max is 448 * 6 before FP4
//                  quantization, and the product is divided back afterwards
//
// Only the zero-mean residual goes through FP4; dS and b stay in working
// precision.

#ifndef ATTNQAT_SAGE3_H_
#define ATTNQAT_SAGE3_H_

#include <cstddef>
#include <vector>

#include "attnqat/flash.h"
#include "attnqat/quant_tensor.h"
#include "attnqat/tensor.h"

namespace attnqat {

inline constexpr double kTwoLevelRowMax = kE4M3Max * kFp4Max;  // 2688

template <Real T>
struct SmoothedPair {
  Tensor<T> gamma_q;  // n_q x d
  Tensor<T> gamma_k;  // n_k x d
  Tensor<T> q_bar;    // (n_q / b_q) x d, one mean row per query tile
  Tensor<T> k_bar;    // 1 x d
  std::size_t b_q = 0;
};

template <Real T>
SmoothedPair<T> Smooth(const Tensor<T>& Q, const Tensor<T>& K, std::size_t b_q);

// Column mean of x as a 1 x d row, accumulated in double.
template <Real T>
Tensor<T> TokenMean(const Tensor<T>& x, std::size_t row0, std::size_t rows);

template <Real T>
struct ScoreDecomposition {
  Tensor<T> main;     // b_q x b_k: gamma(Q_i) gamma(K_j)^T
  Tensor<T> delta_s;  // 1 x b_k:   q_i gamma(K_j)^T, shared by every row
  Tensor<T> bias;     // b_q x 1:   q_i k^T + gamma(Q_i) k^T, shared by every column

  // main + delta_s + bias broadcast to b_q x b_k.
  Tensor<T> Reconstruct() const;
};

// Decomposes the unscaled scores of query tile `q_tile` against keys
// [k_row0, k_row0 + b_k).
template <Real T>
ScoreDecomposition<T> DecomposeScores(const SmoothedPair<T>& pair,
                                      std::size_t q_tile, std::size_t k_row0,
                                      std::size_t b_k);

template <Real T>
struct TwoLevelP {
  QuantTensor codes;                // quantized P * r, row by row
  std::vector<double> row_factor;   // r_i

  // Dequantize(codes) with row i divided by r_i.
  Tensor<T> Unscaled() const;
};

// r_i = 2688 / rowmax_i (1 for an all-zero row); codes = Quantize(P * r).
// Throws InvalidValue for negative entries.
template <Real T>
TwoLevelP<T> QuantizePTwoLevel(const Tensor<T>& P, BlockSpec spec);

// Unscaled(QuantizePTwoLevel(P)): the fake-quantized counterpart.
template <Real T>
Tensor<T> TwoLevelFakeQuantize(const Tensor<T>& P, BlockSpec spec);

// K operand of the training path with K smoothing: fq(K - k) + k.
template <Real T>
Tensor<T> SmoothedFakeQuantizedK(const Tensor<T>& K, BlockSpec spec);

// Inference forward with the heuristics selected in cfg.sage: smoothing
// feeds the FP4 score product, dS and b are added in working precision, and
// two-level quantization replaces plain quantization of P.
template <Real T>
AttnOutputs<T> Sage3Forward(const Tensor<T>& Q, const Tensor<T>& K,
                            const Tensor<T>& V, const TileConfig& cfg);

}  // namespace attnqat

#endif  // ATTNQAT_SAGE3_H_
