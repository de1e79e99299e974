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

// Brute-force O(N^2) attention. Every intermediate is materialized, and the
// backward pass uses the explicit softmax Jacobian row term
// delta_i = sum_j P_ij dP_ij rather than any shortcut through the output.

#ifndef ATTNQAT_ORACLE_H_
#define ATTNQAT_ORACLE_H_

#include <vector>

#include "attnqat/attention.h"
#include "attnqat/fp4_codec.h"
#include "attnqat/tensor.h"

namespace attnqat {

// Which matmul operands are fake-quantized.
struct QuantPoints {
  bool q = true;
  bool k = true;
  bool v = true;
  bool p = true;

  static QuantPoints All() { return {}; }
  static QuantPoints None() { return {false, false, false, false}; }
  bool any() const { return q || k || v || p; }
};

struct OracleOptions {
  BlockSpec spec = BlockSpec::Nvfp4();
  QuantPoints points;
  bool causal = false;
  // kRunningMax reproduces a single-tile running-max forward: P~ =
  // exp(S - rowmax) is quantized and the products are divided by l.
  PScaling p_scaling = PScaling::kNormalized;
  bool two_level_p = false;
  bool smooth_k = false;
};

template <Real T>
struct OracleTrace {
  Tensor<T> S;       // scaled scores, -inf where masked
  Tensor<T> P;       // exp(S - L)
  Tensor<T> P_fq;    // quantized probabilities feeding O
  std::vector<double> L;
  Tensor<T> O;
  Tensor<T> O_prime;
  bool causal = false;
  // Operands after fake quantization (the STE forward copies).
  Tensor<T> Qf;
  Tensor<T> Kf;
  Tensor<T> Vf;
};

// Throws ShapeError for inconsistent shapes, when causal has n_q > n_k, or
// when a quant point is on and d (for Q/K) or n_k (for V, P) is not a
// multiple of the block size.
template <Real T>
OracleTrace<T> OracleForward(const Tensor<T>& Q, const Tensor<T>& K,
                             const Tensor<T>& V, const OracleOptions& opts);

// delta_i = sum_j P_ij (dO_i . Vf_j), computed from the materialized rows.
template <Real T>
std::vector<double> OracleDelta(const OracleTrace<T>& trace, const Tensor<T>& dO);

template <Real T>
AttnGrads<T> OracleBackward(const OracleTrace<T>& trace, const Tensor<T>& dO);

}  // namespace attnqat

#endif  // ATTNQAT_ORACLE_H_
