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

#include "attnqat/sage3.h"

#include <cmath>
#include <string>

namespace attnqat {

template <Real T>
Tensor<T> TokenMean(const Tensor<T>& x, std::size_t row0, std::size_t rows) {
  Tensor<T> mean(1, x.cols());
  if (rows == 0) return mean;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double s = 0.0;
    for (std::size_t r = row0; r < row0 + rows; ++r) s += static_cast<double>(x(r, c));
    mean(0, c) = static_cast<T>(s / static_cast<double>(rows));
  }
  return mean;
}

template <Real T>
SmoothedPair<T> Smooth(const Tensor<T>& Q, const Tensor<T>& K, std::size_t b_q) {
  RequireMatrix(Q, "Smooth");
  RequireMatrix(K, "Smooth");
  if (Q.cols() != K.cols()) throw ShapeError("Smooth: Q and K head dims differ");
  if (b_q == 0 || Q.rows() % b_q != 0) {
    throw ShapeError("Smooth: b_q " + std::to_string(b_q) + " does not divide n_q " +
                     std::to_string(Q.rows()));
  }
  SmoothedPair<T> out;
  out.b_q = b_q;
  const std::size_t tiles = Q.rows() / b_q;
  out.q_bar = Tensor<T>(tiles, Q.cols());
  out.gamma_q = Tensor<T>(Q.rows(), Q.cols());
  for (std::size_t t = 0; t < tiles; ++t) {
    const Tensor<T> mean = TokenMean(Q, t * b_q, b_q);
    for (std::size_t c = 0; c < Q.cols(); ++c) out.q_bar(t, c) = mean(0, c);
    for (std::size_t r = t * b_q; r < (t + 1) * b_q; ++r) {
      for (std::size_t c = 0; c < Q.cols(); ++c) out.gamma_q(r, c) = Q(r, c) - mean(0, c);
    }
  }
  out.k_bar = TokenMean(K, 0, K.rows());
  out.gamma_k = Tensor<T>(K.rows(), K.cols());
  for (std::size_t r = 0; r < K.rows(); ++r) {
    for (std::size_t c = 0; c < K.cols(); ++c) out.gamma_k(r, c) = K(r, c) - out.k_bar(0, c);
  }
  return out;
}

template <Real T>
Tensor<T> ScoreDecomposition<T>::Reconstruct() const {
  Tensor<T> s = main;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    for (std::size_t c = 0; c < s.cols(); ++c) s(r, c) += delta_s(0, c) + bias(r, 0);
  }
  return s;
}

template <Real T>
ScoreDecomposition<T> DecomposeScores(const SmoothedPair<T>& pair,
                                      std::size_t q_tile, std::size_t k_row0,
                                      std::size_t b_k) {
  const std::size_t d = pair.gamma_q.cols();
  const std::size_t q0 = q_tile * pair.b_q;
  if (q0 + pair.b_q > pair.gamma_q.rows() || k_row0 + b_k > pair.gamma_k.rows()) {
    throw ShapeError("DecomposeScores: tile out of range");
  }
  ScoreDecomposition<T> out;
  out.main = Tensor<T>(pair.b_q, b_k);
  MatmulNTAccumulate(pair.gamma_q, q0, pair.b_q, 0, pair.gamma_k, k_row0, b_k, 0, d,
                     1, out.main);
  out.delta_s = Tensor<T>(1, b_k);
  MatmulNTAccumulate(pair.q_bar, q_tile, 1, 0, pair.gamma_k, k_row0, b_k, 0, d, 1,
                     out.delta_s);
  out.bias = Tensor<T>(pair.b_q, 1);
  for (std::size_t r = 0; r < pair.b_q; ++r) {
    T qk = 0;
    T gk = 0;
    for (std::size_t c = 0; c < d; ++c) {
      qk += pair.q_bar(q_tile, c) * pair.k_bar(0, c);
      gk += pair.gamma_q(q0 + r, c) * pair.k_bar(0, c);
    }
    out.bias(r, 0) = qk + gk;
  }
  return out;
}

template <Real T>
Tensor<T> TwoLevelP<T>::Unscaled() const {
  Tensor<T> out = Dequantize<T>(codes);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (T& v : out.row(r)) v = static_cast<T>(static_cast<double>(v) / row_factor[r]);
  }
  return out;
}

template <Real T>
TwoLevelP<T> QuantizePTwoLevel(const Tensor<T>& P, BlockSpec spec) {
  RequireMatrix(P, "QuantizePTwoLevel");
  TwoLevelP<T> out;
  out.row_factor.assign(P.rows(), 1.0);
  Tensor<T> scaled(P.dims());
  for (std::size_t r = 0; r < P.rows(); ++r) {
    double rmax = 0.0;
    for (T v : P.row(r)) {
      if (!(v >= T{0})) throw InvalidValue("QuantizePTwoLevel: negative or NaN probability");
      rmax = std::max(rmax, static_cast<double>(v));
    }
    if (rmax > 0.0) out.row_factor[r] = kTwoLevelRowMax / rmax;
    for (std::size_t c = 0; c < P.cols(); ++c) {
      scaled(r, c) = static_cast<T>(static_cast<double>(P(r, c)) * out.row_factor[r]);
    }
  }
  out.codes = Quantize(scaled, spec);
  return out;
}

template <Real T>
Tensor<T> TwoLevelFakeQuantize(const Tensor<T>& P, BlockSpec spec) {
  return QuantizePTwoLevel(P, spec).Unscaled();
}

template <Real T>
Tensor<T> SmoothedFakeQuantizedK(const Tensor<T>& K, BlockSpec spec) {
  const Tensor<T> k_bar = TokenMean(K, 0, K.rows());
  Tensor<T> gamma(K.dims());
  for (std::size_t r = 0; r < K.rows(); ++r) {
    for (std::size_t c = 0; c < K.cols(); ++c) gamma(r, c) = K(r, c) - k_bar(0, c);
  }
  Tensor<T> out = FakeQuantize(gamma, spec);
  for (std::size_t r = 0; r < K.rows(); ++r) {
    for (std::size_t c = 0; c < K.cols(); ++c) out(r, c) += k_bar(0, c);
  }
  return out;
}

template <Real T>
AttnOutputs<T> Sage3Forward(const Tensor<T>& Q, const Tensor<T>& K,
                            const Tensor<T>& V, const TileConfig& cfg) {
  return FlashForwardInference(Q, K, V, cfg);
}

#define ATTNQAT_INSTANTIATE(T)                                                   \
  template struct ScoreDecomposition<T>;                                         \
  template struct TwoLevelP<T>;                                                  \
  template Tensor<T> TokenMean(const Tensor<T>&, std::size_t, std::size_t);      \
  template SmoothedPair<T> Smooth(const Tensor<T>&, const Tensor<T>&, std::size_t); \
  template ScoreDecomposition<T> DecomposeScores(const SmoothedPair<T>&,         \
                                                 std::size_t, std::size_t,       \
                                                 std::size_t);                   \
  template TwoLevelP<T> QuantizePTwoLevel(const Tensor<T>&, BlockSpec);          \
  template Tensor<T> TwoLevelFakeQuantize(const Tensor<T>&, BlockSpec);          \
  template Tensor<T> SmoothedFakeQuantizedK(const Tensor<T>&, BlockSpec);        \
  template AttnOutputs<T> Sage3Forward(const Tensor<T>&, const Tensor<T>&,       \
                                       const Tensor<T>&, const TileConfig&);

ATTNQAT_INSTANTIATE(float)
ATTNQAT_INSTANTIATE(double)

#undef ATTNQAT_INSTANTIATE

}  // namespace attnqat
