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

#include "attnqat/oracle.h"

#include <cmath>
#include <limits>
#include <string>

#include "attnqat/quant_tensor.h"
#include "attnqat/sage3.h"

namespace attnqat {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

template <Real T>
OracleTrace<T> OracleForward(const Tensor<T>& Q, const Tensor<T>& K,
                             const Tensor<T>& V, const OracleOptions& opts) {
  RequireMatrix(Q, "OracleForward");
  RequireMatrix(K, "OracleForward");
  RequireMatrix(V, "OracleForward");
  const std::size_t n_q = Q.rows(), n_k = K.rows(), d = Q.cols();
  if (K.cols() != d || V.cols() != d || V.rows() != n_k) {
    throw ShapeError("OracleForward: Q " + ShapeString(Q.dims()) + ", K " +
                     ShapeString(K.dims()) + ", V " + ShapeString(V.dims()));
  }
  if (opts.causal && n_q > n_k) throw ShapeError("causal attention requires n_q <= n_k");
  const QuantPoints& pts = opts.points;
  const std::size_t bs = opts.spec.block_size;
  if (pts.any()) {
    opts.spec.Validate();
    if (d % bs != 0 || ((pts.v || pts.p) && n_k % bs != 0)) {
      throw ShapeError("OracleForward: d and n_k must be multiples of the block size");
    }
  }
  const std::size_t group = pts.any() ? bs : 1;

  OracleTrace<T> t;
  t.causal = opts.causal;
  t.Qf = pts.q ? FakeQuantize(Q, opts.spec) : Q;
  if (pts.k) {
    t.Kf = opts.smooth_k ? SmoothedFakeQuantizedK(K, opts.spec) : FakeQuantize(K, opts.spec);
  } else {
    t.Kf = K;
  }
  t.Vf = pts.v ? FakeQuantize(V, opts.spec, BlockAxis::kColumn) : V;

  const T sqrt_d = std::sqrt(static_cast<T>(d));
  t.S = MatmulNT(t.Qf, t.Kf, group);
  for (T& v : t.S.data()) v /= sqrt_d;
  if (opts.causal) {
    for (std::size_t i = 0; i < n_q; ++i) {
      for (std::size_t j = 0; j < n_k; ++j) {
        if (!CausalVisible(i, j, n_q, n_k)) t.S(i, j) = -std::numeric_limits<T>::infinity();
      }
    }
  }

  // Row max and log-sum-exp in double.
  t.L.assign(n_q, 0.0);
  std::vector<double> row_max(n_q, kNegInf), row_sum(n_q, 0.0);
  for (std::size_t i = 0; i < n_q; ++i) {
    for (T v : t.S.row(i)) row_max[i] = std::max(row_max[i], static_cast<double>(v));
    for (T v : t.S.row(i)) row_sum[i] += std::exp(static_cast<double>(v) - row_max[i]);
    t.L[i] = row_max[i] + std::log(row_sum[i]);
  }

  auto quantize_p = [&](const Tensor<T>& p) {
    if (!pts.p) return p;
    return opts.two_level_p ? TwoLevelFakeQuantize(p, opts.spec) : FakeQuantize(p, opts.spec);
  };
  const Tensor<T> v_t = Transpose(t.Vf);

  t.P = Tensor<T>(n_q, n_k);
  if (opts.p_scaling == PScaling::kNormalized) {
    for (std::size_t i = 0; i < n_q; ++i) {
      for (std::size_t j = 0; j < n_k; ++j) {
        t.P(i, j) = static_cast<T>(std::exp(static_cast<double>(t.S(i, j)) - t.L[i]));
      }
    }
    t.P_fq = quantize_p(t.P);
    t.O = MatmulNT(t.P_fq, v_t, group);
    t.O_prime = MatmulNT(t.P, v_t, group);
    return t;
  }

  // Running-max semantics over a single key tile.
  Tensor<T> p_tilde(n_q, n_k);
  std::vector<double> l(n_q, 0.0);
  for (std::size_t i = 0; i < n_q; ++i) {
    for (std::size_t j = 0; j < n_k; ++j) {
      p_tilde(i, j) = static_cast<T>(std::exp(static_cast<double>(t.S(i, j)) - row_max[i]));
      l[i] += static_cast<double>(p_tilde(i, j));
    }
    t.L[i] = row_max[i] + std::log(l[i]);
  }
  const Tensor<T> pq_tilde = quantize_p(p_tilde);
  t.O = MatmulNT(pq_tilde, v_t, group);
  t.O_prime = MatmulNT(p_tilde, v_t, group);
  t.P_fq = Tensor<T>(n_q, n_k);
  for (std::size_t i = 0; i < n_q; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      t.O(i, c) = static_cast<T>(static_cast<double>(t.O(i, c)) / l[i]);
      t.O_prime(i, c) = static_cast<T>(static_cast<double>(t.O_prime(i, c)) / l[i]);
    }
    for (std::size_t j = 0; j < n_k; ++j) {
      t.P(i, j) = static_cast<T>(static_cast<double>(p_tilde(i, j)) / l[i]);
      t.P_fq(i, j) = static_cast<T>(static_cast<double>(pq_tilde(i, j)) / l[i]);
    }
  }
  return t;
}

template <Real T>
std::vector<double> OracleDelta(const OracleTrace<T>& trace, const Tensor<T>& dO) {
  if (dO.rows() != trace.O.rows() || dO.cols() != trace.O.cols()) {
    throw ShapeError("OracleDelta: dO " + ShapeString(dO.dims()) + " vs O " +
                     ShapeString(trace.O.dims()));
  }
  const Tensor<T> dP = MatmulNT(dO, trace.Vf);
  std::vector<double> delta(trace.P.rows(), 0.0);
  for (std::size_t i = 0; i < trace.P.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < trace.P.cols(); ++j) {
      s += static_cast<double>(trace.P(i, j)) * static_cast<double>(dP(i, j));
    }
    delta[i] = s;
  }
  return delta;
}

template <Real T>
AttnGrads<T> OracleBackward(const OracleTrace<T>& trace, const Tensor<T>& dO) {
  const std::vector<double> delta = OracleDelta(trace, dO);
  const Tensor<T> dP = MatmulNT(dO, trace.Vf);
  const double sqrt_d = std::sqrt(static_cast<double>(static_cast<T>(trace.Qf.cols())));
  Tensor<T> dS(trace.P.rows(), trace.P.cols());
  for (std::size_t i = 0; i < dS.rows(); ++i) {
    for (std::size_t j = 0; j < dS.cols(); ++j) {
      dS(i, j) = static_cast<T>(static_cast<double>(trace.P(i, j)) *
                                (static_cast<double>(dP(i, j)) - delta[i]) / sqrt_d);
    }
  }
  AttnGrads<T> g;
  g.dV = Matmul(Transpose(trace.P_fq), dO);
  g.dQ = Matmul(dS, trace.Kf);
  g.dK = Matmul(Transpose(dS), trace.Qf);
  return g;
}

#define ATTNQAT_INSTANTIATE(T)                                                        \
  template OracleTrace<T> OracleForward(const Tensor<T>&, const Tensor<T>&,           \
                                        const Tensor<T>&, const OracleOptions&);      \
  template std::vector<double> OracleDelta(const OracleTrace<T>&, const Tensor<T>&);  \
  template AttnGrads<T> OracleBackward(const OracleTrace<T>&, const Tensor<T>&);

ATTNQAT_INSTANTIATE(float)
ATTNQAT_INSTANTIATE(double)

#undef ATTNQAT_INSTANTIATE

}  // namespace attnqat
