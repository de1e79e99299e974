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

#include "attnqat/flash.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <ostream>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnqat/quant_tensor.h"
#include "attnqat/sage3.h"

namespace attnqat {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Dims {
  std::size_t n_q, n_k, d;
};

Dims CheckShapes(const std::vector<std::size_t>& q, const std::vector<std::size_t>& k,
                 const std::vector<std::size_t>& v, const TileConfig& cfg) {
  if (q.size() != 2 || k.size() != 2 || v.size() != 2) {
    throw ShapeError("attention operands must be matrices");
  }
  const Dims dims{q[0], k[0], q[1]};
  if (k[1] != dims.d || v[1] != dims.d || v[0] != dims.n_k) {
    throw ShapeError("attention shapes: Q " + ShapeString(q) + ", K " + ShapeString(k) +
                     ", V " + ShapeString(v));
  }
  if (dims.n_q == 0 || dims.n_k == 0 || dims.d == 0) {
    throw ShapeError("attention operands must be non-empty");
  }
  if (cfg.causal && dims.n_q > dims.n_k) {
    throw ShapeError("causal attention requires n_q <= n_k");
  }
  if (cfg.b_q == 0 || cfg.b_k == 0 || dims.n_q % cfg.b_q != 0 || dims.n_k % cfg.b_k != 0) {
    throw TileError("tile sizes (" + std::to_string(cfg.b_q) + ", " +
                    std::to_string(cfg.b_k) + ") must divide (n_q, n_k) = (" +
                    std::to_string(dims.n_q) + ", " + std::to_string(dims.n_k) + ")");
  }
  if (cfg.quantize) {
    cfg.spec.Validate();
    const std::size_t bs = cfg.spec.block_size;
    if (dims.d % bs != 0 || cfg.b_k % bs != 0) {
      throw ShapeError("with quantization on, d (" + std::to_string(dims.d) +
                       ") and b_k (" + std::to_string(cfg.b_k) +
                       ") must be multiples of the block size " + std::to_string(bs));
    }
  }
  return dims;
}

// Whether any key of tile [j0, j0 + b_k) is visible to a query of tile
// [i0, i0 + b_q).
bool TileVisible(const TileConfig& cfg, const Dims& dims, std::size_t i0, std::size_t j0) {
  if (!cfg.causal) return true;
  return CausalVisible(i0 + cfg.b_q - 1, j0, dims.n_q, dims.n_k);
}

void ApplyCausalMask(const TileConfig& cfg, const Dims& dims, std::size_t i0,
                     std::size_t j0, auto& s) {
  if (!cfg.causal) return;
  using T = std::remove_cvref_t<decltype(s(0, 0))>;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    for (std::size_t c = 0; c < s.cols(); ++c) {
      if (!CausalVisible(i0 + r, j0 + c, dims.n_q, dims.n_k)) {
        s(r, c) = -std::numeric_limits<T>::infinity();
      }
    }
  }
}

template <Real T>
Tensor<double> ToDouble(const Tensor<T>& t) {
  return Cast<double>(t);
}

// Probability quantizer shared by forward and backward so both apply the
// same grid.
template <Real T>
Tensor<T> FakeQuantizeProbs(const Tensor<T>& p, const TileConfig& cfg) {
  if (!cfg.quantize) return p;
  if (cfg.sage.two_level_p) return TwoLevelFakeQuantize(p, cfg.spec);
  return FakeQuantize(p, cfg.spec);
}

// Fake-quantized operands in working precision (training path, and the
// inference path with quantization disabled).
template <Real T>
class DenseOperands {
 public:
  DenseOperands(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                const TileConfig& cfg, bool quantize)
      : cfg_(cfg), quantize_(quantize), group_(cfg.quantize ? cfg.spec.block_size : 1),
        sqrt_d_(std::sqrt(static_cast<T>(Q.cols()))) {
    if (quantize_) {
      q_ = FakeQuantize(Q, cfg.spec);
      k_ = cfg.sage.smooth_k ? SmoothedFakeQuantizedK(K, cfg.spec) : FakeQuantize(K, cfg.spec);
      v_t_ = FakeQuantize(Transpose(V), cfg.spec);
    } else {
      q_ = Q;
      k_ = K;
      v_t_ = Transpose(V);
    }
  }

  std::size_t d() const { return q_.cols(); }
  const Tensor<T>& q() const { return q_; }
  const Tensor<T>& k() const { return k_; }
  const Tensor<T>& v_t() const { return v_t_; }

  // s = Q_i K_j^T / sqrt(d) for rows [i0, i0 + s.rows()), keys [j0, ...).
  void Scores(std::size_t i0, std::size_t j0, Tensor<T>& s) const {
    s.fill(T{0});
    MatmulNTAccumulate(q_, i0, s.rows(), 0, k_, j0, s.cols(), 0, d(), group_, s);
    for (T& v : s.data()) v /= sqrt_d_;
  }

  Tensor<T> QuantizeProbs(const Tensor<T>& p) const {
    if (!quantize_) return p;
    return FakeQuantizeProbs(p, cfg_);
  }

  // acc += p * V_j, continuing each entry's running sum.
  void AccumulatePV(const Tensor<T>& p, std::size_t j0, Tensor<T>& acc) const {
    MatmulNTAccumulate(p, 0, p.rows(), 0, v_t_, 0, d(), j0, p.cols(), group_, acc);
  }

 private:
  const TileConfig& cfg_;
  bool quantize_;
  std::size_t group_;
  T sqrt_d_;
  Tensor<T> q_, k_, v_t_;
};

// Real-quantized operands: FP4 codes and scales, products through Fp4mm.
template <Real T>
class Fp4Operands {
 public:
  Fp4Operands(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
              const TileConfig& cfg)
      : cfg_(cfg), sqrt_d_(std::sqrt(static_cast<T>(Q.cols()))) {
    const Sage3Options& sage = cfg.sage;
    if (sage.smooth_q || sage.smooth_k) {
      pair_ = Smooth(Q, K, cfg.b_q);
      if (!sage.smooth_q) {
        pair_.gamma_q = Q;
        pair_.q_bar.fill(T{0});
      }
      if (!sage.smooth_k) {
        pair_.gamma_k = K;
        pair_.k_bar.fill(T{0});
      }
      q_ = Quantize(pair_.gamma_q, cfg.spec);
      k_ = Quantize(pair_.gamma_k, cfg.spec);
    } else {
      q_ = Quantize(Q, cfg.spec);
      k_ = Quantize(K, cfg.spec);
    }
    v_t_ = Quantize(V, cfg.spec, BlockAxis::kColumn);
  }

  std::size_t d() const { return q_.cols(); }

  void Scores(std::size_t i0, std::size_t j0, Tensor<T>& s) const {
    s.fill(T{0});
    const std::size_t nb = q_.blocks_per_row();
    Fp4mmAccumulate(QuantView{&q_, i0, s.rows(), 0, nb}, QuantView{&k_, j0, s.cols(), 0, nb},
                    s);
    if (cfg_.sage.smooth_q || cfg_.sage.smooth_k) {
      // Mean terms in working precision.
      const ScoreDecomposition<T> dec = DecomposeScores(pair_, i0 / cfg_.b_q, j0, s.cols());
      for (std::size_t r = 0; r < s.rows(); ++r) {
        for (std::size_t c = 0; c < s.cols(); ++c) s(r, c) += dec.delta_s(0, c) + dec.bias(r, 0);
      }
    }
    for (T& v : s.data()) v /= sqrt_d_;
  }

  // Quantization is fused into AccumulatePV.
  Tensor<T> QuantizeProbs(const Tensor<T>& p) const { return p; }

  void AccumulatePV(const Tensor<T>& p, std::size_t j0, Tensor<T>& acc) const {
    const std::size_t bs = cfg_.spec.block_size;
    const QuantView v_view{&v_t_, 0, d(), j0 / bs, p.cols() / bs};
    if (cfg_.sage.two_level_p) {
      const TwoLevelP<T> two = QuantizePTwoLevel(p, cfg_.spec);
      Tensor<T> part(acc.rows(), acc.cols());
      Fp4mmAccumulate(QuantView::All(two.codes), v_view, part);
      for (std::size_t r = 0; r < acc.rows(); ++r) {
        for (std::size_t c = 0; c < acc.cols(); ++c) {
          acc(r, c) += static_cast<T>(static_cast<double>(part(r, c)) / two.row_factor[r]);
        }
      }
      return;
    }
    const QuantTensor pq = Quantize(p, cfg_.spec);
    Fp4mmAccumulate(QuantView::All(pq), v_view, acc);
  }

 private:
  const TileConfig& cfg_;
  T sqrt_d_;
  SmoothedPair<T> pair_;
  QuantTensor q_, k_, v_t_;
};

class ObserverGate {
 public:
  explicit ObserverGate(TileObserver* obs) : obs_(obs) {}
  bool active() const { return obs_ != nullptr; }
  template <typename Fn>
  void Emit(Fn&& fn) {
    if (!obs_) return;
    std::lock_guard<std::mutex> lock(mu_);
    fn(*obs_);
  }

 private:
  TileObserver* obs_;
  std::mutex mu_;
};

// Runs fn(task) for task in [0, n) on up to `threads` workers, each taking a
// contiguous chunk. Returns after all tasks finish; rethrows the first error.
template <typename Fn>
void ParallelChunks(std::size_t n, unsigned threads, Fn&& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
  if (workers == 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = std::min(n, w * chunk);
    const std::size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&, w, begin, end] {
      try {
        fn(w, begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <Real T, typename Ops>
AttnOutputs<T> RunForward(const Ops& ops, const Dims& dims, const TileConfig& cfg,
                          bool training) {
  AttnOutputs<T> out;
  out.O = Tensor<T>(dims.n_q, dims.d);
  out.L.assign(dims.n_q, 0.0);
  if (training) out.O_prime = Tensor<T>(dims.n_q, dims.d);
  const std::size_t tq = dims.n_q / cfg.b_q;
  const std::size_t tk = dims.n_k / cfg.b_k;
  ObserverGate gate(cfg.observer);

  auto run_tile = [&](std::size_t it) {
    const std::size_t i0 = it * cfg.b_q;
    const std::size_t bq = cfg.b_q;
    Tensor<T> s(bq, cfg.b_k);
    Tensor<T> p(bq, cfg.b_k);
    Tensor<T> o_acc(bq, dims.d);
    Tensor<T> op_acc(training ? bq : 1, dims.d);
    std::vector<double> m(bq, kNegInf), l(bq, 0.0);

    auto emit_state = [&](const char* pass, std::size_t jt) {
      gate.Emit([&](TileObserver& o) { o.OnRowState({pass, it, jt, i0, m, l}); });
    };
    auto emit_probs = [&](const Tensor<T>& pq, std::size_t jt, std::span<const double> shift) {
      if (!gate.active()) return;
      const Tensor<double> pd = ToDouble(pq);
      gate.Emit([&](TileObserver& o) {
        o.OnProbabilities({"forward", it, jt, i0, jt * cfg.b_k, pd, shift});
      });
    };

    if (cfg.p_scaling == PScaling::kNormalized) {
      // Sweep 1: row statistics by online softmax.
      for (std::size_t jt = 0; jt < tk; ++jt) {
        const std::size_t j0 = jt * cfg.b_k;
        if (!TileVisible(cfg, dims, i0, j0)) continue;
        ops.Scores(i0, j0, s);
        ApplyCausalMask(cfg, dims, i0, j0, s);
        for (std::size_t r = 0; r < bq; ++r) {
          double rmax = kNegInf;
          for (T v : s.row(r)) rmax = std::max(rmax, static_cast<double>(v));
          const double m_new = std::max(m[r], rmax);
          if (m_new == kNegInf) continue;
          const double alpha = m[r] == kNegInf ? 0.0 : std::exp(m[r] - m_new);
          double sum = 0.0;
          for (T v : s.row(r)) sum += std::exp(static_cast<double>(v) - m_new);
          l[r] = alpha * l[r] + sum;
          m[r] = m_new;
        }
        emit_state("stats", jt);
      }
      for (std::size_t r = 0; r < bq; ++r) out.L[i0 + r] = m[r] + std::log(l[r]);
      // Sweep 2: normalized probabilities, quantized, accumulated directly.
      for (std::size_t jt = 0; jt < tk; ++jt) {
        const std::size_t j0 = jt * cfg.b_k;
        if (!TileVisible(cfg, dims, i0, j0)) continue;
        ops.Scores(i0, j0, s);
        ApplyCausalMask(cfg, dims, i0, j0, s);
        for (std::size_t r = 0; r < bq; ++r) {
          const double lse = out.L[i0 + r];
          for (std::size_t c = 0; c < cfg.b_k; ++c) {
            p(r, c) = static_cast<T>(std::exp(static_cast<double>(s(r, c)) - lse));
          }
        }
        const Tensor<T> pq = ops.QuantizeProbs(p);
        ops.AccumulatePV(pq, j0, o_acc);
        if (training) ops.AccumulatePV(p, j0, op_acc);
        emit_probs(pq, jt, {});
      }
      for (std::size_t r = 0; r < bq; ++r) {
        std::copy(o_acc.row(r).begin(), o_acc.row(r).end(), out.O.row(i0 + r).begin());
        if (training) {
          std::copy(op_acc.row(r).begin(), op_acc.row(r).end(),
                    out.O_prime->row(i0 + r).begin());
        }
      }
      return;
    }

    // Running-max loop: quantize exp(S - m_new) per tile, rescale by alpha.
    Tensor<T> part(bq, dims.d);
    std::vector<double> alpha(bq);
    for (std::size_t jt = 0; jt < tk; ++jt) {
      const std::size_t j0 = jt * cfg.b_k;
      if (!TileVisible(cfg, dims, i0, j0)) continue;
      ops.Scores(i0, j0, s);
      ApplyCausalMask(cfg, dims, i0, j0, s);
      for (std::size_t r = 0; r < bq; ++r) {
        double rmax = kNegInf;
        for (T v : s.row(r)) rmax = std::max(rmax, static_cast<double>(v));
        const double m_new = std::max(m[r], rmax);
        double sum = 0.0;
        if (m_new == kNegInf) {
          alpha[r] = 1.0;
          for (std::size_t c = 0; c < cfg.b_k; ++c) p(r, c) = T{0};
        } else {
          alpha[r] = m[r] == kNegInf ? 0.0 : std::exp(m[r] - m_new);
          for (std::size_t c = 0; c < cfg.b_k; ++c) {
            p(r, c) = static_cast<T>(std::exp(static_cast<double>(s(r, c)) - m_new));
            sum += static_cast<double>(p(r, c));
          }
        }
        l[r] = alpha[r] * l[r] + sum;
        m[r] = m_new;
      }
      const Tensor<T> pq = ops.QuantizeProbs(p);
      part.fill(T{0});
      ops.AccumulatePV(pq, j0, part);
      for (std::size_t r = 0; r < bq; ++r) {
        const T a = static_cast<T>(alpha[r]);
        for (std::size_t c = 0; c < dims.d; ++c) o_acc(r, c) = a * o_acc(r, c) + part(r, c);
      }
      if (training) {
        part.fill(T{0});
        ops.AccumulatePV(p, j0, part);
        for (std::size_t r = 0; r < bq; ++r) {
          const T a = static_cast<T>(alpha[r]);
          for (std::size_t c = 0; c < dims.d; ++c) op_acc(r, c) = a * op_acc(r, c) + part(r, c);
        }
      }
      emit_state("online", jt);
      emit_probs(pq, jt, m);
    }
    for (std::size_t r = 0; r < bq; ++r) {
      out.L[i0 + r] = m[r] + std::log(l[r]);
      for (std::size_t c = 0; c < dims.d; ++c) {
        out.O(i0 + r, c) = static_cast<T>(static_cast<double>(o_acc(r, c)) / l[r]);
        if (training) {
          (*out.O_prime)(i0 + r, c) = static_cast<T>(static_cast<double>(op_acc(r, c)) / l[r]);
        }
      }
    }
  };

  ParallelChunks(tq, cfg.threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t it = begin; it < end; ++it) run_tile(it);
  });
  return out;
}

}  // namespace

void JsonTraceWriter::OnRowState(const RowStateEvent& e) {
  nlohmann::json j;
  j["pass"] = e.pass;
  j["q_tile"] = e.q_tile;
  j["k_tile"] = e.k_tile;
  j["row0"] = e.row0;
  // -inf is not representable in JSON; masked rows report null.
  auto arr = [](std::span<const double> xs) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : xs) a.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json());
    return a;
  };
  j["m"] = arr(e.m);
  j["l"] = arr(e.l);
  out_ << j.dump() << '\n';
}

std::optional<BwdVariant> ParseBwdVariant(std::string_view s) {
  for (BwdVariant v : {BwdVariant::kCorrect, BwdVariant::kLowPrecO, BwdVariant::kNoFakeQuantP,
                       BwdVariant::kNaiveBf16}) {
    if (s == ToString(v)) return v;
  }
  return std::nullopt;
}

const char* ToString(BwdVariant v) {
  switch (v) {
    case BwdVariant::kCorrect:
      return "correct";
    case BwdVariant::kLowPrecO:
      return "lowpreco";
    case BwdVariant::kNoFakeQuantP:
      return "nofqp";
    case BwdVariant::kNaiveBf16:
      return "naive-bf16-bwd";
  }
  return "unknown";
}

template <Real T>
AttnOutputs<T> FlashForwardInference(const Tensor<T>& Q, const Tensor<T>& K,
                                     const Tensor<T>& V, const TileConfig& cfg) {
  const Dims dims = CheckShapes(Q.dims(), K.dims(), V.dims(), cfg);
  if (!cfg.quantize) {
    TileConfig plain = cfg;
    plain.sage = {};
    const DenseOperands<T> ops(Q, K, V, plain, false);
    return RunForward<T>(ops, dims, plain, false);
  }
  if (cfg.sage.smooth_q && cfg.causal) {
    // Per-tile query means are fine under a mask; nothing to reject.
  }
  const Fp4Operands<T> ops(Q, K, V, cfg);
  return RunForward<T>(ops, dims, cfg, false);
}

template <Real T>
AttnOutputs<T> FlashForwardTraining(const Tensor<T>& Q, const Tensor<T>& K,
                                    const Tensor<T>& V, const TileConfig& cfg) {
  const Dims dims = CheckShapes(Q.dims(), K.dims(), V.dims(), cfg);
  if (cfg.sage.smooth_q) {
    throw InvalidValue("Q smoothing is not supported in the training path");
  }
  const DenseOperands<T> ops(Q, K, V, cfg, cfg.quantize);
  return RunForward<T>(ops, dims, cfg, true);
}

template <Real T>
std::vector<double> RowDot(const Tensor<T>& dO, const Tensor<T>& X) {
  if (dO.dims() != X.dims()) throw ShapeError("RowDot: shape mismatch");
  std::vector<double> out(dO.rows(), 0.0);
  for (std::size_t r = 0; r < dO.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < dO.cols(); ++c) {
      s += static_cast<double>(dO(r, c)) * static_cast<double>(X(r, c));
    }
    out[r] = s;
  }
  return out;
}

template <Real T>
AttnGrads<T> FlashBackward(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                           const Tensor<T>& dO, const AttnOutputs<T>& fwd,
                           const TileConfig& cfg, BwdVariant variant) {
  const Dims dims = CheckShapes(Q.dims(), K.dims(), V.dims(), cfg);
  if (cfg.sage.smooth_q) {
    throw InvalidValue("Q smoothing is not supported in the training path");
  }
  if (dO.rows() != dims.n_q || dO.cols() != dims.d || fwd.O.rows() != dims.n_q ||
      fwd.O.cols() != dims.d || fwd.L.size() != dims.n_q) {
    throw ShapeError("FlashBackward: dO, O or L does not match Q");
  }
  const bool use_o_prime =
      variant == BwdVariant::kCorrect || variant == BwdVariant::kNoFakeQuantP;
  if (use_o_prime && !fwd.O_prime) {
    throw MissingOPrime(std::string("backward variant '") + ToString(variant) +
                        "' needs O' from the training forward");
  }
  const std::vector<double> D = RowDot(dO, use_o_prime ? *fwd.O_prime : fwd.O);

  const bool fq_operands = cfg.quantize && variant != BwdVariant::kNaiveBf16;
  const bool fq_probs = cfg.quantize && (variant == BwdVariant::kCorrect ||
                                         variant == BwdVariant::kLowPrecO);
  const DenseOperands<T> ops(Q, K, V, cfg, fq_operands);
  const double sqrt_d = std::sqrt(static_cast<double>(static_cast<T>(dims.d)));
  const std::size_t tq = dims.n_q / cfg.b_q;
  const std::size_t tk = dims.n_k / cfg.b_k;
  const std::size_t d = dims.d;

  AttnGrads<T> g{Tensor<T>(dims.n_q, d), Tensor<T>(dims.n_k, d), Tensor<T>(dims.n_k, d)};
  ObserverGate gate(cfg.observer);
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(cfg.threads, tk));
  // Worker 0 accumulates dQ in place; others use private partials.
  std::vector<Tensor<T>> dq_partials(workers > 1 ? workers - 1 : 0);

  ParallelChunks(tk, cfg.threads, [&](std::size_t w, std::size_t begin, std::size_t end) {
    Tensor<T>& dq = w == 0 ? g.dQ : (dq_partials[w - 1] = Tensor<T>(dims.n_q, d));
    Tensor<T> s(cfg.b_q, cfg.b_k), p(cfg.b_q, cfg.b_k), dp(cfg.b_q, cfg.b_k),
        ds(cfg.b_q, cfg.b_k);
    const Tensor<T>& qf = ops.q();
    const Tensor<T>& kf = ops.k();
    const Tensor<T>& vt = ops.v_t();
    for (std::size_t jt = begin; jt < end; ++jt) {
      const std::size_t j0 = jt * cfg.b_k;
      for (std::size_t it = 0; it < tq; ++it) {
        const std::size_t i0 = it * cfg.b_q;
        if (!TileVisible(cfg, dims, i0, j0)) continue;
        ops.Scores(i0, j0, s);
        ApplyCausalMask(cfg, dims, i0, j0, s);
        for (std::size_t r = 0; r < cfg.b_q; ++r) {
          const double lse = fwd.L[i0 + r];
          for (std::size_t c = 0; c < cfg.b_k; ++c) {
            p(r, c) = static_cast<T>(std::exp(static_cast<double>(s(r, c)) - lse));
          }
        }
        const Tensor<T> pq = fq_probs ? FakeQuantizeProbs(p, cfg) : p;
        if (gate.active()) {
          const Tensor<double> pd = ToDouble(pq);
          gate.Emit([&](TileObserver& o) {
            o.OnProbabilities({"backward", it, jt, i0, j0, pd, {}});
          });
        }
        // dV_j += P^T dO_i
        for (std::size_t c = 0; c < cfg.b_k; ++c) {
          T* dv = g.dV.row(j0 + c).data();
          for (std::size_t r = 0; r < cfg.b_q; ++r) {
            const T w_rc = pq(r, c);
            const T* go = dO.row(i0 + r).data();
            for (std::size_t f = 0; f < d; ++f) dv[f] += w_rc * go[f];
          }
        }
        // dP = dO_i V_j^T ; dS = P * (dP - D) / sqrt(d)
        for (std::size_t r = 0; r < cfg.b_q; ++r) {
          const T* go = dO.row(i0 + r).data();
          for (std::size_t c = 0; c < cfg.b_k; ++c) {
            T acc = T{0};
            for (std::size_t f = 0; f < d; ++f) acc += go[f] * vt(f, j0 + c);
            dp(r, c) = acc;
            ds(r, c) = static_cast<T>(static_cast<double>(p(r, c)) *
                                      (static_cast<double>(acc) - D[i0 + r]) / sqrt_d);
          }
        }
        // dQ_i += dS K_j ; dK_j += dS^T Q_i
        for (std::size_t r = 0; r < cfg.b_q; ++r) {
          T* dqr = dq.row(i0 + r).data();
          for (std::size_t c = 0; c < cfg.b_k; ++c) {
            const T w_rc = ds(r, c);
            const T* kr = kf.row(j0 + c).data();
            for (std::size_t f = 0; f < d; ++f) dqr[f] += w_rc * kr[f];
          }
        }
        for (std::size_t c = 0; c < cfg.b_k; ++c) {
          T* dk = g.dK.row(j0 + c).data();
          for (std::size_t r = 0; r < cfg.b_q; ++r) {
            const T w_rc = ds(r, c);
            const T* qr = qf.row(i0 + r).data();
            for (std::size_t f = 0; f < d; ++f) dk[f] += w_rc * qr[f];
          }
        }
      }
    }
  });
  for (const Tensor<T>& part : dq_partials) {
    auto dst = g.dQ.data();
    auto src = part.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  return g;
}

#define ATTNQAT_INSTANTIATE(T)                                                      \
  template AttnOutputs<T> FlashForwardInference(const Tensor<T>&, const Tensor<T>&, \
                                                const Tensor<T>&, const TileConfig&); \
  template AttnOutputs<T> FlashForwardTraining(const Tensor<T>&, const Tensor<T>&,  \
                                               const Tensor<T>&, const TileConfig&); \
  template AttnGrads<T> FlashBackward(const Tensor<T>&, const Tensor<T>&,           \
                                      const Tensor<T>&, const Tensor<T>&,           \
                                      const AttnOutputs<T>&, const TileConfig&,     \
                                      BwdVariant);                                  \
  template std::vector<double> RowDot(const Tensor<T>&, const Tensor<T>&);

ATTNQAT_INSTANTIATE(float)
ATTNQAT_INSTANTIATE(double)

#undef ATTNQAT_INSTANTIATE

}  // namespace attnqat
