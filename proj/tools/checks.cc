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

#include "checks.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "attnqat/flash.h"
#include "attnqat/memory.h"
#include "attnqat/oracle.h"
#include "attnqat/quant_tensor.h"
#include "attnqat/rng.h"
#include "attnqat/sage3.h"

namespace attnqat::cli {
namespace {

constexpr std::uint64_t kInstanceStride = 0x9E3779B97F4A7C15ULL;

std::uint64_t InstanceSeed(std::uint64_t base, std::uint64_t i) {
  return base + i * kInstanceStride;
}

// Running maximum that remembers which configuration produced it.
struct Worst {
  double value = 0.0;
  std::string where;

  // NaN sticks, so a poisoned run cannot pass.
  void Update(double v, const std::string& at) {
    if (std::isnan(value)) return;
    if (where.empty() || std::isnan(v) || v > value) {
      value = v;
      where = at;
    }
  }
};

struct Tolerances {
  double forward;
  double backward;
  double identity;
  double sage;
};

Tolerances TolerancesFor(Width w) {
  if (w == Width::k64) return {1e-12, 1e-10, 1e-10, 1e-10};
  return {1e-5, 1e-4, 1e-5, 1e-5};
}

std::string Label(std::size_t n, std::size_t d, std::size_t b_k, bool causal,
                  std::uint64_t seed) {
  std::ostringstream s;
  s << "n=" << n << " d=" << d << " b_k=" << b_k << (causal ? " causal" : "")
    << " seed=" << seed;
  return s.str();
}

// Two-level P rescales by the tile-local row max, which matches the
// single-tile oracle only when one key tile spans the sequence.
std::vector<std::size_t> KeyTiles(std::size_t n, const CheckOptions& opts) {
  if (opts.two_level_p) return {n};
  std::set<std::size_t> tiles = {opts.spec.block_size, 64, n};
  std::vector<std::size_t> out;
  for (std::size_t t : tiles) {
    if (t <= n && n % t == 0) out.push_back(t);
  }
  return out;
}

template <Real T>
struct Instance {
  Tensor<T> Q, K, V, dO;
};

template <Real T>
Instance<T> MakeInstance(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Instance<T> in;
  in.Q = Randn<T>({n, d}, rng);
  in.K = Randn<T>({n, d}, rng);
  in.V = Randn<T>({n, d}, rng);
  in.dO = Randn<T>({n, d}, rng);
  return in;
}

OracleOptions OracleFor(const CheckOptions& opts) {
  OracleOptions o;
  o.spec = opts.spec;
  o.points = QuantPoints::All();
  o.causal = opts.causal;
  o.two_level_p = opts.two_level_p;
  o.smooth_k = opts.smooth_k;
  return o;
}

TileConfig TilesFor(const CheckOptions& opts, std::size_t n, std::size_t b_k) {
  TileConfig cfg;
  cfg.b_q = std::min<std::size_t>(64, n);
  cfg.b_k = b_k;
  cfg.causal = opts.causal;
  cfg.spec = opts.spec;
  cfg.sage.smooth_k = opts.smooth_k;
  cfg.sage.two_level_p = opts.two_level_p;
  return cfg;
}

template <Real T>
void ForwardGrid(const CheckOptions& opts, RunReport& report) {
  const Tolerances tol = TolerancesFor(opts.accum);
  Worst o, l, o_prime, infer;
  Stopwatch sw;
  for (std::size_t n : opts.sizes) {
    for (std::size_t d : opts.head_dims) {
      for (std::size_t b_k : KeyTiles(n, opts)) {
        for (std::size_t s = 0; s < opts.seeds; ++s) {
          const std::uint64_t seed = InstanceSeed(opts.seed, s);
          const Instance<T> in = MakeInstance<T>(n, d, seed);
          const std::string at = Label(n, d, b_k, opts.causal, seed);
          const OracleTrace<T> ref = OracleForward(in.Q, in.K, in.V, OracleFor(opts));
          const TileConfig cfg = TilesFor(opts, n, b_k);
          const AttnOutputs<T> fwd = FlashForwardTraining(in.Q, in.K, in.V, cfg);
          o.Update(RelError(fwd.O, ref.O), at);
          l.Update(RelError(fwd.L, ref.L), at);
          o_prime.Update(RelError(*fwd.O_prime, ref.O_prime), at);
          const AttnOutputs<T> inf = FlashForwardInference(in.Q, in.K, in.V, cfg);
          infer.Update(RelError(inf.O, fwd.O), at);
        }
      }
    }
  }
  const double ms = sw.ms();
  report.Add("forward.O_vs_oracle", o.value, Cmp::kLe, tol.forward, ms, o.where);
  report.Add("forward.L_vs_oracle", l.value, Cmp::kLe, tol.forward, 0, l.where);
  report.Add("forward.O_prime_vs_oracle", o_prime.value, Cmp::kLe, tol.forward, 0,
             o_prime.where);
  report.Add("forward.inference_vs_training", infer.value, Cmp::kLe, 1e-6, 0, infer.where);
}

template <Real T>
void BackwardGrid(const CheckOptions& opts, RunReport& report) {
  const Tolerances tol = TolerancesFor(opts.accum);
  Worst dq, dk, dv;
  Stopwatch sw;
  for (std::size_t n : opts.sizes) {
    for (std::size_t d : opts.head_dims) {
      for (std::size_t b_k : KeyTiles(n, opts)) {
        for (std::size_t s = 0; s < opts.seeds; ++s) {
          const std::uint64_t seed = InstanceSeed(opts.seed, s);
          const Instance<T> in = MakeInstance<T>(n, d, seed);
          const std::string at = Label(n, d, b_k, opts.causal, seed);
          const OracleTrace<T> ref = OracleForward(in.Q, in.K, in.V, OracleFor(opts));
          const AttnGrads<T> want = OracleBackward(ref, in.dO);
          const TileConfig cfg = TilesFor(opts, n, b_k);
          const AttnOutputs<T> fwd = FlashForwardTraining(in.Q, in.K, in.V, cfg);
          const AttnGrads<T> got = FlashBackward(in.Q, in.K, in.V, in.dO, fwd, cfg);
          dq.Update(RelError(got.dQ, want.dQ), at);
          dk.Update(RelError(got.dK, want.dK), at);
          dv.Update(RelError(got.dV, want.dV), at);
        }
      }
    }
  }
  const double ms = sw.ms();
  report.Add("backward.dQ_vs_oracle", dq.value, Cmp::kLe, tol.backward, ms, dq.where);
  report.Add("backward.dK_vs_oracle", dk.value, Cmp::kLe, tol.backward, 0, dk.where);
  report.Add("backward.dV_vs_oracle", dv.value, Cmp::kLe, tol.backward, 0, dv.where);
}

template <Real T>
void IdentityRuns(const CheckOptions& opts, RunReport& report) {
  const Tolerances tol = TolerancesFor(opts.accum);
  const std::size_t n = opts.sizes.front();
  const std::size_t d = opts.head_dims.front();
  Worst correct;
  double lowpreco_min = std::numeric_limits<double>::infinity();
  std::string lowpreco_at;
  Stopwatch sw;
  for (std::size_t s = 0; s < opts.seeds; ++s) {
    const std::uint64_t seed = InstanceSeed(opts.seed, s);
    const Instance<T> in = MakeInstance<T>(n, d, seed);
    const std::string at = Label(n, d, n, opts.causal, seed);
    const OracleTrace<T> ref = OracleForward(in.Q, in.K, in.V, OracleFor(opts));
    const std::vector<double> delta = OracleDelta(ref, in.dO);
    const AttnOutputs<T> fwd = FlashForwardTraining(in.Q, in.K, in.V, TilesFor(opts, n, n));
    correct.Update(RelError(RowDot(in.dO, *fwd.O_prime), delta), at);
    const double e = RelError(RowDot(in.dO, fwd.O), delta);
    if (!(e >= lowpreco_min)) {
      lowpreco_min = e;
      lowpreco_at = at;
    }
  }
  const double ms = sw.ms();
  report.Add("identity.D_from_O_prime", correct.value, Cmp::kLe, tol.identity, ms,
             correct.where);
  report.Add("identity.D_from_O_breaks", lowpreco_min, Cmp::kGt, 1e-3, 0,
             "min over seeds at " + lowpreco_at);
}

template <Real T>
void Sage3Runs(const CheckOptions& opts, RunReport& report) {
  const Tolerances tol = TolerancesFor(opts.accum);
  const std::size_t n = opts.sizes.front();
  const std::size_t d = opts.head_dims.front();
  const std::size_t b_q = std::min<std::size_t>(64, n);
  const std::size_t b_k = std::min<std::size_t>(64, n);
  Worst recon, two_level, ulps;
  Stopwatch sw;
  for (std::size_t s = 0; s < opts.seeds; ++s) {
    const std::uint64_t seed = InstanceSeed(opts.seed, s);
    Rng rng(seed);
    // Offset channels, the outlier pattern smoothing targets.
    Tensor<T> Q = Randn<T>({n, d}, rng);
    Tensor<T> K = Randn<T>({n, d}, rng);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; c += 7) {
        Q(r, c) += T{8};
        K(r, c) -= T{12};
      }
    }
    const std::string at = "n=" + std::to_string(n) + " d=" + std::to_string(d) +
                           " seed=" + std::to_string(seed);

    const SmoothedPair<T> pair = Smooth(Q, K, b_q);
    const Tensor<T> S = MatmulNT(Q, K);
    for (std::size_t qt = 0; qt < n / b_q; ++qt) {
      for (std::size_t k0 = 0; k0 < n; k0 += b_k) {
        const Tensor<T> got = DecomposeScores(pair, qt, k0, b_k).Reconstruct();
        Tensor<T> want(b_q, b_k);
        for (std::size_t r = 0; r < b_q; ++r) {
          for (std::size_t c = 0; c < b_k; ++c) want(r, c) = S(qt * b_q + r, k0 + c);
        }
        recon.Update(RelError(got, want), at);
      }
    }

    double worst_ulps = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        const T mean = pair.q_bar(r / b_q, c);
        const T gamma = pair.gamma_q(r, c);
        const T back = mean + gamma;
        // ulp at the largest magnitude in the subtraction and the sum.
        const T mag = std::max({std::abs(Q(r, c)), std::abs(mean), std::abs(gamma)});
        const T ulp = std::nextafter(mag, std::numeric_limits<T>::infinity()) - mag;
        worst_ulps = std::max(worst_ulps, static_cast<double>(std::abs(back - Q(r, c)) / ulp));
      }
    }
    ulps.Update(worst_ulps, at);

    // Row-softmax probabilities with a wide dynamic range.
    Tensor<T> P(b_q, n);
    for (std::size_t r = 0; r < b_q; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        P(r, c) = static_cast<T>(std::exp(3.0 * rng.Normal()));
        sum += static_cast<double>(P(r, c));
      }
      for (T& v : P.row(r)) v = static_cast<T>(static_cast<double>(v) / sum);
    }
    const TwoLevelP<T> q = QuantizePTwoLevel(P, opts.spec);
    const Tensor<T> unscaled = q.Unscaled();
    for (std::size_t r = 0; r < b_q; ++r) {
      Tensor<T> scaled(1, n);
      double pmax = 0.0;
      double smax = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        scaled(0, c) = static_cast<T>(static_cast<double>(P(r, c)) * q.row_factor[r]);
        pmax = std::max(pmax, static_cast<double>(P(r, c)));
        smax = std::max(smax, static_cast<double>(scaled(0, c)));
      }
      const Tensor<T> fq = FakeQuantize(scaled, opts.spec);
      double err_two = 0.0;
      double err_ref = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        err_two = std::max(err_two, std::abs(static_cast<double>(unscaled(r, c) - P(r, c))));
        err_ref = std::max(err_ref, std::abs(static_cast<double>(fq(0, c) - scaled(0, c))));
      }
      err_two /= pmax;
      err_ref /= smax;
      // Excess of the two-level error over the bound, in units of the bound.
      const double excess = err_ref > 0.0 ? (err_two - err_ref) / err_ref : err_two;
      two_level.Update(excess, at);
    }
  }
  const double ms = sw.ms();
  report.Add("sage3.decomposition_reconstruction", recon.value, Cmp::kLe, tol.sage, ms,
             recon.where);
  report.Add("sage3.smoothing_roundtrip_ulps", ulps.value, Cmp::kLe, 1.0, 0, ulps.where);
  report.Add("sage3.two_level_bound_excess", two_level.value, Cmp::kLe,
             opts.accum == Width::k64 ? 1e-9 : 1e-4, 0, two_level.where);
}

std::size_t PeakOf(auto&& fn) {
  PeakScope scope;
  fn();
  return scope.peak_bytes();
}

template <Real T>
void MemoryRuns(const CheckOptions& opts, RunReport& report) {
  const std::vector<std::size_t> ns = {1024, 2048, 4096};
  const std::size_t d = 64;
  std::vector<std::size_t> inference, training, backward, oracle;
  Stopwatch sw;
  for (std::size_t n : ns) {
    const Instance<T> in = MakeInstance<T>(n, d, opts.seed);
    TileConfig cfg;
    cfg.b_q = 64;
    cfg.b_k = 64;
    cfg.spec = opts.spec;
    inference.push_back(PeakOf([&] { FlashForwardInference(in.Q, in.K, in.V, cfg); }));
    AttnOutputs<T> fwd;
    training.push_back(
        PeakOf([&] { fwd = FlashForwardTraining(in.Q, in.K, in.V, cfg); }));
    backward.push_back(
        PeakOf([&] { FlashBackward(in.Q, in.K, in.V, in.dO, fwd, cfg); }));
    OracleOptions oo;
    oo.spec = opts.spec;
    oracle.push_back(PeakOf([&] { OracleForward(in.Q, in.K, in.V, oo); }));
  }
  const double ms = sw.ms();
  auto ratio = [](const std::vector<std::size_t>& v) {
    return static_cast<double>(v.back()) / static_cast<double>(v.front());
  };
  auto detail = [&](const std::vector<std::size_t>& v) {
    std::ostringstream s;
    for (std::size_t i = 0; i < ns.size(); ++i) {
      s << (i ? " " : "") << "n=" << ns[i] << ":" << v[i] << "B";
    }
    return s.str();
  };
  // 4x more tokens: linear growth gives 4, quadratic 16.
  report.Add("memory.inference_growth_1024_to_4096", ratio(inference), Cmp::kLe, 4.5, ms,
             detail(inference));
  report.Add("memory.training_growth_1024_to_4096", ratio(training), Cmp::kLe, 4.5, 0,
             detail(training));
  report.Add("memory.backward_growth_1024_to_4096", ratio(backward), Cmp::kLe, 4.5, 0,
             detail(backward));
  report.Add("memory.oracle_growth_1024_to_4096", ratio(oracle), Cmp::kGe, 14.0, 0,
             detail(oracle));
}

}  // namespace

nlohmann::json CheckOptions::ToJson() const {
  return {{"seed", seed},
          {"seeds", seeds},
          {"sizes", sizes},
          {"head_dims", head_dims},
          {"causal", causal},
          {"accum", accum == Width::k64 ? 64 : 32},
          {"format", spec.block_size == 32 ? "mxfp4" : "nvfp4"},
          {"smooth_k", smooth_k},
          {"two_level_p", two_level_p}};
}

void CheckCodec(const CheckOptions& opts, RunReport& report) {
  Stopwatch sw;
  int fp4_bad = 0;
  std::set<double> values;
  for (std::uint8_t c = 0; c < 16; ++c) {
    const Fp4Code code{c};
    values.insert(Decode(code));
    if (RoundToFp4(Decode(code)) != Canonical(code)) ++fp4_bad;
    if (Canonical(Canonical(code)) != Canonical(code)) ++fp4_bad;
  }
  report.Add("codec.fp4_roundtrip_mismatches", fp4_bad, Cmp::kEq, 0, sw.ms(), "16 codes");

  const std::set<double> expected = {-6, -4, -3, -2, -1.5, -1, -0.5, 0,
                                     0.5, 1, 1.5, 2, 3, 4, 6};
  std::vector<double> diff;
  std::set_symmetric_difference(values.begin(), values.end(), expected.begin(), expected.end(),
                                std::back_inserter(diff));
  report.Add("codec.fp4_value_set_difference", static_cast<double>(diff.size()), Cmp::kEq, 0,
             0, std::to_string(values.size()) + " distinct values");

  int e4m3_bad = 0;
  int e8m0_bad = 0;
  for (int c = 0; c < 256; ++c) {
    const Fp8E4M3Code e4{static_cast<std::uint8_t>(c)};
    const double v4 = Decode(e4);
    if (std::isnan(v4)) {
      if (Canonical(e4).bits != kE4M3NaNCode || EncodeE4M3(v4).bits != kE4M3NaNCode) ++e4m3_bad;
    } else if (EncodeE4M3(v4) != Canonical(e4)) {
      ++e4m3_bad;
    }
    const Fp8E8M0Code e8{static_cast<std::uint8_t>(c)};
    const double v8 = Decode(e8);
    if (std::isnan(v8)) {
      if (EncodeE8M0(v8).bits != kE8M0NaNCode) ++e8m0_bad;
    } else if (EncodeE8M0(v8) != Canonical(e8)) {
      ++e8m0_bad;
    }
  }
  report.Add("codec.e4m3_roundtrip_mismatches", e4m3_bad, Cmp::kEq, 0, 0, "256 codes");
  report.Add("codec.e8m0_roundtrip_mismatches", e8m0_bad, Cmp::kEq, 0, 0, "256 codes");

  // FP4MM against the matmul of fake-quantized operands, same summation order.
  Stopwatch mm;
  int mismatched = 0;
  const std::size_t instances = std::max<std::size_t>(opts.seeds, 100);
  for (std::size_t s = 0; s < instances; ++s) {
    Rng rng(InstanceSeed(opts.seed, s));
    const Tensor<double> a = Randn<double>({32, 64}, rng);
    const Tensor<double> b_t = Randn<double>({32, 64}, rng);
    const Tensor<double> real =
        Fp4mm<double>(Quantize(a, opts.spec), Quantize(b_t, opts.spec));
    const Tensor<double> fake = MatmulNT(FakeQuantize(a, opts.spec),
                                         FakeQuantize(b_t, opts.spec), opts.spec.block_size);
    if (!(real == fake)) ++mismatched;
  }
  report.Add("codec.fp4mm_vs_fake_quant_matmul_mismatches", mismatched, Cmp::kEq, 0, mm.ms(),
             std::to_string(instances) + " instances of 32x64 * 64x32 at 64-bit");
}

void CheckForward(const CheckOptions& opts, RunReport& report) {
  if (opts.accum == Width::k64) {
    ForwardGrid<double>(opts, report);
  } else {
    ForwardGrid<float>(opts, report);
  }
}
void CheckBackward(const CheckOptions& opts, RunReport& report) {
  if (opts.accum == Width::k64) {
    BackwardGrid<double>(opts, report);
  } else {
    BackwardGrid<float>(opts, report);
  }
}
void CheckIdentity(const CheckOptions& opts, RunReport& report) {
  if (opts.accum == Width::k64) {
    IdentityRuns<double>(opts, report);
  } else {
    IdentityRuns<float>(opts, report);
  }
}
void CheckSage3(const CheckOptions& opts, RunReport& report) {
  if (opts.accum == Width::k64) {
    Sage3Runs<double>(opts, report);
  } else {
    Sage3Runs<float>(opts, report);
  }
}
void CheckMemory(const CheckOptions& opts, RunReport& report) {
  if (opts.accum == Width::k64) {
    MemoryRuns<double>(opts, report);
  } else {
    MemoryRuns<float>(opts, report);
  }
}

const std::vector<std::string>& SuiteNames() {
  static const std::vector<std::string> names = {"codec",    "forward", "backward",
                                                 "identity", "sage3",   "memory"};
  return names;
}

bool RunSuite(const std::string& name, const CheckOptions& opts, RunReport& report) {
  if (name == "all") {
    for (const std::string& n : SuiteNames()) RunSuite(n, opts, report);
    return true;
  }
  if (name == "codec") {
    CheckCodec(opts, report);
  } else if (name == "forward") {
    CheckForward(opts, report);
  } else if (name == "backward") {
    CheckBackward(opts, report);
  } else if (name == "identity") {
    CheckIdentity(opts, report);
  } else if (name == "sage3") {
    CheckSage3(opts, report);
  } else if (name == "memory") {
    CheckMemory(opts, report);
  } else {
    return false;
  }
  return true;
}

}  // namespace attnqat::cli
