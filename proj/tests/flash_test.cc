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

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "attnqat/oracle.h"
#include "attnqat/rng.h"
#include "test_util.h"

namespace attnqat {
namespace {

using testing::RandnMatrix;

template <Real T>
struct Instance {
  Tensor<T> q, k, v, dO;
};

template <Real T>
Instance<T> MakeInstance(std::size_t n_q, std::size_t n_k, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Instance<T> in;
  in.q = Randn<T>({n_q, d}, rng);
  in.k = Randn<T>({n_k, d}, rng);
  in.v = Randn<T>({n_k, d}, rng);
  in.dO = Randn<T>({n_q, d}, rng);
  return in;
}

TileConfig Tiles(std::size_t b_q, std::size_t b_k, bool causal = false) {
  TileConfig c;
  c.b_q = b_q;
  c.b_k = b_k;
  c.causal = causal;
  return c;
}

OracleOptions OracleFor(const TileConfig& c) {
  OracleOptions o;
  o.points = c.quantize ? QuantPoints::All() : QuantPoints::None();
  o.causal = c.causal;
  o.p_scaling = c.p_scaling;
  return o;
}

double MaxAbsDiff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(FlashForward, TrainingMatchesOracle64) {
  std::uint64_t seed = 0;
  for (std::size_t n : {64, 128}) {
    for (bool causal : {false, true}) {
      for (std::size_t b_k : {16, 32, 64}) {
        const auto in = MakeInstance<double>(n, n, 64, seed++);
        const TileConfig cfg = Tiles(32, b_k, causal);
        const AttnOutputs<double> f = FlashForwardTraining(in.q, in.k, in.v, cfg);
        const OracleTrace<double> o = OracleForward(in.q, in.k, in.v, OracleFor(cfg));
        EXPECT_LE(RelError(f.O, o.O), 1e-12) << n << " " << causal << " " << b_k;
        EXPECT_LE(RelError(*f.O_prime, o.O_prime), 1e-12);
        EXPECT_LE(MaxAbsDiff(f.L, o.L), 1e-12);
      }
    }
  }
}

TEST(FlashForward, TrainingMatchesOracle32) {
  const auto in = MakeInstance<float>(128, 256, 64, 5);
  const TileConfig cfg = Tiles(64, 64, true);
  const AttnOutputs<float> f = FlashForwardTraining(in.q, in.k, in.v, cfg);
  const OracleTrace<double> o = OracleForward(Cast<double>(in.q), Cast<double>(in.k),
                                              Cast<double>(in.v), OracleFor(cfg));
  EXPECT_LE(RelError(Cast<double>(f.O), o.O), 1e-5);
  EXPECT_LE(RelError(Cast<double>(*f.O_prime), o.O_prime), 1e-5);
  EXPECT_LE(MaxAbsDiff(f.L, o.L), 1e-6);
}

TEST(FlashForward, UnquantizedIsPlainAttention) {
  const auto in = MakeInstance<float>(64, 64, 24, 6);
  TileConfig cfg = Tiles(16, 16, true);
  cfg.quantize = false;
  const AttnOutputs<float> f = FlashForwardTraining(in.q, in.k, in.v, cfg);
  const testing::NaiveAttention ref = testing::NaiveForward(
      Cast<double>(in.q), Cast<double>(in.k), Cast<double>(in.v), false, true);
  EXPECT_LE(RelError(Cast<double>(f.O), ref.O), 1e-6);
  EXPECT_EQ(f.O, *f.O_prime);
}

TEST(FlashForward, TilingInvariance) {
  const auto in32 = MakeInstance<float>(128, 128, 64, 7);
  const auto in64 = MakeInstance<double>(128, 128, 64, 7);
  const AttnOutputs<float> ref32 = FlashForwardTraining(in32.q, in32.k, in32.v, Tiles(128, 128));
  const AttnOutputs<double> ref64 = FlashForwardTraining(in64.q, in64.k, in64.v, Tiles(128, 128));
  for (std::size_t b_k : {16, 32, 64}) {
    for (std::size_t b_q : {16, 64}) {
      const auto f32 = FlashForwardTraining(in32.q, in32.k, in32.v, Tiles(b_q, b_k));
      const auto f64 = FlashForwardTraining(in64.q, in64.k, in64.v, Tiles(b_q, b_k));
      EXPECT_LE(RelError(f32.O, ref32.O), 1e-5);
      EXPECT_LE(RelError(f64.O, ref64.O), 1e-12);
      EXPECT_LE(RelError(*f64.O_prime, *ref64.O_prime), 1e-12);
    }
  }
}

TEST(FlashForward, InferenceAgreesWithTraining) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto in = MakeInstance<float>(128, 128, 64, 10 + seed);
    const TileConfig cfg = Tiles(32, 64, seed % 2 == 1);
    const AttnOutputs<float> inf = FlashForwardInference(in.q, in.k, in.v, cfg);
    const AttnOutputs<float> tr = FlashForwardTraining(in.q, in.k, in.v, cfg);
    EXPECT_FALSE(inf.O_prime.has_value());
    EXPECT_LE(RelError(inf.O, tr.O), 1e-6);
    EXPECT_LE(MaxAbsDiff(inf.L, tr.L), 1e-6);
  }
}

TEST(FlashForward, ZeroValuesGiveZeroOutput) {
  auto in = MakeInstance<double>(32, 32, 16, 3);
  const AttnOutputs<double> a = FlashForwardInference(in.q, in.k, in.v, Tiles(16, 16));
  in.v.fill(0.0);
  const AttnOutputs<double> b = FlashForwardInference(in.q, in.k, in.v, Tiles(16, 16));
  EXPECT_EQ(MaxAbs(b.O), 0.0);
  EXPECT_EQ(a.L, b.L);
}

TEST(FlashForward, RunningMaxSingleTileMatchesItsOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto in = MakeInstance<double>(64, 64, 32, 20 + seed);
    TileConfig cfg = Tiles(64, 64, seed % 2 == 0);
    cfg.p_scaling = PScaling::kRunningMax;
    const OracleTrace<double> o = OracleForward(in.q, in.k, in.v, OracleFor(cfg));
    EXPECT_LE(RelError(FlashForwardTraining(in.q, in.k, in.v, cfg).O, o.O), 1e-6);
    EXPECT_LE(RelError(FlashForwardInference(in.q, in.k, in.v, cfg).O, o.O), 1e-6);
  }
}

TEST(FlashForward, ErrorsAreTyped) {
  const auto in = MakeInstance<double>(64, 64, 32, 1);
  EXPECT_THROW(FlashForwardTraining(in.q, in.k, in.v, Tiles(48, 64)), TileError);
  EXPECT_THROW(FlashForwardTraining(in.q, in.k, in.v, Tiles(64, 24)), TileError);
  const Tensor<double> k_bad(64, 16);
  EXPECT_THROW(FlashForwardInference(in.q, k_bad, in.v, Tiles(64, 64)), ShapeError);
  const Tensor<double> d_odd(64, 8);
  EXPECT_THROW(FlashForwardInference(d_odd, d_odd, d_odd, Tiles(64, 64)), ShapeError);
  const auto wide = MakeInstance<double>(128, 64, 32, 2);
  EXPECT_THROW(FlashForwardTraining(wide.q, wide.k, wide.v, Tiles(64, 64, true)), ShapeError);
}

TEST(FlashForward, ThreadCountDoesNotChangeResults) {
  const auto in = MakeInstance<float>(256, 256, 64, 4);
  TileConfig one = Tiles(32, 32, true);
  TileConfig many = one;
  many.threads = 5;
  const auto a = FlashForwardTraining(in.q, in.k, in.v, one);
  const auto b = FlashForwardTraining(in.q, in.k, in.v, many);
  EXPECT_EQ(a.O, b.O);
  EXPECT_EQ(*a.O_prime, *b.O_prime);
  EXPECT_EQ(a.L, b.L);
  // dK and dV are owned by one worker per key tile. dQ sums per-worker
  // partials, so its rounding depends on the thread count but not on timing.
  const auto ga = FlashBackward(in.q, in.k, in.v, in.dO, a, one);
  const auto gb = FlashBackward(in.q, in.k, in.v, in.dO, a, many);
  const auto gc = FlashBackward(in.q, in.k, in.v, in.dO, a, many);
  EXPECT_EQ(ga.dK, gb.dK);
  EXPECT_EQ(ga.dV, gb.dV);
  EXPECT_LE(RelError(gb.dQ, ga.dQ), 1e-5);
  EXPECT_EQ(gb.dQ, gc.dQ);
}

TEST(FlashBackward, CorrectMatchesOracle64) {
  std::uint64_t seed = 100;
  for (std::size_t n : {64, 128}) {
    for (bool causal : {false, true}) {
      const auto in = MakeInstance<double>(n, n, 64, seed++);
      const TileConfig cfg = Tiles(32, 32, causal);
      const auto fwd = FlashForwardTraining(in.q, in.k, in.v, cfg);
      const auto g = FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg);
      const auto ref =
          OracleBackward(OracleForward(in.q, in.k, in.v, OracleFor(cfg)), in.dO);
      EXPECT_LE(RelError(g.dQ, ref.dQ), 1e-10);
      EXPECT_LE(RelError(g.dK, ref.dK), 1e-10);
      EXPECT_LE(RelError(g.dV, ref.dV), 1e-10);
    }
  }
}

TEST(FlashBackward, CorrectMatchesOracle32) {
  const auto in = MakeInstance<float>(128, 128, 64, 9);
  const TileConfig cfg = Tiles(64, 32, true);
  const auto fwd = FlashForwardTraining(in.q, in.k, in.v, cfg);
  const auto g = FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg);
  const auto ref = OracleBackward(OracleForward(Cast<double>(in.q), Cast<double>(in.k),
                                                Cast<double>(in.v), OracleFor(cfg)),
                                  Cast<double>(in.dO));
  EXPECT_LE(RelError(Cast<double>(g.dQ), ref.dQ), 1e-4);
  EXPECT_LE(RelError(Cast<double>(g.dK), ref.dK), 1e-4);
  EXPECT_LE(RelError(Cast<double>(g.dV), ref.dV), 1e-4);
}

TEST(FlashBackward, ZeroUpstreamGivesZeroGradients) {
  const auto in = MakeInstance<double>(32, 32, 16, 1);
  const auto fwd = FlashForwardTraining(in.q, in.k, in.v, Tiles(16, 16));
  const auto g = FlashBackward(in.q, in.k, in.v, Tensor<double>(32, 16), fwd, Tiles(16, 16));
  EXPECT_EQ(MaxAbs(g.dQ) + MaxAbs(g.dK) + MaxAbs(g.dV), 0.0);
}

TEST(FlashBackward, LowPrecisionOutputBreaksTheRowTerm) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto in = MakeInstance<double>(64, 64, 64, 200 + seed);
    const TileConfig cfg = Tiles(32, 32);
    const auto fwd = FlashForwardTraining(in.q, in.k, in.v, cfg);
    const OracleTrace<double> trace = OracleForward(in.q, in.k, in.v, OracleFor(cfg));
    const auto ref = OracleBackward(trace, in.dO);
    const double good = RelError(FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg).dQ, ref.dQ);
    const double bad = RelError(
        FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg, BwdVariant::kLowPrecO).dQ, ref.dQ);
    EXPECT_GE(bad, 10.0 * good) << "seed " << seed;
    EXPECT_GT(bad, 1e-3);
    const std::vector<double> delta = OracleDelta(trace, in.dO);
    EXPECT_LE(RelError(RowDot(in.dO, *fwd.O_prime), delta), 1e-10);
    EXPECT_GT(RelError(RowDot(in.dO, fwd.O), delta), 1e-3);
  }
}

TEST(FlashBackward, NoFakeQuantPUsesUnquantizedProbabilitiesForDv) {
  const auto in = MakeInstance<double>(64, 64, 32, 8);
  const TileConfig cfg = Tiles(32, 32);
  const auto fwd = FlashForwardTraining(in.q, in.k, in.v, cfg);
  const auto g = FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg, BwdVariant::kNoFakeQuantP);
  const OracleTrace<double> t = OracleForward(in.q, in.k, in.v, OracleFor(cfg));
  EXPECT_LE(RelError(g.dV, Matmul(Transpose(t.P), in.dO)), 1e-10);
  // Only dV changes.
  const auto c = FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg);
  EXPECT_EQ(g.dQ, c.dQ);
  EXPECT_EQ(g.dK, c.dK);
}

TEST(FlashBackward, NaiveBf16IsTheUnquantizedGradientWithOutputO) {
  const auto in = MakeInstance<double>(32, 32, 16, 12);
  const TileConfig cfg = Tiles(16, 16);
  const auto fwd = FlashForwardTraining(in.q, in.k, in.v, cfg);
  AttnOutputs<double> with_o = fwd;
  with_o.O_prime = fwd.O;
  TileConfig plain = cfg;
  plain.quantize = false;
  // The unquantized backward fed the quantized forward's O and L.
  const auto naive = FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg, BwdVariant::kNaiveBf16);
  const auto expect = FlashBackward(in.q, in.k, in.v, in.dO, with_o, plain);
  EXPECT_LE(RelError(naive.dQ, expect.dQ), 1e-12);
  EXPECT_LE(RelError(naive.dV, expect.dV), 1e-12);
}

TEST(FlashBackward, ErrorsAreTyped) {
  const auto in = MakeInstance<double>(32, 32, 16, 1);
  const auto inf = FlashForwardInference(in.q, in.k, in.v, Tiles(16, 16));
  EXPECT_THROW(FlashBackward(in.q, in.k, in.v, in.dO, inf, Tiles(16, 16)), MissingOPrime);
  EXPECT_THROW(
      FlashBackward(in.q, in.k, in.v, in.dO, inf, Tiles(16, 16), BwdVariant::kNoFakeQuantP),
      MissingOPrime);
  EXPECT_NO_THROW(
      FlashBackward(in.q, in.k, in.v, in.dO, inf, Tiles(16, 16), BwdVariant::kLowPrecO));
  EXPECT_THROW(FlashBackward(in.q, in.k, in.v, Tensor<double>(16, 16), inf, Tiles(16, 16),
                             BwdVariant::kLowPrecO),
               ShapeError);
}

TEST(BwdVariant, NamesRoundtrip) {
  for (BwdVariant v : {BwdVariant::kCorrect, BwdVariant::kLowPrecO, BwdVariant::kNoFakeQuantP,
                       BwdVariant::kNaiveBf16}) {
    EXPECT_EQ(ParseBwdVariant(ToString(v)), v);
  }
  EXPECT_FALSE(ParseBwdVariant("fast").has_value());
}

// Records every probability tile and row-state snapshot.
class Recorder : public TileObserver {
 public:
  struct Tile {
    std::string pass;
    std::size_t row0, col0;
    Tensor<double> probs;
    std::vector<double> shift;
  };
  struct State {
    std::string pass;
    std::size_t k_tile, row0;
    std::vector<double> m, l;
  };
  void OnProbabilities(const ProbTileEvent& e) override {
    tiles.push_back({e.pass, e.row0, e.col0, e.probs, {e.row_shift.begin(), e.row_shift.end()}});
  }
  void OnRowState(const RowStateEvent& e) override {
    states.push_back({e.pass, e.k_tile, e.row0, {e.m.begin(), e.m.end()}, {e.l.begin(), e.l.end()}});
  }
  std::vector<Tile> tiles;
  std::vector<State> states;
};

TEST(FlashInstrumented, BackwardRecomputesTheForwardProbabilities) {
  const auto in = MakeInstance<float>(64, 64, 32, 30);
  TileConfig cfg = Tiles(16, 32, true);
  Recorder rec;
  cfg.observer = &rec;
  const auto fwd = FlashForwardTraining(in.q, in.k, in.v, cfg);
  FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg);
  std::size_t matched = 0;
  for (const auto& f : rec.tiles) {
    if (f.pass != "forward") continue;
    for (const auto& b : rec.tiles) {
      if (b.pass != "backward" || b.row0 != f.row0 || b.col0 != f.col0) continue;
      EXPECT_LE(MaxAbsDiff(f.probs, b.probs), 1e-6);
      ++matched;
    }
  }
  EXPECT_GT(matched, 0u);
  EXPECT_EQ(matched * 2, rec.tiles.size());
}

TEST(FlashInstrumented, RunningMaxTilesDifferFromTheBackwardGrid) {
  const auto in = MakeInstance<double>(64, 64, 32, 31);
  TileConfig cfg = Tiles(64, 16);
  cfg.p_scaling = PScaling::kRunningMax;
  Recorder rec;
  cfg.observer = &rec;
  const auto fwd = FlashForwardTraining(in.q, in.k, in.v, cfg);
  FlashBackward(in.q, in.k, in.v, in.dO, fwd, cfg);
  double worst = 0.0;
  for (const auto& f : rec.tiles) {
    if (f.pass != "forward") continue;
    ASSERT_EQ(f.shift.size(), f.probs.rows());
    for (const auto& b : rec.tiles) {
      if (b.pass != "backward" || b.row0 != f.row0 || b.col0 != f.col0) continue;
      for (std::size_t r = 0; r < f.probs.rows(); ++r) {
        const double norm = std::exp(f.shift[r] - fwd.L[f.row0 + r]);
        for (std::size_t c = 0; c < f.probs.cols(); ++c) {
          worst = std::max(worst, std::abs(f.probs(r, c) * norm - b.probs(r, c)));
        }
      }
    }
  }
  EXPECT_GT(worst, 1e-6);
}

TEST(FlashInstrumented, RowStateHoldsTheOnlineSoftmaxInvariant) {
  const auto in = MakeInstance<double>(64, 64, 32, 32);
  TileConfig cfg = Tiles(32, 16, true);
  Recorder rec;
  cfg.observer = &rec;
  FlashForwardTraining(in.q, in.k, in.v, cfg);
  const OracleTrace<double> t = OracleForward(in.q, in.k, in.v, OracleFor(cfg));
  ASSERT_FALSE(rec.states.empty());
  for (const auto& s : rec.states) {
    const std::size_t seen = (s.k_tile + 1) * cfg.b_k;
    for (std::size_t r = 0; r < s.m.size(); ++r) {
      double m = -INFINITY, l = 0.0;
      for (std::size_t j = 0; j < seen; ++j) m = std::max(m, t.S(s.row0 + r, j));
      for (std::size_t j = 0; j < seen; ++j) l += std::exp(t.S(s.row0 + r, j) - m);
      EXPECT_NEAR(s.m[r], m, 1e-12);
      EXPECT_NEAR(s.l[r], l, 1e-12 * l);
    }
  }
}

TEST(FlashInstrumented, JsonTraceIsOneObjectPerLine) {
  const auto in = MakeInstance<double>(32, 32, 16, 1);
  std::ostringstream out;
  JsonTraceWriter w(out);
  TileConfig cfg = Tiles(16, 16);
  cfg.observer = &w;
  FlashForwardInference(in.q, in.k, in.v, cfg);
  std::istringstream lines(out.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("m"));
    EXPECT_TRUE(j.contains("l"));
    ++n;
  }
  EXPECT_GT(n, 0);
}

}  // namespace
}  // namespace attnqat
