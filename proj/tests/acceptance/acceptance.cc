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

// Acceptance run: one PASS/FAIL line per criterion, each with its pinned
// tolerance and runtime budget. Exits nonzero if any criterion fails.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attnqat/flash.h"
#include "attnqat/fp4_codec.h"
#include "attnqat/qat.h"
#include "attnqat/quant_tensor.h"
#include "attnqat/rng.h"
#include "checks.h"
#include "report.h"
#include "test_util.h"

namespace attnqat {
namespace {

using cli::CheckOptions;
using cli::RunReport;
using cli::Stopwatch;

struct Verdict {
  bool pass = false;
  std::string summary;
};

// Collapses a suite report into a verdict naming the failing checks.
Verdict FromReport(const RunReport& r) {
  Verdict v{r.pass(), ""};
  std::ostringstream s;
  for (const cli::CheckResult& c : r.checks) {
    if (!c.pass || r.checks.size() <= 4) {
      s << (s.tellp() > 0 ? "; " : "") << c.name << "=" << c.metric << " "
        << cli::ToString(c.cmp) << " " << c.threshold << (c.pass ? "" : " FAILED");
      if (!c.pass && !c.detail.empty()) s << " at " << c.detail;
    }
  }
  if (v.pass && r.checks.size() > 4) s << r.checks.size() << " checks";
  v.summary = s.str();
  return v;
}

Verdict Combine(const std::vector<Verdict>& parts) {
  Verdict v{true, ""};
  for (const Verdict& p : parts) {
    v.pass = v.pass && p.pass;
    if (!p.summary.empty()) v.summary += (v.summary.empty() ? "" : " | ") + p.summary;
  }
  return v;
}

// 1. Every FP4, E4M3 and E8M0 code decodes to its bit-field value and
// re-encodes to its canonical code; the FP4 value set is the fifteen values.
Verdict Codec() {
  int bad = 0;
  std::set<double> values;
  for (unsigned c = 0; c < 16; ++c) {
    const double v = Decode(Fp4Code{static_cast<std::uint8_t>(c)});
    if (v != testing::Fp4FieldValue(c)) ++bad;
    if (RoundToFp4(v) != Canonical(Fp4Code{static_cast<std::uint8_t>(c)})) ++bad;
    values.insert(v);
  }
  const std::set<double> want = {-6, -4, -3, -2, -1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2, 3, 4, 6};
  if (values != want) ++bad;
  for (unsigned c = 0; c < 256; ++c) {
    const Fp8E4M3Code e4{static_cast<std::uint8_t>(c)};
    const double v4 = Decode(e4);
    const double f4 = testing::E4M3FieldValue(c);
    if (std::isnan(f4)) {
      if (!std::isnan(v4) || EncodeE4M3(v4).bits != kE4M3NaNCode) ++bad;
    } else if (v4 != f4 || EncodeE4M3(v4) != Canonical(e4)) {
      ++bad;
    }
    const Fp8E8M0Code e8{static_cast<std::uint8_t>(c)};
    const double v8 = Decode(e8);
    if (c == 0xFF) {
      if (!std::isnan(v8) || EncodeE8M0(v8).bits != kE8M0NaNCode) ++bad;
    } else if (v8 != std::ldexp(1.0, static_cast<int>(c) - 127) || EncodeE8M0(v8) != e8) {
      ++bad;
    }
  }
  return {bad == 0, std::to_string(values.size()) + " distinct FP4 values, " +
                        std::to_string(bad) + " mismatches over 16+256+256 codes"};
}

// 2. FP4MM equals the matmul of fake-quantized operands bit for bit.
Verdict Fp4mmIdentity() {
  int mismatched = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s);
    const Tensor<double> a = Randn<double>({32, 64}, rng);
    const Tensor<double> b_t = Randn<double>({32, 64}, rng);
    const BlockSpec spec = BlockSpec::Nvfp4();
    const Tensor<double> real = Fp4mm<double>(Quantize(a, spec), Quantize(b_t, spec));
    const Tensor<double> fake =
        MatmulNT(testing::BruteFakeQuantRows(a, 16), testing::BruteFakeQuantRows(b_t, 16), 16);
    if (!(real == fake)) ++mismatched;
  }
  return {mismatched == 0, std::to_string(mismatched) + "/100 instances differ"};
}

// Forward grid at both widths, causal and not. Criterion 3 reads the oracle
// checks, criterion 9 the inference-vs-training one.
struct ForwardGrid {
  Verdict oracle, inference;
};

ForwardGrid RunForwardGrid() {
  std::vector<Verdict> oracle, inference;
  for (Width w : {Width::k64, Width::k32}) {
    for (bool causal : {false, true}) {
      CheckOptions o;
      o.seeds = 1;
      o.accum = w;
      o.causal = causal;
      RunReport r;
      cli::CheckForward(o, r);
      RunReport ro, ri;
      for (const cli::CheckResult& c : r.checks) {
        (c.name == "forward.inference_vs_training" ? ri : ro).checks.push_back(c);
      }
      oracle.push_back(FromReport(ro));
      inference.push_back(FromReport(ri));
    }
  }
  return {Combine(oracle), Combine(inference)};
}

Verdict BackwardGrid() {
  std::vector<Verdict> parts;
  for (Width w : {Width::k64, Width::k32}) {
    for (bool causal : {false, true}) {
      CheckOptions o;
      o.seeds = 1;
      o.accum = w;
      o.causal = causal;
      RunReport r;
      cli::CheckBackward(o, r);
      parts.push_back(FromReport(r));
    }
  }
  return Combine(parts);
}

// 5. D from O' matches delta on 20 seeds; D from O misses by > 1e-3 on each.
Verdict Identity() {
  CheckOptions o;
  o.seeds = 20;
  o.sizes = {128};
  o.head_dims = {64};
  RunReport r;
  cli::CheckIdentity(o, r);
  return FromReport(r);
}

// 6. End-to-end gradients of the unquantized toy model against central
// differences with step 1e-3, and the straight-through identity.
Verdict Gradients() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TrainConfig c;
    c.seed = seed;
    c.seq_len = 4;
    c.batch = 2;
    c.head_dim = 8;
    c.b_q = c.b_k = 4;
    c.task.key_dim = 4;
    c.task.value_dim = 4;
    c.task.key_bias = 2.0;
    c.task.query_bias = 1.0;
    c.attn_mode = AttnMode::kBf16;
    c.eval_mode = EvalMode::kBf16;
    const Batch b = MakeTask(seed + 1000, c.seq_len, c.batch, c.task);
    ToyModel m = ToyModel::Init(c.task.d_model(), c.head_dim, c.task.value_dim, seed);
    const LossAndGrads lg = ComputeLossAndGrads(m, b, c);
    const auto params = m.params();
    const auto grads = lg.grads.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor<double> fd(params[p]->dims());
      for (std::size_t i = 0; i < params[p]->size(); ++i) {
        double& w = params[p]->data()[i];
        const double w0 = w;
        const double h = 1e-3;
        w = w0 + h;
        const double up = ComputeLossAndGrads(m, b, c).loss;
        w = w0 - h;
        const double down = ComputeLossAndGrads(m, b, c).loss;
        w = w0;
        fd.data()[i] = (up - down) / (2 * h);
      }
      worst = std::max(worst, RelError(*grads[p], fd));
    }
  }
  int ste_bad = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Tensor<double> a = Randn<double>({16, 32}, rng);
    const Tensor<double> b_t = Randn<double>({8, 32}, rng);
    const Tensor<double> dC = Randn<double>({16, 8}, rng);
    const FakeQuantMatmulGrads<double> g =
        FakeQuantMatmulBackward(a, b_t, dC, BlockSpec::Nvfp4());
    if (!(g.dA == Matmul(dC, testing::BruteFakeQuantRows(b_t, 16)))) ++ste_bad;
    if (!(g.dB_t == Matmul(Transpose(dC), testing::BruteFakeQuantRows(a, 16)))) ++ste_bad;
  }
  std::ostringstream s;
  s << "max finite-difference rel err " << worst << " <= 1e-3; STE mismatches " << ste_bad;
  return {worst <= 1e-3 && ste_bad == 0, s.str()};
}

struct QatModels {
  std::vector<double> qat_fp4, qat_fp4_fake, bf16_fp4, bf16_bf16;
};

// 7. QAT recovers FP4 quality on the toy task.
Verdict Recovery(QatModels& out) {
  bool pass = true;
  std::ostringstream s;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TrainConfig qat;
    qat.seed = seed;
    TrainConfig bf16 = qat;
    bf16.attn_mode = AttnMode::kBf16;
    TrainLog log;
    const ToyModel mq = Train(qat, log);
    const ToyModel mb = Train(bf16, log);
    const Batch eval = EvalBatch(qat);
    const double q4 = Evaluate(mq, eval, EvalMode::kFp4, qat);
    const double b4 = Evaluate(mb, eval, EvalMode::kFp4, qat);
    const double bb = Evaluate(mb, eval, EvalMode::kBf16, qat);
    out.qat_fp4.push_back(q4);
    out.qat_fp4_fake.push_back(Evaluate(mq, eval, EvalMode::kFp4Fake, qat));
    out.bf16_fp4.push_back(b4);
    out.bf16_bf16.push_back(bb);
    const bool ok = q4 <= 0.5 * b4 && q4 <= 2.0 * bb;
    pass = pass && ok;
    s << (seed ? "; " : "") << "seed " << seed << ": qat/fp4 " << q4 << " vs bf16/fp4 " << b4
      << " (ratio " << q4 / b4 << " <= 0.5), vs bf16/bf16 " << bb << " (x" << q4 / bb
      << " <= 2)";
  }
  return {pass, s.str()};
}

// 8. Broken backward variants under the finetuning ablation.
Verdict Stability() {
  bool pass = true;
  std::ostringstream s;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const AblationConfig cfg = AblationConfig::Defaults(seed);
    const ToyModel pre = Pretrain(cfg);
    const AblationRun correct = Finetune(cfg, pre, BwdVariant::kCorrect);
    const AblationRun low = Finetune(cfg, pre, BwdVariant::kLowPrecO);
    const AblationRun nofq = Finetune(cfg, pre, BwdVariant::kNoFakeQuantP);
    const double c_max = correct.log.MaxGradNorm();
    const double c_var = correct.log.GradNormVariance();
    const double n_var = nofq.log.GradNormVariance();
    const bool low_ok = low.diverged || low.log.MaxGradNorm() >= 10.0 * c_max;
    const bool nofq_ok = !nofq.diverged && n_var > c_var;
    pass = pass && !correct.diverged && low_ok && nofq_ok;
    s << (seed ? "; " : "") << "seed " << seed << ": correct max " << c_max
      << (correct.diverged ? " DIVERGED" : "") << ", lowpreco "
      << (low.diverged ? "diverged at step " + std::to_string(low.diverged_step)
                       : "max " + std::to_string(low.log.MaxGradNorm()))
      << (low_ok ? "" : " FAILED") << ", nofqp var " << n_var << " vs correct var " << c_var
      << (nofq_ok ? "" : " FAILED");
  }
  return {pass, s.str()};
}

// 9. Toy-task part: real-quant eval matches fake-quant eval of the QAT models.
Verdict ToyFakeReal(const QatModels& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.qat_fp4.size(); ++i) {
    worst = std::max(worst, std::abs(m.qat_fp4[i] - m.qat_fp4_fake[i]) / m.qat_fp4_fake[i]);
  }
  std::ostringstream s;
  s << "toy eval real vs fake rel gap " << worst << " <= 1e-5";
  return {!m.qat_fp4.empty() && worst <= 1e-5, s.str()};
}

// 10. Score decomposition and two-level P bound on 50 seeds.
Verdict Sage3() {
  CheckOptions o;
  o.seeds = 50;
  o.sizes = {128};
  o.head_dims = {64};
  RunReport r;
  cli::CheckSage3(o, r);
  return FromReport(r);
}

// 11. Peak allocation of tiled paths grows linearly, the oracle's quadratically.
Verdict Memory() {
  CheckOptions o;
  o.accum = Width::k32;
  RunReport r;
  cli::CheckMemory(o, r);
  return FromReport(r);
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
};

void Print(const Criterion& c, const Verdict& v, double seconds, bool& all) {
  const bool in_time = seconds < c.budget_s;
  const bool pass = v.pass && in_time;
  all = all && pass;
  std::printf("%s criterion %d: %s [%.2f s, budget %.0f s%s] %s\n", pass ? "PASS" : "FAIL",
              c.id, c.name, seconds, c.budget_s, in_time ? "" : " EXCEEDED", v.summary.c_str());
  std::fflush(stdout);
}

int Main() {
  bool all = true;
  auto timed = [](auto&& fn) {
    Stopwatch sw;
    Verdict v = fn();
    return std::make_pair(v, sw.ms() / 1000.0);
  };

  auto [v1, t1] = timed(Codec);
  Print({1, "codec exhaustiveness", 1}, v1, t1, all);
  auto [v2, t2] = timed(Fp4mmIdentity);
  Print({2, "fp4mm equals fake-quantized matmul", 5}, v2, t2, all);

  Stopwatch fwd_sw;
  const ForwardGrid fwd = RunForwardGrid();
  const double t3 = fwd_sw.ms() / 1000.0;
  Print({3, "forward oracle equivalence", 60}, fwd.oracle, t3, all);
  auto [v4, t4] = timed(BackwardGrid);
  Print({4, "backward oracle equivalence", 120}, v4, t4, all);
  auto [v5, t5] = timed(Identity);
  Print({5, "row-term identity and its breakage", 30}, v5, t5, all);
  auto [v6, t6] = timed(Gradients);
  Print({6, "gradient ground truth", 10}, v6, t6, all);

  QatModels models;
  auto [v7, t7] = timed([&] { return Recovery(models); });
  Print({7, "QAT recovery on the toy task", 300}, v7, t7, all);
  auto [v8, t8] = timed(Stability);
  Print({8, "stability ablation", 300}, v8, t8, all);

  // The inference-vs-training comparison ran inside the forward grid; its
  // share of that time is bounded by the grid's total.
  auto [v9, t9] = timed([&] { return Combine({fwd.inference, ToyFakeReal(models)}); });
  Print({9, "fake/real quantization consistency", 30}, v9, t9 + t3, all);
  auto [v10, t10] = timed(Sage3);
  Print({10, "sage3 exactness", 10}, v10, t10, all);
  auto [v11, t11] = timed(Memory);
  Print({11, "linear-memory property", 60}, v11, t11, all);

  std::printf("%s\n", all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL");
  return all ? 0 : 1;
}

}  // namespace
}  // namespace attnqat

int main() { return attnqat::Main(); }
