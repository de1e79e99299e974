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

#include "attnqat/qat.h"

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

namespace attnqat {
namespace {

TrainConfig TinyConfig() {
  TrainConfig c;
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
  return c;
}

ToyModel FreshModel(const TrainConfig& c) {
  return ToyModel::Init(c.task.d_model(), c.head_dim, c.task.value_dim, c.seed);
}

TEST(MakeTask, DeterministicPerSeed) {
  const Batch a = MakeTask(3, 8, 2);
  const Batch b = MakeTask(3, 8, 2);
  const Batch c = MakeTask(4, 8, 2);
  EXPECT_EQ(a.xq, b.xq);
  EXPECT_EQ(a.xc, b.xc);
  EXPECT_EQ(a.y, b.y);
  EXPECT_NE(a.xc, c.xc);
  EXPECT_THROW(MakeTask(0, 3, 2), InvalidValue);
  EXPECT_THROW(MakeTask(0, 8, 0), InvalidValue);
}

TEST(MakeTask, TargetIsTheRecalledContextValue) {
  TaskOptions t;
  const Batch b = MakeTask(1, 16, 3, t);
  for (std::size_t e = 0; e < 3; ++e) {
    for (std::size_t i = 0; i < 16; ++i) {
      const std::size_t r = b.recall[e * 16 + i];
      for (std::size_t c = 0; c < t.key_dim; ++c) {
        ASSERT_EQ(b.xq.at(e, i, c), b.xc.at(e, r, c));
      }
      for (std::size_t c = 0; c < t.value_dim; ++c) {
        ASSERT_EQ(b.y.at(e, i, c), b.xc.at(e, r, t.key_dim + c));
      }
      EXPECT_EQ(b.xc.at(e, i, t.d_model() - 1), t.key_bias);
      EXPECT_EQ(b.xq.at(e, i, t.d_model() - 1), t.query_bias);
    }
  }
}

TEST(MakeTask, ZeroPredictorLossIsTheValueVariance) {
  const double m = TargetSecondMoment(MakeTask(2, 32, 64));
  // 32768 unit normals: the mean square is 1 with standard error about 0.008.
  EXPECT_NEAR(m, 1.0, 0.05);
}

TEST(Evaluate, ZeroWeightsGiveTheSecondMoment) {
  TrainConfig c;
  const Batch b = EvalBatch(c);
  const ToyModel z = ToyModel::Zeros(c.task.d_model(), c.head_dim, c.task.value_dim);
  for (EvalMode m : {EvalMode::kBf16, EvalMode::kFp4, EvalMode::kFp4Fake}) {
    EXPECT_DOUBLE_EQ(Evaluate(z, b, m, c), TargetSecondMoment(b));
  }
}

TEST(Evaluate, FreshModelIsNearTheUntrainedBaseline) {
  TrainConfig c;
  const Batch b = EvalBatch(c);
  const ToyModel m = FreshModel(c);
  const double base = Evaluate(m, b, EvalMode::kBf16, c);
  EXPECT_GT(base, TargetSecondMoment(b));
  EXPECT_NEAR(Evaluate(m, b, EvalMode::kFp4, c), base, 0.2 * base);
  EXPECT_NEAR(Evaluate(m, b, EvalMode::kFp4Fake, c), base, 0.2 * base);
}

TEST(Evaluate, RealAndFakeQuantizedForwardsAgree) {
  TrainConfig c;
  c.steps = 100;
  TrainLog log;
  const ToyModel m = Train(c, log);
  const Batch b = EvalBatch(c);
  const double real = Evaluate(m, b, EvalMode::kFp4, c);
  const double fake = Evaluate(m, b, EvalMode::kFp4Fake, c);
  EXPECT_LE(std::abs(real - fake), 1e-5 * fake);
}

double LossOf(const ToyModel& m, const Batch& b, const TrainConfig& c) {
  return ComputeLossAndGrads(m, b, c).loss;
}

TEST(ComputeLossAndGrads, LossMatchesEvaluate) {
  const TrainConfig c = TinyConfig();
  const Batch b = MakeTask(5, c.seq_len, c.batch, c.task);
  const ToyModel m = FreshModel(c);
  EXPECT_NEAR(LossOf(m, b, c), Evaluate(m, b, EvalMode::kBf16, c), 1e-14);
}

TEST(ComputeLossAndGrads, MatchesFiniteDifferencesUnquantized) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TrainConfig c = TinyConfig();
    c.seed = seed;
    const Batch b = MakeTask(seed + 10, c.seq_len, c.batch, c.task);
    ToyModel m = FreshModel(c);
    const LossAndGrads lg = ComputeLossAndGrads(m, b, c);
    const auto params = m.params();
    const auto grads = lg.grads.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor<double> fd(params[p]->dims());
      for (std::size_t i = 0; i < params[p]->size(); ++i) {
        double& w = params[p]->data()[i];
        const double w0 = w;
        const double h = 1e-5;
        w = w0 + h;
        const double up = LossOf(m, b, c);
        w = w0 - h;
        const double down = LossOf(m, b, c);
        w = w0;
        fd.data()[i] = (up - down) / (2 * h);
      }
      EXPECT_LE(RelError(*grads[p], fd), 1e-3) << "seed " << seed << " param " << p;
    }
  }
}

TEST(ComputeLossAndGrads, KeyBiasWeightsGetNoGradient) {
  // The key bias adds the same score to every key, which softmax ignores.
  TrainConfig c = TinyConfig();
  const Batch b = MakeTask(7, c.seq_len, c.batch, c.task);
  const LossAndGrads lg = ComputeLossAndGrads(FreshModel(c), b, c);
  const std::size_t bias_row = c.task.d_model() - 1;
  for (std::size_t j = 0; j < c.head_dim; ++j) {
    EXPECT_NEAR(lg.grads.w_k(bias_row, j), 0.0, 1e-12);
  }
}

TEST(Train, DeterministicPerSeed) {
  TrainConfig c;
  c.steps = 20;
  TrainLog a, b;
  const ToyModel ma = Train(c, a);
  const ToyModel mb = Train(c, b);
  EXPECT_EQ(ma.w_q, mb.w_q);
  EXPECT_EQ(ma.w_o, mb.w_o);
  ASSERT_EQ(a.records.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(a.records[i].step, i + 1);
    EXPECT_EQ(a.records[i].loss, b.records[i].loss);
    EXPECT_EQ(a.records[i].grad_norm, b.records[i].grad_norm);
  }
}

TEST(Train, Bf16ReachesTenPercentOfBaselineIn500Steps) {
  TrainConfig c;
  c.steps = 500;
  c.attn_mode = AttnMode::kBf16;
  c.eval_mode = EvalMode::kBf16;
  const Batch b = EvalBatch(c);
  const double base = Evaluate(FreshModel(c), b, EvalMode::kBf16, c);
  TrainLog log;
  const ToyModel m = Train(c, log);
  EXPECT_LE(Evaluate(m, b, EvalMode::kBf16, c), 0.1 * base);
}

TEST(Train, QatLossDecreasesByStep500) {
  TrainConfig c;
  c.steps = 500;
  TrainLog log;
  Train(c, log);
  EXPECT_LT(log.records[499].loss, log.records[0].loss);
}

TEST(Train, FinetuneRejectsMismatchedModel) {
  TrainConfig c;
  c.steps = 1;
  TrainLog log;
  EXPECT_THROW(Train(c, ToyModel::Zeros(5, 32, 16), log), ShapeError);
}

TEST(Train, DivergenceRaisesStabilityErrorWithStep) {
  TrainConfig c;
  c.steps = 200;
  c.lr = 1e3;
  TrainLog log;
  try {
    Train(c, log);
    FAIL() << "expected StabilityError";
  } catch (const StabilityError& e) {
    EXPECT_GE(e.step(), 1u);
    EXPECT_EQ(log.records.size() + 1, e.step());
  }
}

TEST(TrainLog, CsvAndStatistics) {
  TrainLog log;
  log.records = {{1, 2.0, 1.0, 0.5}, {2, 1.5, 3.0, 0.25}, {3, 1.0, 2.0, 0.5}};
  std::ostringstream out;
  log.WriteCsv(out);
  std::istringstream in(out.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,loss,grad_norm,ms");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 3);
  EXPECT_EQ(log.MaxGradNorm(), 3.0);
  EXPECT_DOUBLE_EQ(log.GradNormVariance(), 1.0);
}

TEST(TrainConfig, JsonRoundtrip) {
  TrainConfig c;
  c.lr = 0.25;
  c.bwd_variant = BwdVariant::kNoFakeQuantP;
  c.task.query_bias = 3.0;
  c.warmup_steps = 7;
  const TrainConfig back = TrainConfig::FromJson(c.ToJson());
  EXPECT_EQ(back.ToJson(), c.ToJson());
}

TEST(TrainConfig, MissingFieldsAreAllReported) {
  nlohmann::json j = TrainConfig{}.ToJson();
  j.erase("lr");
  j.erase("seed");
  try {
    TrainConfig::FromJson(j);
    FAIL() << "expected InvalidValue";
  } catch (const InvalidValue& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lr"), std::string::npos);
    EXPECT_NE(msg.find("seed"), std::string::npos);
  }
}

TEST(TrainConfig, ValidationListsEveryProblem) {
  TrainConfig c;
  c.lr = -1.0;
  c.steps = 0;
  c.b_k = 5;
  try {
    c.Validate();
    FAIL() << "expected InvalidValue";
  } catch (const InvalidValue& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lr"), std::string::npos);
    EXPECT_NE(msg.find("steps"), std::string::npos);
    EXPECT_NE(msg.find("b_k"), std::string::npos);
  }
}

TEST(AdamW, FirstStepMovesEachWeightByLr) {
  ToyModel m = ToyModel::Zeros(3, 2, 2);
  ToyModel g = ToyModel::Zeros(3, 2, 2);
  g.w_q(0, 0) = 5.0;
  g.w_o(1, 1) = -0.01;
  AdamW opt(m, 0.1, 0.9, 0.999, 1e-8, 0.0);
  opt.Step(m, g);
  EXPECT_NEAR(m.w_q(0, 0), -0.1, 1e-8);
  EXPECT_NEAR(m.w_o(1, 1), 0.1, 1e-6);
  EXPECT_EQ(m.w_k(0, 0), 0.0);
}

}  // namespace
}  // namespace attnqat
