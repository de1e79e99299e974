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

// A single-head attention model trained on synthetic associative recall.
//
// Every example has seq_len context tokens [k_t, v_t, c] and seq_len query
// tokens [k_r, 0, c_q], where r is a random context index and c, c_q are
// constant bias features. The target for a query is v_r. The model is
//
//   Q = Xq Wq,  K = Xc Wk,  V = Xc Wv,  Y = attention(Q, K, V) Wo
//
// trained with mean squared error. Projections stay in double precision;
// only the attention matmuls see FP4.
//
// The bias feature adds the same vector to every key. Softmax ignores it, so
// its weights get no gradient from a correct backward pass, but it inflates
// the FP4 block scales of K. A backward pass whose dS rows do not sum to zero
// pushes those weights anyway, and nothing pulls them back.

#ifndef ATTNQAT_QAT_H_
#define ATTNQAT_QAT_H_

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnqat/flash.h"
#include "attnqat/tensor.h"

namespace attnqat {

enum class AttnMode { kBf16, kFp4Qat };
// kFp4 runs the real-quantization inference forward; kFp4Fake runs the
// fake-quantized training forward on the same weights.
enum class EvalMode { kBf16, kFp4, kFp4Fake };

const char* ToString(AttnMode m);
const char* ToString(EvalMode m);

struct TaskOptions {
  std::size_t key_dim = 16;
  std::size_t value_dim = 16;
  double key_bias = 16.0;
  double query_bias = 0.0;

  std::size_t d_model() const { return key_dim + value_dim + 1; }
};

// Rank-3 tensors, one slice per example.
struct Batch {
  Tensor<double> xq;  // batch x seq_len x d_model
  Tensor<double> xc;  // batch x seq_len x d_model
  Tensor<double> y;   // batch x seq_len x value_dim
  std::vector<std::size_t> recall;  // r for every (example, query), row-major
};

// Deterministic per seed. Throws InvalidValue when seq_len < 4 or batch == 0.
Batch MakeTask(std::uint64_t seed, std::size_t seq_len, std::size_t batch,
               const TaskOptions& task = {});

// Mean squared target entry: the loss of the all-zero predictor.
double TargetSecondMoment(const Batch& b);

struct ToyModel {
  Tensor<double> w_q;  // d_model x d
  Tensor<double> w_k;  // d_model x d
  Tensor<double> w_v;  // d_model x d
  Tensor<double> w_o;  // d x value_dim

  // Wq, Wk, Wv entries N(0, 1/d_model); Wo entries N(0, 1/d).
  static ToyModel Init(std::size_t d_model, std::size_t d, std::size_t out_dim,
                       std::uint64_t seed);
  static ToyModel Zeros(std::size_t d_model, std::size_t d, std::size_t out_dim);

  std::vector<Tensor<double>*> params();
  std::vector<const Tensor<double>*> params() const;
  bool AllFinite() const;
};

struct TrainConfig {
  std::size_t steps = 2000;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // lr ramps linearly from lr / warmup_steps to lr over the first steps.
  std::size_t warmup_steps = 0;
  std::uint64_t seed = 0;
  std::size_t seq_len = 32;
  std::size_t batch = 8;
  std::size_t head_dim = 32;
  AttnMode attn_mode = AttnMode::kFp4Qat;
  BwdVariant bwd_variant = BwdVariant::kCorrect;
  EvalMode eval_mode = EvalMode::kFp4;
  std::size_t eval_batch = 32;
  std::size_t b_q = 16;
  std::size_t b_k = 16;
  BlockSpec spec = BlockSpec::Nvfp4();
  TaskOptions task;

  // Every field, in the layout FromJson accepts.
  nlohmann::json ToJson() const;
  // Requires every field ToJson writes except the task block, which falls
  // back to defaults. All problems are reported together in one
  // InvalidValue whose message names each offending field.
  static TrainConfig FromJson(const nlohmann::json& j);
  // Throws InvalidValue listing every violated constraint.
  void Validate() const;

  TileConfig Tiles(bool quantize) const;
};

struct StepRecord {
  std::size_t step;  // 1-based
  double loss;
  double grad_norm;
  double ms;
};

struct TrainLog {
  std::vector<StepRecord> records;

  // Header "step,loss,grad_norm,ms", one row per step.
  void WriteCsv(std::ostream& out) const;
  double MaxGradNorm() const;
  // Unbiased sample variance of the grad-norm trace.
  double GradNormVariance() const;
};

struct LossAndGrads {
  double loss = 0.0;
  ToyModel grads;
};

// Loss and parameter gradients for one batch. FP4-QAT uses the training
// forward and the selected backward variant; BF16 runs both unquantized.
LossAndGrads ComputeLossAndGrads(const ToyModel& model, const Batch& batch,
                                 const TrainConfig& cfg);

double Evaluate(const ToyModel& model, const Batch& batch, EvalMode mode,
                const TrainConfig& cfg);

// The held-out batch Evaluate is run on for a given config.
Batch EvalBatch(const TrainConfig& cfg);

// AdamW with decoupled weight decay.
class AdamW {
 public:
  AdamW(const ToyModel& shape, double lr, double beta1, double beta2, double eps,
        double weight_decay);
  void Step(ToyModel& model, const ToyModel& grads);
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  ToyModel m_, v_;
};

// Trains from ToyModel::Init(seed). `log` receives one record per completed
// step, so it holds the trace up to the failure when StabilityError is thrown
// (loss non-finite or above 1e6, or non-finite gradients or weights).
ToyModel Train(const TrainConfig& cfg, TrainLog& log);

// Same, starting from `init` (finetuning). Throws ShapeError if its shapes
// do not match cfg.
ToyModel Train(const TrainConfig& cfg, ToyModel init, TrainLog& log);

inline constexpr double kDivergenceLoss = 1e6;

// Backward-variant ablation: a model pretrained unquantized is finetuned with
// FP4-QAT at an aggressive lr under each backward variant.
struct AblationConfig {
  TrainConfig pretrain;
  TrainConfig finetune;  // bwd_variant is overridden per run

  static AblationConfig Defaults(std::uint64_t seed);
};

struct AblationRun {
  BwdVariant variant;
  TrainLog log;
  bool diverged = false;
  std::size_t diverged_step = 0;  // valid when diverged
  std::string error;
  double final_loss = 0.0;        // last logged training loss
};

ToyModel Pretrain(const AblationConfig& cfg);

// Catches StabilityError and records it in the result.
AblationRun Finetune(const AblationConfig& cfg, const ToyModel& pretrained,
                     BwdVariant variant);

}  // namespace attnqat

#endif  // ATTNQAT_QAT_H_
