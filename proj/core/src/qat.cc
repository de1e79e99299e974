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

#include <chrono>
#include <cmath>
#include <optional>
#include <ostream>
#include <sstream>

#include "attnqat/rng.h"

namespace attnqat {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kEvalSalt = 0xD1B54A32D192ED03ULL;

std::uint64_t StepSeed(std::uint64_t seed, std::size_t step) {
  return (seed + 1) * kGolden + step;
}

void AddInto(Tensor<double>& dst, const Tensor<double>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

const char* ToString(AttnMode m) {
  return m == AttnMode::kBf16 ? "bf16" : "fp4-qat";
}

const char* ToString(EvalMode m) {
  switch (m) {
    case EvalMode::kBf16:
      return "bf16";
    case EvalMode::kFp4:
      return "fp4";
    case EvalMode::kFp4Fake:
      return "fp4-fake";
  }
  return "unknown";
}

Batch MakeTask(std::uint64_t seed, std::size_t seq_len, std::size_t batch,
               const TaskOptions& task) {
  if (seq_len < 4) throw InvalidValue("MakeTask: seq_len must be at least 4");
  if (batch == 0) throw InvalidValue("MakeTask: batch must be positive");
  const std::size_t dm = task.d_model();
  Rng rng(seed);
  Batch b;
  b.xq = Tensor<double>(std::vector<std::size_t>{batch, seq_len, dm});
  b.xc = Tensor<double>(std::vector<std::size_t>{batch, seq_len, dm});
  b.y = Tensor<double>(std::vector<std::size_t>{batch, seq_len, task.value_dim});
  b.recall.resize(batch * seq_len);
  for (std::size_t e = 0; e < batch; ++e) {
    for (std::size_t t = 0; t < seq_len; ++t) {
      for (std::size_t c = 0; c < task.key_dim + task.value_dim; ++c) {
        b.xc.at(e, t, c) = rng.Normal();
      }
      b.xc.at(e, t, dm - 1) = task.key_bias;
    }
    for (std::size_t t = 0; t < seq_len; ++t) {
      const std::size_t r = rng.Below(seq_len);
      b.recall[e * seq_len + t] = r;
      b.xq.at(e, t, dm - 1) = task.query_bias;
      for (std::size_t c = 0; c < task.key_dim; ++c) b.xq.at(e, t, c) = b.xc.at(e, r, c);
      for (std::size_t c = 0; c < task.value_dim; ++c) {
        b.y.at(e, t, c) = b.xc.at(e, r, task.key_dim + c);
      }
    }
  }
  return b;
}

double TargetSecondMoment(const Batch& b) {
  double s = 0.0;
  for (double v : b.y.data()) s += v * v;
  return s / static_cast<double>(b.y.size());
}

ToyModel ToyModel::Init(std::size_t d_model, std::size_t d, std::size_t out_dim,
                        std::uint64_t seed) {
  Rng rng(seed);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  ToyModel m;
  m.w_q = Randn<double>({d_model, d}, rng, in_scale);
  m.w_k = Randn<double>({d_model, d}, rng, in_scale);
  m.w_v = Randn<double>({d_model, d}, rng, in_scale);
  m.w_o = Randn<double>({d, out_dim}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  return m;
}

ToyModel ToyModel::Zeros(std::size_t d_model, std::size_t d, std::size_t out_dim) {
  return {Tensor<double>(d_model, d), Tensor<double>(d_model, d), Tensor<double>(d_model, d),
          Tensor<double>(d, out_dim)};
}

std::vector<Tensor<double>*> ToyModel::params() { return {&w_q, &w_k, &w_v, &w_o}; }

std::vector<const Tensor<double>*> ToyModel::params() const {
  return {&w_q, &w_k, &w_v, &w_o};
}

bool ToyModel::AllFinite() const {
  for (const Tensor<double>* p : params()) {
    if (!attnqat::AllFinite(*p)) return false;
  }
  return true;
}

nlohmann::json TrainConfig::ToJson() const {
  return {
      {"steps", steps},
      {"lr", lr},
      {"beta1", beta1},
      {"beta2", beta2},
      {"eps", eps},
      {"weight_decay", weight_decay},
      {"warmup_steps", warmup_steps},
      {"seed", seed},
      {"seq_len", seq_len},
      {"batch", batch},
      {"head_dim", head_dim},
      {"attn_mode", ToString(attn_mode)},
      {"bwd_variant", ToString(bwd_variant)},
      {"eval_mode", ToString(eval_mode)},
      {"eval_batch", eval_batch},
      {"b_q", b_q},
      {"b_k", b_k},
      {"format", spec.block_size == 32 ? "mxfp4" : "nvfp4"},
      {"task",
       {{"key_dim", task.key_dim}, {"value_dim", task.value_dim}, {"key_bias", task.key_bias},
        {"query_bias", task.query_bias}}},
  };
}

TrainConfig TrainConfig::FromJson(const nlohmann::json& j) {
  TrainConfig cfg;
  std::vector<std::string> problems;
  if (!j.is_object()) throw InvalidValue("train config: expected a JSON object");

  auto number = [&](const nlohmann::json& obj, const char* key, auto& out, bool required) {
    using Out = std::remove_reference_t<decltype(out)>;
    if (!obj.contains(key)) {
      if (required) problems.push_back(std::string("missing field '") + key + "'");
      return;
    }
    const nlohmann::json& v = obj.at(key);
    if constexpr (std::is_floating_point_v<Out>) {
      if (!v.is_number()) {
        problems.push_back(std::string("field '") + key + "' must be a number");
        return;
      }
      out = v.get<double>();
    } else {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        problems.push_back(std::string("field '") + key + "' must be a non-negative integer");
        return;
      }
      out = static_cast<Out>(v.get<unsigned long long>());
    }
  };
  auto text = [&](const char* key, std::string& out) {
    if (!j.contains(key)) {
      problems.push_back(std::string("missing field '") + key + "'");
      return false;
    }
    if (!j.at(key).is_string()) {
      problems.push_back(std::string("field '") + key + "' must be a string");
      return false;
    }
    out = j.at(key).get<std::string>();
    return true;
  };

  number(j, "steps", cfg.steps, true);
  number(j, "lr", cfg.lr, true);
  number(j, "beta1", cfg.beta1, true);
  number(j, "beta2", cfg.beta2, true);
  number(j, "eps", cfg.eps, true);
  number(j, "weight_decay", cfg.weight_decay, true);
  number(j, "warmup_steps", cfg.warmup_steps, true);
  number(j, "seed", cfg.seed, true);
  number(j, "seq_len", cfg.seq_len, true);
  number(j, "batch", cfg.batch, true);
  number(j, "head_dim", cfg.head_dim, true);
  number(j, "eval_batch", cfg.eval_batch, true);
  number(j, "b_q", cfg.b_q, true);
  number(j, "b_k", cfg.b_k, true);

  std::string s;
  if (text("attn_mode", s)) {
    if (s == "bf16") {
      cfg.attn_mode = AttnMode::kBf16;
    } else if (s == "fp4-qat") {
      cfg.attn_mode = AttnMode::kFp4Qat;
    } else {
      problems.push_back("field 'attn_mode' must be 'bf16' or 'fp4-qat', got '" + s + "'");
    }
  }
  if (text("bwd_variant", s)) {
    const std::optional<BwdVariant> v = ParseBwdVariant(s);
    if (v) {
      cfg.bwd_variant = *v;
    } else {
      problems.push_back(
          "field 'bwd_variant' must be correct|lowpreco|nofqp|naive-bf16-bwd, got '" + s + "'");
    }
  }
  if (text("eval_mode", s)) {
    if (s == "bf16") {
      cfg.eval_mode = EvalMode::kBf16;
    } else if (s == "fp4") {
      cfg.eval_mode = EvalMode::kFp4;
    } else if (s == "fp4-fake") {
      cfg.eval_mode = EvalMode::kFp4Fake;
    } else {
      problems.push_back("field 'eval_mode' must be bf16|fp4|fp4-fake, got '" + s + "'");
    }
  }
  if (text("format", s)) {
    if (s == "nvfp4") {
      cfg.spec = BlockSpec::Nvfp4();
    } else if (s == "mxfp4") {
      cfg.spec = BlockSpec::Mxfp4();
    } else {
      problems.push_back("field 'format' must be nvfp4 or mxfp4, got '" + s + "'");
    }
  }
  if (j.contains("task")) {
    const nlohmann::json& t = j.at("task");
    if (!t.is_object()) {
      problems.push_back("field 'task' must be an object");
    } else {
      number(t, "key_dim", cfg.task.key_dim, false);
      number(t, "value_dim", cfg.task.value_dim, false);
      number(t, "key_bias", cfg.task.key_bias, false);
      number(t, "query_bias", cfg.task.query_bias, false);
    }
  }
  if (problems.empty()) {
    try {
      cfg.Validate();
    } catch (const InvalidValue& e) {
      throw InvalidValue(std::string("train config: ") + e.what());
    }
    return cfg;
  }
  std::ostringstream msg;
  msg << "train config has " << problems.size() << " error(s):";
  for (const std::string& p : problems) msg << "\n  " << p;
  throw InvalidValue(msg.str());
}

void TrainConfig::Validate() const {
  std::vector<std::string> problems;
  if (steps < 1) problems.push_back("steps must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) problems.push_back("lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) problems.push_back("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) problems.push_back("beta2 must be in [0, 1)");
  if (!(eps > 0.0)) problems.push_back("eps must be > 0");
  if (!(weight_decay >= 0.0)) problems.push_back("weight_decay must be >= 0");
  if (seq_len < 4) problems.push_back("seq_len must be >= 4");
  if (batch < 1) problems.push_back("batch must be >= 1");
  if (eval_batch < 1) problems.push_back("eval_batch must be >= 1");
  if (head_dim < 1) problems.push_back("head_dim must be >= 1");
  if (b_q == 0 || seq_len % b_q != 0) problems.push_back("b_q must divide seq_len");
  if (b_k == 0 || seq_len % b_k != 0) problems.push_back("b_k must divide seq_len");
  if (task.key_dim < 1 || task.value_dim < 1) {
    problems.push_back("task.key_dim and task.value_dim must be >= 1");
  }
  if (!std::isfinite(task.key_bias)) problems.push_back("task.key_bias must be finite");
  if (!std::isfinite(task.query_bias)) problems.push_back("task.query_bias must be finite");
  const bool fp4 = attn_mode == AttnMode::kFp4Qat || eval_mode != EvalMode::kBf16;
  if (fp4 && (head_dim % spec.block_size != 0 || b_k % spec.block_size != 0)) {
    problems.push_back("head_dim and b_k must be multiples of the block size " +
                       std::to_string(spec.block_size) + " when FP4 is used");
  }
  if (problems.empty()) return;
  std::ostringstream msg;
  for (std::size_t i = 0; i < problems.size(); ++i) msg << (i ? "; " : "") << problems[i];
  throw InvalidValue(msg.str());
}

TileConfig TrainConfig::Tiles(bool quantize) const {
  TileConfig t;
  t.b_q = b_q;
  t.b_k = b_k;
  t.spec = spec;
  t.quantize = quantize;
  return t;
}

void TrainLog::WriteCsv(std::ostream& out) const {
  out << "step,loss,grad_norm,ms\n";
  const auto prec = out.precision(17);
  for (const StepRecord& r : records) {
    out << r.step << ',' << r.loss << ',' << r.grad_norm << ',' << r.ms << '\n';
  }
  out.precision(prec);
}

double TrainLog::MaxGradNorm() const {
  double m = 0.0;
  for (const StepRecord& r : records) m = std::max(m, r.grad_norm);
  return m;
}

double TrainLog::GradNormVariance() const {
  const std::size_t n = records.size();
  if (n < 2) return 0.0;
  double mean = 0.0;
  for (const StepRecord& r : records) mean += r.grad_norm;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (const StepRecord& r : records) ss += (r.grad_norm - mean) * (r.grad_norm - mean);
  return ss / static_cast<double>(n - 1);
}

LossAndGrads ComputeLossAndGrads(const ToyModel& model, const Batch& batch,
                                 const TrainConfig& cfg) {
  const bool fp4 = cfg.attn_mode == AttnMode::kFp4Qat;
  const TileConfig tiles = cfg.Tiles(fp4);
  const BwdVariant variant = fp4 ? cfg.bwd_variant : BwdVariant::kCorrect;
  LossAndGrads out;
  out.grads = ToyModel::Zeros(model.w_q.rows(), model.w_q.cols(), model.w_o.cols());
  const double count = static_cast<double>(batch.y.size());
  double sq = 0.0;
  for (std::size_t e = 0; e < batch.xq.batch(); ++e) {
    const Tensor<double> xq = batch.xq.slice(e);
    const Tensor<double> xc = batch.xc.slice(e);
    const Tensor<double> y = batch.y.slice(e);
    const Tensor<double> q = Matmul(xq, model.w_q);
    const Tensor<double> k = Matmul(xc, model.w_k);
    const Tensor<double> v = Matmul(xc, model.w_v);
    const AttnOutputs<double> fwd = FlashForwardTraining(q, k, v, tiles);
    Tensor<double> dy = Matmul(fwd.O, model.w_o);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const double diff = dy.data()[i] - y.data()[i];
      sq += diff * diff;
      dy.data()[i] = 2.0 * diff / count;
    }
    AddInto(out.grads.w_o, Matmul(Transpose(fwd.O), dy));
    const Tensor<double> d_attn = MatmulNT(dy, model.w_o);
    const AttnGrads<double> g = FlashBackward(q, k, v, d_attn, fwd, tiles, variant);
    AddInto(out.grads.w_q, Matmul(Transpose(xq), g.dQ));
    AddInto(out.grads.w_k, Matmul(Transpose(xc), g.dK));
    AddInto(out.grads.w_v, Matmul(Transpose(xc), g.dV));
  }
  out.loss = sq / count;
  return out;
}

double Evaluate(const ToyModel& model, const Batch& batch, EvalMode mode,
                const TrainConfig& cfg) {
  const TileConfig tiles = cfg.Tiles(mode != EvalMode::kBf16);
  double sq = 0.0;
  for (std::size_t e = 0; e < batch.xq.batch(); ++e) {
    const Tensor<double> xq = batch.xq.slice(e);
    const Tensor<double> xc = batch.xc.slice(e);
    const Tensor<double> q = Matmul(xq, model.w_q);
    const Tensor<double> k = Matmul(xc, model.w_k);
    const Tensor<double> v = Matmul(xc, model.w_v);
    const Tensor<double> o = mode == EvalMode::kFp4Fake
                                 ? FlashForwardTraining(q, k, v, tiles).O
                                 : FlashForwardInference(q, k, v, tiles).O;
    const Tensor<double> pred = Matmul(o, model.w_o);
    const Tensor<double> y = batch.y.slice(e);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double diff = pred.data()[i] - y.data()[i];
      sq += diff * diff;
    }
  }
  return sq / static_cast<double>(batch.y.size());
}

Batch EvalBatch(const TrainConfig& cfg) {
  return MakeTask(cfg.seed ^ kEvalSalt, cfg.seq_len, cfg.eval_batch, cfg.task);
}

AdamW::AdamW(const ToyModel& shape, double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay),
      m_(ToyModel::Zeros(shape.w_q.rows(), shape.w_q.cols(), shape.w_o.cols())),
      v_(m_) {}

void AdamW::Step(ToyModel& model, const ToyModel& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto params = model.params();
  auto gs = grads.params();
  auto ms = m_.params();
  auto vs = v_.params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p]->data();
    auto g = gs[p]->data();
    auto m = ms[p]->data();
    auto v = vs[p]->data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      w[i] -= lr_ * (update + wd_ * w[i]);
    }
  }
}

ToyModel Train(const TrainConfig& cfg, TrainLog& log) {
  return Train(cfg, ToyModel::Init(cfg.task.d_model(), cfg.head_dim, cfg.task.value_dim, cfg.seed),
               log);
}

ToyModel Train(const TrainConfig& cfg, ToyModel model, TrainLog& log) {
  cfg.Validate();
  if (model.w_q.rows() != cfg.task.d_model() || model.w_q.cols() != cfg.head_dim ||
      model.w_o.cols() != cfg.task.value_dim) {
    throw ShapeError("Train: initial model does not match the config");
  }
  AdamW opt(model, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  log.records.clear();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    if (step <= cfg.warmup_steps) {
      opt.set_lr(cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
    } else {
      opt.set_lr(cfg.lr);
    }
    const Batch batch = MakeTask(StepSeed(cfg.seed, step), cfg.seq_len, cfg.batch, cfg.task);
    LossAndGrads lg;
    try {
      lg = ComputeLossAndGrads(model, batch, cfg);
    } catch (const InvalidValue& e) {
      // Quantizers reject non-finite activations.
      throw StabilityError(std::string("non-finite activations: ") + e.what(), step);
    }
    double norm_sq = 0.0;
    for (const Tensor<double>* g : lg.grads.params()) {
      for (double x : g->data()) norm_sq += x * x;
    }
    const double grad_norm = std::sqrt(norm_sq);
    if (!std::isfinite(lg.loss) || lg.loss > kDivergenceLoss) {
      throw StabilityError("training loss diverged: " + std::to_string(lg.loss), step);
    }
    if (!std::isfinite(grad_norm)) throw StabilityError("non-finite gradient", step);
    opt.Step(model, lg.grads);
    if (!model.AllFinite()) throw StabilityError("non-finite weights", step);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.records.push_back({step, lg.loss, grad_norm, ms});
  }
  return model;
}

AblationConfig AblationConfig::Defaults(std::uint64_t seed) {
  AblationConfig a;
  a.pretrain.seed = seed;
  a.pretrain.attn_mode = AttnMode::kBf16;
  a.pretrain.eval_mode = EvalMode::kBf16;
  a.pretrain.task.query_bias = 16.0;
  a.finetune = a.pretrain;
  a.finetune.attn_mode = AttnMode::kFp4Qat;
  a.finetune.eval_mode = EvalMode::kFp4;
  a.finetune.steps = 1500;
  a.finetune.lr = 3e-2;
  a.finetune.warmup_steps = 300;
  return a;
}

ToyModel Pretrain(const AblationConfig& cfg) {
  TrainLog log;
  return Train(cfg.pretrain, log);
}

AblationRun Finetune(const AblationConfig& cfg, const ToyModel& pretrained,
                     BwdVariant variant) {
  AblationRun run;
  run.variant = variant;
  TrainConfig ft = cfg.finetune;
  ft.bwd_variant = variant;
  try {
    Train(ft, pretrained, run.log);
  } catch (const StabilityError& e) {
    run.diverged = true;
    run.diverged_step = e.step();
    run.error = e.what();
  }
  if (!run.log.records.empty()) run.final_loss = run.log.records.back().loss;
  return run;
}

}  // namespace attnqat
