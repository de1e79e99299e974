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

#include "cli.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "attnqat/errors.h"
#include "attnqat/flash.h"
#include "attnqat/oracle.h"
#include "attnqat/qat.h"
#include "attnqat/quant_tensor.h"
#include "attnqat/rng.h"
#include "attnqat/tensor_io.h"
#include "checks.h"
#include "report.h"

namespace attnqat::cli {
namespace {

namespace fs = std::filesystem;

// Failures that are the caller's fault: bad flags, files or shapes.
class UsageError : public Error {
 public:
  using Error::Error;
};

const std::map<std::string, BlockSpec> kFormats = {{"nvfp4", BlockSpec::Nvfp4()},
                                                   {"mxfp4", BlockSpec::Mxfp4()}};

std::optional<std::uint64_t> ParseSeed(const char* text) {
  if (text == nullptr || *text == '\0') return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(text, &end, 10);
  if (errno != 0 || *end != '\0' || text[0] == '-') return std::nullopt;
  return v;
}

void WriteJson(const nlohmann::json& j, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(path);
  if (!f) throw UsageError("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
}

std::ofstream OpenOut(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw UsageError("cannot open '" + path.string() + "' for writing");
  return f;
}

void MakeDir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create directory '" + dir + "': " + ec.message());
}

int Finish(RunReport& report, const Stopwatch& sw, const std::string& path, std::ostream& out,
           std::ostream& err) {
  report.wall_ms = sw.ms();
  WriteJson(report.ToJson(), path, out);
  for (const CheckResult& c : report.checks) {
    if (!c.pass) {
      err << "FAIL " << c.name << ": " << c.metric << " " << ToString(c.cmp) << " "
          << c.threshold << " does not hold";
      if (!c.detail.empty()) err << " (" << c.detail << ")";
      err << '\n';
    }
  }
  return report.pass() ? kExitPass : kExitFail;
}

// quantize ------------------------------------------------------------------

struct QuantizeArgs {
  std::string in, out, fake_out, format = "nvfp4", axis = "row";
};

template <Real T>
nlohmann::json QuantizeAs(const Tensor<T>& x, const QuantizeArgs& a) {
  if (x.rank() > 2) {
    throw ShapeError("quantize: expected a matrix, got shape " + ShapeString(x.dims()));
  }
  const BlockSpec spec = kFormats.at(a.format);
  const BlockAxis axis = a.axis == "row" ? BlockAxis::kRow : BlockAxis::kColumn;
  const QuantTensor q = Quantize(x, spec, axis);
  const Tensor<T> fq = FakeQuantize(x, spec, axis);
  SaveQuantTensor(q, a.out);
  const std::string fake_out = a.fake_out.empty() ? a.out + ".fq.atnq" : a.fake_out;
  SaveTensor(fq, fake_out);
  double max_err = 0.0;
  double sum_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = std::abs(static_cast<double>(x.data()[i]) - static_cast<double>(fq.data()[i]));
    max_err = std::max(max_err, e);
    sum_err += e;
  }
  return {{"command", "quantize"},
          {"config",
           {{"in", a.in}, {"out", a.out}, {"fake_out", fake_out}, {"format", a.format},
            {"axis", a.axis}}},
          {"shape", x.dims()},
          {"max_abs_error", max_err},
          {"mean_abs_error", x.size() ? sum_err / static_cast<double>(x.size()) : 0.0}};
}

int RunQuantize(const QuantizeArgs& a, std::ostream& out) {
  const AnyTensor t = LoadTensor(a.in);
  const nlohmann::json j =
      std::visit([&](const auto& x) { return QuantizeAs(x, a); }, t);
  out << j.dump(2) << '\n';
  return kExitPass;
}

// check ---------------------------------------------------------------------

struct CheckArgs {
  std::string suite;
  std::size_t seeds = 3;
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> dims;
  bool causal = false;
  int accum = 64;
  std::string format = "nvfp4";
  bool smooth_k = false;
  bool two_level_p = false;
  std::string out;
};

int RunCheck(const CheckArgs& a, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  Stopwatch sw;
  CheckOptions o;
  o.seed = seed;
  o.seeds = a.seeds;
  if (!a.sizes.empty()) o.sizes = a.sizes;
  if (!a.dims.empty()) o.head_dims = a.dims;
  o.causal = a.causal;
  o.accum = a.accum == 32 ? Width::k32 : Width::k64;
  o.spec = kFormats.at(a.format);
  o.smooth_k = a.smooth_k;
  o.two_level_p = a.two_level_p;
  for (std::size_t d : o.head_dims) {
    if (d % o.spec.block_size != 0) {
      throw UsageError("--d " + std::to_string(d) + " is not a multiple of the block size");
    }
  }
  for (std::size_t n : o.sizes) {
    if (n % o.spec.block_size != 0) {
      throw UsageError("--size " + std::to_string(n) + " is not a multiple of the block size");
    }
  }
  RunReport report;
  report.command = "check " + a.suite;
  report.seed = seed;
  report.config = o.ToJson();
  RunSuite(a.suite, o, report);
  return Finish(report, sw, a.out, out, err);
}

// ablate --------------------------------------------------------------------

struct AblateArgs {
  std::string variant;
  std::optional<std::size_t> steps;
  std::string out_dir = ".";
  std::string out;
};

int RunAblate(const AblateArgs& a, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  Stopwatch sw;
  const BwdVariant variant = *ParseBwdVariant(a.variant);
  AblationConfig cfg = AblationConfig::Defaults(seed);
  if (a.steps) {
    cfg.finetune.steps = *a.steps;
    cfg.finetune.warmup_steps = std::min(cfg.finetune.warmup_steps, *a.steps);
  }
  MakeDir(a.out_dir);

  RunReport report;
  report.command = "ablate " + a.variant;
  report.seed = seed;
  report.config = {{"pretrain", cfg.pretrain.ToJson()}, {"finetune", cfg.finetune.ToJson()}};

  const ToyModel base = Pretrain(cfg);
  const AblationRun control = Finetune(cfg, base, BwdVariant::kCorrect);
  const AblationRun broken = Finetune(cfg, base, variant);
  for (const AblationRun* r : {&control, &broken}) {
    std::ofstream f = OpenOut(fs::path(a.out_dir) / (std::string(ToString(r->variant)) + ".csv"));
    r->log.WriteCsv(f);
  }

  report.AddVerdict("correct.completes", static_cast<double>(control.log.records.size()),
                    Cmp::kEq, static_cast<double>(cfg.finetune.steps), !control.diverged, 0,
                    control.diverged ? control.error : "");
  const double ratio = broken.log.MaxGradNorm() / control.log.MaxGradNorm();
  switch (variant) {
    case BwdVariant::kLowPrecO:
    case BwdVariant::kNaiveBf16:
      // Divergence is the strongest form of the blowup.
      report.AddVerdict(std::string(a.variant) + ".max_grad_norm_ratio", ratio, Cmp::kGe, 10.0,
                        broken.diverged || ratio >= 10.0, 0,
                        broken.diverged ? "diverged: " + broken.error : "");
      break;
    case BwdVariant::kNoFakeQuantP: {
      report.AddVerdict("nofqp.completes", static_cast<double>(broken.log.records.size()),
                        Cmp::kEq, static_cast<double>(cfg.finetune.steps), !broken.diverged, 0,
                        broken.error);
      const double vr = broken.log.GradNormVariance() / control.log.GradNormVariance();
      report.Add("nofqp.grad_norm_variance_ratio", vr, Cmp::kGt, 1.0);
      break;
    }
    case BwdVariant::kCorrect:
      break;
  }
  report.config["traces"] = {{"correct", {{"max_grad_norm", control.log.MaxGradNorm()},
                                          {"grad_norm_variance", control.log.GradNormVariance()},
                                          {"final_loss", control.final_loss}}},
                             {a.variant, {{"max_grad_norm", broken.log.MaxGradNorm()},
                                          {"grad_norm_variance", broken.log.GradNormVariance()},
                                          {"final_loss", broken.final_loss},
                                          {"diverged", broken.diverged}}}};
  return Finish(report, sw, a.out, out, err);
}

// bench ---------------------------------------------------------------------

struct BenchArgs {
  std::string n = "256..1024";
  std::size_t d = 64;
  std::size_t b_q = 64;
  std::size_t b_k = 64;
  unsigned threads = 1;
  std::size_t reps = 3;
  std::vector<std::string> variants = {"oracle", "inference", "training", "backward"};
  bool smooth_q = false;
  bool smooth_k = false;
  bool two_level_p = false;
  std::string out;
};

std::vector<std::size_t> ParseRange(const std::string& text) {
  const std::size_t dots = text.find("..");
  std::size_t from = 0;
  std::size_t to = 0;
  try {
    if (dots == std::string::npos) {
      from = to = std::stoull(text);
    } else {
      from = std::stoull(text.substr(0, dots));
      to = std::stoull(text.substr(dots + 2));
    }
  } catch (const std::exception&) {
    throw UsageError("--n expects N or FROM..TO, got '" + text + "'");
  }
  if (from == 0 || to < from) throw UsageError("--n range is empty: '" + text + "'");
  std::vector<std::size_t> out;
  for (std::size_t n = from; n <= to; n *= 2) out.push_back(n);
  return out;
}

int RunBench(const BenchArgs& a, std::uint64_t seed, std::ostream& out) {
  const std::vector<std::size_t> ns = ParseRange(a.n);
  std::ofstream file;
  std::ostream& csv = a.out.empty() ? out : (file = OpenOut(a.out), file);
  csv << "n,d,b_q,b_k,variant,threads,ms_mean,ms_stddev\n";
  for (std::size_t n : ns) {
    Rng rng(seed);
    const Tensor<float> Q = Randn<float>({n, a.d}, rng);
    const Tensor<float> K = Randn<float>({n, a.d}, rng);
    const Tensor<float> V = Randn<float>({n, a.d}, rng);
    const Tensor<float> dO = Randn<float>({n, a.d}, rng);
    TileConfig cfg;
    cfg.b_q = a.b_q;
    cfg.b_k = a.b_k;
    cfg.threads = a.threads;
    cfg.sage.smooth_q = a.smooth_q;
    cfg.sage.smooth_k = a.smooth_k;
    cfg.sage.two_level_p = a.two_level_p;
    TileConfig train_cfg = cfg;
    train_cfg.sage.smooth_q = false;
    const AttnOutputs<float> fwd = FlashForwardTraining(Q, K, V, train_cfg);
    for (const std::string& v : a.variants) {
      std::vector<double> ms;
      for (std::size_t r = 0; r < a.reps; ++r) {
        Stopwatch sw;
        if (v == "oracle") {
          OracleOptions oo;
          oo.two_level_p = a.two_level_p;
          oo.smooth_k = a.smooth_k;
          OracleForward(Q, K, V, oo);
        } else if (v == "inference") {
          FlashForwardInference(Q, K, V, cfg);
        } else if (v == "training") {
          FlashForwardTraining(Q, K, V, train_cfg);
        } else {
          FlashBackward(Q, K, V, dO, fwd, train_cfg);
        }
        ms.push_back(sw.ms());
      }
      double mean = 0.0;
      for (double x : ms) mean += x;
      mean /= static_cast<double>(ms.size());
      double ss = 0.0;
      for (double x : ms) ss += (x - mean) * (x - mean);
      const double sd = ms.size() > 1 ? std::sqrt(ss / static_cast<double>(ms.size() - 1)) : 0.0;
      const unsigned threads = v == "oracle" ? 1 : a.threads;
      csv << n << ',' << a.d << ',' << a.b_q << ',' << a.b_k << ',' << v << ',' << threads << ','
          << std::setprecision(6) << mean << ',' << sd << '\n';
    }
  }
  return kExitPass;
}

// train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out_dir = ".";
  bool default_config = false;
  std::string out;
};

int RunTrain(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  if (a.default_config) {
    out << TrainConfig{}.ToJson().dump(2) << '\n';
    return kExitPass;
  }
  if (a.config.empty()) throw UsageError("train: a config file is required");
  std::ifstream f(a.config);
  if (!f) throw UsageError("cannot open config '" + a.config + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  const TrainConfig cfg = TrainConfig::FromJson(j);
  MakeDir(a.out_dir);

  Stopwatch sw;
  RunReport report;
  report.command = "train";
  report.seed = cfg.seed;
  report.config = cfg.ToJson();
  TrainLog log;
  std::optional<ToyModel> model;
  std::string error;
  try {
    model = Train(cfg, log);
  } catch (const StabilityError& e) {
    error = e.what();
  }
  {
    std::ofstream csv = OpenOut(fs::path(a.out_dir) / "train_log.csv");
    log.WriteCsv(csv);
  }
  report.AddVerdict("train.steps_completed", static_cast<double>(log.records.size()), Cmp::kEq,
                    static_cast<double>(cfg.steps), model.has_value(), 0, error);
  if (model) {
    const std::map<std::string, const Tensor<double>*> weights = {
        {"w_q", &model->w_q}, {"w_k", &model->w_k}, {"w_v", &model->w_v}, {"w_o", &model->w_o}};
    for (const auto& [name, w] : weights) {
      SaveTensor(*w, (fs::path(a.out_dir) / (name + ".atnq")).string());
    }
    const Batch eval = EvalBatch(cfg);
    const double loss = Evaluate(*model, eval, cfg.eval_mode, cfg);
    report.config["eval_loss"] = loss;
    report.config["eval_baseline"] = TargetSecondMoment(eval);
    report.Add("train.eval_loss_finite", std::isfinite(loss) ? 1.0 : 0.0, Cmp::kEq, 1.0);
  }
  const int code = Finish(report, sw, a.out, out, err);
  std::ofstream rep = OpenOut(fs::path(a.out_dir) / "report.json");
  rep << report.ToJson().dump(2) << '\n';
  return code;
}

}  // namespace

int Run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::uint64_t seed = 0;
  if (const char* env = std::getenv("ATTNQAT_SEED")) {
    const std::optional<std::uint64_t> s = ParseSeed(env);
    if (!s) {
      err << "error: ATTNQAT_SEED must be a non-negative integer, got '" << env << "'\n";
      return kExitUsage;
    }
    seed = *s;
  }

  CLI::App app{"FP4 quantization-aware attention: codec, oracles, checks and toy training"};
  app.require_subcommand(1);
  app.add_option("--seed", seed, "base seed (default: $ATTNQAT_SEED or 0)");

  const std::vector<std::string> formats = {"nvfp4", "mxfp4"};

  QuantizeArgs qa;
  CLI::App* quantize = app.add_subcommand("quantize", "quantize an ATNQ tensor to ATQ4");
  quantize->add_option("in", qa.in, "input ATNQ file")->required();
  quantize->add_option("out", qa.out, "output ATQ4 file")->required();
  quantize->add_option("--fake-out", qa.fake_out, "fake-quantized ATNQ output (OUT.fq.atnq)");
  quantize->add_option("--format", qa.format)->check(CLI::IsMember(formats));
  quantize->add_option("--axis", qa.axis, "blocking axis")
      ->check(CLI::IsMember({"row", "column"}));

  CheckArgs ca;
  std::vector<std::string> suites = SuiteNames();
  suites.push_back("all");
  CLI::App* check = app.add_subcommand("check", "run an invariant suite");
  check->add_option("suite", ca.suite)->required()->check(CLI::IsMember(suites));
  check->add_option("--seeds", ca.seeds, "instances per grid point")->check(CLI::PositiveNumber);
  check->add_option("--size", ca.sizes, "sequence lengths (default 64 128 256 512)")
      ->check(CLI::PositiveNumber);
  check->add_option("--d", ca.dims, "head dims (default 64 128)")->check(CLI::PositiveNumber);
  check->add_flag("--causal", ca.causal);
  check->add_option("--accum", ca.accum, "accumulation width")->check(CLI::IsMember({32, 64}));
  check->add_option("--format", ca.format)->check(CLI::IsMember(formats));
  check->add_flag("--smooth-k", ca.smooth_k);
  check->add_flag("--two-level-p", ca.two_level_p);
  check->add_option("--out", ca.out, "write the JSON report here instead of stdout");

  AblateArgs aa;
  std::size_t ablate_steps = 0;
  CLI::App* ablate = app.add_subcommand("ablate", "broken backward variant vs the correct one");
  ablate->add_option("--variant", aa.variant)
      ->required()
      ->check(CLI::IsMember({"lowpreco", "nofqp", "naive-bf16-bwd"}));
  CLI::Option* steps_opt =
      ablate->add_option("--steps", ablate_steps, "finetuning steps")->check(CLI::PositiveNumber);
  ablate->add_option("--out-dir", aa.out_dir, "directory for the CSV traces");
  ablate->add_option("--out", aa.out, "write the JSON report here instead of stdout");

  BenchArgs ba;
  CLI::App* bench = app.add_subcommand("bench", "time oracle and tiled paths, CSV output");
  bench->add_option("--n", ba.n, "N or FROM..TO (doubling)");
  bench->add_option("--d", ba.d)->check(CLI::IsMember({64, 128}));
  bench->add_option("--b-q", ba.b_q)->check(CLI::PositiveNumber);
  bench->add_option("--b-k", ba.b_k)->check(CLI::PositiveNumber);
  bench->add_option("--threads", ba.threads)->check(CLI::PositiveNumber);
  bench->add_option("--reps", ba.reps)->check(CLI::PositiveNumber);
  bench->add_option("--variants", ba.variants)
      ->check(CLI::IsMember({"oracle", "inference", "training", "backward"}));
  bench->add_flag("--smooth-q", ba.smooth_q, "inference variant only");
  bench->add_flag("--smooth-k", ba.smooth_k);
  bench->add_flag("--two-level-p", ba.two_level_p);
  bench->add_option("--out", ba.out, "write the CSV here instead of stdout");

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "train the toy model from a JSON config");
  train->add_option("config", ta.config, "TrainConfig JSON");
  train->add_option("--out-dir", ta.out_dir, "directory for the log, weights and report");
  train->add_flag("--default-config", ta.default_config, "print the default config and exit");
  train->add_option("--out", ta.out, "write the JSON report here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitPass;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitPass;
    }
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  if (*steps_opt) aa.steps = ablate_steps;

  try {
    if (*quantize) return RunQuantize(qa, out);
    if (*check) return RunCheck(ca, seed, out, err);
    if (*ablate) return RunAblate(aa, seed, out, err);
    if (*bench) return RunBench(ba, seed, out);
    if (*train) return RunTrain(ta, out, err);
  } catch (const StabilityError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFail;
  } catch (const Error& e) {
    // Format, shape, tile, value and usage errors.
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace attnqat::cli
