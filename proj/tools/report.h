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

#ifndef ATTNQAT_TOOLS_REPORT_H_
#define ATTNQAT_TOOLS_REPORT_H_

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace attnqat::cli {

// How a metric is compared with its threshold.
enum class Cmp { kLe, kLt, kGe, kGt, kEq };

const char* ToString(Cmp c);
bool Holds(double metric, Cmp c, double threshold);

struct CheckResult {
  std::string name;
  double metric = 0.0;
  Cmp cmp = Cmp::kLe;
  double threshold = 0.0;
  bool pass = false;
  double ms = 0.0;
  std::string detail;
};

struct RunReport {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<CheckResult> checks;
  double wall_ms = 0.0;

  // Conjunction of every check; a report without checks fails.
  bool pass() const;

  // Records a check whose pass flag is Holds(metric, cmp, threshold).
  CheckResult& Add(std::string name, double metric, Cmp cmp, double threshold,
                   double ms = 0.0, std::string detail = {});
  // Records a check with an explicit verdict.
  CheckResult& AddVerdict(std::string name, double metric, Cmp cmp, double threshold,
                          bool pass, double ms = 0.0, std::string detail = {});

  nlohmann::json ToJson() const;
};

class Stopwatch {
 public:
  Stopwatch() : t0_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point t0_;
};

}  // namespace attnqat::cli

#endif  // ATTNQAT_TOOLS_REPORT_H_
