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

#include "report.h"

#include <cmath>

namespace attnqat::cli {
namespace {

nlohmann::json Number(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

}  // namespace

const char* ToString(Cmp c) {
  switch (c) {
    case Cmp::kLe:
      return "<=";
    case Cmp::kLt:
      return "<";
    case Cmp::kGe:
      return ">=";
    case Cmp::kGt:
      return ">";
    case Cmp::kEq:
      return "==";
  }
  return "?";
}

bool Holds(double metric, Cmp c, double threshold) {
  switch (c) {
    case Cmp::kLe:
      return metric <= threshold;
    case Cmp::kLt:
      return metric < threshold;
    case Cmp::kGe:
      return metric >= threshold;
    case Cmp::kGt:
      return metric > threshold;
    case Cmp::kEq:
      return metric == threshold;
  }
  return false;
}

bool RunReport::pass() const {
  if (checks.empty()) return false;
  for (const CheckResult& c : checks) {
    if (!c.pass) return false;
  }
  return true;
}

CheckResult& RunReport::Add(std::string name, double metric, Cmp cmp, double threshold,
                            double ms, std::string detail) {
  return AddVerdict(std::move(name), metric, cmp, threshold, Holds(metric, cmp, threshold), ms,
                    std::move(detail));
}

CheckResult& RunReport::AddVerdict(std::string name, double metric, Cmp cmp,
                                   double threshold, bool pass, double ms,
                                   std::string detail) {
  checks.push_back({std::move(name), metric, cmp, threshold, pass, ms, std::move(detail)});
  return checks.back();
}

nlohmann::json RunReport::ToJson() const {
  nlohmann::json list = nlohmann::json::array();
  for (const CheckResult& c : checks) {
    nlohmann::json j = {{"name", c.name},
                        {"metric", Number(c.metric)},
                        {"cmp", ToString(c.cmp)},
                        {"threshold", Number(c.threshold)},
                        {"pass", c.pass},
                        {"ms", c.ms}};
    if (!c.detail.empty()) j["detail"] = c.detail;
    list.push_back(std::move(j));
  }
  return {{"command", command}, {"config", config},   {"seed", seed},
          {"checks", list},     {"pass", pass()},     {"wall_ms", wall_ms}};
}

}  // namespace attnqat::cli
