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

// Invariant suites behind `attnqat check`. Each suite appends its checks to a
// RunReport; thresholds depend on the accumulation width.

#ifndef ATTNQAT_TOOLS_CHECKS_H_
#define ATTNQAT_TOOLS_CHECKS_H_

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnqat/fp4_codec.h"
#include "attnqat/tensor.h"
#include "report.h"

namespace attnqat::cli {

struct CheckOptions {
  std::uint64_t seed = 0;
  std::size_t seeds = 3;
  std::vector<std::size_t> sizes = {64, 128, 256, 512};
  std::vector<std::size_t> head_dims = {64, 128};
  bool causal = false;
  Width accum = Width::k64;
  BlockSpec spec = BlockSpec::Nvfp4();
  bool smooth_k = false;
  bool two_level_p = false;

  nlohmann::json ToJson() const;
};

void CheckCodec(const CheckOptions& opts, RunReport& report);
void CheckForward(const CheckOptions& opts, RunReport& report);
void CheckBackward(const CheckOptions& opts, RunReport& report);
void CheckIdentity(const CheckOptions& opts, RunReport& report);
void CheckSage3(const CheckOptions& opts, RunReport& report);
void CheckMemory(const CheckOptions& opts, RunReport& report);

// "codec", "forward", "backward", "identity", "sage3", "memory".
const std::vector<std::string>& SuiteNames();
// Runs one named suite, or every suite for "all". Returns false for an
// unknown name.
bool RunSuite(const std::string& name, const CheckOptions& opts, RunReport& report);

}  // namespace attnqat::cli

#endif  // ATTNQAT_TOOLS_CHECKS_H_
