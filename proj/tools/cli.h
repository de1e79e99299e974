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

// The attnqat command line:
//
//   attnqat quantize IN OUT [--fake-out PATH] [--format nvfp4|mxfp4] [--axis row|column]
//   attnqat check codec|forward|backward|identity|sage3|memory|all [--seeds N]
//           [--size N]... [--d D]... [--causal] [--accum 32|64] [--out PATH]
//   attnqat ablate --variant lowpreco|nofqp|naive-bf16-bwd [--steps N] [--out-dir DIR]
//   attnqat bench [--n FROM..TO] [--d 64] [--b-q 64] [--b-k 64] [--threads 1] [--reps 3]
//   attnqat train CONFIG.json [--out-dir DIR] | --default-config
//
// Exit codes: 0 pass, 1 check failure, 2 usage, format or shape error.
// ATTNQAT_SEED supplies the default of --seed.

#ifndef ATTNQAT_TOOLS_CLI_H_
#define ATTNQAT_TOOLS_CLI_H_

#include <iosfwd>

namespace attnqat::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitUsage = 2;

int Run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace attnqat::cli

#endif  // ATTNQAT_TOOLS_CLI_H_
