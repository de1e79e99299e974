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

#ifndef ATTNQAT_RNG_H_
#define ATTNQAT_RNG_H_

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "attnqat/tensor.h"

namespace attnqat {

// mt19937_64 with hand-rolled uniform and normal transforms. The standard
// distributions are implementation-defined, so they are not used: the raw
// 64-bit stream is fixed by the standard and everything downstream of it is
// defined here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t NextU64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double Uniform();

  // Standard normal via the Marsaglia polar method.
  double Normal();

  // Uniform integer in [0, n).
  std::uint64_t Below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

// i.i.d. N(0, scale^2) entries. Throws InvalidValue when scale <= 0.
template <Real T>
Tensor<T> Randn(const std::vector<std::size_t>& dims, Rng& rng, double scale = 1.0);

}  // namespace attnqat

#endif  // ATTNQAT_RNG_H_
