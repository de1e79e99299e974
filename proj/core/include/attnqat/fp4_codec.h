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

// Scalar codecs for the microscaling FP4 formats:
//
//   E2M1  element code   s.ee.m     {0, 0.5, 1, 1.5, 2, 3, 4, 6} and negatives
//   E4M3  NVFP4 scale    s.eeee.mmm bias 7, max 448, 0x7F/0xFF are NaN
//   E8M0  MXFP4 scale    eeeeeeee   2^(code - 127), 0xFF is NaN
//
// All encoders round to nearest with ties to even mantissa and saturate to
// the largest finite magnitude. Negative zero encodes as +0 and every NaN
// encodes to the canonical positive NaN code.

#ifndef ATTNQAT_FP4_CODEC_H_
#define ATTNQAT_FP4_CODEC_H_

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "attnqat/tensor.h"

namespace attnqat {

struct Fp4Code {
  std::uint8_t bits = 0;  // low nibble only
  friend bool operator==(Fp4Code, Fp4Code) = default;
};

struct Fp8E4M3Code {
  std::uint8_t bits = 0;
  friend bool operator==(Fp8E4M3Code, Fp8E4M3Code) = default;
};

struct Fp8E8M0Code {
  std::uint8_t bits = 0;
  friend bool operator==(Fp8E8M0Code, Fp8E8M0Code) = default;
};

inline constexpr double kFp4Max = 6.0;
inline constexpr double kE4M3Max = 448.0;
inline constexpr std::uint8_t kE4M3MaxCode = 0x7E;
inline constexpr std::uint8_t kE4M3NaNCode = 0x7F;
inline constexpr std::uint8_t kE8M0NaNCode = 0xFF;

// The eight non-negative E2M1 magnitudes indexed by the low three bits.
inline constexpr std::array<double, 8> kFp4Magnitudes = {0.0, 0.5, 1.0, 1.5,
                                                         2.0, 3.0, 4.0, 6.0};

double Decode(Fp4Code c);
// Maps 0b1000 (negative zero) to 0b0000; every other code is canonical.
Fp4Code Canonical(Fp4Code c);
// Nearest E2M1 value, ties to even mantissa, |x| > 6 saturates.
// Throws InvalidValue for non-finite input.
Fp4Code RoundToFp4(double x);

// Returns NaN for the two NaN codes.
double Decode(Fp8E4M3Code c);
Fp8E4M3Code Canonical(Fp8E4M3Code c);
// Signed, total encoder: NaN -> 0x7F, |x| >= 448 (including infinity)
// saturates to +-448.
Fp8E4M3Code EncodeE4M3(double x);
// Scale encoder: requires x >= 0 and finite (InvalidValue otherwise).
Fp8E4M3Code RoundToE4M3(double x);

double Decode(Fp8E8M0Code c);
Fp8E8M0Code Canonical(Fp8E8M0Code c);
// Nearest power of two measured linearly, ties toward the larger exponent,
// clamped to [2^-127, 2^127]. NaN -> 0xFF. Requires x >= 0 otherwise.
Fp8E8M0Code EncodeE8M0(double x);

enum class ScaleFormat : std::uint8_t { kE4M3 = 0, kE8M0 = 1 };

struct BlockSpec {
  std::size_t block_size = 16;
  ScaleFormat scale_format = ScaleFormat::kE4M3;

  static constexpr BlockSpec Nvfp4() { return {16, ScaleFormat::kE4M3}; }
  static constexpr BlockSpec Mxfp4() { return {32, ScaleFormat::kE8M0}; }

  // Throws InvalidValue unless the pair is (16, E4M3) or (32, E8M0).
  void Validate() const;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

const char* ToString(ScaleFormat f);

// Decodes a scale byte in the given format. NaN codes throw InvalidValue.
double DecodeScale(std::uint8_t code, ScaleFormat format);

// Encodes the raw scale max|x|/6 of a block that is not all zero. E4M3
// results that would round to zero are lifted to the minimum subnormal.
std::uint8_t EncodeScale(double raw, ScaleFormat format);

// One microscaling block: block_size E2M1 codes packed two per byte (lower
// index in the low nibble) and a single scale byte.
struct Fp4Block {
  std::uint8_t scale = 0;
  std::vector<std::uint8_t> packed;

  Fp4Code code(std::size_t k) const {
    const std::uint8_t b = packed[k / 2];
    return Fp4Code{static_cast<std::uint8_t>((k % 2 == 0) ? (b & 0x0F) : (b >> 4))};
  }
  void set_code(std::size_t k, Fp4Code c) {
    std::uint8_t& b = packed[k / 2];
    if (k % 2 == 0) {
      b = static_cast<std::uint8_t>((b & 0xF0) | (c.bits & 0x0F));
    } else {
      b = static_cast<std::uint8_t>((b & 0x0F) | ((c.bits & 0x0F) << 4));
    }
  }
};

template <Real T>
Fp4Block QuantizeBlock(std::span<const T> x, BlockSpec spec);

// Kernels behind the block and tensor operators; no shape checks. The first
// writes block_size/2 packed bytes and returns the scale byte, the second
// writes the dequantized values (out may alias x).
template <Real T>
std::uint8_t QuantizeBlockInto(const T* x, BlockSpec spec, std::uint8_t* packed);
template <Real T>
void FakeQuantizeBlockInto(const T* x, BlockSpec spec, T* out);

// Element k is decoded_scale * decoded_code_k.
std::vector<double> DequantizeBlock(const Fp4Block& b, BlockSpec spec);

}  // namespace attnqat

#endif  // ATTNQAT_FP4_CODEC_H_
