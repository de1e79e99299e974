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

#include "attnqat/fp4_codec.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace attnqat {

namespace {

// Round half to even on an exactly representable double.
double RoundHalfEven(double v) { return std::nearbyint(v); }

}  // namespace

double Decode(Fp4Code c) {
  const double mag = kFp4Magnitudes[c.bits & 0x7];
  return (c.bits & 0x8) ? -mag : mag;
}

Fp4Code Canonical(Fp4Code c) {
  c.bits &= 0x0F;
  return c.bits == 0x8 ? Fp4Code{0} : c;
}

Fp4Code RoundToFp4(double x) {
  if (!std::isfinite(x)) throw InvalidValue("RoundToFp4: non-finite input");
  const double a = std::abs(x);
  // Midpoints between neighbouring magnitudes. At a midpoint the neighbour
  // with an even mantissa bit wins: 0, 1, 2, 4 have m = 0.
  std::uint8_t mag;
  if (a <= 0.25) {
    mag = 0;  // 0
  } else if (a < 0.75) {
    mag = 1;  // 0.5
  } else if (a <= 1.25) {
    mag = 2;  // 1
  } else if (a < 1.75) {
    mag = 3;  // 1.5
  } else if (a <= 2.5) {
    mag = 4;  // 2
  } else if (a < 3.5) {
    mag = 5;  // 3
  } else if (a <= 5.0) {
    mag = 6;  // 4
  } else {
    mag = 7;  // 6, saturating
  }
  if (mag == 0) return Fp4Code{0};
  return Fp4Code{static_cast<std::uint8_t>(std::signbit(x) ? (mag | 0x8) : mag)};
}

double Decode(Fp8E4M3Code c) {
  const int sign = (c.bits >> 7) & 1;
  const int exp = (c.bits >> 3) & 0xF;
  const int man = c.bits & 0x7;
  if (exp == 0xF && man == 0x7) return std::numeric_limits<double>::quiet_NaN();
  double mag;
  if (exp == 0) {
    mag = std::ldexp(static_cast<double>(man), -9);
  } else {
    mag = std::ldexp(1.0 + man / 8.0, exp - 7);
  }
  return sign ? -mag : mag;
}

Fp8E4M3Code Canonical(Fp8E4M3Code c) {
  if ((c.bits & 0x7F) == kE4M3NaNCode) return Fp8E4M3Code{kE4M3NaNCode};
  if (c.bits == 0x80) return Fp8E4M3Code{0};
  return c;
}

Fp8E4M3Code EncodeE4M3(double x) {
  if (std::isnan(x)) return Fp8E4M3Code{kE4M3NaNCode};
  const std::uint8_t sign = std::signbit(x) ? 0x80 : 0x00;
  const double a = std::abs(x);
  std::uint8_t mag;
  if (a >= kE4M3Max) {
    mag = kE4M3MaxCode;
  } else if (a < 0x1.0p-6) {
    // Subnormal range: spacing 2^-9; rounding up to 8 lands on 2^-6, which
    // is exactly the first normal code 0x08.
    mag = static_cast<std::uint8_t>(RoundHalfEven(std::ldexp(a, 9)));
  } else {
    int e2;
    std::frexp(a, &e2);  // a = f * 2^e2, f in [0.5, 1)
    int exp = e2 - 1;    // a in [2^exp, 2^(exp+1))
    double m = RoundHalfEven((std::ldexp(a, -exp) - 1.0) * 8.0);
    if (m == 8.0) {
      m = 0.0;
      ++exp;
    }
    const int field = exp + 7;
    if (field > 15 || (field == 15 && m == 7.0)) {
      mag = kE4M3MaxCode;
    } else {
      mag = static_cast<std::uint8_t>((field << 3) | static_cast<int>(m));
    }
  }
  if (mag == 0) return Fp8E4M3Code{0};
  return Fp8E4M3Code{static_cast<std::uint8_t>(sign | mag)};
}

Fp8E4M3Code RoundToE4M3(double x) {
  if (!std::isfinite(x) || x < 0.0) {
    throw InvalidValue("RoundToE4M3: scale must be non-negative and finite, got " +
                       std::to_string(x));
  }
  return EncodeE4M3(x);
}

double Decode(Fp8E8M0Code c) {
  if (c.bits == kE8M0NaNCode) return std::numeric_limits<double>::quiet_NaN();
  return std::ldexp(1.0, static_cast<int>(c.bits) - 127);
}

Fp8E8M0Code Canonical(Fp8E8M0Code c) { return c; }

Fp8E8M0Code EncodeE8M0(double x) {
  if (std::isnan(x)) return Fp8E8M0Code{kE8M0NaNCode};
  if (x < 0.0) throw InvalidValue("EncodeE8M0: negative input");
  if (x == 0.0) return Fp8E8M0Code{0};
  if (std::isinf(x)) return Fp8E8M0Code{254};
  int e2;
  const double f = std::frexp(x, &e2);  // x in [2^(e2-1), 2^e2)
  // Linear midpoint of [2^(e2-1), 2^e2) is 0.75 * 2^e2.
  const int exp = (f >= 0.75) ? e2 : e2 - 1;
  const int code = std::clamp(exp + 127, 0, 254);
  return Fp8E8M0Code{static_cast<std::uint8_t>(code)};
}

void BlockSpec::Validate() const {
  const bool ok = (block_size == 16 && scale_format == ScaleFormat::kE4M3) ||
                  (block_size == 32 && scale_format == ScaleFormat::kE8M0);
  if (!ok) {
    throw InvalidValue("unsupported block spec: block_size " +
                       std::to_string(block_size) + " with " +
                       ToString(scale_format) + " scales");
  }
}

const char* ToString(ScaleFormat f) {
  return f == ScaleFormat::kE4M3 ? "e4m3" : "e8m0";
}

double DecodeScale(std::uint8_t code, ScaleFormat format) {
  const double s = format == ScaleFormat::kE4M3 ? Decode(Fp8E4M3Code{code})
                                                : Decode(Fp8E8M0Code{code});
  if (std::isnan(s)) throw InvalidValue("NaN scale code");
  if (s < 0.0) throw InvalidValue("negative scale code");
  return s;
}

std::uint8_t EncodeScale(double raw, ScaleFormat format) {
  if (format == ScaleFormat::kE8M0) return EncodeE8M0(raw).bits;
  std::uint8_t code = RoundToE4M3(raw).bits;
  if (code == 0 && raw > 0.0) code = 0x01;
  return code;
}

namespace {

// Scale code for a nonzero block. amax / 6 can underflow to zero for
// denormal blocks; such blocks still get the smallest nonzero E4M3 scale.
std::uint8_t BlockScaleCode(double amax, ScaleFormat format) {
  std::uint8_t code = EncodeScale(amax / kFp4Max, format);
  if (format == ScaleFormat::kE4M3 && code == 0) code = 0x01;
  return code;
}

}  // namespace

template <Real T>
std::uint8_t QuantizeBlockInto(const T* x, BlockSpec spec, std::uint8_t* packed) {
  const std::size_t n = spec.block_size;
  double amax = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!std::isfinite(x[k])) throw InvalidValue("QuantizeBlock: non-finite input");
    amax = std::max(amax, std::abs(static_cast<double>(x[k])));
  }
  std::fill(packed, packed + n / 2, std::uint8_t{0});
  if (amax == 0.0) return 0;  // zero scale, zero codes
  const std::uint8_t scale = BlockScaleCode(amax, spec.scale_format);
  const double s = DecodeScale(scale, spec.scale_format);
  for (std::size_t k = 0; k < n; k += 2) {
    // Double division of a float or double by a short-mantissa scale rounds
    // the exact quotient correctly relative to every FP4 midpoint.
    const std::uint8_t lo = RoundToFp4(static_cast<double>(x[k]) / s).bits;
    const std::uint8_t hi = RoundToFp4(static_cast<double>(x[k + 1]) / s).bits;
    packed[k / 2] = static_cast<std::uint8_t>(lo | (hi << 4));
  }
  return scale;
}

template <Real T>
void FakeQuantizeBlockInto(const T* x, BlockSpec spec, T* out) {
  const std::size_t n = spec.block_size;
  double amax = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!std::isfinite(x[k])) throw InvalidValue("FakeQuantize: non-finite input");
    amax = std::max(amax, std::abs(static_cast<double>(x[k])));
  }
  if (amax == 0.0) {
    std::fill(out, out + n, T{0});
    return;
  }
  const double s = DecodeScale(BlockScaleCode(amax, spec.scale_format), spec.scale_format);
  for (std::size_t k = 0; k < n; ++k) {
    out[k] = static_cast<T>(s * Decode(RoundToFp4(static_cast<double>(x[k]) / s)));
  }
}

template <Real T>
Fp4Block QuantizeBlock(std::span<const T> x, BlockSpec spec) {
  spec.Validate();
  if (x.size() != spec.block_size) {
    throw ShapeError("QuantizeBlock: expected " + std::to_string(spec.block_size) +
                     " elements, got " + std::to_string(x.size()));
  }
  Fp4Block b;
  b.packed.assign(spec.block_size / 2, 0);
  b.scale = QuantizeBlockInto(x.data(), spec, b.packed.data());
  return b;
}

std::vector<double> DequantizeBlock(const Fp4Block& b, BlockSpec spec) {
  const double s = DecodeScale(b.scale, spec.scale_format);
  std::vector<double> out(spec.block_size);
  for (std::size_t k = 0; k < spec.block_size; ++k) out[k] = s * Decode(b.code(k));
  return out;
}

template Fp4Block QuantizeBlock(std::span<const float>, BlockSpec);
template Fp4Block QuantizeBlock(std::span<const double>, BlockSpec);
template std::uint8_t QuantizeBlockInto(const float*, BlockSpec, std::uint8_t*);
template std::uint8_t QuantizeBlockInto(const double*, BlockSpec, std::uint8_t*);
template void FakeQuantizeBlockInto(const float*, BlockSpec, float*);
template void FakeQuantizeBlockInto(const double*, BlockSpec, double*);

}  // namespace attnqat
