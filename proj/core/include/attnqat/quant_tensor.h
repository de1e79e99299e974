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

#ifndef ATTNQAT_QUANT_TENSOR_H_
#define ATTNQAT_QUANT_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <span>

#include "attnqat/fp4_codec.h"
#include "attnqat/memory.h"
#include "attnqat/tensor.h"

namespace attnqat {

// A rows x cols matrix of E2M1 codes, blocked along each row. Scales live in
// a separate row-major grid (rows x cols/block_size); codes are packed two
// per byte in row-major element order, lower index in the low nibble.
class QuantTensor {
 public:
  QuantTensor() = default;
  QuantTensor(std::size_t rows, std::size_t cols, BlockSpec spec);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const BlockSpec& spec() const { return spec_; }
  std::size_t blocks_per_row() const { return cols_ / spec_.block_size; }

  std::uint8_t scale_code(std::size_t r, std::size_t b) const {
    return scales_[r * blocks_per_row() + b];
  }
  double scale(std::size_t r, std::size_t b) const {
    return DecodeScale(scale_code(r, b), spec_.scale_format);
  }
  Fp4Code code(std::size_t r, std::size_t c) const {
    const std::uint8_t byte = packed_[(r * cols_ + c) / 2];
    return Fp4Code{static_cast<std::uint8_t>(c % 2 == 0 ? (byte & 0x0F) : (byte >> 4))};
  }

  Fp4Block block(std::size_t r, std::size_t b) const;
  void set_block(std::size_t r, std::size_t b, const Fp4Block& blk);

  std::span<const std::uint8_t> scale_bytes() const { return scales_; }
  std::span<std::uint8_t> scale_bytes() { return scales_; }
  std::span<const std::uint8_t> packed_bytes() const { return packed_; }
  std::span<std::uint8_t> packed_bytes() { return packed_; }

  bool operator==(const QuantTensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && spec_ == o.spec_ &&
           scales_ == o.scales_ && packed_ == o.packed_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  BlockSpec spec_{};
  TrackedVector<std::uint8_t> scales_;
  TrackedVector<std::uint8_t> packed_;
};

// Which axis the 1 x block_size blocks run along. kRow blocks each row's
// columns (the layout of a left operand); kColumn blocks each column's rows,
// i.e. quantizes the transpose, which is how a right operand contracted over
// its rows must be laid out.
enum class BlockAxis { kRow, kColumn };

// Throws ShapeError when the blocked extent is not a multiple of the block
// size, InvalidValue for non-finite entries or an unsupported spec.
template <Real T>
QuantTensor Quantize(const Tensor<T>& x, BlockSpec spec,
                     BlockAxis axis = BlockAxis::kRow);

template <Real T>
Tensor<T> Dequantize(const QuantTensor& q);

// Dequantize(Quantize(x)) with the result in x's layout.
template <Real T>
Tensor<T> FakeQuantize(const Tensor<T>& x, BlockSpec spec,
                       BlockAxis axis = BlockAxis::kRow);

// A contiguous run of rows and blocks inside a QuantTensor.
struct QuantView {
  const QuantTensor* tensor = nullptr;
  std::size_t row0 = 0;
  std::size_t rows = 0;
  std::size_t block0 = 0;
  std::size_t blocks = 0;

  static QuantView All(const QuantTensor& t) {
    return {&t, 0, t.rows(), 0, t.blocks_per_row()};
  }
};

// c(i, j) += sum over blocks b of s_a(i,b) * s_b(j,b) * <codes_a(i,b), codes_b(j,b)>.
// Block partial dot products are computed exactly on integer codes, scaled,
// and added to each entry's running sum in ascending block order, which is
// bit-identical to MatmulNT(Dequantize(a), Dequantize(b), block_size)
// continuing the same accumulator.
template <Real T>
void Fp4mmAccumulate(const QuantView& a, const QuantView& b_t, Tensor<T>& c);

// C = FP4MM(a, b_t): the emulated hardware FP4 product a * b_t^T with both
// operands blocked along the contraction axis. Throws ShapeError when the
// specs or contraction lengths differ.
template <Real T>
Tensor<T> Fp4mm(const QuantTensor& a, const QuantTensor& b_t);

// C = fq(a) * fq(b_t)^T, summed in FP4MM's block order.
template <Real T>
Tensor<T> FakeQuantMatmul(const Tensor<T>& a, const Tensor<T>& b_t, BlockSpec spec);

template <Real T>
struct FakeQuantMatmulGrads {
  Tensor<T> dA;    // dC * fq(b_t)
  Tensor<T> dB_t;  // dC^T * fq(a)
};

// Straight-through backward of FakeQuantMatmul.
template <Real T>
FakeQuantMatmulGrads<T> FakeQuantMatmulBackward(const Tensor<T>& a, const Tensor<T>& b_t,
                                                const Tensor<T>& dC, BlockSpec spec);

}  // namespace attnqat

#endif  // ATTNQAT_QUANT_TENSOR_H_
