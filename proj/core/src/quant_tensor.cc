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

#include "attnqat/quant_tensor.h"

#include <array>
#include <string>
#include <vector>

namespace attnqat {

namespace {

// Twice the E2M1 value of each code, so products of two codes are integers
// in units of 1/4.
constexpr std::array<int, 16> kTwiceFp4 = {0,  1,  2,  3,  4,  6,  8,  12,
                                           0, -1, -2, -3, -4, -6, -8, -12};

void CheckBlocked(std::size_t extent, BlockSpec spec, const char* what) {
  spec.Validate();
  if (extent % spec.block_size != 0) {
    throw ShapeError(std::string(what) + ": blocked extent " +
                     std::to_string(extent) + " is not a multiple of block size " +
                     std::to_string(spec.block_size));
  }
}

}  // namespace

QuantTensor::QuantTensor(std::size_t rows, std::size_t cols, BlockSpec spec)
    : rows_(rows), cols_(cols), spec_(spec) {
  CheckBlocked(cols, spec, "QuantTensor");
  scales_.assign(rows * (cols / spec.block_size), 0);
  packed_.assign(rows * cols / 2, 0);
}

Fp4Block QuantTensor::block(std::size_t r, std::size_t b) const {
  Fp4Block blk;
  blk.scale = scale_code(r, b);
  const std::size_t off = (r * cols_ + b * spec_.block_size) / 2;
  blk.packed.assign(packed_.begin() + static_cast<std::ptrdiff_t>(off),
                    packed_.begin() + static_cast<std::ptrdiff_t>(off + spec_.block_size / 2));
  return blk;
}

void QuantTensor::set_block(std::size_t r, std::size_t b, const Fp4Block& blk) {
  if (blk.packed.size() != spec_.block_size / 2) {
    throw ShapeError("set_block: packed length mismatch");
  }
  scales_[r * blocks_per_row() + b] = blk.scale;
  const std::size_t off = (r * cols_ + b * spec_.block_size) / 2;
  std::copy(blk.packed.begin(), blk.packed.end(),
            packed_.begin() + static_cast<std::ptrdiff_t>(off));
}

template <Real T>
QuantTensor Quantize(const Tensor<T>& x, BlockSpec spec, BlockAxis axis) {
  RequireMatrix(x, "Quantize");
  if (axis == BlockAxis::kColumn) return Quantize(Transpose(x), spec, BlockAxis::kRow);
  CheckBlocked(x.cols(), spec, "Quantize");
  QuantTensor q(x.rows(), x.cols(), spec);
  const std::size_t nb = q.blocks_per_row();
  auto scales = q.scale_bytes();
  auto packed = q.packed_bytes();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* row = x.row(r).data();
    for (std::size_t b = 0; b < nb; ++b) {
      scales[r * nb + b] = QuantizeBlockInto(
          row + b * spec.block_size, spec,
          packed.data() + (r * x.cols() + b * spec.block_size) / 2);
    }
  }
  return q;
}

template <Real T>
Tensor<T> Dequantize(const QuantTensor& q) {
  Tensor<T> out(q.rows(), q.cols());
  const std::size_t bs = q.spec().block_size;
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t b = 0; b < q.blocks_per_row(); ++b) {
      const double s = q.scale(r, b);
      for (std::size_t k = 0; k < bs; ++k) {
        const std::size_t c = b * bs + k;
        out(r, c) = static_cast<T>(s * Decode(q.code(r, c)));
      }
    }
  }
  return out;
}

template <Real T>
Tensor<T> FakeQuantize(const Tensor<T>& x, BlockSpec spec, BlockAxis axis) {
  RequireMatrix(x, "FakeQuantize");
  if (axis == BlockAxis::kColumn) {
    return Transpose(FakeQuantize(Transpose(x), spec, BlockAxis::kRow));
  }
  CheckBlocked(x.cols(), spec, "FakeQuantize");
  Tensor<T> out(x.dims());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); c += spec.block_size) {
      FakeQuantizeBlockInto(x.row(r).data() + c, spec, out.row(r).data() + c);
    }
  }
  return out;
}

template <Real T>
void Fp4mmAccumulate(const QuantView& a, const QuantView& b_t, Tensor<T>& c) {
  const QuantTensor& qa = *a.tensor;
  const QuantTensor& qb = *b_t.tensor;
  if (!(qa.spec() == qb.spec())) throw ShapeError("Fp4mm: block spec mismatch");
  if (a.blocks != b_t.blocks) throw ShapeError("Fp4mm: contraction length mismatch");
  if (c.rows() != a.rows || c.cols() != b_t.rows) {
    throw ShapeError("Fp4mm: accumulator shape mismatch");
  }
  if (a.row0 + a.rows > qa.rows() || a.block0 + a.blocks > qa.blocks_per_row() ||
      b_t.row0 + b_t.rows > qb.rows() ||
      b_t.block0 + b_t.blocks > qb.blocks_per_row()) {
    throw ShapeError("Fp4mm: view out of range");
  }
  const BlockSpec spec = qa.spec();
  const std::size_t bs = spec.block_size;
  const std::size_t half = bs / 2;
  auto pa = qa.packed_bytes();
  auto pb = qb.packed_bytes();
  std::vector<double> sb(b_t.rows * b_t.blocks);
  for (std::size_t j = 0; j < b_t.rows; ++j) {
    for (std::size_t blk = 0; blk < b_t.blocks; ++blk) {
      sb[j * b_t.blocks + blk] = qb.scale(b_t.row0 + j, b_t.block0 + blk);
    }
  }
  std::vector<double> sa(a.blocks);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const std::size_t ra = a.row0 + i;
    for (std::size_t blk = 0; blk < a.blocks; ++blk) sa[blk] = qa.scale(ra, a.block0 + blk);
    for (std::size_t j = 0; j < b_t.rows; ++j) {
      const std::size_t rb = b_t.row0 + j;
      T acc = c(i, j);
      for (std::size_t blk = 0; blk < a.blocks; ++blk) {
        const std::uint8_t* ca = pa.data() + (ra * qa.cols() + (a.block0 + blk) * bs) / 2;
        const std::uint8_t* cb = pb.data() + (rb * qb.cols() + (b_t.block0 + blk) * bs) / 2;
        int dot = 0;  // exact: |dot| <= 32 * 144
        for (std::size_t k = 0; k < half; ++k) {
          dot += kTwiceFp4[ca[k] & 0x0F] * kTwiceFp4[cb[k] & 0x0F];
          dot += kTwiceFp4[ca[k] >> 4] * kTwiceFp4[cb[k] >> 4];
        }
        const double s = sa[blk] * sb[j * b_t.blocks + blk];
        // Both factors are exact in T, and so is their product: the scale
        // product has at most 8 significant bits and dot/4 at most 13.
        acc += static_cast<T>(s) * (static_cast<T>(dot) * T{0.25});
      }
      c(i, j) = acc;
    }
  }
}

template <Real T>
Tensor<T> Fp4mm(const QuantTensor& a, const QuantTensor& b_t) {
  if (!(a.spec() == b_t.spec())) throw ShapeError("Fp4mm: block spec mismatch");
  if (a.cols() != b_t.cols()) {
    throw ShapeError("Fp4mm: contraction mismatch " + std::to_string(a.cols()) +
                     " vs " + std::to_string(b_t.cols()));
  }
  Tensor<T> c(a.rows(), b_t.rows());
  Fp4mmAccumulate(QuantView::All(a), QuantView::All(b_t), c);
  return c;
}

template <Real T>
Tensor<T> FakeQuantMatmul(const Tensor<T>& a, const Tensor<T>& b_t, BlockSpec spec) {
  return MatmulNT(FakeQuantize(a, spec), FakeQuantize(b_t, spec), spec.block_size);
}

template <Real T>
FakeQuantMatmulGrads<T> FakeQuantMatmulBackward(const Tensor<T>& a, const Tensor<T>& b_t,
                                                const Tensor<T>& dC, BlockSpec spec) {
  if (dC.rows() != a.rows() || dC.cols() != b_t.rows()) {
    throw ShapeError("FakeQuantMatmulBackward: dC is " + ShapeString(dC.dims()));
  }
  // The rounding step is treated as the identity.
  return {Matmul(dC, FakeQuantize(b_t, spec)), Matmul(Transpose(dC), FakeQuantize(a, spec))};
}

#define ATTNQAT_INSTANTIATE(T)                                                 \
  template Tensor<T> FakeQuantMatmul(const Tensor<T>&, const Tensor<T>&, BlockSpec); \
  template FakeQuantMatmulGrads<T> FakeQuantMatmulBackward(                    \
      const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BlockSpec);        \
  template QuantTensor Quantize(const Tensor<T>&, BlockSpec, BlockAxis);       \
  template Tensor<T> Dequantize(const QuantTensor&);                           \
  template Tensor<T> FakeQuantize(const Tensor<T>&, BlockSpec, BlockAxis);     \
  template void Fp4mmAccumulate(const QuantView&, const QuantView&, Tensor<T>&); \
  template Tensor<T> Fp4mm(const QuantTensor&, const QuantTensor&);

ATTNQAT_INSTANTIATE(float)
ATTNQAT_INSTANTIATE(double)

#undef ATTNQAT_INSTANTIATE

}  // namespace attnqat
