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

// On-disk tensor formats, all little-endian:
//
//   ATNQ (dense)      "ATNQ" u32 version=1, u8 width (0=f32, 1=f64),
//                     u8 ndim (1..3), u32 dims[ndim], raw elements
//   ATQ4 (quantized)  "ATQ4" u32 version=1, u8 scale format (0=E4M3, 1=E8M0),
//                     u16 block_size, u32 rows, u32 cols,
//                     scale grid bytes (rows x cols/block_size, row-major),
//                     packed nibbles (rows*cols/2 bytes, low nibble first)

#ifndef ATTNQAT_TENSOR_IO_H_
#define ATTNQAT_TENSOR_IO_H_

#include <iosfwd>
#include <string>
#include <variant>

#include "attnqat/quant_tensor.h"
#include "attnqat/tensor.h"

namespace attnqat {

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <Real T>
void WriteTensor(std::ostream& out, const Tensor<T>& t);
AnyTensor ReadTensor(std::istream& in);

template <Real T>
void SaveTensor(const Tensor<T>& t, const std::string& path);
AnyTensor LoadTensor(const std::string& path);

// Loads and converts to the requested element width.
template <Real T>
Tensor<T> LoadTensorAs(const std::string& path);

void WriteQuantTensor(std::ostream& out, const QuantTensor& q);
QuantTensor ReadQuantTensor(std::istream& in);

void SaveQuantTensor(const QuantTensor& q, const std::string& path);
QuantTensor LoadQuantTensor(const std::string& path);

}  // namespace attnqat

#endif  // ATTNQAT_TENSOR_IO_H_
