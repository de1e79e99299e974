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

#ifndef ATTNQAT_TENSOR_H_
#define ATTNQAT_TENSOR_H_

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "attnqat/errors.h"
#include "attnqat/memory.h"

namespace attnqat {

// Element width of a dense tensor. Accumulation always happens at the
// element width, so this doubles as the accumulation width.
enum class Width : std::uint8_t { k32 = 0, k64 = 1 };

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

template <Real T>
constexpr Width WidthOf() {
  return sizeof(T) == 4 ? Width::k32 : Width::k64;
}

// Row-major dense tensor of rank 1..3. Rank-3 tensors are a batch of
// matrices (batch x rows x cols); rank-1 tensors behave as a single row.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, T fill = T{0})
      : dims_(std::move(dims)) {
    if (dims_.empty() || dims_.size() > 3) {
      throw ShapeError("tensor rank must be 1..3, got " +
                       std::to_string(dims_.size()));
    }
    std::size_t n = 1;
    for (std::size_t d : dims_) n *= d;
    elems_.assign(n, fill);
  }

  Tensor(std::size_t rows, std::size_t cols, T fill = T{0})
      : Tensor(std::vector<std::size_t>{rows, cols}, fill) {}

  // Builds a rows x cols matrix from row-major values.
  static Tensor FromRows(std::size_t rows, std::size_t cols,
                         std::initializer_list<T> values) {
    if (values.size() != rows * cols) {
      throw ShapeError("FromRows: expected " + std::to_string(rows * cols) +
                       " values, got " + std::to_string(values.size()));
    }
    Tensor t(rows, cols);
    std::copy(values.begin(), values.end(), t.elems_.begin());
    return t;
  }

  static constexpr Width width() { return WidthOf<T>(); }

  std::size_t rank() const { return dims_.size(); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t size() const { return elems_.size(); }
  bool empty() const { return elems_.empty(); }

  std::size_t batch() const { return dims_.size() == 3 ? dims_[0] : 1; }
  std::size_t rows() const {
    return dims_.size() >= 2 ? dims_[dims_.size() - 2] : (dims_.empty() ? 0 : 1);
  }
  std::size_t cols() const { return dims_.empty() ? 0 : dims_.back(); }

  T& operator()(std::size_t r, std::size_t c) { return elems_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return elems_[r * cols() + c];
  }
  T& at(std::size_t b, std::size_t r, std::size_t c) {
    return elems_[(b * rows() + r) * cols() + c];
  }
  const T& at(std::size_t b, std::size_t r, std::size_t c) const {
    return elems_[(b * rows() + r) * cols() + c];
  }

  std::span<T> data() { return elems_; }
  std::span<const T> data() const { return elems_; }

  std::span<T> row(std::size_t r) { return {elems_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {elems_.data() + r * cols(), cols()};
  }

  void fill(T v) { std::fill(elems_.begin(), elems_.end(), v); }

  // Copies matrix `b` out of a rank-3 batch (or returns the matrix itself).
  Tensor slice(std::size_t b) const {
    if (rank() != 3) {
      if (b != 0) throw ShapeError("slice index out of range");
      return *this;
    }
    if (b >= batch()) throw ShapeError("slice index out of range");
    Tensor out(rows(), cols());
    const std::size_t n = rows() * cols();
    std::copy_n(elems_.begin() + static_cast<std::ptrdiff_t>(b * n), n,
                out.elems_.begin());
    return out;
  }

  void set_slice(std::size_t b, const Tensor& m) {
    if (m.rows() != rows() || m.cols() != cols() || b >= batch()) {
      throw ShapeError("set_slice: shape mismatch");
    }
    std::copy(m.elems_.begin(), m.elems_.end(),
              elems_.begin() + static_cast<std::ptrdiff_t>(b * rows() * cols()));
  }

  // Copies rows [r0, r0 + n) into a new matrix.
  Tensor rows_range(std::size_t r0, std::size_t n) const {
    Tensor out(n, cols());
    std::copy_n(elems_.begin() + static_cast<std::ptrdiff_t>(r0 * cols()),
                n * cols(), out.elems_.begin());
    return out;
  }

  bool operator==(const Tensor& o) const {
    return dims_ == o.dims_ && std::equal(elems_.begin(), elems_.end(),
                                          o.elems_.begin(), o.elems_.end());
  }

 private:
  std::vector<std::size_t> dims_;
  TrackedVector<T> elems_;
};

std::string ShapeString(const std::vector<std::size_t>& dims);

// Requires `t` to be a matrix (rank 2, or rank 1 as a single row).
template <Real T>
void RequireMatrix(const Tensor<T>& t, const char* what) {
  if (t.rank() > 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got shape " +
                     ShapeString(t.dims()));
  }
}

template <Real T>
Tensor<T> Transpose(const Tensor<T>& a);

// c = a * b with a fixed summation order over the contraction index: the
// index range is split into consecutive groups of `group` terms, each group
// is summed left to right from zero, and the group sums are added to the
// accumulator left to right. group == 1 is the plain left-to-right sum; the
// FP4 block size reproduces fp4mm's block-major order.
template <Real T>
Tensor<T> Matmul(const Tensor<T>& a, const Tensor<T>& b, std::size_t group = 1);

// c = a * b_t^T, both operands laid out along the contraction axis.
template <Real T>
Tensor<T> MatmulNT(const Tensor<T>& a, const Tensor<T>& b_t,
                   std::size_t group = 1);

// c += a * b_t^T in the same order as MatmulNT, continuing each entry's
// running sum. Row/column ranges select sub-blocks of the operands.
template <Real T>
void MatmulNTAccumulate(const Tensor<T>& a, std::size_t a_row0,
                        std::size_t a_rows, std::size_t a_col0,
                        const Tensor<T>& b_t, std::size_t b_row0,
                        std::size_t b_rows, std::size_t b_col0,
                        std::size_t depth, std::size_t group, Tensor<T>& c);

template <Real T>
Tensor<T> Add(const Tensor<T>& a, const Tensor<T>& b);

template <Real T>
Tensor<T> Scale(const Tensor<T>& a, T s);

template <Real To, Real From>
Tensor<To> Cast(const Tensor<From>& a) {
  Tensor<To> out(a.dims());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<To>(src[i]);
  return out;
}

// max |a - b|.
template <Real T>
double MaxAbsDiff(const Tensor<T>& a, const Tensor<T>& b);

// max |a - ref| / max |ref|: the error relative to the reference's scale.
// Returns the absolute error when the reference is identically zero.
template <Real T>
double RelError(const Tensor<T>& a, const Tensor<T>& ref);

double RelError(std::span<const double> a, std::span<const double> ref);

template <Real T>
double MaxAbs(const Tensor<T>& a);

template <Real T>
double FrobeniusNorm(const Tensor<T>& a);

template <Real T>
bool AllFinite(const Tensor<T>& a);

}  // namespace attnqat

#endif  // ATTNQAT_TENSOR_H_
