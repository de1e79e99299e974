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

#include "attnqat/tensor.h"

#include <atomic>
#include <cmath>
#include <limits>

namespace attnqat {

namespace memory {
namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

void RecordAllocation(std::size_t bytes) {
  const std::size_t now = g_current.fetch_add(bytes) + bytes;
  std::size_t peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void RecordDeallocation(std::size_t bytes) { g_current.fetch_sub(bytes); }

std::size_t CurrentBytes() { return g_current.load(); }
std::size_t PeakBytes() { return g_peak.load(); }
void ResetPeak() { g_peak.store(g_current.load()); }

}  // namespace memory

std::string ShapeString(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

template <Real T>
Tensor<T> Transpose(const Tensor<T>& a) {
  RequireMatrix(a, "Transpose");
  Tensor<T> out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  }
  return out;
}

template <Real T>
void MatmulNTAccumulate(const Tensor<T>& a, std::size_t a_row0,
                        std::size_t a_rows, std::size_t a_col0,
                        const Tensor<T>& b_t, std::size_t b_row0,
                        std::size_t b_rows, std::size_t b_col0,
                        std::size_t depth, std::size_t group, Tensor<T>& c) {
  if (group == 0) group = 1;
  if (a_row0 + a_rows > a.rows() || a_col0 + depth > a.cols() ||
      b_row0 + b_rows > b_t.rows() || b_col0 + depth > b_t.cols() ||
      c.rows() != a_rows || c.cols() != b_rows) {
    throw ShapeError("MatmulNTAccumulate: operand ranges out of bounds");
  }
  for (std::size_t i = 0; i < a_rows; ++i) {
    const T* ar = a.data().data() + (a_row0 + i) * a.cols() + a_col0;
    T* cr = c.data().data() + i * c.cols();
    for (std::size_t j = 0; j < b_rows; ++j) {
      const T* br = b_t.data().data() + (b_row0 + j) * b_t.cols() + b_col0;
      T acc = cr[j];
      for (std::size_t k0 = 0; k0 < depth; k0 += group) {
        const std::size_t k1 = std::min(depth, k0 + group);
        T partial = T{0};
        for (std::size_t k = k0; k < k1; ++k) partial += ar[k] * br[k];
        acc += partial;
      }
      cr[j] = acc;
    }
  }
}

template <Real T>
Tensor<T> MatmulNT(const Tensor<T>& a, const Tensor<T>& b_t, std::size_t group) {
  RequireMatrix(a, "MatmulNT");
  RequireMatrix(b_t, "MatmulNT");
  if (a.cols() != b_t.cols()) {
    throw ShapeError("MatmulNT: contraction mismatch " + ShapeString(a.dims()) +
                     " vs " + ShapeString(b_t.dims()) + "^T");
  }
  Tensor<T> c(a.rows(), b_t.rows());
  MatmulNTAccumulate(a, 0, a.rows(), 0, b_t, 0, b_t.rows(), 0, a.cols(), group,
                     c);
  return c;
}

template <Real T>
Tensor<T> Matmul(const Tensor<T>& a, const Tensor<T>& b, std::size_t group) {
  RequireMatrix(a, "Matmul");
  RequireMatrix(b, "Matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("Matmul: inner dimensions differ " +
                     ShapeString(a.dims()) + " x " + ShapeString(b.dims()));
  }
  return MatmulNT(a, Transpose(b), group);
}

template <Real T>
Tensor<T> Add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) throw ShapeError("Add: shape mismatch");
  Tensor<T> out = a;
  auto o = out.data();
  auto bb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bb[i];
  return out;
}

template <Real T>
Tensor<T> Scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (T& v : out.data()) v *= s;
  return out;
}

template <Real T>
double MaxAbsDiff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("MaxAbsDiff: size mismatch");
  double m = 0.0;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(static_cast<double>(x[i]) - static_cast<double>(y[i]));
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    m = std::max(m, d);
  }
  return m;
}

template <Real T>
double MaxAbs(const Tensor<T>& a) {
  double m = 0.0;
  for (T v : a.data()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <Real T>
double RelError(const Tensor<T>& a, const Tensor<T>& ref) {
  const double diff = MaxAbsDiff(a, ref);
  const double scale = MaxAbs(ref);
  return scale > 0.0 ? diff / scale : diff;
}

double RelError(std::span<const double> a, std::span<const double> ref) {
  if (a.size() != ref.size()) throw ShapeError("RelError: size mismatch");
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - ref[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    diff = std::max(diff, d);
    scale = std::max(scale, std::abs(ref[i]));
  }
  return scale > 0.0 ? diff / scale : diff;
}

template <Real T>
double FrobeniusNorm(const Tensor<T>& a) {
  double s = 0.0;
  for (T v : a.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template <Real T>
bool AllFinite(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

#define ATTNQAT_INSTANTIATE(T)                                                \
  template Tensor<T> Transpose(const Tensor<T>&);                             \
  template Tensor<T> Matmul(const Tensor<T>&, const Tensor<T>&, std::size_t); \
  template Tensor<T> MatmulNT(const Tensor<T>&, const Tensor<T>&,             \
                              std::size_t);                                   \
  template void MatmulNTAccumulate(                                           \
      const Tensor<T>&, std::size_t, std::size_t, std::size_t,                \
      const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t,   \
      std::size_t, Tensor<T>&);                                               \
  template Tensor<T> Add(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> Scale(const Tensor<T>&, T);                              \
  template double MaxAbsDiff(const Tensor<T>&, const Tensor<T>&);             \
  template double MaxAbs(const Tensor<T>&);                                   \
  template double RelError(const Tensor<T>&, const Tensor<T>&);               \
  template double FrobeniusNorm(const Tensor<T>&);                            \
  template bool AllFinite(const Tensor<T>&);

ATTNQAT_INSTANTIATE(float)
ATTNQAT_INSTANTIATE(double)

#undef ATTNQAT_INSTANTIATE

}  // namespace attnqat
