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

#include "attnqat/tensor_io.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace attnqat {

namespace {

constexpr char kDenseMagic[4] = {'A', 'T', 'N', 'Q'};
constexpr char kQuantMagic[4] = {'A', 'T', 'Q', '4'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void Bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  template <typename U>
  void Le(U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    Bytes(buf, sizeof(U));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void Bytes(void* p, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n) {
      throw FormatError(std::string("truncated file while reading ") + what,
                        offset_ + got);
    }
    offset_ += n;
  }
  template <typename U>
  U Le(const char* what) {
    unsigned char buf[sizeof(U)];
    Bytes(buf, sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(U{buf[i]} << (8 * i));
    return v;
  }
  std::uint64_t offset() const { return offset_; }

  void Magic(const char (&expected)[4]) {
    char m[4];
    Bytes(m, 4, "magic");
    if (std::memcmp(m, expected, 4) != 0) {
      throw FormatError("bad magic, expected " + std::string(expected, 4), 0);
    }
    const std::uint64_t at = offset_;
    const auto version = Le<std::uint32_t>("version");
    if (version != kVersion) {
      throw FormatError("unsupported version " + std::to_string(version), at);
    }
  }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

template <typename Bits, Real T>
Bits ToBits(T v) {
  return std::bit_cast<Bits>(v);
}

}  // namespace

template <Real T>
void WriteTensor(std::ostream& out, const Tensor<T>& t) {
  Writer w(out);
  w.Bytes(kDenseMagic, 4);
  w.Le<std::uint32_t>(kVersion);
  w.Le<std::uint8_t>(sizeof(T) == 4 ? 0 : 1);
  w.Le<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) w.Le<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (T v : t.data()) {
    if constexpr (sizeof(T) == 4) {
      w.Le<std::uint32_t>(ToBits<std::uint32_t>(v));
    } else {
      w.Le<std::uint64_t>(ToBits<std::uint64_t>(v));
    }
  }
  if (!out) throw FormatError("write failed", 0);
}

namespace {

template <Real T>
Tensor<T> ReadPayload(Reader& r, std::vector<std::size_t> dims) {
  Tensor<T> t(std::move(dims));
  for (T& v : t.data()) {
    if constexpr (sizeof(T) == 4) {
      v = std::bit_cast<float>(r.Le<std::uint32_t>("payload"));
    } else {
      v = std::bit_cast<double>(r.Le<std::uint64_t>("payload"));
    }
  }
  return t;
}

}  // namespace

AnyTensor ReadTensor(std::istream& in) {
  Reader r(in);
  r.Magic(kDenseMagic);
  const std::uint64_t width_at = r.offset();
  const auto width = r.Le<std::uint8_t>("width code");
  if (width > 1) throw FormatError("bad width code " + std::to_string(width), width_at);
  const std::uint64_t ndim_at = r.offset();
  const auto ndim = r.Le<std::uint8_t>("ndim");
  if (ndim < 1 || ndim > 3) throw FormatError("bad ndim " + std::to_string(ndim), ndim_at);
  std::vector<std::size_t> dims(ndim);
  for (auto& d : dims) d = r.Le<std::uint32_t>("dims");
  if (width == 0) return ReadPayload<float>(r, std::move(dims));
  return ReadPayload<double>(r, std::move(dims));
}

template <Real T>
void SaveTensor(const Tensor<T>& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing", 0);
  WriteTensor(out, t);
}

AnyTensor LoadTensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path, 0);
  return ReadTensor(in);
}

template <Real T>
Tensor<T> LoadTensorAs(const std::string& path) {
  return std::visit([](auto&& t) { return Cast<T>(t); }, LoadTensor(path));
}

void WriteQuantTensor(std::ostream& out, const QuantTensor& q) {
  Writer w(out);
  w.Bytes(kQuantMagic, 4);
  w.Le<std::uint32_t>(kVersion);
  w.Le<std::uint8_t>(static_cast<std::uint8_t>(q.spec().scale_format));
  w.Le<std::uint16_t>(static_cast<std::uint16_t>(q.spec().block_size));
  w.Le<std::uint32_t>(static_cast<std::uint32_t>(q.rows()));
  w.Le<std::uint32_t>(static_cast<std::uint32_t>(q.cols()));
  w.Bytes(q.scale_bytes().data(), q.scale_bytes().size());
  w.Bytes(q.packed_bytes().data(), q.packed_bytes().size());
  if (!out) throw FormatError("write failed", 0);
}

QuantTensor ReadQuantTensor(std::istream& in) {
  Reader r(in);
  r.Magic(kQuantMagic);
  const std::uint64_t fmt_at = r.offset();
  const auto fmt = r.Le<std::uint8_t>("scale format");
  if (fmt > 1) throw FormatError("bad scale format " + std::to_string(fmt), fmt_at);
  const std::uint64_t bs_at = r.offset();
  const auto block_size = r.Le<std::uint16_t>("block size");
  const auto rows = r.Le<std::uint32_t>("rows");
  const auto cols = r.Le<std::uint32_t>("cols");
  const BlockSpec spec{block_size, static_cast<ScaleFormat>(fmt)};
  QuantTensor q;
  try {
    q = QuantTensor(rows, cols, spec);
  } catch (const Error& e) {
    throw FormatError(std::string("bad header: ") + e.what(), bs_at);
  }
  r.Bytes(q.scale_bytes().data(), q.scale_bytes().size(), "scale grid");
  r.Bytes(q.packed_bytes().data(), q.packed_bytes().size(), "packed codes");
  return q;
}

void SaveQuantTensor(const QuantTensor& q, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing", 0);
  WriteQuantTensor(out, q);
}

QuantTensor LoadQuantTensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path, 0);
  return ReadQuantTensor(in);
}

template void WriteTensor(std::ostream&, const Tensor<float>&);
template void WriteTensor(std::ostream&, const Tensor<double>&);
template void SaveTensor(const Tensor<float>&, const std::string&);
template void SaveTensor(const Tensor<double>&, const std::string&);
template Tensor<float> LoadTensorAs(const std::string&);
template Tensor<double> LoadTensorAs(const std::string&);

}  // namespace attnqat
