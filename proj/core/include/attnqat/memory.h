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

// Process-wide accounting of tensor buffer bytes. Every dense and quantized
// tensor allocates through TrackingAllocator, so the peak observed inside a
// PeakScope is the working-set high-water mark of the code it brackets.

#ifndef ATTNQAT_MEMORY_H_
#define ATTNQAT_MEMORY_H_

#include <cstddef>
#include <memory>
#include <vector>

namespace attnqat {

namespace memory {

void RecordAllocation(std::size_t bytes);
void RecordDeallocation(std::size_t bytes);

std::size_t CurrentBytes();
std::size_t PeakBytes();

// Resets the peak to the current live byte count.
void ResetPeak();

}  // namespace memory

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    memory::RecordAllocation(n * sizeof(T));
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    memory::RecordDeallocation(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using TrackedVector = std::vector<T, TrackingAllocator<T>>;

// Measures the peak number of tracked bytes allocated on top of whatever was
// live when the scope opened. Scopes do not nest.
class PeakScope {
 public:
  PeakScope() : base_(memory::CurrentBytes()) { memory::ResetPeak(); }

  std::size_t peak_bytes() const {
    const std::size_t peak = memory::PeakBytes();
    return peak > base_ ? peak - base_ : 0;
  }

 private:
  std::size_t base_;
};

}  // namespace attnqat

#endif  // ATTNQAT_MEMORY_H_
