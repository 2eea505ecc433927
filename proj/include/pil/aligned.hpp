#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace pil {

/// Allocator handing out 64-byte aligned blocks.
///
/// Eigen's vectorized kernels peel a different number of leading elements
/// depending on where a buffer starts, which changes the order of floating
/// point sums. Giving every buffer the same alignment keeps results bitwise
/// independent of heap layout.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

}  // namespace pil
