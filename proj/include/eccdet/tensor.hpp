#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <vector>

namespace eccdet {

// Fixed 64-byte alignment for numeric buffers. Eigen's vectorized reductions
// peel elements up to the first aligned address, so an address-dependent
// alignment would make the rounding, and with it training, vary between runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

// Dense channel-major (C, H, W) array of doubles. Index (c, y, x) with y the
// row and x the column.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0);

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  std::size_t plane_size() const {
    return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
  }
  bool empty() const { return values_.empty(); }

  double& operator()(int c, int y, int x) {
    return values_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  double operator()(int c, int y, int x) const {
    return values_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  Buffer& values() { return values_; }
  const Buffer& values() const { return values_; }

  std::span<double> plane(int c) { return {data() + c * plane_size(), plane_size()}; }
  std::span<const double> plane(int c) const {
    return {data() + c * plane_size(), plane_size()};
  }

  bool same_shape(const Tensor& other) const {
    return channels_ == other.channels_ && height_ == other.height_ &&
           width_ == other.width_;
  }

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double factor);
  void fill(double value);

  // Channel concatenation of two tensors with equal spatial size.
  static Tensor concat(const Tensor& a, const Tensor& b);
  // Splits channels [begin, begin + count).
  Tensor slice_channels(int begin, int count) const;

  bool all_finite() const;

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  Buffer values_;
};

Tensor operator+(Tensor a, const Tensor& b);

}  // namespace eccdet
