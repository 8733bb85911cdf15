#include "eccdet/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "eccdet/error.hpp"

namespace eccdet {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kCheckpoint: return "checkpoint";
    case ErrorCode::kMissingId: return "missing_id";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kUndefined: return "undefined";
  }
  return "unknown";
}

Tensor::Tensor(int channels, int height, int width, double fill)
    : channels_(channels), height_(height), width_(width) {
  if (channels < 0 || height < 0 || width < 0) {
    throw Error(ErrorCode::kShape, "negative tensor dimension");
  }
  values_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) throw Error(ErrorCode::kShape, "tensor add: shape mismatch");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

Tensor& Tensor::operator*=(double factor) {
  for (double& v : values_) v *= factor;
  return *this;
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

Tensor Tensor::concat(const Tensor& a, const Tensor& b) {
  if (a.height_ != b.height_ || a.width_ != b.width_) {
    throw Error(ErrorCode::kShape, "concat: spatial size mismatch");
  }
  Tensor out(a.channels_ + b.channels_, a.height_, a.width_);
  std::copy(a.values_.begin(), a.values_.end(), out.values_.begin());
  std::copy(b.values_.begin(), b.values_.end(),
            out.values_.begin() + static_cast<std::ptrdiff_t>(a.values_.size()));
  return out;
}

Tensor Tensor::slice_channels(int begin, int count) const {
  if (begin < 0 || count < 0 || begin + count > channels_) {
    throw Error(ErrorCode::kShape, "slice_channels: out of range");
  }
  Tensor out(count, height_, width_);
  auto first = values_.begin() + static_cast<std::ptrdiff_t>(begin * plane_size());
  std::copy(first, first + static_cast<std::ptrdiff_t>(count * plane_size()),
            out.values_.begin());
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor operator+(Tensor a, const Tensor& b) {
  a += b;
  return a;
}

}  // namespace eccdet
