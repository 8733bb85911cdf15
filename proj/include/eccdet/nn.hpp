#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eccdet/tensor.hpp"

namespace eccdet {

struct Parameter {
  std::string name;
  std::vector<int> shape;
  Buffer value;
};

// Named, ordered collection of trainable arrays. Layers refer to their
// parameters by index, so the store can be copied or swapped freely.
class ParameterStore {
 public:
  std::size_t add(std::string name, std::vector<int> shape);

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  const Parameter* find(const std::string& name) const;

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  bool operator==(const ParameterStore& other) const;

 private:
  std::vector<Parameter> params_;
};

// Gradient buffers with the same layout as a ParameterStore.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParameterStore& params);

  std::span<double> operator[](std::size_t i) { return grads_[i]; }
  std::span<const double> operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }

  void zero();
  void add(const Gradients& other, double factor = 1.0);
  void scale(double factor);
  double norm() const;
  bool all_finite() const;

 private:
  std::vector<Buffer> grads_;
};

void init_normal(Parameter& p, std::mt19937_64& rng, double stddev);
void init_constant(Parameter& p, double value);

// 2-D convolution with square kernel, "same"-style padding of kernel/2.
struct Conv2d {
  std::size_t weight = 0;  // [out, in, k, k]
  std::size_t bias = 0;    // [out]
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;

  static Conv2d create(ParameterStore& params, const std::string& name, int in_channels,
                       int out_channels, int kernel, int stride = 1);

  int padding() const { return kernel / 2; }
  int output_size(int input) const { return (input + 2 * padding() - kernel) / stride + 1; }

  Tensor forward(const ParameterStore& params, const Tensor& input) const;
  // Accumulates weight/bias gradients into grads; returns d(input) when
  // want_input_grad is set, otherwise an empty tensor.
  Tensor backward(const ParameterStore& params, const Tensor& input, const Tensor& grad_output,
                  Gradients& grads, bool want_input_grad = true) const;
};

// Per-channel affine normalization y = scale_c * x + shift_c. Batch
// independent, so forward and backward are deterministic functions of the
// input.
struct ChannelAffine {
  std::size_t scale = 0;
  std::size_t shift = 0;
  int channels = 0;

  static ChannelAffine create(ParameterStore& params, const std::string& name, int channels);

  Tensor forward(const ParameterStore& params, const Tensor& input) const;
  Tensor backward(const ParameterStore& params, const Tensor& input, const Tensor& grad_output,
                  Gradients& grads) const;
};

Tensor relu(const Tensor& x);
// grad wrt the input given the forward output.
Tensor relu_backward(const Tensor& output, const Tensor& grad_output);

double sigmoid(double z);
Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_output);

// Bilinear resize with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& input, int out_height, int out_width);
// Adjoint of resize_bilinear.
Tensor resize_bilinear_backward(const Tensor& grad_output, int in_height, int in_width);

// Samples input at (x + flow[0], y + flow[1]) for every output cell using
// bilinear interpolation; sample coordinates are clamped to the border.
// flow channel 0 is the column (x) displacement, channel 1 the row (y)
// displacement, both in cells of the input grid.
Tensor flow_warp(const Tensor& input, const Tensor& flow);

struct FlowWarpGrad {
  Tensor input;
  Tensor flow;
};
FlowWarpGrad flow_warp_backward(const Tensor& input, const Tensor& flow,
                                const Tensor& grad_output);

}  // namespace eccdet
