#include "eccdet/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "eccdet/error.hpp"

namespace eccdet {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Unfolds input patches into a (C*k*k) x (Ho*Wo) matrix.
RowMatrix im2col(const Tensor& input, int kernel, int stride, int pad, int out_h, int out_w) {
  const int channels = input.channels();
  const int height = input.height();
  const int width = input.width();
  RowMatrix col(static_cast<Eigen::Index>(channels) * kernel * kernel,
                static_cast<Eigen::Index>(out_h) * out_w);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        double* row = col.row((c * kernel + ky) * kernel + kx).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* dst = row + static_cast<std::ptrdiff_t>(oy) * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < width) ? input(c, iy, ix) : 0.0;
          }
        }
      }
    }
  }
  return col;
}

void col2im(const RowMatrix& col, int kernel, int stride, int pad, int out_h, int out_w,
            Tensor& grad_input) {
  const int height = grad_input.height();
  const int width = grad_input.width();
  for (int c = 0; c < grad_input.channels(); ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const double* row = col.row((c * kernel + ky) * kernel + kx).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          const double* src = row + static_cast<std::ptrdiff_t>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) grad_input(c, iy, ix) += src[ox];
          }
        }
      }
    }
  }
}

std::size_t product(const std::vector<int>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

struct BilinearTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

BilinearTap half_pixel_tap(int dst, int in_size, int out_size) {
  const double scale = static_cast<double>(in_size) / out_size;
  double src = (dst + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
  BilinearTap tap;
  tap.lo = static_cast<int>(std::floor(src));
  tap.hi = std::min(tap.lo + 1, in_size - 1);
  tap.frac = src - tap.lo;
  return tap;
}

}  // namespace

std::size_t ParameterStore::add(std::string name, std::vector<int> shape) {
  Parameter p;
  p.name = std::move(name);
  p.value.assign(product(shape), 0.0);
  p.shape = std::move(shape);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

bool ParameterStore::operator==(const ParameterStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.shape != b.shape || a.value != b.value) return false;
  }
  return true;
}

Gradients::Gradients(const ParameterStore& params) {
  grads_.reserve(params.size());
  for (const auto& p : params.all()) grads_.emplace_back(p.value.size(), 0.0);
}

void Gradients::zero() {
  for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0);
}

void Gradients::add(const Gradients& other, double factor) {
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    for (std::size_t j = 0; j < grads_[i].size(); ++j) grads_[i][j] += factor * other.grads_[i][j];
  }
}

void Gradients::scale(double factor) {
  for (auto& g : grads_) {
    for (double& v : g) v *= factor;
  }
}

double Gradients::norm() const {
  double sum = 0.0;
  for (const auto& g : grads_) {
    for (double v : g) sum += v * v;
  }
  return std::sqrt(sum);
}

bool Gradients::all_finite() const {
  for (const auto& g : grads_) {
    for (double v : g) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

void init_normal(Parameter& p, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : p.value) v = dist(rng);
}

void init_constant(Parameter& p, double value) {
  std::fill(p.value.begin(), p.value.end(), value);
}

Conv2d Conv2d::create(ParameterStore& params, const std::string& name, int in_channels,
                      int out_channels, int kernel, int stride) {
  if (kernel < 1 || kernel % 2 == 0) throw Error(ErrorCode::kConfig, "conv kernel must be odd");
  Conv2d conv;
  conv.in_channels = in_channels;
  conv.out_channels = out_channels;
  conv.kernel = kernel;
  conv.stride = stride;
  conv.weight = params.add(name + ".weight", {out_channels, in_channels, kernel, kernel});
  conv.bias = params.add(name + ".bias", {out_channels});
  return conv;
}

Tensor Conv2d::forward(const ParameterStore& params, const Tensor& input) const {
  if (input.channels() != in_channels) {
    throw Error(ErrorCode::kShape, "conv: expected " + std::to_string(in_channels) +
                                       " input channels, got " +
                                       std::to_string(input.channels()));
  }
  const int out_h = output_size(input.height());
  const int out_w = output_size(input.width());
  Tensor output(out_channels, out_h, out_w);
  ConstMatrixMap w(params[weight].value.data(), out_channels,
                   static_cast<Eigen::Index>(in_channels) * kernel * kernel);
  MatrixMap y(output.data(), out_channels, static_cast<Eigen::Index>(out_h) * out_w);
  if (kernel == 1 && stride == 1) {
    ConstMatrixMap x(input.data(), in_channels, static_cast<Eigen::Index>(out_h) * out_w);
    y.noalias() = w * x;
  } else {
    const RowMatrix col = im2col(input, kernel, stride, padding(), out_h, out_w);
    y.noalias() = w * col;
  }
  const auto& b = params[bias].value;
  for (int c = 0; c < out_channels; ++c) y.row(c).array() += b[static_cast<std::size_t>(c)];
  return output;
}

Tensor Conv2d::backward(const ParameterStore& params, const Tensor& input,
                        const Tensor& grad_output, Gradients& grads,
                        bool want_input_grad) const {
  const int out_h = grad_output.height();
  const int out_w = grad_output.width();
  const Eigen::Index patch = static_cast<Eigen::Index>(in_channels) * kernel * kernel;
  const Eigen::Index cells = static_cast<Eigen::Index>(out_h) * out_w;
  ConstMatrixMap w(params[weight].value.data(), out_channels, patch);
  ConstMatrixMap dy(grad_output.data(), out_channels, cells);
  MatrixMap dw(grads[weight].data(), out_channels, patch);

  auto db = grads[bias];
  for (int c = 0; c < out_channels; ++c) db[static_cast<std::size_t>(c)] += dy.row(c).sum();

  Tensor grad_input;
  if (kernel == 1 && stride == 1) {
    ConstMatrixMap x(input.data(), in_channels, cells);
    dw.noalias() += dy * x.transpose();
    if (want_input_grad) {
      grad_input = Tensor(in_channels, input.height(), input.width());
      MatrixMap dx(grad_input.data(), in_channels, cells);
      dx.noalias() = w.transpose() * dy;
    }
    return grad_input;
  }
  const RowMatrix col = im2col(input, kernel, stride, padding(), out_h, out_w);
  dw.noalias() += dy * col.transpose();
  if (want_input_grad) {
    const RowMatrix dcol = w.transpose() * dy;
    grad_input = Tensor(in_channels, input.height(), input.width());
    col2im(dcol, kernel, stride, padding(), out_h, out_w, grad_input);
  }
  return grad_input;
}

ChannelAffine ChannelAffine::create(ParameterStore& params, const std::string& name,
                                    int channels) {
  ChannelAffine norm;
  norm.channels = channels;
  norm.scale = params.add(name + ".scale", {channels});
  norm.shift = params.add(name + ".shift", {channels});
  init_constant(params[norm.scale], 1.0);
  return norm;
}

Tensor ChannelAffine::forward(const ParameterStore& params, const Tensor& input) const {
  Tensor output(input.channels(), input.height(), input.width());
  const auto& s = params[scale].value;
  const auto& b = params[shift].value;
  for (int c = 0; c < channels; ++c) {
    auto in = input.plane(c);
    auto out = output.plane(c);
    const double sc = s[static_cast<std::size_t>(c)];
    const double sh = b[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = sc * in[i] + sh;
  }
  return output;
}

Tensor ChannelAffine::backward(const ParameterStore& params, const Tensor& input,
                               const Tensor& grad_output, Gradients& grads) const {
  Tensor grad_input(input.channels(), input.height(), input.width());
  const auto& s = params[scale].value;
  auto ds = grads[scale];
  auto db = grads[shift];
  for (int c = 0; c < channels; ++c) {
    auto in = input.plane(c);
    auto dy = grad_output.plane(c);
    auto dx = grad_input.plane(c);
    const double sc = s[static_cast<std::size_t>(c)];
    double acc_s = 0.0;
    double acc_b = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      acc_s += dy[i] * in[i];
      acc_b += dy[i];
      dx[i] = sc * dy[i];
    }
    ds[static_cast<std::size_t>(c)] += acc_s;
    db[static_cast<std::size_t>(c)] += acc_b;
  }
  return grad_input;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& output, const Tensor& grad_output) {
  Tensor dx = grad_output;
  const auto& y = output.values();
  auto& d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (y[i] <= 0.0) d[i] = 0.0;
  }
  return dx;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = sigmoid(v);
  return y;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_output) {
  Tensor dx = grad_output;
  const auto& y = output.values();
  auto& d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= y[i] * (1.0 - y[i]);
  return dx;
}

Tensor resize_bilinear(const Tensor& input, int out_height, int out_width) {
  Tensor output(input.channels(), out_height, out_width);
  std::vector<BilinearTap> rows(static_cast<std::size_t>(out_height));
  std::vector<BilinearTap> cols(static_cast<std::size_t>(out_width));
  for (int y = 0; y < out_height; ++y) rows[y] = half_pixel_tap(y, input.height(), out_height);
  for (int x = 0; x < out_width; ++x) cols[x] = half_pixel_tap(x, input.width(), out_width);
  for (int c = 0; c < input.channels(); ++c) {
    for (int y = 0; y < out_height; ++y) {
      const auto& r = rows[y];
      for (int x = 0; x < out_width; ++x) {
        const auto& k = cols[x];
        const double top = input(c, r.lo, k.lo) * (1.0 - k.frac) + input(c, r.lo, k.hi) * k.frac;
        const double bottom =
            input(c, r.hi, k.lo) * (1.0 - k.frac) + input(c, r.hi, k.hi) * k.frac;
        output(c, y, x) = top * (1.0 - r.frac) + bottom * r.frac;
      }
    }
  }
  return output;
}

Tensor resize_bilinear_backward(const Tensor& grad_output, int in_height, int in_width) {
  Tensor grad_input(grad_output.channels(), in_height, in_width);
  const int out_height = grad_output.height();
  const int out_width = grad_output.width();
  std::vector<BilinearTap> rows(static_cast<std::size_t>(out_height));
  std::vector<BilinearTap> cols(static_cast<std::size_t>(out_width));
  for (int y = 0; y < out_height; ++y) rows[y] = half_pixel_tap(y, in_height, out_height);
  for (int x = 0; x < out_width; ++x) cols[x] = half_pixel_tap(x, in_width, out_width);
  for (int c = 0; c < grad_output.channels(); ++c) {
    for (int y = 0; y < out_height; ++y) {
      const auto& r = rows[y];
      for (int x = 0; x < out_width; ++x) {
        const auto& k = cols[x];
        const double g = grad_output(c, y, x);
        grad_input(c, r.lo, k.lo) += g * (1.0 - r.frac) * (1.0 - k.frac);
        grad_input(c, r.lo, k.hi) += g * (1.0 - r.frac) * k.frac;
        grad_input(c, r.hi, k.lo) += g * r.frac * (1.0 - k.frac);
        grad_input(c, r.hi, k.hi) += g * r.frac * k.frac;
      }
    }
  }
  return grad_input;
}

namespace {

struct WarpTap {
  int x0, x1, y0, y1;
  double fx, fy;
  bool x_inside, y_inside;  // false when the coordinate was clamped
};

WarpTap warp_tap(double sx, double sy, int width, int height) {
  WarpTap t{};
  const double max_x = width - 1;
  const double max_y = height - 1;
  t.x_inside = sx >= 0.0 && sx <= max_x;
  t.y_inside = sy >= 0.0 && sy <= max_y;
  sx = std::clamp(sx, 0.0, max_x);
  sy = std::clamp(sy, 0.0, max_y);
  t.x0 = static_cast<int>(std::floor(sx));
  t.y0 = static_cast<int>(std::floor(sy));
  t.x1 = std::min(t.x0 + 1, width - 1);
  t.y1 = std::min(t.y0 + 1, height - 1);
  t.fx = sx - t.x0;
  t.fy = sy - t.y0;
  return t;
}

}  // namespace

Tensor flow_warp(const Tensor& input, const Tensor& flow) {
  if (flow.channels() != 2 || flow.height() != input.height() ||
      flow.width() != input.width()) {
    throw Error(ErrorCode::kShape, "flow_warp: flow must be 2 x H x W matching the input");
  }
  const int height = input.height();
  const int width = input.width();
  Tensor output(input.channels(), height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const WarpTap t = warp_tap(x + flow(0, y, x), y + flow(1, y, x), width, height);
      const double w00 = (1.0 - t.fx) * (1.0 - t.fy);
      const double w01 = t.fx * (1.0 - t.fy);
      const double w10 = (1.0 - t.fx) * t.fy;
      const double w11 = t.fx * t.fy;
      for (int c = 0; c < input.channels(); ++c) {
        output(c, y, x) = w00 * input(c, t.y0, t.x0) + w01 * input(c, t.y0, t.x1) +
                          w10 * input(c, t.y1, t.x0) + w11 * input(c, t.y1, t.x1);
      }
    }
  }
  return output;
}

FlowWarpGrad flow_warp_backward(const Tensor& input, const Tensor& flow,
                                const Tensor& grad_output) {
  const int height = input.height();
  const int width = input.width();
  FlowWarpGrad g{Tensor(input.channels(), height, width), Tensor(2, height, width)};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const WarpTap t = warp_tap(x + flow(0, y, x), y + flow(1, y, x), width, height);
      const double w00 = (1.0 - t.fx) * (1.0 - t.fy);
      const double w01 = t.fx * (1.0 - t.fy);
      const double w10 = (1.0 - t.fx) * t.fy;
      const double w11 = t.fx * t.fy;
      double dfx = 0.0;
      double dfy = 0.0;
      for (int c = 0; c < input.channels(); ++c) {
        const double go = grad_output(c, y, x);
        const double v00 = input(c, t.y0, t.x0);
        const double v01 = input(c, t.y0, t.x1);
        const double v10 = input(c, t.y1, t.x0);
        const double v11 = input(c, t.y1, t.x1);
        g.input(c, t.y0, t.x0) += go * w00;
        g.input(c, t.y0, t.x1) += go * w01;
        g.input(c, t.y1, t.x0) += go * w10;
        g.input(c, t.y1, t.x1) += go * w11;
        dfx += go * ((v01 - v00) * (1.0 - t.fy) + (v11 - v10) * t.fy);
        dfy += go * ((v10 - v00) * (1.0 - t.fx) + (v11 - v01) * t.fx);
      }
      g.flow(0, y, x) = t.x_inside ? dfx : 0.0;
      g.flow(1, y, x) = t.y_inside ? dfy : 0.0;
    }
  }
  return g;
}

}  // namespace eccdet
