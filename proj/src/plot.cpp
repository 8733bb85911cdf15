#include "eccdet/plot.hpp"

#include <algorithm>
#include <cmath>

#include "eccdet/error.hpp"
#include "eccdet/image_io.hpp"

namespace eccdet {
namespace {

constexpr int kMargin = 40;

struct Canvas {
  int w, h;
  std::vector<std::uint8_t> px;

  void set(int x, int y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    const std::size_t i = (static_cast<std::size_t>(y) * w + x) * 3;
    px[i] = c[0];
    px[i + 1] = c[1];
    px[i + 2] = c[2];
  }

  void line(int x0, int y0, int x1, int y1, const std::array<std::uint8_t, 3>& c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
};

std::array<double, 2> data_range(const std::vector<PlotSeries>& series, bool use_x) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series) {
    for (double v : use_x ? s.x : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!std::isfinite(lo)) return {0.0, 1.0};
  if (hi == lo) return {lo - 0.5, hi + 0.5};
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace

std::vector<std::uint8_t> render_plot(const PlotSpec& spec) {
  if (spec.width <= 2 * kMargin || spec.height <= 2 * kMargin) {
    throw Error(ErrorCode::kConfig, "plot canvas is too small");
  }
  Canvas cv{spec.width, spec.height,
            std::vector<std::uint8_t>(static_cast<std::size_t>(spec.width) * spec.height * 3, 255)};
  const auto xr = spec.x_range.value_or(data_range(spec.series, true));
  const auto yr = spec.y_range.value_or(data_range(spec.series, false));
  const int left = kMargin, right = spec.width - kMargin;
  const int top = kMargin, bottom = spec.height - kMargin;
  const auto to_px = [&](double x, double y) {
    const double u = (x - xr[0]) / (xr[1] - xr[0]);
    const double v = (y - yr[0]) / (yr[1] - yr[0]);
    return std::array<int, 2>{static_cast<int>(std::lround(left + u * (right - left))),
                              static_cast<int>(std::lround(bottom - v * (bottom - top)))};
  };

  const std::array<std::uint8_t, 3> axis = {0, 0, 0};
  const std::array<std::uint8_t, 3> grid = {225, 225, 225};
  for (int i = 0; i <= 4; ++i) {
    const int gx = left + i * (right - left) / 4;
    const int gy = bottom - i * (bottom - top) / 4;
    cv.line(gx, top, gx, bottom, grid);
    cv.line(left, gy, right, gy, grid);
    cv.line(gx, bottom, gx, bottom + 5, axis);
    cv.line(left - 5, gy, left, gy, axis);
  }
  cv.line(left, top, left, bottom, axis);
  cv.line(left, bottom, right, bottom, axis);

  for (const auto& s : spec.series) {
    const std::size_t n = std::min(s.x.size(), s.y.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      const auto p = to_px(s.x[i], s.y[i]);
      if (s.connect) {
        if (i > 0 && std::isfinite(s.x[i - 1]) && std::isfinite(s.y[i - 1])) {
          const auto q = to_px(s.x[i - 1], s.y[i - 1]);
          cv.line(q[0], q[1], p[0], p[1], s.color);
        }
      } else {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) cv.set(p[0] + dx, p[1] + dy, s.color);
        }
      }
    }
  }
  return cv.px;
}

void save_plot(const std::filesystem::path& path, const PlotSpec& spec) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_png8(path, render_plot(spec), spec.width, spec.height);
}

}  // namespace eccdet
