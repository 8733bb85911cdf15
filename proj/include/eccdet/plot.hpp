#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace eccdet {

struct PlotSeries {
  std::vector<double> x;
  std::vector<double> y;
  std::array<std::uint8_t, 3> color = {31, 119, 180};
  bool connect = false;  // polyline instead of markers
};

// Static raster chart: white canvas, axis frame with 5 ticks per axis,
// series drawn as 2 px square markers or polylines. Missing ranges are taken
// from the data.
struct PlotSpec {
  int width = 480;
  int height = 360;
  std::optional<std::array<double, 2>> x_range;
  std::optional<std::array<double, 2>> y_range;
  std::vector<PlotSeries> series;
};

// Rendered RGB bytes, row-major, width * height * 3.
std::vector<std::uint8_t> render_plot(const PlotSpec& spec);
void save_plot(const std::filesystem::path& path, const PlotSpec& spec);

}  // namespace eccdet
