#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "ucam/data.hpp"
#include "ucam/metrics.hpp"

namespace ucam {

/// 8-bit raster, row-major, channels interleaved.
struct RasterImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> samples;

  RasterImage() = default;
  RasterImage(std::size_t width, std::size_t height, std::size_t channels, std::uint8_t fill = 0);
  void validate() const;
  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

/// Bicubic (a = -0.5) resize of a map to [height, width], edge-clamped.
/// Negative overshoot is clipped to 0 and the result renormalized to sum 1.
Tensor upsample_bicubic(const AttentionMap& map, std::size_t width, std::size_t height);

/// Normalized 1-D Gaussian taps, centred, standard deviation `sigma` pixels.
std::vector<double> gaussian_kernel(std::size_t size, double sigma);

/// Separable edge-clamped Gaussian blur of a [H, W] grid, renormalized to sum 1.
Tensor gaussian_smooth(const Tensor& grid, std::size_t kernel_size = 31, double sigma = 1.0);

/// 255 * grid / max(grid), rounded; all-zero grid gives a black image.
RasterImage grayscale_image(const Tensor& grid);

/// base * grid * gain per pixel and channel, rounded and clamped to [0, 255].
RasterImage render_overlay(const Tensor& grid, const RasterImage& base, double gain);

/// Gain that maps the grid maximum to 1 (0 for an all-zero grid).
double peak_gain(const Tensor& grid);

/// Nearest-neighbour colour rendering of an example's cells: channel k of a
/// cell is 128 + 127 tanh(feature k).
RasterImage base_image(const Example& example, std::size_t width, std::size_t height);

enum class ImageFormat { Pgm, Ppm };

/// Binary P5 (1 channel) or P6 (3 channels), maxval 255.
void write_image(const RasterImage& image, const std::filesystem::path& path, ImageFormat format);
std::vector<std::uint8_t> encode_image(const RasterImage& image, ImageFormat format);
RasterImage read_image(const std::filesystem::path& path);

struct VizConfig {
  std::size_t width = 448;
  std::size_t height = 448;
  std::size_t kernel_size = 31;
  double sigma = 1.0;
  /// Overlay gain; defaults to peak_gain of the smoothed map.
  std::optional<double> gain;
};

struct RenderedAttention {
  Tensor upsampled;
  Tensor smoothed;
  RasterImage raw;       ///< grayscale of `upsampled`
  RasterImage smooth;    ///< grayscale of `smoothed`
  RasterImage overlay;   ///< 3-channel
};

RenderedAttention render_attention(const AttentionMap& map, const RasterImage& base, const VizConfig& config);

/// Writes `<stem>.raw.pgm`, `<stem>.smoothed.pgm` and `<stem>.overlay.ppm` into `dir`.
void write_rendered(const RenderedAttention& r, const std::filesystem::path& dir, const std::string& stem);

}  // namespace ucam
