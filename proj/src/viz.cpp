#include "ucam/viz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "ucam/error.hpp"
#include "ucam/kernels.hpp"

namespace ucam {

namespace {

void renormalize(Tensor& t, const char* what) {
  double total = 0.0;
  for (double v : t.values()) total += v;
  if (!(total > 0.0)) throw NumericalFault(std::string(what) + ": no mass left to renormalize");
  for (auto& v : t.values()) v /= total;
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

RasterImage::RasterImage(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill)
    : width(w), height(h), channels(c), samples(w * h * c, fill) {
  validate();
}

void RasterImage::validate() const {
  if (width == 0 || height == 0) throw ValidationError("image extents must be positive");
  if (channels != 1 && channels != 3) throw ValidationError("image must have 1 or 3 channels");
  if (samples.size() != width * height * channels)
    throw ValidationError("image holds " + std::to_string(samples.size()) + " samples, expected " +
                          std::to_string(width * height * channels));
}

Tensor upsample_bicubic(const AttentionMap& map, std::size_t width, std::size_t height) {
  if (width < map.cols() || height < map.rows())
    throw ValidationError("upsample_bicubic: target " + std::to_string(width) + "x" + std::to_string(height) +
                          " is smaller than the " + std::to_string(map.cols()) + "x" + std::to_string(map.rows()) +
                          " map");
  Tensor out({height, width});
  kernels::bicubic({map.rows(), map.cols(), height, width, -0.5, map.grid().data(), out.data()});
  for (auto& v : out.values()) v = std::max(v, 0.0);
  renormalize(out, "upsample_bicubic");
  return out;
}

std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  if (size % 2 == 0) throw ValidationError("gaussian kernel size must be odd, got " + std::to_string(size));
  if (!(sigma > 0.0)) throw ValidationError("gaussian sigma must be positive");
  const auto radius = static_cast<double>(size / 2);
  std::vector<double> taps(size);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double x = static_cast<double>(i) - radius;
    total += taps[i] = std::exp(-0.5 * x * x / (sigma * sigma));
  }
  for (auto& t : taps) t /= total;
  return taps;
}

Tensor gaussian_smooth(const Tensor& grid, std::size_t kernel_size, double sigma) {
  const std::vector<double> taps = gaussian_kernel(kernel_size, sigma);
  if (grid.rank() != 2) throw ValidationError("gaussian_smooth: expected a [H, W] grid");
  const std::size_t h = grid.extent(0), w = grid.extent(1);
  if (h <= kernel_size || w <= kernel_size)
    throw ValidationError("gaussian_smooth: grid " + shape_string(grid.shape()) + " must be larger than the kernel");
  Tensor across({h, w}), out({h, w});
  kernels::convolve({h, w, 1, taps, grid.data(), across.data()});
  kernels::convolve({h, w, 0, taps, across.data(), out.data()});
  renormalize(out, "gaussian_smooth");
  return out;
}

double peak_gain(const Tensor& grid) {
  const double peak = *std::max_element(grid.values().begin(), grid.values().end());
  return peak > 0.0 ? 1.0 / peak : 0.0;
}

RasterImage grayscale_image(const Tensor& grid) {
  if (grid.rank() != 2) throw ValidationError("grayscale_image: expected a [H, W] grid");
  RasterImage img(grid.extent(1), grid.extent(0), 1);
  const double gain = peak_gain(grid);
  for (std::size_t i = 0; i < grid.size(); ++i) img.samples[i] = quantize(255.0 * grid[i] * gain);
  return img;
}

RasterImage render_overlay(const Tensor& grid, const RasterImage& base, double gain) {
  base.validate();
  if (grid.rank() != 2 || grid.extent(0) != base.height || grid.extent(1) != base.width)
    throw ValidationError("render_overlay: map " + shape_string(grid.shape()) + " does not match a " +
                          std::to_string(base.width) + "x" + std::to_string(base.height) + " image");
  RasterImage out = base;
  for (std::size_t p = 0; p < grid.size(); ++p)
    for (std::size_t c = 0; c < base.channels; ++c) {
      const std::size_t k = p * base.channels + c;
      out.samples[k] = quantize(static_cast<double>(base.samples[k]) * grid[p] * gain);
    }
  return out;
}

RasterImage base_image(const Example& example, std::size_t width, std::size_t height) {
  const std::size_t rows = example.grid.extent(0), cols = example.grid.extent(1), d = example.grid.extent(2);
  RasterImage img(width, height, 3);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t cell = (y * rows / height) * cols + x * cols / width;
      for (std::size_t c = 0; c < 3; ++c) {
        const double f = c < d ? example.grid[cell * d + c] : 0.0;
        img.samples[(y * width + x) * 3 + c] = quantize(128.0 + 127.0 * std::tanh(f));
      }
    }
  return img;
}

std::vector<std::uint8_t> encode_image(const RasterImage& image, ImageFormat format) {
  image.validate();
  const std::size_t want = format == ImageFormat::Pgm ? 1 : 3;
  if (image.channels != want)
    throw ValidationError(std::string(format == ImageFormat::Pgm ? "PGM" : "PPM") + " needs " + std::to_string(want) +
                          " channel(s), image has " + std::to_string(image.channels));
  const std::string header = std::string(format == ImageFormat::Pgm ? "P5" : "P6") + "\n" + std::to_string(image.width) +
                             " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), image.samples.begin(), image.samples.end());
  return bytes;
}

void write_image(const RasterImage& image, const std::filesystem::path& path, ImageFormat format) {
  const auto bytes = encode_image(image, format);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

RasterImage read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || (magic != "P5" && magic != "P6") || maxval != 255)
    throw IoError(path.string() + ": not a binary 8-bit PGM/PPM file");
  in.get();
  RasterImage img(w, h, magic == "P5" ? 1 : 3);
  in.read(reinterpret_cast<char*>(img.samples.data()), static_cast<std::streamsize>(img.samples.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.samples.size())) throw IoError(path.string() + ": truncated pixel data");
  return img;
}

RenderedAttention render_attention(const AttentionMap& map, const RasterImage& base, const VizConfig& config) {
  RenderedAttention r;
  r.upsampled = upsample_bicubic(map, config.width, config.height);
  r.smoothed = gaussian_smooth(r.upsampled, config.kernel_size, config.sigma);
  r.raw = grayscale_image(r.upsampled);
  r.smooth = grayscale_image(r.smoothed);
  r.overlay = render_overlay(r.smoothed, base, config.gain.value_or(peak_gain(r.smoothed)));
  return r;
}

void write_rendered(const RenderedAttention& r, const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  write_image(r.raw, dir / (stem + ".raw.pgm"), ImageFormat::Pgm);
  write_image(r.smooth, dir / (stem + ".smoothed.pgm"), ImageFormat::Pgm);
  write_image(r.overlay, dir / (stem + ".overlay.ppm"), ImageFormat::Ppm);
}

}  // namespace ucam
