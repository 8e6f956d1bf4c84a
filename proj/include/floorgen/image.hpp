#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "floorgen/tensor.hpp"

namespace floorgen {

/// H x W x C raster, interleaved (HWC). Model space is [-1, 1]; storage
/// space is [0, 255].
struct ImageGrid {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;

  ImageGrid() = default;
  ImageGrid(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c = 0) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c = 0) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool same_shape(const ImageGrid& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  std::size_t size() const { return pixels.size(); }
};

/// [0,255] -> [-1,1]
ImageGrid to_model_space(const ImageGrid& storage);
/// [-1,1] -> [0,255], rounded and clamped.
ImageGrid to_storage_space(const ImageGrid& model);

/// Stacks images into an NCHW tensor. All images must share a shape.
ag::Tensor to_tensor(std::span<const ImageGrid> images);
ag::Tensor to_tensor(const ImageGrid& image);
/// Splits an NCHW tensor back into images.
std::vector<ImageGrid> from_tensor(const ag::Tensor& t);

/// Rec. 601 luma of a storage- or unit-range image; single-channel input is
/// returned as is.
ImageGrid luminance(const ImageGrid& img);
ImageGrid resize_nearest(const ImageGrid& img, int height, int width);

/// Silhouette of a plan in [0,1] units: luminance < threshold.
std::vector<unsigned char> silhouette(const ImageGrid& unit_image, double threshold = 0.9);
/// Intersection over union of two binary masks; 1 when both are empty.
double iou(std::span<const unsigned char> a, std::span<const unsigned char> b);

/// 8-bit PNG codec. Gray (1), RGB (3) supported; values in [0,255].
std::vector<std::uint8_t> encode_png(const ImageGrid& storage);
ImageGrid decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const ImageGrid& storage);
ImageGrid read_png(const std::filesystem::path& path);

}  // namespace floorgen
