#include "floorgen/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace floorgen {

ImageGrid to_model_space(const ImageGrid& storage) {
  ImageGrid out = storage;
  for (double& v : out.pixels) v = v / 127.5 - 1.0;
  return out;
}

ImageGrid to_storage_space(const ImageGrid& model) {
  ImageGrid out = model;
  for (double& v : out.pixels) v = std::clamp(std::round((v + 1.0) * 127.5), 0.0, 255.0);
  return out;
}

ag::Tensor to_tensor(std::span<const ImageGrid> images) {
  if (images.empty()) throw ValidationError("to_tensor: no images");
  const ImageGrid& first = images.front();
  const int n = static_cast<int>(images.size()), c = first.channels, h = first.height, w = first.width;
  std::vector<double> v(static_cast<std::size_t>(n) * c * h * w);
  for (int i = 0; i < n; ++i) {
    if (!images[i].same_shape(first)) throw ValidationError("to_tensor: mixed image shapes");
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x] = images[i].at(y, x, ch);
  }
  return ag::Tensor::from({n, c, h, w}, std::move(v));
}

ag::Tensor to_tensor(const ImageGrid& image) { return to_tensor(std::span<const ImageGrid>(&image, 1)); }

std::vector<ImageGrid> from_tensor(const ag::Tensor& t) {
  if (t.shape().size() != 4) throw ValidationError("from_tensor: expected NCHW");
  const int n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  std::vector<ImageGrid> out;
  for (int i = 0; i < n; ++i) {
    ImageGrid img(h, w, c);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(y, x, ch) = t.data()[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
    out.push_back(std::move(img));
  }
  return out;
}

ImageGrid luminance(const ImageGrid& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw ValidationError("luminance: expected 1 or 3 channels");
  ImageGrid out(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.at(y, x) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  return out;
}

ImageGrid resize_nearest(const ImageGrid& img, int height, int width) {
  ImageGrid out(height, width, img.channels);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(img.height - 1, static_cast<int>((y + 0.5) * img.height / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(img.width - 1, static_cast<int>((x + 0.5) * img.width / width));
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

std::vector<unsigned char> silhouette(const ImageGrid& unit_image, double threshold) {
  const ImageGrid lum = luminance(unit_image);
  std::vector<unsigned char> m(lum.pixels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = lum.pixels[i] < threshold ? 1 : 0;
  return m;
}

double iou(std::span<const unsigned char> a, std::span<const unsigned char> b) {
  if (a.size() != b.size()) throw ValidationError("iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

int color_type_for(int channels) {
  switch (channels) {
    case 1: return PNG_COLOR_TYPE_GRAY;
    case 3: return PNG_COLOR_TYPE_RGB;
    default: throw ValidationError("png: unsupported channel count " + std::to_string(channels));
  }
}

struct ReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

struct PngError {
  std::string message;
};

void on_png_error(png_structp png, png_const_charp msg) {
  static_cast<PngError*>(png_get_error_ptr(png))->message = msg;
  png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

void append_bytes(png_structp p, png_bytep data, png_size_t len) {
  auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
  v->insert(v->end(), data, data + len);
}

void read_bytes(png_structp p, png_bytep data, png_size_t len) {
  auto* c = static_cast<ReadCursor*>(png_get_io_ptr(p));
  if (c->pos + len > c->bytes.size()) png_error(p, "truncated stream");
  std::memcpy(data, c->bytes.data() + c->pos, len);
  c->pos += len;
}

}  // namespace

// libpng reports errors by longjmp; every object with a destructor is
// constructed before setjmp so nothing is skipped on the error path.
std::vector<std::uint8_t> encode_png(const ImageGrid& storage) {
  const int color_type = color_type_for(storage.channels);
  std::vector<std::uint8_t> out;
  std::vector<png_byte> row(static_cast<std::size_t>(storage.width) * storage.channels);
  PngError err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw LoadError("png: " + err.message);
  }
  png_set_write_fn(png, &out, append_bytes, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(storage.width), static_cast<png_uint_32>(storage.height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed codec settings so identical pixels give identical bytes.
  png_set_compression_level(png, 9);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_write_info(png, info);
  for (int y = 0; y < storage.height; ++y) {
    for (std::size_t i = 0; i < row.size(); ++i)
      row[i] = static_cast<png_byte>(std::clamp(std::lround(storage.pixels[y * row.size() + i]), 0L, 255L));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

ImageGrid decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw LoadError("png: not a PNG stream");
  ReadCursor cur{bytes, 0};
  ImageGrid img;
  std::vector<png_byte> row;
  PngError err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("png: " + err.message);
  }
  png_set_read_fn(png, &cur, read_bytes);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int ct = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (ct == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (ct & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) png_error(png, "unsupported channel layout");
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int width = static_cast<int>(png_get_image_width(png, info));
  img.height = height;
  img.width = width;
  img.channels = channels;
  img.pixels.resize(static_cast<std::size_t>(height) * width * channels);
  row.resize(png_get_rowbytes(png, info));
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int i = 0; i < width * channels; ++i) img.pixels[static_cast<std::size_t>(y) * width * channels + i] = row[i];
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const ImageGrid& storage) {
  const auto bytes = encode_png(storage);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

ImageGrid read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

}  // namespace floorgen
