#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vqr/tensor.hpp"

namespace vqr {

/// 8-bit raster, row-major, c interleaved channels (1 = gray, 3 = RGB).
struct ImageU8 {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> pix;

  ImageU8() = default;
  ImageU8(int h_, int w_, int c_) : h(h_), w(w_), c(c_), pix(size_t(h_) * w_ * c_, 0) {}
  uint8_t& at(int y, int x, int ch) { return pix[(size_t(y) * w + x) * c + ch]; }
  uint8_t at(int y, int x, int ch) const { return pix[(size_t(y) * w + x) * c + ch]; }
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// float [0,1] HWC <-> u8 conversions (round-to-nearest on the way down).
Tensor to_float(const ImageU8& img);
ImageU8 to_u8(const Tensor& t);

/// Minimal PNG codec (8-bit gray / RGB, non-interlaced) over zlib.
void save_png(const std::string& path, const ImageU8& img);
ImageU8 load_png(const std::string& path);
std::vector<uint8_t> encode_png(const ImageU8& img);
ImageU8 decode_png(const std::vector<uint8_t>& bytes);

/// Raw float tensor container: magic "VQT1", u32 rank, u32 dims, f32 LE data.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

/// Bilinear resample of (H,W,C) to (oh,ow); half-pixel centers, edge clamp.
Tensor resize_bilinear(const Tensor& img, int oh, int ow);

/// Separable Gaussian blur, reflect padding; taps from gaussian_kernel_1d.
Tensor gaussian_blur(const Tensor& img, double sigma);

/// Normalized 1-D Gaussian taps of radius ceil(3*sigma).
std::vector<double> gaussian_kernel_1d(double sigma);

/// Horizontal concatenation of equally sized images with a 2px separator.
ImageU8 hstack(const std::vector<ImageU8>& panels);

/// FNV-1a 64-bit over arbitrary bytes; used for corpus/checkpoint hashes.
uint64_t fnv1a64(const uint8_t* data, size_t len);
uint64_t file_hash(const std::string& path);

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace vqr
