#pragma once

#include <utility>
#include <vector>

#include "vqr/image.hpp"
#include "vqr/rng.hpp"
#include "vqr/tensor.hpp"

namespace vqr {

/// One sampled degradation: blur sigma, downsample scale, noise std on the
/// 0-255 scale, JPEG quality, noise seed.
struct DegradationParams {
  double sigma = 1.0;   // [1, 15]
  double r_ds = 1.0;    // [1, 30]
  double delta = 0.0;   // [0, 20]
  int q = 90;           // [30, 90]
  uint64_t seed = 0;
};

/// Uniform draw over the training ranges (continuous sigma/r/delta, integer q).
DegradationParams sample_params(Rng& rng);

/// Square 2-D Gaussian kernel of side 2*ceil(3*sigma)+1, normalized to sum 1.
Tensor gaussian_kernel(double sigma);

/// blur -> bilinear downsample by r_ds -> Gaussian noise (delta/255) ->
/// JPEG proxy at quality q -> bilinear upsample back -> clamp to [0,1].
/// Deterministic given params.seed. check_range=false lifts the interval
/// checks for stress tests.
Tensor degrade(const Tensor& hq, const DegradationParams& p, bool check_range = true);

/// In-process JPEG stand-in: 4:2:0 chroma subsampling, 8x8 block DCT with the
/// standard quantization tables scaled by the usual quality mapping. Not
/// bit-compatible with external codecs, and not meant to be.
Tensor jpeg_proxy(const Tensor& rgb, int quality);

struct MaskSpec {
  std::vector<std::pair<float, float>> vertices;  // polyline in pixel coords
  float stroke_width = 8.f;
  uint64_t seed = 0;
};

/// Rasterize the stroked polyline: 1 under the stroke, 0 elsewhere. (h,w,1).
Tensor polyline_mask(const MaskSpec& spec, int h, int w);

/// Random-walk polyline whose stroked area lands inside [lo, hi] of the
/// image; deterministic given the rng state.
MaskSpec random_mask_spec(Rng& rng, int h, int w, double lo_ratio, double hi_ratio);

double mask_ratio(const Tensor& mask);

/// Inpainting degradation: pixels under the mask are zeroed, nothing else.
Tensor apply_mask(const Tensor& img, const Tensor& mask);

}  // namespace vqr
