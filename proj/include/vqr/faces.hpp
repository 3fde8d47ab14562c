#pragma once

#include <string>
#include <vector>

#include "vqr/image.hpp"
#include "vqr/rng.hpp"

namespace vqr {

/// Parameters of one procedural face. Rendering is a pure function of the
/// fields: equal specs give pixel-identical images.
struct FaceSpec {
  uint64_t seed = 0;      // identity tag carried into the manifest
  int skin_tone = 0;      // 0..5
  int hair_tone = 0;      // 0..5
  int iris_tone = 0;      // 0..3
  int bg_tone = 0;        // 0..7
  float face_rx = 0.30f;  // fractions of the image size
  float face_ry = 0.37f;
  float eye_spacing = 0.45f;  // of face_rx
  float eye_size = 0.055f;
  float brow_angle = 0.f;  // slope, left brow mirrored
  float mouth_curve = 0.f;  // [-1,1], smile positive
  float mouth_width = 0.14f;
  float hair_fringe = 0.25f;  // of face_ry
  bool glasses = false;
};

FaceSpec sample_face(Rng& rng);

/// Anti-aliased parametric face at size x size (RGB).
ImageU8 render_face(const FaceSpec& spec, int size);

/// Axis-aligned box (inclusive-exclusive) that glasses rendering may touch.
struct PixelBox {
  int x0, y0, x1, y1;
};
PixelBox glasses_box(const FaceSpec& spec, int size);

struct Dataset {
  std::vector<FaceSpec> specs;
  std::vector<ImageU8> images;
  int train_count = 0;  // first train_count entries; the rest are validation
};

/// Deterministic corpus: n faces from the seed, split train/val 90/10 by
/// index (val = n/10 last entries).
Dataset gen_dataset(int n, uint64_t seed, int size);

std::string spec_manifest_line(int index, const std::string& filename, const FaceSpec& s);

}  // namespace vqr
