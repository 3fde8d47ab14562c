#include "vqr/faces.hpp"

#include <cmath>
#include <sstream>

namespace vqr {

namespace {

struct Rgb {
  float r, g, b;
};

constexpr Rgb kSkin[6] = {{0.98f, 0.86f, 0.74f}, {0.94f, 0.78f, 0.62f}, {0.87f, 0.68f, 0.52f},
                          {0.76f, 0.56f, 0.42f}, {0.62f, 0.44f, 0.32f}, {0.45f, 0.31f, 0.22f}};
constexpr Rgb kHair[6] = {{0.12f, 0.10f, 0.08f}, {0.30f, 0.20f, 0.10f}, {0.55f, 0.38f, 0.18f},
                          {0.80f, 0.66f, 0.35f}, {0.55f, 0.12f, 0.08f}, {0.75f, 0.75f, 0.78f}};
constexpr Rgb kIris[4] = {{0.25f, 0.15f, 0.08f}, {0.10f, 0.30f, 0.55f}, {0.12f, 0.40f, 0.22f},
                          {0.40f, 0.32f, 0.20f}};
constexpr Rgb kBg[8] = {{0.92f, 0.92f, 0.95f}, {0.85f, 0.90f, 0.85f}, {0.90f, 0.85f, 0.80f},
                        {0.80f, 0.85f, 0.92f}, {0.95f, 0.90f, 0.80f}, {0.84f, 0.80f, 0.90f},
                        {0.78f, 0.88f, 0.90f}, {0.93f, 0.83f, 0.86f}};

struct Canvas {
  int s;
  std::vector<float> px;  // RGB float
  explicit Canvas(int size) : s(size), px(size_t(size) * size * 3, 0.f) {}
  void blend(int y, int x, const Rgb& c, float alpha) {
    if (alpha <= 0.f) return;
    float* p = px.data() + (size_t(y) * s + x) * 3;
    p[0] += (c.r - p[0]) * alpha;
    p[1] += (c.g - p[1]) * alpha;
    p[2] += (c.b - p[2]) * alpha;
  }
};

float coverage(float dist_px) {
  // 1px anti-aliasing band around the zero crossing
  const float a = 0.5f - dist_px;
  return a <= 0.f ? 0.f : (a >= 1.f ? 1.f : a);
}

// scaled-space pseudo distance; good enough for AA at these sizes
float ellipse_dist(float x, float y, float cx, float cy, float rx, float ry) {
  const float dx = (x - cx) / rx, dy = (y - cy) / ry;
  const float r = std::sqrt(dx * dx + dy * dy);
  return (r - 1.f) * std::min(rx, ry);
}

float segment_dist(float x, float y, float ax, float ay, float bx, float by) {
  const float vx = bx - ax, vy = by - ay;
  const float wx = x - ax, wy = y - ay;
  const float vv = vx * vx + vy * vy;
  float t = vv > 0.f ? (wx * vx + wy * vy) / vv : 0.f;
  t = std::min(1.f, std::max(0.f, t));
  const float dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

void fill_ellipse(Canvas& c, float cx, float cy, float rx, float ry, const Rgb& col) {
  const int y0 = std::max(0, int(cy - ry - 2)), y1 = std::min(c.s - 1, int(cy + ry + 2));
  const int x0 = std::max(0, int(cx - rx - 2)), x1 = std::min(c.s - 1, int(cx + rx + 2));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      c.blend(y, x, col, coverage(ellipse_dist(float(x), float(y), cx, cy, rx, ry)));
}

void stroke_segment(Canvas& c, float ax, float ay, float bx, float by, float width,
                    const Rgb& col) {
  const int y0 = std::max(0, int(std::min(ay, by) - width - 2));
  const int y1 = std::min(c.s - 1, int(std::max(ay, by) + width + 2));
  const int x0 = std::max(0, int(std::min(ax, bx) - width - 2));
  const int x1 = std::min(c.s - 1, int(std::max(ax, bx) + width + 2));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      c.blend(y, x, col,
              coverage(segment_dist(float(x), float(y), ax, ay, bx, by) - width * 0.5f));
}

void stroke_ring(Canvas& c, float cx, float cy, float radius, float width, const Rgb& col) {
  const float reach = radius + width + 2;
  const int y0 = std::max(0, int(cy - reach)), y1 = std::min(c.s - 1, int(cy + reach));
  const int x0 = std::max(0, int(cx - reach)), x1 = std::min(c.s - 1, int(cx + reach));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const float dx = float(x) - cx, dy = float(y) - cy;
      const float d = std::abs(std::sqrt(dx * dx + dy * dy) - radius) - width * 0.5f;
      c.blend(y, x, col, coverage(d));
    }
}

}  // namespace

FaceSpec sample_face(Rng& rng) {
  FaceSpec s;
  s.seed = rng.next_u64();
  s.skin_tone = int(rng.uniform_int(0, 5));
  s.hair_tone = int(rng.uniform_int(0, 5));
  s.iris_tone = int(rng.uniform_int(0, 3));
  s.bg_tone = int(rng.uniform_int(0, 7));
  s.face_rx = rng.uniform_f(0.26f, 0.34f);
  s.face_ry = rng.uniform_f(0.33f, 0.42f);
  s.eye_spacing = rng.uniform_f(0.38f, 0.55f);
  s.eye_size = rng.uniform_f(0.045f, 0.07f);
  s.brow_angle = rng.uniform_f(-0.35f, 0.35f);
  s.mouth_curve = rng.uniform_f(-1.f, 1.f);
  s.mouth_width = rng.uniform_f(0.10f, 0.17f);
  s.hair_fringe = rng.uniform_f(0.12f, 0.40f);
  s.glasses = rng.uniform() < 0.35;
  return s;
}

ImageU8 render_face(const FaceSpec& spec, int size) {
  const float S = float(size);
  Canvas c(size);

  const Rgb bg = kBg[spec.bg_tone];
  for (size_t i = 0; i < c.px.size(); i += 3) {
    c.px[i] = bg.r;
    c.px[i + 1] = bg.g;
    c.px[i + 2] = bg.b;
  }

  const float cx = 0.5f * S, cy = 0.54f * S;
  const float rx = spec.face_rx * S, ry = spec.face_ry * S;
  const Rgb skin = kSkin[spec.skin_tone];
  const Rgb hair = kHair[spec.hair_tone];

  // hair mass behind the face, then the face, then the fringe over the brow line
  fill_ellipse(c, cx, cy - 0.10f * ry, rx + 0.08f * S, ry + 0.06f * S, hair);
  fill_ellipse(c, cx, cy, rx, ry, skin);
  {
    const float fringe_y = cy - ry + spec.hair_fringe * ry;
    const int yl = std::min(c.s - 1, std::max(0, int(fringe_y)));
    for (int y = 0; y <= yl; ++y)
      for (int x = 0; x < c.s; ++x) {
        const float d = ellipse_dist(float(x), float(y), cx, cy, rx, ry);
        float a = coverage(d);
        a *= coverage(float(y) - fringe_y);
        c.blend(y, x, hair, a);
      }
  }

  // eyes
  const float eye_y = cy - 0.16f * ry * 2.f;
  const float eye_dx = spec.eye_spacing * rx;
  const float es = spec.eye_size * S;
  const Rgb white{0.97f, 0.97f, 0.97f};
  const Rgb iris = kIris[spec.iris_tone];
  const Rgb black{0.05f, 0.05f, 0.06f};
  for (int side = -1; side <= 1; side += 2) {
    const float ex = cx + float(side) * eye_dx;
    fill_ellipse(c, ex, eye_y, es, 0.62f * es, white);
    fill_ellipse(c, ex, eye_y, 0.52f * es, 0.52f * es, iris);
    fill_ellipse(c, ex, eye_y, 0.22f * es, 0.22f * es, black);
  }

  // brows
  const Rgb brow = hair;
  for (int side = -1; side <= 1; side += 2) {
    const float ex = cx + float(side) * eye_dx;
    const float bw = 1.15f * es;
    const float by = eye_y - 1.5f * es;
    stroke_segment(c, ex - bw, by + float(side) * spec.brow_angle * bw, ex + bw,
                   by - float(side) * spec.brow_angle * bw, 0.018f * S, brow);
  }

  // nose
  const Rgb nose{skin.r * 0.82f, skin.g * 0.78f, skin.b * 0.75f};
  stroke_segment(c, cx, cy - 0.02f * S, cx, cy + 0.10f * S, 0.014f * S, nose);

  // mouth: quadratic arc flattened to short segments
  {
    const Rgb lip{0.72f, 0.25f, 0.28f};
    const float mw = spec.mouth_width * S;
    const float my = cy + 0.52f * ry;
    const float bend = spec.mouth_curve * 0.05f * S;
    const int segs = 10;
    float px = cx - mw, py = my - bend * 0.f;
    for (int i = 1; i <= segs; ++i) {
      const float t = float(i) / segs;
      const float qx = cx - mw + 2.f * mw * t;
      const float qy = my + bend * (4.f * t * (1.f - t)) - bend * 0.0f;
      stroke_segment(c, px, py, qx, qy, 0.020f * S, lip);
      px = qx;
      py = qy;
    }
  }

  if (spec.glasses) {
    const Rgb frame{0.15f, 0.15f, 0.18f};
    const float gr = 1.45f * es;
    for (int side = -1; side <= 1; side += 2)
      stroke_ring(c, cx + float(side) * eye_dx, eye_y, gr, 0.016f * S, frame);
    stroke_segment(c, cx - eye_dx + gr, eye_y, cx + eye_dx - gr, eye_y, 0.014f * S, frame);
  }

  ImageU8 out(size, size, 3);
  for (size_t i = 0; i < c.px.size(); ++i) {
    const float v = std::min(1.f, std::max(0.f, c.px[i]));
    out.pix[i] = uint8_t(std::lround(v * 255.f));
  }
  return out;
}

PixelBox glasses_box(const FaceSpec& spec, int size) {
  const float S = float(size);
  const float cx = 0.5f * S, cy = 0.54f * S;
  const float ry = spec.face_ry * S;
  const float eye_y = cy - 0.16f * ry * 2.f;
  const float eye_dx = spec.eye_spacing * spec.face_rx * S;
  const float reach = 1.45f * spec.eye_size * S + 0.016f * S + 3.f;
  PixelBox b;
  b.x0 = std::max(0, int(cx - eye_dx - reach));
  b.x1 = std::min(size, int(cx + eye_dx + reach) + 1);
  b.y0 = std::max(0, int(eye_y - reach));
  b.y1 = std::min(size, int(eye_y + reach) + 1);
  return b;
}

Dataset gen_dataset(int n, uint64_t seed, int size) {
  if (n < 1) throw ShapeError("gen_dataset: n must be >= 1");
  Dataset ds;
  Rng rng(seed);
  ds.specs.reserve(size_t(n));
  ds.images.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    ds.specs.push_back(sample_face(rng));
    ds.images.push_back(render_face(ds.specs.back(), size));
  }
  ds.train_count = n - n / 10;
  return ds;
}

std::string spec_manifest_line(int index, const std::string& filename, const FaceSpec& s) {
  std::ostringstream os;
  os << index << " " << filename << " " << s.seed << " " << s.skin_tone << " " << s.hair_tone
     << " " << s.iris_tone << " " << s.bg_tone << " " << s.face_rx << " " << s.face_ry << " "
     << s.eye_spacing << " " << s.eye_size << " " << s.brow_angle << " " << s.mouth_curve << " "
     << s.mouth_width << " " << s.hair_fringe << " " << int(s.glasses);
  return os.str();
}

}  // namespace vqr
