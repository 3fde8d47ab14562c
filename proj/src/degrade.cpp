#include "vqr/degrade.hpp"

#include <algorithm>
#include <cmath>

namespace vqr {

DegradationParams sample_params(Rng& rng) {
  DegradationParams p;
  p.sigma = rng.uniform(1.0, 15.0);
  p.r_ds = rng.uniform(1.0, 30.0);
  p.delta = rng.uniform(0.0, 20.0);
  p.q = int(rng.uniform_int(30, 90));
  p.seed = rng.next_u64();
  return p;
}

Tensor gaussian_kernel(double sigma) {
  const auto k1 = gaussian_kernel_1d(sigma);  // normalized, so the outer
  const int side = int(k1.size());            // product is normalized too
  Tensor k(Shape{side, side});
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      k.data()[int64_t(y) * side + x] = float(k1[size_t(y)] * k1[size_t(x)]);
  return k;
}

// ---------------------------------------------------------------------------
// JPEG proxy
// ---------------------------------------------------------------------------

namespace {

// Annex-K base quantization tables.
constexpr int kLumaQ[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                            14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                            18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                            49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr int kChromaQ[64] = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                              24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                              99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                              99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

struct Dct8 {
  double basis[8][8];  // basis[u][x] = c(u) cos((2x+1)u pi / 16)
  Dct8() {
    for (int u = 0; u < 8; ++u) {
      const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x)
        basis[u][x] = cu * std::cos((2.0 * x + 1.0) * u * 3.14159265358979323846 / 16.0);
    }
  }
};

const Dct8& dct8() {
  static const Dct8 d;
  return d;
}

void scaled_table(const int* base, int quality, double* out) {
  const int s = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  for (int i = 0; i < 64; ++i) {
    int v = (base[i] * s + 50) / 100;
    v = std::min(255, std::max(1, v));
    out[i] = double(v);
  }
}

// quantize/dequantize one padded plane of 8x8 blocks in place
void jpeg_plane(std::vector<double>& plane, int ph, int pw, const double* table) {
  const auto& d = dct8();
  double blk[64], coef[64];
  for (int by = 0; by < ph; by += 8)
    for (int bx = 0; bx < pw; bx += 8) {
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) blk[y * 8 + x] = plane[size_t(by + y) * pw + (bx + x)] - 128.0;
      // separable forward DCT
      double tmp[64];
      for (int y = 0; y < 8; ++y)
        for (int u = 0; u < 8; ++u) {
          double acc = 0;
          for (int x = 0; x < 8; ++x) acc += blk[y * 8 + x] * d.basis[u][x];
          tmp[y * 8 + u] = acc;
        }
      for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v) {
          double acc = 0;
          for (int y = 0; y < 8; ++y) acc += tmp[y * 8 + v] * d.basis[u][y];
          coef[u * 8 + v] = acc;
        }
      // quantize / dequantize
      for (int i = 0; i < 64; ++i) coef[i] = std::nearbyint(coef[i] / table[i]) * table[i];
      // inverse DCT
      for (int u = 0; u < 8; ++u)
        for (int x = 0; x < 8; ++x) {
          double acc = 0;
          for (int v = 0; v < 8; ++v) acc += coef[u * 8 + v] * d.basis[v][x];
          tmp[u * 8 + x] = acc;
        }
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          double acc = 0;
          for (int u = 0; u < 8; ++u) acc += tmp[u * 8 + x] * d.basis[u][y];
          plane[size_t(by + y) * pw + (bx + x)] = acc + 128.0;
        }
    }
}

std::vector<double> pad_to_8(const std::vector<double>& src, int h, int w, int& ph, int& pw) {
  ph = (h + 7) / 8 * 8;
  pw = (w + 7) / 8 * 8;
  std::vector<double> out(size_t(ph) * pw);
  for (int y = 0; y < ph; ++y) {
    const int sy = std::min(y, h - 1);
    for (int x = 0; x < pw; ++x) out[size_t(y) * pw + x] = src[size_t(sy) * w + std::min(x, w - 1)];
  }
  return out;
}

}  // namespace

Tensor jpeg_proxy(const Tensor& rgb, int quality) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3)
    throw ShapeError("jpeg_proxy: need (H,W,3), got " + shape_str(rgb.shape()));
  if (quality < 1 || quality > 100) throw ShapeError("jpeg_proxy: quality out of [1,100]");
  const int h = rgb.dim(0), w = rgb.dim(1);

  std::vector<double> yp(size_t(h) * w), cb(size_t(h) * w), cr(size_t(h) * w);
  for (int i = 0; i < h * w; ++i) {
    const double r = double(rgb.data()[i * 3 + 0]) * 255.0;
    const double g = double(rgb.data()[i * 3 + 1]) * 255.0;
    const double b = double(rgb.data()[i * 3 + 2]) * 255.0;
    yp[size_t(i)] = 0.299 * r + 0.587 * g + 0.114 * b;
    cb[size_t(i)] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    cr[size_t(i)] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
  }

  // 4:2:0 chroma: average 2x2 neighbourhoods
  const int ch = (h + 1) / 2, cw = (w + 1) / 2;
  std::vector<double> cbs(size_t(ch) * cw), crs(size_t(ch) * cw);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x) {
      double sb = 0, sr = 0;
      int cnt = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int yy = 2 * y + dy, xx = 2 * x + dx;
          if (yy >= h || xx >= w) continue;
          sb += cb[size_t(yy) * w + xx];
          sr += cr[size_t(yy) * w + xx];
          ++cnt;
        }
      cbs[size_t(y) * cw + x] = sb / cnt;
      crs[size_t(y) * cw + x] = sr / cnt;
    }

  double lq[64], cq[64];
  scaled_table(kLumaQ, quality, lq);
  scaled_table(kChromaQ, quality, cq);

  int ph, pw;
  auto ypad = pad_to_8(yp, h, w, ph, pw);
  jpeg_plane(ypad, ph, pw, lq);
  int cph, cpw;
  auto cbpad = pad_to_8(cbs, ch, cw, cph, cpw);
  auto crpad = pad_to_8(crs, ch, cw, cph, cpw);
  jpeg_plane(cbpad, cph, cpw, cq);
  jpeg_plane(crpad, cph, cpw, cq);

  Tensor out(Shape{h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double yy = ypad[size_t(y) * pw + x];
      const double bb = cbpad[size_t(y / 2) * cpw + x / 2] - 128.0;  // replicate chroma
      const double rr = crpad[size_t(y / 2) * cpw + x / 2] - 128.0;
      const double r = yy + 1.402 * rr;
      const double g = yy - 0.344136 * bb - 0.714136 * rr;
      const double b = yy + 1.772 * bb;
      float* o = out.data() + (int64_t(y) * w + x) * 3;
      o[0] = float(r / 255.0);
      o[1] = float(g / 255.0);
      o[2] = float(b / 255.0);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Full degradation
// ---------------------------------------------------------------------------

Tensor degrade(const Tensor& hq, const DegradationParams& p, bool check_range) {
  if (hq.rank() != 3 || hq.dim(2) != 3)
    throw ShapeError("degrade: need (H,W,3), got " + shape_str(hq.shape()));
  if (check_range) {
    if (p.sigma < 1.0 || p.sigma > 15.0)
      throw ShapeError("degrade: sigma " + std::to_string(p.sigma) + " outside [1,15]");
    if (p.r_ds < 1.0 || p.r_ds > 30.0)
      throw ShapeError("degrade: r " + std::to_string(p.r_ds) + " outside [1,30]");
    if (p.delta < 0.0 || p.delta > 20.0)
      throw ShapeError("degrade: delta " + std::to_string(p.delta) + " outside [0,20]");
    if (p.q < 30 || p.q > 90)
      throw ShapeError("degrade: q " + std::to_string(p.q) + " outside [30,90]");
  }
  const int h = hq.dim(0), w = hq.dim(1);

  Tensor x = gaussian_blur(hq, p.sigma);

  const int dh = std::max(1, int(std::lround(h / p.r_ds)));
  const int dw = std::max(1, int(std::lround(w / p.r_ds)));
  if (dh != h || dw != w) x = resize_bilinear(x, dh, dw);

  if (p.delta > 0.0) {
    Rng noise(p.seed);
    const float std_unit = float(p.delta / 255.0);
    for (int64_t i = 0; i < x.size(); ++i) x.data()[i] += noise.normal_f(0.f, std_unit);
  }

  x = jpeg_proxy(x, p.q);

  if (dh != h || dw != w) x = resize_bilinear(x, h, w);

  x.array() = x.array().min(1.f).max(0.f);
  return x;
}

// ---------------------------------------------------------------------------
// Polyline masks
// ---------------------------------------------------------------------------

Tensor polyline_mask(const MaskSpec& spec, int h, int w) {
  Tensor mask(Shape{h, w, 1});
  if (spec.vertices.size() < 2) return mask;  // zero-length polyline: empty
  const float half = spec.stroke_width * 0.5f;
  for (size_t i = 0; i + 1 < spec.vertices.size(); ++i) {
    const auto [ax, ay] = spec.vertices[i];
    const auto [bx, by] = spec.vertices[i + 1];
    const int y0 = std::max(0, int(std::min(ay, by) - half - 1));
    const int y1 = std::min(h - 1, int(std::max(ay, by) + half + 1));
    const int x0 = std::max(0, int(std::min(ax, bx) - half - 1));
    const int x1 = std::min(w - 1, int(std::max(ax, bx) + half + 1));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const float vx = bx - ax, vy = by - ay;
        const float wx = float(x) - ax, wy = float(y) - ay;
        const float vv = vx * vx + vy * vy;
        float t = vv > 0.f ? (wx * vx + wy * vy) / vv : 0.f;
        t = std::min(1.f, std::max(0.f, t));
        const float dx = wx - t * vx, dy = wy - t * vy;
        if (dx * dx + dy * dy <= half * half) mask.data()[int64_t(y) * w + x] = 1.f;
      }
  }
  return mask;
}

MaskSpec random_mask_spec(Rng& rng, int h, int w, double lo_ratio, double hi_ratio) {
  // grow strokes until the rasterized area lands in the requested band
  MaskSpec spec;
  spec.seed = rng.next_u64();
  Rng local(spec.seed);
  spec.stroke_width = float(local.uniform(0.10, 0.16) * std::min(h, w));
  float x = float(local.uniform(0.25, 0.75) * w);
  float y = float(local.uniform(0.25, 0.75) * h);
  spec.vertices.push_back({x, y});
  for (int guard = 0; guard < 400; ++guard) {
    const float step = float(local.uniform(0.18, 0.42) * std::min(h, w));
    const float dirx = float(local.uniform(-1.0, 1.0));
    const float diry = float(local.uniform(-1.0, 1.0));
    const float norm = std::sqrt(dirx * dirx + diry * diry) + 1e-6f;
    x = std::min(float(w - 1), std::max(0.f, x + step * dirx / norm));
    y = std::min(float(h - 1), std::max(0.f, y + step * diry / norm));
    spec.vertices.push_back({x, y});
    const double ratio = mask_ratio(polyline_mask(spec, h, w));
    if (ratio >= hi_ratio) {
      // overshoot: widen tolerance by retrying with a thinner stroke
      if (ratio <= hi_ratio * 1.05 || spec.vertices.size() <= 2) break;
      spec.vertices.pop_back();
      break;
    }
    if (ratio >= lo_ratio && local.uniform() < 0.5) break;
  }
  return spec;
}

double mask_ratio(const Tensor& mask) {
  double s = 0;
  for (int64_t i = 0; i < mask.size(); ++i) s += mask.data()[i] > 0.5f ? 1.0 : 0.0;
  return s / double(mask.size());
}

Tensor apply_mask(const Tensor& img, const Tensor& mask) {
  if (img.rank() != 3 || mask.rank() != 3 || img.dim(0) != mask.dim(0) ||
      img.dim(1) != mask.dim(1) || mask.dim(2) != 1)
    throw ShapeError("apply_mask: image " + shape_str(img.shape()) + " vs mask " +
                     shape_str(mask.shape()));
  Tensor out = img.clone();
  const int c = img.dim(2);
  for (int64_t p = 0; p < mask.size(); ++p)
    if (mask.data()[p] > 0.5f)
      for (int ch = 0; ch < c; ++ch) out.data()[p * c + ch] = 0.f;
  return out;
}

}  // namespace vqr
