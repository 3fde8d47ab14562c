#include "vqr/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace vqr {

Tensor to_float(const ImageU8& img) {
  Tensor t(Shape{img.h, img.w, img.c});
  for (size_t i = 0; i < img.pix.size(); ++i) t.data()[i] = float(img.pix[i]) / 255.f;
  return t;
}

ImageU8 to_u8(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("to_u8: need (H,W,C), got " + shape_str(t.shape()));
  ImageU8 img(t.dim(0), t.dim(1), t.dim(2));
  for (size_t i = 0; i < img.pix.size(); ++i) {
    const float v = std::min(1.f, std::max(0.f, t.data()[i]));
    img.pix[i] = uint8_t(std::lround(v * 255.f));
  }
  return img;
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

uint32_t get_u32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | p[3];
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& payload) {
  put_u32(out, uint32_t(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc =
      uint32_t(crc32(0, out.data() + start, uInt(out.size() - start)));
  put_u32(out, crc);
}

const uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

std::vector<uint8_t> encode_png(const ImageU8& img) {
  if (img.c != 1 && img.c != 3) throw IoError("png: only gray or RGB images supported");
  if (img.h <= 0 || img.w <= 0) throw IoError("png: empty image");

  std::vector<uint8_t> raw;
  raw.reserve(size_t(img.h) * (size_t(img.w) * img.c + 1));
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);  // filter: none
    const uint8_t* row = img.pix.data() + size_t(y) * img.w * img.c;
    raw.insert(raw.end(), row, row + size_t(img.w) * img.c);
  }
  uLongf zlen = compressBound(uLong(raw.size()));
  std::vector<uint8_t> zdata(zlen);
  if (compress2(zdata.data(), &zlen, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw IoError("png: deflate failed");
  zdata.resize(zlen);

  std::vector<uint8_t> out(kPngSig, kPngSig + 8);
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, uint32_t(img.w));
  put_u32(ihdr, uint32_t(img.h));
  ihdr.push_back(8);                          // bit depth
  ihdr.push_back(img.c == 3 ? 2 : 0);         // color type
  ihdr.push_back(0);                          // compression
  ihdr.push_back(0);                          // filter method
  ihdr.push_back(0);                          // no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", zdata);
  put_chunk(out, "IEND", {});
  return out;
}

ImageU8 decode_png(const std::vector<uint8_t>& bytes) {
  auto fail = [&](const std::string& what, size_t off) {
    throw IoError("png: " + what + " at offset " + std::to_string(off));
  };
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
    fail("bad signature", 0);

  size_t off = 8;
  int w = 0, h = 0, channels = 0;
  std::vector<uint8_t> zdata;
  bool seen_end = false;
  while (off + 8 <= bytes.size() && !seen_end) {
    const uint32_t len = get_u32(bytes.data() + off);
    if (off + 12 + len > bytes.size()) fail("truncated chunk", off);
    const char* type = reinterpret_cast<const char*>(bytes.data() + off + 4);
    const uint8_t* payload = bytes.data() + off + 8;
    const uint32_t crc_stored = get_u32(payload + len);
    const uint32_t crc_calc =
        uint32_t(crc32(0, bytes.data() + off + 4, uInt(len + 4)));
    if (crc_stored != crc_calc) fail("chunk crc mismatch", off);

    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) fail("bad IHDR length", off);
      w = int(get_u32(payload));
      h = int(get_u32(payload + 4));
      const int depth = payload[8], color = payload[9], interlace = payload[12];
      if (depth != 8) fail("unsupported bit depth", off);
      if (color == 0)
        channels = 1;
      else if (color == 2)
        channels = 3;
      else
        fail("unsupported color type", off);
      if (interlace != 0) fail("interlaced png unsupported", off);
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      zdata.insert(zdata.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      seen_end = true;
    }
    off += 12 + len;
  }
  if (!seen_end) fail("missing IEND", off);
  if (w <= 0 || h <= 0 || channels == 0) fail("missing IHDR", off);

  const size_t stride = size_t(w) * channels;
  std::vector<uint8_t> raw(size_t(h) * (stride + 1));
  uLongf rawlen = uLongf(raw.size());
  if (uncompress(raw.data(), &rawlen, zdata.data(), uLong(zdata.size())) != Z_OK ||
      rawlen != raw.size())
    fail("inflate failed", off);

  ImageU8 img(h, w, channels);
  std::vector<uint8_t> prev(stride, 0);
  const int bpp = channels;
  for (int y = 0; y < h; ++y) {
    const uint8_t filter = raw[size_t(y) * (stride + 1)];
    const uint8_t* src = raw.data() + size_t(y) * (stride + 1) + 1;
    uint8_t* dst = img.pix.data() + size_t(y) * stride;
    for (size_t i = 0; i < stride; ++i) {
      const int a = i >= size_t(bpp) ? dst[i - bpp] : 0;
      const int b = prev[i];
      const int c = i >= size_t(bpp) ? prev[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: fail("unknown filter type", size_t(y) * (stride + 1));
      }
      dst[i] = uint8_t(v & 0xff);
    }
    std::copy(dst, dst + stride, prev.begin());
  }
  return img;
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f),
                              std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw IoError("short write to " + path);
}

void save_png(const std::string& path, const ImageU8& img) {
  write_file(path, encode_png(img));
}

ImageU8 load_png(const std::string& path) { return decode_png(read_file(path)); }

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(uint8_t(uint64_t(v) >> (8 * i)));
}

template <typename T>
T get_le(const std::vector<uint8_t>& b, size_t& off, const char* what) {
  if (off + sizeof(T) > b.size())
    throw IoError(std::string("tensor file: truncated ") + what + " at offset " +
                  std::to_string(off));
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t(b[off + i]) << (8 * i);
  off += sizeof(T);
  return T(v);
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
  std::vector<uint8_t> out{'V', 'Q', 'T', '1'};
  put_le<uint32_t>(out, uint32_t(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_le<uint32_t>(out, uint32_t(t.dim(i)));
  const size_t base = out.size();
  out.resize(base + size_t(t.size()) * 4);
  std::memcpy(out.data() + base, t.data(), size_t(t.size()) * 4);
  write_file(path, out);
}

Tensor load_tensor(const std::string& path) {
  const auto b = read_file(path);
  if (b.size() < 4 || std::memcmp(b.data(), "VQT1", 4) != 0)
    throw IoError("tensor file: bad magic at offset 0 in " + path);
  size_t off = 4;
  const uint32_t rank = get_le<uint32_t>(b, off, "rank");
  if (rank > 8) throw IoError("tensor file: absurd rank at offset 4");
  Shape shape(rank);
  for (auto& d : shape) d = int(get_le<uint32_t>(b, off, "dim"));
  Tensor t(shape);
  if (off + size_t(t.size()) * 4 > b.size())
    throw IoError("tensor file: truncated data at offset " + std::to_string(off));
  std::memcpy(t.data(), b.data() + off, size_t(t.size()) * 4);
  return t;
}

// ---------------------------------------------------------------------------
// Resampling / blur
// ---------------------------------------------------------------------------

Tensor resize_bilinear(const Tensor& img, int oh, int ow) {
  if (img.rank() != 3) throw ShapeError("resize: need (H,W,C), got " + shape_str(img.shape()));
  if (oh < 1 || ow < 1) throw ShapeError("resize: bad target size");
  const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor out(Shape{oh, ow, c});
  const double sy = double(h) / oh, sx = double(w) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), double(h - 1));
    const int y0 = int(fy), y1 = std::min(y0 + 1, h - 1);
    const float wy = float(fy - y0);
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), double(w - 1));
      const int x0 = int(fx), x1 = std::min(x0 + 1, w - 1);
      const float wx = float(fx - x0);
      for (int ch = 0; ch < c; ++ch) {
        const float v00 = img.data()[(int64_t(y0) * w + x0) * c + ch];
        const float v01 = img.data()[(int64_t(y0) * w + x1) * c + ch];
        const float v10 = img.data()[(int64_t(y1) * w + x0) * c + ch];
        const float v11 = img.data()[(int64_t(y1) * w + x1) * c + ch];
        out.data()[(int64_t(y) * ow + x) * c + ch] =
            (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return out;
}

std::vector<double> gaussian_kernel_1d(double sigma) {
  if (sigma <= 0.0) throw ShapeError("gaussian kernel: sigma must be > 0");
  const int radius = int(std::ceil(3.0 * sigma));
  std::vector<double> k(size_t(2 * radius + 1));
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[size_t(i + radius)] = std::exp(-(double(i) * i) / (2.0 * sigma * sigma));
    s += k[size_t(i + radius)];
  }
  for (auto& v : k) v /= s;
  return k;
}

namespace {
int reflect(int i, int n) {
  // reflect-101 style without the edge repeat: ... 2 1 0 1 2 ...
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}
}  // namespace

Tensor gaussian_blur(const Tensor& img, double sigma) {
  if (img.rank() != 3) throw ShapeError("blur: need (H,W,C), got " + shape_str(img.shape()));
  const auto k = gaussian_kernel_1d(sigma);
  const int radius = int(k.size() / 2);
  const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor tmp(img.shape()), out(img.shape());
  // horizontal
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t)
          acc += k[size_t(t + radius)] * img.data()[(int64_t(y) * w + reflect(x + t, w)) * c + ch];
        tmp.data()[(int64_t(y) * w + x) * c + ch] = float(acc);
      }
  // vertical
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t)
          acc += k[size_t(t + radius)] * tmp.data()[(int64_t(reflect(y + t, h)) * w + x) * c + ch];
        out.data()[(int64_t(y) * w + x) * c + ch] = float(acc);
      }
  return out;
}

ImageU8 hstack(const std::vector<ImageU8>& panels) {
  if (panels.empty()) throw IoError("hstack: no panels");
  const int h = panels[0].h, c = panels[0].c, sep = 2;
  int w = 0;
  for (const auto& p : panels) {
    if (p.h != h || p.c != c) throw IoError("hstack: mismatched panel sizes");
    w += p.w;
  }
  w += sep * int(panels.size() - 1);
  ImageU8 out(h, w, c);
  std::fill(out.pix.begin(), out.pix.end(), uint8_t(255));
  int x0 = 0;
  for (const auto& p : panels) {
    for (int y = 0; y < h; ++y)
      std::copy(p.pix.begin() + size_t(y) * p.w * c, p.pix.begin() + size_t(y + 1) * p.w * c,
                out.pix.begin() + (size_t(y) * w + x0) * c);
    x0 += p.w + sep;
  }
  return out;
}

uint64_t fnv1a64(const uint8_t* data, size_t len) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t file_hash(const std::string& path) {
  const auto b = read_file(path);
  return fnv1a64(b.data(), b.size());
}

}  // namespace vqr
