#include "vqr/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "vqr/image.hpp"

namespace vqr {

double psnr(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) throw ShapeError("psnr: shape mismatch");
  double mse = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double d = double(a.data()[i]) - b.data()[i];
    mse += d * d;
  }
  mse /= double(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

std::vector<double> to_gray(const Tensor& img) {
  const int h = img.dim(0), w = img.dim(1), c = img.dim(2);
  std::vector<double> g(size_t(h) * w);
  for (int i = 0; i < h * w; ++i) {
    if (c == 3)
      g[size_t(i)] = 0.299 * img.data()[i * 3] + 0.587 * img.data()[i * 3 + 1] +
                     0.114 * img.data()[i * 3 + 2];
    else
      g[size_t(i)] = img.data()[i * c];
  }
  return g;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) throw ShapeError("ssim: shape mismatch");
  if (a.rank() != 3) throw ShapeError("ssim: need (H,W,C)");
  const int h = a.dim(0), w = a.dim(1);
  constexpr int kWin = 11;
  if (h < kWin || w < kWin)
    throw ShapeError("ssim: image " + shape_str(a.shape()) + " smaller than the 11x11 window");

  const auto ga = to_gray(a), gb = to_gray(b);
  // 11-tap Gaussian, sigma 1.5
  double taps[kWin];
  double tsum = 0;
  for (int i = 0; i < kWin; ++i) {
    const double x = i - 5;
    taps[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    tsum += taps[i];
  }
  for (auto& t : taps) t /= tsum;

  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  int64_t count = 0;
  for (int y = 0; y + kWin <= h; ++y)
    for (int x = 0; x + kWin <= w; ++x) {
      double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
      for (int dy = 0; dy < kWin; ++dy)
        for (int dx = 0; dx < kWin; ++dx) {
          const double wgt = taps[dy] * taps[dx];
          const double va = ga[size_t(y + dy) * w + (x + dx)];
          const double vb = gb[size_t(y + dy) * w + (x + dx)];
          mu_a += wgt * va;
          mu_b += wgt * vb;
          aa += wgt * va * va;
          bb += wgt * vb * vb;
          ab += wgt * va * vb;
        }
      // shared rounded subproducts keep ssim(a,a) exactly 1: identical window
      // statistics must yield bit-identical numerator and denominator
      const double mu_ab = mu_a * mu_b, mu_aa = mu_a * mu_a, mu_bb = mu_b * mu_b;
      const double var_a = aa - mu_aa;
      const double var_b = bb - mu_bb;
      const double cov = ab - mu_ab;
      const double num = (mu_ab + mu_ab + c1) * (cov + cov + c2);
      const double den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2);
      total += num / den;
      ++count;
    }
  return total / double(count);
}

double identity_proxy(const Tensor& a, const Tensor& b, const FeatureExtractor& phi) {
  Tensor fa = phi.deepest(a);
  Tensor fb = phi.deepest(b);
  double dot = 0, na = 0, nb = 0;
  for (int64_t i = 0; i < fa.size(); ++i) {
    dot += double(fa.data()[i]) * fb.data()[i];
    na += double(fa.data()[i]) * fa.data()[i];
    nb += double(fb.data()[i]) * fb.data()[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void EvalReport::finalize() {
  double sp = 0, ss = 0, si = 0, sc = 0;
  int64_t finite = 0, with_codes = 0;
  infinite_psnr_count = 0;
  for (const auto& r : rows) {
    if (std::isinf(r.psnr)) {
      ++infinite_psnr_count;
    } else {
      sp += r.psnr;
      ++finite;
    }
    ss += r.ssim;
    si += r.ids;
    if (r.code_acc) {
      sc += *r.code_acc;
      ++with_codes;
    }
  }
  mean_psnr = finite ? sp / double(finite) : 0.0;
  mean_ssim = rows.empty() ? 0.0 : ss / double(rows.size());
  mean_ids = rows.empty() ? 0.0 : si / double(rows.size());
  if (with_codes) mean_code_acc = sc / double(with_codes);
}

namespace {
std::string fmt(double v) {
  if (std::isinf(v)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "image,psnr,ssim,ids_proxy,code_acc\n";
  for (const auto& r : rows) {
    os << r.name << "," << fmt(r.psnr) << "," << fmt(r.ssim) << "," << fmt(r.ids) << ",";
    if (r.code_acc) os << fmt(*r.code_acc);
    os << "\n";
  }
  return os.str();
}

std::string EvalReport::summary() const {
  std::ostringstream os;
  os << "images: " << rows.size() << "\n"
     << "mean psnr (dB): " << fmt(mean_psnr);
  if (infinite_psnr_count) os << "  (+" << infinite_psnr_count << " infinite)";
  os << "\nmean ssim: " << fmt(mean_ssim) << "\nmean ids proxy: " << fmt(mean_ids) << "\n";
  if (mean_code_acc) os << "mean code accuracy: " << fmt(*mean_code_acc) << "\n";
  os << "note: ids proxy is a frozen random-feature cosine, not a pretrained "
        "identity embedding; values are not comparable across feature seeds.\n";
  return os.str();
}

}  // namespace vqr
