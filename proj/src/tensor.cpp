#include "vqr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vqr {

using Eigen::ArrayXf;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                   shape_str(b));
}

void check_positive_dims(const Shape& s, const char* op) {
  for (int d : s)
    if (d <= 0) throw ShapeError(std::string(op) + ": non-positive dim in " + shape_str(s));
}

// rows = numel / last_dim; rank-0 and rank-1 count as a single row
int64_t row_count(const Shape& s) {
  if (s.size() <= 1) return 1;
  int64_t r = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

int last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

thread_local Tape* g_active_tape = nullptr;

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, float fill, bool requires_grad) {
  check_positive_dims(shape, "tensor");
  s_ = std::make_shared<detail::Storage>();
  s_->shape = std::move(shape);
  s_->data = ArrayXf::Constant(numel(s_->shape), fill);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), 0.f, requires_grad);
}

Tensor Tensor::full(Shape shape, float v) { return Tensor(std::move(shape), v); }

Tensor Tensor::scalar(float v) {
  Tensor t{Shape{}};
  t.s_->data[0] = v;
  t.s_->scalar64 = double(v);
  t.s_->has64 = true;
  return t;
}

Tensor Tensor::from_span(Shape shape, std::span<const float> v) {
  Tensor t(std::move(shape));
  if (int64_t(v.size()) != t.size())
    throw ShapeError("from_span: " + std::to_string(v.size()) + " values for shape " +
                     shape_str(t.shape()));
  std::copy(v.begin(), v.end(), t.data());
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, float mean) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal_f(mean, stddev);
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, float lo, float hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform_f(lo, hi);
  return t;
}

float Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
  return s_->data[0];
}

double Tensor::item64() const {
  if (size() != 1) throw ShapeError("item64: tensor " + shape_str(shape()) + " is not scalar");
  return s_->has64 ? s_->scalar64 : double(s_->data[0]);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.s_ = std::make_shared<detail::Storage>();
  t.s_->shape = s_->shape;
  t.s_->data = s_->data;
  t.s_->requires_grad = false;
  t.s_->scalar64 = s_->scalar64;
  t.s_->has64 = s_->has64;
  return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() {
  if (g_active_tape)
    throw std::logic_error("Tape: a tape is already active on this thread");
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(Tensor out, std::vector<Tensor> inputs, std::function<void()> backward) {
  (void)inputs;  // inputs are kept alive by the closure's captures
  nodes_.push_back(Node{out.st(), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (used_) throw std::logic_error("backward: tape already consumed");
  used_ = true;

  loss.st()->grad = ArrayXf::Ones(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->grad.size() == it->out->data.size()) it->fn();
  }
  // free intermediate grads; leaves (never an op output) keep theirs
  for (auto& n : nodes_) n.out->grad.resize(0);
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

TapePause::TapePause() : saved_(g_active_tape) { g_active_tape = nullptr; }
TapePause::~TapePause() { g_active_tape = saved_; }

namespace detail {

void acc_grad(Storage& s, const ArrayXf& g) {
  if (s.grad.size() != s.data.size()) s.grad = ArrayXf::Zero(s.data.size());
  s.grad += g;
}

bool grad_enabled_for(std::initializer_list<const Tensor*> ins) {
  if (!Tape::active()) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace detail

namespace {

// Shared epilogue: mark output differentiable and record the closure.
void record_op(Tensor& out, std::vector<Tensor> ins, std::function<void()> fn) {
  out.set_requires_grad(true);
  Tape::active()->record(out, std::move(ins), std::move(fn));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) shape_fail("add", a.shape(), b.shape());
  Tensor out(a.shape());
  out.array() = a.array() + b.array();
  if (a.st()->has64 && b.st()->has64 && out.size() == 1) {
    out.st()->scalar64 = a.st()->scalar64 + b.st()->scalar64;
    out.st()->has64 = true;
  }
  if (detail::grad_enabled_for({&a, &b})) {
    auto sa = a.st(), sb = b.st(), so = out.st();
    record_op(out, {a, b}, [sa, sb, so] {
      if (sa->requires_grad) detail::acc_grad(*sa, so->grad);
      if (sb->requires_grad) detail::acc_grad(*sb, so->grad);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) shape_fail("sub", a.shape(), b.shape());
  Tensor out(a.shape());
  out.array() = a.array() - b.array();
  if (a.st()->has64 && b.st()->has64 && out.size() == 1) {
    out.st()->scalar64 = a.st()->scalar64 - b.st()->scalar64;
    out.st()->has64 = true;
  }
  if (detail::grad_enabled_for({&a, &b})) {
    auto sa = a.st(), sb = b.st(), so = out.st();
    record_op(out, {a, b}, [sa, sb, so] {
      if (sa->requires_grad) detail::acc_grad(*sa, so->grad);
      if (sb->requires_grad) detail::acc_grad(*sb, -so->grad);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) shape_fail("mul", a.shape(), b.shape());
  Tensor out(a.shape());
  out.array() = a.array() * b.array();
  if (detail::grad_enabled_for({&a, &b})) {
    auto sa = a.st(), sb = b.st(), so = out.st();
    record_op(out, {a, b}, [sa, sb, so] {
      if (sa->requires_grad) detail::acc_grad(*sa, so->grad * sb->data);
      if (sb->requires_grad) detail::acc_grad(*sb, so->grad * sa->data);
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out(a.shape());
  out.array() = a.array() * s;
  if (a.st()->has64 && out.size() == 1) {
    out.st()->scalar64 = a.st()->scalar64 * double(s);
    out.st()->has64 = true;
  }
  if (detail::grad_enabled_for({&a})) {
    auto sa = a.st(), so = out.st();
    record_op(out, {a}, [sa, so, s] { detail::acc_grad(*sa, so->grad * s); });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, float c) {
  Tensor out(a.shape());
  out.array() = a.array() + c;
  if (a.st()->has64 && out.size() == 1) {
    out.st()->scalar64 = a.st()->scalar64 + double(c);
    out.st()->has64 = true;
  }
  if (detail::grad_enabled_for({&a})) {
    auto sa = a.st(), so = out.st();
    record_op(out, {a}, [sa, so] { detail::acc_grad(*sa, so->grad); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", a.shape(), b.shape());
  const int p = a.dim(0), q = a.dim(1), r = b.dim(1);
  Tensor out(Shape{p, r});
  MapMat(out.data(), p, r).noalias() =
      CMapMat(a.data(), p, q) * CMapMat(b.data(), q, r);
  if (detail::grad_enabled_for({&a, &b})) {
    auto sa = a.st(), sb = b.st(), so = out.st();
    record_op(out, {a, b}, [sa, sb, so, p, q, r] {
      CMapMat g(so->grad.data(), p, r);
      if (sa->requires_grad) {
        ArrayXf da(int64_t(p) * q);
        MapMat(da.data(), p, q).noalias() = g * CMapMat(sb->data.data(), q, r).transpose();
        detail::acc_grad(*sa, da);
      }
      if (sb->requires_grad) {
        ArrayXf db(int64_t(q) * r);
        MapMat(db.data(), q, r).noalias() = CMapMat(sa->data.data(), p, q).transpose() * g;
        detail::acc_grad(*sb, db);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: need rank-2, got " + shape_str(a.shape()));
  const int p = a.dim(0), q = a.dim(1);
  Tensor out(Shape{q, p});
  MapMat(out.data(), q, p) = CMapMat(a.data(), p, q).transpose();
  if (detail::grad_enabled_for({&a})) {
    auto sa = a.st(), so = out.st();
    record_op(out, {a}, [sa, so, p, q] {
      ArrayXf da(int64_t(p) * q);
      MapMat(da.data(), p, q) = CMapMat(so->grad.data(), q, p).transpose();
      detail::acc_grad(*sa, da);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d (channel-last, im2col + GEMM)
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int h, w, cin, kh, kw, cout, oh, ow, stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4 || x.dim(2) != w.dim(2))
    shape_fail("conv2d", x.shape(), w.shape());
  if (stride != 1 && stride != 2)
    throw ShapeError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  if (pad < 0) throw ShapeError("conv2d: negative pad");
  ConvDims d{};
  d.h = x.dim(0);
  d.w = x.dim(1);
  d.cin = x.dim(2);
  d.kh = w.dim(0);
  d.kw = w.dim(1);
  d.cout = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.oh <= 0 || d.ow <= 0)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " too large for input " +
                     shape_str(x.shape()));
  return d;
}

// Patch matrix: one row per output position, KH*KW*Cin columns.
void im2col(const float* x, const ConvDims& d, float* cols) {
  const int row_len = d.kh * d.kw * d.cin;
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      float* row = cols + (int64_t(oy) * d.ow + ox) * row_len;
      for (int ky = 0; ky < d.kh; ++ky) {
        const int iy = oy * d.stride - d.pad + ky;
        float* dst = row + ky * d.kw * d.cin;
        if (iy < 0 || iy >= d.h) {
          std::fill(dst, dst + d.kw * d.cin, 0.f);
          continue;
        }
        for (int kx = 0; kx < d.kw; ++kx) {
          const int ix = ox * d.stride - d.pad + kx;
          if (ix < 0 || ix >= d.w) {
            std::fill(dst, dst + d.cin, 0.f);
          } else {
            const float* src = x + (int64_t(iy) * d.w + ix) * d.cin;
            std::copy(src, src + d.cin, dst);
          }
          dst += d.cin;
        }
      }
    }
  }
}

// Transpose of im2col: scatter-add patch-row gradients back onto the input.
void col2im_acc(const float* cols, const ConvDims& d, float* dx) {
  const int row_len = d.kh * d.kw * d.cin;
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      const float* row = cols + (int64_t(oy) * d.ow + ox) * row_len;
      for (int ky = 0; ky < d.kh; ++ky) {
        const int iy = oy * d.stride - d.pad + ky;
        if (iy < 0 || iy >= d.h) continue;
        for (int kx = 0; kx < d.kw; ++kx) {
          const int ix = ox * d.stride - d.pad + kx;
          if (ix < 0 || ix >= d.w) continue;
          const float* src = row + (ky * d.kw + kx) * d.cin;
          float* dst = dx + (int64_t(iy) * d.w + ix) * d.cin;
          for (int c = 0; c < d.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const ConvDims d = conv_dims(x, w, stride, pad);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != d.cout))
    shape_fail("conv2d bias", b.shape(), w.shape());

  const int64_t rows = int64_t(d.oh) * d.ow;
  const int row_len = d.kh * d.kw * d.cin;
  ArrayXf cols(rows * row_len);
  im2col(x.data(), d, cols.data());

  Tensor out(Shape{d.oh, d.ow, d.cout});
  MapMat om(out.data(), rows, d.cout);
  om.noalias() = CMapMat(cols.data(), rows, row_len) * CMapMat(w.data(), row_len, d.cout);
  if (b.defined()) om.rowwise() += CMapMat(b.data(), 1, d.cout).row(0);

  if (detail::grad_enabled_for({&x, &w, &b})) {
    auto sx = x.st(), sw = w.st(), so = out.st();
    auto sb = b.defined() ? b.st() : nullptr;
    record_op(out, {x, w, b.defined() ? b : Tensor::scalar(0)}, [sx, sw, sb, so, d] {
      const int64_t rows = int64_t(d.oh) * d.ow;
      const int row_len = d.kh * d.kw * d.cin;
      CMapMat g(so->grad.data(), rows, d.cout);
      if (sw->requires_grad || sx->requires_grad) {
        // patches are recomputed rather than cached across the step
        ArrayXf cols(rows * row_len);
        im2col(sx->data.data(), d, cols.data());
        if (sw->requires_grad) {
          ArrayXf dw(int64_t(row_len) * d.cout);
          MapMat(dw.data(), row_len, d.cout).noalias() =
              CMapMat(cols.data(), rows, row_len).transpose() * g;
          detail::acc_grad(*sw, dw);
        }
        if (sx->requires_grad) {
          ArrayXf dcols(rows * row_len);
          MapMat(dcols.data(), rows, row_len).noalias() =
              g * CMapMat(sw->data.data(), row_len, d.cout).transpose();
          ArrayXf dx = ArrayXf::Zero(sx->data.size());
          col2im_acc(dcols.data(), d, dx.data());
          detail::acc_grad(*sx, dx);
        }
      }
      if (sb && sb->requires_grad) {
        ArrayXf db(d.cout);
        MapMat(db.data(), 1, d.cout) = g.colwise().sum();
        detail::acc_grad(*sb, db);
      }
    });
  }
  return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("upsample2x: need (H,W,C), got " + shape_str(x.shape()));
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out(Shape{2 * h, 2 * w, c});
  const float* src = x.data();
  float* dst = out.data();
  for (int y = 0; y < 2 * h; ++y) {
    for (int xx = 0; xx < 2 * w; ++xx) {
      const float* s = src + (int64_t(y / 2) * w + xx / 2) * c;
      std::copy(s, s + c, dst);
      dst += c;
    }
  }
  if (detail::grad_enabled_for({&x})) {
    auto sx = x.st(), so = out.st();
    record_op(out, {x}, [sx, so, h, w, c] {
      ArrayXf dx = ArrayXf::Zero(sx->data.size());
      const float* g = so->grad.data();
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) {
          float* d = dx.data() + (int64_t(y / 2) * w + xx / 2) * c;
          const float* s = g + (int64_t(y) * 2 * w + xx) * c;
          for (int ch = 0; ch < c; ++ch) d[ch] += s[ch];
        }
      detail::acc_grad(*sx, dx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

Tensor leaky_relu(const Tensor& x, float slope) {
  Tensor out(x.shape());
  out.array() = (x.array() > 0.f).select(x.array(), x.array() * slope);
  if (detail::grad_enabled_for({&x})) {
    auto sx = x.st(), so = out.st();
    record_op(out, {x}, [sx, so, slope] {
      detail::acc_grad(*sx, (sx->data > 0.f).select(so->grad, so->grad * slope));
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    const float v = x.data()[i];
    out.data()[i] = v >= 0.f ? 1.f / (1.f + std::exp(-v))
                             : std::exp(v) / (1.f + std::exp(v));
  }
  if (detail::grad_enabled_for({&x})) {
    auto sx = x.st(), so = out.st();
    record_op(out, {x}, [sx, so] {
      detail::acc_grad(*sx, so->grad * so->data * (1.f - so->data));
    });
  }
  return out;
}

Tensor log_clamped(const Tensor& x, float eps) {
  Tensor out(x.shape());
  out.array() = x.array().max(eps).log();
  if (detail::grad_enabled_for({&x})) {
    auto sx = x.st(), so = out.st();
    record_op(out, {x}, [sx, so, eps] {
      detail::acc_grad(*sx, (sx->data > eps).select(so->grad / sx->data, 0.f));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-structured ops
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x) {
  const int64_t rows = row_count(x.shape());
  const int c = last_dim(x.shape());
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* xi = x.data() + r * c;
    float* yi = out.data() + r * c;
    float mx = xi[0];
    for (int i = 1; i < c; ++i) mx = std::max(mx, xi[i]);
    double s = 0.0;
    for (int i = 0; i < c; ++i) {
      yi[i] = std::exp(xi[i] - mx);
      s += yi[i];
    }
    const float inv = float(1.0 / s);
    for (int i = 0; i < c; ++i) yi[i] *= inv;
  }
  if (detail::grad_enabled_for({&x})) {
    auto sx = x.st(), so = out.st();
    record_op(out, {x}, [sx, so, rows, c] {
      ArrayXf dx(sx->data.size());
      for (int64_t r = 0; r < rows; ++r) {
        const float* y = so->data.data() + r * c;
        const float* g = so->grad.data() + r * c;
        double dot = 0.0;
        for (int i = 0; i < c; ++i) dot += double(g[i]) * y[i];
        float* d = dx.data() + r * c;
        for (int i = 0; i < c; ++i) d[i] = y[i] * (g[i] - float(dot));
      }
      detail::acc_grad(*sx, dx);
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int c = last_dim(x.shape());
  if (gamma.rank() != 1 || gamma.dim(0) != c) shape_fail("layer_norm gamma", gamma.shape(), x.shape());
  if (beta.rank() != 1 || beta.dim(0) != c) shape_fail("layer_norm beta", beta.shape(), x.shape());
  const int64_t rows = row_count(x.shape());
  Tensor out(x.shape());
  ArrayXf xhat(x.size()), inv_std(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const float* xi = x.data() + r * c;
    double mu = 0.0;
    for (int i = 0; i < c; ++i) mu += xi[i];
    mu /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) {
      const double d = xi[i] - mu;
      var += d * d;
    }
    var /= c;
    const float inv = float(1.0 / std::sqrt(var + eps));
    inv_std[r] = inv;
    float* h = xhat.data() + r * c;
    float* yi = out.data() + r * c;
    for (int i = 0; i < c; ++i) {
      h[i] = (xi[i] - float(mu)) * inv;
      yi[i] = h[i] * gamma.data()[i] + beta.data()[i];
    }
  }
  if (detail::grad_enabled_for({&x, &gamma, &beta})) {
    auto sx = x.st(), sg = gamma.st(), sb = beta.st(), so = out.st();
    record_op(out, {x, gamma, beta},
              [sx, sg, sb, so, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      if (sg->requires_grad) {
        ArrayXf dg = ArrayXf::Zero(c);
        for (int64_t r = 0; r < rows; ++r)
          for (int i = 0; i < c; ++i) dg[i] += so->grad[r * c + i] * xhat[r * c + i];
        detail::acc_grad(*sg, dg);
      }
      if (sb->requires_grad) {
        ArrayXf db = ArrayXf::Zero(c);
        for (int64_t r = 0; r < rows; ++r)
          for (int i = 0; i < c; ++i) db[i] += so->grad[r * c + i];
        detail::acc_grad(*sb, db);
      }
      if (sx->requires_grad) {
        ArrayXf dx(sx->data.size());
        for (int64_t r = 0; r < rows; ++r) {
          const float* g = so->grad.data() + r * c;
          const float* h = xhat.data() + r * c;
          double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
          for (int i = 0; i < c; ++i) {
            const double dh = double(g[i]) * sg->data[i];
            m1 += dh;
            m2 += dh * h[i];
          }
          m1 /= c;
          m2 /= c;
          float* d = dx.data() + r * c;
          for (int i = 0; i < c; ++i) {
            const float dh = g[i] * sg->data[i];
            d[i] = inv_std[r] * (dh - float(m1) - h[i] * float(m2));
          }
        }
        detail::acc_grad(*sx, dx);
      }
    });
  }
  return out;
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() < 1) shape_fail("concat", a.shape(), b.shape());
  for (int i = 0; i + 1 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) shape_fail("concat", a.shape(), b.shape());
  const int ca = a.dim(a.rank() - 1), cb = b.dim(b.rank() - 1);
  Shape os = a.shape();
  os.back() = ca + cb;
  const int64_t rows = row_count(os);
  Tensor out(os);
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(a.data() + r * ca, a.data() + (r + 1) * ca, out.data() + r * (ca + cb));
    std::copy(b.data() + r * cb, b.data() + (r + 1) * cb, out.data() + r * (ca + cb) + ca);
  }
  if (detail::grad_enabled_for({&a, &b})) {
    auto sa = a.st(), sb = b.st(), so = out.st();
    record_op(out, {a, b}, [sa, sb, so, rows, ca, cb] {
      if (sa->requires_grad) {
        ArrayXf da(sa->data.size());
        for (int64_t r = 0; r < rows; ++r)
          std::copy(so->grad.data() + r * (ca + cb), so->grad.data() + r * (ca + cb) + ca,
                    da.data() + r * ca);
        detail::acc_grad(*sa, da);
      }
      if (sb->requires_grad) {
        ArrayXf db(sb->data.size());
        for (int64_t r = 0; r < rows; ++r)
          std::copy(so->grad.data() + r * (ca + cb) + ca,
                    so->grad.data() + (r + 1) * (ca + cb), db.data() + r * cb);
        detail::acc_grad(*sb, db);
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  Tensor out(shape);
  out.array() = x.array();
  if (detail::grad_enabled_for({&x})) {
    auto sx = x.st(), so = out.st();
    record_op(out, {x}, [sx, so] { detail::acc_grad(*sx, so->grad); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses (float64 accumulation, float32 result)
// ---------------------------------------------------------------------------

namespace {

Tensor make_scalar64(double v) {
  Tensor t = Tensor::scalar(float(v));
  t.st()->scalar64 = v;
  t.st()->has64 = true;
  return t;
}

}  // namespace

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) s += x.data()[i];
  Tensor out = make_scalar64(s);
  if (detail::grad_enabled_for({&x})) {
    auto sx = x.st(), so = out.st();
    record_op(out, {x}, [sx, so] {
      detail::acc_grad(*sx, ArrayXf::Constant(sx->data.size(), so->grad[0]));
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) s += x.data()[i];
  const int64_t n = x.size();
  Tensor out = make_scalar64(s / double(n));
  if (detail::grad_enabled_for({&x})) {
    auto sx = x.st(), so = out.st();
    record_op(out, {x}, [sx, so, n] {
      detail::acc_grad(*sx, ArrayXf::Constant(sx->data.size(), so->grad[0] / float(n)));
    });
  }
  return out;
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) shape_fail("l1_loss", a.shape(), b.shape());
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += std::abs(double(a.data()[i]) - b.data()[i]);
  const int64_t n = a.size();
  Tensor out = make_scalar64(s / double(n));
  if (detail::grad_enabled_for({&a, &b})) {
    auto sa = a.st(), sb = b.st(), so = out.st();
    record_op(out, {a, b}, [sa, sb, so, n] {
      const float g = so->grad[0] / float(n);
      ArrayXf sgn(sa->data.size());
      for (int64_t i = 0; i < sa->data.size(); ++i) {
        const float d = sa->data[i] - sb->data[i];
        sgn[i] = d > 0.f ? g : (d < 0.f ? -g : 0.f);
      }
      if (sa->requires_grad) detail::acc_grad(*sa, sgn);
      if (sb->requires_grad) detail::acc_grad(*sb, -sgn);
    });
  }
  return out;
}

Tensor sq_l2(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) shape_fail("sq_l2", a.shape(), b.shape());
  const int64_t rows = row_count(a.shape());
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double d = double(a.data()[i]) - b.data()[i];
    s += d * d;
  }
  Tensor out = make_scalar64(s / double(rows));
  if (detail::grad_enabled_for({&a, &b})) {
    auto sa = a.st(), sb = b.st(), so = out.st();
    record_op(out, {a, b}, [sa, sb, so, rows] {
      const float g = 2.f * so->grad[0] / float(rows);
      if (sa->requires_grad) detail::acc_grad(*sa, g * (sa->data - sb->data));
      if (sb->requires_grad) detail::acc_grad(*sb, g * (sb->data - sa->data));
    });
  }
  return out;
}

Tensor softmax_xent(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw ShapeError("softmax_xent: need (S,N) logits, got " + shape_str(logits.shape()));
  const int s = logits.dim(0), n = logits.dim(1);
  if (int(targets.size()) != s)
    throw ShapeError("softmax_xent: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(s) + " rows");
  for (int t : targets)
    if (t < 0 || t >= n)
      throw ShapeError("softmax_xent: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(n) + ")");
  // keep probabilities for the backward pass
  auto probs = std::make_shared<ArrayXf>(logits.size());
  double total = 0.0;
  for (int r = 0; r < s; ++r) {
    const float* xi = logits.data() + int64_t(r) * n;
    float mx = xi[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, xi[i]);
    double z = 0.0;
    float* pi = probs->data() + int64_t(r) * n;
    for (int i = 0; i < n; ++i) {
      pi[i] = std::exp(xi[i] - mx);
      z += pi[i];
    }
    const float inv = float(1.0 / z);
    for (int i = 0; i < n; ++i) pi[i] *= inv;
    total += std::log(z) + mx - xi[targets[size_t(r)]];
  }
  Tensor out = make_scalar64(total / double(s));
  if (detail::grad_enabled_for({&logits})) {
    auto sx = logits.st(), so = out.st();
    record_op(out, {logits}, [sx, so, probs, targets, s, n] {
      const float g = so->grad[0] / float(s);
      ArrayXf dx = *probs * g;
      for (int r = 0; r < s; ++r) dx[int64_t(r) * n + targets[size_t(r)]] -= g;
      detail::acc_grad(*sx, dx);
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  const int c = last_dim(x.shape());
  if (b.rank() != 1 || b.dim(0) != c) shape_fail("add_rowvec", x.shape(), b.shape());
  const int64_t rows = row_count(x.shape());
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int i = 0; i < c; ++i) out.data()[r * c + i] = x.data()[r * c + i] + b.data()[i];
  if (detail::grad_enabled_for({&x, &b})) {
    auto sx = x.st(), sb = b.st(), so = out.st();
    record_op(out, {x, b}, [sx, sb, so, rows, c] {
      if (sx->requires_grad) detail::acc_grad(*sx, so->grad);
      if (sb->requires_grad) {
        ArrayXf db = ArrayXf::Zero(c);
        for (int64_t r = 0; r < rows; ++r)
          for (int i = 0; i < c; ++i) db[i] += so->grad[r * c + i];
        detail::acc_grad(*sb, db);
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& m, const std::vector<int>& idx) {
  if (m.rank() != 2) throw ShapeError("gather_rows: need (N,d), got " + shape_str(m.shape()));
  const int n = m.dim(0), d = m.dim(1);
  for (int i : idx)
    if (i < 0 || i >= n)
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(n) + ")");
  const int s = int(idx.size());
  Tensor out(Shape{s, d});
  for (int r = 0; r < s; ++r)
    std::copy(m.data() + int64_t(idx[size_t(r)]) * d, m.data() + int64_t(idx[size_t(r)] + 1) * d,
              out.data() + int64_t(r) * d);
  if (detail::grad_enabled_for({&m})) {
    auto sm = m.st(), so = out.st();
    record_op(out, {m}, [sm, so, idx, d] {
      ArrayXf dm = ArrayXf::Zero(sm->data.size());
      for (size_t r = 0; r < idx.size(); ++r)
        for (int i = 0; i < d; ++i) dm[int64_t(idx[r]) * d + i] += so->grad[int64_t(r) * d + i];
      detail::acc_grad(*sm, dm);
    });
  }
  return out;
}

Tensor detach(const Tensor& x) { return x.clone(); }

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState::AdamState(const std::vector<Tensor>& params, AdamConfig cfg) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.push_back(ArrayXf::Zero(p.size()));
    v_.push_back(ArrayXf::Zero(p.size()));
  }
}

void AdamState::step(std::vector<Tensor>& params) {
  if (params.size() != m_.size())
    throw ShapeError("adam: " + std::to_string(params.size()) + " params vs state of " +
                     std::to_string(m_.size()));
  ++t_;
  const float bc1 = 1.f - std::pow(cfg_.beta1, float(t_));
  const float bc2 = 1.f - std::pow(cfg_.beta2, float(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (m_[i].size() != p.size())
      throw ShapeError("adam: param " + std::to_string(i) + " size changed");
    static const ArrayXf empty;
    const bool has_g = p.has_grad();
    const ArrayXf& g = has_g ? p.grad_array() : empty;
    if (has_g) {
      m_[i] = cfg_.beta1 * m_[i] + (1.f - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.f - cfg_.beta2) * g.square();
    } else {
      m_[i] *= cfg_.beta1;
      v_[i] *= cfg_.beta2;
    }
    p.array() -= cfg_.lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + cfg_.eps);
    p.zero_grad();
  }
}

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace vqr
