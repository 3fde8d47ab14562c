#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqr/rng.hpp"

namespace vqr {

/// Dimensions of a tensor, outermost first. Rank 0 denotes a scalar.
using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

/// Thrown by every op on non-conforming inputs; the message names the op
/// and both shapes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
struct Storage {
  Shape shape;
  Eigen::ArrayXf data;
  Eigen::ArrayXf grad;  // empty until backward touches this node
  bool requires_grad = false;
  // Scalar reductions keep a float64 copy of their value so that the
  // finite-difference reference can difference losses without float32
  // cancellation; training itself runs on the float32 value.
  double scalar64 = 0.0;
  bool has64 = false;
};
}  // namespace detail

class Tape;

/// A dense float32 tensor with optional participation on the gradient tape.
/// Value-semantic handle: copies share the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.f, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v);
  static Tensor scalar(float v);
  static Tensor from_span(Shape shape, std::span<const float> v);
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.f, float mean = 0.f);
  static Tensor rand_uniform(Shape shape, Rng& rng, float lo, float hi);

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  int rank() const { return int(s_->shape.size()); }
  int dim(int i) const { return s_->shape[size_t(i)]; }
  int64_t size() const { return s_->data.size(); }

  float* data() { return s_->data.data(); }
  const float* data() const { return s_->data.data(); }
  Eigen::ArrayXf& array() { return s_->data; }
  const Eigen::ArrayXf& array() const { return s_->data; }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    s_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return s_->grad.size() == size(); }
  Eigen::ArrayXf& grad_array() { return s_->grad; }
  const Eigen::ArrayXf& grad_array() const { return s_->grad; }
  void zero_grad() {
    if (s_) s_->grad.resize(0);
  }

  /// Value of a scalar (rank-0 or single-element) tensor.
  float item() const;
  /// float64 value when the producer kept one (scalar reductions), else item().
  double item64() const;

  /// Deep copy detached from any tape.
  Tensor clone() const;

  std::shared_ptr<detail::Storage>& st() { return s_; }
  const std::shared_ptr<detail::Storage>& st() const { return s_; }

 private:
  std::shared_ptr<detail::Storage> s_;
};

/// Records one training step's ops in execution order; reverse traversal
/// accumulates gradients. Construction installs the tape as current for the
/// thread; destruction uninstalls it. One active tape at a time.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  /// Record a node. `backward` reads out's grad and accumulates into the
  /// inputs' grads (only inputs with requires_grad). Used by every op and
  /// open to module-specific ops (e.g. the straight-through estimator).
  void record(Tensor out, std::vector<Tensor> inputs, std::function<void()> backward);

  /// Reverse sweep from a scalar loss. Leaf tensors with requires_grad end
  /// up holding d(loss)/d(leaf); intermediate grads are freed afterwards.
  void backward(const Tensor& loss);

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<detail::Storage> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  bool used_ = false;
};

/// Suspends recording while alive (e.g. ground-truth forwards during training).
struct TapePause {
  TapePause();
  ~TapePause();

 private:
  Tape* saved_;
};

void backward(Tape& tape, const Tensor& loss);

namespace detail {
// Allocate-and-accumulate helper shared by op backwards.
void acc_grad(Storage& s, const Eigen::ArrayXf& g);
bool grad_enabled_for(std::initializer_list<const Tensor*> ins);
}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Forward values are pure functions of the inputs; the
// result is recorded on the active tape when any input requires grad.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float c);

/// 2-D matrix product (p,q)x(q,r).
Tensor matmul(const Tensor& a, const Tensor& b);
/// 2-D transpose.
Tensor transpose(const Tensor& a);

/// Channel-last conv: x (H,W,Cin), w (KH,KW,Cin,Cout), optional bias (Cout).
/// Zero padding `pad` on all sides, stride 1 or 2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

/// Nearest-neighbour 2x spatial upsample of (H,W,C).
Tensor upsample_nearest2x(const Tensor& x);

Tensor leaky_relu(const Tensor& x, float slope = 0.2f);
Tensor sigmoid(const Tensor& x);
/// ln(max(x, eps)); gradient is zero in the clamped region.
Tensor log_clamped(const Tensor& x, float eps = 1e-7f);

/// Row softmax over the last axis, max-subtracted for stability.
Tensor softmax(const Tensor& x);

/// Normalization over the last axis; gamma/beta have shape {last_dim}.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

/// Concatenate along the last (channel) axis.
Tensor concat_last(const Tensor& a, const Tensor& b);

/// Same data, new shape (element counts must match).
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean absolute difference over all elements.
Tensor l1_loss(const Tensor& a, const Tensor& b);

/// Squared L2 distance: sum of squared differences over the last axis,
/// averaged over the remaining (row) positions. For rank-1 inputs this is
/// exactly the squared norm of the difference.
Tensor sq_l2(const Tensor& a, const Tensor& b);

/// Mean cross-entropy of (S,N) logits against integer targets.
Tensor softmax_xent(const Tensor& logits, const std::vector<int>& targets);

/// x (...,C) plus a length-C vector broadcast over rows.
Tensor add_rowvec(const Tensor& x, const Tensor& b);

/// Gather rows of an (N,d) matrix: out(i) = m(idx[i]). Backward scatter-adds.
Tensor gather_rows(const Tensor& m, const std::vector<int>& idx);

/// Copy of x that does not require grad and is not recorded.
Tensor detach(const Tensor& x);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  float lr = 8e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Standard Adam with bias correction, one (m,v) pair per parameter.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<Tensor>& params, AdamConfig cfg);

  /// Applies one update in place from the params' accumulated grads and
  /// clears those grads. Params with no grad this step are left unchanged
  /// on step 1 and otherwise follow the decayed moments.
  void step(std::vector<Tensor>& params);

  int64_t t() const { return t_; }
  AdamConfig& config() { return cfg_; }
  const AdamConfig& config() const { return cfg_; }

  std::vector<Eigen::ArrayXf>& m() { return m_; }
  std::vector<Eigen::ArrayXf>& v() { return v_; }
  void set_t(int64_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::vector<Eigen::ArrayXf> m_, v_;
  int64_t t_ = 0;
};

void zero_grads(std::vector<Tensor>& params);

}  // namespace vqr
