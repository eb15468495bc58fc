#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace hrmlm {

using Shape = std::vector<int64_t>;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // lazily sized; empty means all-zero
  bool requires_grad = false;
  bool tracked = false;  // participates in the tape
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Monotonic count of tape-recorded op nodes; lets tests measure graph size.
int64_t tracked_nodes_created();

}  // namespace detail

// Thread-local gradient mode. Ops record history only when enabled.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor of doubles with reverse-mode autodiff.
// Copying a Tensor copies the handle (shared node), not the storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return impl_->numel(); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v);

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<double>& grad_vec();  // sizes the buffer on first use
  void zero_grad();

  double item() const;  // scalar tensors only

  Tensor detach() const;  // copies data, severs history
  Tensor clone() const { return detach(); }

  // Reverse pass from a scalar; accumulates into .grad of every tracked
  // ancestor (so repeated backward calls sum, as gradient accumulation needs).
  void backward() const;

  // Low-level op constructor for modules that define custom ops (e.g. the
  // rotary map). Records history iff grad mode is on and any parent is
  // tracked. Verifies every output value is finite.
  static Tensor make_op(const char* name, Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward);

  std::shared_ptr<detail::Node> node() const { return impl_; }

 private:
  std::shared_ptr<detail::Node> impl_;
};

// A named, optimizable tensor. `decay` marks membership in the weight-decay
// set; tensors with requires_grad == false are frozen (stored, not trained).
struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;
};

// ---- op library ----
// All ops: validate shapes (config_error), compute forward values, verify
// finiteness (numeric_error naming the op), and record backward closures.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n] -> [m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor affine(const Tensor& a, double alpha, double beta);  // alpha*a + beta
Tensor scale(const Tensor& a, double c) ;
Tensor neg(const Tensor& a);
Tensor mul_scalar(const Tensor& a, const Tensor& s);  // s: 1 element
Tensor reciprocal(const Tensor& s);                   // 1 element, s != 0
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor log_op(const Tensor& a);  // strictly positive input
Tensor rms_norm(const Tensor& x, const Tensor& scale, double eps);
// Softmax over the last dimension. `mask` (optional) is added to the logits
// before normalization and may contain -inf for excluded positions; it must
// match x's shape or be a single row broadcast across rows. A fully masked
// row is an error. The mask is a constant (no gradient flows to it).
Tensor softmax_lastdim(const Tensor& x, const Tensor* mask = nullptr);
Tensor concat_cols(const std::vector<Tensor>& parts);      // same row count
Tensor slice_cols(const Tensor& x, int64_t start, int64_t count);
// Row gather: out[t,:] = weight[ids[t],:]. Backward scatters into weight.
Tensor embedding(const Tensor& weight, const std::vector<int64_t>& ids);
// Mean of -log softmax(logits)[t, targets[t]] over rows, in nats.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets);
Tensor mean_rows(const Tensor& x);          // [r,c] -> [c]
Tensor sum_all(const Tensor& x);            // -> [1]
Tensor mean_all(const Tensor& x);           // -> [1]
Tensor mul_colvec(const Tensor& x, const Tensor& col);  // col: [r] or [r,1]
Tensor row_broadcast(const Tensor& v, int64_t rows);    // [c] -> [rows,c]
// Identity forward; multiplies the incoming gradient by `factor`. Exists to
// let tests inject a deliberately wrong backward into an otherwise correct
// graph (negative control for the gradient checker).
Tensor grad_scale(const Tensor& x, double factor);

// ---- gradient checking ----

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
};

// Central finite differences per parameter element vs the tape gradient.
// rel err = |a - n| / max(|a|, |n|, 1e-4); the floor makes near-zero
// gradients compare absolutely, sized above the rounding noise of the two
// loss evaluations. Frozen params are skipped.
// A non-finite loss aborts with a numeric_error naming the parameter being
// perturbed (or "analytic pass").
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<NamedParam>& params,
                           double eps = 1e-5);

}  // namespace hrmlm
