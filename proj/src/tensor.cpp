#include "hrmlm/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "hrmlm/errors.hpp"

namespace hrmlm {

namespace {

thread_local bool g_grad_enabled = true;
thread_local int64_t g_tracked_nodes = 0;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw numeric_error(std::string(op) + " produced a non-finite value");
    }
  }
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw config_error(std::string(op) + ": incompatible shapes " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Rows/cols view of a tensor treated as a 2-D array with the last dimension
// as columns (rank-1 tensors are a single row).
void as_2d(const Tensor& t, int64_t& rows, int64_t& cols) {
  if (t.rank() == 1) {
    rows = 1;
    cols = t.dim(0);
  } else if (t.rank() == 2) {
    rows = t.dim(0);
    cols = t.dim(1);
  } else {
    throw config_error("expected rank-1 or rank-2 tensor, got rank " +
                       std::to_string(t.rank()));
  }
}

}  // namespace

namespace detail {
int64_t tracked_nodes_created() { return g_tracked_nodes; }
}  // namespace detail

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data.assign(static_cast<size_t>(n->numel()), 0.0);
  n->requires_grad = requires_grad;
  n->tracked = requires_grad;
  Tensor t;
  t.impl_ = std::move(n);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : t.impl_->data) x = value;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  if (static_cast<int64_t>(data.size()) != n->numel()) {
    throw config_error("from_data: payload size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(n->shape));
  }
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->tracked = requires_grad;
  Tensor t;
  t.impl_ = std::move(n);
  return t;
}

Tensor& Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  impl_->tracked = v;
  return *this;
}

std::vector<double>& Tensor::grad_vec() {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

double Tensor::item() const {
  if (numel() != 1) {
    throw config_error("item: tensor has " + std::to_string(numel()) +
                       " elements, expected 1");
  }
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = impl_->shape;
  n->data = impl_->data;
  Tensor t;
  t.impl_ = std::move(n);
  return t;
}

Tensor Tensor::make_op(const char* name, Shape shape, std::vector<double> data,
                       std::vector<Tensor> parents,
                       std::function<void(detail::Node&)> backward) {
  check_finite(name, data);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  if (static_cast<int64_t>(data.size()) != n->numel()) {
    throw config_error(std::string(name) + ": output payload does not match shape");
  }
  n->data = std::move(data);
  n->op = name;
  bool any_tracked = false;
  for (const Tensor& p : parents) any_tracked = any_tracked || p.node()->tracked;
  if (g_grad_enabled && any_tracked) {
    n->tracked = true;
    for (const Tensor& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
    ++g_tracked_nodes;
  }
  Tensor t;
  t.impl_ = std::move(n);
  return t;
}

void Tensor::backward() const {
  if (numel() != 1) throw config_error("backward: loss must be a scalar");
  if (!impl_->tracked) return;  // no tracked ancestors; nothing to accumulate

  // Iterative post-order DFS for a reverse topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* p = node->parents[idx++].get();
      if (p->tracked && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  impl_->ensure_grad();
  impl_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---- op helpers ----

namespace {

detail::Node* raw(const Tensor& t) { return t.node().get(); }

// Accumulate g into node's grad buffer.
void acc(detail::Node* n, const double* g, int64_t count) {
  n->ensure_grad();
  double* dst = n->grad.data();
  for (int64_t i = 0; i < count; ++i) dst[i] += g[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a, b);
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  MMap(out.data(), m, n).noalias() = CMap(a.data(), m, k) * CMap(b.data(), k, n);
  detail::Node *pa = raw(a), *pb = raw(b);
  return Tensor::make_op("matmul", {m, n}, std::move(out), {a, b},
                         [pa, pb, m, k, n](detail::Node& self) {
                           CMap g(self.grad.data(), m, n);
                           if (pa->tracked) {
                             pa->ensure_grad();
                             MMap(pa->grad.data(), m, k).noalias() +=
                                 g * CMap(pb->data.data(), k, n).transpose();
                           }
                           if (pb->tracked) {
                             pb->ensure_grad();
                             MMap(pb->grad.data(), k, n).noalias() +=
                                 CMap(pa->data.data(), m, k).transpose() * g;
                           }
                         });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) shape_fail("matmul_nt", a, b);
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(static_cast<size_t>(m * n));
  MMap(out.data(), m, n).noalias() =
      CMap(a.data(), m, k) * CMap(b.data(), n, k).transpose();
  detail::Node *pa = raw(a), *pb = raw(b);
  return Tensor::make_op("matmul_nt", {m, n}, std::move(out), {a, b},
                         [pa, pb, m, k, n](detail::Node& self) {
                           CMap g(self.grad.data(), m, n);
                           if (pa->tracked) {
                             pa->ensure_grad();
                             MMap(pa->grad.data(), m, k).noalias() +=
                                 g * CMap(pb->data.data(), n, k);
                           }
                           if (pb->tracked) {
                             pb->ensure_grad();
                             MMap(pb->grad.data(), n, k).noalias() +=
                                 g.transpose() * CMap(pa->data.data(), m, k);
                           }
                         });
}

namespace {

Tensor ewise2(const char* name, const Tensor& a, const Tensor& b,
              const std::function<double(double, double)>& f,
              const std::function<void(double, double, double, double&, double&)>& df) {
  if (a.shape() != b.shape()) shape_fail(name, a, b);
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = f(a.data()[i], b.data()[i]);
  detail::Node *pa = raw(a), *pb = raw(b);
  return Tensor::make_op(name, a.shape(), std::move(out), {a, b},
                         [pa, pb, n, df](detail::Node& self) {
                           const bool ta = pa->tracked, tb = pb->tracked;
                           if (ta) pa->ensure_grad();
                           if (tb) pb->ensure_grad();
                           for (int64_t i = 0; i < n; ++i) {
                             double da = 0.0, db = 0.0;
                             df(pa->data[i], pb->data[i], self.grad[i], da, db);
                             if (ta) pa->grad[i] += da;
                             if (tb) pb->grad[i] += db;
                           }
                         });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return ewise2("add", a, b, [](double x, double y) { return x + y; },
                [](double, double, double g, double& da, double& db) {
                  da = g;
                  db = g;
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ewise2("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double, double g, double& da, double& db) {
                  da = g;
                  db = -g;
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ewise2("mul", a, b, [](double x, double y) { return x * y; },
                [](double x, double y, double g, double& da, double& db) {
                  da = g * y;
                  db = g * x;
                });
}

Tensor affine(const Tensor& a, double alpha, double beta) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = alpha * a.data()[i] + beta;
  detail::Node* pa = raw(a);
  return Tensor::make_op("affine", a.shape(), std::move(out), {a},
                         [pa, n, alpha](detail::Node& self) {
                           if (!pa->tracked) return;
                           pa->ensure_grad();
                           for (int64_t i = 0; i < n; ++i)
                             pa->grad[i] += alpha * self.grad[i];
                         });
}

Tensor scale(const Tensor& a, double c) { return affine(a, c, 0.0); }

Tensor neg(const Tensor& a) { return affine(a, -1.0, 0.0); }

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw config_error("mul_scalar: scalar operand must have 1 element");
  const int64_t n = a.numel();
  const double sv = s.data()[0];
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = a.data()[i] * sv;
  detail::Node *pa = raw(a), *ps = raw(s);
  return Tensor::make_op("mul_scalar", a.shape(), std::move(out), {a, s},
                         [pa, ps, n](detail::Node& self) {
                           const double sv = ps->data[0];
                           if (pa->tracked) {
                             pa->ensure_grad();
                             for (int64_t i = 0; i < n; ++i)
                               pa->grad[i] += self.grad[i] * sv;
                           }
                           if (ps->tracked) {
                             ps->ensure_grad();
                             double acc_s = 0.0;
                             for (int64_t i = 0; i < n; ++i)
                               acc_s += self.grad[i] * pa->data[i];
                             ps->grad[0] += acc_s;
                           }
                         });
}

Tensor reciprocal(const Tensor& s) {
  if (s.numel() != 1) throw config_error("reciprocal: operand must have 1 element");
  const double v = s.data()[0];
  if (v == 0.0) throw numeric_error("reciprocal of zero");
  detail::Node* ps = raw(s);
  return Tensor::make_op("reciprocal", s.shape(), {1.0 / v}, {s},
                         [ps](detail::Node& self) {
                           if (!ps->tracked) return;
                           ps->ensure_grad();
                           const double v = ps->data[0];
                           ps->grad[0] += -self.grad[0] / (v * v);
                         });
}

Tensor sigmoid(const Tensor& a) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
  detail::Node* pa = raw(a);
  return Tensor::make_op("sigmoid", a.shape(), std::move(out), {a},
                         [pa, n](detail::Node& self) {
                           if (!pa->tracked) return;
                           pa->ensure_grad();
                           for (int64_t i = 0; i < n; ++i) {
                             const double y = self.data[i];
                             pa->grad[i] += self.grad[i] * y * (1.0 - y);
                           }
                         });
}

Tensor silu(const Tensor& a) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    out[i] = x / (1.0 + std::exp(-x));
  }
  detail::Node* pa = raw(a);
  return Tensor::make_op("silu", a.shape(), std::move(out), {a},
                         [pa, n](detail::Node& self) {
                           if (!pa->tracked) return;
                           pa->ensure_grad();
                           for (int64_t i = 0; i < n; ++i) {
                             const double x = pa->data[i];
                             const double s = 1.0 / (1.0 + std::exp(-x));
                             pa->grad[i] += self.grad[i] * s * (1.0 + x * (1.0 - s));
                           }
                         });
}

Tensor log_op(const Tensor& a) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    if (a.data()[i] <= 0.0) throw numeric_error("log of a non-positive value");
    out[i] = std::log(a.data()[i]);
  }
  detail::Node* pa = raw(a);
  return Tensor::make_op("log", a.shape(), std::move(out), {a},
                         [pa, n](detail::Node& self) {
                           if (!pa->tracked) return;
                           pa->ensure_grad();
                           for (int64_t i = 0; i < n; ++i)
                             pa->grad[i] += self.grad[i] / pa->data[i];
                         });
}

Tensor rms_norm(const Tensor& x, const Tensor& sc, double eps) {
  int64_t rows, cols;
  as_2d(x, rows, cols);
  if (sc.numel() != cols) shape_fail("rms_norm", x, sc);
  std::vector<double> out(static_cast<size_t>(rows * cols));
  std::vector<double> inv(static_cast<size_t>(rows));
  for (int64_t t = 0; t < rows; ++t) {
    const double* xr = x.data() + t * cols;
    double ms = 0.0;
    for (int64_t j = 0; j < cols; ++j) ms += xr[j] * xr[j];
    ms = ms / static_cast<double>(cols) + eps;
    if (ms <= 0.0) throw numeric_error("rms_norm of an all-zero row with eps = 0");
    inv[static_cast<size_t>(t)] = 1.0 / std::sqrt(ms);
    for (int64_t j = 0; j < cols; ++j)
      out[static_cast<size_t>(t * cols + j)] =
          xr[j] * inv[static_cast<size_t>(t)] * sc.data()[j];
  }
  detail::Node *px = raw(x), *ps = raw(sc);
  return Tensor::make_op(
      "rms_norm", x.shape(), std::move(out), {x, sc},
      [px, ps, rows, cols, inv](detail::Node& self) {
        const bool tx = px->tracked, ts = ps->tracked;
        if (tx) px->ensure_grad();
        if (ts) ps->ensure_grad();
        for (int64_t t = 0; t < rows; ++t) {
          const double* xr = px->data.data() + t * cols;
          const double* gr = self.grad.data() + t * cols;
          const double it = inv[static_cast<size_t>(t)];
          if (tx) {
            double dot = 0.0;  // sum_k g_k * s_k * x_k
            for (int64_t j = 0; j < cols; ++j) dot += gr[j] * ps->data[j] * xr[j];
            const double coef = it * it * it * dot / static_cast<double>(cols);
            for (int64_t j = 0; j < cols; ++j)
              px->grad[static_cast<size_t>(t * cols + j)] +=
                  gr[j] * it * ps->data[j] - coef * xr[j];
          }
          if (ts) {
            for (int64_t j = 0; j < cols; ++j)
              ps->grad[static_cast<size_t>(j)] += gr[j] * xr[j] * it;
          }
        }
      });
}

Tensor softmax_lastdim(const Tensor& x, const Tensor* mask) {
  int64_t rows, cols;
  as_2d(x, rows, cols);
  bool mask_full = false;
  if (mask) {
    if (mask->shape() == x.shape()) {
      mask_full = true;
    } else if (mask->numel() != cols) {
      shape_fail("softmax", x, *mask);
    }
  }
  std::vector<double> out(static_cast<size_t>(rows * cols));
  for (int64_t t = 0; t < rows; ++t) {
    const double* xr = x.data() + t * cols;
    const double* mr = mask ? mask->data() + (mask_full ? t * cols : 0) : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < cols; ++j) {
      const double v = xr[j] + (mr ? mr[j] : 0.0);
      if (v > mx) mx = v;
    }
    if (!std::isfinite(mx)) {
      throw numeric_error("softmax over a fully masked row (degenerate distribution)");
    }
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double v = xr[j] + (mr ? mr[j] : 0.0);
      const double e = std::exp(v - mx);
      out[static_cast<size_t>(t * cols + j)] = e;
      s += e;
    }
    const double invs = 1.0 / s;
    for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(t * cols + j)] *= invs;
  }
  detail::Node* px = raw(x);
  return Tensor::make_op(
      "softmax", x.shape(), std::move(out), {x},
      [px, rows, cols](detail::Node& self) {
        if (!px->tracked) return;
        px->ensure_grad();
        for (int64_t t = 0; t < rows; ++t) {
          const double* p = self.data.data() + t * cols;
          const double* g = self.grad.data() + t * cols;
          double dot = 0.0;
          for (int64_t j = 0; j < cols; ++j) dot += g[j] * p[j];
          for (int64_t j = 0; j < cols; ++j)
            px->grad[static_cast<size_t>(t * cols + j)] += p[j] * (g[j] - dot);
        }
      });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw config_error("concat_cols: no operands");
  const int64_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 1;
  int64_t total = 0;
  for (const Tensor& p : parts) {
    int64_t r, c;
    as_2d(p, r, c);
    if (r != rows) shape_fail("concat_cols", parts[0], p);
    total += c;
  }
  std::vector<double> out(static_cast<size_t>(rows * total));
  int64_t off = 0;
  for (const Tensor& p : parts) {
    int64_t r, c;
    as_2d(p, r, c);
    for (int64_t t = 0; t < rows; ++t)
      std::memcpy(out.data() + t * total + off, p.data() + t * c,
                  static_cast<size_t>(c) * sizeof(double));
    off += c;
  }
  std::vector<detail::Node*> pn;
  std::vector<int64_t> widths;
  for (const Tensor& p : parts) {
    pn.push_back(raw(p));
    int64_t r, c;
    as_2d(p, r, c);
    widths.push_back(c);
  }
  return Tensor::make_op(
      "concat_cols", {rows, total}, std::move(out), parts,
      [pn, widths, rows, total](detail::Node& self) {
        int64_t off = 0;
        for (size_t i = 0; i < pn.size(); ++i) {
          const int64_t c = widths[i];
          if (pn[i]->tracked) {
            pn[i]->ensure_grad();
            for (int64_t t = 0; t < rows; ++t)
              for (int64_t j = 0; j < c; ++j)
                pn[i]->grad[static_cast<size_t>(t * c + j)] +=
                    self.grad[static_cast<size_t>(t * total + off + j)];
          }
          off += c;
        }
      });
}

Tensor slice_cols(const Tensor& x, int64_t start, int64_t count) {
  int64_t rows, cols;
  as_2d(x, rows, cols);
  if (start < 0 || count <= 0 || start + count > cols) {
    throw config_error("slice_cols: range [" + std::to_string(start) + "," +
                       std::to_string(start + count) + ") outside width " +
                       std::to_string(cols));
  }
  std::vector<double> out(static_cast<size_t>(rows * count));
  for (int64_t t = 0; t < rows; ++t)
    std::memcpy(out.data() + t * count, x.data() + t * cols + start,
                static_cast<size_t>(count) * sizeof(double));
  detail::Node* px = raw(x);
  return Tensor::make_op("slice_cols", {rows, count}, std::move(out), {x},
                         [px, rows, cols, start, count](detail::Node& self) {
                           if (!px->tracked) return;
                           px->ensure_grad();
                           for (int64_t t = 0; t < rows; ++t)
                             for (int64_t j = 0; j < count; ++j)
                               px->grad[static_cast<size_t>(t * cols + start + j)] +=
                                   self.grad[static_cast<size_t>(t * count + j)];
                         });
}

Tensor embedding(const Tensor& weight, const std::vector<int64_t>& ids) {
  if (weight.rank() != 2) throw config_error("embedding: weight must be rank 2");
  const int64_t v = weight.dim(0), d = weight.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  for (int64_t t = 0; t < n; ++t) {
    if (ids[static_cast<size_t>(t)] < 0 || ids[static_cast<size_t>(t)] >= v) {
      throw data_error("token id " + std::to_string(ids[static_cast<size_t>(t)]) +
                       " out of range for vocabulary " + std::to_string(v));
    }
  }
  std::vector<double> out(static_cast<size_t>(n * d));
  for (int64_t t = 0; t < n; ++t)
    std::memcpy(out.data() + t * d, weight.data() + ids[static_cast<size_t>(t)] * d,
                static_cast<size_t>(d) * sizeof(double));
  detail::Node* pw = raw(weight);
  std::vector<int64_t> ids_copy = ids;
  return Tensor::make_op("embedding", {n, d}, std::move(out), {weight},
                         [pw, ids_copy, d](detail::Node& self) {
                           if (!pw->tracked) return;
                           pw->ensure_grad();
                           const int64_t n = static_cast<int64_t>(ids_copy.size());
                           for (int64_t t = 0; t < n; ++t) {
                             double* wr = pw->grad.data() + ids_copy[static_cast<size_t>(t)] * d;
                             const double* gr = self.grad.data() + t * d;
                             for (int64_t j = 0; j < d; ++j) wr[j] += gr[j];
                           }
                         });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
  if (logits.rank() != 2) throw config_error("cross_entropy: logits must be rank 2");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n) {
    throw config_error("cross_entropy: " + std::to_string(targets.size()) +
                       " targets for " + std::to_string(n) + " rows");
  }
  for (int64_t t = 0; t < n; ++t) {
    if (targets[static_cast<size_t>(t)] < 0 || targets[static_cast<size_t>(t)] >= v) {
      throw data_error("target id " + std::to_string(targets[static_cast<size_t>(t)]) +
                       " out of range for vocabulary " + std::to_string(v));
    }
  }
  // Cache row softmax for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n * v));
  double total = 0.0;
  for (int64_t t = 0; t < n; ++t) {
    const double* lr = logits.data() + t * v;
    double mx = lr[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
    double s = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      const double e = std::exp(lr[j] - mx);
      (*probs)[static_cast<size_t>(t * v + j)] = e;
      s += e;
    }
    const double lse = mx + std::log(s);
    total += lse - lr[targets[static_cast<size_t>(t)]];
    const double invs = 1.0 / s;
    for (int64_t j = 0; j < v; ++j) (*probs)[static_cast<size_t>(t * v + j)] *= invs;
  }
  detail::Node* pl = raw(logits);
  std::vector<int64_t> tg = targets;
  return Tensor::make_op(
      "cross_entropy", {1}, {total / static_cast<double>(n)}, {logits},
      [pl, tg, probs, n, v](detail::Node& self) {
        if (!pl->tracked) return;
        pl->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(n);
        for (int64_t t = 0; t < n; ++t) {
          const double* pr = probs->data() + t * v;
          double* gr = pl->grad.data() + t * v;
          for (int64_t j = 0; j < v; ++j) gr[j] += g * pr[j];
          gr[tg[static_cast<size_t>(t)]] -= g;
        }
      });
}

Tensor mean_rows(const Tensor& x) {
  int64_t rows, cols;
  as_2d(x, rows, cols);
  std::vector<double> out(static_cast<size_t>(cols), 0.0);
  for (int64_t t = 0; t < rows; ++t)
    for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(j)] += x.data()[t * cols + j];
  const double inv = 1.0 / static_cast<double>(rows);
  for (double& o : out) o *= inv;
  detail::Node* px = raw(x);
  return Tensor::make_op("mean_rows", {cols}, std::move(out), {x},
                         [px, rows, cols](detail::Node& self) {
                           if (!px->tracked) return;
                           px->ensure_grad();
                           const double inv = 1.0 / static_cast<double>(rows);
                           for (int64_t t = 0; t < rows; ++t)
                             for (int64_t j = 0; j < cols; ++j)
                               px->grad[static_cast<size_t>(t * cols + j)] +=
                                   self.grad[static_cast<size_t>(j)] * inv;
                         });
}

namespace {

Tensor reduce_all(const char* name, const Tensor& x, double w) {
  const int64_t n = x.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += x.data()[i];
  detail::Node* px = raw(x);
  return Tensor::make_op(name, {1}, {s * w}, {x},
                         [px, n, w](detail::Node& self) {
                           if (!px->tracked) return;
                           px->ensure_grad();
                           const double g = self.grad[0] * w;
                           for (int64_t i = 0; i < n; ++i) px->grad[i] += g;
                         });
}

}  // namespace

Tensor sum_all(const Tensor& x) { return reduce_all("sum_all", x, 1.0); }

Tensor mean_all(const Tensor& x) {
  return reduce_all("mean_all", x, 1.0 / static_cast<double>(x.numel()));
}

Tensor mul_colvec(const Tensor& x, const Tensor& col) {
  int64_t rows, cols;
  as_2d(x, rows, cols);
  if (col.numel() != rows) shape_fail("mul_colvec", x, col);
  std::vector<double> out(static_cast<size_t>(rows * cols));
  for (int64_t t = 0; t < rows; ++t) {
    const double c = col.data()[t];
    for (int64_t j = 0; j < cols; ++j)
      out[static_cast<size_t>(t * cols + j)] = x.data()[t * cols + j] * c;
  }
  detail::Node *px = raw(x), *pc = raw(col);
  return Tensor::make_op("mul_colvec", x.shape(), std::move(out), {x, col},
                         [px, pc, rows, cols](detail::Node& self) {
                           const bool tx = px->tracked, tc = pc->tracked;
                           if (tx) px->ensure_grad();
                           if (tc) pc->ensure_grad();
                           for (int64_t t = 0; t < rows; ++t) {
                             const double c = pc->data[static_cast<size_t>(t)];
                             double dc = 0.0;
                             for (int64_t j = 0; j < cols; ++j) {
                               const double g = self.grad[static_cast<size_t>(t * cols + j)];
                               if (tx) px->grad[static_cast<size_t>(t * cols + j)] += g * c;
                               dc += g * px->data[static_cast<size_t>(t * cols + j)];
                             }
                             if (tc) pc->grad[static_cast<size_t>(t)] += dc;
                           }
                         });
}

Tensor row_broadcast(const Tensor& v, int64_t rows) {
  if (rows <= 0) throw config_error("row_broadcast: rows must be positive");
  const int64_t cols = v.numel();
  std::vector<double> out(static_cast<size_t>(rows * cols));
  for (int64_t t = 0; t < rows; ++t)
    std::memcpy(out.data() + t * cols, v.data(), static_cast<size_t>(cols) * sizeof(double));
  detail::Node* pv = raw(v);
  return Tensor::make_op("row_broadcast", {rows, cols}, std::move(out), {v},
                         [pv, rows, cols](detail::Node& self) {
                           if (!pv->tracked) return;
                           pv->ensure_grad();
                           for (int64_t t = 0; t < rows; ++t)
                             for (int64_t j = 0; j < cols; ++j)
                               pv->grad[static_cast<size_t>(j)] +=
                                   self.grad[static_cast<size_t>(t * cols + j)];
                         });
}

Tensor grad_scale(const Tensor& x, double factor) {
  std::vector<double> out(x.vec());
  detail::Node* px = raw(x);
  const int64_t n = x.numel();
  return Tensor::make_op("grad_scale", x.shape(), std::move(out), {x},
                         [px, n, factor](detail::Node& self) {
                           if (!px->tracked) return;
                           px->ensure_grad();
                           for (int64_t i = 0; i < n; ++i)
                             px->grad[i] += factor * self.grad[i];
                         });
}

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<NamedParam>& params, double eps) {
  // Below 1e-7 the difference quotient drowns in f-eval rounding; above
  // 1e-4 the O(eps^2) truncation term dominates.
  if (eps < 1e-7 || eps > 1e-4) {
    char msg[64];
    std::snprintf(msg, sizeof msg, "grad_check step %g outside [1e-7, 1e-4]",
                  eps);
    throw config_error(msg);
  }
  // Analytic pass.
  for (const NamedParam& p : params) p.tensor.node()->grad.clear();
  Tensor loss;
  try {
    loss = loss_fn();
  } catch (const numeric_error& e) {
    throw numeric_error(std::string("grad_check aborted during analytic pass: ") + e.what());
  }
  if (!std::isfinite(loss.item())) {
    throw numeric_error("grad_check: non-finite loss in analytic pass");
  }
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (const NamedParam& p : params) {
    if (p.tensor.node()->grad.empty()) {
      analytic.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0);
    } else {
      analytic.push_back(p.tensor.node()->grad);
    }
  }

  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const NamedParam& p = params[pi];
    if (!p.tensor.requires_grad()) continue;  // frozen
    double* d = const_cast<double*>(p.tensor.data());
    const int64_t n = p.tensor.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double orig = d[i];
      double f1, f2;
      try {
        NoGradGuard ng;
        d[i] = orig + eps;
        f1 = loss_fn().item();
        d[i] = orig - eps;
        f2 = loss_fn().item();
      } catch (const numeric_error& e) {
        d[i] = orig;
        throw numeric_error("grad_check aborted while perturbing " + p.name + ": " + e.what());
      }
      d[i] = orig;
      if (!std::isfinite(f1) || !std::isfinite(f2)) {
        throw numeric_error("grad_check: non-finite loss while perturbing " + p.name);
      }
      const double numeric = (f1 - f2) / (2.0 * eps);
      const double a = analytic[pi][static_cast<size_t>(i)];
      // The denominator floor turns the test absolute for near-zero
      // gradients. Central differences resolve |a - n| only down to about
      // |loss| * 1e-16 / eps (f-eval rounding), so a 1e-8 floor would demand
      // impossible precision; 1e-4 keeps the absolute tolerance at
      // floor * threshold = 1e-9, well above that noise.
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-4});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace hrmlm
