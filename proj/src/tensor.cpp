#include "xdr/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace xdr {

void numeric_error(const std::string& msg) { throw std::runtime_error(msg); }

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_size(const std::vector<int>& shape) {
  if (shape.empty()) numeric_error("tensor rank must be >= 1");
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) numeric_error("tensor shape extents must be positive");
    n *= e;
  }
  return n;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) numeric_error(std::string(op) + " produced a non-finite value");
  }
}

std::shared_ptr<TensorNode> make_leaf(std::vector<int> shape, std::vector<double> data,
                                      bool requires_grad) {
  int64_t n = shape_size(shape);
  if (static_cast<int64_t>(data.size()) != n) numeric_error("tensor data does not match shape");
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

// Builds the output node for an op; parent links and the backward closure are
// recorded only when some input carries gradient and recording is enabled.
Tensor op_node(const char* op, std::vector<int> shape, std::vector<double> data,
               const std::vector<Tensor>& inputs, std::function<void(TensorNode&)> fn) {
  check_finite(data, op);
  auto node = make_leaf(std::move(shape), std::move(data), false);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any && g_grad_enabled) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor(node);
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) numeric_error(std::string(op) + ": unexpected tensor rank");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) numeric_error(std::string(op) + ": shape mismatch");
}

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// ---- Tensor basics ----

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  int64_t n = shape_size(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  int64_t n = shape_size(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, double stddev, Rng& rng, bool requires_grad) {
  int64_t n = shape_size(shape);
  std::vector<double> d(n);
  for (int64_t i = 0; i < n; ++i) d[i] = stddev * rng.gaussian();
  return Tensor(make_leaf(std::move(shape), std::move(d), requires_grad));
}

int Tensor::rows() const {
  if (rank() != 2) numeric_error("rows(): tensor is not 2-D");
  return node_->shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) numeric_error("cols(): tensor is not 2-D");
  return node_->shape[1];
}

double Tensor::at(int i) const { return node_->data.at(static_cast<size_t>(i)); }
double Tensor::at(int r, int c) const {
  return node_->data.at(static_cast<size_t>(r) * cols() + c);
}
double& Tensor::mut(int i) { return node_->data.at(static_cast<size_t>(i)); }
double& Tensor::mut(int r, int c) {
  return node_->data.at(static_cast<size_t>(r) * cols() + c);
}
double Tensor::grad_at(int i) const { return node_->grad.at(static_cast<size_t>(i)); }
double Tensor::grad_at(int r, int c) const {
  return node_->grad.at(static_cast<size_t>(r) * cols() + c);
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(node_->shape, node_->data, false));
}

// ---- grad mode ----

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- graph ----

ComputeGraph ComputeGraph::trace(const Tensor& root) {
  ComputeGraph g;
  if (!root.defined()) numeric_error("trace: undefined tensor");
  std::unordered_set<const TensorNode*> seen;
  struct Frame {
    std::shared_ptr<TensorNode> node;
    size_t next = 0;
  };
  // Iterative post-order: a node is emitted only after all its parents.
  std::vector<Frame> stack;
  stack.push_back({root.node(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (seen.count(f.node.get())) {
      stack.pop_back();
      continue;
    }
    if (f.next < f.node->parents.size()) {
      std::shared_ptr<TensorNode> p = f.node->parents[f.next];
      ++f.next;
      if (!seen.count(p.get())) stack.push_back({std::move(p), 0});
      continue;
    }
    seen.insert(f.node.get());
    g.nodes.push_back(f.node);
    stack.pop_back();
  }
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) numeric_error("backward: undefined tensor");
  if (loss.size() != 1) numeric_error("backward: loss must be a scalar");
  ComputeGraph g = ComputeGraph::trace(loss);
  loss.raw()->ensure_grad();
  loss.raw()->grad[0] = 1.0;
  for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
    TensorNode* n = it->get();
    if (n->backward_fn && n->requires_grad) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---- raw matmul kernels ----

void matmul_nn(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* crow = C + static_cast<size_t>(i) * n;
    const double* arow = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      double a = arow[p];
      const double* brow = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n) {
  // C[m x n] += A[m x k] * B[n x k]^T, via an explicit transpose of B so the
  // inner loop stays contiguous.
  std::vector<double> bt(static_cast<size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < k; ++p) bt[static_cast<size_t>(p) * n + j] = B[static_cast<size_t>(j) * k + p];
  matmul_nn(A, bt.data(), C, m, k, n);
}

void matmul_tn(const double* A, const double* B, double* C, int m, int k, int n) {
  // C[m x n] += A[k x m]^T * B[k x n]
  for (int p = 0; p < k; ++p) {
    const double* arow = A + static_cast<size_t>(p) * m;
    const double* brow = B + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double a = arow[i];
      double* crow = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// ---- ops ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return op_node("add", a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = self.parents[pi];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return op_node("sub", a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return op_node("mul", a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  if (!std::isfinite(s)) numeric_error("scale: non-finite factor");
  std::vector<double> out(a.data());
  for (double& x : out) x *= s;
  return op_node("scale", a.shape(), std::move(out), {a}, [s](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += s * self.grad[i];
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require_rank(m, 2, "add_rowvec");
  require_rank(v, 1, "add_rowvec");
  int n = m.rows(), d = m.cols();
  if (v.shape()[0] != d) numeric_error("add_rowvec: vector length mismatch");
  std::vector<double> out(m.data());
  const auto& vd = v.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += vd[j];
  return op_node("add_rowvec", m.shape(), std::move(out), {m, v}, [n, d](TensorNode& self) {
    auto& pm = self.parents[0];
    auto& pv = self.parents[1];
    if (pm->requires_grad) {
      pm->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pm->grad[i] += self.grad[i];
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) pv->grad[j] += self.grad[static_cast<size_t>(i) * d + j];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    numeric_error("matmul: inner dimensions disagree: [" + std::to_string(m) + " x " +
                  std::to_string(k) + "] vs [" + std::to_string(b.rows()) + " x " +
                  std::to_string(n) + "]");
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  matmul_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return op_node("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      matmul_nt(self.grad.data(), pb->data.data(), pa->grad.data(), m, n, k);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      matmul_tn(pa->data.data(), self.grad.data(), pb->grad.data(), k, m, n);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  int r = a.rows(), c = a.cols();
  std::vector<double> out(static_cast<size_t>(r) * c);
  const auto& ad = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = ad[static_cast<size_t>(i) * c + j];
  return op_node("transpose", {c, r}, std::move(out), {a}, [r, c](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        p->grad[static_cast<size_t>(i) * c + j] += self.grad[static_cast<size_t>(j) * r + i];
  });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_size(shape) != a.size()) numeric_error("reshape: element count mismatch");
  return op_node("reshape", std::move(shape), a.data(), {a}, [](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  require_rank(a, 2, "slice_rows");
  int r = a.rows(), c = a.cols();
  if (r0 < 0 || r1 > r || r0 >= r1) numeric_error("slice_rows: bad row range");
  std::vector<double> out(a.data().begin() + static_cast<size_t>(r0) * c,
                          a.data().begin() + static_cast<size_t>(r1) * c);
  return op_node("slice_rows", {r1 - r0, c}, std::move(out), {a}, [r0, c](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    size_t off = static_cast<size_t>(r0) * c;
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[off + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  require_rank(a, 2, "slice_cols");
  int r = a.rows(), c = a.cols();
  if (c0 < 0 || c1 > c || c0 >= c1) numeric_error("slice_cols: bad column range");
  int w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(r) * w);
  const auto& ad = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) out[static_cast<size_t>(i) * w + j] = ad[static_cast<size_t>(i) * c + c0 + j];
  return op_node("slice_cols", {r, w}, std::move(out), {a}, [r, c, c0, w](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        p->grad[static_cast<size_t>(i) * c + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) numeric_error("concat_rows: no inputs");
  int c = parts[0].cols();
  int total = 0;
  for (const auto& t : parts) {
    require_rank(t, 2, "concat_rows");
    if (t.cols() != c) numeric_error("concat_rows: column mismatch");
    total += t.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(total) * c);
  for (const auto& t : parts) out.insert(out.end(), t.data().begin(), t.data().end());
  std::vector<int> row_of(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) row_of[i] = parts[i].rows();
  return op_node("concat_rows", {total, c}, std::move(out), parts,
                 [row_of, c](TensorNode& self) {
                   size_t off = 0;
                   for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                     auto& p = self.parents[pi];
                     size_t count = static_cast<size_t>(row_of[pi]) * c;
                     if (p->requires_grad) {
                       p->ensure_grad();
                       for (size_t i = 0; i < count; ++i) p->grad[i] += self.grad[off + i];
                     }
                     off += count;
                   }
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) numeric_error("concat_cols: no inputs");
  int r = parts[0].rows();
  int total = 0;
  for (const auto& t : parts) {
    require_rank(t, 2, "concat_cols");
    if (t.rows() != r) numeric_error("concat_cols: row mismatch");
    total += t.cols();
  }
  std::vector<double> out(static_cast<size_t>(r) * total);
  std::vector<int> col_of(parts.size());
  {
    int off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      int w = parts[pi].cols();
      col_of[pi] = w;
      const auto& pd = parts[pi].data();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          out[static_cast<size_t>(i) * total + off + j] = pd[static_cast<size_t>(i) * w + j];
      off += w;
    }
  }
  return op_node("concat_cols", {r, total}, std::move(out), parts,
                 [col_of, r, total](TensorNode& self) {
                   int off = 0;
                   for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                     auto& p = self.parents[pi];
                     int w = col_of[pi];
                     if (p->requires_grad) {
                       p->ensure_grad();
                       for (int i = 0; i < r; ++i)
                         for (int j = 0; j < w; ++j)
                           p->grad[static_cast<size_t>(i) * w + j] +=
                               self.grad[static_cast<size_t>(i) * total + off + j];
                     }
                     off += w;
                   }
                 });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_rank(table, 2, "gather_rows");
  int v = table.rows(), d = table.cols();
  if (ids.empty()) numeric_error("gather_rows: empty id list");
  for (int id : ids)
    if (id < 0 || id >= v) numeric_error("gather_rows: id out of range");
  int n = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(n) * d);
  const auto& td = table.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] = td[static_cast<size_t>(ids[i]) * d + j];
  return op_node("gather_rows", {n, d}, std::move(out), {table}, [ids, d](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < d; ++j)
        p->grad[static_cast<size_t>(ids[i]) * d + j] += self.grad[i * d + j];
  });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.data());
  for (double& x : out) x = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
  return op_node("gelu", a.shape(), std::move(out), {a}, [](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = p->data[i];
      double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
      double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
      p->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

namespace {

// Shared row/column softmax. stride==1 walks a contiguous row; stride==cols
// walks a column.
void softmax_span(const double* in, double* out, int len, size_t stride) {
  double mx = in[0];
  for (int i = 1; i < len; ++i) mx = std::max(mx, in[i * stride]);
  double sum = 0.0;
  for (int i = 0; i < len; ++i) {
    double e = std::exp(in[i * stride] - mx);
    out[i * stride] = e;
    sum += e;
  }
  for (int i = 0; i < len; ++i) out[i * stride] /= sum;
}

void softmax_span_backward(const double* y, const double* g, double* dx, int len, size_t stride) {
  double dot = 0.0;
  for (int i = 0; i < len; ++i) dot += y[i * stride] * g[i * stride];
  for (int i = 0; i < len; ++i) dx[i * stride] += y[i * stride] * (g[i * stride] - dot);
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  int r, c;
  bool over_rows;
  if (a.rank() == 1) {
    if (axis != -1 && axis != 0) numeric_error("softmax: bad axis");
    r = 1;
    c = a.shape()[0];
    over_rows = true;
  } else if (a.rank() == 2) {
    r = a.rows();
    c = a.cols();
    if (axis == -1 || axis == 1) over_rows = true;
    else if (axis == 0) over_rows = false;
    else numeric_error("softmax: bad axis");
  } else {
    numeric_error("softmax: rank must be 1 or 2");
  }
  std::vector<double> out(a.data().size());
  const double* in = a.data().data();
  if (over_rows) {
    for (int i = 0; i < r; ++i)
      softmax_span(in + static_cast<size_t>(i) * c, out.data() + static_cast<size_t>(i) * c, c, 1);
  } else {
    for (int j = 0; j < c; ++j) softmax_span(in + j, out.data() + j, r, c);
  }
  return op_node("softmax", a.shape(), std::move(out), {a},
                 [r, c, over_rows](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   if (over_rows) {
                     for (int i = 0; i < r; ++i) {
                       size_t off = static_cast<size_t>(i) * c;
                       softmax_span_backward(self.data.data() + off, self.grad.data() + off,
                                             p->grad.data() + off, c, 1);
                     }
                   } else {
                     for (int j = 0; j < c; ++j)
                       softmax_span_backward(self.data.data() + j, self.grad.data() + j,
                                             p->grad.data() + j, r, c);
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  int n, d;
  if (x.rank() == 1) {
    n = 1;
    d = x.shape()[0];
  } else if (x.rank() == 2) {
    n = x.rows();
    d = x.cols();
  } else {
    numeric_error("layer_norm: rank must be 1 or 2");
  }
  if (d < 2) numeric_error("layer_norm: normalized dimension must be >= 2");
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  if (gain.shape()[0] != d || bias.shape()[0] != d) numeric_error("layer_norm: gain/bias length mismatch");

  std::vector<double> out(x.data().size());
  std::vector<double> yhat(x.data().size());
  std::vector<double> inv_sigma(n);
  const auto& xd = x.data();
  const auto& gd = gain.data();
  const auto& bd = bias.data();
  for (int i = 0; i < n; ++i) {
    const double* row = xd.data() + static_cast<size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double t = row[j] - mu;
      var += t * t;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = is;
    for (int j = 0; j < d; ++j) {
      double yh = (row[j] - mu) * is;
      yhat[static_cast<size_t>(i) * d + j] = yh;
      out[static_cast<size_t>(i) * d + j] = gd[j] * yh + bd[j];
    }
  }
  return op_node("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                 [n, d, yhat = std::move(yhat), inv_sigma = std::move(inv_sigma)](TensorNode& self) {
                   auto& px = self.parents[0];
                   auto& pg = self.parents[1];
                   auto& pb = self.parents[2];
                   const auto& gd = pg->data;
                   std::vector<double> gy(d);
                   for (int i = 0; i < n; ++i) {
                     size_t off = static_cast<size_t>(i) * d;
                     const double* g = self.grad.data() + off;
                     const double* yh = yhat.data() + off;
                     if (px->requires_grad) {
                       px->ensure_grad();
                       double m1 = 0.0, m2 = 0.0;
                       for (int j = 0; j < d; ++j) {
                         gy[j] = g[j] * gd[j];
                         m1 += gy[j];
                         m2 += gy[j] * yh[j];
                       }
                       m1 /= d;
                       m2 /= d;
                       for (int j = 0; j < d; ++j)
                         px->grad[off + j] += (gy[j] - m1 - yh[j] * m2) * inv_sigma[i];
                     }
                     if (pg->requires_grad) {
                       pg->ensure_grad();
                       for (int j = 0; j < d; ++j) pg->grad[j] += g[j] * yh[j];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (int j = 0; j < d; ++j) pb->grad[j] += g[j];
                     }
                   }
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return op_node("sum", {1}, {s}, {a}, [](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    double g = self.grad[0];
    for (double& x : p->grad) x += g;
  });
}

Tensor mean_rows(const Tensor& a) {
  require_rank(a, 2, "mean_rows");
  int n = a.rows(), d = a.cols();
  std::vector<double> out(d, 0.0);
  const auto& ad = a.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += ad[static_cast<size_t>(i) * d + j];
  for (int j = 0; j < d; ++j) out[j] /= n;
  return op_node("mean_rows", {d}, std::move(out), {a}, [n, d](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) p->grad[static_cast<size_t>(i) * d + j] += self.grad[j] / n;
  });
}

Tensor l2_normalize(const Tensor& a) {
  double nrm = 0.0;
  for (double x : a.data()) nrm += x * x;
  nrm = std::sqrt(nrm);
  if (nrm < 1e-12) numeric_error("l2_normalize: input norm is (near) zero");
  std::vector<double> out(a.data());
  for (double& x : out) x /= nrm;
  return op_node("l2_normalize", a.shape(), std::move(out), {a}, [nrm](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    double dot = 0.0;
    for (size_t i = 0; i < self.grad.size(); ++i) dot += self.data[i] * self.grad[i];
    for (size_t i = 0; i < self.grad.size(); ++i)
      p->grad[i] += (self.grad[i] - self.data[i] * dot) / nrm;
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask) {
  require_rank(logits, 2, "cross_entropy");
  int n = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != n) numeric_error("cross_entropy: target count mismatch");
  if (!mask.empty() && static_cast<int>(mask.size()) != n) numeric_error("cross_entropy: mask length mismatch");
  int kept = 0;
  for (int i = 0; i < n; ++i) {
    bool keep = mask.empty() || mask[i];
    if (!keep) continue;
    ++kept;
    if (targets[i] < 0 || targets[i] >= v) numeric_error("cross_entropy: target id out of range");
  }
  if (kept == 0) numeric_error("cross_entropy: all positions are masked out");
  const auto& zd = logits.data();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!(mask.empty() || mask[i])) continue;
    const double* row = zd.data() + static_cast<size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    loss += std::log(s) + mx - row[targets[i]];
  }
  loss /= kept;
  return op_node("cross_entropy", {1}, {loss}, {logits},
                 [n, v, kept, targets, mask](TensorNode& self) {
                   auto& p = self.parents[0];
                   if (!p->requires_grad) return;
                   p->ensure_grad();
                   double gs = self.grad[0] / kept;
                   for (int i = 0; i < n; ++i) {
                     if (!(mask.empty() || mask[i])) continue;
                     const double* row = p->data.data() + static_cast<size_t>(i) * v;
                     double* grow = p->grad.data() + static_cast<size_t>(i) * v;
                     double mx = row[0];
                     for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                     double s = 0.0;
                     for (int j = 0; j < v; ++j) s += std::exp(row[j] - mx);
                     for (int j = 0; j < v; ++j) {
                       double pj = std::exp(row[j] - mx) / s;
                       grow[j] += gs * (pj - (j == targets[i] ? 1.0 : 0.0));
                     }
                   }
                 });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  for (double y : targets.data())
    if (y < 0.0 || y > 1.0) numeric_error("bce_with_logits: targets must lie in [0, 1]");
  const auto& zd = logits.data();
  const auto& yd = targets.data();
  size_t count = zd.size();
  double loss = 0.0;
  for (size_t i = 0; i < count; ++i) {
    double z = zd[i];
    loss += std::max(z, 0.0) - z * yd[i] + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(count);
  return op_node("bce_with_logits", {1}, {loss}, {logits, targets},
                 [count](TensorNode& self) {
                   auto& pz = self.parents[0];
                   auto& py = self.parents[1];
                   double gs = self.grad[0] / static_cast<double>(count);
                   if (pz->requires_grad) {
                     pz->ensure_grad();
                     for (size_t i = 0; i < count; ++i)
                       pz->grad[i] += gs * (stable_sigmoid(pz->data[i]) - py->data[i]);
                   }
                   if (py->requires_grad) {
                     py->ensure_grad();
                     for (size_t i = 0; i < count; ++i) py->grad[i] += gs * (-pz->data[i]);
                   }
                 });
}

}  // namespace xdr
