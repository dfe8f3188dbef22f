#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "xdr/rng.hpp"

namespace xdr {

// Dense row-major float64 tensor with define-by-run reverse-mode autodiff.
// A Tensor is a cheap handle onto a shared node; ops allocate fresh nodes and
// record parent links plus a backward closure when gradients are enabled.
struct TensorNode {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data once used
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // null for leaves

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // i.i.d. gaussian(0, stddev) entries drawn from rng.
  static Tensor randn(std::vector<int> shape, double stddev, Rng& rng,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(node_->data.size()); }
  // 2-D accessors; throw on other ranks.
  int rows() const;
  int cols() const;

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& grad() { return node_->grad; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }

  double at(int i) const;
  double at(int r, int c) const;
  double& mut(int i);
  double& mut(int r, int c);
  double grad_at(int i) const;
  double grad_at(int r, int c) const;

  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
  // Detached copy of the values; no graph history.
  Tensor detach() const;

  std::shared_ptr<TensorNode> node() const { return node_; }
  TensorNode* raw() const { return node_.get(); }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Gradient recording is on by default; NoGradGuard suspends it (re-entrant).
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Operation records reachable from a root, topologically ordered: every
// node's parents appear before the node itself.
struct ComputeGraph {
  std::vector<std::shared_ptr<TensorNode>> nodes;
  static ComputeGraph trace(const Tensor& root);
};

// Reverse-mode sweep from a scalar loss; each node's backward runs exactly once.
void backward(const Tensor& loss);

// ---- elementwise / structural ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// matrix [n x d] plus row vector [d], broadcast over rows.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// rows of an embedding table; gradient scatter-adds per id.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// ---- nonlinearities / reductions ----
Tensor gelu(const Tensor& a);
// axis: -1 or last axis for rows of a 2-D tensor (and 1-D vectors), 0 for columns.
Tensor softmax(const Tensor& a, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor sum(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // [n x d] -> [d]
Tensor l2_normalize(const Tensor& a);

// ---- losses ----
// Mean token-level cross-entropy over unmasked rows. mask[i] != 0 keeps row i;
// empty mask keeps everything.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask = {});
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// Raw matmul on buffers, C += op(A) * op(B). Exposed for non-autodiff hot paths.
void matmul_nn(const double* A, const double* B, double* C, int m, int k, int n);
void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n);
void matmul_tn(const double* A, const double* B, double* C, int m, int k, int n);

[[noreturn]] void numeric_error(const std::string& msg);

}  // namespace xdr
