#pragma once

// Pre-LN transformer layer shared by the vision encoder and the text decoder.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "xdr/rng.hpp"
#include "xdr/tensor.hpp"

namespace xdr {

struct TransformerLayer {
  int dim = 0, heads = 0, hidden = 0;
  Tensor ln1g, ln1b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2g, ln2b;
  Tensor w1, b1, w2, b2;

  static TransformerLayer init(int dim, int heads, int hidden, Rng& rng) {
    if (dim % heads != 0) numeric_error("transformer: dim must be divisible by heads");
    TransformerLayer l;
    l.dim = dim;
    l.heads = heads;
    l.hidden = hidden;
    auto w = [&](int r, int c) {
      return Tensor::randn({r, c}, std::sqrt(2.0 / (r + c)), rng, true);
    };
    auto zeros = [&](int n) { return Tensor::zeros({n}, true); };
    l.ln1g = Tensor::full({dim}, 1.0, true);
    l.ln1b = zeros(dim);
    l.wq = w(dim, dim);
    l.bq = zeros(dim);
    l.wk = w(dim, dim);
    l.bk = zeros(dim);
    l.wv = w(dim, dim);
    l.bv = zeros(dim);
    l.wo = w(dim, dim);
    l.bo = zeros(dim);
    l.ln2g = Tensor::full({dim}, 1.0, true);
    l.ln2b = zeros(dim);
    l.w1 = w(dim, hidden);
    l.b1 = zeros(hidden);
    l.w2 = w(hidden, dim);
    l.b2 = zeros(dim);
    return l;
  }

  // attn_bias, when given, is a [T x T] additive mask (0 or a large negative
  // constant); softmax of -1e30 underflows to exactly zero attention.
  Tensor forward(const Tensor& x, const Tensor* attn_bias) const {
    int dh = dim / heads;
    Tensor h = layer_norm(x, ln1g, ln1b);
    Tensor q = add_rowvec(matmul(h, wq), bq);
    Tensor k = add_rowvec(matmul(h, wk), bk);
    Tensor v = add_rowvec(matmul(h, wv), bv);
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (int hi = 0; hi < heads; ++hi) {
      Tensor qh = slice_cols(q, hi * dh, (hi + 1) * dh);
      Tensor kh = slice_cols(k, hi * dh, (hi + 1) * dh);
      Tensor vh = slice_cols(v, hi * dh, (hi + 1) * dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      if (attn_bias) scores = add(scores, *attn_bias);
      head_out.push_back(matmul(softmax(scores), vh));
    }
    Tensor att = add_rowvec(matmul(concat_cols(head_out), wo), bo);
    Tensor x1 = add(x, att);
    Tensor h2 = layer_norm(x1, ln2g, ln2b);
    Tensor m = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, w1), b1)), w2), b2);
    return add(x1, m);
  }

  std::vector<Tensor> params() const {
    return {ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, w1, b1, w2, b2};
  }

  void named(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const {
    const char* names[] = {"ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv",
                           "wo",    "bo",    "ln2.g", "ln2.b", "w1", "b1", "w2", "b2"};
    auto ps = params();
    for (size_t i = 0; i < ps.size(); ++i) out.emplace_back(prefix + "." + names[i], ps[i]);
  }
};

// 0 on and below the diagonal, -1e30 above: additive causal attention bias.
inline Tensor causal_bias(int t) {
  std::vector<double> d(static_cast<size_t>(t) * t, 0.0);
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) d[static_cast<size_t>(i) * t + j] = -1e30;
  return Tensor::from_data({t, t}, std::move(d));
}

}  // namespace xdr
