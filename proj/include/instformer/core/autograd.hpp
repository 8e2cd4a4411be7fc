#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "instformer/core/rng.hpp"

namespace instformer::core {

// Reverse-mode autodiff over dense double tensors. Graphs are built eagerly
// (define-by-run); backward() walks the tape once. Everything is
// double-precision so finite-difference checks hold at float64.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  std::vector<int> shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated only when needs_grad
  std::vector<Var> parents;
  std::function<void(Node&)> back;
  bool needs_grad = false;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  double scalar() const { return val[0]; }
};

Var make_var(std::vector<int> shape, std::vector<double> data, bool needs_grad = false);
Var make_const(std::vector<int> shape, std::vector<double> data);
Var make_scalar(double v);
Var zeros(std::vector<int> shape, bool needs_grad = false);

// Runs backward from a scalar root, accumulating into .grad of every
// needs_grad node reachable through the tape.
void backward(const Var& root);

// --- elementwise / arithmetic ---
Var add(const Var& a, const Var& b);      // same shape, or b is [1,m] row or scalar
Var sub(const Var& a, const Var& b);      // same broadcast rules as add
Var mul(const Var& a, const Var& b);      // same shape, or b is [1,m] row or scalar
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var vtanh(const Var& a);
Var vsigmoid(const Var& a);
Var vexp(const Var& a);
Var vlog(const Var& a);
Var vrelu(const Var& a);
Var vgelu(const Var& a);
Var vsqrt(const Var& a);
Var reciprocal(const Var& a);

// --- shape ---
Var reshape(const Var& a, std::vector<int> shape);
Var transpose(const Var& a);                       // 2-D
Var concat_rows(const std::vector<Var>& parts);    // 2-D, same cols
Var concat_cols(const Var& a, const Var& b);       // 2-D, same rows
Var slice_rows(const Var& a, int r0, int r1);      // rows [r0, r1)
Var slice_cols(const Var& a, int c0, int c1);
Var select_rows(const Var& a, const std::vector<int>& idx);
Var repeat_row(const Var& a, int n);               // [1,m] -> [n,m]

// --- reductions ---
Var sum(const Var& a);        // -> [1]
Var mean(const Var& a);       // -> [1]
Var sum_rows(const Var& a);   // [n,m] -> [n,1] row sums

// --- linear algebra ---
Var matmul(const Var& a, const Var& b);

// --- NN building blocks ---
// Row-wise softmax with an optional additive bias matrix (may contain -inf;
// such entries contribute exactly zero probability). Bias is a constant.
Var softmax_rows(const Var& logits, const std::vector<double>* bias = nullptr);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
// Rows with L2 norm below eps map to zero rows.
Var l2_normalize_rows(const Var& x, double eps = 1e-12);
Var embedding(const Var& table, const std::vector<int>& idx);
// x: [Cin,H,W], w: [Cout,Cin,k,k], b: [Cout]; zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// x: [N,h,w] -> [N, h*f, w*f], align_corners=false convention.
Var upsample_bilinear(const Var& x, int factor);

// --- losses ---
// Mean over all elements of the stable logistic loss against targets in [0,1].
Var bce_with_logits(const Var& logits, const std::vector<double>& targets);
// Mean over rows of -log softmax(logits)[target].
Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets);
// 1 - (2*sum(p*g)+smooth)/(sum(p)+sum(g)+smooth), p = sigmoid(logits).
Var dice_loss_with_logits(const Var& logits, const std::vector<double>& target, double smooth = 1.0);

// --- parameter handling ---
struct ParamMap {
  std::map<std::string, Var> params;  // ordered: iteration is deterministic

  Var add(const std::string& name, std::vector<int> shape, std::vector<double> init);
  Var get(const std::string& name) const;
  bool has(const std::string& name) const { return params.count(name) > 0; }
  void zero_grads();
  void freeze();  // drops needs_grad on every parameter
};

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, AdamW style
  int64_t t = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state;

  void step(ParamMap& pm);
};

// --- init helpers ---
std::vector<double> init_normal(Rng& rng, int64_t n, double stddev);
std::vector<double> init_uniform(Rng& rng, int64_t n, double lo, double hi);
std::vector<double> init_zeros(int64_t n);

}  // namespace instformer::core
