#include "instformer/core/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "instformer/core/errors.hpp"

namespace instformer::core {

namespace {

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

Var new_node(std::vector<int> shape, bool needs_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val.assign(size_t(numel_of(n->shape)), 0.0);
  n->needs_grad = needs_grad;
  if (needs_grad) n->grad.assign(n->val.size(), 0.0);
  return n;
}

bool any_grad(const std::vector<Var>& parents) {
  for (const auto& p : parents)
    if (p->needs_grad) return true;
  return false;
}

Var op_node(std::vector<int> shape, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = new_node(std::move(shape), any_grad(parents));
  n->parents = std::move(parents);
  if (n->needs_grad) n->back = std::move(back);
  return n;
}

void require_2d(const Var& a, const char* who) {
  if (a->shape.size() != 2) throw ShapeError(std::string(who) + ": expected 2-D tensor");
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var make_var(std::vector<int> shape, std::vector<double> data, bool needs_grad) {
  auto n = new_node(std::move(shape), needs_grad);
  if (int64_t(data.size()) != n->numel()) throw ShapeError("make_var: data size mismatch");
  n->val = std::move(data);
  return n;
}

Var make_const(std::vector<int> shape, std::vector<double> data) {
  return make_var(std::move(shape), std::move(data), false);
}

Var make_scalar(double v) { return make_const({1}, {v}); }

Var zeros(std::vector<int> shape, bool needs_grad) { return new_node(std::move(shape), needs_grad); }

void backward(const Var& root) {
  if (root->numel() != 1) throw ShapeError("backward: root must be scalar");
  if (!root->needs_grad) return;

  // Iterative post-order over the tape.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->back) (*it)->back(**it);
  }
}

// ---------------------------------------------------------------- arithmetic

namespace {
enum class Bcast { Same, Row, Scalar };

Bcast bcast_kind(const Var& a, const Var& b, const char* who) {
  if (a->shape == b->shape) return Bcast::Same;
  if (b->numel() == 1) return Bcast::Scalar;
  if (a->shape.size() == 2 && b->shape.size() == 2 && b->shape[0] == 1 && b->shape[1] == a->shape[1])
    return Bcast::Row;
  throw ShapeError(std::string(who) + ": incompatible shapes");
}
}  // namespace

Var add(const Var& a, const Var& b) {
  Bcast k = bcast_kind(a, b, "add");
  auto out = op_node(a->shape, {a, b}, [k](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    if (a->needs_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    if (b->needs_grad) {
      if (k == Bcast::Same) {
        for (size_t i = 0; i < n.grad.size(); ++i) b->grad[i] += n.grad[i];
      } else if (k == Bcast::Scalar) {
        double s = 0;
        for (double g : n.grad) s += g;
        b->grad[0] += s;
      } else {
        int rows = n.shape[0], cols = n.shape[1];
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) b->grad[c] += n.grad[size_t(r) * cols + c];
      }
    }
  });
  const int64_t ne = out->numel();
  if (k == Bcast::Same) {
    for (int64_t i = 0; i < ne; ++i) out->val[i] = a->val[i] + b->val[i];
  } else if (k == Bcast::Scalar) {
    for (int64_t i = 0; i < ne; ++i) out->val[i] = a->val[i] + b->val[0];
  } else {
    int rows = a->shape[0], cols = a->shape[1];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out->val[size_t(r) * cols + c] = a->val[size_t(r) * cols + c] + b->val[c];
  }
  return out;
}

Var sub(const Var& a, const Var& b) { return add(a, neg(b)); }

Var mul(const Var& a, const Var& b) {
  Bcast k = bcast_kind(a, b, "mul");
  auto out = op_node(a->shape, {a, b}, [k](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    int rows = n.shape.size() == 2 ? n.shape[0] : 1;
    int cols = n.shape.size() == 2 ? n.shape[1] : int(n.numel());
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double bv = (k == Bcast::Same) ? b->val[i] : (k == Bcast::Scalar ? b->val[0] : b->val[i % cols]);
      if (a->needs_grad) a->grad[i] += n.grad[i] * bv;
      if (b->needs_grad) {
        size_t bi = (k == Bcast::Same) ? i : (k == Bcast::Scalar ? 0 : i % cols);
        b->grad[bi] += n.grad[i] * a->val[i];
      }
    }
    (void)rows;
  });
  const int64_t ne = out->numel();
  int cols = a->shape.size() == 2 ? a->shape[1] : int(ne);
  for (int64_t i = 0; i < ne; ++i) {
    double bv = (k == Bcast::Same) ? b->val[i] : (k == Bcast::Scalar ? b->val[0] : b->val[i % cols]);
    out->val[i] = a->val[i] * bv;
  }
  return out;
}

Var scale(const Var& a, double c) {
  auto out = op_node(a->shape, {a}, [c](Node& n) {
    const Var& a = n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += c * n.grad[i];
  });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = c * a->val[i];
  return out;
}

Var add_scalar(const Var& a, double c) {
  auto out = op_node(a->shape, {a}, [](Node& n) {
    const Var& a = n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
  });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] + c;
  return out;
}

Var neg(const Var& a) { return scale(a, -1.0); }

namespace {
template <typename F, typename DF>
Var unary_op(const Var& a, F f, DF df) {
  auto out = op_node(a->shape, {a}, [df](Node& n) {
    const Var& a = n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += df(a->val[i], n.val[i]) * n.grad[i];
  });
  for (size_t i = 0; i < out->val.size(); ++i) out->val[i] = f(a->val[i]);
  return out;
}
}  // namespace

Var vtanh(const Var& a) {
  return unary_op(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
Var vsigmoid(const Var& a) {
  return unary_op(a, [](double x) { return stable_sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}
Var vexp(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
Var vlog(const Var& a) {
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
Var vrelu(const Var& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
Var vgelu(const Var& a) {
  return unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
      [](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return cdf + x * pdf;
      });
}
Var vsqrt(const Var& a) {
  return unary_op(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
Var reciprocal(const Var& a) {
  return unary_op(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

// --------------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<int> shape) {
  if (numel_of(shape) != a->numel()) throw ShapeError("reshape: numel mismatch");
  auto out = op_node(std::move(shape), {a}, [](Node& n) {
    const Var& a = n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
  });
  out->val = a->val;
  return out;
}

Var transpose(const Var& a) {
  require_2d(a, "transpose");
  int r = a->shape[0], c = a->shape[1];
  auto out = op_node({c, r}, {a}, [r, c](Node& n) {
    const Var& a = n.parents[0];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) a->grad[size_t(i) * c + j] += n.grad[size_t(j) * r + i];
  });
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out->val[size_t(j) * r + i] = a->val[size_t(i) * c + j];
  return out;
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty");
  int cols = parts[0]->cols();
  int rows = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p->shape[1] != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p->shape[0];
  }
  auto out = op_node({rows, cols}, parts, [cols](Node& n) {
    size_t off = 0;
    for (const auto& p : n.parents) {
      size_t sz = size_t(p->numel());
      if (p->needs_grad)
        for (size_t i = 0; i < sz; ++i) p->grad[i] += n.grad[off + i];
      off += sz;
    }
    (void)cols;
  });
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->val.begin(), p->val.end(), out->val.begin() + long(off));
    off += size_t(p->numel());
  }
  return out;
}

Var concat_cols(const Var& a, const Var& b) {
  require_2d(a, "concat_cols");
  require_2d(b, "concat_cols");
  if (a->shape[0] != b->shape[0]) throw ShapeError("concat_cols: row mismatch");
  int r = a->shape[0], ca = a->shape[1], cb = b->shape[1];
  auto out = op_node({r, ca + cb}, {a, b}, [r, ca, cb](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    for (int i = 0; i < r; ++i) {
      if (a->needs_grad)
        for (int j = 0; j < ca; ++j) a->grad[size_t(i) * ca + j] += n.grad[size_t(i) * (ca + cb) + j];
      if (b->needs_grad)
        for (int j = 0; j < cb; ++j) b->grad[size_t(i) * cb + j] += n.grad[size_t(i) * (ca + cb) + ca + j];
    }
  });
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < ca; ++j) out->val[size_t(i) * (ca + cb) + j] = a->val[size_t(i) * ca + j];
    for (int j = 0; j < cb; ++j) out->val[size_t(i) * (ca + cb) + ca + j] = b->val[size_t(i) * cb + j];
  }
  return out;
}

Var slice_rows(const Var& a, int r0, int r1) {
  require_2d(a, "slice_rows");
  if (r0 < 0 || r1 > a->shape[0] || r0 >= r1) throw ShapeError("slice_rows: bad range");
  int cols = a->shape[1];
  auto out = op_node({r1 - r0, cols}, {a}, [r0, cols](Node& n) {
    const Var& a = n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) a->grad[size_t(r0) * cols + i] += n.grad[i];
  });
  std::copy(a->val.begin() + long(r0) * cols, a->val.begin() + long(r1) * cols, out->val.begin());
  return out;
}

Var slice_cols(const Var& a, int c0, int c1) {
  require_2d(a, "slice_cols");
  if (c0 < 0 || c1 > a->shape[1] || c0 >= c1) throw ShapeError("slice_cols: bad range");
  int rows = a->shape[0], cols = a->shape[1], w = c1 - c0;
  auto out = op_node({rows, w}, {a}, [rows, cols, c0, w](Node& n) {
    const Var& a = n.parents[0];
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < w; ++j) a->grad[size_t(r) * cols + c0 + j] += n.grad[size_t(r) * w + j];
  });
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < w; ++j) out->val[size_t(r) * w + j] = a->val[size_t(r) * cols + c0 + j];
  return out;
}

Var select_rows(const Var& a, const std::vector<int>& idx) {
  require_2d(a, "select_rows");
  int cols = a->shape[1];
  for (int i : idx)
    if (i < 0 || i >= a->shape[0]) throw ShapeError("select_rows: index out of range");
  auto out = op_node({int(idx.size()), cols}, {a}, [idx, cols](Node& n) {
    const Var& a = n.parents[0];
    for (size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < cols; ++c) a->grad[size_t(idx[r]) * cols + c] += n.grad[r * cols + c];
  });
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(a->val.begin() + long(idx[r]) * cols, a->val.begin() + long(idx[r] + 1) * cols,
              out->val.begin() + long(r) * cols);
  return out;
}

Var repeat_row(const Var& a, int n) {
  require_2d(a, "repeat_row");
  if (a->shape[0] != 1) throw ShapeError("repeat_row: expected single row");
  int cols = a->shape[1];
  auto out = op_node({n, cols}, {a}, [n, cols](Node& nd) {
    const Var& a = nd.parents[0];
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < cols; ++c) a->grad[c] += nd.grad[size_t(r) * cols + c];
  });
  for (int r = 0; r < n; ++r) std::copy(a->val.begin(), a->val.end(), out->val.begin() + long(r) * cols);
  return out;
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& a) {
  auto out = op_node({1}, {a}, [](Node& n) {
    const Var& a = n.parents[0];
    for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += n.grad[0];
  });
  double s = 0;
  for (double v : a->val) s += v;
  out->val[0] = s;
  return out;
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / double(a->numel())); }

Var sum_rows(const Var& a) {
  require_2d(a, "sum_rows");
  int rows = a->shape[0], cols = a->shape[1];
  auto out = op_node({rows, 1}, {a}, [rows, cols](Node& n) {
    const Var& a = n.parents[0];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) a->grad[size_t(r) * cols + c] += n.grad[r];
  });
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int c = 0; c < cols; ++c) s += a->val[size_t(r) * cols + c];
    out->val[r] = s;
  }
  return out;
}

// ------------------------------------------------------------ linear algebra

namespace {
// C[n,m] += A[n,k] * B[k,m]; ikj order keeps the inner loop contiguous.
void gemm_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + size_t(i) * k;
    double* crow = c + size_t(i) * m;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + size_t(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}
// C[n,m] += A[n,k] * B^T where Bt given as [m,k]
void gemm_bt_acc(const double* a, const double* bt, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + size_t(i) * k;
    double* crow = c + size_t(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* brow = bt + size_t(j) * k;
      double s = 0;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}
// C[k,m] += A^T (A given as [n,k]) * B[n,m]
void gemm_at_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + size_t(i) * k;
    const double* brow = b + size_t(i) * m;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + size_t(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}
}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a->shape[1] != b->shape[0]) throw ShapeError("matmul: inner dim mismatch");
  int n = a->shape[0], k = a->shape[1], m = b->shape[1];
  auto out = op_node({n, m}, {a, b}, [n, k, m](Node& nd) {
    const Var& a = nd.parents[0];
    const Var& b = nd.parents[1];
    if (a->needs_grad) gemm_bt_acc(nd.grad.data(), b->val.data(), a->grad.data(), n, m, k);
    if (b->needs_grad) gemm_at_acc(a->val.data(), nd.grad.data(), b->grad.data(), n, k, m);
  });
  gemm_acc(a->val.data(), b->val.data(), out->val.data(), n, k, m);
  return out;
}

// --------------------------------------------------------- NN building blocks

Var softmax_rows(const Var& logits, const std::vector<double>* bias) {
  require_2d(logits, "softmax_rows");
  int rows = logits->shape[0], cols = logits->shape[1];
  if (bias && int64_t(bias->size()) != logits->numel()) throw ShapeError("softmax_rows: bias size mismatch");
  auto out = op_node({rows, cols}, {logits}, [rows, cols](Node& n) {
    const Var& l = n.parents[0];
    for (int r = 0; r < rows; ++r) {
      const double* y = n.val.data() + size_t(r) * cols;
      const double* g = n.grad.data() + size_t(r) * cols;
      double dot = 0;
      for (int c = 0; c < cols; ++c) dot += y[c] * g[c];
      double* gl = l->grad.data() + size_t(r) * cols;
      for (int c = 0; c < cols; ++c) gl[c] += y[c] * (g[c] - dot);
    }
  });
  constexpr double kInf = std::numeric_limits<double>::infinity();
  for (int r = 0; r < rows; ++r) {
    double m = -kInf;
    for (int c = 0; c < cols; ++c) {
      double z = logits->val[size_t(r) * cols + c] + (bias ? (*bias)[size_t(r) * cols + c] : 0.0);
      if (z > m) m = z;
    }
    if (m == -kInf) throw NumericError("softmax_rows: fully masked row " + std::to_string(r));
    double denom = 0;
    for (int c = 0; c < cols; ++c) {
      double z = logits->val[size_t(r) * cols + c] + (bias ? (*bias)[size_t(r) * cols + c] : 0.0);
      double e = (z == -kInf) ? 0.0 : std::exp(z - m);
      out->val[size_t(r) * cols + c] = e;
      denom += e;
    }
    for (int c = 0; c < cols; ++c) out->val[size_t(r) * cols + c] /= denom;
  }
  return out;
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  require_2d(x, "layer_norm_rows");
  int rows = x->shape[0], cols = x->shape[1];
  if (gain->numel() != cols || bias->numel() != cols) throw ShapeError("layer_norm_rows: gain/bias size");
  auto out = op_node({rows, cols}, {x, gain, bias}, [rows, cols, eps](Node& n) {
    const Var& x = n.parents[0];
    const Var& g = n.parents[1];
    const Var& b = n.parents[2];
    for (int r = 0; r < rows; ++r) {
      const double* xv = x->val.data() + size_t(r) * cols;
      const double* gr = n.grad.data() + size_t(r) * cols;
      double mu = 0;
      for (int c = 0; c < cols; ++c) mu += xv[c];
      mu /= cols;
      double var = 0;
      for (int c = 0; c < cols; ++c) var += (xv[c] - mu) * (xv[c] - mu);
      var /= cols;
      double sigma = std::sqrt(var + eps);
      // dxh = dy*g; then the standard two-correction form.
      double sum_dxh = 0, sum_dxh_xh = 0;
      for (int c = 0; c < cols; ++c) {
        double xh = (xv[c] - mu) / sigma;
        double dxh = gr[c] * g->val[c];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh;
        if (g->needs_grad) g->grad[c] += gr[c] * xh;
        if (b->needs_grad) b->grad[c] += gr[c];
      }
      if (x->needs_grad) {
        double* gx = x->grad.data() + size_t(r) * cols;
        for (int c = 0; c < cols; ++c) {
          double xh = (xv[c] - mu) / sigma;
          double dxh = gr[c] * g->val[c];
          gx[c] += (dxh - sum_dxh / cols - xh * sum_dxh_xh / cols) / sigma;
        }
      }
    }
  });
  for (int r = 0; r < rows; ++r) {
    const double* xv = x->val.data() + size_t(r) * cols;
    double mu = 0;
    for (int c = 0; c < cols; ++c) mu += xv[c];
    mu /= cols;
    double var = 0;
    for (int c = 0; c < cols; ++c) var += (xv[c] - mu) * (xv[c] - mu);
    var /= cols;
    double sigma = std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c)
      out->val[size_t(r) * cols + c] = (xv[c] - mu) / sigma * gain->val[c] + bias->val[c];
  }
  return out;
}

Var l2_normalize_rows(const Var& x, double eps) {
  require_2d(x, "l2_normalize_rows");
  int rows = x->shape[0], cols = x->shape[1];
  auto out = op_node({rows, cols}, {x}, [rows, cols, eps](Node& n) {
    const Var& x = n.parents[0];
    for (int r = 0; r < rows; ++r) {
      const double* xv = x->val.data() + size_t(r) * cols;
      const double* gr = n.grad.data() + size_t(r) * cols;
      double nrm = 0;
      for (int c = 0; c < cols; ++c) nrm += xv[c] * xv[c];
      nrm = std::sqrt(nrm);
      if (nrm < eps) continue;  // zero row stays zero; no gradient
      double dot = 0;
      for (int c = 0; c < cols; ++c) dot += xv[c] * gr[c];
      double* gx = x->grad.data() + size_t(r) * cols;
      double n3 = nrm * nrm * nrm;
      for (int c = 0; c < cols; ++c) gx[c] += gr[c] / nrm - xv[c] * dot / n3;
    }
  });
  for (int r = 0; r < rows; ++r) {
    const double* xv = x->val.data() + size_t(r) * cols;
    double nrm = 0;
    for (int c = 0; c < cols; ++c) nrm += xv[c] * xv[c];
    nrm = std::sqrt(nrm);
    for (int c = 0; c < cols; ++c) out->val[size_t(r) * cols + c] = (nrm < eps) ? 0.0 : xv[c] / nrm;
  }
  return out;
}

Var embedding(const Var& table, const std::vector<int>& idx) {
  require_2d(table, "embedding");
  int cols = table->shape[1];
  for (int i : idx)
    if (i < 0 || i >= table->shape[0]) throw ShapeError("embedding: index out of range");
  auto out = op_node({int(idx.size()), cols}, {table}, [idx, cols](Node& n) {
    const Var& t = n.parents[0];
    for (size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < cols; ++c) t->grad[size_t(idx[r]) * cols + c] += n.grad[r * cols + c];
  });
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(table->val.begin() + long(idx[r]) * cols, table->val.begin() + long(idx[r] + 1) * cols,
              out->val.begin() + long(r) * cols);
  return out;
}

namespace {

// column matrix [ci*k*k, ho*wo] of the padded input windows
void im2col(const double* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, double* cols) {
  for (int ic = 0; ic < ci; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* col = cols + ((size_t(ic) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - pad;
          double* crow = col + size_t(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(crow, crow + wo, 0.0);
            continue;
          }
          const double* xrow = x + (size_t(ic) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kx - pad;
            crow[ox] = (ix < 0 || ix >= w) ? 0.0 : xrow[ix];
          }
        }
      }
    }
  }
}

void col2im_acc(const double* cols, int ci, int h, int w, int k, int stride, int pad, int ho, int wo,
                double* gx) {
  for (int ic = 0; ic < ci; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* col = cols + ((size_t(ic) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          double* xrow = gx + (size_t(ic) * h + iy) * w;
          const double* crow = col + size_t(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) xrow[ix] += crow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x->shape.size() != 3 || w->shape.size() != 4) throw ShapeError("conv2d: expected [C,H,W] and [O,I,k,k]");
  int ci = x->shape[0], h = x->shape[1], wd = x->shape[2];
  int co = w->shape[0], k = w->shape[2];
  if (w->shape[1] != ci || w->shape[3] != k || b->numel() != co) throw ShapeError("conv2d: weight shape");
  int ho = (h + 2 * pad - k) / stride + 1;
  int wo = (wd + 2 * pad - k) / stride + 1;
  const int kk = ci * k * k, px = ho * wo;

  // forward as one GEMM over the unfolded input; backward reuses the columns
  auto cols = std::make_shared<std::vector<double>>(size_t(kk) * px, 0.0);
  im2col(x->val.data(), ci, h, wd, k, stride, pad, ho, wo, cols->data());

  auto out = op_node({co, ho, wo}, {x, w, b}, [=](Node& n) {
    const Var& x = n.parents[0];
    const Var& w = n.parents[1];
    const Var& b = n.parents[2];
    if (b->needs_grad) {
      for (int oc = 0; oc < co; ++oc) {
        double s = 0;
        const double* g = n.grad.data() + size_t(oc) * px;
        for (int i = 0; i < px; ++i) s += g[i];
        b->grad[oc] += s;
      }
    }
    // dW[co,kk] += dY[co,px] * cols^T
    if (w->needs_grad) gemm_bt_acc(n.grad.data(), cols->data(), w->grad.data(), co, px, kk);
    // dX = col2im(W^T[kk,co] * dY[co,px])
    if (x->needs_grad) {
      std::vector<double> dcols(size_t(kk) * px, 0.0);
      gemm_at_acc(w->val.data(), n.grad.data(), dcols.data(), co, kk, px);
      col2im_acc(dcols.data(), ci, h, wd, k, stride, pad, ho, wo, x->grad.data());
    }
  });
  for (int oc = 0; oc < co; ++oc)
    std::fill(out->val.begin() + long(oc) * px, out->val.begin() + long(oc + 1) * px, b->val[oc]);
  gemm_acc(w->val.data(), cols->data(), out->val.data(), co, kk, px);
  return out;
}

Var upsample_bilinear(const Var& x, int factor) {
  if (x->shape.size() != 3) throw ShapeError("upsample_bilinear: expected [N,h,w]");
  int n = x->shape[0], h = x->shape[1], w = x->shape[2];
  int ho = h * factor, wo = w * factor;
  // Precompute the 4-tap stencil per output pixel.
  struct Tap {
    int y0, y1, x0, x1;
    double wy, wx;
  };
  auto taps = std::make_shared<std::vector<Tap>>(size_t(ho) * wo);
  for (int oy = 0; oy < ho; ++oy) {
    double sy = (oy + 0.5) / factor - 0.5;
    int y0 = int(std::floor(sy));
    double wy = sy - y0;
    int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
    for (int ox = 0; ox < wo; ++ox) {
      double sx = (ox + 0.5) / factor - 0.5;
      int x0 = int(std::floor(sx));
      double wx = sx - x0;
      (*taps)[size_t(oy) * wo + ox] = {y0c, y1c, std::clamp(x0, 0, w - 1), std::clamp(x0 + 1, 0, w - 1), wy, wx};
    }
  }
  auto out = op_node({n, ho, wo}, {x}, [n, h, w, ho, wo, taps](Node& nd) {
    const Var& x = nd.parents[0];
    for (int c = 0; c < n; ++c) {
      double* gx = x->grad.data() + size_t(c) * h * w;
      const double* g = nd.grad.data() + size_t(c) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const Tap& t = (*taps)[size_t(oy) * wo + ox];
          double gv = g[size_t(oy) * wo + ox];
          gx[size_t(t.y0) * w + t.x0] += (1 - t.wy) * (1 - t.wx) * gv;
          gx[size_t(t.y0) * w + t.x1] += (1 - t.wy) * t.wx * gv;
          gx[size_t(t.y1) * w + t.x0] += t.wy * (1 - t.wx) * gv;
          gx[size_t(t.y1) * w + t.x1] += t.wy * t.wx * gv;
        }
      }
    }
  });
  for (int c = 0; c < n; ++c) {
    const double* xs = x->val.data() + size_t(c) * h * w;
    double* o = out->val.data() + size_t(c) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Tap& t = (*taps)[size_t(oy) * wo + ox];
        o[size_t(oy) * wo + ox] = (1 - t.wy) * ((1 - t.wx) * xs[size_t(t.y0) * w + t.x0] + t.wx * xs[size_t(t.y0) * w + t.x1]) +
                                  t.wy * ((1 - t.wx) * xs[size_t(t.y1) * w + t.x0] + t.wx * xs[size_t(t.y1) * w + t.x1]);
      }
    }
  }
  return out;
}

// -------------------------------------------------------------------- losses

Var bce_with_logits(const Var& logits, const std::vector<double>& targets) {
  if (int64_t(targets.size()) != logits->numel()) throw ShapeError("bce_with_logits: target size");
  int64_t n = logits->numel();
  auto out = op_node({1}, {logits}, [targets, n](Node& nd) {
    const Var& l = nd.parents[0];
    double g = nd.grad[0] / double(n);
    for (int64_t i = 0; i < n; ++i) l->grad[i] += g * (stable_sigmoid(l->val[i]) - targets[i]);
  });
  double s = 0;
  for (int64_t i = 0; i < n; ++i) {
    double x = logits->val[i], t = targets[i];
    s += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  out->val[0] = s / double(n);
  return out;
}

Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets) {
  require_2d(logits, "cross_entropy_rows");
  int rows = logits->shape[0], cols = logits->shape[1];
  if (int(targets.size()) != rows) throw ShapeError("cross_entropy_rows: target count");
  for (int t : targets)
    if (t < 0 || t >= cols) throw ShapeError("cross_entropy_rows: target out of range");
  auto out = op_node({1}, {logits}, [targets, rows, cols](Node& nd) {
    const Var& l = nd.parents[0];
    double g = nd.grad[0] / double(rows);
    for (int r = 0; r < rows; ++r) {
      const double* lv = l->val.data() + size_t(r) * cols;
      double m = lv[0];
      for (int c = 1; c < cols; ++c) m = std::max(m, lv[c]);
      double denom = 0;
      for (int c = 0; c < cols; ++c) denom += std::exp(lv[c] - m);
      double* gl = l->grad.data() + size_t(r) * cols;
      for (int c = 0; c < cols; ++c) {
        double p = std::exp(lv[c] - m) / denom;
        gl[c] += g * (p - (c == targets[r] ? 1.0 : 0.0));
      }
    }
  });
  double s = 0;
  for (int r = 0; r < rows; ++r) {
    const double* lv = logits->val.data() + size_t(r) * cols;
    double m = lv[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, lv[c]);
    double denom = 0;
    for (int c = 0; c < cols; ++c) denom += std::exp(lv[c] - m);
    s += std::log(denom) + m - lv[targets[r]];
  }
  out->val[0] = s / double(rows);
  return out;
}

Var dice_loss_with_logits(const Var& logits, const std::vector<double>& target, double smooth) {
  if (int64_t(target.size()) != logits->numel()) throw ShapeError("dice_loss_with_logits: target size");
  int64_t n = logits->numel();
  auto out = op_node({1}, {logits}, [target, n, smooth](Node& nd) {
    const Var& l = nd.parents[0];
    double inter = 0, psum = 0, gsum = 0;
    for (int64_t i = 0; i < n; ++i) {
      double p = stable_sigmoid(l->val[i]);
      inter += p * target[i];
      psum += p;
      gsum += target[i];
    }
    double denom = psum + gsum + smooth;
    double num = 2 * inter + smooth;
    double g = nd.grad[0];
    for (int64_t i = 0; i < n; ++i) {
      double p = stable_sigmoid(l->val[i]);
      double dd_dp = -(2 * target[i] * denom - num) / (denom * denom);
      l->grad[i] += g * dd_dp * p * (1 - p);
    }
  });
  double inter = 0, psum = 0, gsum = 0;
  for (int64_t i = 0; i < n; ++i) {
    double p = stable_sigmoid(logits->val[i]);
    inter += p * target[i];
    psum += p;
    gsum += target[i];
  }
  out->val[0] = 1.0 - (2 * inter + smooth) / (psum + gsum + smooth);
  return out;
}

// --------------------------------------------------------------- param utils

Var ParamMap::add(const std::string& name, std::vector<int> shape, std::vector<double> init) {
  if (params.count(name)) throw ConfigError("duplicate parameter: " + name);
  auto v = make_var(std::move(shape), std::move(init), true);
  params[name] = v;
  return v;
}

Var ParamMap::get(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

void ParamMap::zero_grads() {
  for (auto& [name, v] : params) std::fill(v->grad.begin(), v->grad.end(), 0.0);
}

void ParamMap::freeze() {
  for (auto& [name, v] : params) {
    v->needs_grad = false;
    v->grad.clear();
  }
}

void Adam::step(ParamMap& pm) {
  ++t;
  double bc1 = 1.0 - std::pow(beta1, double(t));
  double bc2 = 1.0 - std::pow(beta2, double(t));
  for (auto& [name, v] : pm.params) {
    if (!v->needs_grad) continue;
    auto& [m, s] = state[name];
    if (m.empty()) {
      m.assign(v->val.size(), 0.0);
      s.assign(v->val.size(), 0.0);
    }
    for (size_t i = 0; i < v->val.size(); ++i) {
      double g = v->grad[i];
      m[i] = beta1 * m[i] + (1 - beta1) * g;
      s[i] = beta2 * s[i] + (1 - beta2) * g * g;
      v->val[i] -= lr * ((m[i] / bc1) / (std::sqrt(s[i] / bc2) + eps) + weight_decay * v->val[i]);
    }
  }
}

std::vector<double> init_normal(Rng& rng, int64_t n, double stddev) {
  std::vector<double> v(size_t(n), 0.0);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

std::vector<double> init_uniform(Rng& rng, int64_t n, double lo, double hi) {
  std::vector<double> v(size_t(n), 0.0);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

std::vector<double> init_zeros(int64_t n) { return std::vector<double>(size_t(n), 0.0); }

}  // namespace instformer::core
