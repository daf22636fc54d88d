#include "f2x/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "f2x/kernels.hpp"

namespace f2x::ag {

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return s.empty() ? 0 : n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape s) {
  Tensor t;
  t.shape = std::move(s);
  t.data = std::make_shared<std::vector<double>>(numel(t.shape), 0.0);
  return t;
}

Tensor Tensor::full(Shape s, double v) {
  Tensor t = zeros(std::move(s));
  std::fill(t.data->begin(), t.data->end(), v);
  return t;
}

Tensor Tensor::from(Shape s, std::vector<double> values) {
  if (numel(s) != static_cast<std::int64_t>(values.size())) {
    throw TensorError("Tensor::from: shape " + shape_str(s) + " does not match value count " +
                      std::to_string(values.size()));
  }
  Tensor t;
  t.shape = std::move(s);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw TensorError("item() on non-scalar tensor " + shape_str(shape));
  return (*data)[0];
}

std::int64_t Tensor::rows() const {
  if (shape.empty()) return 0;
  std::int64_t r = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : *t.data) {
    if (!std::isfinite(v)) {
      throw TensorError(std::string(op) + ": non-finite input value");
    }
  }
}

// ---- Graph ----

Tensor Graph::leaf(const Tensor& t) {
  Tensor out = t;
  out.graph = this;
  out.node = add_node(t.size(), nullptr);
  return out;
}

int Graph::add_node(std::int64_t size, std::function<void(Graph&)> back) {
  nodes_.push_back(Node{size, std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Graph::set_back(int node, std::function<void(Graph&)> back) {
  nodes_[node].back = std::move(back);
}

std::vector<double>& Graph::grad_buf(int node) {
  if (!touched_[node]) {
    grads_[node].assign(nodes_[node].size, 0.0);
    touched_[node] = 1;
  }
  return grads_[node];
}

void Graph::accumulate(int node, const double* g, std::int64_t n) {
  std::vector<double>& buf = grad_buf(node);
  kernels::vaxpy(buf.data(), 1.0, g, static_cast<std::size_t>(n));
}

const std::vector<double>* Graph::grad(int node) const {
  if (node < 0 || node >= static_cast<int>(nodes_.size()) || !touched_[node]) return nullptr;
  return &grads_[node];
}

void Graph::backward(const Tensor& loss) {
  if (!loss.tracked() || loss.graph != this) {
    throw TensorError("backward: loss is not on this tape");
  }
  if (loss.size() != 1) {
    throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape));
  }
  grads_.assign(nodes_.size(), {});
  touched_.assign(nodes_.size(), 0);
  grad_buf(loss.node)[0] = 1.0;
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    if (touched_[i] && nodes_[i].back) nodes_[i].back(*this);
  }
}

// ---- op helpers ----

namespace {

using Buf = std::shared_ptr<std::vector<double>>;

Buf alloc(std::int64_t n) { return std::make_shared<std::vector<double>>(n, 0.0); }

Graph* pick_graph(std::initializer_list<const Tensor*> ts) {
  Graph* g = nullptr;
  for (const Tensor* t : ts) {
    if (t->tracked()) {
      if (g && g != t->graph) throw TensorError("op inputs belong to different tapes");
      g = t->graph;
    }
  }
  return g;
}

// Builds the output tensor; when any input is tracked, registers a node whose
// backward closure receives (graph, self_node_id).
Tensor finish(Graph* g, Shape shape, Buf data, std::function<void(Graph&, int)> back) {
  Tensor out;
  out.shape = std::move(shape);
  out.data = std::move(data);
  if (g) {
    out.graph = g;
    int id = g->add_node(out.size(), nullptr);
    out.node = id;
    g->set_back(id, [id, fn = std::move(back)](Graph& gr) { fn(gr, id); });
  }
  return out;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

}  // namespace

// ---- primitives ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  require(a.rank() >= 2 && b.rank() >= 2,
          "matmul: need rank>=2 operands, got " + shape_str(a.shape) + " x " + shape_str(b.shape));

  // batch count, per-operand strides
  std::int64_t M, K, K2, N, batches;
  bool b_shared;  // b is 2-D and shared across a's batch dim
  if (a.rank() == 2 && b.rank() == 2) {
    batches = 1;
    b_shared = true;
    M = a.shape[0];
    K = a.shape[1];
    K2 = b.shape[0];
    N = b.shape[1];
  } else if (a.rank() == 3 && b.rank() == 2) {
    batches = a.shape[0];
    b_shared = true;
    M = a.shape[1];
    K = a.shape[2];
    K2 = b.shape[0];
    N = b.shape[1];
  } else if (a.rank() == 3 && b.rank() == 3) {
    require(a.shape[0] == b.shape[0], "matmul: batch mismatch " + shape_str(a.shape) + " x " +
                                          shape_str(b.shape));
    batches = a.shape[0];
    b_shared = false;
    M = a.shape[1];
    K = a.shape[2];
    K2 = b.shape[1];
    N = b.shape[2];
  } else {
    throw TensorError("matmul: unsupported ranks " + shape_str(a.shape) + " x " +
                      shape_str(b.shape));
  }
  require(K == K2, "matmul: inner dim mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape));

  Shape out_shape = (a.rank() == 2 && b.rank() == 2) ? Shape{(int)M, (int)N}
                                                     : Shape{(int)batches, (int)M, (int)N};
  Buf out = alloc(batches * M * N);
  for (std::int64_t t = 0; t < batches; ++t) {
    const double* ap = a.ptr() + t * M * K;
    const double* bp = b.ptr() + (b_shared ? 0 : t * K * N);
    kernels::matmul_nn(ap, bp, out->data() + t * M * N, M, K, N, false);
  }

  Graph* g = pick_graph({&a, &b});
  if (!g) {
    Tensor r;
    r.shape = std::move(out_shape);
    r.data = std::move(out);
    return r;
  }
  auto adata = a.data;
  auto bdata = b.data;
  int an = a.node, bn = b.node;
  return finish(g, std::move(out_shape), std::move(out),
                [=](Graph& gr, int self) {
                  const std::vector<double>& gy = gr.grad_buf(self);
                  if (an >= 0) {
                    std::vector<double>& da = gr.grad_buf(an);
                    for (std::int64_t t = 0; t < batches; ++t) {
                      kernels::matmul_nt(gy.data() + t * M * N,
                                         bdata->data() + (b_shared ? 0 : t * K * N),
                                         da.data() + t * M * K, M, N, K, true);
                    }
                  }
                  if (bn >= 0) {
                    std::vector<double>& db = gr.grad_buf(bn);
                    for (std::int64_t t = 0; t < batches; ++t) {
                      kernels::matmul_tn(adata->data() + t * M * K, gy.data() + t * M * N,
                                         db.data() + (b_shared ? 0 : t * K * N), M, K, N, true);
                    }
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_finite(a, "add");
  check_finite(b, "add");
  const std::int64_t n = a.size();
  Buf out = alloc(n);
  bool bcast = false;
  if (same_shape(a.shape, b.shape)) {
    kernels::vadd(a.ptr(), b.ptr(), out->data(), n);
  } else if (b.rank() == 1 && b.shape[0] == a.last_dim()) {
    bcast = true;
    const std::int64_t rows = a.rows();
    const int d = a.last_dim();
    for (std::int64_t r = 0; r < rows; ++r) {
      kernels::vadd(a.ptr() + r * d, b.ptr(), out->data() + r * d, d);
    }
  } else {
    throw TensorError("add: shape mismatch " + shape_str(a.shape) + " + " + shape_str(b.shape));
  }
  Graph* g = pick_graph({&a, &b});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  int an = a.node, bn = b.node;
  const std::int64_t rows = a.rows();
  const int d = a.last_dim();
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    if (an >= 0) gr.accumulate(an, gy.data(), n);
    if (bn >= 0) {
      if (!bcast) {
        gr.accumulate(bn, gy.data(), n);
      } else {
        std::vector<double>& db = gr.grad_buf(bn);
        for (std::int64_t r = 0; r < rows; ++r) {
          kernels::vaxpy(db.data(), 1.0, gy.data() + r * d, d);
        }
      }
    }
  });
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  check_finite(a, "multiply");
  check_finite(b, "multiply");
  require(same_shape(a.shape, b.shape),
          "multiply: shape mismatch " + shape_str(a.shape) + " * " + shape_str(b.shape));
  const std::int64_t n = a.size();
  Buf out = alloc(n);
  kernels::vmul(a.ptr(), b.ptr(), out->data(), n);
  Graph* g = pick_graph({&a, &b});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  auto adata = a.data;
  auto bdata = b.data;
  int an = a.node, bn = b.node;
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    std::vector<double> tmp(n);
    if (an >= 0) {
      kernels::vmul(gy.data(), bdata->data(), tmp.data(), n);
      gr.accumulate(an, tmp.data(), n);
    }
    if (bn >= 0) {
      kernels::vmul(gy.data(), adata->data(), tmp.data(), n);
      gr.accumulate(bn, tmp.data(), n);
    }
  });
}

Tensor row_scale(const Tensor& a, const Tensor& w) {
  check_finite(a, "row_scale");
  check_finite(w, "row_scale");
  const std::int64_t rows = a.rows();
  const int d = a.last_dim();
  require(w.size() == rows, "row_scale: weight count " + std::to_string(w.size()) +
                                " does not match rows of " + shape_str(a.shape));
  Buf out = alloc(a.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    kernels::vscale(a.ptr() + r * d, (*w.data)[r], out->data() + r * d, d);
  }
  Graph* g = pick_graph({&a, &w});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  auto adata = a.data;
  auto wdata = w.data;
  int an = a.node, wn = w.node;
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    if (an >= 0) {
      std::vector<double>& da = gr.grad_buf(an);
      for (std::int64_t r = 0; r < rows; ++r) {
        kernels::vaxpy(da.data() + r * d, (*wdata)[r], gy.data() + r * d, d);
      }
    }
    if (wn >= 0) {
      std::vector<double>& dw = gr.grad_buf(wn);
      for (std::int64_t r = 0; r < rows; ++r) {
        dw[r] += kernels::vdot(gy.data() + r * d, adata->data() + r * d, d);
      }
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  check_finite(a, "scale");
  require(std::isfinite(s), "scale: non-finite scalar");
  const std::int64_t n = a.size();
  Buf out = alloc(n);
  kernels::vscale(a.ptr(), s, out->data(), n);
  Graph* g = pick_graph({&a});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  int an = a.node;
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    std::vector<double>& da = gr.grad_buf(an);
    kernels::vaxpy(da.data(), s, gy.data(), n);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_finite(a, "sub");
  check_finite(b, "sub");
  require(same_shape(a.shape, b.shape),
          "sub: shape mismatch " + shape_str(a.shape) + " - " + shape_str(b.shape));
  const std::int64_t n = a.size();
  Buf out = alloc(n);
  const double* ap = a.ptr();
  const double* bp = b.ptr();
  for (std::int64_t i = 0; i < n; ++i) (*out)[i] = ap[i] - bp[i];
  Graph* g = pick_graph({&a, &b});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  int an = a.node, bn = b.node;
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    if (an >= 0) gr.accumulate(an, gy.data(), n);
    if (bn >= 0) {
      std::vector<double>& db = gr.grad_buf(bn);
      kernels::vaxpy(db.data(), -1.0, gy.data(), n);
    }
  });
}

namespace {

void transpose_copy(const double* src, double* dst, std::int64_t batches, std::int64_t m,
                    std::int64_t n) {
  for (std::int64_t t = 0; t < batches; ++t) {
    const double* s = src + t * m * n;
    double* d = dst + t * m * n;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) d[j * m + i] = s[i * n + j];
  }
}

}  // namespace

Tensor transpose(const Tensor& a) {
  check_finite(a, "transpose");
  require(a.rank() == 2 || a.rank() == 3, "transpose: unsupported shape " + shape_str(a.shape));
  const std::int64_t batches = a.rank() == 3 ? a.shape[0] : 1;
  const std::int64_t m = a.shape[a.rank() - 2];
  const std::int64_t n = a.shape[a.rank() - 1];
  Shape out_shape = a.shape;
  std::swap(out_shape[a.rank() - 2], out_shape[a.rank() - 1]);
  Buf out = alloc(a.size());
  transpose_copy(a.ptr(), out->data(), batches, m, n);
  Graph* g = pick_graph({&a});
  if (!g) {
    Tensor r;
    r.shape = std::move(out_shape);
    r.data = std::move(out);
    return r;
  }
  int an = a.node;
  return finish(g, std::move(out_shape), std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    std::vector<double> tmp(gy.size());
    transpose_copy(gy.data(), tmp.data(), batches, n, m);
    gr.accumulate(an, tmp.data(), static_cast<std::int64_t>(tmp.size()));
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat: no inputs");
  const std::int64_t rows = parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    check_finite(p, "concat");
    require(p.rows() == rows && p.rank() == parts[0].rank(),
            "concat: incompatible shapes " + shape_str(parts[0].shape) + " vs " +
                shape_str(p.shape));
    total += p.last_dim();
  }
  Shape out_shape = parts[0].shape;
  out_shape.back() = total;
  Buf out = alloc(rows * total);
  {
    int off = 0;
    for (const Tensor& p : parts) {
      const int d = p.last_dim();
      for (std::int64_t r = 0; r < rows; ++r) {
        std::memcpy(out->data() + r * total + off, p.ptr() + r * d, d * sizeof(double));
      }
      off += d;
    }
  }
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  Graph* g = nullptr;
  for (const Tensor& p : parts) {
    if (p.tracked()) {
      require(!g || g == p.graph, "concat: inputs on different tapes");
      g = p.graph;
    }
  }
  if (!g) {
    Tensor r;
    r.shape = std::move(out_shape);
    r.data = std::move(out);
    return r;
  }
  struct Piece {
    int node;
    int dim;
    int offset;
  };
  std::vector<Piece> pieces;
  {
    int off = 0;
    for (const Tensor& p : parts) {
      pieces.push_back({p.node, p.last_dim(), off});
      off += p.last_dim();
    }
  }
  return finish(g, std::move(out_shape), std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    for (const Piece& pc : pieces) {
      if (pc.node < 0) continue;
      std::vector<double>& dst = gr.grad_buf(pc.node);
      for (std::int64_t r = 0; r < rows; ++r) {
        kernels::vaxpy(dst.data() + r * pc.dim, 1.0, gy.data() + r * total + pc.offset, pc.dim);
      }
    }
  });
}

Tensor slice_last(const Tensor& a, int start, int len) {
  check_finite(a, "slice");
  const int d = a.last_dim();
  require(start >= 0 && len > 0 && start + len <= d,
          "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") out of bounds for " + shape_str(a.shape));
  const std::int64_t rows = a.rows();
  Shape out_shape = a.shape;
  out_shape.back() = len;
  Buf out = alloc(rows * len);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(out->data() + r * len, a.ptr() + r * d + start, len * sizeof(double));
  }
  Graph* g = pick_graph({&a});
  if (!g) {
    Tensor r;
    r.shape = std::move(out_shape);
    r.data = std::move(out);
    return r;
  }
  int an = a.node;
  return finish(g, std::move(out_shape), std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    std::vector<double>& da = gr.grad_buf(an);
    for (std::int64_t r = 0; r < rows; ++r) {
      kernels::vaxpy(da.data() + r * d + start, 1.0, gy.data() + r * len, len);
    }
  });
}

Tensor reshape(const Tensor& a, Shape s) {
  require(numel(s) == a.size(),
          "reshape: " + shape_str(a.shape) + " -> " + shape_str(s) + " changes element count");
  Graph* g = pick_graph({&a});
  if (!g) {
    Tensor r;
    r.shape = std::move(s);
    r.data = a.data;
    return r;
  }
  int an = a.node;
  const std::int64_t n = a.size();
  return finish(g, std::move(s), a.data, [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    gr.accumulate(an, gy.data(), n);
  });
}

Tensor reduce_sum(const Tensor& a) {
  check_finite(a, "reduce_sum");
  const std::int64_t n = a.size();
  Buf out = alloc(1);
  (*out)[0] = kernels::vsum(a.ptr(), n);
  Graph* g = pick_graph({&a});
  if (!g) {
    Tensor r;
    r.shape = {1};
    r.data = std::move(out);
    return r;
  }
  int an = a.node;
  return finish(g, {1}, std::move(out), [=](Graph& gr, int self) {
    const double gy = gr.grad_buf(self)[0];
    std::vector<double>& da = gr.grad_buf(an);
    for (std::int64_t i = 0; i < n; ++i) da[i] += gy;
  });
}

Tensor reduce_mean(const Tensor& a) {
  Tensor s = reduce_sum(a);
  return scale(s, 1.0 / static_cast<double>(a.size()));
}

namespace {

// Shared softmax forward on rows; returns probabilities.
Buf softmax_rows(const Tensor& a) {
  const std::int64_t rows = a.rows();
  const int d = a.last_dim();
  Buf out = alloc(a.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = a.ptr() + r * d;
    double* y = out->data() + r * d;
    double mx = x[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      sum += y[i];
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < d; ++i) y[i] *= inv;
  }
  return out;
}

}  // namespace

Tensor softmax_last(const Tensor& a) {
  check_finite(a, "softmax");
  Buf out = softmax_rows(a);
  Graph* g = pick_graph({&a});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  int an = a.node;
  const std::int64_t rows = a.rows();
  const int d = a.last_dim();
  Buf y = out;  // keep probabilities for the backward rule
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    std::vector<double>& da = gr.grad_buf(an);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* yr = y->data() + r * d;
      const double* gr_ = gy.data() + r * d;
      const double dot = kernels::vdot(gr_, yr, d);
      double* dar = da.data() + r * d;
      for (int i = 0; i < d; ++i) dar[i] += yr[i] * (gr_[i] - dot);
    }
  });
}

Tensor log_softmax_last(const Tensor& a) {
  check_finite(a, "log_softmax");
  const std::int64_t rows = a.rows();
  const int d = a.last_dim();
  Buf out = alloc(a.size());
  Buf probs = alloc(a.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = a.ptr() + r * d;
    double* y = out->data() + r * d;
    double* p = probs->data() + r * d;
    double mx = x[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) sum += std::exp(x[i] - mx);
    const double lse = mx + std::log(sum);
    for (int i = 0; i < d; ++i) {
      y[i] = x[i] - lse;
      p[i] = std::exp(y[i]);
    }
  }
  Graph* g = pick_graph({&a});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  int an = a.node;
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    std::vector<double>& da = gr.grad_buf(an);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* pr = probs->data() + r * d;
      const double* gr_ = gy.data() + r * d;
      const double gsum = kernels::vsum(gr_, d);
      double* dar = da.data() + r * d;
      for (int i = 0; i < d; ++i) dar[i] += gr_[i] - pr[i] * gsum;
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  check_finite(a, "layer_norm");
  check_finite(gain, "layer_norm");
  check_finite(bias, "layer_norm");
  const int d = a.last_dim();
  require(gain.size() == d && bias.size() == d,
          "layer_norm: gain/bias size must match last dim of " + shape_str(a.shape));
  const std::int64_t rows = a.rows();
  Buf out = alloc(a.size());
  Buf xhat = alloc(a.size());
  Buf inv_std = alloc(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = a.ptr() + r * d;
    double mean = kernels::vsum(x, d) / d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      const double c = x[i] - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    double* xh = xhat->data() + r * d;
    double* y = out->data() + r * d;
    for (int i = 0; i < d; ++i) {
      xh[i] = (x[i] - mean) * inv;
      y[i] = xh[i] * (*gain.data)[i] + (*bias.data)[i];
    }
  }
  Graph* g = pick_graph({&a, &gain, &bias});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  int an = a.node, gn = gain.node, bn = bias.node;
  auto gdata = gain.data;
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* gyr = gy.data() + r * d;
      const double* xh = xhat->data() + r * d;
      if (gn >= 0) {
        std::vector<double>& dg = gr.grad_buf(gn);
        for (int i = 0; i < d; ++i) dg[i] += gyr[i] * xh[i];
      }
      if (bn >= 0) {
        std::vector<double>& db = gr.grad_buf(bn);
        kernels::vaxpy(db.data(), 1.0, gyr, d);
      }
      if (an >= 0) {
        std::vector<double>& da = gr.grad_buf(an);
        // dxhat = gy * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        double s1 = 0.0, s2 = 0.0;
        std::vector<double> dxh(d);
        for (int i = 0; i < d; ++i) {
          dxh[i] = gyr[i] * (*gdata)[i];
          s1 += dxh[i];
          s2 += dxh[i] * xh[i];
        }
        s1 /= d;
        s2 /= d;
        const double inv = (*inv_std)[r];
        double* dar = da.data() + r * d;
        for (int i = 0; i < d; ++i) dar[i] += inv * (dxh[i] - s1 - xh[i] * s2);
      }
    }
  });
}

Tensor relu(const Tensor& a) {
  check_finite(a, "relu");
  const std::int64_t n = a.size();
  Buf out = alloc(n);
  const double* x = a.ptr();
  for (std::int64_t i = 0; i < n; ++i) (*out)[i] = x[i] > 0.0 ? x[i] : 0.0;
  Graph* g = pick_graph({&a});
  if (!g) {
    Tensor r;
    r.shape = a.shape;
    r.data = std::move(out);
    return r;
  }
  int an = a.node;
  auto adata = a.data;
  return finish(g, a.shape, std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    std::vector<double>& da = gr.grad_buf(an);
    for (std::int64_t i = 0; i < n; ++i) {
      if ((*adata)[i] > 0.0) da[i] += gy[i];
    }
  });
}

Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids, Shape ids_shape) {
  check_finite(table, "embedding_gather");
  require(table.rank() == 2, "embedding_gather: table must be [V,d], got " + shape_str(table.shape));
  require(numel(ids_shape) == static_cast<std::int64_t>(ids.size()),
          "embedding_gather: ids shape mismatch");
  const int V = table.shape[0];
  const int d = table.shape[1];
  for (int id : ids) {
    require(id >= 0 && id < V,
            "embedding_gather: id " + std::to_string(id) + " out of range for vocab " +
                std::to_string(V));
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  const std::int64_t rows = static_cast<std::int64_t>(ids.size());
  Buf out = alloc(rows * d);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(out->data() + r * d, table.ptr() + static_cast<std::int64_t>(ids[r]) * d,
                d * sizeof(double));
  }
  Graph* g = pick_graph({&table});
  if (!g) {
    Tensor r;
    r.shape = std::move(out_shape);
    r.data = std::move(out);
    return r;
  }
  int tn = table.node;
  auto ids_copy = ids;
  return finish(g, std::move(out_shape), std::move(out), [=](Graph& gr, int self) {
    const std::vector<double>& gy = gr.grad_buf(self);
    std::vector<double>& dt = gr.grad_buf(tn);
    for (std::int64_t r = 0; r < rows; ++r) {
      kernels::vaxpy(dt.data() + static_cast<std::int64_t>(ids_copy[r]) * d, 1.0,
                     gy.data() + r * d, d);
    }
  });
}

Tensor dropout_with_given_mask(const Tensor& a, const Tensor& mask) {
  require(!mask.tracked(), "dropout: mask must be a constant");
  require(same_shape(a.shape, mask.shape),
          "dropout: mask shape " + shape_str(mask.shape) + " does not match " +
              shape_str(a.shape));
  return multiply(a, mask);
}

Tensor kl_divergence_rowwise(const Tensor& labels, const Tensor& logp, const Tensor& row_weights) {
  check_finite(labels, "kl_divergence");
  check_finite(logp, "kl_divergence");
  check_finite(row_weights, "kl_divergence");
  require(!labels.tracked() && !row_weights.tracked(),
          "kl_divergence: labels and row weights must be constants");
  require(same_shape(labels.shape, logp.shape),
          "kl_divergence: shape mismatch " + shape_str(labels.shape) + " vs " +
              shape_str(logp.shape));
  const std::int64_t rows = logp.rows();
  const int d = logp.last_dim();
  require(row_weights.size() == rows, "kl_divergence: need one weight per row");
  Buf out = alloc(1);
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double w = (*row_weights.data)[r];
    if (w == 0.0) continue;
    const double* h = labels.ptr() + r * d;
    const double* lp = logp.ptr() + r * d;
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
      if (h[i] > 0.0) s += h[i] * (std::log(h[i]) - lp[i]);
    }
    total += w * s;
  }
  (*out)[0] = total;
  Graph* g = pick_graph({&logp});
  if (!g) {
    Tensor r;
    r.shape = {1};
    r.data = std::move(out);
    return r;
  }
  int pn = logp.node;
  auto h = labels.data;
  auto w = row_weights.data;
  return finish(g, {1}, std::move(out), [=](Graph& gr, int self) {
    const double gy = gr.grad_buf(self)[0];
    std::vector<double>& dp = gr.grad_buf(pn);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double wr = (*w)[r];
      if (wr == 0.0) continue;
      kernels::vaxpy(dp.data() + r * d, -gy * wr, h->data() + r * d, d);
    }
  });
}

Tensor stop_gradient(const Tensor& a) {
  Tensor out;
  out.shape = a.shape;
  out.data = a.data;
  return out;
}

// ---- gradient check ----

GradCheckReport gradient_check(const GradCheckFn& f,
                               std::vector<std::pair<std::string, Tensor*>> params,
                               double eps, double tolerance, int max_samples,
                               std::uint64_t seed) {
  std::vector<std::vector<double>> analytic(params.size());
  std::vector<std::vector<double>*> grad_ptrs;
  for (std::size_t i = 0; i < params.size(); ++i) {
    analytic[i].assign(params[i].second->size(), 0.0);
    grad_ptrs.push_back(&analytic[i]);
  }
  const double base = f(&grad_ptrs);
  const double replay = f(nullptr);
  if (base != replay) {
    throw TensorError("gradient_check: objective is not deterministic (" + std::to_string(base) +
                      " vs " + std::to_string(replay) + "); pin all RNG streams");
  }

  // Flat coordinate space across all parameters.
  std::int64_t total = 0;
  for (auto& [name, t] : params) total += t->size();
  std::vector<std::int64_t> coords;
  if (total <= max_samples) {
    coords.resize(total);
    for (std::int64_t i = 0; i < total; ++i) coords[i] = i;
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int64_t> dist(0, total - 1);
    std::vector<char> seen(total, 0);
    while (static_cast<int>(coords.size()) < max_samples) {
      std::int64_t c = dist(rng);
      if (!seen[c]) {
        seen[c] = 1;
        coords.push_back(c);
      }
    }
  }

  GradCheckReport report;
  for (std::int64_t c : coords) {
    std::int64_t off = c;
    std::size_t pi = 0;
    while (off >= params[pi].second->size()) {
      off -= params[pi].second->size();
      ++pi;
    }
    std::vector<double>& buf = *params[pi].second->data;
    const double orig = buf[off];
    buf[off] = orig + eps;
    const double fp = f(nullptr);
    buf[off] = orig - eps;
    const double fm = f(nullptr);
    buf[off] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[pi][off];
    const double denom = std::max(std::abs(a), std::abs(numeric));
    const double rel = denom == 0.0 ? 0.0 : std::abs(a - numeric) / std::max(denom, 1e-4);
    GradCheckEntry e{params[pi].first, off, a, numeric, rel};
    ++report.checked;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst = e;
    }
    if (rel > tolerance) report.failures.push_back(e);
  }
  report.pass = report.failures.empty();
  return report;
}

}  // namespace f2x::ag
