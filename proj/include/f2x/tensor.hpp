#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

// Dense f64 tensors (rank 1..3) with a reverse-mode tape. Tensors are
// immutable after construction; a Graph records primitives and replays
// exact vector-Jacobian rules in reverse. Tensors with node == -1 are
// constants: ops on them compute forward values without touching any tape.
namespace f2x::ag {

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Graph;

struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  Graph* graph = nullptr;
  int node = -1;

  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor from(Shape s, std::vector<double> values);
  static Tensor scalar(double v) { return from({1}, {v}); }

  std::int64_t size() const { return data ? static_cast<std::int64_t>(data->size()) : 0; }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double item() const;
  bool tracked() const { return node >= 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  // Leading dims collapsed: the tensor viewed as [rows, last_dim].
  std::int64_t rows() const;
  int last_dim() const { return shape.empty() ? 0 : shape.back(); }
};

class Graph {
 public:
  // Registers t's buffer as a differentiable leaf and returns a tracked view.
  Tensor leaf(const Tensor& t);

  // Reverse pass from a scalar loss. Gradients of all reached nodes are
  // retained until the next backward() call.
  void backward(const Tensor& loss);

  // Gradient buffer for a node, or nullptr if the node was never reached.
  const std::vector<double>* grad(int node) const;

  std::size_t num_nodes() const { return nodes_.size(); }

  // --- used by op implementations ---
  int add_node(std::int64_t size, std::function<void(Graph&)> back);
  void set_back(int node, std::function<void(Graph&)> back);
  std::vector<double>& grad_buf(int node);
  bool has_grad(int node) const { return touched_[node] != 0; }
  void accumulate(int node, const double* g, std::int64_t n);

 private:
  struct Node {
    std::int64_t size;
    std::function<void(Graph&)> back;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<char> touched_;
};

// ---- primitive suite ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);  // same shape, or b a last-axis vector
Tensor multiply(const Tensor& a, const Tensor& b);  // same shape
// Per-row scalar multiply: w has one entry per row of a (leading dims).
Tensor row_scale(const Tensor& a, const Tensor& w);
Tensor scale(const Tensor& a, double s);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // last two axes
Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& a, int start, int len);
Tensor reshape(const Tensor& a, Shape s);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
Tensor softmax_last(const Tensor& a);
Tensor log_softmax_last(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
Tensor relu(const Tensor& a);
// ids indexes rows of table [V, d]; out shape = ids_shape + [d].
Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids, Shape ids_shape);
// mask entries are 0 or 1/(1-p); an all-ones mask is the identity.
Tensor dropout_with_given_mask(const Tensor& a, const Tensor& mask);
// sum_r w_r * KL(labels_r || softmax row r), with logp = log_softmax rows.
// labels and row_weights are constants; gradient flows into logp only.
Tensor kl_divergence_rowwise(const Tensor& labels, const Tensor& logp, const Tensor& row_weights);
Tensor stop_gradient(const Tensor& a);

// ---- gradient check ----

struct GradCheckEntry {
  std::string name;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  int checked = 0;
  std::vector<GradCheckEntry> failures;
  GradCheckEntry worst;
};

// f evaluates the scalar objective on the current parameter values; when
// grads != nullptr it must also fill per-parameter gradient buffers (same
// order as params). f must be deterministic: it is called repeatedly and an
// inconsistent value is rejected.
using GradCheckFn =
    std::function<double(std::vector<std::vector<double>*>* grads)>;

GradCheckReport gradient_check(const GradCheckFn& f,
                               std::vector<std::pair<std::string, Tensor*>> params,
                               double eps, double tolerance, int max_samples,
                               std::uint64_t seed);

void check_finite(const Tensor& t, const char* op);

}  // namespace f2x::ag
