#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// tensors. A Graph owns every intermediate of one forward pass; calling
// backward() on a scalar result accumulates gradients into the bound
// Parameters. Instantiated for float (training) and double (gradient checks).

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pomnet::ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  std::size_t size() const { return value.size(); }
  void zero_grad() { grad.assign(value.size(), T(0)); }
};

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, int id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph<T>* graph() const { return graph_; }
  int id() const { return id_; }

  const Shape& shape() const;
  int dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape().size()); }
  std::size_t size() const { return numel(shape()); }
  std::span<const T> value() const;
  std::span<const T> grad() const;

 private:
  Graph<T>* graph_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, int self)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter<T>* param = nullptr;
  };

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Shape shape, std::vector<T> values);
  // Repeated calls with the same Parameter return the same leaf.
  Var<T> parameter(Parameter<T>& param);

  // Seeds d(root)/d(root) = 1 and propagates; root must hold one element.
  // Leaf gradients are added to Parameter::grad (allocated on demand).
  void backward(Var<T> root);

  // Used by op implementations.
  Var<T> emit(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs,
              Backward backward);
  Var<T> emit(Shape shape, std::vector<T> value, const std::vector<Var<T>>& inputs,
              Backward backward);
  Node& node(int id) { return *nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return *nodes_[static_cast<std::size_t>(id)]; }
  bool needs_grad(int id) const { return node(id).needs_grad; }
  // Gradient buffer of a node, zero-filled on first access.
  std::vector<T>& grad_buffer(int id);
  std::size_t node_count() const { return nodes_.size(); }

 private:
  bool record_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
};

template <typename T>
const Shape& Var<T>::shape() const {
  return graph_->node(id_).shape;
}

template <typename T>
std::span<const T> Var<T>::value() const {
  return graph_->node(id_).value;
}

template <typename T>
std::span<const T> Var<T>::grad() const {
  return graph_->node(id_).grad;
}

// ---- elementwise and structural -------------------------------------------

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> transpose(Var<T> x);  // rank-2
template <typename T> Var<T> sum(Var<T> x);         // -> [1]
// Arithmetic mean of rank-1 scalars.
template <typename T> Var<T> mean_of(const std::vector<Var<T>>& scalars);

// x [..., N] + b [N]
template <typename T> Var<T> add_last_dim(Var<T> x, Var<T> b);
// x [N, C, H, W] + b [C]
template <typename T> Var<T> add_channel_bias(Var<T> x, Var<T> b);
// x [N, ...] + y [1, ...]
template <typename T> Var<T> add_broadcast_batch(Var<T> x, Var<T> y);

// ---- linear algebra --------------------------------------------------------

// op(a) [M,K] x op(b) [K,N]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a = false, bool transpose_b = false);
// x [M, in] W^T [in, out] + bias [out] (bias may be invalid)
template <typename T> Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);

// ---- normalization ---------------------------------------------------------

// Row-wise over the last dimension of x [M, D].
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5);
// x [N, C, H, W], statistics per (sample, group).
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, double eps = 1e-5);

// ---- convolution -----------------------------------------------------------

// x [N, C, H, W], w [O, C, kh, kw] -> [N, O, Ho, Wo]
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, int stride, int pad);
// x [N, C, H, W], w [C, O, k, k] -> [N, O, (H-1)s - 2p + k, ...]
template <typename T> Var<T> conv_transpose2d(Var<T> x, Var<T> w, int stride, int pad);
template <typename T> Var<T> max_pool2d(Var<T> x, int kernel, int stride, int pad);

// ---- attention and keypoint plumbing ---------------------------------------

// Multi-head scaled dot-product attention over already-projected
// q [Lq, D], k [Lk, D], v [Lk, D]. key_mask (length Lk, empty = all keys)
// excludes zero entries from every softmax. Returns [Lq, D].
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads,
                 const std::vector<std::uint8_t>& key_mask = {});

// out[i] = rows[source[i]] if source[i] >= 0, else placeholder. rows [J, D],
// placeholder [D], result [source.size(), D].
template <typename T>
Var<T> assemble_rows(Var<T> rows, Var<T> placeholder, const std::vector<int>& source);

// Rows [begin, begin + count) of a rank-2 tensor.
template <typename T> Var<T> slice_rows(Var<T> x, int begin, int count);

// x [J, D] -> [J, D, h, w], every spatial cell a copy of its row.
template <typename T> Var<T> expand_spatial(Var<T> x, int h, int w);

// Per-row mean over the sets in which the row is valid; rows valid in no set
// are taken from sets[0]. Identical inputs give bit-identical output.
template <typename T>
Var<T> masked_mean_rows(const std::vector<Var<T>>& sets,
                        const std::vector<std::vector<std::uint8_t>>& valid);

// d[j, n] = -sqrt(|a_j - b_n|^2 + eps), a [J, C], b [N, C]
template <typename T> Var<T> neg_l2_distance(Var<T> a, Var<T> b, double eps = 1e-12);
template <typename T> Var<T> l2_normalize_rows(Var<T> x, double eps = 1e-12);

// ---- losses ----------------------------------------------------------------

// (1 / (J_sup * H * W)) * sum over supervised channels of squared error.
// pred [J, H, W]; target has the same element count.
template <typename T>
Var<T> masked_mse(Var<T> pred, const std::vector<T>& target,
                  const std::vector<std::uint8_t>& supervised);

// Mean over rows with mask != 0 of -log softmax(logits[j])[target[j]].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& target,
                             const std::vector<std::uint8_t>& mask);

}  // namespace pomnet::ag
