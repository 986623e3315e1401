#include "pomnet/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace pomnet::ag {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const Mat<T>>;

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.graph() == b.graph(), op, "operands belong to different graphs");
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Column layout: row (c*kh + i)*kw + j, column oy*Wo + ox.
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
            int Wo, T* cols) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        T* row = cols + static_cast<std::size_t>((c * kh + i) * kw + j) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + i;
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + j;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, T* x) {
  const int P = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const T* row = cols + static_cast<std::size_t>((c * kh + i) * kw + j) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (static_cast<std::size_t>(c) * H + iy) * W;
          const T* src = row + oy * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + j;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---- Graph -----------------------------------------------------------------

template <typename T>
Var<T> Graph<T>::constant(Shape shape, std::vector<T> values) {
  if (values.size() != numel(shape))
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  auto n = std::make_unique<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Graph<T>::parameter(Parameter<T>& param) {
  if (auto it = param_nodes_.find(&param); it != param_nodes_.end()) return Var<T>(this, it->second);
  auto n = std::make_unique<Node>();
  n->shape = param.shape;
  n->value = param.value;
  n->needs_grad = record_;
  n->param = &param;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_[&param] = id;
  return Var<T>(this, id);
}

template <typename T>
Var<T> Graph<T>::emit(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs,
                      Backward backward) {
  return emit(std::move(shape), std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Graph<T>::emit(Shape shape, std::vector<T> value, const std::vector<Var<T>>& inputs,
                      Backward backward) {
  auto n = std::make_unique<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (record_) {
    for (const auto& in : inputs) {
      if (in.valid() && node(in.id()).needs_grad) n->needs_grad = true;
    }
    if (n->needs_grad) n->backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
std::vector<T>& Graph<T>::grad_buffer(int id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> root) {
  if (root.graph() != this) throw std::logic_error("backward: root from another graph");
  if (root.size() != 1) throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
  if (!record_) throw std::logic_error("backward: graph was built without recording");
  grad_buffer(root.id())[0] = T(1);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = node(id);
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      if (pg.size() != n.grad.size()) pg.assign(n.grad.size(), T(0));
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }
}

// ---- elementwise -------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same(a, b, "add");
  auto& g = *a.graph();
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const int ia = a.id(), ib = b.id();
  return g.emit(a.shape(), std::move(out), {a, b}, [ia, ib](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    for (int in : {ia, ib}) {
      if (!g.needs_grad(in)) continue;
      auto& gi = g.grad_buffer(in);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same(a, b, "sub");
  auto& g = *a.graph();
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const int ia = a.id(), ib = b.id();
  return g.emit(a.shape(), std::move(out), {a, b}, [ia, ib](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    if (g.needs_grad(ia)) {
      auto& gi = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
    if (g.needs_grad(ib)) {
      auto& gi = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] -= go[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same(a, b, "mul");
  auto& g = *a.graph();
  std::vector<T> out(a.size());
  auto av = a.value(), bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int ia = a.id(), ib = b.id();
  return g.emit(a.shape(), std::move(out), {a, b}, [ia, ib](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    const auto& va = g.node(ia).value;
    const auto& vb = g.node(ib).value;
    if (g.needs_grad(ia)) {
      auto& gi = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * vb[i];
    }
    if (g.needs_grad(ib)) {
      auto& gi = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * va[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  auto& g = *a.graph();
  std::vector<T> out(a.value().begin(), a.value().end());
  for (auto& v : out) v *= s;
  const int ia = a.id();
  return g.emit(a.shape(), std::move(out), {a}, [ia, s](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    auto& gi = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * s;
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  auto& g = *x.graph();
  std::vector<T> out(x.value().begin(), x.value().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  const int ix = x.id();
  return g.emit(x.shape(), std::move(out), {x}, [ix](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    const auto& y = g.node(self).value;
    auto& gi = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gi.size(); ++i)
      if (y[i] > T(0)) gi[i] += go[i];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  require(numel(shape) == x.size(), "reshape",
          shape_str(x.shape()) + " -> " + shape_str(shape));
  auto& g = *x.graph();
  std::vector<T> out(x.value().begin(), x.value().end());
  const int ix = x.id();
  return g.emit(std::move(shape), std::move(out), {x}, [ix](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    auto& gi = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
  });
}

template <typename T>
Var<T> transpose(Var<T> x) {
  require(x.rank() == 2, "transpose", "expects rank 2, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  auto& g = *x.graph();
  std::vector<T> out(x.size());
  MatMap<T>(out.data(), n, m) = CMatMap<T>(x.value().data(), m, n).transpose();
  const int ix = x.id();
  return g.emit({n, m}, std::move(out), {x}, [ix, m, n](Graph<T>& g, int self) {
    auto& gi = g.grad_buffer(ix);
    MatMap<T>(gi.data(), m, n) += CMatMap<T>(g.node(self).grad.data(), n, m).transpose();
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  auto& g = *x.graph();
  T s = T(0);
  for (T v : x.value()) s += v;
  const int ix = x.id();
  return g.emit({1}, {s}, {x}, [ix](Graph<T>& g, int self) {
    const T go = g.node(self).grad[0];
    for (auto& v : g.grad_buffer(ix)) v += go;
  });
}

template <typename T>
Var<T> mean_of(const std::vector<Var<T>>& scalars) {
  require(!scalars.empty(), "mean_of", "no inputs");
  auto& g = *scalars.front().graph();
  T s = T(0);
  std::vector<int> ids;
  for (const auto& v : scalars) {
    require(v.size() == 1, "mean_of", "inputs must be scalars");
    s += v.value()[0];
    ids.push_back(v.id());
  }
  const T inv = T(1) / static_cast<T>(scalars.size());
  return g.emit({1}, {s * inv}, scalars, [ids, inv](Graph<T>& g, int self) {
    const T go = g.node(self).grad[0] * inv;
    for (int id : ids)
      if (g.needs_grad(id)) g.grad_buffer(id)[0] += go;
  });
}

template <typename T>
Var<T> add_last_dim(Var<T> x, Var<T> b) {
  require(b.rank() == 1 && x.rank() >= 1 && x.shape().back() == b.dim(0), "add_last_dim",
          shape_str(x.shape()) + " + " + shape_str(b.shape()));
  auto& g = *x.graph();
  const std::size_t n = static_cast<std::size_t>(b.dim(0));
  std::vector<T> out(x.value().begin(), x.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  const int ix = x.id(), ib = b.id();
  return g.emit(x.shape(), std::move(out), {x, b}, [ix, ib, n](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    if (g.needs_grad(ix)) {
      auto& gi = g.grad_buffer(ix);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
    if (g.needs_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % n] += go[i];
    }
  });
}

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> b) {
  require(x.rank() == 4 && b.rank() == 1 && b.dim(0) == x.dim(1), "add_channel_bias",
          shape_str(x.shape()) + " + " + shape_str(b.shape()));
  auto& g = *x.graph();
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<T> out(x.value().begin(), x.value().end());
  auto bv = b.value();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T* p = out.data() + (static_cast<std::size_t>(n) * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) p[i] += bv[c];
    }
  const int ix = x.id(), ib = b.id();
  return g.emit(x.shape(), std::move(out), {x, b}, [ix, ib, N, C, P](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    if (g.needs_grad(ix)) {
      auto& gi = g.grad_buffer(ix);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
    if (g.needs_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T* p = go.data() + (static_cast<std::size_t>(n) * C + c) * P;
          T s = T(0);
          for (std::size_t i = 0; i < P; ++i) s += p[i];
          gb[c] += s;
        }
    }
  });
}

template <typename T>
Var<T> add_broadcast_batch(Var<T> x, Var<T> y) {
  require(x.rank() >= 1 && y.rank() == x.rank() && y.dim(0) == 1 &&
              std::equal(x.shape().begin() + 1, x.shape().end(), y.shape().begin() + 1),
          "add_broadcast_batch", shape_str(x.shape()) + " + " + shape_str(y.shape()));
  auto& g = *x.graph();
  const std::size_t per = y.size();
  const int N = x.dim(0);
  std::vector<T> out(x.value().begin(), x.value().end());
  auto yv = y.value();
  for (int n = 0; n < N; ++n)
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] += yv[i];
  const int ix = x.id(), iy = y.id();
  return g.emit(x.shape(), std::move(out), {x, y}, [ix, iy, per, N](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    if (g.needs_grad(ix)) {
      auto& gi = g.grad_buffer(ix);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
    if (g.needs_grad(iy)) {
      auto& gy = g.grad_buffer(iy);
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < per; ++i) gy[i] += go[n * per + i];
    }
  });
}

// ---- linear algebra ----------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_a, bool transpose_b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul",
          "expects rank 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int M = transpose_a ? ac : ar, K = transpose_a ? ar : ac;
  const int K2 = transpose_b ? bc : br, N = transpose_b ? br : bc;
  require(K == K2, "matmul", "inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto& g = *a.graph();
  std::vector<T> out(static_cast<std::size_t>(M) * N);
  CMatMap<T> A(a.value().data(), ar, ac), B(b.value().data(), br, bc);
  MatMap<T> O(out.data(), M, N);
  if (!transpose_a && !transpose_b) O.noalias() = A * B;
  else if (transpose_a && !transpose_b) O.noalias() = A.transpose() * B;
  else if (!transpose_a && transpose_b) O.noalias() = A * B.transpose();
  else O.noalias() = A.transpose() * B.transpose();
  const int ia = a.id(), ib = b.id();
  return g.emit({M, N}, std::move(out), {a, b},
                [=](Graph<T>& g, int self) {
                  CMatMap<T> G(g.node(self).grad.data(), M, N);
                  CMatMap<T> A(g.node(ia).value.data(), ar, ac), B(g.node(ib).value.data(), br, bc);
                  if (g.needs_grad(ia)) {
                    MatMap<T> GA(g.grad_buffer(ia).data(), ar, ac);
                    // dA = G op(B)^T, transposed back when a was transposed
                    if (!transpose_a && !transpose_b) GA.noalias() += G * B.transpose();
                    else if (!transpose_a && transpose_b) GA.noalias() += G * B;
                    else if (transpose_a && !transpose_b) GA.noalias() += B * G.transpose();
                    else GA.noalias() += B.transpose() * G.transpose();
                  }
                  if (g.needs_grad(ib)) {
                    MatMap<T> GB(g.grad_buffer(ib).data(), br, bc);
                    if (!transpose_a && !transpose_b) GB.noalias() += A.transpose() * G;
                    else if (transpose_a && !transpose_b) GB.noalias() += A * G;
                    else if (!transpose_a && transpose_b) GB.noalias() += G.transpose() * A;
                    else GB.noalias() += G.transpose() * A.transpose();
                  }
                });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  auto y = matmul(x, weight, false, true);
  return bias.valid() ? add_last_dim(y, bias) : y;
}

// ---- normalization -----------------------------------------------------------

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
  require(x.rank() == 2 && gamma.rank() == 1 && gamma.dim(0) == x.dim(1) &&
              beta.shape() == gamma.shape(),
          "layer_norm", shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  const int M = x.dim(0), D = x.dim(1);
  auto& g = *x.graph();
  auto xv = x.value(), gv = gamma.value(), bv = beta.value();
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(M);
  std::vector<T> out(x.size());
  for (int r = 0; r < M; ++r) {
    const T* row = xv.data() + static_cast<std::size_t>(r) * D;
    T mean = T(0);
    for (int d = 0; d < D; ++d) mean += row[d];
    mean /= static_cast<T>(D);
    T var = T(0);
    for (int d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = is;
    for (int d = 0; d < D; ++d) {
      const std::size_t k = static_cast<std::size_t>(r) * D + d;
      (*xhat)[k] = (row[d] - mean) * is;
      out[k] = (*xhat)[k] * gv[d] + bv[d];
    }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return g.emit(x.shape(), std::move(out), {x, gamma, beta},
                [=](Graph<T>& g, int self) {
                  const auto& go = g.node(self).grad;
                  const auto& gv = g.node(ig).value;
                  if (g.needs_grad(ig)) {
                    auto& gg = g.grad_buffer(ig);
                    for (std::size_t k = 0; k < go.size(); ++k) gg[k % D] += go[k] * (*xhat)[k];
                  }
                  if (g.needs_grad(ib)) {
                    auto& gb = g.grad_buffer(ib);
                    for (std::size_t k = 0; k < go.size(); ++k) gb[k % D] += go[k];
                  }
                  if (!g.needs_grad(ix)) return;
                  auto& gx = g.grad_buffer(ix);
                  for (int r = 0; r < M; ++r) {
                    const std::size_t o = static_cast<std::size_t>(r) * D;
                    T s1 = T(0), s2 = T(0);
                    for (int d = 0; d < D; ++d) {
                      const T dxh = go[o + d] * gv[d];
                      s1 += dxh;
                      s2 += dxh * (*xhat)[o + d];
                    }
                    const T is = (*inv_std)[r] / static_cast<T>(D);
                    for (int d = 0; d < D; ++d) {
                      const T dxh = go[o + d] * gv[d];
                      gx[o + d] += is * (static_cast<T>(D) * dxh - s1 - (*xhat)[o + d] * s2);
                    }
                  }
                });
}

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, double eps) {
  require(x.rank() == 4 && groups > 0 && x.dim(1) % groups == 0, "group_norm",
          shape_str(x.shape()) + " with " + std::to_string(groups) + " groups");
  require(gamma.rank() == 1 && gamma.dim(0) == x.dim(1) && beta.shape() == gamma.shape(),
          "group_norm", "affine shape " + shape_str(gamma.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int cg = C / groups;
  const std::size_t m = static_cast<std::size_t>(cg) * P;
  auto& g = *x.graph();
  auto xv = x.value(), gv = gamma.value(), bv = beta.value();
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N) * groups);
  std::vector<T> out(x.size());
  for (int n = 0; n < N; ++n) {
    for (int gr = 0; gr < groups; ++gr) {
      const std::size_t o = (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(gr) * cg) * P;
      T mean = T(0);
      for (std::size_t k = 0; k < m; ++k) mean += xv[o + k];
      mean /= static_cast<T>(m);
      T var = T(0);
      for (std::size_t k = 0; k < m; ++k) var += (xv[o + k] - mean) * (xv[o + k] - mean);
      var /= static_cast<T>(m);
      const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
      (*inv_std)[static_cast<std::size_t>(n) * groups + gr] = is;
      for (std::size_t k = 0; k < m; ++k) {
        const int c = gr * cg + static_cast<int>(k / P);
        (*xhat)[o + k] = (xv[o + k] - mean) * is;
        out[o + k] = (*xhat)[o + k] * gv[c] + bv[c];
      }
    }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return g.emit(x.shape(), std::move(out), {x, gamma, beta},
                [=](Graph<T>& g, int self) {
                  const auto& go = g.node(self).grad;
                  const auto& gv = g.node(ig).value;
                  if (g.needs_grad(ig) || g.needs_grad(ib)) {
                    auto& gg = g.grad_buffer(ig);
                    auto& gb = g.grad_buffer(ib);
                    for (int n = 0; n < N; ++n)
                      for (int c = 0; c < C; ++c) {
                        const std::size_t o = (static_cast<std::size_t>(n) * C + c) * P;
                        T sg = T(0), sb = T(0);
                        for (std::size_t k = 0; k < P; ++k) {
                          sg += go[o + k] * (*xhat)[o + k];
                          sb += go[o + k];
                        }
                        gg[c] += sg;
                        gb[c] += sb;
                      }
                  }
                  if (!g.needs_grad(ix)) return;
                  auto& gx = g.grad_buffer(ix);
                  for (int n = 0; n < N; ++n)
                    for (int gr = 0; gr < groups; ++gr) {
                      const std::size_t o =
                          (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(gr) * cg) * P;
                      T s1 = T(0), s2 = T(0);
                      for (std::size_t k = 0; k < m; ++k) {
                        const T dxh = go[o + k] * gv[gr * cg + static_cast<int>(k / P)];
                        s1 += dxh;
                        s2 += dxh * (*xhat)[o + k];
                      }
                      const T is = (*inv_std)[static_cast<std::size_t>(n) * groups + gr] / static_cast<T>(m);
                      for (std::size_t k = 0; k < m; ++k) {
                        const T dxh = go[o + k] * gv[gr * cg + static_cast<int>(k / P)];
                        gx[o + k] += is * (static_cast<T>(m) * dxh - s1 - (*xhat)[o + k] * s2);
                      }
                    }
                });
}

// ---- convolution -------------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, int stride, int pad) {
  require(x.rank() == 4 && w.rank() == 4 && w.dim(1) == x.dim(1), "conv2d",
          "input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  require(Ho > 0 && Wo > 0, "conv2d", "empty output for input " + shape_str(x.shape()));
  const int CKK = C * kh * kw, P = Ho * Wo;
  auto& g = *x.graph();
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N) * CKK * P);
  std::vector<T> out(static_cast<std::size_t>(N) * O * P);
  CMatMap<T> Wm(w.value().data(), O, CKK);
  for (int n = 0; n < N; ++n) {
    T* cn = cols->data() + static_cast<std::size_t>(n) * CKK * P;
    im2col(x.value().data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, kh, kw, stride, pad,
           Ho, Wo, cn);
    MatMap<T>(out.data() + static_cast<std::size_t>(n) * O * P, O, P).noalias() =
        Wm * CMatMap<T>(cn, CKK, P);
  }
  const int ix = x.id(), iw = w.id();
  return g.emit({N, O, Ho, Wo}, std::move(out), {x, w}, [=](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    CMatMap<T> Wm(g.node(iw).value.data(), O, CKK);
    if (g.needs_grad(iw)) {
      MatMap<T> GW(g.grad_buffer(iw).data(), O, CKK);
      for (int n = 0; n < N; ++n)
        GW.noalias() += CMatMap<T>(go.data() + static_cast<std::size_t>(n) * O * P, O, P) *
                        CMatMap<T>(cols->data() + static_cast<std::size_t>(n) * CKK * P, CKK, P).transpose();
    }
    if (g.needs_grad(ix)) {
      auto& gx = g.grad_buffer(ix);
      Mat<T> dcols(CKK, P);
      for (int n = 0; n < N; ++n) {
        dcols.noalias() = Wm.transpose() * CMatMap<T>(go.data() + static_cast<std::size_t>(n) * O * P, O, P);
        col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                   gx.data() + static_cast<std::size_t>(n) * C * H * W);
      }
    }
  });
}

template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, int stride, int pad) {
  require(x.rank() == 4 && w.rank() == 4 && w.dim(0) == x.dim(1) && w.dim(2) == w.dim(3),
          "conv_transpose2d", "input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(1), k = w.dim(2);
  const int Ho = (H - 1) * stride - 2 * pad + k, Wo = (W - 1) * stride - 2 * pad + k;
  require(Ho > 0 && Wo > 0, "conv_transpose2d", "empty output");
  const int OKK = O * k * k, P = H * W;
  auto& g = *x.graph();
  std::vector<T> out(static_cast<std::size_t>(N) * O * Ho * Wo, T(0));
  CMatMap<T> Wm(w.value().data(), C, OKK);
  Mat<T> cols(OKK, P);
  for (int n = 0; n < N; ++n) {
    cols.noalias() = Wm.transpose() * CMatMap<T>(x.value().data() + static_cast<std::size_t>(n) * C * P, C, P);
    // adjoint of a strided convolution from Ho x Wo down to H x W
    col2im_add(cols.data(), O, Ho, Wo, k, k, stride, pad, H, W,
               out.data() + static_cast<std::size_t>(n) * O * Ho * Wo);
  }
  const int ix = x.id(), iw = w.id();
  return g.emit({N, O, Ho, Wo}, std::move(out), {x, w}, [=](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    CMatMap<T> Wm(g.node(iw).value.data(), C, OKK);
    Mat<T> dcols(OKK, P);
    for (int n = 0; n < N; ++n) {
      im2col(go.data() + static_cast<std::size_t>(n) * O * Ho * Wo, O, Ho, Wo, k, k, stride, pad, H, W,
             dcols.data());
      if (g.needs_grad(ix)) {
        MatMap<T>(g.grad_buffer(ix).data() + static_cast<std::size_t>(n) * C * P, C, P).noalias() +=
            Wm * dcols;
      }
      if (g.needs_grad(iw)) {
        MatMap<T>(g.grad_buffer(iw).data(), C, OKK).noalias() +=
            CMatMap<T>(g.node(ix).value.data() + static_cast<std::size_t>(n) * C * P, C, P) *
            dcols.transpose();
      }
    }
  });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, int kernel, int stride, int pad) {
  require(x.rank() == 4, "max_pool2d", "expects rank 4, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = (H + 2 * pad - kernel) / stride + 1, Wo = (W + 2 * pad - kernel) / stride + 1;
  auto& g = *x.graph();
  auto xv = x.value();
  std::vector<T> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = base;
        for (int i = 0; i < kernel; ++i) {
          const int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) continue;
          for (int j = 0; j < kernel; ++j) {
            const int ix = ox * stride - pad + j;
            if (ix < 0 || ix >= W) continue;
            const std::size_t idx = base + static_cast<std::size_t>(iy) * W + ix;
            if (xv[idx] > best) {
              best = xv[idx];
              best_i = idx;
            }
          }
        }
        out[o] = best;
        (*arg)[o] = best_i;
      }
  }
  const int ix = x.id();
  return g.emit({N, C, Ho, Wo}, std::move(out), {x}, [ix, arg](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gx[(*arg)[i]] += go[i];
  });
}

// ---- attention ---------------------------------------------------------------

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, const std::vector<std::uint8_t>& key_mask) {
  require(q.rank() == 2 && k.rank() == 2 && v.shape() == k.shape() && q.dim(1) == k.dim(1),
          "attention", "q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                           shape_str(v.shape()));
  const int Lq = q.dim(0), Lk = k.dim(0), D = q.dim(1);
  require(heads > 0 && D % heads == 0, "attention", "dim " + std::to_string(D) +
                                                        " not divisible by " + std::to_string(heads));
  require(key_mask.empty() || static_cast<int>(key_mask.size()) == Lk, "attention",
          "key mask length " + std::to_string(key_mask.size()) + " for " + std::to_string(Lk) + " keys");
  if (!key_mask.empty() && std::none_of(key_mask.begin(), key_mask.end(), [](auto m) { return m != 0; }))
    throw std::invalid_argument("attention: key mask excludes every key");
  const int dh = D / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  auto& g = *q.graph();
  CMatMap<T> Q(q.value().data(), Lq, D), K(k.value().data(), Lk, D), V(v.value().data(), Lk, D);
  auto probs = std::make_shared<std::vector<Mat<T>>>(heads);
  std::vector<T> out(static_cast<std::size_t>(Lq) * D);
  MatMap<T> O(out.data(), Lq, D);
  for (int h = 0; h < heads; ++h) {
    Mat<T> S = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * scl;
    for (int r = 0; r < Lq; ++r) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int c = 0; c < Lk; ++c)
        if (key_mask.empty() || key_mask[c]) mx = std::max(mx, S(r, c));
      T z = T(0);
      for (int c = 0; c < Lk; ++c) {
        if (key_mask.empty() || key_mask[c]) {
          S(r, c) = std::exp(S(r, c) - mx);
          z += S(r, c);
        } else {
          S(r, c) = T(0);
        }
      }
      S.row(r) /= z;
    }
    O.middleCols(h * dh, dh).noalias() = S * V.middleCols(h * dh, dh);
    (*probs)[h] = std::move(S);
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return g.emit({Lq, D}, std::move(out), {q, k, v}, [=](Graph<T>& g, int self) {
    CMatMap<T> G(g.node(self).grad.data(), Lq, D);
    CMatMap<T> Q(g.node(iq).value.data(), Lq, D), K(g.node(ik).value.data(), Lk, D),
        V(g.node(iv).value.data(), Lk, D);
    for (int h = 0; h < heads; ++h) {
      const Mat<T>& A = (*probs)[h];
      const auto Gh = G.middleCols(h * dh, dh);
      if (g.needs_grad(iv))
        MatMap<T>(g.grad_buffer(iv).data(), Lk, D).middleCols(h * dh, dh).noalias() += A.transpose() * Gh;
      if (!g.needs_grad(iq) && !g.needs_grad(ik)) continue;
      Mat<T> dA = Gh * V.middleCols(h * dh, dh).transpose();
      // softmax Jacobian, row-wise
      Mat<T> dS = A.cwiseProduct(dA);
      for (int r = 0; r < Lq; ++r) {
        const T s = dS.row(r).sum();
        dS.row(r) -= s * A.row(r);
      }
      dS *= scl;
      if (g.needs_grad(iq))
        MatMap<T>(g.grad_buffer(iq).data(), Lq, D).middleCols(h * dh, dh).noalias() +=
            dS * K.middleCols(h * dh, dh);
      if (g.needs_grad(ik))
        MatMap<T>(g.grad_buffer(ik).data(), Lk, D).middleCols(h * dh, dh).noalias() +=
            dS.transpose() * Q.middleCols(h * dh, dh);
    }
  });
}

template <typename T>
Var<T> assemble_rows(Var<T> rows, Var<T> placeholder, const std::vector<int>& source) {
  require(rows.rank() == 2 && placeholder.rank() == 1 && placeholder.dim(0) == rows.dim(1),
          "assemble_rows", "rows " + shape_str(rows.shape()) + " placeholder " + shape_str(placeholder.shape()));
  const int J = rows.dim(0), D = rows.dim(1), L = static_cast<int>(source.size());
  for (int s : source) require(s < J, "assemble_rows", "source row " + std::to_string(s) + " out of range");
  auto& g = *rows.graph();
  std::vector<T> out(static_cast<std::size_t>(L) * D);
  auto rv = rows.value(), pv = placeholder.value();
  for (int i = 0; i < L; ++i) {
    const T* src = source[i] >= 0 ? rv.data() + static_cast<std::size_t>(source[i]) * D : pv.data();
    std::copy(src, src + D, out.data() + static_cast<std::size_t>(i) * D);
  }
  const int ir = rows.id(), ip = placeholder.id();
  return g.emit({L, D}, std::move(out), {rows, placeholder}, [=](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    for (int i = 0; i < L; ++i) {
      const int id = source[i] >= 0 ? ir : ip;
      if (!g.needs_grad(id)) continue;
      T* dst = g.grad_buffer(id).data() + (source[i] >= 0 ? static_cast<std::size_t>(source[i]) * D : 0);
      for (int d = 0; d < D; ++d) dst[d] += go[static_cast<std::size_t>(i) * D + d];
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> x, int begin, int count) {
  require(x.rank() == 2 && begin >= 0 && count >= 0 && begin + count <= x.dim(0), "slice_rows",
          shape_str(x.shape()) + " rows " + std::to_string(begin) + "+" + std::to_string(count));
  const std::size_t D = static_cast<std::size_t>(x.dim(1));
  auto& g = *x.graph();
  auto xv = x.value();
  std::vector<T> out(xv.begin() + begin * D, xv.begin() + (begin + count) * D);
  const int ix = x.id();
  return g.emit({count, x.dim(1)}, std::move(out), {x}, [=](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gx[begin * D + i] += go[i];
  });
}

template <typename T>
Var<T> expand_spatial(Var<T> x, int h, int w) {
  require(x.rank() == 2 && h > 0 && w > 0, "expand_spatial", shape_str(x.shape()));
  const int J = x.dim(0), D = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(h) * w;
  auto& g = *x.graph();
  std::vector<T> out(static_cast<std::size_t>(J) * D * P);
  auto xv = x.value();
  for (std::size_t r = 0; r < static_cast<std::size_t>(J) * D; ++r)
    std::fill(out.begin() + r * P, out.begin() + (r + 1) * P, xv[r]);
  const int ix = x.id();
  return g.emit({J, D, h, w}, std::move(out), {x}, [ix, P](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    auto& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < gx.size(); ++r) {
      T s = T(0);
      for (std::size_t p = 0; p < P; ++p) s += go[r * P + p];
      gx[r] += s;
    }
  });
}

template <typename T>
Var<T> masked_mean_rows(const std::vector<Var<T>>& sets, const std::vector<std::vector<std::uint8_t>>& valid) {
  if (sets.empty()) throw std::invalid_argument("masked_mean_rows: no input sets");
  require(valid.size() == sets.size(), "masked_mean_rows", "one mask per set required");
  const Shape shape = sets.front().shape();
  require(shape.size() == 2, "masked_mean_rows", "sets must be rank 2");
  const int L = shape[0], D = shape[1];
  for (std::size_t k = 0; k < sets.size(); ++k) {
    require(sets[k].shape() == shape, "masked_mean_rows", "set shapes differ");
    require(static_cast<int>(valid[k].size()) == L, "masked_mean_rows", "mask length differs from row count");
  }
  auto& g = *sets.front().graph();
  std::vector<T> out(static_cast<std::size_t>(L) * D);
  std::vector<int> count(L, 0);
  for (int r = 0; r < L; ++r) {
    T* o = out.data() + static_cast<std::size_t>(r) * D;
    for (std::size_t k = 0; k < sets.size(); ++k) {
      if (!valid[k][r]) continue;
      const T* x = sets[k].value().data() + static_cast<std::size_t>(r) * D;
      ++count[r];
      if (count[r] == 1) {
        std::copy(x, x + D, o);
      } else {
        // running mean: stays exact when all inputs agree
        const T c = static_cast<T>(count[r]);
        for (int d = 0; d < D; ++d) o[d] += (x[d] - o[d]) / c;
      }
    }
    if (count[r] == 0) {
      const T* x = sets[0].value().data() + static_cast<std::size_t>(r) * D;
      std::copy(x, x + D, o);
    }
  }
  std::vector<int> ids;
  for (const auto& s : sets) ids.push_back(s.id());
  return g.emit(shape, std::move(out), sets, [=](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!g.needs_grad(ids[k])) continue;
      auto& gk = g.grad_buffer(ids[k]);
      for (int r = 0; r < L; ++r) {
        T w = T(0);
        if (count[r] == 0) w = k == 0 ? T(1) : T(0);
        else if (valid[k][r]) w = T(1) / static_cast<T>(count[r]);
        if (w == T(0)) continue;
        for (int d = 0; d < D; ++d) gk[static_cast<std::size_t>(r) * D + d] += w * go[static_cast<std::size_t>(r) * D + d];
      }
    }
  });
}

template <typename T>
Var<T> neg_l2_distance(Var<T> a, Var<T> b, double eps) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "neg_l2_distance",
          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int J = a.dim(0), N = b.dim(0), C = a.dim(1);
  auto& g = *a.graph();
  auto av = a.value(), bv = b.value();
  std::vector<T> out(static_cast<std::size_t>(J) * N);
  for (int j = 0; j < J; ++j)
    for (int n = 0; n < N; ++n) {
      T s = T(0);
      for (int c = 0; c < C; ++c) {
        const T d = av[static_cast<std::size_t>(j) * C + c] - bv[static_cast<std::size_t>(n) * C + c];
        s += d * d;
      }
      out[static_cast<std::size_t>(j) * N + n] = -std::sqrt(s + static_cast<T>(eps));
    }
  const int ia = a.id(), ib = b.id();
  return g.emit({J, N}, std::move(out), {a, b}, [=](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    const auto& y = g.node(self).value;
    const auto& av = g.node(ia).value;
    const auto& bv = g.node(ib).value;
    const bool ga = g.needs_grad(ia), gb = g.needs_grad(ib);
    for (int j = 0; j < J; ++j)
      for (int n = 0; n < N; ++n) {
        const std::size_t jn = static_cast<std::size_t>(j) * N + n;
        // d(-r)/da = -(a - b) / r with r = -y
        const T coef = go[jn] / y[jn];
        for (int c = 0; c < C; ++c) {
          const T d = av[static_cast<std::size_t>(j) * C + c] - bv[static_cast<std::size_t>(n) * C + c];
          if (ga) g.grad_buffer(ia)[static_cast<std::size_t>(j) * C + c] += coef * d;
          if (gb) g.grad_buffer(ib)[static_cast<std::size_t>(n) * C + c] -= coef * d;
        }
      }
  });
}

template <typename T>
Var<T> l2_normalize_rows(Var<T> x, double eps) {
  require(x.rank() == 2, "l2_normalize_rows", shape_str(x.shape()));
  const int M = x.dim(0), D = x.dim(1);
  auto& g = *x.graph();
  auto xv = x.value();
  auto norms = std::make_shared<std::vector<T>>(M);
  std::vector<T> out(x.size());
  for (int r = 0; r < M; ++r) {
    T s = T(0);
    for (int d = 0; d < D; ++d) s += xv[static_cast<std::size_t>(r) * D + d] * xv[static_cast<std::size_t>(r) * D + d];
    (*norms)[r] = std::sqrt(s + static_cast<T>(eps));
    for (int d = 0; d < D; ++d)
      out[static_cast<std::size_t>(r) * D + d] = xv[static_cast<std::size_t>(r) * D + d] / (*norms)[r];
  }
  const int ix = x.id();
  return g.emit(x.shape(), std::move(out), {x}, [=](Graph<T>& g, int self) {
    const auto& go = g.node(self).grad;
    const auto& y = g.node(self).value;
    auto& gx = g.grad_buffer(ix);
    for (int r = 0; r < M; ++r) {
      const std::size_t o = static_cast<std::size_t>(r) * D;
      T dot = T(0);
      for (int d = 0; d < D; ++d) dot += go[o + d] * y[o + d];
      for (int d = 0; d < D; ++d) gx[o + d] += (go[o + d] - y[o + d] * dot) / (*norms)[r];
    }
  });
}

// ---- losses ------------------------------------------------------------------

template <typename T>
Var<T> masked_mse(Var<T> pred, const std::vector<T>& target, const std::vector<std::uint8_t>& supervised) {
  require(pred.rank() == 3 && target.size() == pred.size() &&
              static_cast<int>(supervised.size()) == pred.dim(0),
          "masked_mse", "pred " + shape_str(pred.shape()) + " target size " + std::to_string(target.size()));
  const int J = pred.dim(0);
  const std::size_t P = static_cast<std::size_t>(pred.dim(1)) * pred.dim(2);
  const int jsup = static_cast<int>(std::count_if(supervised.begin(), supervised.end(), [](auto s) { return s != 0; }));
  if (jsup == 0) throw std::invalid_argument("masked_mse: no supervised keypoints");
  const T norm = T(1) / (static_cast<T>(jsup) * static_cast<T>(P));
  auto& g = *pred.graph();
  auto pv = pred.value();
  T s = T(0);
  for (int j = 0; j < J; ++j) {
    if (!supervised[j]) continue;
    for (std::size_t p = 0; p < P; ++p) {
      const T d = pv[j * P + p] - target[j * P + p];
      s += d * d;
    }
  }
  const int ip = pred.id();
  return g.emit({1}, {s * norm}, {pred}, [=](Graph<T>& g, int self) {
    const T go = g.node(self).grad[0];
    const auto& pv = g.node(ip).value;
    auto& gp = g.grad_buffer(ip);
    for (int j = 0; j < J; ++j) {
      if (!supervised[j]) continue;
      for (std::size_t p = 0; p < P; ++p) gp[j * P + p] += go * T(2) * norm * (pv[j * P + p] - target[j * P + p]);
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& target, const std::vector<std::uint8_t>& mask) {
  require(logits.rank() == 2 && static_cast<int>(target.size()) == logits.dim(0) && mask.size() == target.size(),
          "softmax_cross_entropy", shape_str(logits.shape()));
  const int J = logits.dim(0), N = logits.dim(1);
  const int rows = static_cast<int>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  if (rows == 0) throw std::invalid_argument("softmax_cross_entropy: no rows selected");
  auto& g = *logits.graph();
  auto lv = logits.value();
  auto probs = std::make_shared<std::vector<T>>(logits.size(), T(0));
  T loss = T(0);
  for (int j = 0; j < J; ++j) {
    if (!mask[j]) continue;
    require(target[j] >= 0 && target[j] < N, "softmax_cross_entropy", "target index out of range");
    const T* row = lv.data() + static_cast<std::size_t>(j) * N;
    const T mx = *std::max_element(row, row + N);
    T z = T(0);
    for (int n = 0; n < N; ++n) z += std::exp(row[n] - mx);
    for (int n = 0; n < N; ++n) (*probs)[static_cast<std::size_t>(j) * N + n] = std::exp(row[n] - mx) / z;
    loss += -(row[target[j]] - mx - std::log(z));
  }
  const T inv = T(1) / static_cast<T>(rows);
  const int il = logits.id();
  return g.emit({1}, {loss * inv}, {logits}, [=](Graph<T>& g, int self) {
    const T go = g.node(self).grad[0] * inv;
    auto& gl = g.grad_buffer(il);
    for (int j = 0; j < J; ++j) {
      if (!mask[j]) continue;
      for (int n = 0; n < N; ++n)
        gl[static_cast<std::size_t>(j) * N + n] +=
            go * ((*probs)[static_cast<std::size_t>(j) * N + n] - (n == target[j] ? T(1) : T(0)));
    }
  });
}

// ---- instantiation -----------------------------------------------------------

#define POMNET_AG_INSTANTIATE(T)                                                                  \
  template class Graph<T>;                                                                        \
  template Var<T> add(Var<T>, Var<T>);                                                            \
  template Var<T> sub(Var<T>, Var<T>);                                                            \
  template Var<T> mul(Var<T>, Var<T>);                                                            \
  template Var<T> scale(Var<T>, T);                                                               \
  template Var<T> relu(Var<T>);                                                                   \
  template Var<T> reshape(Var<T>, Shape);                                                         \
  template Var<T> transpose(Var<T>);                                                              \
  template Var<T> sum(Var<T>);                                                                    \
  template Var<T> mean_of(const std::vector<Var<T>>&);                                            \
  template Var<T> add_last_dim(Var<T>, Var<T>);                                                   \
  template Var<T> add_channel_bias(Var<T>, Var<T>);                                               \
  template Var<T> add_broadcast_batch(Var<T>, Var<T>);                                            \
  template Var<T> matmul(Var<T>, Var<T>, bool, bool);                                             \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                 \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, double);                                     \
  template Var<T> group_norm(Var<T>, Var<T>, Var<T>, int, double);                                \
  template Var<T> conv2d(Var<T>, Var<T>, int, int);                                               \
  template Var<T> conv_transpose2d(Var<T>, Var<T>, int, int);                                     \
  template Var<T> max_pool2d(Var<T>, int, int, int);                                              \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, int, const std::vector<std::uint8_t>&);       \
  template Var<T> assemble_rows(Var<T>, Var<T>, const std::vector<int>&);                         \
  template Var<T> slice_rows(Var<T>, int, int);                                                   \
  template Var<T> expand_spatial(Var<T>, int, int);                                               \
  template Var<T> masked_mean_rows(const std::vector<Var<T>>&,                                    \
                                   const std::vector<std::vector<std::uint8_t>>&);                \
  template Var<T> neg_l2_distance(Var<T>, Var<T>, double);                                        \
  template Var<T> l2_normalize_rows(Var<T>, double);                                              \
  template Var<T> masked_mse(Var<T>, const std::vector<T>&, const std::vector<std::uint8_t>&);    \
  template Var<T> softmax_cross_entropy(Var<T>, const std::vector<int>&,                          \
                                        const std::vector<std::uint8_t>&);

POMNET_AG_INSTANTIATE(float)
POMNET_AG_INSTANTIATE(double)

}  // namespace pomnet::ag
