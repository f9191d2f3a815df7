#pragma once

// Reverse-mode differentiation over NdArray values.
//
// Every backward rule is itself written with differentiable ops, so a
// gradient computed with create_graph=true is an ordinary graph node and can
// be differentiated again. That is what lets the distillation loss reach the
// synthetic data through an unrolled sequence of student SGD steps.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "nsd/ndarray.hpp"

namespace nsd::ad {

class Var;
struct Node;

using BackwardFn = std::function<std::vector<Var>(Node& self, const Var& grad)>;

struct Node : std::enable_shared_from_this<Node> {
  NdArray value;
  std::vector<Var> parents;
  BackwardFn backward;
  const char* op = "leaf";
  bool requires_grad = false;
};

// Shared handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(NdArray value);
  static Var parameter(NdArray value);

  const NdArray& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  // Constant copy of the current value, cut from the graph.
  Var detach() const { return constant(value()); }

  // Overwrite a leaf's value in place (optimizer updates).
  void assign(NdArray value);

 private:
  std::shared_ptr<Node> node_;
};

// Graph recording switch; thread-local so independent runs may train
// concurrently.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise (shapes must match exactly).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var pow_scalar(const Var& a, double p);
Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
// Multiply by a fixed mask; the mask carries no gradient.
Var mask_mul(const Var& a, std::shared_ptr<const NdArray> mask);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

Var reshape(const Var& a, Shape shape);

// Reductions and their adjoint broadcasts.
Var sum(const Var& a);
Var mean(const Var& a);
Var expand_scalar(const Var& s, Shape shape);
// Sum over every axis except `axis`; result has shape (shape[axis]).
Var sum_except(const Var& a, std::size_t axis);
// Repeat a (shape[axis]) vector along all other axes of `shape`.
Var broadcast_along(const Var& v, Shape shape, std::size_t axis);

// result[.., j, ..] = sum_i t[.., i, ..] * k[i, j]   (k^T when transposed)
Var mode_product(const Var& t, const Var& k, std::size_t mode,
                 bool transpose_kernel = false);
// result[i, j] = sum over all other axes of a[.., i, ..] * b[.., j, ..]
Var mode_gram(const Var& a, const Var& b, std::size_t mode);
// 2-D (m,k) x (k,n).
Var matmul(const Var& a, const Var& b);

// 3x3, stride 1, zero padding 1. x: (B,Ci,H,W), w: (Co,Ci,3,3).
Var conv2d(const Var& x, const Var& w);
// Adjoint of conv2d w.r.t. its input: g (B,Co,H,W) -> (B,Ci,H,W).
Var conv2d_input_grad(const Var& g, const Var& w);
// Adjoint of conv2d w.r.t. its weight: -> (Co,Ci,3,3).
Var conv2d_weight_grad(const Var& x, const Var& g);

// 2x2 average pooling, stride 2, on (B,C,H,W) with even H, W.
Var avg_pool2(const Var& x);
// Transpose of avg_pool2: spreads each value over its 2x2 block / 4.
Var avg_unpool2(const Var& g);

// Row-wise log-softmax of a 2-D (B,K) array.
Var log_softmax(const Var& logits);

// Row (axis 0) selection and its adjoint.
Var gather_rows(const Var& x, std::vector<std::size_t> rows);
Var scatter_rows(const Var& g, std::vector<std::size_t> rows,
                 std::size_t total_rows);
Var concat_rows(std::span<const Var> parts);

Var squared_distance(const Var& a, const Var& b);
// Mean softmax cross-entropy; labels index the second axis of logits.
Var cross_entropy(const Var& logits, std::span<const int> labels);

// Gradients of scalar `out` w.r.t. each entry of `wrt`. Leaves the output
// never reaches get zeros. With create_graph the returned Vars are live
// graph nodes.
std::vector<Var> grad(const Var& out, std::span<const Var> wrt,
                      bool create_graph = false);

// Plain numeric gradients, aligned with `leaves`.
std::vector<NdArray> backward(const Var& loss, std::span<const Var> leaves);

}  // namespace nsd::ad
