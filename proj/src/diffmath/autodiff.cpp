#include "nsd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "nsd/error.hpp"
#include "kernels.hpp"

namespace nsd::ad {

namespace {

thread_local bool g_grad_enabled = true;
// Parents whose gradient the running backward pass actually consumes.
thread_local const std::vector<char>* g_needed = nullptr;

Var make_op(const char* op, NdArray value, std::vector<Var> parents,
            BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  const bool needs = g_grad_enabled &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Var self_var(Node& self) { return Var(self.shared_from_this()); }

bool wants(const Node& self, std::size_t i) {
  return self.parents[i].requires_grad() && (!g_needed || (*g_needed)[i]);
}

template <typename F>
NdArray map_unary(const NdArray& a, F f) {
  NdArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename F>
NdArray map_binary(const NdArray& a, const NdArray& b, F f) {
  NdArray out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Var Var::constant(NdArray value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(NdArray value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void Var::assign(NdArray value) {
  if (!is_leaf()) throw ContractViolation("assign() on a non-leaf node");
  if (value.shape() != shape()) {
    throw DimensionError("assign: shape mismatch " + shape_str(shape()) +
                         " vs " + shape_str(value.shape()));
  }
  node_->value = std::move(value);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  return make_op("add", map_binary(a.value(), b.value(), std::plus<>()), {a, b},
                 [](Node&, const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  return make_op("sub", map_binary(a.value(), b.value(), std::minus<>()),
                 {a, b}, [](Node& self, const Var& g) {
                   return std::vector<Var>{
                       g, wants(self, 1) ? scale(g, -1.0) : Var()};
                 });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  return make_op("mul", map_binary(a.value(), b.value(), std::multiplies<>()),
                 {a, b}, [](Node& self, const Var& g) {
                   const Var& x = self.parents[0];
                   const Var& y = self.parents[1];
                   return std::vector<Var>{wants(self, 0) ? mul(g, y) : Var(),
                                           wants(self, 1) ? mul(g, x) : Var()};
                 });
}

Var scale(const Var& a, double s) {
  return make_op("scale", map_unary(a.value(), [s](double v) { return v * s; }),
                 {a}, [s](Node&, const Var& g) {
                   return std::vector<Var>{scale(g, s)};
                 });
}

Var add_scalar(const Var& a, double s) {
  return make_op("add_scalar",
                 map_unary(a.value(), [s](double v) { return v + s; }), {a},
                 [](Node&, const Var& g) { return std::vector<Var>{g}; });
}

Var pow_scalar(const Var& a, double p) {
  NdArray out = map_unary(a.value(), [p](double v) {
    if (p == 2.0) return v * v;
    if (p == 1.0) return v;
    return std::pow(v, p);
  });
  return make_op("pow", std::move(out), {a}, [p](Node& self, const Var& g) {
    const Var& x = self.parents[0];
    if (p == 1.0) return std::vector<Var>{g};
    return std::vector<Var>{mul(g, scale(pow_scalar(x, p - 1.0), p))};
  });
}

Var exp(const Var& a) {
  return make_op("exp", map_unary(a.value(), [](double v) { return std::exp(v); }),
                 {a}, [](Node& self, const Var& g) {
                   return std::vector<Var>{mul(g, self_var(self))};
                 });
}

Var log(const Var& a) {
  for (double v : a.value().vec()) {
    if (!(v > 0.0)) throw RangeError("log of non-positive value");
  }
  return make_op("log", map_unary(a.value(), [](double v) { return std::log(v); }),
                 {a}, [](Node& self, const Var& g) {
                   return std::vector<Var>{
                       mul(g, pow_scalar(self.parents[0], -1.0))};
                 });
}

Var mask_mul(const Var& a, std::shared_ptr<const NdArray> mask) {
  if (mask->shape() != a.shape()) {
    throw DimensionError("mask_mul: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(mask->shape()));
  }
  NdArray out = map_binary(a.value(), *mask, std::multiplies<>());
  return make_op("mask_mul", std::move(out), {a},
                 [mask](Node&, const Var& g) {
                   return std::vector<Var>{mask_mul(g, mask)};
                 });
}

Var relu(const Var& a) {
  auto mask = std::make_shared<NdArray>(
      map_unary(a.value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
  return mask_mul(a, std::move(mask));
}

Var reshape(const Var& a, Shape shape) {
  NdArray out = a.value().reshaped(std::move(shape));
  Shape original = a.shape();
  return make_op("reshape", std::move(out), {a},
                 [original](Node&, const Var& g) {
                   return std::vector<Var>{reshape(g, original)};
                 });
}

// ----------------------------------------------------------------- reductions

Var sum(const Var& a) {
  Shape original = a.shape();
  return make_op("sum", NdArray::scalar(nsd::sum(a.value())), {a},
                 [original](Node&, const Var& g) {
                   return std::vector<Var>{expand_scalar(g, original)};
                 });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var expand_scalar(const Var& s, Shape shape) {
  if (s.size() != 1) throw ContractViolation("expand_scalar expects a scalar");
  NdArray out(shape, s.value()[0]);
  return make_op("expand_scalar", std::move(out), {s},
                 [](Node&, const Var& g) { return std::vector<Var>{sum(g)}; });
}

Var sum_except(const Var& a, std::size_t axis) {
  const Shape& sh = a.shape();
  if (axis >= sh.size()) throw DimensionError("sum_except: axis out of range");
  auto [outer, n, inner] = kernels::split_at(sh, axis);
  NdArray out(Shape{n});
  const auto& x = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = &x[(o * n + i) * inner];
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k) s += p[k];
      out[i] += s;
    }
  Shape original = sh;
  return make_op("sum_except", std::move(out), {a},
                 [original, axis](Node&, const Var& g) {
                   return std::vector<Var>{broadcast_along(g, original, axis)};
                 });
}

Var broadcast_along(const Var& v, Shape shape, std::size_t axis) {
  if (axis >= shape.size() || v.shape() != Shape{shape[axis]}) {
    throw DimensionError("broadcast_along: vector " + shape_str(v.shape()) +
                         " does not fit axis " + std::to_string(axis) + " of " +
                         shape_str(shape));
  }
  auto [outer, n, inner] = kernels::split_at(shape, axis);
  NdArray out(shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i) {
      double* p = &out[(o * n + i) * inner];
      std::fill(p, p + inner, v.value()[i]);
    }
  return make_op("broadcast_along", std::move(out), {v},
                 [axis](Node&, const Var& g) {
                   return std::vector<Var>{sum_except(g, axis)};
                 });
}

// ------------------------------------------------------------- contractions

Var mode_product(const Var& t, const Var& k, std::size_t mode,
                 bool transpose_kernel) {
  const Shape& ts = t.shape();
  if (k.value().rank() != 2) {
    throw DimensionError("mode_product: kernel must be 2-D, got " +
                         shape_str(k.shape()));
  }
  if (mode >= ts.size()) {
    throw DimensionError("mode_product: mode " + std::to_string(mode) +
                         " out of range for tensor " + shape_str(ts));
  }
  const std::size_t rows = transpose_kernel ? k.shape()[1] : k.shape()[0];
  if (ts[mode] != rows) {
    throw DimensionError("mode_product: mode " + std::to_string(mode) +
                         " extent " + std::to_string(ts[mode]) +
                         " does not match kernel input extent " +
                         std::to_string(rows));
  }
  NdArray out = kernels::mode_product(t.value(), k.value(), mode, transpose_kernel);
  return make_op("mode_product", std::move(out), {t, k},
                 [mode, transpose_kernel](Node& self, const Var& g) {
                   const Var& tv = self.parents[0];
                   const Var& kv = self.parents[1];
                   Var dt, dk;
                   if (wants(self, 0)) dt = mode_product(g, kv, mode, !transpose_kernel);
                   if (wants(self, 1)) {
                     dk = transpose_kernel ? mode_gram(g, tv, mode)
                                           : mode_gram(tv, g, mode);
                   }
                   return std::vector<Var>{dt, dk};
                 });
}

Var mode_gram(const Var& a, const Var& b, std::size_t mode) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool ok = as.size() == bs.size() && mode < as.size();
  for (std::size_t d = 0; ok && d < as.size(); ++d) {
    if (d != mode && as[d] != bs[d]) ok = false;
  }
  if (!ok) {
    throw DimensionError("mode_gram: incompatible shapes " + shape_str(as) +
                         " and " + shape_str(bs) + " at mode " +
                         std::to_string(mode));
  }
  NdArray out = kernels::mode_gram(a.value(), b.value(), mode);
  return make_op("mode_gram", std::move(out), {a, b},
                 [mode](Node& self, const Var& g) {
                   const Var& av = self.parents[0];
                   const Var& bv = self.parents[1];
                   Var da, db;
                   if (wants(self, 0)) da = mode_product(bv, g, mode, true);
                   if (wants(self, 1)) db = mode_product(av, g, mode, false);
                   return std::vector<Var>{da, db};
                 });
}

Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2) {
    throw DimensionError("matmul: left operand must be 2-D, got " +
                         shape_str(a.shape()));
  }
  return mode_product(a, b, 1);
}

// -------------------------------------------------------------- convolution

Var conv2d(const Var& x, const Var& w) {
  kernels::check_conv("conv2d", x.shape(), w.shape(), /*input_is_grad=*/false);
  NdArray out = kernels::conv2d(x.value(), w.value());
  return make_op("conv2d", std::move(out), {x, w}, [](Node& self, const Var& g) {
    const Var& xv = self.parents[0];
    const Var& wv = self.parents[1];
    return std::vector<Var>{
        wants(self, 0) ? conv2d_input_grad(g, wv) : Var(),
        wants(self, 1) ? conv2d_weight_grad(xv, g) : Var()};
  });
}

Var conv2d_input_grad(const Var& g0, const Var& w) {
  kernels::check_conv("conv2d_input_grad", g0.shape(), w.shape(), true);
  NdArray out = kernels::conv2d_input_grad(g0.value(), w.value());
  return make_op("conv2d_input_grad", std::move(out), {g0, w},
                 [](Node& self, const Var& z) {
                   const Var& gv = self.parents[0];
                   const Var& wv = self.parents[1];
                   return std::vector<Var>{
                       wants(self, 0) ? conv2d(z, wv) : Var(),
                       wants(self, 1) ? conv2d_weight_grad(z, gv) : Var()};
                 });
}

Var conv2d_weight_grad(const Var& x, const Var& g0) {
  const Shape& xs = x.shape();
  const Shape& gs = g0.shape();
  if (xs.size() != 4 || gs.size() != 4 || xs[0] != gs[0] || xs[2] != gs[2] ||
      xs[3] != gs[3]) {
    throw DimensionError("conv2d_weight_grad: incompatible shapes " +
                         shape_str(xs) + " and " + shape_str(gs));
  }
  NdArray out = kernels::conv2d_weight_grad(x.value(), g0.value());
  return make_op("conv2d_weight_grad", std::move(out), {x, g0},
                 [](Node& self, const Var& z) {
                   const Var& xv = self.parents[0];
                   const Var& gv = self.parents[1];
                   return std::vector<Var>{
                       wants(self, 0) ? conv2d_input_grad(gv, z) : Var(),
                       wants(self, 1) ? conv2d(xv, z) : Var()};
                 });
}

// ------------------------------------------------------------------ pooling

Var avg_pool2(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) {
    throw DimensionError("avg_pool2: need (B,C,H,W) with even H, W, got " +
                         shape_str(s));
  }
  return make_op("avg_pool2", kernels::avg_pool2(x.value()), {x},
                 [](Node&, const Var& g) {
                   return std::vector<Var>{avg_unpool2(g)};
                 });
}

Var avg_unpool2(const Var& g) {
  if (g.value().rank() != 4) {
    throw DimensionError("avg_unpool2: need a 4-D array, got " +
                         shape_str(g.shape()));
  }
  return make_op("avg_unpool2", kernels::avg_unpool2(g.value()), {g},
                 [](Node&, const Var& z) {
                   return std::vector<Var>{avg_pool2(z)};
                 });
}

// ----------------------------------------------------------------- softmax

Var log_softmax(const Var& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 2) {
    throw DimensionError("log_softmax expects (B,K), got " + shape_str(s));
  }
  const std::size_t rows = s[0], cols = s[1];
  NdArray out(s);
  const auto& z = logits.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = &z[r * cols];
    const double m = *std::max_element(zr, zr + cols);
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::exp(zr[c] - m);
    const double lse = m + std::log(acc);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = zr[c] - lse;
  }
  return make_op("log_softmax", std::move(out), {logits},
                 [](Node& self, const Var& g) {
                   const Shape shape = self.value.shape();
                   Var probs = exp(self_var(self));
                   Var row_totals = broadcast_along(sum_except(g, 0), shape, 0);
                   return std::vector<Var>{sub(g, mul(probs, row_totals))};
                 });
}

// --------------------------------------------------------------- row access

Var gather_rows(const Var& x, std::vector<std::size_t> rows) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("gather_rows on a scalar");
  const std::size_t n = s[0];
  const std::size_t width = x.size() / n;
  Shape out_shape = s;
  out_shape[0] = rows.size();
  if (rows.empty()) throw RangeError("gather_rows: empty row selection");
  NdArray out(out_shape);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= n) throw RangeError("gather_rows: row index out of range");
    std::copy_n(&x.value()[rows[k] * width], width, &out[k * width]);
  }
  return make_op("gather_rows", std::move(out), {x},
                 [rows = std::move(rows), n](Node&, const Var& g) {
                   return std::vector<Var>{scatter_rows(g, rows, n)};
                 });
}

Var scatter_rows(const Var& g, std::vector<std::size_t> rows,
                 std::size_t total_rows) {
  const Shape& s = g.shape();
  if (s.empty() || s[0] != rows.size()) {
    throw DimensionError("scatter_rows: row count mismatch");
  }
  const std::size_t width = g.size() / rows.size();
  Shape out_shape = s;
  out_shape[0] = total_rows;
  NdArray out(out_shape);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= total_rows) throw RangeError("scatter_rows: index out of range");
    double* dst = &out[rows[k] * width];
    const double* src = &g.value()[k * width];
    for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
  }
  return make_op("scatter_rows", std::move(out), {g},
                 [rows = std::move(rows)](Node&, const Var& z) {
                   return std::vector<Var>{gather_rows(z, rows)};
                 });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw RangeError("concat_rows: nothing to concatenate");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (p.shape().empty() || pt != tail) {
      throw DimensionError("concat_rows: incompatible part " +
                           shape_str(p.shape()));
    }
    offsets.push_back(total);
    total += p.shape()[0];
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = total;
  NdArray out(out_shape);
  std::size_t pos = 0;
  for (const Var& p : parts) {
    std::copy(p.value().vec().begin(), p.value().vec().end(), &out[pos]);
    pos += p.size();
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return make_op("concat_rows", std::move(out), std::move(parents),
                 [offsets](Node& self, const Var& g) {
                   std::vector<Var> grads(self.parents.size());
                   for (std::size_t i = 0; i < self.parents.size(); ++i) {
                     if (!wants(self, i)) continue;
                     std::vector<std::size_t> rows(self.parents[i].shape()[0]);
                     std::iota(rows.begin(), rows.end(), offsets[i]);
                     grads[i] = gather_rows(g, std::move(rows));
                   }
                   return grads;
                 });
}

// ---------------------------------------------------------------- composites

Var squared_distance(const Var& a, const Var& b) {
  Var d = sub(a, b);
  return sum(mul(d, d));
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(s) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  auto onehot = std::make_shared<NdArray>(s);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= s[1]) {
      throw DataError("cross_entropy: label " + std::to_string(labels[r]) +
                      " outside [0, " + std::to_string(s[1]) + ")");
    }
    (*onehot)[r * s[1] + static_cast<std::size_t>(labels[r])] = 1.0;
  }
  Var picked = sum(mask_mul(log_softmax(logits), std::move(onehot)));
  return scale(picked, -1.0 / static_cast<double>(s[0]));
}

// ----------------------------------------------------------------- backward

std::vector<Var> grad(const Var& out, std::span<const Var> wrt,
                      bool create_graph) {
  if (!out) throw ContractViolation("grad: undefined output");
  if (out.size() != 1) {
    throw ContractViolation("grad: loss must be scalar, got shape " +
                            shape_str(out.shape()));
  }
  NoGradGuard no_grad;
  if (create_graph) g_grad_enabled = true;

  // Post-order over nodes that carry gradient.
  std::vector<Node*> order;
  if (out.requires_grad()) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{out.node(), 0}};
    seen.insert(out.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].node();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<Node*> targets;
  for (const Var& w : wrt) targets.insert(w.node());

  // Only nodes with a path to some target take part in the sweep.
  std::unordered_set<Node*> relevant;
  for (Node* node : order) {
    bool rel = targets.count(node) > 0;
    for (const Var& p : node->parents) {
      if (rel) break;
      rel = relevant.count(p.node()) > 0;
    }
    if (rel) relevant.insert(node);
  }

  std::unordered_map<Node*, Var> grads;
  grads.emplace(out.node(), Var::constant(NdArray(out.shape(), 1.0)));
  std::vector<char> needed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!relevant.count(node) || !node->backward) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    Var g = found->second;
    if (!targets.count(node)) grads.erase(found);
    needed.assign(node->parents.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      needed[i] = relevant.count(node->parents[i].node()) ? 1 : 0;
      any = any || needed[i];
    }
    if (!any) continue;
    g_needed = &needed;
    std::vector<Var> parent_grads;
    try {
      parent_grads = node->backward(*node, g);
    } catch (...) {
      g_needed = nullptr;
      throw;
    }
    g_needed = nullptr;
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Var& pg = parent_grads[i];
      if (!pg || !needed[i]) continue;
      Node* p = node->parents[i].node();
      auto [slot, inserted] = grads.try_emplace(p, pg);
      if (!inserted) slot->second = add(slot->second, pg);
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto found = grads.find(w.node());
    result.push_back(found != grads.end() ? found->second
                                          : Var::constant(NdArray(w.shape())));
  }
  return result;
}

std::vector<NdArray> backward(const Var& loss, std::span<const Var> leaves) {
  std::vector<Var> g = grad(loss, leaves, false);
  std::vector<NdArray> out;
  out.reserve(g.size());
  for (const Var& v : g) out.push_back(v.value());
  return out;
}

}  // namespace nsd::ad
