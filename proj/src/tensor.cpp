#include "skelmamba/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace skelmamba {

namespace {

thread_local uint64_t t_next_id = 1;
thread_local bool t_grad_enabled = true;

uint64_t next_id() { return t_next_id++; }

void finite_check_raw(const double* p, int64_t n, const char* what) {
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) {
      throw NumericError(std::string("non-finite value in ") + what);
    }
  }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

namespace detail {

double* Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad.data();
}

double* parent_grad(Node& n, size_t i) {
  Node& p = *n.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.grad_buffer();
}

}  // namespace detail

using detail::Node;

// ---------------------------------------------------------------- Tensor core

static std::shared_ptr<Node> new_leaf(Shape shape, std::vector<double> data,
                                      bool requires_grad) {
  const int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size())) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad && t_grad_enabled;
  node->leaf = true;
  apply_precision(node->value.data(), n);
  return node;
}

Tensor wrap_node(std::shared_ptr<Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return wrap_node(new_leaf(std::move(shape), std::vector<double>(n, 0.0),
                            requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return wrap_node(
      new_leaf(std::move(shape), std::vector<double>(n, v), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  return wrap_node(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v) { return from_data({}, {v}); }

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                            bool requires_grad) {
  int64_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (int64_t i = 0; i < n; ++i) d[i] = rng.uniform(lo, hi);
  return wrap_node(new_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::rand_normal(Shape shape, Rng& rng, double mean, double stddev,
                           bool requires_grad) {
  int64_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (int64_t i = 0; i < n; ++i) d[i] = mean + stddev * rng.normal();
  return wrap_node(new_leaf(std::move(shape), std::move(d), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dim index out of range");
  return node_->shape[i];
}

int64_t Tensor::numel() const { return node_ ? node_->numel() : 0; }

double* Tensor::data() { return node_->value.data(); }
const double* Tensor::data() const { return node_->value.data(); }
const std::vector<double>& Tensor::values() const { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a scalar, got shape " +
                     shape_str(node_->shape));
  }
  return node_->value[0];
}

static int64_t flat_index(const Shape& shape,
                          std::initializer_list<int64_t> idx) {
  if (idx.size() != shape.size()) throw ShapeError("index rank mismatch");
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= shape[k]) throw ShapeError("index out of range");
    flat = flat * shape[k] + i;
    ++k;
  }
  return flat;
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  return node_->value[flat_index(node_->shape, idx)];
}

void Tensor::set(std::initializer_list<int64_t> idx, double v) {
  node_->value[flat_index(node_->shape, idx)] = v;
  apply_precision(&node_->value[flat_index(node_->shape, idx)], 1);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor Tensor::grad() const {
  if (!node_ || node_->grad.size() != node_->value.size()) return Tensor();
  return Tensor::from_data(node_->shape, node_->grad);
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  return Tensor::from_data(node_->shape, node_->value, false);
}

uint64_t Tensor::node_id() const { return node_ ? node_->id : 0; }
const char* Tensor::op_name() const { return node_ ? node_->op : ""; }
bool Tensor::is_leaf() const { return node_ && node_->leaf; }

std::vector<uint64_t> Tensor::parent_ids() const {
  std::vector<uint64_t> ids;
  if (node_) {
    for (auto& p : node_->parents) ids.push_back(p->id);
  }
  return ids;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev; }

Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(Node&)> backward_fn) {
  const int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(value.size())) {
    throw ShapeError(std::string(name) + ": output buffer length mismatch");
  }
  apply_precision(value.data(), n);
  if (strict_finite_checks()) finite_check_raw(value.data(), n, name);

  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = name;
  node->leaf = false;

  bool needs = false;
  if (t_grad_enabled) {
    for (auto& p : parents) {
      if (p.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return wrap_node(node);
}

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ConfigError("backward() requires a scalar root");
  }
  Node* rn = root.node().get();
  if (!rn->requires_grad) return;

  // Collect the reachable subgraph and order it by descending tape id,
  // which is a reverse topological order by construction.
  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{rn};
  seen.insert(rn);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](Node* a, Node* b) { return a->id > b->id; });

  // Reset intermediate grads so repeated backward over the same graph is
  // reproducible. Leaf grads accumulate across calls.
  for (Node* n : nodes) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
    else n->grad_buffer();
  }
  rn->grad_buffer()[0] += 1.0;

  for (Node* n : nodes) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ----------------------------------------------------------------- broadcast

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes not broadcastable: " + shape_str(a) + " vs " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// Row-major strides with 0 on broadcast axes, aligned to `out_rank`.
std::vector<int64_t> bcast_strides(const Shape& shape, size_t out_rank) {
  std::vector<int64_t> strides(out_rank, 0);
  int64_t s = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    size_t src = shape.size() - 1 - i;
    size_t dst = out_rank - 1 - i;
    strides[dst] = (shape[src] == 1) ? 0 : s;
    s *= shape[src];
  }
  return strides;
}

// Iterates an output shape, producing linear offsets into two broadcast
// operands. fn(out_linear, a_off, b_off).
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& fn) {
  const size_t r = out.size();
  const int64_t n = shape_numel(out);
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    fn(lin, oa, ob);
    // increment mixed-radix counter
    for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
      idx[d]++;
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Reduce-sums `src` (shaped `from`) into `dst` (shaped `to`), where `to`
// broadcasts to `from`. Used to push grads back through broadcasting.
void reduce_into(const double* src, const Shape& from, double* dst,
                 const Shape& to) {
  auto st = bcast_strides(to, from.size());
  std::vector<int64_t> zero(from.size(), 0);
  for_each_broadcast(from, st, zero,
                     [&](int64_t lin, int64_t toff, int64_t) {
                       dst[toff] += src[lin];
                     });
}

using UnaryFn = double (*)(double);

}  // namespace

// ---------------------------------------------------------- elementwise binary

namespace {

enum class BinKind { add, sub, mul };

Tensor binary_op(const char* name, BinKind kind, const Tensor& a,
                 const Tensor& b) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const int64_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();

  if (a.shape() == b.shape()) {
    switch (kind) {
      case BinKind::add:
        for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
        break;
      case BinKind::sub:
        for (int64_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
        break;
      case BinKind::mul:
        for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
        break;
    }
  } else {
    auto sa = bcast_strides(a.shape(), out_shape.size());
    auto sb = bcast_strides(b.shape(), out_shape.size());
    for_each_broadcast(out_shape, sa, sb,
                       [&](int64_t lin, int64_t oa, int64_t ob) {
                         double x = pa[oa], y = pb[ob];
                         out[lin] = kind == BinKind::add   ? x + y
                                    : kind == BinKind::sub ? x - y
                                                           : x * y;
                       });
  }

  Shape ash = a.shape(), bsh = b.shape();
  return make_op(name, out_shape, std::move(out), {a, b},
                 [kind, ash, bsh, out_shape](Node& node) {
                   const double* g = node.grad.data();
                   const double* pa2 = node.parents[0]->value.data();
                   const double* pb2 = node.parents[1]->value.data();
                   const int64_t n2 = node.numel();
                   std::vector<double> tmp(n2);
                   if (double* ga = detail::parent_grad(node, 0)) {
                     switch (kind) {
                       case BinKind::add:
                       case BinKind::sub:
                         std::memcpy(tmp.data(), g, n2 * sizeof(double));
                         break;
                       case BinKind::mul: {
                         auto sb2 = bcast_strides(bsh, out_shape.size());
                         std::vector<int64_t> z(out_shape.size(), 0);
                         for_each_broadcast(out_shape, z, sb2,
                                            [&](int64_t lin, int64_t,
                                                int64_t ob) {
                                              tmp[lin] = g[lin] * pb2[ob];
                                            });
                         break;
                       }
                     }
                     if (ash == out_shape) {
                       for (int64_t i = 0; i < n2; ++i) ga[i] += tmp[i];
                     } else {
                       reduce_into(tmp.data(), out_shape, ga, ash);
                     }
                   }
                   if (double* gb = detail::parent_grad(node, 1)) {
                     switch (kind) {
                       case BinKind::add:
                         std::memcpy(tmp.data(), g, n2 * sizeof(double));
                         break;
                       case BinKind::sub:
                         for (int64_t i = 0; i < n2; ++i) tmp[i] = -g[i];
                         break;
                       case BinKind::mul: {
                         auto sa2 = bcast_strides(ash, out_shape.size());
                         std::vector<int64_t> z(out_shape.size(), 0);
                         for_each_broadcast(out_shape, sa2, z,
                                            [&](int64_t lin, int64_t oa,
                                                int64_t) {
                                              tmp[lin] = g[lin] * pa2[oa];
                                            });
                         break;
                       }
                     }
                     if (bsh == out_shape) {
                       for (int64_t i = 0; i < n2; ++i) gb[i] += tmp[i];
                     } else {
                       reduce_into(tmp.data(), out_shape, gb, bsh);
                     }
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", BinKind::add, a, b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", BinKind::sub, a, b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", BinKind::mul, a, b);
}

// ------------------------------------------------------------ elementwise unary

namespace {

Tensor unary_op(const char* name, const Tensor& a, UnaryFn f,
                // dfdx(x, fx) -> local derivative
                double (*dfdx)(double, double)) {
  const int64_t n = a.numel();
  std::vector<double> out(n);
  const double* p = a.data();
  for (int64_t i = 0; i < n; ++i) out[i] = f(p[i]);
  return make_op(name, a.shape(), std::move(out), {a},
                 [dfdx](Node& node) {
                   double* ga = detail::parent_grad(node, 0);
                   if (!ga) return;
                   const double* x = node.parents[0]->value.data();
                   const double* fx = node.value.data();
                   const double* g = node.grad.data();
                   const int64_t n2 = node.numel();
                   for (int64_t i = 0; i < n2; ++i) {
                     ga[i] += g[i] * dfdx(x[i], fx[i]);
                   }
                 });
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor neg(const Tensor& a) {
  return unary_op("neg", a, [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}

Tensor silu(const Tensor& a) {
  return unary_op("silu", a, [](double x) { return x * sigmoid_d(x); },
                  [](double x, double) {
                    double s = sigmoid_d(x);
                    return s * (1.0 + x * (1.0 - s));
                  });
}

Tensor relu(const Tensor& a) {
  return unary_op("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double fx) { return fx; });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op("sqrt", a, [](double x) { return std::sqrt(x); },
                  [](double, double fx) { return 0.5 / fx; });
}

Tensor reciprocal(const Tensor& a) {
  const double* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (p[i] == 0.0) throw NumericError("reciprocal: division by zero");
  }
  return unary_op("reciprocal", a, [](double x) { return 1.0 / x; },
                  [](double x, double) { return -1.0 / (x * x); });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op("sigmoid", a, [](double x) { return sigmoid_d(x); },
                  [](double, double fx) { return fx * (1.0 - fx); });
}

Tensor softplus(const Tensor& a) {
  return unary_op("softplus", a,
                  [](double x) {
                    if (x > 30.0) return x;
                    return std::log1p(std::exp(x));
                  },
                  [](double x, double) { return sigmoid_d(x); });
}

Tensor add_scalar(const Tensor& a, double s) {
  const int64_t n = a.numel();
  std::vector<double> out(n);
  const double* p = a.data();
  for (int64_t i = 0; i < n; ++i) out[i] = p[i] + s;
  return make_op("add_scalar", a.shape(), std::move(out), {a},
                 [](Node& node) {
                   if (double* ga = detail::parent_grad(node, 0)) {
                     const double* g = node.grad.data();
                     for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i];
                   }
                 });
}

Tensor mul_scalar(const Tensor& a, double s) {
  const int64_t n = a.numel();
  std::vector<double> out(n);
  const double* p = a.data();
  for (int64_t i = 0; i < n; ++i) out[i] = p[i] * s;
  return make_op("mul_scalar", a.shape(), std::move(out), {a},
                 [s](Node& node) {
                   if (double* ga = detail::parent_grad(node, 0)) {
                     const double* g = node.grad.data();
                     for (int64_t i = 0; i < node.numel(); ++i) {
                       ga[i] += g[i] * s;
                     }
                   }
                 });
}

// -------------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  const double* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += p[i];
  return make_op("sum", {}, {acc}, {a}, [](Node& node) {
    if (double* ga = detail::parent_grad(node, 0)) {
      const double g = node.grad[0];
      for (int64_t i = 0; i < node.parents[0]->numel(); ++i) ga[i] += g;
    }
  });
}

Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

namespace {

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

// Decomposes a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  int64_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_or_keep_axis(const Shape& s, int axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  axis = normalize_axis(axis, a.rank());
  auto sp = split_axis(a.shape(), axis);
  Shape out_shape = drop_or_keep_axis(a.shape(), axis, keepdim);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const double* p = a.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t e = 0; e < sp.extent; ++e) {
      const double* row = p + (o * sp.extent + e) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] += row[i];
    }
  }
  return make_op("sum_axis", out_shape, std::move(out), {a},
                 [sp](Node& node) {
                   if (double* ga = detail::parent_grad(node, 0)) {
                     const double* g = node.grad.data();
                     for (int64_t o = 0; o < sp.outer; ++o) {
                       for (int64_t e = 0; e < sp.extent; ++e) {
                         double* row = ga + (o * sp.extent + e) * sp.inner;
                         const double* src = g + o * sp.inner;
                         for (int64_t i = 0; i < sp.inner; ++i) {
                           row[i] += src[i];
                         }
                       }
                     }
                   }
                 });
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  int ax = normalize_axis(axis, a.rank());
  return mul_scalar(sum(a, axis, keepdim),
                    1.0 / static_cast<double>(a.shape()[ax]));
}

Tensor max_values(const Tensor& a, int axis, bool keepdim) {
  axis = normalize_axis(axis, a.rank());
  auto sp = split_axis(a.shape(), axis);
  Shape out_shape = drop_or_keep_axis(a.shape(), axis, keepdim);
  std::vector<double> out(sp.outer * sp.inner,
                          -std::numeric_limits<double>::infinity());
  const double* p = a.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t e = 0; e < sp.extent; ++e) {
      const double* row = p + (o * sp.extent + e) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] = std::max(dst[i], row[i]);
    }
  }
  return Tensor::from_data(out_shape, std::move(out));
}

// ----------------------------------------------------------------------- matmul

namespace {

// c[m,n] += a[m,k] * b[k,n]
void gemm_acc(const double* a, const double* b, double* c, int64_t m,
              int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t kk = 0; kk < k; ++kk) {
      const double aik = a[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = b + kk * n;
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_bt_acc(const double* a, const double* b, double* c, int64_t m,
                 int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      const double* arow = a + i * k;
      const double* brow = b + j * k;
      double acc = 0.0;
      for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      c[i * n + j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_at_acc(const double* a, const double* b, double* c, int64_t m,
                 int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      double* crow = c + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct MatmulDims {
  Shape batch;       // broadcast batch shape
  int64_t m, k, n;
  Shape a_batch, b_batch;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ShapeError("matmul requires rank >= 2, got " + shape_str(a) +
                     " and " + shape_str(b));
  }
  MatmulDims d;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  int64_t kb = b[b.size() - 2];
  d.n = b[b.size() - 1];
  if (d.k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a) +
                     " x " + shape_str(b));
  }
  d.a_batch = Shape(a.begin(), a.end() - 2);
  d.b_batch = Shape(b.begin(), b.end() - 2);
  d.batch = broadcast_shape(d.a_batch, d.b_batch);
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatmulDims d = matmul_dims(a.shape(), b.shape());
  const int64_t nbatch = shape_numel(d.batch);
  Shape out_shape = d.batch;
  out_shape.push_back(d.m);
  out_shape.push_back(d.n);

  auto sa = bcast_strides(d.a_batch, d.batch.size());
  auto sb = bcast_strides(d.b_batch, d.batch.size());
  // convert per-axis strides into per-batch-matrix offsets
  const int64_t a_mat = d.m * d.k, b_mat = d.k * d.n, c_mat = d.m * d.n;

  std::vector<int64_t> a_off(nbatch), b_off(nbatch);
  {
    std::vector<int64_t> z(d.batch.size(), 0);
    int64_t cnt = 0;
    for_each_broadcast(d.batch, sa, sb,
                       [&](int64_t, int64_t oa, int64_t ob) {
                         a_off[cnt] = oa * a_mat;
                         b_off[cnt] = ob * b_mat;
                         ++cnt;
                       });
  }

  std::vector<double> out(nbatch * c_mat, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t bi = 0; bi < nbatch; ++bi) {
    gemm_acc(pa + a_off[bi], pb + b_off[bi], out.data() + bi * c_mat, d.m, d.k,
             d.n);
  }

  return make_op(
      "matmul", out_shape, std::move(out), {a, b},
      [d, a_off, b_off, a_mat, b_mat, c_mat, nbatch](Node& node) {
        const double* g = node.grad.data();
        const double* pa2 = node.parents[0]->value.data();
        const double* pb2 = node.parents[1]->value.data();
        if (double* ga = detail::parent_grad(node, 0)) {
          // dA = dC * B^T
          for (int64_t bi = 0; bi < nbatch; ++bi) {
            gemm_bt_acc(g + bi * c_mat, pb2 + b_off[bi], ga + a_off[bi], d.m,
                        d.n, d.k);
          }
        }
        if (double* gb = detail::parent_grad(node, 1)) {
          // dB = A^T * dC
          for (int64_t bi = 0; bi < nbatch; ++bi) {
            gemm_at_acc(pa2 + a_off[bi], g + bi * c_mat, gb + b_off[bi], d.m,
                        d.k, d.n);
          }
        }
      });
}

// ------------------------------------------------------- softmax / layer norm

Tensor softmax(const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.rank());
  auto sp = split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  const double* p = a.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t e = 0; e < sp.extent; ++e) {
        mx = std::max(mx, p[base + e * sp.inner]);
      }
      double z = 0.0;
      for (int64_t e = 0; e < sp.extent; ++e) {
        double v = std::exp(p[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        z += v;
      }
      const double inv = 1.0 / z;
      for (int64_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] *= inv;
    }
  }
  return make_op("softmax", a.shape(), std::move(out), {a},
                 [sp](Node& node) {
                   double* ga = detail::parent_grad(node, 0);
                   if (!ga) return;
                   const double* s = node.value.data();
                   const double* g = node.grad.data();
                   for (int64_t o = 0; o < sp.outer; ++o) {
                     for (int64_t i = 0; i < sp.inner; ++i) {
                       const int64_t base = o * sp.extent * sp.inner + i;
                       double dot = 0.0;
                       for (int64_t e = 0; e < sp.extent; ++e) {
                         const int64_t ix = base + e * sp.inner;
                         dot += g[ix] * s[ix];
                       }
                       for (int64_t e = 0; e < sp.extent; ++e) {
                         const int64_t ix = base + e * sp.inner;
                         ga[ix] += s[ix] * (g[ix] - dot);
                       }
                     }
                   }
                 });
}

Tensor log_softmax(const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.rank());
  auto sp = split_axis(a.shape(), axis);
  std::vector<double> out(a.numel());
  const double* p = a.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t e = 0; e < sp.extent; ++e) {
        mx = std::max(mx, p[base + e * sp.inner]);
      }
      double z = 0.0;
      for (int64_t e = 0; e < sp.extent; ++e) {
        z += std::exp(p[base + e * sp.inner] - mx);
      }
      const double lz = mx + std::log(z);
      for (int64_t e = 0; e < sp.extent; ++e) {
        out[base + e * sp.inner] = p[base + e * sp.inner] - lz;
      }
    }
  }
  return make_op("log_softmax", a.shape(), std::move(out), {a},
                 [sp](Node& node) {
                   double* ga = detail::parent_grad(node, 0);
                   if (!ga) return;
                   const double* ls = node.value.data();
                   const double* g = node.grad.data();
                   for (int64_t o = 0; o < sp.outer; ++o) {
                     for (int64_t i = 0; i < sp.inner; ++i) {
                       const int64_t base = o * sp.extent * sp.inner + i;
                       double gs = 0.0;
                       for (int64_t e = 0; e < sp.extent; ++e) {
                         gs += g[base + e * sp.inner];
                       }
                       for (int64_t e = 0; e < sp.extent; ++e) {
                         const int64_t ix = base + e * sp.inner;
                         ga[ix] += g[ix] - std::exp(ls[ix]) * gs;
                       }
                     }
                   }
                 });
}

Tensor layer_norm(const Tensor& x, int axis, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  const int ax = normalize_axis(axis, x.rank());
  auto sp = split_axis(x.shape(), ax);
  if (gamma.numel() != sp.extent || beta.numel() != sp.extent) {
    throw ShapeError("layer_norm: gamma/beta must match normalized extent " +
                     std::to_string(sp.extent));
  }
  const int64_t n = x.numel();
  std::vector<double> out(n);
  std::vector<double> mu(sp.outer * sp.inner), rstd(sp.outer * sp.inner);
  const double* p = x.data();
  const double* pg = gamma.data();
  const double* pbta = beta.data();
  const double ext = static_cast<double>(sp.extent);
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.extent * sp.inner + i;
      double m = 0.0;
      for (int64_t e = 0; e < sp.extent; ++e) m += p[base + e * sp.inner];
      m /= ext;
      double var = 0.0;
      for (int64_t e = 0; e < sp.extent; ++e) {
        const double dv = p[base + e * sp.inner] - m;
        var += dv * dv;
      }
      var /= ext;
      const double r = 1.0 / std::sqrt(var + eps);
      mu[o * sp.inner + i] = m;
      rstd[o * sp.inner + i] = r;
      for (int64_t e = 0; e < sp.extent; ++e) {
        const int64_t ix = base + e * sp.inner;
        out[ix] = (p[ix] - m) * r * pg[e] + pbta[e];
      }
    }
  }
  return make_op(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [sp, mu = std::move(mu), rstd = std::move(rstd)](Node& node) {
        const double* g = node.grad.data();
        const double* px = node.parents[0]->value.data();
        const double* pg2 = node.parents[1]->value.data();
        double* gx = detail::parent_grad(node, 0);
        double* gg = detail::parent_grad(node, 1);
        double* gb = detail::parent_grad(node, 2);
        const double ext = static_cast<double>(sp.extent);
        for (int64_t o = 0; o < sp.outer; ++o) {
          for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * sp.extent * sp.inner + i;
            const double m = mu[o * sp.inner + i];
            const double r = rstd[o * sp.inner + i];
            // accumulate the two lane sums needed by the closed form
            double sum_gy_g = 0.0, sum_gy_g_xhat = 0.0;
            for (int64_t e = 0; e < sp.extent; ++e) {
              const int64_t ix = base + e * sp.inner;
              const double xhat = (px[ix] - m) * r;
              const double gyg = g[ix] * pg2[e];
              sum_gy_g += gyg;
              sum_gy_g_xhat += gyg * xhat;
              if (gg) gg[e] += g[ix] * xhat;
              if (gb) gb[e] += g[ix];
            }
            if (gx) {
              for (int64_t e = 0; e < sp.extent; ++e) {
                const int64_t ix = base + e * sp.inner;
                const double xhat = (px[ix] - m) * r;
                gx[ix] += r * (g[ix] * pg2[e] - sum_gy_g / ext -
                               xhat * sum_gy_g_xhat / ext);
              }
            }
          }
        }
      });
}

// ------------------------------------------------------------- structural ops

Tensor reshape(const Tensor& a, Shape shape) {
  // one extent may be -1 (inferred)
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer != -1) throw ShapeError("reshape: multiple -1 extents");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known != 0) {
      throw ShapeError("reshape: cannot infer extent");
    }
    shape[infer] = a.numel() / known;
  }
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: element count mismatch " +
                     shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_op("reshape", shape, a.values(), {a}, [](Node& node) {
    if (double* ga = detail::parent_grad(node, 0)) {
      const double* g = node.grad.data();
      for (int64_t i = 0; i < node.numel(); ++i) ga[i] += g[i];
    }
  });
}

namespace {

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int64_t i = static_cast<int64_t>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw ShapeError("permute: axes size mismatch");
  }
  std::vector<bool> used(r, false);
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    int ax = axes[i];
    if (ax < 0 || ax >= r || used[ax]) throw ShapeError("permute: bad axes");
    used[ax] = true;
    out_shape[i] = a.shape()[ax];
  }
  auto src_strides = contiguous_strides(a.shape());
  // stride of output dim i in the source buffer
  std::vector<int64_t> gather(r);
  for (int i = 0; i < r; ++i) gather[i] = src_strides[axes[i]];

  const int64_t n = a.numel();
  std::vector<double> out(n);
  const double* p = a.data();
  std::vector<int64_t> idx(r, 0);
  int64_t src = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    out[lin] = p[src];
    for (int d = r - 1; d >= 0; --d) {
      idx[d]++;
      src += gather[d];
      if (idx[d] < out_shape[d]) break;
      src -= gather[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return make_op("permute", out_shape, std::move(out), {a},
                 [gather, out_shape, r](Node& node) {
                   double* ga = detail::parent_grad(node, 0);
                   if (!ga) return;
                   const double* g = node.grad.data();
                   std::vector<int64_t> idx2(r, 0);
                   int64_t src = 0;
                   const int64_t n2 = node.numel();
                   for (int64_t lin = 0; lin < n2; ++lin) {
                     ga[src] += g[lin];
                     for (int d = r - 1; d >= 0; --d) {
                       idx2[d]++;
                       src += gather[d];
                       if (idx2[d] < out_shape[d]) break;
                       src -= gather[d] * out_shape[d];
                       idx2[d] = 0;
                     }
                   }
                 });
}

Tensor transpose(const Tensor& a, int i, int j) {
  const int r = a.rank();
  if (i < 0) i += r;
  if (j < 0) j += r;
  std::vector<int> axes(r);
  for (int k = 0; k < r; ++k) axes[k] = k;
  std::swap(axes[i], axes[j]);
  return permute(a, axes);
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  const int ax = normalize_axis(axis, a.rank());
  auto sp = split_axis(a.shape(), ax);
  if (start < 0 || len < 0 || start + len > sp.extent) {
    throw ShapeError("slice out of range");
  }
  Shape out_shape = a.shape();
  out_shape[ax] = len;
  std::vector<double> out(shape_numel(out_shape));
  const double* p = a.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    const double* src = p + (o * sp.extent + start) * sp.inner;
    double* dst = out.data() + o * len * sp.inner;
    std::memcpy(dst, src, len * sp.inner * sizeof(double));
  }
  return make_op("slice", out_shape, std::move(out), {a},
                 [sp, start, len](Node& node) {
                   double* ga = detail::parent_grad(node, 0);
                   if (!ga) return;
                   const double* g = node.grad.data();
                   for (int64_t o = 0; o < sp.outer; ++o) {
                     double* dst = ga + (o * sp.extent + start) * sp.inner;
                     const double* src = g + o * len * sp.inner;
                     for (int64_t i = 0; i < len * sp.inner; ++i) {
                       dst[i] += src[i];
                     }
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int ax = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  int64_t total = 0;
  for (const auto& t : parts) {
    Shape s = t.shape();
    s[ax] = out_shape[ax];
    if (s != out_shape) {
      throw ShapeError("concat: incompatible shapes");
    }
    total += t.shape()[ax];
  }
  out_shape[ax] = total;
  auto sp_out = split_axis(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  int64_t off = 0;
  for (const auto& t : parts) {
    const int64_t ext = t.shape()[ax];
    const double* p = t.data();
    for (int64_t o = 0; o < sp_out.outer; ++o) {
      std::memcpy(out.data() + (o * sp_out.extent + off) * sp_out.inner,
                  p + o * ext * sp_out.inner,
                  ext * sp_out.inner * sizeof(double));
    }
    off += ext;
  }
  std::vector<int64_t> exts;
  for (const auto& t : parts) exts.push_back(t.shape()[ax]);
  return make_op("concat", out_shape, std::move(out), parts,
                 [sp_out, exts](Node& node) {
                   const double* g = node.grad.data();
                   int64_t off2 = 0;
                   for (size_t pi = 0; pi < node.parents.size(); ++pi) {
                     const int64_t ext = exts[pi];
                     if (double* ga = detail::parent_grad(node, pi)) {
                       for (int64_t o = 0; o < sp_out.outer; ++o) {
                         const double* src =
                             g + (o * sp_out.extent + off2) * sp_out.inner;
                         double* dst = ga + o * ext * sp_out.inner;
                         for (int64_t i = 0; i < ext * sp_out.inner; ++i) {
                           dst[i] += src[i];
                         }
                       }
                     }
                     off2 += ext;
                   }
                 });
}

Tensor flip(const Tensor& a, int axis) {
  const int ax = normalize_axis(axis, a.rank());
  auto sp = split_axis(a.shape(), ax);
  std::vector<double> out(a.numel());
  const double* p = a.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t e = 0; e < sp.extent; ++e) {
      const double* src = p + (o * sp.extent + e) * sp.inner;
      double* dst =
          out.data() + (o * sp.extent + (sp.extent - 1 - e)) * sp.inner;
      std::memcpy(dst, src, sp.inner * sizeof(double));
    }
  }
  return make_op("flip", a.shape(), std::move(out), {a}, [sp](Node& node) {
    double* ga = detail::parent_grad(node, 0);
    if (!ga) return;
    const double* g = node.grad.data();
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t e = 0; e < sp.extent; ++e) {
        const double* src = g + (o * sp.extent + e) * sp.inner;
        double* dst = ga + (o * sp.extent + (sp.extent - 1 - e)) * sp.inner;
        for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& target) {
  Shape check = broadcast_shape(a.shape(), target);
  if (check != target) {
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) +
                     " does not broadcast to " + shape_str(target));
  }
  auto sa = bcast_strides(a.shape(), target.size());
  std::vector<int64_t> z(target.size(), 0);
  std::vector<double> out(shape_numel(target));
  const double* p = a.data();
  for_each_broadcast(target, sa, z, [&](int64_t lin, int64_t oa, int64_t) {
    out[lin] = p[oa];
  });
  Shape ash = a.shape();
  return make_op("broadcast_to", target, std::move(out), {a},
                 [ash, target](Node& node) {
                   if (double* ga = detail::parent_grad(node, 0)) {
                     reduce_into(node.grad.data(), target, ga, ash);
                   }
                 });
}

void check_finite(const Tensor& t, const char* what) {
  finite_check_raw(t.data(), t.numel(), what);
}

}  // namespace skelmamba
