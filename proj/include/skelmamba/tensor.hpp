#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "skelmamba/util.hpp"

namespace skelmamba {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// One recorded node of the autodiff tape. Nodes are created in program
// order; `id` is the tape position, so every node's inputs have smaller
// ids and reverse-id order is a reverse topological order. backward_fn
// reads this node's grad and accumulates into the parents' grads using
// raw buffers only (it must not create new nodes).
struct Node {
  uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  double* grad_buffer();  // allocates zeros on first use
};

// Returns the grad buffer of parent i, or nullptr when that parent does
// not require grad (backward code skips the accumulation).
double* parent_grad(Node& n, size_t i);

}  // namespace detail

// Dense n-d real array with optional tape linkage. Copies share the
// underlying node (shallow value semantics, like framework tensors).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);
  // uniform in [lo, hi)
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false);
  static Tensor rand_normal(Shape shape, Rng& rng, double mean, double stddev,
                            bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int64_t dim(int i) const;  // negative i counts from the back
  int64_t numel() const;

  double* data();
  const double* data() const;
  const std::vector<double>& values() const;

  double item() const;  // requires numel()==1
  double at(std::initializer_list<int64_t> idx) const;
  void set(std::initializer_list<int64_t> idx, double v);  // leaf edit

  bool requires_grad() const;
  Tensor grad() const;  // empty tensor if no grad accumulated
  void clear_grad();
  Tensor detach() const;  // same values, no tape linkage

  // tape introspection
  uint64_t node_id() const;
  const char* op_name() const;
  std::vector<uint64_t> parent_ids() const;
  bool is_leaf() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  friend Tensor wrap_node(std::shared_ptr<detail::Node> n);
  std::shared_ptr<detail::Node> node_;
};

Tensor wrap_node(std::shared_ptr<detail::Node> n);

// Builds a new tape node from explicitly computed values. The factory
// applies the active precision, runs the finite check, and drops parents
// and backward_fn when grad is not required. Custom fused ops (scan,
// cycle shift, conv) go through this.
Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward_fn);

// --- autodiff control ------------------------------------------------------

bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev;
};

// Reverse accumulation from a scalar root. Intermediate grads are reset
// per call; leaf grads accumulate across calls (clear them explicitly
// between steps). Throws ConfigError when root is not scalar.
void backward(const Tensor& root);

// --- shape utilities --------------------------------------------------------

// Trailing-axis broadcast. Throws ShapeError listing both shapes.
Shape broadcast_shape(const Shape& a, const Shape& b);

// --- elementwise ops --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor reciprocal(const Tensor& a);  // throws NumericError at 0
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// --- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);
Tensor max_values(const Tensor& a, int axis, bool keepdim = false);  // no grad

// --- linear algebra ---------------------------------------------------------

// Batched matmul [..,m,k] x [..,k,n] -> [..,m,n]; batch dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// --- normalization / activations over axes ----------------------------------

Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& x, int axis, const Tensor& gamma,
                  const Tensor& beta, double eps);

// --- structural ops ---------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor transpose(const Tensor& a, int i, int j);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor flip(const Tensor& a, int axis);
Tensor broadcast_to(const Tensor& a, const Shape& target);

// checks every element is finite, throws NumericError otherwise
void check_finite(const Tensor& t, const char* what);

}  // namespace skelmamba
