#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mode/rng.hpp"
#include "mode/tensor.hpp"

namespace mode {

// A named model weight. Frozen parameters still receive gradients but the
// optimizer never applies them; non-trainable ones enter graphs as constants.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  bool frozen = false;
  bool decay = true;

  void zero_grad();
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode tape. Ops evaluate eagerly and, when recording, push a
// backward closure; backward() replays closures in reverse creation order.
// A non-recording tape is the inference path: no closures, no gradients.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var constant(Tensor value);
  // Leaf bound to a parameter. The value is referenced, not copied, and
  // gradients accumulate straight into p.grad.
  Var param(Parameter& p);

  const Tensor& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  // Gradient buffer of a node, zero-initialized on first access.
  Tensor& grad(std::size_t id);

  Var push(Tensor value, std::span<const Var> parents, BackwardFn backward);
  Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external_value = nullptr;
    Tensor grad;
    Tensor* external_grad = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;  // stable addresses: value() references survive later pushes
};

namespace ad {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var reshape(Var a, Shape shape);

// x[r, c] + b[c]
Var add_bias(Var x, Var bias);
// x has rows = groups * pattern.rows(); adds pattern to every group of rows.
Var add_tiled(Var x, Var pattern);
// x has rows = g.rows() * group; row r receives g[r / group].
Var add_group(Var x, Var g, std::size_t group);
Var mul_group(Var x, Var g, std::size_t group);
// Row r scaled by the constant w[r].
Var scale_rows(Var x, std::vector<double> w);
// Row r scaled by w[r, 0]; differentiable in both arguments.
Var scale_rows(Var x, Var w);

Var silu(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var dropout(Var x, double p, Rng& rng);

// Multi-head scaled dot-product attention over groups of `group` rows.
// `mask` is group x group with nonzero meaning "may attend"; an empty mask
// means causal (lower triangular). Attention-probability dropout is applied
// when p > 0 and rng is provided.
Var attention(Var q, Var k, Var v, std::size_t group, std::size_t heads, const Tensor& mask = {},
              double dropout_p = 0.0, Rng* rng = nullptr);

Var gather_rows(Var x, std::vector<std::size_t> index);
// Output has n_rows rows; row index[i] receives x row i (accumulating).
Var scatter_rows(Var x, std::vector<std::size_t> index, std::size_t n_rows);
// Interleaves segments group by group: for each of n_groups groups, the
// rows of segment s belonging to that group (rows_per_group[s] of them).
Var interleave_groups(const std::vector<Var>& segments, const std::vector<std::size_t>& rows_per_group,
                      std::size_t n_groups);
// Column `col` of w, one entry per row_map element: out[i] = w[row_map[i], col].
Var gather_column(Var w, std::size_t col, std::vector<std::size_t> row_map);

Var mean_rows(Var x);
Var sum(Var x);
// Scalar sum_i x[i] * c[i].
Var dot_const(Var x, Tensor c);
// w = p * mask / sum(p * mask) per row. With renormalize == false the masked
// probabilities are returned unnormalized (used for fault injection only).
Var renormalize_selected(Var probs, Tensor mask, bool renormalize = true);
// mean over all elements of row_weight[r / group] * (pred - target)^2.
Var weighted_sq_error(Var pred, Tensor target, std::vector<double> row_weight, std::size_t group);

}  // namespace ad

inline Var operator+(Var a, Var b) { return ad::add(a, b); }
inline Var operator-(Var a, Var b) { return ad::sub(a, b); }
inline Var operator*(Var a, Var b) { return ad::mul(a, b); }
inline Var operator*(double s, Var a) { return ad::scale(a, s); }

}  // namespace mode
