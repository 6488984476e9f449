#pragma once

// Reverse-mode automatic differentiation over dense row-major Eigen matrices.
//
// Every value lives on a Tape as a rank-2 matrix (vectors are 1 x n rows).
// Operations are free functions over Var handles; each records a local
// gradient rule which Tape::backward replays in reverse creation order.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "dior/rng.hpp"

namespace dior {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

/// Thrown when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(Eigen::Index rows, Eigen::Index cols);

/// A named trainable matrix plus its accumulated gradient.
template <typename Scalar>
struct Parameter {
  std::string name;
  Mat<Scalar> value;
  Mat<Scalar> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid for the tape's lifetime.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Mat<Scalar>& value() const;
  const Mat<Scalar>& grad() const;
  bool has_grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Eigen::Index size() const { return value().size(); }
  Tape<Scalar>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat<Scalar>& out_grad)>;

  /// With grad disabled no gradient rules are stored; forward values only.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var<Scalar> constant(Mat<Scalar> value);
  /// Leaf bound to a parameter; repeated calls for the same parameter share a node.
  Var<Scalar> param(const Parameter<Scalar>& p);
  /// Free leaf that receives a gradient (used for inputs under test).
  Var<Scalar> variable(Mat<Scalar> value);

  /// Appends an op result. The rule is kept only when some input needs a gradient.
  Var<Scalar> record(Mat<Scalar> value, bool inputs_need_grad, Backward rule);

  const Mat<Scalar>& value(int id) const;
  const Mat<Scalar>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() > 0; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  void accumulate(int id, const Mat<Scalar>& g);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(Var<Scalar> loss);

  /// Parameter leaves with their gradients after backward().
  std::vector<std::pair<const Parameter<Scalar>*, const Mat<Scalar>*>> param_grads() const;

  void clear();

 private:
  struct Node {
    Mat<Scalar> value;
    const Mat<Scalar>* ref = nullptr;
    const Parameter<Scalar>* param = nullptr;
    Mat<Scalar> grad;
    Backward rule;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<Scalar>*, int> param_nodes_;
  bool grad_enabled_;
};

// ---- primitives -----------------------------------------------------------

template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
/// a * b^T
template <typename S> Var<S> matmul_nt(Var<S> a, Var<S> b);
template <typename S> Var<S> transpose(Var<S> a);

// Elementwise binary ops accept equal shapes, or one operand of shape 1 x n
// broadcast over the rows of the other (m x n). Anything else is rejected.
template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);

template <typename S> using Num = std::type_identity_t<S>;

template <typename S> Var<S> scale(Var<S> a, Num<S> factor);
template <typename S> Var<S> add_scalar(Var<S> a, Num<S> shift);
template <typename S> Var<S> mask_mul(Var<S> a, const Mat<Num<S>>& mask);

template <typename S> Var<S> concat_rows(const std::vector<Var<S>>& parts);
template <typename S> Var<S> concat_cols(const std::vector<Var<S>>& parts);
template <typename S> Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count);
template <typename S> Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count);

template <typename S> Var<S> embedding(Var<S> table, std::span<const int> ids);

/// Row-wise softmax. `allowed`, when given, has one entry per column (shared by
/// all rows) or rows*cols entries; disallowed entries get probability 0.
template <typename S> Var<S> softmax(Var<S> a, std::span<const std::uint8_t> allowed = {});
template <typename S> Var<S> log_softmax(Var<S> a);
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, Num<S> eps = Num<S>(1e-5));

template <typename S> Var<S> tanh(Var<S> a);
template <typename S> Var<S> gelu(Var<S> a);
template <typename S> Var<S> exp(Var<S> a);
/// Hard clamp; gradient is zero where the bound is active.
template <typename S> Var<S> clamp(Var<S> a, Num<S> lo, Num<S> hi);

template <typename S> Var<S> sum(Var<S> a);
template <typename S> Var<S> sum_squares(Var<S> a);

/// Inverted dropout: kept entries are divided by keep_prob.
template <typename S> Var<S> dropout(Var<S> a, const Mat<Num<S>>& keep_mask, Num<S> keep_prob);

/// Summed token cross-entropy of row-wise logits against targets, with label
/// smoothing spreading `smoothing` uniformly over the vocabulary.
template <typename S>
Var<S> cross_entropy(Var<S> logits, std::span<const int> targets, Num<S> smoothing = Num<S>(0));

/// Standard-normal constant drawn from the supplied generator.
template <typename S> Var<S> randn(Tape<S>& tape, Eigen::Index rows, Eigen::Index cols, Rng& rng);

template <typename S> Mat<S> randn_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng);

template <typename S> inline Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S> inline Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S> inline Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }

}  // namespace dior
