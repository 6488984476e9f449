#include "dior/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dior {

std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  std::ostringstream os;
  os << "(" << rows << " x " << cols << ")";
  return os.str();
}

template <typename Scalar>
const Mat<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}
template <typename Scalar>
const Mat<Scalar>& Var<Scalar>::grad() const {
  return tape_->grad(id_);
}
template <typename Scalar>
bool Var<Scalar>::has_grad() const {
  return tape_->has_grad(id_);
}
template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return tape_->requires_grad(id_);
}

// ---- Tape -----------------------------------------------------------------

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Mat<Scalar> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::param(const Parameter<Scalar>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return {this, id};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::variable(Mat<Scalar> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(Mat<Scalar> value, bool inputs_need_grad, Backward rule) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && inputs_need_grad;
  if (n.requires_grad) n.rule = std::move(rule);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
const Mat<Scalar>& Tape<Scalar>::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.ref ? *n.ref : n.value;
}

template <typename Scalar>
void Tape<Scalar>::accumulate(int id, const Mat<Scalar>& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_string(loss.rows(), loss.cols()));
  }
  if (!grad_enabled_) throw std::logic_error("backward on a tape with gradients disabled");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  Mat<Scalar> seed = Mat<Scalar>::Ones(1, 1);
  accumulate(loss.id(), seed);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.rule && n.grad.size() > 0) n.rule(*this, n.grad);
  }
}

template <typename Scalar>
std::vector<std::pair<const Parameter<Scalar>*, const Mat<Scalar>*>> Tape<Scalar>::param_grads()
    const {
  std::vector<std::pair<const Parameter<Scalar>*, const Mat<Scalar>*>> out;
  for (const auto& [param, id] : param_nodes_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() > 0) out.emplace_back(param, &n.grad);
  }
  return out;
}

template <typename Scalar>
void Tape<Scalar>::clear() {
  nodes_.clear();
  param_nodes_.clear();
}

// ---- helpers --------------------------------------------------------------

namespace {

enum class Broadcast { kNone, kLeft, kRight };

template <typename S>
Broadcast broadcast_kind(const Mat<S>& a, const Mat<S>& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::kNone;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRight;
  if (a.rows() == 1 && a.cols() == b.cols()) return Broadcast::kLeft;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.rows(), a.cols()) +
                   " and " + shape_string(b.rows(), b.cols()));
}

template <typename S>
Mat<S> expand_rows(const Mat<S>& row, Eigen::Index rows) {
  return row.replicate(rows, 1);
}

template <typename S>
Mat<S> reduce_rows(const Mat<S>& g) {
  return g.colwise().sum();
}

template <typename S>
bool needs(Var<S> a) {
  return a.requires_grad();
}

}  // namespace

// ---- primitives -----------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.rows(), a.cols()) +
                     " and " + shape_string(b.rows(), b.cols()));
  }
  Mat<S> out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a) || needs(b),
                         [ia, ib](Tape<S>& t, const Mat<S>& g) {
                           if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                           if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                         });
}

template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: column counts differ " + shape_string(a.rows(), a.cols()) +
                     " and " + shape_string(b.rows(), b.cols()));
  }
  Mat<S> out = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a) || needs(b),
                         [ia, ib](Tape<S>& t, const Mat<S>& g) {
                           if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
                           if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
                         });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  Mat<S> out = a.value().transpose();
  const int ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.transpose());
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  const Broadcast kind = broadcast_kind(a.value(), b.value(), "add");
  Mat<S> out;
  switch (kind) {
    case Broadcast::kNone: out = a.value() + b.value(); break;
    case Broadcast::kRight: out = a.value().rowwise() + b.value().row(0); break;
    case Broadcast::kLeft: out = b.value().rowwise() + a.value().row(0); break;
  }
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a) || needs(b),
                         [ia, ib, kind](Tape<S>& t, const Mat<S>& g) {
                           t.accumulate(ia, kind == Broadcast::kLeft ? reduce_rows<S>(g) : g);
                           t.accumulate(ib, kind == Broadcast::kRight ? reduce_rows<S>(g) : g);
                         });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  const Broadcast kind = broadcast_kind(a.value(), b.value(), "sub");
  Mat<S> out;
  switch (kind) {
    case Broadcast::kNone: out = a.value() - b.value(); break;
    case Broadcast::kRight: out = a.value().rowwise() - b.value().row(0); break;
    case Broadcast::kLeft: out = (-b.value()).rowwise() + a.value().row(0); break;
  }
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a) || needs(b),
                         [ia, ib, kind](Tape<S>& t, const Mat<S>& g) {
                           t.accumulate(ia, kind == Broadcast::kLeft ? reduce_rows<S>(g) : g);
                           t.accumulate(ib, kind == Broadcast::kRight ? Mat<S>(-reduce_rows<S>(g))
                                                                      : Mat<S>(-g));
                         });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  const Broadcast kind = broadcast_kind(a.value(), b.value(), "mul");
  const Eigen::Index rows = std::max(a.rows(), b.rows());
  Mat<S> av = kind == Broadcast::kLeft ? expand_rows<S>(a.value(), rows) : a.value();
  Mat<S> bv = kind == Broadcast::kRight ? expand_rows<S>(b.value(), rows) : b.value();
  Mat<S> out = av.cwiseProduct(bv);
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a) || needs(b),
                         [ia, ib, kind, av, bv](Tape<S>& t, const Mat<S>& g) {
                           if (t.requires_grad(ia)) {
                             Mat<S> ga = g.cwiseProduct(bv);
                             t.accumulate(ia, kind == Broadcast::kLeft ? reduce_rows<S>(ga) : ga);
                           }
                           if (t.requires_grad(ib)) {
                             Mat<S> gb = g.cwiseProduct(av);
                             t.accumulate(ib, kind == Broadcast::kRight ? reduce_rows<S>(gb) : gb);
                           }
                         });
}

template <typename S>
Var<S> scale(Var<S> a, Num<S> factor) {
  Mat<S> out = a.value() * factor;
  const int ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, factor](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g * factor);
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, Num<S> shift) {
  Mat<S> out = a.value().array() + shift;
  const int ia = a.id();
  return a.tape().record(std::move(out), needs(a),
                         [ia](Tape<S>& t, const Mat<S>& g) { t.accumulate(ia, g); });
}

template <typename S>
Var<S> mask_mul(Var<S> a, const Mat<Num<S>>& mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) {
    throw ShapeError("mask_mul: mask shape " + shape_string(mask.rows(), mask.cols()) +
                     " does not match " + shape_string(a.rows(), a.cols()));
  }
  Mat<S> out = a.value().cwiseProduct(mask);
  const int ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, mask](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool any = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts.front().rows(), cols) +
                       " and " + shape_string(p.rows(), p.cols()));
    }
    rows += p.rows();
    any = any || needs(p);
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    at += p.rows();
  }
  return parts.front().tape().record(std::move(out), any,
                                     [spans](Tape<S>& t, const Mat<S>& g) {
                                       Eigen::Index off = 0;
                                       for (const auto& [id, n] : spans) {
                                         if (t.requires_grad(id)) t.accumulate(id, g.middleRows(off, n));
                                         off += n;
                                       }
                                     });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool any = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_string(rows, parts.front().cols()) +
                       " and " + shape_string(p.rows(), p.cols()));
    }
    cols += p.cols();
    any = any || needs(p);
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  return parts.front().tape().record(std::move(out), any,
                                     [spans](Tape<S>& t, const Mat<S>& g) {
                                       Eigen::Index off = 0;
                                       for (const auto& [id, n] : spans) {
                                         if (t.requires_grad(id)) t.accumulate(id, g.middleCols(off, n));
                                         off += n;
                                       }
                                     });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 1 || start + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " +
                     shape_string(a.rows(), a.cols()));
  }
  Mat<S> out = a.value().middleRows(start, count);
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape().record(std::move(out), needs(a),
                         [ia, start, count, rows, cols](Tape<S>& t, const Mat<S>& g) {
                           Mat<S> full = Mat<S>::Zero(rows, cols);
                           full.middleRows(start, count) = g;
                           t.accumulate(ia, full);
                         });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 1 || start + count > a.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " +
                     shape_string(a.rows(), a.cols()));
  }
  Mat<S> out = a.value().middleCols(start, count);
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape().record(std::move(out), needs(a),
                         [ia, start, count, rows, cols](Tape<S>& t, const Mat<S>& g) {
                           Mat<S> full = Mat<S>::Zero(rows, cols);
                           full.middleCols(start, count) = g;
                           t.accumulate(ia, full);
                         });
}

template <typename S>
Var<S> embedding(Var<S> table, std::span<const int> ids) {
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  const Mat<S>& w = table.value();
  Mat<S> out(static_cast<Eigen::Index>(ids.size()), w.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= w.rows()) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(w.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = w.row(ids[i]);
  }
  const int it = table.id();
  std::vector<int> idx(ids.begin(), ids.end());
  const Eigen::Index rows = w.rows(), cols = w.cols();
  return table.tape().record(std::move(out), needs(table),
                             [it, idx, rows, cols](Tape<S>& t, const Mat<S>& g) {
                               Mat<S> full = Mat<S>::Zero(rows, cols);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                               }
                               t.accumulate(it, full);
                             });
}

template <typename S>
Var<S> softmax(Var<S> a, std::span<const std::uint8_t> allowed) {
  const Mat<S>& x = a.value();
  if (x.cols() == 0) throw ShapeError("softmax: empty axis");
  const bool per_column = allowed.size() == static_cast<std::size_t>(x.cols());
  if (!allowed.empty() && !per_column && allowed.size() != static_cast<std::size_t>(x.size())) {
    throw ShapeError("softmax: mask of " + std::to_string(allowed.size()) +
                     " entries does not fit " + shape_string(x.rows(), x.cols()));
  }
  auto ok = [&](Eigen::Index r, Eigen::Index c) {
    if (allowed.empty()) return true;
    return per_column ? allowed[static_cast<std::size_t>(c)] != 0
                      : allowed[static_cast<std::size_t>(r * x.cols() + c)] != 0;
  };
  Mat<S> y = Mat<S>::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    S hi = -std::numeric_limits<S>::infinity();
    bool any = false;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (!ok(r, c)) continue;
      any = true;
      hi = std::isnan(x(r, c)) ? x(r, c) : std::max(hi, x(r, c));
      if (std::isnan(hi)) break;
    }
    if (!any) throw std::invalid_argument("softmax: row has no admissible entry");
    // Non-finite scores propagate as NaN so callers can detect and skip the step.
    if (!std::isfinite(hi)) {
      y.row(r).setConstant(std::numeric_limits<S>::quiet_NaN());
      continue;
    }
    S total = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (ok(r, c)) {
        y(r, c) = std::exp(x(r, c) - hi);
        total += y(r, c);
      }
    }
    y.row(r) /= total;
  }
  const int ia = a.id();
  Mat<S> saved = y;
  return a.tape().record(std::move(y), needs(a), [ia, saved](Tape<S>& t, const Mat<S>& g) {
    Mat<S> dot = g.cwiseProduct(saved).rowwise().sum();
    Mat<S> gx = saved.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(ia, gx);
  });
}

template <typename S>
Var<S> log_softmax(Var<S> a) {
  const Mat<S>& x = a.value();
  if (x.cols() == 0) throw ShapeError("log_softmax: empty axis");
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S hi = x.row(r).maxCoeff();
    const S lse = hi + std::log((x.row(r).array() - hi).exp().sum());
    y.row(r) = x.row(r).array() - lse;
  }
  const int ia = a.id();
  Mat<S> probs = y.array().exp();
  return a.tape().record(std::move(y), needs(a), [ia, probs](Tape<S>& t, const Mat<S>& g) {
    Mat<S> total = g.rowwise().sum();
    t.accumulate(ia, g - probs.cwiseProduct(total.replicate(1, g.cols())));
  });
}

template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, Num<S> eps) {
  const Mat<S>& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (n == 0) throw ShapeError("layer_norm: empty axis");
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ShapeError("layer_norm: affine shapes " + shape_string(gamma.rows(), gamma.cols()) +
                     " / " + shape_string(beta.rows(), beta.cols()) + " do not fit " +
                     shape_string(xv.rows(), n));
  }
  Mat<S> xhat(xv.rows(), n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const S mean = xv.row(r).mean();
    const S var = (xv.row(r).array() - mean).square().mean();
    inv(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv(r);
  }
  Mat<S> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), needs(x) || needs(gamma) || needs(beta),
      [ix, ig, ib, xhat, inv, n](Tape<S>& t, const Mat<S>& g) {
        if (t.requires_grad(ib)) t.accumulate(ib, reduce_rows<S>(g));
        if (t.requires_grad(ig)) t.accumulate(ig, reduce_rows<S>(Mat<S>(g.cwiseProduct(xhat))));
        if (t.requires_grad(ix)) {
          Mat<S> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
          Mat<S> gx(g.rows(), n);
          for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const S s1 = dxhat.row(r).sum();
            const S s2 = dxhat.row(r).dot(xhat.row(r));
            gx.row(r) = (inv(r) / S(n)) *
                        (S(n) * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2);
          }
          t.accumulate(ix, gx);
        }
      });
}

template <typename S>
Var<S> tanh(Var<S> a) {
  Mat<S> y = a.value().array().tanh();
  const int ia = a.id();
  Mat<S> saved = y;
  return a.tape().record(std::move(y), needs(a), [ia, saved](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(Mat<S>(1 - saved.array().square())));
  });
}

template <typename S>
Var<S> gelu(Var<S> a) {
  static constexpr S kC = S(0.7978845608028654);  // sqrt(2/pi)
  static constexpr S kA = S(0.044715);
  const Mat<S>& x = a.value();
  Mat<S> inner = kC * (x.array() + kA * x.array().cube());
  Mat<S> th = inner.array().tanh();
  Mat<S> y = S(0.5) * x.array() * (1 + th.array());
  const int ia = a.id();
  Mat<S> xs = x;
  return a.tape().record(std::move(y), needs(a), [ia, xs, th](Tape<S>& t, const Mat<S>& g) {
    Mat<S> d = S(0.5) * (1 + th.array()) +
               S(0.5) * xs.array() * (1 - th.array().square()) * kC *
                   (1 + 3 * kA * xs.array().square());
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

template <typename S>
Var<S> exp(Var<S> a) {
  Mat<S> y = a.value().array().exp();
  const int ia = a.id();
  Mat<S> saved = y;
  return a.tape().record(std::move(y), needs(a), [ia, saved](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(saved));
  });
}

template <typename S>
Var<S> clamp(Var<S> a, Num<S> lo, Num<S> hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lower bound above upper bound");
  const Mat<S>& x = a.value();
  Mat<S> y = x.array().max(lo).min(hi);
  Mat<S> pass = ((x.array() >= lo) && (x.array() <= hi)).template cast<S>();
  const int ia = a.id();
  return a.tape().record(std::move(y), needs(a), [ia, pass](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(pass));
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape().record(std::move(out), needs(a), [ia, rows, cols](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>::Constant(rows, cols, g(0, 0)));
  });
}

template <typename S>
Var<S> sum_squares(Var<S> a) {
  Mat<S> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  const int ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, S(2) * g(0, 0) * t.value(ia));
  });
}

template <typename S>
Var<S> dropout(Var<S> a, const Mat<Num<S>>& keep_mask, Num<S> keep_prob) {
  if (!(keep_prob > 0 && keep_prob <= 1)) {
    throw std::invalid_argument("dropout: keep probability must lie in (0, 1]");
  }
  return mask_mul(a, Mat<S>(keep_mask / keep_prob));
}

template <typename S>
Var<S> cross_entropy(Var<S> logits, std::span<const int> targets, Num<S> smoothing) {
  const Mat<S>& x = logits.value();
  if (static_cast<std::size_t>(x.rows()) != targets.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(x.rows(), x.cols()));
  }
  if (x.cols() == 0) throw ShapeError("cross_entropy: empty vocabulary axis");
  const Eigen::Index vocab = x.cols();
  Mat<S> probs(x.rows(), vocab);
  Mat<S> target_dist = Mat<S>::Constant(x.rows(), vocab, smoothing / S(vocab));
  S loss = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(tgt) + " outside vocab of " +
                              std::to_string(vocab));
    }
    const S hi = x.row(r).maxCoeff();
    const S lse = hi + std::log((x.row(r).array() - hi).exp().sum());
    probs.row(r) = (x.row(r).array() - lse).exp();
    target_dist(r, tgt) += S(1) - smoothing;
    loss -= (target_dist.row(r).array() * (x.row(r).array() - lse)).sum();
  }
  Mat<S> out(1, 1);
  out(0, 0) = loss;
  const int ia = logits.id();
  Mat<S> grad = probs - target_dist;
  return logits.tape().record(std::move(out), needs(logits),
                              [ia, grad](Tape<S>& t, const Mat<S>& g) {
                                t.accumulate(ia, grad * g(0, 0));
                              });
}

template <typename S>
Mat<S> randn_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(standard_normal(rng));
  return m;
}

template <typename S>
Var<S> randn(Tape<S>& tape, Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  return tape.constant(randn_matrix<S>(rows, cols, rng));
}

#define DIOR_INSTANTIATE_TENSOR(S)                                                        \
  template class Var<S>;                                                                  \
  template class Tape<S>;                                                                 \
  template Var<S> matmul(Var<S>, Var<S>);                                                 \
  template Var<S> matmul_nt(Var<S>, Var<S>);                                              \
  template Var<S> transpose(Var<S>);                                                      \
  template Var<S> add(Var<S>, Var<S>);                                                    \
  template Var<S> sub(Var<S>, Var<S>);                                                    \
  template Var<S> mul(Var<S>, Var<S>);                                                    \
  template Var<S> scale(Var<S>, Num<S>);                                                  \
  template Var<S> add_scalar(Var<S>, Num<S>);                                             \
  template Var<S> mask_mul(Var<S>, const Mat<Num<S>>&);                                   \
  template Var<S> concat_rows(const std::vector<Var<S>>&);                                \
  template Var<S> concat_cols(const std::vector<Var<S>>&);                                \
  template Var<S> slice_rows(Var<S>, Eigen::Index, Eigen::Index);                         \
  template Var<S> slice_cols(Var<S>, Eigen::Index, Eigen::Index);                         \
  template Var<S> embedding(Var<S>, std::span<const int>);                                \
  template Var<S> softmax(Var<S>, std::span<const std::uint8_t>);                         \
  template Var<S> log_softmax(Var<S>);                                                    \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, Num<S>);                             \
  template Var<S> tanh(Var<S>);                                                           \
  template Var<S> gelu(Var<S>);                                                           \
  template Var<S> exp(Var<S>);                                                            \
  template Var<S> clamp(Var<S>, Num<S>, Num<S>);                                          \
  template Var<S> sum(Var<S>);                                                            \
  template Var<S> sum_squares(Var<S>);                                                    \
  template Var<S> dropout(Var<S>, const Mat<Num<S>>&, Num<S>);                            \
  template Var<S> cross_entropy(Var<S>, std::span<const int>, Num<S>);                    \
  template Var<S> randn(Tape<S>&, Eigen::Index, Eigen::Index, Rng&);                      \
  template Mat<S> randn_matrix<S>(Eigen::Index, Eigen::Index, Rng&);

DIOR_INSTANTIATE_TENSOR(float)
DIOR_INSTANTIATE_TENSOR(double)

#undef DIOR_INSTANTIATE_TENSOR

}  // namespace dior
