#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>

#include "dior/tensor.hpp"

namespace dior {

/// Owns every trainable matrix of a model, keyed by a dotted path
/// ("enc.0.attn.wq"). Addresses are stable for the store's lifetime, so tapes
/// may hold pointers into it.
template <typename Scalar>
class ParameterStore {
 public:
  using Map = std::map<std::string, std::unique_ptr<Parameter<Scalar>>>;

  ParameterStore() = default;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    params_.clear();
    for (const auto& [name, p] : other.params_) params_.emplace(name, std::make_unique<Parameter<Scalar>>(*p));
    return *this;
  }

  Parameter<Scalar>& add(const std::string& name, Mat<Scalar> value) {
    auto p = std::make_unique<Parameter<Scalar>>();
    p->name = name;
    p->value = std::move(value);
    p->zero_grad();
    auto [it, inserted] = params_.emplace(name, std::move(p));
    if (!inserted) throw std::invalid_argument("duplicate parameter '" + name + "'");
    return *it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Parameter<Scalar>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return *it->second;
  }
  Parameter<Scalar>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return *it->second;
  }

  const Map& all() const { return params_; }
  Map& all() { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p->zero_grad();
  }

  /// Adds the gradients a tape collected for this store's parameters.
  void accumulate(const Tape<Scalar>& tape) {
    for (const auto& [param, grad] : tape.param_grads()) at(param->name).grad += *grad;
  }

  template <typename Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out;
    for (const auto& [name, p] : params_) out.add(name, p->value.template cast<Other>());
    return out;
  }

 private:
  Map params_;
};

template <typename S>
Mat<S> xavier_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

template <typename S>
Mat<S> normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  return (randn_matrix<S>(rows, cols, rng) * static_cast<S>(stddev)).eval();
}

/// Registers `prefix.w` (in x out) and `prefix.b` (1 x out).
template <typename S>
void add_linear(ParameterStore<S>& store, const std::string& prefix, Eigen::Index in,
                Eigen::Index out, Rng& rng) {
  store.add(prefix + ".w", xavier_uniform<S>(in, out, rng));
  store.add(prefix + ".b", Mat<S>::Zero(1, out));
}

template <typename S>
Var<S> linear(Tape<S>& tape, const ParameterStore<S>& store, const std::string& prefix, Var<S> x) {
  return add(matmul(x, tape.param(store.at(prefix + ".w"))), tape.param(store.at(prefix + ".b")));
}

}  // namespace dior
