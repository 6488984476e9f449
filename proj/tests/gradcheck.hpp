#pragma once

// Central finite-difference oracle shared by the unit tests and the
// acceptance binary. Everything runs in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dior/params.hpp"
#include "dior/rng.hpp"
#include "dior/tensor.hpp"

namespace dior::testing {

using MatD = Mat<double>;
using VarD = Var<double>;
using TapeD = Tape<double>;

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

using Builder = std::function<VarD(TapeD&, const std::vector<VarD>&)>;

/// Largest elementwise relative error over every input of `build`, where the
/// scalar under test is sum(R * output) for a fixed random R.
inline double op_gradient_error(std::vector<MatD> inputs, const Builder& build, Rng& rng,
                                double h = 1e-4) {
  MatD weights;
  auto loss_at = [&](const std::vector<MatD>& xs, std::vector<MatD>* grads) {
    TapeD tape;
    std::vector<VarD> vars;
    for (const auto& x : xs) vars.push_back(tape.variable(x));
    VarD out = build(tape, vars);
    if (weights.size() == 0) weights = randn_matrix<double>(out.rows(), out.cols(), rng);
    VarD loss = sum(mul(out, tape.constant(weights)));
    if (grads) {
      tape.backward(loss);
      for (const auto& v : vars) grads->push_back(v.grad());
    }
    return loss.value()(0, 0);
  };
  std::vector<MatD> analytic;
  loss_at(inputs, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k].data()[i];
      inputs[k].data()[i] = saved + h;
      const double up = loss_at(inputs, nullptr);
      inputs[k].data()[i] = saved - h;
      const double down = loss_at(inputs, nullptr);
      inputs[k].data()[i] = saved;
      worst = std::max(worst, rel_error(analytic[k].data()[i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

struct ParamCheck {
  std::string name;
  std::size_t entries = 0;
  std::size_t passed = 0;
  double worst = 0.0;
};

/// Checks every scalar of every parameter in `store` against central
/// differences of `loss`, which must rebuild its graph (and reseed any
/// randomness) on each call.
inline std::vector<ParamCheck> parameter_gradient_check(
    ParameterStore<double>& store, const std::function<VarD(TapeD&)>& loss, double h = 1e-4,
    double tolerance = 1e-3) {
  store.zero_grad();
  {
    TapeD tape;
    VarD l = loss(tape);
    tape.backward(l);
    store.accumulate(tape);
  }
  auto value = [&] {
    TapeD tape(false);
    return loss(tape).value()(0, 0);
  };
  std::vector<ParamCheck> out;
  for (auto& [name, p] : store.all()) {
    ParamCheck c{name, static_cast<std::size_t>(p->value.size()), 0, 0.0};
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double saved = p->value.data()[i];
      p->value.data()[i] = saved + h;
      const double up = value();
      p->value.data()[i] = saved - h;
      const double down = value();
      p->value.data()[i] = saved;
      const double err = rel_error(p->grad.data()[i], (up - down) / (2 * h));
      c.worst = std::max(c.worst, err);
      if (err < tolerance) ++c.passed;
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace dior::testing
