#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dior/latent.hpp"
#include "gradcheck.hpp"

using namespace dior;
using dior::testing::MatD;
using dior::testing::TapeD;
using dior::testing::VarD;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.latent_dim = 3;
  cfg.vocab_size = 10;
  return cfg;
}

ParameterStore<double> latent_store(const ModelConfig& cfg, std::uint64_t seed = 1) {
  ParameterStore<double> store;
  Rng rng = make_rng(seed, 0);
  init_latent(store, cfg, rng);
  return store;
}

void zero_all(ParameterStore<double>& store) {
  for (auto& [_, p] : store.all()) p->value.setZero();
}

}  // namespace

TEST_CASE("attention pooling") {
  const ModelConfig cfg = small_config();
  auto store = latent_store(cfg);
  TapeD tape;
  Rng rng = make_rng(3, 3);
  SUBCASE("identical rows pool to that row") {
    MatD h = randn_matrix<double>(1, 8, rng).replicate(4, 1);
    CHECK(attn_pool(tape, store, 0, tape.constant(h)).value().isApprox(h.row(0), 1e-12));
  }
  SUBCASE("a single row pools to itself") {
    MatD h = randn_matrix<double>(1, 8, rng);
    CHECK(attn_pool(tape, store, 1, tape.constant(h)).value().isApprox(h, 1e-12));
  }
  SUBCASE("result is a convex combination of the rows") {
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 2 + trial % 3;
      MatD h = randn_matrix<double>(n, 8, rng);
      const MatD e = attn_pool(tape, store, 0, tape.constant(h)).value();
      // Recover the weights by least squares and check they form a distribution.
      const Eigen::VectorXd a = h.transpose().colPivHouseholderQr().solve(e.transpose());
      CHECK((h.transpose() * a - e.transpose()).norm() < 1e-9);
      CHECK(a.sum() == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(a.minCoeff() >= -1e-12);
    }
  }
  SUBCASE("masked rows do not contribute") {
    MatD h = randn_matrix<double>(3, 8, rng);
    std::vector<std::uint8_t> allowed{1, 0, 0};
    CHECK(attn_pool(tape, store, 0, tape.constant(h), std::span<const std::uint8_t>(allowed))
              .value()
              .isApprox(h.row(0), 1e-12));
  }
  SUBCASE("empty input is rejected") {
    CHECK_THROWS(attn_pool(tape, store, 0, tape.constant(MatD::Zero(0, 8))));
  }
}

TEST_CASE("lower-layer aggregation") {
  const ModelConfig cfg = small_config();
  TapeD tape;
  Rng rng = make_rng(5, 5);
  VarD carry = tape.constant(randn_matrix<double>(1, 3, rng));
  VarD prev = tape.constant(randn_matrix<double>(1, 3, rng));
  SUBCASE("zero weights give the bias image") {
    auto store = latent_store(cfg);
    zero_all(store);
    CHECK(aggregate_lower(tape, store, 1, carry, prev).value().isZero());
    store.at("latent.1.agg.fc2.b").value.setConstant(0.25);
    CHECK(aggregate_lower(tape, store, 1, carry, prev).value().isApproxToConstant(0.25));
  }
  SUBCASE("output is bounded by the tanh range through the last layer") {
    auto store = latent_store(cfg);
    const MatD& w = store.at("latent.2.agg.fc2.w").value;
    const MatD& b = store.at("latent.2.agg.fc2.b").value;
    const MatD big = 100.0 * randn_matrix<double>(1, 3, rng);
    const MatD out = aggregate_lower(tape, store, 2, tape.constant(big), tape.constant(-big)).value();
    for (int j = 0; j < 3; ++j) CHECK(std::abs(out(0, j) - b(0, j)) <= w.col(j).cwiseAbs().sum() + 1e-12);
  }
  SUBCASE("gradient reaches both inputs") {
    auto store = latent_store(cfg);
    Rng r = make_rng(9, 9);
    const double err = dior::testing::op_gradient_error(
        {randn_matrix<double>(1, 3, r), randn_matrix<double>(1, 3, r)},
        [&](TapeD& t, const std::vector<VarD>& v) { return aggregate_lower(t, store, 1, v[0], v[1]); }, r);
    CHECK(err < 1e-3);
    TapeD t;
    VarD a = t.variable(randn_matrix<double>(1, 3, r)), b = t.variable(randn_matrix<double>(1, 3, r));
    t.backward(sum(aggregate_lower(t, store, 1, a, b)));
    CHECK(a.grad().norm() > 0);
    CHECK(b.grad().norm() > 0);
  }
}

TEST_CASE("posterior parameters") {
  const ModelConfig cfg = small_config();
  TapeD tape;
  Rng rng = make_rng(6, 6);
  VarD carry = tape.constant(randn_matrix<double>(1, 3, rng));
  VarD ec = tape.constant(randn_matrix<double>(1, 8, rng));
  VarD er = tape.constant(randn_matrix<double>(1, 8, rng));
  SUBCASE("zero weights give the standard normal") {
    auto store = latent_store(cfg);
    zero_all(store);
    auto post = posterior_params(tape, store, cfg, 0, carry, ec, er);
    CHECK(post.mean.value().isZero());
    CHECK(post.log_sigma.value().isZero());
  }
  SUBCASE("log sigma is clamped") {
    auto store = latent_store(cfg);
    zero_all(store);
    store.at("latent.0.post.fc2.b").value.rightCols(3).setConstant(10.0);
    CHECK(posterior_params(tape, store, cfg, 0, carry, ec, er).log_sigma.value().isApproxToConstant(4.0));
    store.at("latent.0.post.fc2.b").value.rightCols(3).setConstant(-20.0);
    CHECK(posterior_params(tape, store, cfg, 0, carry, ec, er).log_sigma.value().isApproxToConstant(-8.0));
  }
  SUBCASE("deterministic") {
    auto store = latent_store(cfg);
    CHECK(posterior_params(tape, store, cfg, 2, carry, ec, er).mean.value() ==
          posterior_params(tape, store, cfg, 2, carry, ec, er).mean.value());
  }
}

TEST_CASE("reparameterisation") {
  TapeD tape;
  Rng rng = make_rng(7, 7);
  MatD mu = randn_matrix<double>(1, 4, rng);
  SUBCASE("tiny sigma returns the mean") {
    Rng r = make_rng(1, 2);
    const MatD eps = randn_matrix<double>(1, 4, r);
    Rng r2 = make_rng(1, 2);
    const MatD z = reparameterize(tape.constant(mu), tape.constant(MatD::Constant(1, 4, -8.0)), r2).value();
    for (int j = 0; j < 4; ++j) CHECK(std::abs(z(0, j) - mu(0, j)) <= 3.4e-4 * std::abs(eps(0, j)) + 1e-15);
  }
  SUBCASE("Monte Carlo mean") {
    const int n = 10000;
    MatD acc = MatD::Zero(1, 4);
    const MatD log_sigma = MatD::Constant(1, 4, std::log(0.5));
    for (int i = 0; i < n; ++i) acc += reparameterize(tape.constant(mu), tape.constant(log_sigma), rng).value();
    const double se = 0.5 / std::sqrt(static_cast<double>(n));
    CHECK(((acc / n) - mu).cwiseAbs().maxCoeff() < 3 * se);
  }
  SUBCASE("unit gradient with respect to the mean") {
    TapeD t;
    VarD m = t.variable(mu);
    VarD ls = t.variable(MatD::Zero(1, 4));
    t.backward(sum(reparameterize(m, ls, rng)));
    CHECK(m.grad().isOnes());
  }
}

TEST_CASE("Gaussian loss terms") {
  TapeD tape;
  const double half_log_2pi_e = 0.5 * (std::log(2 * std::numbers::pi) + 1.0);
  SUBCASE("negative entropy closed form") {
    CHECK(neg_entropy(tape.constant(MatD::Zero(1, 1))).value()(0, 0) == doctest::Approx(-1.41894).epsilon(1e-5));
    CHECK(neg_entropy(tape.constant(MatD::Zero(1, 1))).value()(0, 0) ==
          doctest::Approx(-half_log_2pi_e).epsilon(1e-12));
  }
  SUBCASE("negative entropy matches a Monte Carlo log-density average") {
    Rng rng = make_rng(10, 10);
    const double log_sigma = 0.3;
    const int n = 100000;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const double eps = standard_normal(rng);
      acc += -0.5 * std::log(2 * std::numbers::pi) - log_sigma - 0.5 * eps * eps;
    }
    const double closed = neg_entropy(tape.constant(MatD::Constant(1, 1, log_sigma))).value()(0, 0);
    CHECK(std::abs(acc / n - closed) < 0.01 * std::abs(closed));
  }
  SUBCASE("monotone and additive") {
    const double a = neg_entropy(tape.constant(MatD::Constant(1, 1, 0.1))).value()(0, 0);
    const double b = neg_entropy(tape.constant(MatD::Constant(1, 1, 0.5))).value()(0, 0);
    CHECK(b < a);
    MatD two(1, 2);
    two << 0.1, 0.5;
    CHECK(neg_entropy(tape.constant(two)).value()(0, 0) == doctest::Approx(a + b).epsilon(1e-12));
  }
  SUBCASE("KL closed form") {
    CHECK(gaussian_kl(tape.constant(MatD::Zero(1, 3)), tape.constant(MatD::Zero(1, 3))).value()(0, 0) ==
          doctest::Approx(0.0));
    CHECK(gaussian_kl(tape.constant(MatD::Ones(1, 1)), tape.constant(MatD::Zero(1, 1))).value()(0, 0) ==
          doctest::Approx(0.5));
    Rng rng = make_rng(11, 11);
    for (int i = 0; i < 200; ++i) {
      const MatD m = randn_matrix<double>(1, 5, rng), s = randn_matrix<double>(1, 5, rng);
      CHECK(gaussian_kl(tape.constant(m), tape.constant(s)).value()(0, 0) >= 0.0);
    }
  }
  SUBCASE("KL equals E_q[log q] - E_q[log p] by Monte Carlo") {
    Rng rng = make_rng(12, 12);
    const double mu = 0.7, log_sigma = -0.4, sigma = std::exp(log_sigma);
    const int n = 100000;
    double log_p = 0.0;
    for (int i = 0; i < n; ++i) {
      const double z = mu + sigma * standard_normal(rng);
      log_p += -0.5 * std::log(2 * std::numbers::pi) - 0.5 * z * z;
    }
    const double eq_log_q = neg_entropy(tape.constant(MatD::Constant(1, 1, log_sigma))).value()(0, 0);
    const double mc = eq_log_q - log_p / n;
    const double kl =
        gaussian_kl(tape.constant(MatD::Constant(1, 1, mu)), tape.constant(MatD::Constant(1, 1, log_sigma)))
            .value()(0, 0);
    CHECK(std::abs(mc - kl) < 0.01 * kl);
    const double xent = gaussian_cross_entropy(tape.constant(MatD::Constant(1, 1, mu)),
                                               tape.constant(MatD::Constant(1, 1, log_sigma)))
                            .value()(0, 0);
    CHECK(std::abs(-log_p / n - xent) < 0.01 * xent);
  }
  SUBCASE("negative entropy plus cross-entropy is the KL") {
    Rng rng = make_rng(13, 13);
    for (int i = 0; i < 50; ++i) {
      const MatD m = randn_matrix<double>(1, 4, rng), s = randn_matrix<double>(1, 4, rng);
      const double sum = neg_entropy(tape.constant(s)).value()(0, 0) +
                         gaussian_cross_entropy(tape.constant(m), tape.constant(s)).value()(0, 0);
      CHECK(sum == doctest::Approx(gaussian_kl(tape.constant(m), tape.constant(s)).value()(0, 0)).epsilon(1e-12));
    }
    CHECK(gaussian_cross_entropy(tape.constant(MatD::Zero(1, 2)), tape.constant(MatD::Zero(1, 2))).value()(0, 0) ==
          doctest::Approx(2 * half_log_2pi_e));
  }
}

TEST_CASE("posterior stack gradients") {
  const ModelConfig cfg = small_config();
  auto store = latent_store(cfg, 4);
  Rng data = make_rng(13, 13);
  const MatD hc = randn_matrix<double>(4, 8, data), hr = randn_matrix<double>(3, 8, data);
  auto results = dior::testing::parameter_gradient_check(store, [&](TapeD& tape) {
    Rng rng = make_rng(14, 14);
    VarD carry = tape.constant(MatD::Zero(1, 3));
    VarD total = tape.constant(MatD::Zero(1, 1));
    VarD z;
    for (int l = 0; l < cfg.layers; ++l) {
      VarD ec = attn_pool(tape, store, l, tape.constant(hc));
      VarD er = attn_pool(tape, store, l, tape.constant(hr));
      if (l > 0) carry = aggregate_lower(tape, store, l, carry, z);
      auto post = posterior_params(tape, store, cfg, l, carry, ec, er);
      z = reparameterize(post.mean, post.log_sigma, rng);
      total = add(total, add(sum_squares(z), add(neg_entropy(post.log_sigma), add(gaussian_kl(post.mean, post.log_sigma), gaussian_cross_entropy(post.mean, post.log_sigma)))));
    }
    return total;
  });
  for (const auto& r : results) {
    INFO(r.name << " worst " << r.worst);
    CHECK(r.passed == r.entries);
  }
}
