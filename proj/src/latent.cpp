#include "dior/latent.hpp"

#include <cmath>
#include <numbers>

namespace dior {

template <typename S>
void init_latent(ParameterStore<S>& store, const ModelConfig& cfg, Rng& rng) {
  const int d = cfg.width;
  const int dz = cfg.latent_dim;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "latent." + std::to_string(l);
    store.add(p + ".pool.q", normal_init<S>(1, d, 0.02, rng));
    if (l > 0) {
      add_linear(store, p + ".agg.carry", dz, dz, rng);
      add_linear(store, p + ".agg.prev", dz, dz, rng);
      add_linear(store, p + ".agg.fc1", 2 * dz, d, rng);
      add_linear(store, p + ".agg.fc2", d, dz, rng);
    }
    add_linear(store, p + ".post.fc1", dz + 2 * d, d, rng);
    add_linear(store, p + ".post.fc2", d, 2 * dz, rng);
  }
}

template <typename S>
Var<S> attn_pool(Tape<S>& tape, const ParameterStore<S>& store, int layer, Var<S> hidden,
                 std::span<const std::uint8_t> allowed) {
  if (hidden.rows() < 1) throw std::invalid_argument("attn_pool: empty hidden states");
  Var<S> query = tape.param(store.at("latent." + std::to_string(layer) + ".pool.q"));
  if (query.cols() != hidden.cols()) {
    throw ShapeError("attn_pool: query " + shape_string(query.rows(), query.cols()) +
                     " does not match hidden " + shape_string(hidden.rows(), hidden.cols()));
  }
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hidden.cols()));
  Var<S> scores = scale(matmul_nt(query, hidden), inv_sqrt);  // 1 x N
  return matmul(softmax(scores, allowed), hidden);
}

template <typename S>
Var<S> aggregate_lower(Tape<S>& tape, const ParameterStore<S>& store, int layer, Var<S> carry_prev,
                       Var<S> z_prev) {
  const std::string p = "latent." + std::to_string(layer) + ".agg";
  Var<S> joined = concat_cols<S>({linear(tape, store, p + ".carry", carry_prev),
                                  linear(tape, store, p + ".prev", z_prev)});
  return linear(tape, store, p + ".fc2", tanh(linear(tape, store, p + ".fc1", joined)));
}

template <typename S>
Posterior<S> posterior_params(Tape<S>& tape, const ParameterStore<S>& store, const ModelConfig& cfg,
                              int layer, Var<S> carry, Var<S> context_summary,
                              Var<S> response_summary) {
  const std::string p = "latent." + std::to_string(layer) + ".post";
  Var<S> input = concat_cols<S>({carry, context_summary, response_summary});
  Var<S> out = linear(tape, store, p + ".fc2", tanh(linear(tape, store, p + ".fc1", input)));
  const Eigen::Index dz = cfg.latent_dim;
  return {slice_cols(out, 0, dz),
          clamp(slice_cols(out, dz, dz), static_cast<S>(kLogSigmaMin), static_cast<S>(kLogSigmaMax))};
}

template <typename S>
Var<S> reparameterize(Var<S> mean, Var<S> log_sigma, Rng& rng) {
  if (mean.rows() != log_sigma.rows() || mean.cols() != log_sigma.cols()) {
    throw ShapeError("reparameterize: mean " + shape_string(mean.rows(), mean.cols()) +
                     " vs log_sigma " + shape_string(log_sigma.rows(), log_sigma.cols()));
  }
  Var<S> eps = randn(mean.tape(), mean.rows(), mean.cols(), rng);
  return add(mean, mul(exp(log_sigma), eps));
}

template <typename S>
Var<S> neg_entropy(Var<S> log_sigma) {
  const S per_dim = static_cast<S>(-0.5 * (std::log(2.0 * std::numbers::pi) + 1.0));
  return add_scalar(scale(sum(log_sigma), S(-1)), per_dim * static_cast<S>(log_sigma.size()));
}

template <typename S>
Var<S> gaussian_cross_entropy(Var<S> mean, Var<S> log_sigma) {
  const S per_dim = static_cast<S>(0.5 * std::log(2.0 * std::numbers::pi));
  Var<S> squares = add(sum_squares(mean), sum(exp(scale(log_sigma, S(2)))));
  return add_scalar(scale(squares, S(0.5)), per_dim * static_cast<S>(mean.size()));
}

template <typename S>
Var<S> gaussian_kl(Var<S> mean, Var<S> log_sigma) {
  // 0.5 * (mu^2 + sigma^2 - 1 - 2 log sigma)
  Var<S> variance = exp(scale(log_sigma, S(2)));
  Var<S> total = sub(add(sum_squares(mean), sum(variance)), scale(sum(log_sigma), S(2)));
  return scale(add_scalar(total, -static_cast<S>(mean.size())), S(0.5));
}

#define DIOR_INSTANTIATE_LATENT(S)                                                                 \
  template void init_latent(ParameterStore<S>&, const ModelConfig&, Rng&);                         \
  template Var<S> attn_pool(Tape<S>&, const ParameterStore<S>&, int, Var<S>,                       \
                            std::span<const std::uint8_t>);                                        \
  template Var<S> aggregate_lower(Tape<S>&, const ParameterStore<S>&, int, Var<S>, Var<S>);        \
  template Posterior<S> posterior_params(Tape<S>&, const ParameterStore<S>&, const ModelConfig&,   \
                                         int, Var<S>, Var<S>, Var<S>);                             \
  template Var<S> reparameterize(Var<S>, Var<S>, Rng&);                                            \
  template Var<S> neg_entropy(Var<S>);                                                             \
  template Var<S> gaussian_cross_entropy(Var<S>, Var<S>);                                          \
  template Var<S> gaussian_kl(Var<S>, Var<S>);

DIOR_INSTANTIATE_LATENT(float)
DIOR_INSTANTIATE_LATENT(double)

#undef DIOR_INSTANTIATE_LATENT

}  // namespace dior
