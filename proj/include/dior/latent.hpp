#pragma once

// Hierarchical posterior q(z^l | z^{<l}, r, c): attention pooling of encoder
// layers, aggregation of lower-layer latents, Gaussian parameter heads, and
// the closed-form Gaussian terms of the training objective.

#include <cstdint>
#include <span>

#include "dior/backbone.hpp"

namespace dior {

inline constexpr double kLogSigmaMin = -8.0;
inline constexpr double kLogSigmaMax = 4.0;

template <typename S>
void init_latent(ParameterStore<S>& store, const ModelConfig& cfg, Rng& rng);

/// e = sum_i a_i h_i with a = softmax(H q_l / sqrt(d)); rows with allowed == 0
/// are excluded. The query q_l is shared by the context and response streams.
template <typename S>
Var<S> attn_pool(Tape<S>& tape, const ParameterStore<S>& store, int layer, Var<S> hidden,
                 std::span<const std::uint8_t> allowed = {});

/// z^{<l} from z^{<l-1} and z^{l-1}; defined for layer >= 1 (0-based).
template <typename S>
Var<S> aggregate_lower(Tape<S>& tape, const ParameterStore<S>& store, int layer, Var<S> carry_prev,
                       Var<S> z_prev);

template <typename S>
struct Posterior {
  Var<S> mean;
  Var<S> log_sigma;  // clamped to [kLogSigmaMin, kLogSigmaMax]
};

template <typename S>
Posterior<S> posterior_params(Tape<S>& tape, const ParameterStore<S>& store, const ModelConfig& cfg,
                              int layer, Var<S> carry, Var<S> context_summary,
                              Var<S> response_summary);

/// z = mean + exp(log_sigma) * eps, eps ~ N(0, I).
template <typename S>
Var<S> reparameterize(Var<S> mean, Var<S> log_sigma, Rng& rng);

/// E_q[log q(z)] of a diagonal Gaussian: sum -0.5 (log 2pi + 1 + 2 log sigma).
template <typename S>
Var<S> neg_entropy(Var<S> log_sigma);

/// -E_q[log N(z; 0, I)]: sum 0.5 (mean^2 + sigma^2 + log 2pi). Together with
/// neg_entropy this is the KL to the standard normal.
template <typename S>
Var<S> gaussian_cross_entropy(Var<S> mean, Var<S> log_sigma);

/// KL(N(mean, sigma^2) || N(0, I)), summed over dimensions.
template <typename S>
Var<S> gaussian_kl(Var<S> mean, Var<S> log_sigma);

}  // namespace dior
