#pragma once

// Conditional latent diffusion prior with classifier-free guidance.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dior/params.hpp"
#include "dior/tensor.hpp"

namespace dior {

enum class SamplerNoise { kDeterministic, kStochastic };

struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;       // beta[t], t = 1..T; beta[0] = 0
  std::vector<double> alpha_bar;  // alpha_bar[t] = prod_{i<=t} (1 - beta_i); alpha_bar[0] = 1
  std::vector<double> sigma;      // per-step sampler std, t = 1..T
  SamplerNoise noise = SamplerNoise::kDeterministic;
  double cond_drop = 0.1;         // eta: probability of training on the zero condition

  /// Sampler std for a jump from t to t_prev (< t).
  double transition_sigma(int t, int t_prev) const;
  /// alpha_bar_T / (1 - alpha_bar_T): how much signal survives at the last step.
  double terminal_snr() const;
};

/// Linear beta from beta_first (t = 1) to beta_last (t = T).
NoiseSchedule build_schedule(int steps, double beta_first, double beta_last,
                             SamplerNoise noise = SamplerNoise::kDeterministic, double cond_drop = 0.1);

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
Eigen::RowVectorXd forward_noise(const Eigen::RowVectorXd& z0, int t, const NoiseSchedule& schedule,
                                 Rng& rng);

template <typename S>
Var<S> forward_noise(Var<S> z0, int t, const NoiseSchedule& schedule, Rng& rng);

/// Sinusoidal timestep embedding with base 10000.
Eigen::RowVectorXd time_embedding(int t, int width);

struct DenoiserShape {
  int condition_dim = 0;
  int latent_dim = 0;
  int hidden = 0;
};

template <typename S>
void init_denoiser(ParameterStore<S>& store, const DenoiserShape& shape, Rng& rng,
                   const std::string& prefix = "denoiser");

/// z0_hat = FNN(Linear([pe(t) + cond ; z_t])).
template <typename S>
Var<S> denoise(Tape<S>& tape, const ParameterStore<S>& store, const DenoiserShape& shape, Var<S> cond,
               int t, Var<S> z_t, const std::string& prefix = "denoiser");

using DenoiseFn =
    std::function<Eigen::RowVectorXd(const Eigen::RowVectorXd& cond, int t, const Eigen::RowVectorXd& z_t)>;

/// Wraps a trained denoiser as a forward-only function.
template <typename S>
DenoiseFn denoiser_fn(const ParameterStore<S>& store, const DenoiserShape& shape,
                      const std::string& prefix = "denoiser");

/// (1 + w) f(cond, t, z_t) - w f(0, t, z_t).
Eigen::RowVectorXd cfg_predict(const DenoiseFn& f, const Eigen::RowVectorXd& cond, int t,
                               const Eigen::RowVectorXd& z_t, double w);

/// Reverse process from z_T ~ N(0, I). With `steps` < T the sampler visits a
/// strided subset of timesteps ending at T; steps == T (or 0) visits every t.
Eigen::RowVectorXd sample_prior(const DenoiseFn& f, const Eigen::RowVectorXd& cond, int latent_dim,
                                const NoiseSchedule& schedule, double w, Rng& rng, int steps = 0,
                                std::optional<Eigen::RowVectorXd> z_start = std::nullopt);

/// Timesteps visited by the sampler, ascending; last entry is T.
std::vector<int> sampling_timesteps(int schedule_steps, int steps);

enum class RegWeight { kUnit, kLiteral };

std::string to_string(RegWeight w);
RegWeight parse_reg_weight(const std::string& name);

template <typename S>
struct RegLoss {
  Var<S> loss;
  int t = 0;
  bool condition_dropped = false;
};

/// weight(t) * || f(cond or 0, t, z_t) - z0 ||^2 with t ~ U{1..T} and the
/// condition zeroed with probability schedule.cond_drop.
template <typename S>
RegLoss<S> reg_loss(Tape<S>& tape, const ParameterStore<S>& store, const DenoiserShape& shape,
                    Var<S> z0, Var<S> cond, const NoiseSchedule& schedule, RegWeight weight, Rng& rng,
                    const std::string& prefix = "denoiser");

/// KL(q(z_T | z0) || N(0, I)) for a sampled z0: the prior-matching term of
/// the diffusion bound. It carries gradient only because z0 is learned.
template <typename S>
Var<S> terminal_kl(Var<S> z0, const NoiseSchedule& schedule);

}  // namespace dior
