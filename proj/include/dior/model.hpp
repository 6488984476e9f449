#pragma once

// The full conditional VAE: backbone, hierarchical posterior, and a prior that
// is either the latent diffusion model or an isotropic Gaussian (ablation).

#include <span>
#include <string>
#include <vector>

#include "dior/backbone.hpp"
#include "dior/diffusion.hpp"
#include "dior/latent.hpp"

namespace dior {

enum class PriorMode { kDiffusion, kGaussian };

std::string to_string(PriorMode m);
PriorMode parse_prior_mode(const std::string& name);

struct PriorConfig {
  PriorMode mode = PriorMode::kDiffusion;
  int steps = 50;
  double beta_first = 5e-6;
  double beta_last = 1e-3;
  double cond_drop = 0.1;
  SamplerNoise noise = SamplerNoise::kDeterministic;
  int denoiser_hidden = 0;  // 0 selects layers * width
  bool terminal_kl = false; // add KL(q(z_T | z0) || N(0, I)) to the prior term
};

template <typename S>
class DiorCvae {
 public:
  DiorCvae() = default;
  DiorCvae(ModelConfig model, PriorConfig prior, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const PriorConfig& prior() const { return prior_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  DenoiserShape denoiser_shape() const;

  ParameterStore<S>& params() { return params_; }
  const ParameterStore<S>& params() const { return params_; }

  /// Rebuilds around existing parameters (checkpoint load, precision casts).
  static DiorCvae from_parameters(ModelConfig model, PriorConfig prior, ParameterStore<S> params);

 private:
  ModelConfig config_;
  PriorConfig prior_;
  NoiseSchedule schedule_;
  ParameterStore<S> params_;
};

struct TrainOptions {
  double memdrop_rate = 0.7;
  double label_smoothing = 0.1;
  double anneal = 1.0;
  RegWeight reg_weight = RegWeight::kUnit;
  bool detach_prior_input = false;
};

template <typename S>
struct TrainTerms {
  Var<S> reconstruction;  // L_RC
  Var<S> neg_entropy;     // L_neg-xent
  Var<S> prior_term;      // L_reg (diffusion) or cross-entropy to N(0, I) (gaussian)
  Var<S> total;           // L_RC + anneal * (neg_entropy + prior_term)
  int timestep = 0;
  bool condition_dropped = false;
  int target_tokens = 0;
};

/// One example's training graph. `rng` drives posterior noise and memory
/// dropout; `prior_rng` drives timestep, diffusion noise, and condition drop,
/// so both prior modes consume `rng` identically.
template <typename S>
TrainTerms<S> forward_train(Tape<S>& tape, const DiorCvae<S>& model, std::span<const int> context,
                            std::span<const int> response, const TrainOptions& options, Rng& rng,
                            Rng& prior_rng);

/// Encoder pass for inference: per-layer pooled summaries and final memory.
template <typename S>
struct ContextEncoding {
  Eigen::RowVectorXd condition;  // [e_c^1 ... e_c^L]
  MemoryValues<S> memory;
};

template <typename S>
ContextEncoding<S> encode_context(const DiorCvae<S>& model, std::span<const int> context);

/// Draws z = [z^1 ... z^L] from the prior and splits it per layer.
template <typename S>
std::vector<RowVec<S>> sample_latents(const DiorCvae<S>& model, const ContextEncoding<S>& encoding,
                                      double guidance, int steps, Rng& rng);

template <typename S>
std::vector<RowVec<S>> split_latent(const DiorCvae<S>& model, const Eigen::RowVectorXd& z);

/// num_samples responses, each decoded from its own prior draw.
template <typename S>
std::vector<std::vector<int>> respond(const DiorCvae<S>& model, std::span<const int> context,
                                      const GenerationParams& params, Rng& rng);

/// log p(response + EOS | z, context) under teacher forcing, summed over tokens.
template <typename S>
double response_log_likelihood(const DiorCvae<S>& model, const ContextEncoding<S>& encoding,
                               const std::vector<RowVec<S>>& latents, std::span<const int> response);

}  // namespace dior
