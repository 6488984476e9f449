#pragma once

// Optimisation loop: Adam with warmup then inverse-sqrt decay, linear KL
// annealing, global-norm clipping, and NaN-safe steps.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "dior/model.hpp"

namespace dior {

struct TrainConfig {
  double lr = 5e-4;
  int warmup_steps = 500;
  int total_steps = 2000;
  int anneal_steps = 500;
  double label_smoothing = 0.1;
  double memdrop_rate = 0.7;
  int batch_size = 8;  // sentence pairs per step (fixed-count stand-in for token budgets)
  std::uint64_t seed = 1234;
  RegWeight reg_weight = RegWeight::kUnit;
  bool detach_prior_input = false;
  double clip_norm = 1.0;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
};

void validate(const TrainConfig& cfg);

/// 0 at step 0, rising linearly to 1 at anneal_steps.
double anneal_weight(int step, int anneal_steps);
/// lr * min((step + 1) / warmup, sqrt(warmup / (step + 1))).
double learning_rate(int step, const TrainConfig& cfg);

struct TrainPair {
  std::vector<int> context;   // formatted context ids
  std::vector<int> response;  // response ids without BOS/EOS
};

struct StepReport {
  int step = 0;
  PriorMode mode = PriorMode::kDiffusion;
  double reconstruction = 0.0;
  double neg_entropy = 0.0;
  double prior_term = 0.0;  // L_reg in diffusion mode, cross-entropy to N(0, I) in gaussian mode
  double total = 0.0;
  double anneal = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double tokens_per_sec = 0.0;
  long tokens = 0;
  bool aborted = false;

  /// The prior term is written as "reg", or as "xent" plus the full "kl" in gaussian mode.
  std::string to_json() const;
};

template <typename S>
struct AdamState {
  std::map<std::string, Mat<S>> m;
  std::map<std::string, Mat<S>> v;
  long t = 0;
};

/// Adam (0.9, 0.999, 1e-8) on the accumulated gradients scaled by
/// `grad_scale`. Missing moments start at zero.
template <typename S>
void adam_update(ParameterStore<S>& params, AdamState<S>& adam, double lr, double grad_scale = 1.0);

template <typename S>
class Trainer {
 public:
  Trainer(DiorCvae<S> model, TrainConfig config);

  /// One optimiser step on `batch` (losses averaged over the batch).
  StepReport step(std::span<const TrainPair> batch);
  /// Draws a batch uniformly with replacement and steps.
  StepReport step(const std::vector<TrainPair>& data);

  int step_index() const { return step_; }
  const TrainConfig& config() const { return config_; }
  DiorCvae<S>& model() { return model_; }
  const DiorCvae<S>& model() const { return model_; }
  AdamState<S>& adam() { return adam_; }
  const AdamState<S>& adam() const { return adam_; }

  /// Step counter and RNG states, for checkpoints.
  std::map<std::string, std::string> state() const;
  void restore(const std::map<std::string, std::string>& state);

 private:
  DiorCvae<S> model_;
  TrainConfig config_;
  AdamState<S> adam_;
  int step_ = 0;
  Rng rng_;        // posterior noise and memory dropout
  Rng prior_rng_;  // diffusion timestep, noise, and condition drop
  Rng data_rng_;   // batch selection
};

}  // namespace dior
