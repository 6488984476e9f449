#pragma once

// Transformer encoder-decoder with per-layer latent infusion.
//
// Decoder layer l attends over [P_self(z^l); H_dec] in self-attention and over
// [P_cross(z^l); memory] in cross-attention, where memory is the final encoder
// layer's output. The latent prefix is key/value only: it emits no logit and
// carries no positional embedding.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dior/params.hpp"
#include "dior/tensor.hpp"

namespace dior {

struct ModelConfig {
  int layers = 4;
  int width = 64;
  int heads = 4;
  int latent_dim = 16;
  int vocab_size = 0;
  int max_len = 128;
  int ffn_mult = 4;

  int diffusion_dim() const { return layers * latent_dim; }
  int condition_dim() const { return layers * width; }
};

void validate(const ModelConfig& cfg);

template <typename S>
void init_backbone(ParameterStore<S>& store, const ModelConfig& cfg, Rng& rng);

/// Final-layer encoder states plus the positions cross-attention may read.
template <typename S>
struct Memory {
  Var<S> states;
  std::vector<std::uint8_t> keep;
};

template <typename S>
struct EncoderOutputs {
  std::vector<Var<S>> layers;          // H^{Enc_l}, l = 1..L, each N x d
  std::vector<std::uint8_t> non_pad;   // 1 where the input token is not PAD

  Memory<S> memory() const { return {layers.back(), non_pad}; }
};

/// Rejects inputs longer than max_len, out-of-vocab ids, and all-PAD inputs.
template <typename S>
EncoderOutputs<S> encode(Tape<S>& tape, const ParameterStore<S>& store, const ModelConfig& cfg,
                         std::span<const int> ids);

/// Drops whole memory rows with probability `rate`, scaling survivors by
/// 1/(1-rate). Dropped rows are zeroed and removed from `keep`.
template <typename S>
Memory<S> memdrop(const Memory<S>& memory, double rate, Rng& rng);

enum class DecodeMode { kTrain, kInfer };

/// Logits for every target position (rows = target_prefix.size()).
/// Memory dropout is applied only in train mode.
template <typename S>
Var<S> decode(Tape<S>& tape, const ParameterStore<S>& store, const ModelConfig& cfg,
              const std::vector<Var<S>>& latents, const Memory<S>& memory,
              std::span<const int> target_prefix, DecodeMode mode = DecodeMode::kInfer,
              double memdrop_rate = 0.0, Rng* rng = nullptr);

// ---- generation -----------------------------------------------------------

enum class DecodeStrategy { kGreedy, kBeam, kNucleus };

std::string to_string(DecodeStrategy s);
DecodeStrategy parse_strategy(const std::string& name);

struct GenerationParams {
  DecodeStrategy strategy = DecodeStrategy::kGreedy;
  int beam_width = 5;
  int top_k = 50;
  double top_p = 0.9;
  int max_new_tokens = 32;
  int num_samples = 1;
  double guidance = 0.0;  // classifier-free guidance weight w
  int steps = 0;          // diffusion steps; 0 = the schedule's T
  std::uint64_t seed = 1234;
};

void validate(const GenerationParams& params);

/// Next-token logits given the tokens emitted so far (BOS first).
using StepLogits = std::function<Eigen::VectorXd(std::span<const int> prefix)>;

/// Runs a decoding strategy over an arbitrary step function. Returned
/// sequences exclude BOS and the terminating EOS.
std::vector<std::vector<int>> decode_sequences(const StepLogits& step, const GenerationParams& params,
                                               int bos, int eos, Rng& rng);

/// Plain-value memory for inference paths that build short-lived tapes.
template <typename S>
struct MemoryValues {
  Mat<S> states;
  std::vector<std::uint8_t> keep;
};

template <typename S>
std::vector<std::vector<int>> generate(const ParameterStore<S>& store, const ModelConfig& cfg,
                                       const std::vector<RowVec<S>>& latents,
                                       const MemoryValues<S>& memory, const GenerationParams& params,
                                       Rng& rng);

}  // namespace dior
