#pragma once

// Held-out evaluation: sampling, corpus metrics, multi-reference perplexity
// under prior draws, and generation throughput.

#include <vector>

#include "dior/corpus.hpp"
#include "dior/metrics.hpp"
#include "dior/model.hpp"
#include "dior/trainer.hpp"

namespace dior {

/// Formats contexts (left-truncated to max_len) and pairs them with responses.
std::vector<TrainPair> to_train_pairs(const std::vector<DialogExample>& examples, int max_len);

struct EvalOptions {
  int samples = 5;  // responses per context
  GenerationParams generation;
  int perplexity_draws = 8;
  int max_refs = 5;
  int max_contexts = 0;  // 0 evaluates every context
  bool perplexity = true;
  std::uint64_t seed = 1234;
};

struct EvalResult {
  MetricReport report;
  std::vector<std::vector<Sequence>> samples;  // per context
  long generated_tokens = 0;
  double seconds = 0.0;
};

template <typename S>
EvalResult evaluate(const DiorCvae<S>& model, const std::vector<DialogExample>& examples,
                    const EvalOptions& options);

/// Perplexity of `reference` with z marginalised over `draws` prior samples:
/// exp(-log(mean_k p(ref | z_k, c)) / tokens), tokens counting the end token.
template <typename S>
double reference_perplexity(const DiorCvae<S>& model, const ContextEncoding<S>& encoding,
                            const std::vector<std::vector<RowVec<S>>>& draws, const Sequence& reference);

struct Throughput {
  long tokens = 0;
  double seconds = 0.0;
  double tokens_per_sec = 0.0;
};

/// Generates for the given contexts in round-robin until at least `min_tokens`
/// tokens have been produced. Prior sampling is included in the timing.
template <typename S>
Throughput measure_throughput(const DiorCvae<S>& model, const std::vector<std::vector<int>>& contexts,
                              const GenerationParams& params, long min_tokens = 500);

}  // namespace dior
