#include "dior/evaluate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace dior {

std::vector<TrainPair> to_train_pairs(const std::vector<DialogExample>& examples, int max_len) {
  std::vector<TrainPair> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    TrainPair p;
    p.context = format_context(ex, max_len).ids;
    p.response = ex.response;
    // The decoder sees BOS + response and predicts response + EOS.
    if (static_cast<int>(p.response.size()) + 1 > max_len) p.response.resize(static_cast<std::size_t>(max_len - 1));
    out.push_back(std::move(p));
  }
  return out;
}

template <typename S>
double reference_perplexity(const DiorCvae<S>& model, const ContextEncoding<S>& encoding,
                            const std::vector<std::vector<RowVec<S>>>& draws, const Sequence& reference) {
  if (draws.empty()) throw std::invalid_argument("perplexity: needs at least one prior draw");
  std::vector<double> ll;
  for (const auto& z : draws) ll.push_back(response_log_likelihood(model, encoding, z, std::span<const int>(reference)));
  const double top = *std::max_element(ll.begin(), ll.end());
  double acc = 0.0;
  for (double v : ll) acc += std::exp(v - top);
  const double log_mean = top + std::log(acc / static_cast<double>(ll.size()));
  return perplexity(-log_mean, static_cast<long>(reference.size()) + 1);
}

template <typename S>
EvalResult evaluate(const DiorCvae<S>& model, const std::vector<DialogExample>& examples,
                    const EvalOptions& options) {
  if (examples.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
  if (options.samples < 1) throw std::invalid_argument("evaluate: samples must be >= 1");
  if (options.perplexity && options.perplexity_draws < 1) {
    throw std::invalid_argument("evaluate: perplexity_draws must be >= 1");
  }
  const std::size_t count = options.max_contexts > 0
                                ? std::min(examples.size(), static_cast<std::size_t>(options.max_contexts))
                                : examples.size();
  Rng rng = make_rng(options.seed, 11);
  Rng ppl_rng = make_rng(options.seed, 12);
  GenerationParams gen = options.generation;
  gen.num_samples = options.samples;

  EvalResult out;
  std::vector<Sequence> candidates, pooled;
  std::vector<std::vector<Sequence>> references;
  std::vector<double> ppl_sum(static_cast<std::size_t>(options.max_refs), 0.0);
  std::vector<long> ppl_n(static_cast<std::size_t>(options.max_refs), 0);
  double similarity = 0.0;
  long similarity_n = 0;
  double gen_seconds = 0.0;

  for (std::size_t i = 0; i < count; ++i) {
    const DialogExample& ex = examples[i];
    const std::vector<int> context = format_context(ex, model.config().max_len).ids;
    std::vector<Sequence> refs = ex.references.empty() ? std::vector<Sequence>{ex.response} : ex.references;

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Sequence> samples = respond(model, std::span<const int>(context), gen, rng);
    gen_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    for (const auto& s : samples) {
      candidates.push_back(s);
      references.push_back(refs);
      pooled.push_back(s);
      out.generated_tokens += static_cast<long>(s.size());
    }
    if (samples.size() >= 2) {
      similarity += pairwise_similarity(samples);
      ++similarity_n;
    }

    if (options.perplexity) {
      const ContextEncoding<S> enc = encode_context(model, std::span<const int>(context));
      std::vector<std::vector<RowVec<S>>> draws;
      for (int k = 0; k < options.perplexity_draws; ++k) {
        draws.push_back(sample_latents(model, enc, gen.guidance, gen.steps, ppl_rng));
      }
      const std::size_t usable = std::min(refs.size(), static_cast<std::size_t>(options.max_refs));
      std::vector<double> per_ref;
      for (std::size_t r = 0; r < usable; ++r) per_ref.push_back(reference_perplexity(model, enc, draws, refs[r]));
      double running = 0.0;
      for (std::size_t k = 0; k < usable; ++k) {
        running += per_ref[k];
        ppl_sum[k] += running / static_cast<double>(k + 1);
        ++ppl_n[k];
      }
    }
    out.samples.push_back(std::move(samples));
  }

  MetricReport& rep = out.report;
  rep.bleu1 = bleu(candidates, references, 1).score;
  rep.bleu2 = bleu(candidates, references, 2).score;
  auto safe_distinct = [&](int n) {
    try {
      return distinct_n(pooled, n);
    } catch (const std::invalid_argument&) {
      return 0.0;  // nothing of that order was generated
    }
  };
  rep.distinct1 = safe_distinct(1);
  rep.distinct2 = safe_distinct(2);
  rep.entropy1 = mean_entropy_n(pooled, 1);
  rep.entropy2 = mean_entropy_n(pooled, 2);
  rep.entropy3 = mean_entropy_n(pooled, 3);
  for (std::size_t k = 0; k < ppl_sum.size(); ++k) {
    if (ppl_n[k] > 0) rep.perplexity_by_refs.push_back(ppl_sum[k] / static_cast<double>(ppl_n[k]));
  }
  rep.similarity = similarity_n > 0 ? similarity / static_cast<double>(similarity_n) : 1.0;
  rep.tokens_per_sec = out.generated_tokens > 0 && gen_seconds > 0.0
                           ? tokens_per_second(out.generated_tokens, gen_seconds)
                           : 0.0;
  out.seconds = gen_seconds;
  rep.info["prior"] = to_string(model.prior().mode);
  rep.info["contexts"] = std::to_string(count);
  rep.info["samples"] = std::to_string(options.samples);
  rep.info["strategy"] = to_string(gen.strategy);
  rep.info["seed"] = std::to_string(options.seed);
  return out;
}

template <typename S>
Throughput measure_throughput(const DiorCvae<S>& model, const std::vector<std::vector<int>>& contexts,
                              const GenerationParams& params, long min_tokens) {
  if (contexts.empty()) throw std::invalid_argument("throughput: no contexts");
  Rng rng = make_rng(params.seed, 13);
  Throughput out;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; out.tokens < min_tokens; ++i) {
    const auto& ctx = contexts[i % contexts.size()];
    for (const auto& s : respond(model, std::span<const int>(ctx), params, rng)) {
      out.tokens += static_cast<long>(s.size());
    }
    if (i >= contexts.size() * 50 && out.tokens == 0) break;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.tokens_per_sec = tokens_per_second(out.tokens, out.seconds);
  return out;
}

#define DIOR_INSTANTIATE_EVAL(S)                                                                     \
  template EvalResult evaluate(const DiorCvae<S>&, const std::vector<DialogExample>&, const EvalOptions&); \
  template double reference_perplexity(const DiorCvae<S>&, const ContextEncoding<S>&,                 \
                                       const std::vector<std::vector<RowVec<S>>>&, const Sequence&);  \
  template Throughput measure_throughput(const DiorCvae<S>&, const std::vector<std::vector<int>>&,    \
                                         const GenerationParams&, long);

DIOR_INSTANTIATE_EVAL(float)
DIOR_INSTANTIATE_EVAL(double)

#undef DIOR_INSTANTIATE_EVAL

}  // namespace dior
