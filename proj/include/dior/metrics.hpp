#pragma once

// Corpus metrics over token sequences: BLEU-n, inter-Distinct-n, Entropy-n,
// unigram-cosine self-similarity, perplexity helpers, and the report record.

#include <map>
#include <string>
#include <vector>

namespace dior {

using Sequence = std::vector<int>;

struct BleuResult {
  double score = 0.0;
  std::vector<double> precisions;  // modified precision per order 1..n
  std::vector<bool> smoothed;      // true where a zero precision was replaced by epsilon
  double brevity_penalty = 0.0;
  long candidate_length = 0;
  long reference_length = 0;       // sum of closest reference lengths
};

inline constexpr double kBleuEpsilon = 1e-9;

/// Corpus BLEU with uniform weights, clipped counts, and the closest
/// reference length (shorter on ties) for the brevity penalty.
BleuResult bleu(const std::vector<Sequence>& candidates,
                const std::vector<std::vector<Sequence>>& references, int n);

/// Unique n-grams over total n-grams, pooled across all responses.
double distinct_n(const std::vector<Sequence>& responses, int n);

/// Entropy (nats) of one response's n-gram distribution; 0 if it has no n-gram.
double entropy_n(const Sequence& response, int n);
/// Mean of entropy_n over responses; short responses count as 0.
double mean_entropy_n(const std::vector<Sequence>& responses, int n);

/// Mean cosine similarity of unigram count vectors over all unordered pairs.
double pairwise_similarity(const std::vector<Sequence>& responses);

/// exp(nll / tokens).
double perplexity(double total_nll, long tokens);

/// Generated tokens per second; rejects zero tokens or non-positive time.
double tokens_per_second(long tokens, double seconds);

struct MetricReport {
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double distinct1 = 0.0;
  double distinct2 = 0.0;
  double entropy1 = 0.0;
  double entropy2 = 0.0;
  double entropy3 = 0.0;
  std::vector<double> perplexity_by_refs;  // index k-1 holds the k-reference average
  double similarity = 0.0;
  double tokens_per_sec = 0.0;
  std::map<std::string, std::string> info;  // run descriptors (prior mode, seed, ...)

  /// "key = value" lines, keys sorted.
  std::string to_key_value() const;
  /// Single-line JSON object with the same keys.
  std::string to_json() const;
};

}  // namespace dior
