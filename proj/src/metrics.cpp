#include "dior/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dior {

namespace {

using NGramCounts = std::map<Sequence, long>;

NGramCounts ngrams(const Sequence& s, int n) {
  NGramCounts out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) {
    ++out[Sequence(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i) + n)];
  }
  return out;
}

void require_order(int n, const char* what) {
  if (n < 1) throw std::invalid_argument(std::string(what) + ": n must be >= 1");
}

}  // namespace

BleuResult bleu(const std::vector<Sequence>& candidates,
                const std::vector<std::vector<Sequence>>& references, int n) {
  require_order(n, "bleu");
  if (candidates.empty()) throw std::invalid_argument("bleu: empty candidate set");
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("bleu: " + std::to_string(candidates.size()) + " candidates but " +
                                std::to_string(references.size()) + " reference sets");
  }
  std::vector<long> clipped(static_cast<std::size_t>(n), 0), total(static_cast<std::size_t>(n), 0);
  BleuResult out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Sequence& cand = candidates[i];
    const auto& refs = references[i];
    if (refs.empty()) throw std::invalid_argument("bleu: candidate " + std::to_string(i) + " has no reference");
    const long c = static_cast<long>(cand.size());
    long best = static_cast<long>(refs.front().size());
    for (const auto& r : refs) {
      const long len = static_cast<long>(r.size());
      if (std::abs(len - c) < std::abs(best - c) || (std::abs(len - c) == std::abs(best - c) && len < best)) {
        best = len;
      }
    }
    out.candidate_length += c;
    out.reference_length += best;
    for (int k = 1; k <= n; ++k) {
      NGramCounts max_ref;
      for (const auto& r : refs) {
        for (const auto& [g, cnt] : ngrams(r, k)) max_ref[g] = std::max(max_ref[g], cnt);
      }
      for (const auto& [g, cnt] : ngrams(cand, k)) {
        auto it = max_ref.find(g);
        clipped[static_cast<std::size_t>(k - 1)] += std::min(cnt, it == max_ref.end() ? 0L : it->second);
        total[static_cast<std::size_t>(k - 1)] += cnt;
      }
    }
  }
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    double p = total[ku] > 0 ? static_cast<double>(clipped[ku]) / static_cast<double>(total[ku]) : 0.0;
    const bool smooth = p == 0.0;
    if (smooth) p = kBleuEpsilon;
    out.precisions.push_back(p);
    out.smoothed.push_back(smooth);
    log_sum += std::log(p) / n;
  }
  const double c = static_cast<double>(out.candidate_length);
  const double r = static_cast<double>(out.reference_length);
  out.brevity_penalty = c > r ? 1.0 : (c == 0.0 ? 0.0 : std::exp(1.0 - r / c));
  out.score = out.brevity_penalty * std::exp(log_sum);
  return out;
}

double distinct_n(const std::vector<Sequence>& responses, int n) {
  require_order(n, "distinct_n");
  NGramCounts pooled;
  long total = 0;
  for (const auto& r : responses) {
    for (const auto& [g, cnt] : ngrams(r, n)) {
      pooled[g] += cnt;
      total += cnt;
    }
  }
  if (total == 0) throw std::invalid_argument("distinct_n: responses contain no " + std::to_string(n) + "-gram");
  return static_cast<double>(pooled.size()) / static_cast<double>(total);
}

double entropy_n(const Sequence& response, int n) {
  require_order(n, "entropy_n");
  const NGramCounts counts = ngrams(response, n);
  long total = 0;
  for (const auto& [_, c] : counts) total += c;
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

double mean_entropy_n(const std::vector<Sequence>& responses, int n) {
  if (responses.empty()) throw std::invalid_argument("mean_entropy_n: no responses");
  double sum = 0.0;
  for (const auto& r : responses) sum += entropy_n(r, n);
  return sum / static_cast<double>(responses.size());
}

double pairwise_similarity(const std::vector<Sequence>& responses) {
  if (responses.size() < 2) throw std::invalid_argument("pairwise_similarity: needs at least 2 responses");
  std::vector<NGramCounts> counts;
  std::vector<double> norms;
  for (const auto& r : responses) {
    counts.push_back(ngrams(r, 1));
    double sq = 0.0;
    for (const auto& [_, c] : counts.back()) sq += static_cast<double>(c * c);
    norms.push_back(std::sqrt(sq));
  }
  double sum = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (std::size_t j = i + 1; j < counts.size(); ++j, ++pairs) {
      if (norms[i] == 0.0 || norms[j] == 0.0) {
        sum += norms[i] == norms[j] ? 1.0 : 0.0;  // two empty responses are identical
        continue;
      }
      double dot = 0.0;
      for (const auto& [g, c] : counts[i]) {
        auto it = counts[j].find(g);
        if (it != counts[j].end()) dot += static_cast<double>(c * it->second);
      }
      sum += dot / (norms[i] * norms[j]);
    }
  }
  return sum / static_cast<double>(pairs);
}

double perplexity(double total_nll, long tokens) {
  if (tokens <= 0) throw std::invalid_argument("perplexity: no tokens");
  return std::exp(total_nll / static_cast<double>(tokens));
}

double tokens_per_second(long tokens, double seconds) {
  if (tokens <= 0) throw std::invalid_argument("throughput: zero generated tokens");
  if (!(seconds > 0.0)) throw std::invalid_argument("throughput: elapsed time must be positive");
  return static_cast<double>(tokens) / seconds;
}

namespace {

std::map<std::string, std::string> flatten(const MetricReport& r) {
  auto num = [](double v) {
    std::ostringstream s;
    s << std::setprecision(10) << v;
    return s.str();
  };
  std::map<std::string, std::string> kv = r.info;
  kv["bleu1"] = num(r.bleu1);
  kv["bleu2"] = num(r.bleu2);
  kv["distinct1"] = num(r.distinct1);
  kv["distinct2"] = num(r.distinct2);
  kv["entropy1"] = num(r.entropy1);
  kv["entropy2"] = num(r.entropy2);
  kv["entropy3"] = num(r.entropy3);
  for (std::size_t k = 0; k < r.perplexity_by_refs.size(); ++k) {
    kv["perplexity.refs" + std::to_string(k + 1)] = num(r.perplexity_by_refs[k]);
  }
  kv["similarity"] = num(r.similarity);
  kv["tokens_per_sec"] = num(r.tokens_per_sec);
  return kv;
}

}  // namespace

std::string MetricReport::to_key_value() const {
  std::string out;
  for (const auto& [k, v] : flatten(*this)) out += k + " = " + v + "\n";
  return out;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : info) j[k] = v;
  j["bleu1"] = bleu1;
  j["bleu2"] = bleu2;
  j["distinct1"] = distinct1;
  j["distinct2"] = distinct2;
  j["entropy1"] = entropy1;
  j["entropy2"] = entropy2;
  j["entropy3"] = entropy3;
  j["perplexity_by_refs"] = perplexity_by_refs;
  j["similarity"] = similarity;
  j["tokens_per_sec"] = tokens_per_sec;
  return j.dump();
}

}  // namespace dior
