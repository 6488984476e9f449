#include "dior/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dior/tokens.hpp"

namespace dior {

void validate(const ModelConfig& cfg) {
  if (cfg.layers < 1) throw std::invalid_argument("model: layers must be >= 1");
  if (cfg.width < 1 || cfg.heads < 1 || cfg.width % cfg.heads != 0) {
    throw std::invalid_argument("model: width must be a positive multiple of heads");
  }
  if (cfg.latent_dim < 1) throw std::invalid_argument("model: latent_dim must be >= 1");
  if (cfg.vocab_size <= tokens::kReservedCount) {
    throw std::invalid_argument("model: vocab_size must exceed the reserved token block");
  }
  if (cfg.max_len < 2) throw std::invalid_argument("model: max_len must be >= 2");
  if (cfg.ffn_mult < 1) throw std::invalid_argument("model: ffn_mult must be >= 1");
}

namespace {

template <typename S>
void add_layer_norm(ParameterStore<S>& store, const std::string& prefix, int width) {
  store.add(prefix + ".g", Mat<S>::Ones(1, width));
  store.add(prefix + ".b", Mat<S>::Zero(1, width));
}

template <typename S>
void add_attention(ParameterStore<S>& store, const std::string& prefix, int width, Rng& rng) {
  for (const char* part : {".q", ".k", ".v", ".o"}) add_linear(store, prefix + part, width, width, rng);
}

template <typename S>
void add_ffn(ParameterStore<S>& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
  add_linear(store, prefix + ".fc1", cfg.width, cfg.width * cfg.ffn_mult, rng);
  add_linear(store, prefix + ".fc2", cfg.width * cfg.ffn_mult, cfg.width, rng);
}

template <typename S>
Var<S> norm(Tape<S>& t, const ParameterStore<S>& store, const std::string& prefix, Var<S> x) {
  return layer_norm(x, t.param(store.at(prefix + ".g")), t.param(store.at(prefix + ".b")));
}

template <typename S>
Var<S> ffn(Tape<S>& t, const ParameterStore<S>& store, const std::string& prefix, Var<S> x) {
  return linear(t, store, prefix + ".fc2", gelu(linear(t, store, prefix + ".fc1", x)));
}

template <typename S>
Var<S> attention(Tape<S>& t, const ParameterStore<S>& store, const std::string& prefix, Var<S> queries,
                 Var<S> keys_values, int heads, std::span<const std::uint8_t> allowed) {
  Var<S> q = linear(t, store, prefix + ".q", queries);
  Var<S> k = linear(t, store, prefix + ".k", keys_values);
  Var<S> v = linear(t, store, prefix + ".v", keys_values);
  const Eigen::Index head_dim = q.cols() / heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(head_dim));
  std::vector<Var<S>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var<S> qh = slice_cols(q, h * head_dim, head_dim);
    Var<S> kh = slice_cols(k, h * head_dim, head_dim);
    Var<S> vh = slice_cols(v, h * head_dim, head_dim);
    Var<S> weights = softmax(scale(matmul_nt(qh, kh), inv_sqrt), allowed);
    outs.push_back(matmul(weights, vh));
  }
  Var<S> merged = heads == 1 ? outs.front() : concat_cols(outs);
  return linear(t, store, prefix + ".o", merged);
}

template <typename S>
Var<S> positions(Tape<S>& t, const ParameterStore<S>& store, const std::string& name, Eigen::Index n) {
  return slice_rows(t.param(store.at(name)), 0, n);
}

}  // namespace

template <typename S>
void init_backbone(ParameterStore<S>& store, const ModelConfig& cfg, Rng& rng) {
  validate(cfg);
  const int d = cfg.width;
  store.add("emb.tok", normal_init<S>(cfg.vocab_size, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  store.add("enc.pos", normal_init<S>(cfg.max_len, d, 0.02, rng));
  store.add("dec.pos", normal_init<S>(cfg.max_len, d, 0.02, rng));
  add_layer_norm(store, "enc.emb_ln", d);
  add_layer_norm(store, "dec.emb_ln", d);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string e = "enc." + std::to_string(l);
    add_attention(store, e + ".self", d, rng);
    add_layer_norm(store, e + ".ln1", d);
    add_ffn(store, e + ".ffn", cfg, rng);
    add_layer_norm(store, e + ".ln2", d);

    const std::string p = "dec." + std::to_string(l);
    add_linear(store, p + ".zself", cfg.latent_dim, d, rng);
    add_linear(store, p + ".zcross", cfg.latent_dim, d, rng);
    add_attention(store, p + ".self", d, rng);
    add_layer_norm(store, p + ".ln1", d);
    add_attention(store, p + ".cross", d, rng);
    add_layer_norm(store, p + ".ln2", d);
    add_ffn(store, p + ".ffn", cfg, rng);
    add_layer_norm(store, p + ".ln3", d);
  }
  store.add("out.b", Mat<S>::Zero(1, cfg.vocab_size));
}

template <typename S>
EncoderOutputs<S> encode(Tape<S>& tape, const ParameterStore<S>& store, const ModelConfig& cfg,
                         std::span<const int> ids) {
  if (ids.empty()) throw std::invalid_argument("encode: empty input");
  if (static_cast<int>(ids.size()) > cfg.max_len) {
    throw std::invalid_argument("encode: input of " + std::to_string(ids.size()) +
                                " tokens exceeds max_len " + std::to_string(cfg.max_len));
  }
  EncoderOutputs<S> out;
  out.non_pad.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out.non_pad[i] = ids[i] != tokens::kPad ? 1 : 0;
  if (std::none_of(out.non_pad.begin(), out.non_pad.end(), [](auto v) { return v != 0; })) {
    throw std::invalid_argument("encode: input consists only of padding");
  }
  const auto n = static_cast<Eigen::Index>(ids.size());
  Var<S> x = add(embedding(tape.param(store.at("emb.tok")), ids), positions(tape, store, "enc.pos", n));
  x = norm(tape, store, "enc.emb_ln", x);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string e = "enc." + std::to_string(l);
    x = norm(tape, store, e + ".ln1", add(x, attention(tape, store, e + ".self", x, x, cfg.heads,
                                                       std::span<const std::uint8_t>(out.non_pad))));
    x = norm(tape, store, e + ".ln2", add(x, ffn(tape, store, e + ".ffn", x)));
    out.layers.push_back(x);
  }
  return out;
}

template <typename S>
Memory<S> memdrop(const Memory<S>& memory, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw std::invalid_argument("memdrop: rate must lie in [0, 1], got " + std::to_string(rate));
  }
  if (rate == 0.0) return memory;
  const Eigen::Index n = memory.states.rows();
  Mat<S> mask = Mat<S>::Zero(n, memory.states.cols());
  Memory<S> out;
  out.keep.assign(static_cast<std::size_t>(n), 0);
  const S kept_scale = rate < 1.0 ? static_cast<S>(1.0 / (1.0 - rate)) : S(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool dropped = uniform01(rng) < rate;
    if (!dropped) {
      mask.row(i).setConstant(kept_scale);
      out.keep[static_cast<std::size_t>(i)] = memory.keep[static_cast<std::size_t>(i)];
    }
  }
  out.states = mask_mul(memory.states, mask);
  return out;
}

template <typename S>
Var<S> decode(Tape<S>& tape, const ParameterStore<S>& store, const ModelConfig& cfg,
              const std::vector<Var<S>>& latents, const Memory<S>& memory,
              std::span<const int> target_prefix, DecodeMode mode, double memdrop_rate, Rng* rng) {
  if (static_cast<int>(latents.size()) != cfg.layers) {
    throw std::invalid_argument("decode: expected " + std::to_string(cfg.layers) +
                                " layer latents, got " + std::to_string(latents.size()));
  }
  for (const auto& z : latents) {
    if (z.rows() != 1 || z.cols() != cfg.latent_dim) {
      throw ShapeError("decode: latent of shape " + shape_string(z.rows(), z.cols()) +
                       " where " + shape_string(1, cfg.latent_dim) + " is required");
    }
  }
  if (target_prefix.empty()) throw std::invalid_argument("decode: empty target prefix");
  if (static_cast<int>(target_prefix.size()) > cfg.max_len) {
    throw std::invalid_argument("decode: target of " + std::to_string(target_prefix.size()) +
                                " tokens exceeds max_len " + std::to_string(cfg.max_len));
  }
  if (memory.states.cols() != cfg.width ||
      static_cast<std::size_t>(memory.states.rows()) != memory.keep.size()) {
    throw ShapeError("decode: memory shape " + shape_string(memory.states.rows(), memory.states.cols()) +
                     " inconsistent with width " + std::to_string(cfg.width));
  }

  Memory<S> mem = memory;
  if (mode == DecodeMode::kTrain && memdrop_rate > 0.0) {
    if (rng == nullptr) throw std::invalid_argument("decode: memory dropout needs a generator");
    mem = memdrop(memory, memdrop_rate, *rng);
  }

  const auto n = static_cast<Eigen::Index>(target_prefix.size());
  // Self-attention keys: [latent prefix, targets]; causal over targets.
  std::vector<std::uint8_t> self_allowed(static_cast<std::size_t>(n * (n + 1)), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= n; ++j) {
      self_allowed[static_cast<std::size_t>(i * (n + 1) + j)] = (j == 0 || j - 1 <= i) ? 1 : 0;
    }
  }
  std::vector<std::uint8_t> cross_allowed;
  cross_allowed.reserve(mem.keep.size() + 1);
  cross_allowed.push_back(1);
  cross_allowed.insert(cross_allowed.end(), mem.keep.begin(), mem.keep.end());

  Var<S> x = add(embedding(tape.param(store.at("emb.tok")), target_prefix),
                 positions(tape, store, "dec.pos", n));
  x = norm(tape, store, "dec.emb_ln", x);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    const auto& z = latents[static_cast<std::size_t>(l)];
    Var<S> self_kv = concat_rows<S>({linear(tape, store, p + ".zself", z), x});
    x = norm(tape, store, p + ".ln1",
             add(x, attention(tape, store, p + ".self", x, self_kv, cfg.heads,
                              std::span<const std::uint8_t>(self_allowed))));
    Var<S> cross_kv = concat_rows<S>({linear(tape, store, p + ".zcross", z), mem.states});
    x = norm(tape, store, p + ".ln2",
             add(x, attention(tape, store, p + ".cross", x, cross_kv, cfg.heads,
                              std::span<const std::uint8_t>(cross_allowed))));
    x = norm(tape, store, p + ".ln3", add(x, ffn(tape, store, p + ".ffn", x)));
  }
  return add(matmul_nt(x, tape.param(store.at("emb.tok"))), tape.param(store.at("out.b")));
}

// ---- generation -----------------------------------------------------------

std::string to_string(DecodeStrategy s) {
  switch (s) {
    case DecodeStrategy::kGreedy: return "greedy";
    case DecodeStrategy::kBeam: return "beam";
    case DecodeStrategy::kNucleus: return "nucleus";
  }
  return "greedy";
}

DecodeStrategy parse_strategy(const std::string& name) {
  if (name == "greedy") return DecodeStrategy::kGreedy;
  if (name == "beam") return DecodeStrategy::kBeam;
  if (name == "nucleus" || name == "sample") return DecodeStrategy::kNucleus;
  throw std::invalid_argument("unknown decoding strategy '" + name + "'");
}

void validate(const GenerationParams& p) {
  if (!(p.top_p > 0.0 && p.top_p <= 1.0)) throw std::invalid_argument("top_p must lie in (0, 1]");
  if (p.top_k < 1) throw std::invalid_argument("top_k must be >= 1");
  if (p.beam_width < 1) throw std::invalid_argument("beam_width must be >= 1");
  if (p.guidance < 0.0) throw std::invalid_argument("guidance weight w must be >= 0");
  if (p.max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
  if (p.num_samples < 1) throw std::invalid_argument("num_samples must be >= 1");
  if (p.steps < 0) throw std::invalid_argument("steps must be >= 0");
}

namespace {

Eigen::VectorXd log_probs(const Eigen::VectorXd& logits) {
  const double hi = logits.maxCoeff();
  const double lse = hi + std::log((logits.array() - hi).exp().sum());
  return logits.array() - lse;
}

int argmax(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  v.maxCoeff(&best);
  return static_cast<int>(best);
}

std::vector<int> greedy(const StepLogits& step, const GenerationParams& p, int bos, int eos) {
  std::vector<int> seq{bos};
  for (int i = 0; i < p.max_new_tokens; ++i) {
    const int tok = argmax(step(seq));
    if (tok == eos) break;
    seq.push_back(tok);
  }
  return {seq.begin() + 1, seq.end()};
}

std::vector<int> nucleus(const StepLogits& step, const GenerationParams& p, int bos, int eos, Rng& rng) {
  std::vector<int> seq{bos};
  for (int i = 0; i < p.max_new_tokens; ++i) {
    const Eigen::VectorXd probs = log_probs(step(seq)).array().exp();
    std::vector<int> order(static_cast<std::size_t>(probs.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs(a) > probs(b); });
    const std::size_t k = std::min<std::size_t>(order.size(), static_cast<std::size_t>(p.top_k));
    double top_mass = 0.0;
    for (std::size_t j = 0; j < k; ++j) top_mass += probs(order[j]);
    // Smallest prefix of the top-k (renormalised) whose mass reaches top_p.
    std::size_t keep = 0;
    double cumulative = 0.0;
    while (keep < k) {
      cumulative += probs(order[keep]) / top_mass;
      ++keep;
      if (cumulative >= p.top_p) break;
    }
    double kept_mass = 0.0;
    for (std::size_t j = 0; j < keep; ++j) kept_mass += probs(order[j]);
    double u = uniform01(rng) * kept_mass;
    int tok = order[keep - 1];
    for (std::size_t j = 0; j < keep; ++j) {
      u -= probs(order[j]);
      if (u < 0.0) {
        tok = order[j];
        break;
      }
    }
    if (tok == eos) break;
    seq.push_back(tok);
  }
  return {seq.begin() + 1, seq.end()};
}

std::vector<int> beam(const StepLogits& step, const GenerationParams& p, int bos, int eos) {
  struct Hyp {
    std::vector<int> tokens;
    double score = 0.0;
    bool done = false;
  };
  std::vector<Hyp> beams{Hyp{{bos}, 0.0, false}};
  for (int i = 0; i < p.max_new_tokens; ++i) {
    std::vector<Hyp> candidates;
    for (const auto& h : beams) {
      if (h.done) {
        candidates.push_back(h);
        continue;
      }
      const Eigen::VectorXd lp = log_probs(step(h.tokens));
      std::vector<int> order(static_cast<std::size_t>(lp.size()));
      std::iota(order.begin(), order.end(), 0);
      const std::size_t k = std::min<std::size_t>(order.size(), static_cast<std::size_t>(p.beam_width));
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](int a, int b) { return lp(a) > lp(b) || (lp(a) == lp(b) && a < b); });
      for (std::size_t j = 0; j < k; ++j) {
        Hyp next = h;
        next.score += lp(order[j]);
        if (order[j] == eos) {
          next.done = true;
        } else {
          next.tokens.push_back(order[j]);
        }
        candidates.push_back(std::move(next));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
    candidates.resize(std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(p.beam_width)));
    beams = std::move(candidates);
    if (std::all_of(beams.begin(), beams.end(), [](const Hyp& h) { return h.done; })) break;
  }
  const Hyp& best = beams.front();
  return {best.tokens.begin() + 1, best.tokens.end()};
}

}  // namespace

std::vector<std::vector<int>> decode_sequences(const StepLogits& step, const GenerationParams& params,
                                               int bos, int eos, Rng& rng) {
  validate(params);
  std::vector<std::vector<int>> out;
  for (int s = 0; s < params.num_samples; ++s) {
    switch (params.strategy) {
      case DecodeStrategy::kGreedy: out.push_back(greedy(step, params, bos, eos)); break;
      case DecodeStrategy::kBeam: out.push_back(beam(step, params, bos, eos)); break;
      case DecodeStrategy::kNucleus: out.push_back(nucleus(step, params, bos, eos, rng)); break;
    }
  }
  return out;
}

template <typename S>
std::vector<std::vector<int>> generate(const ParameterStore<S>& store, const ModelConfig& cfg,
                                       const std::vector<RowVec<S>>& latents,
                                       const MemoryValues<S>& memory, const GenerationParams& params,
                                       Rng& rng) {
  GenerationParams bounded = params;
  bounded.max_new_tokens = std::min(params.max_new_tokens, cfg.max_len - 1);
  StepLogits step = [&](std::span<const int> prefix) -> Eigen::VectorXd {
    Tape<S> tape(false);
    std::vector<Var<S>> zs;
    zs.reserve(latents.size());
    for (const auto& z : latents) zs.push_back(tape.constant(z));
    Memory<S> mem{tape.constant(memory.states), memory.keep};
    Var<S> logits = decode(tape, store, cfg, zs, mem, prefix);
    return logits.value().row(logits.rows() - 1).transpose().template cast<double>();
  };
  return decode_sequences(step, bounded, tokens::kBos, tokens::kEos, rng);
}

#define DIOR_INSTANTIATE_BACKBONE(S)                                                               \
  template void init_backbone(ParameterStore<S>&, const ModelConfig&, Rng&);                       \
  template EncoderOutputs<S> encode(Tape<S>&, const ParameterStore<S>&, const ModelConfig&,        \
                                    std::span<const int>);                                         \
  template Memory<S> memdrop(const Memory<S>&, double, Rng&);                                      \
  template Var<S> decode(Tape<S>&, const ParameterStore<S>&, const ModelConfig&,                   \
                         const std::vector<Var<S>>&, const Memory<S>&, std::span<const int>,       \
                         DecodeMode, double, Rng*);                                                \
  template std::vector<std::vector<int>> generate(const ParameterStore<S>&, const ModelConfig&,    \
                                                  const std::vector<RowVec<S>>&,                   \
                                                  const MemoryValues<S>&, const GenerationParams&, \
                                                  Rng&);

DIOR_INSTANTIATE_BACKBONE(float)
DIOR_INSTANTIATE_BACKBONE(double)

#undef DIOR_INSTANTIATE_BACKBONE

}  // namespace dior
