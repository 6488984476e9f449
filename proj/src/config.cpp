#include "dior/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace dior {

namespace {

struct Entry {
  const char* key;
  const char* help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

int to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  int out = 0;
  try {
    out = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

#define INT_KEY(name, help, member)                                                  \
  Entry { name, help, [](RunConfig& c, const std::string& v) { c.member = to_int(name, v); }, \
          [](const RunConfig& c) { return std::to_string(c.member); } }
#define NUM_KEY(name, help, member)                                                     \
  Entry { name, help, [](RunConfig& c, const std::string& v) { c.member = to_double(name, v); }, \
          [](const RunConfig& c) { return fmt(c.member); } }
#define STR_KEY(name, help, member)                                                \
  Entry { name, help, [](RunConfig& c, const std::string& v) { c.member = v; }, \
          [](const RunConfig& c) { return c.member; } }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> kEntries = {
      INT_KEY("model.layers", "encoder and decoder layers (one latent group per layer)", model.layers),
      INT_KEY("model.width", "model width d", model.width),
      INT_KEY("model.heads", "attention heads; must divide model.width", model.heads),
      INT_KEY("model.latent_dim", "latent width per layer", model.latent_dim),
      INT_KEY("model.max_len", "longest context or response in tokens", model.max_len),
      INT_KEY("model.ffn_mult", "feed-forward expansion factor", model.ffn_mult),
      Entry{"prior.mode", "diffusion or gaussian (ablation)",
            [](RunConfig& c, const std::string& v) { c.prior.mode = parse_prior_mode(v); },
            [](const RunConfig& c) { return to_string(c.prior.mode); }},
      INT_KEY("prior.steps", "diffusion steps T", prior.steps),
      NUM_KEY("prior.beta_first", "beta at t = 1", prior.beta_first),
      NUM_KEY("prior.beta_last", "beta at t = T", prior.beta_last),
      NUM_KEY("prior.cond_drop", "probability of training the denoiser on the zero condition", prior.cond_drop),
      Entry{"prior.sampler", "deterministic (sigma = 0) or stochastic",
            [](RunConfig& c, const std::string& v) {
              if (v == "deterministic") c.prior.noise = SamplerNoise::kDeterministic;
              else if (v == "stochastic") c.prior.noise = SamplerNoise::kStochastic;
              else throw std::invalid_argument("prior.sampler: expected deterministic or stochastic, got '" + v + "'");
            },
            [](const RunConfig& c) {
              return std::string(c.prior.noise == SamplerNoise::kDeterministic ? "deterministic" : "stochastic");
            }},
      INT_KEY("prior.denoiser_hidden", "denoiser hidden width; 0 means layers * width", prior.denoiser_hidden),
      Entry{"prior.terminal_kl", "add the terminal prior-matching KL to the diffusion prior term",
            [](RunConfig& c, const std::string& v) { c.prior.terminal_kl = to_bool("prior.terminal_kl", v); },
            [](const RunConfig& c) { return std::string(c.prior.terminal_kl ? "true" : "false"); }},
      NUM_KEY("train.lr", "peak learning rate", train.lr),
      INT_KEY("train.warmup_steps", "linear warmup steps before inverse-sqrt decay", train.warmup_steps),
      INT_KEY("train.total_steps", "optimiser steps", train.total_steps),
      INT_KEY("train.anneal_steps", "steps for the KL weight to reach 1", train.anneal_steps),
      NUM_KEY("train.label_smoothing", "label smoothing for the reconstruction loss", train.label_smoothing),
      NUM_KEY("train.memdrop", "memory dropout rate", train.memdrop_rate),
      INT_KEY("train.batch_size", "dialogs per step (not a token budget)", train.batch_size),
      Entry{"train.seed", "seed for initialisation, noise, and batching",
            [](RunConfig& c, const std::string& v) {
              c.train.seed = static_cast<std::uint64_t>(to_double("train.seed", v));
            },
            [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      Entry{"train.reg_weight", "unit, or literal for the 1/(2 sigma_t^2) weight",
            [](RunConfig& c, const std::string& v) { c.train.reg_weight = parse_reg_weight(v); },
            [](const RunConfig& c) { return to_string(c.train.reg_weight); }},
      Entry{"train.detach", "stop the prior loss gradient at the posterior sample",
            [](RunConfig& c, const std::string& v) { c.train.detach_prior_input = to_bool("train.detach", v); },
            [](const RunConfig& c) { return std::string(c.train.detach_prior_input ? "true" : "false"); }},
      NUM_KEY("train.clip_norm", "global gradient-norm clip", train.clip_norm),
      INT_KEY("train.checkpoint_every", "checkpoint cadence in steps; 0 writes only the final one",
              train.checkpoint_every),
      INT_KEY("eval.samples", "responses per context", eval.samples),
      Entry{"eval.strategy", "greedy, beam, or nucleus",
            [](RunConfig& c, const std::string& v) { c.eval.generation.strategy = parse_strategy(v); },
            [](const RunConfig& c) { return to_string(c.eval.generation.strategy); }},
      INT_KEY("eval.beam_width", "beam width", eval.generation.beam_width),
      INT_KEY("eval.top_k", "nucleus top-k", eval.generation.top_k),
      NUM_KEY("eval.top_p", "nucleus top-p", eval.generation.top_p),
      INT_KEY("eval.max_new_tokens", "generation length cap", eval.generation.max_new_tokens),
      NUM_KEY("eval.guidance", "classifier-free guidance weight w", eval.generation.guidance),
      INT_KEY("eval.steps", "sampler steps; 0 uses prior.steps", eval.generation.steps),
      INT_KEY("eval.perplexity_draws", "prior draws per perplexity estimate", eval.perplexity_draws),
      INT_KEY("eval.max_refs", "largest reference count in the perplexity table", eval.max_refs),
      INT_KEY("eval.max_contexts", "contexts to evaluate; 0 means all", eval.max_contexts),
      Entry{"eval.seed", "seed for evaluation sampling",
            [](RunConfig& c, const std::string& v) {
              c.eval.seed = static_cast<std::uint64_t>(to_double("eval.seed", v));
            },
            [](const RunConfig& c) { return std::to_string(c.eval.seed); }},
      STR_KEY("paths.train", "training corpus (JSONL)", paths.train),
      STR_KEY("paths.eval", "evaluation corpus (JSONL)", paths.eval),
      STR_KEY("paths.vocab", "vocabulary file", paths.vocab),
      STR_KEY("paths.checkpoint", "checkpoint path", paths.checkpoint),
      STR_KEY("paths.log_dir", "directory for step logs and reports", paths.log_dir),
  };
  return kEntries;
}

#undef INT_KEY
#undef NUM_KEY
#undef STR_KEY

const Entry& find(const std::string& key) {
  for (const auto& e : entries()) {
    if (key == e.key) return e;
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
  model.max_len = 64;
  eval.max_contexts = 0;
}

void RunConfig::set(const std::string& key, const std::string& value) { find(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return find(key).get(*this); }

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& e : entries()) out += "# " + std::string(e.help) + "\n" + e.key + " = " + e.get(*this) + "\n";
  return out;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> kKeys = [] {
    std::vector<std::string> k;
    for (const auto& e : entries()) k.emplace_back(e.key);
    return k;
  }();
  return kKeys;
}

void load_run_config(const std::filesystem::path& path, RunConfig& config) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    try {
      if (eq == std::string::npos) throw std::invalid_argument("expected 'key = value'");
      config.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override '" + assignment + "' is not key=value");
  config.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

}  // namespace dior
