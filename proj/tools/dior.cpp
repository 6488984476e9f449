// dior: corpus synthesis, training, evaluation, sampling, and serving.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "dior/checkpoint.hpp"
#include "dior/config.hpp"
#include "dior/corpus.hpp"
#include "dior/evaluate.hpp"
#include "dior/service.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose _res macro breaks Eigen headers.
#include <CLI11.hpp>
#include <httplib.h>

namespace fs = std::filesystem;
using namespace dior;

namespace {

struct ConfigFlags {
  std::string file;
  std::vector<std::string> overrides;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
  cmd->add_option("-c,--config", flags.file, "key = value run configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", flags.overrides, "override one config key (key=value); repeatable");
}

RunConfig resolve(const ConfigFlags& flags) {
  RunConfig cfg;
  if (!flags.file.empty()) load_run_config(flags.file, cfg);
  for (const auto& o : flags.overrides) apply_override(cfg, o);
  return cfg;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

Vocab load_vocab(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("vocabulary not found: " + path);
  return Vocab::load(path);
}

// ---- synth ----------------------------------------------------------------

int cmd_synth(const std::string& out_dir, const SynthOptions& options) {
  const SynthCorpus corpus = synth_corpus(options);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  save_records(dir / "train.jsonl", corpus.train);
  save_records(dir / "eval.jsonl", corpus.eval);
  Vocab vocab;
  extend_vocab(vocab, corpus.train);
  extend_vocab(vocab, corpus.eval);
  vocab.save(dir / "vocab.txt");
  std::cout << "wrote " << corpus.train.size() << " training and " << corpus.eval.size()
            << " evaluation dialogs to " << out_dir << " (vocabulary " << vocab.size() << ", seed "
            << options.seed << ")\n";
  return 0;
}

// ---- train ----------------------------------------------------------------

int cmd_train(RunConfig cfg, bool resume) {
  const std::vector<DialogRecord> records = load_records(cfg.paths.train);
  if (records.empty()) throw std::runtime_error("training corpus is empty: " + cfg.paths.train);
  Vocab vocab;
  if (fs::exists(cfg.paths.vocab)) {
    vocab = Vocab::load(cfg.paths.vocab);
  } else {
    extend_vocab(vocab, records);
    ensure_parent(cfg.paths.vocab);
    vocab.save(cfg.paths.vocab);
    std::cerr << "built vocabulary of " << vocab.size() << " tokens at " << cfg.paths.vocab << "\n";
  }
  const std::vector<TrainPair> data = to_train_pairs(to_examples(records, vocab), cfg.model.max_len);

  std::unique_ptr<Trainer<float>> trainer;
  if (resume) {
    LoadedCheckpoint<float> ckpt = load_checkpoint<float>(cfg.paths.checkpoint);
    trainer = std::make_unique<Trainer<float>>(std::move(ckpt.model), cfg.train);
    if (!ckpt.adam) throw std::runtime_error("checkpoint has no optimiser state to resume from");
    trainer->adam() = std::move(*ckpt.adam);
    trainer->restore(ckpt.manifest);
    std::cerr << "resuming at step " << trainer->step_index() << "\n";
  } else {
    cfg.model.vocab_size = vocab.size();
    trainer = std::make_unique<Trainer<float>>(DiorCvae<float>(cfg.model, cfg.prior, cfg.train.seed), cfg.train);
  }
  if (trainer->model().config().vocab_size != vocab.size()) {
    throw std::runtime_error("vocabulary size does not match the checkpoint");
  }

  fs::create_directories(cfg.paths.log_dir);
  const fs::path log_path = fs::path(cfg.paths.log_dir) / "train.jsonl";
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  const NoiseSchedule& sched = trainer->model().schedule();
  std::cerr << "prior " << to_string(cfg.prior.mode) << ", T = " << sched.steps
            << ", terminal alpha_bar = " << sched.alpha_bar.back() << ", terminal SNR = " << sched.terminal_snr()
            << ", parameters = " << trainer->model().params().scalar_count() << "\n";

  auto save = [&] {
    Manifest extra = trainer->state();
    extra["vocab"] = cfg.paths.vocab;
    ensure_parent(cfg.paths.checkpoint);
    save_checkpoint(cfg.paths.checkpoint, trainer->model(), extra, &trainer->adam());
  };
  StepReport last;
  while (trainer->step_index() < cfg.train.total_steps) {
    last = trainer->step(data);
    log << last.to_json() << "\n";
    if (last.aborted) {
      log.flush();
      std::cerr << "step " << last.step << " produced a non-finite loss; aborting without an update\n";
      return 3;
    }
    const int done = trainer->step_index();
    if (done % 100 == 0 || done == cfg.train.total_steps) {
      std::cerr << "step " << done << "  rc " << last.reconstruction << "  neg_xent " << last.neg_entropy
                << (cfg.prior.mode == PriorMode::kDiffusion ? "  reg " : "  xent ") << last.prior_term
                << "  total " << last.total << "  anneal " << last.anneal << "\n";
    }
    if (cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0) save();
  }
  save();
  std::cout << last.to_json() << "\n";
  return 0;
}

// ---- eval -----------------------------------------------------------------

int cmd_eval(const RunConfig& cfg, const std::string& report_path) {
  if (!fs::exists(cfg.paths.checkpoint)) throw std::runtime_error("checkpoint not found: " + cfg.paths.checkpoint);
  const LoadedCheckpoint<float> ckpt = load_checkpoint<float>(cfg.paths.checkpoint);
  const Vocab vocab = load_vocab(cfg.paths.vocab);
  const auto examples = to_examples(load_records(cfg.paths.eval), vocab);
  const EvalResult res = evaluate(ckpt.model, examples, cfg.eval);
  std::cout << res.report.to_key_value();
  fs::create_directories(cfg.paths.log_dir);
  std::ofstream(fs::path(cfg.paths.log_dir) / "eval.jsonl", std::ios::app) << res.report.to_json() << "\n";
  if (!report_path.empty()) {
    ensure_parent(report_path);
    std::ofstream(report_path) << res.report.to_key_value();
  }
  return 0;
}

// ---- sample ---------------------------------------------------------------

int cmd_sample(const RunConfig& cfg, const std::vector<std::string>& turns, GenerationParams params,
               const std::string& out_path) {
  const LoadedCheckpoint<float> ckpt = load_checkpoint<float>(cfg.paths.checkpoint);
  const Vocab vocab = load_vocab(cfg.paths.vocab);
  DialogExample ex;
  int unknown = 0;
  for (const auto& t : turns) {
    int n = 0;
    ex.context.push_back(vocab.encode(t, &n));
    unknown += n;
  }
  if (unknown > 0) std::cerr << "warning: " << unknown << " out-of-vocabulary token(s) mapped to <unk>\n";
  const FormattedContext ctx = format_context(ex, ckpt.model.config().max_len);
  if (ctx.truncated) {
    std::cerr << "warning: context truncated to the newest " << ckpt.model.config().max_len << " tokens\n";
  }
  Rng rng = make_rng(params.seed, 0x5e);
  const auto seqs = respond(ckpt.model, std::span<const int>(ctx.ids), params, rng);
  std::ofstream file;
  if (!out_path.empty()) {
    ensure_parent(out_path);
    file.open(out_path);
    if (!file) throw std::runtime_error("cannot write " + out_path);
  }
  std::ostream& out = out_path.empty() ? std::cout : file;
  out << "# seed = " << params.seed << "\n";
  for (const auto& s : seqs) out << vocab.decode(s) << "\n";
  return 0;
}

// ---- serve ----------------------------------------------------------------

int cmd_serve(const RunConfig& cfg, const std::string& host, int port, int threads) {
  LoadedCheckpoint<float> ckpt = load_checkpoint<float>(cfg.paths.checkpoint);
  const GenerationService service(std::move(ckpt.model), load_vocab(cfg.paths.vocab));
  httplib::Server server;
  register_routes(server, service, threads);
  std::cerr << "serving on http://" << host << ":" << port << " with " << threads << " worker(s)\n";
  if (!server.listen(host, port)) {
    std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
    return 1;
  }
  return 0;
}

void add_generation_flags(CLI::App* cmd, GenerationParams& p, std::string& strategy) {
  cmd->add_option("-n,--num-samples", p.num_samples, "responses to generate")->check(CLI::Range(1, 1000));
  cmd->add_option("-w,--guidance", p.guidance, "classifier-free guidance weight")->check(CLI::NonNegativeNumber);
  cmd->add_option("-T,--steps", p.steps, "diffusion sampler steps (0 = schedule T)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--strategy", strategy, "greedy, beam, or nucleus");
  cmd->add_option("--beam-width", p.beam_width, "beam width");
  cmd->add_option("--top-k", p.top_k, "nucleus top-k");
  cmd->add_option("--top-p", p.top_p, "nucleus top-p");
  cmd->add_option("--max-new-tokens", p.max_new_tokens, "generation length cap");
  cmd->add_option("--seed", p.seed, "sampling seed (echoed in the output)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical CVAE with a latent diffusion prior for dialog response generation"};
  app.require_subcommand(1);

  SynthOptions synth;
  std::string synth_out = "data";
  auto* c_synth = app.add_subcommand("synth", "write a synthetic one-to-many dialog corpus");
  c_synth->add_option("-o,--out", synth_out, "output directory (train.jsonl, eval.jsonl, vocab.txt)");
  c_synth->add_option("--seed", synth.seed, "generator seed");
  c_synth->add_option("--contexts", synth.contexts, "number of distinct contexts");
  c_synth->add_option("--refs", synth.refs_per_context, "valid responses per context (>= 2)");
  c_synth->add_option("--eval-fraction", synth.eval_fraction, "share of contexts held out for evaluation");

  ConfigFlags train_flags;
  bool resume = false;
  std::uint64_t train_seed = 0;
  auto* c_train = app.add_subcommand("train", "train a model");
  add_config_flags(c_train, train_flags);
  c_train->add_flag("--resume", resume, "continue from paths.checkpoint, including optimiser state");
  auto* train_seed_opt = c_train->add_option("--seed", train_seed, "shorthand for --set train.seed=N");

  ConfigFlags eval_flags;
  std::string report_path;
  std::uint64_t eval_seed = 0;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on paths.eval");
  add_config_flags(c_eval, eval_flags);
  c_eval->add_option("--report", report_path, "also write the key = value report here");
  auto* eval_seed_opt = c_eval->add_option("--seed", eval_seed, "shorthand for --set eval.seed=N");

  ConfigFlags sample_flags;
  std::vector<std::string> turns;
  GenerationParams gen;
  std::string strategy = "greedy", sample_out;
  auto* c_sample = app.add_subcommand("sample", "generate responses for one context");
  add_config_flags(c_sample, sample_flags);
  c_sample->add_option("--context", turns, "one context turn, oldest first; repeatable")->required();
  c_sample->add_option("-o,--out", sample_out, "write responses to this file instead of stdout");
  add_generation_flags(c_sample, gen, strategy);

  ConfigFlags serve_flags;
  std::string host = "127.0.0.1";
  int port = 8080, threads = 4;
  auto* c_serve = app.add_subcommand("serve", "HTTP generation service (see GET /openapi-lite)");
  add_config_flags(c_serve, serve_flags);
  c_serve->add_option("--host", host, "bind address");
  c_serve->add_option("--port", port, "port")->check(CLI::Range(1, 65535));
  c_serve->add_option("--threads", threads, "worker threads")->check(CLI::Range(1, 256));

  auto* c_config = app.add_subcommand("config", "print every configuration key with its default");

  CLI11_PARSE(app, argc, argv);
  try {
    if (c_synth->parsed()) return cmd_synth(synth_out, synth);
    if (c_train->parsed()) {
      RunConfig cfg = resolve(train_flags);
      if (*train_seed_opt) cfg.train.seed = train_seed;
      return cmd_train(cfg, resume);
    }
    if (c_eval->parsed()) {
      RunConfig cfg = resolve(eval_flags);
      if (*eval_seed_opt) cfg.eval.seed = eval_seed;
      return cmd_eval(cfg, report_path);
    }
    if (c_sample->parsed()) {
      gen.strategy = parse_strategy(strategy);
      validate(gen);
      return cmd_sample(resolve(sample_flags), turns, gen, sample_out);
    }
    if (c_serve->parsed()) return cmd_serve(resolve(serve_flags), host, port, threads);
    if (c_config->parsed()) {
      std::cout << RunConfig().to_text();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
