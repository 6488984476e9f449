// Acceptance suite: one PASS/FAIL line per headline property. Trained models
// can be cached between runs with --cache; every line says whether a model
// was trained or loaded.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dior/checkpoint.hpp"
#include "dior/diffusion.hpp"
#include "dior/evaluate.hpp"
#include "gradcheck.hpp"

using namespace dior;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

void info(const std::string& text) { std::cout << "     " << text << std::endl; }

std::string fmt(double x, int precision = 4) {
  std::ostringstream out;
  out << std::setprecision(precision) << x;
  return out.str();
}

// ---- gradient integrity ---------------------------------------------------

void gradient_integrity() {
  const auto t0 = Clock::now();
  const ModelConfig cfg{2, 16, 2, 4, 32, 16, 4};
  const std::vector<int> context{4, 9, 10, 11, 3, 5, 12, 13}, response{14, 15, 16};
  bool pass = true;
  std::string detail;
  for (PriorMode mode : {PriorMode::kDiffusion, PriorMode::kGaussian}) {
    PriorConfig prior;
    prior.mode = mode;
    DiorCvae<double> model(cfg, prior, 7);
    TrainOptions options;
    const auto checks = testing::parameter_gradient_check(model.params(), [&](Tape<double>& tape) {
      Rng rng = make_rng(1, 1), prior_rng = make_rng(1, 2);
      return forward_train(tape, model, std::span<const int>(context), std::span<const int>(response), options,
                           rng, prior_rng)
          .total;
    });
    std::size_t entries = 0, passed = 0;
    for (const auto& c : checks) {
      entries += c.entries;
      passed += c.passed;
    }
    const double share = static_cast<double>(passed) / static_cast<double>(entries);
    pass = pass && share >= 0.99;
    detail += to_string(mode) + " " + std::to_string(passed) + "/" + std::to_string(entries) + " scalars under 1e-3; ";
  }
  const double secs = seconds_since(t0);
  pass = pass && secs < 120.0;
  verdict("gradient integrity", pass, detail + fmt(secs, 3) + " s (limit 120 s)");
}

// ---- diffusion correctness ------------------------------------------------

void diffusion_correctness(const NoiseSchedule& schedule) {
  bool moments_ok = true;
  double worst_z = 0.0;
  Rng rng = make_rng(11, 0);
  Eigen::RowVectorXd z0(4);
  z0 << 1.0, -0.5, 2.0, 0.0;
  const int n = 10000;
  for (int t : {1, schedule.steps / 2, schedule.steps}) {
    Eigen::MatrixXd draws(n, z0.size());
    for (int i = 0; i < n; ++i) draws.row(i) = forward_noise(z0, t, schedule, rng);
    const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
    const double var = 1.0 - ab;
    for (Eigen::Index j = 0; j < z0.size(); ++j) {
      const double mean = draws.col(j).mean();
      const double sample_var = (draws.col(j).array() - mean).square().sum() / (n - 1);
      const double z_mean = std::abs(mean - std::sqrt(ab) * z0(j)) / std::sqrt(var / n);
      const double z_var = std::abs(sample_var - var) / (var * std::sqrt(2.0 / (n - 1)));
      worst_z = std::max({worst_z, z_mean, z_var});
      moments_ok = moments_ok && z_mean < 3.0 && z_var < 3.0;
    }
  }

  DenoiserShape shape{8, 4, 32};
  ParameterStore<double> store;
  Rng init = make_rng(12, 0);
  init_denoiser(store, shape, init);
  const DenoiseFn f = denoiser_fn(store, shape);
  const Eigen::RowVectorXd cond = randn_matrix<double>(1, 8, init);
  Rng a = make_rng(13, 0), b = make_rng(13, 0);
  const bool deterministic = sample_prior(f, cond, 4, schedule, 1.5, a) == sample_prior(f, cond, 4, schedule, 1.5, b);

  double induction_err = 0.0;
  Eigen::RowVectorXd c(4);
  c << 0.3, -1.2, 2.5, 0.0;
  const DenoiseFn constant = [&](const Eigen::RowVectorXd&, int, const Eigen::RowVectorXd&) { return c; };
  for (SamplerNoise noise : {SamplerNoise::kDeterministic, SamplerNoise::kStochastic}) {
    const NoiseSchedule s = build_schedule(schedule.steps, schedule.beta[1], schedule.beta.back(), noise, schedule.cond_drop);
    for (int steps : {0, 10, 1}) {
      Rng r = make_rng(14, static_cast<std::uint64_t>(steps));
      induction_err = std::max(induction_err, (sample_prior(constant, cond, 4, s, 0.0, r, steps) - c).cwiseAbs().maxCoeff());
    }
  }

  verdict("diffusion correctness", moments_ok && deterministic && induction_err <= 1e-6,
          "forward_noise moments worst " + fmt(worst_z, 3) + " SE (limit 3, 10k draws, t = 1, T/2, T); " +
              (deterministic ? "sigma = 0 sampler repeatable" : "sigma = 0 sampler NOT repeatable") +
              "; constant-denoiser error " + fmt(induction_err, 3) + " (limit 1e-6)");
}

// ---- mixture recovery -----------------------------------------------------

struct MixtureResult {
  double rate_w0 = 0.0;
  double rate_w2 = 0.0;
  double seconds = 0.0;
};

// Two well-separated Gaussian components, each tied to its own condition
// vector. A sample counts as correct when it lies nearer its own mean.
MixtureResult mixture_recovery(const NoiseSchedule& schedule, int steps) {
  const auto t0 = Clock::now();
  const int dz = 4, dc = 8, batch = 32, per_component = 300;
  const DenoiserShape shape{dc, dz, 64};
  ParameterStore<double> store;
  Rng rng = make_rng(21, 0);
  init_denoiser(store, shape, rng);
  Eigen::RowVectorXd mu[2] = {Eigen::RowVectorXd::Constant(dz, 1.5), Eigen::RowVectorXd::Constant(dz, 1.5)};
  mu[1].tail(dz / 2).setConstant(-1.5);
  const Eigen::RowVectorXd cond[2] = {randn_matrix<double>(1, dc, rng), randn_matrix<double>(1, dc, rng)};
  AdamState<double> adam;
  std::normal_distribution<double> normal;
  for (int s = 0; s < steps; ++s) {
    store.zero_grad();
    for (int k = 0; k < batch; ++k) {
      const int c = k % 2;
      Eigen::RowVectorXd z0 = mu[c];
      for (Eigen::Index i = 0; i < dz; ++i) z0(i) += 0.3 * normal(rng);
      Tape<double> tape;
      const RegLoss<double> r =
          reg_loss(tape, store, shape, tape.constant(z0), tape.constant(cond[c]), schedule, RegWeight::kUnit, rng);
      tape.backward(scale(r.loss, 1.0 / batch));
      store.accumulate(tape);
    }
    adam_update(store, adam, 2e-3);
  }
  const DenoiseFn f = denoiser_fn(store, shape);
  auto rate = [&](double w) {
    int correct = 0;
    Rng sample_rng = make_rng(22, 0);
    for (int c = 0; c < 2; ++c) {
      for (int k = 0; k < per_component; ++k) {
        const Eigen::RowVectorXd z = sample_prior(f, cond[c], dz, schedule, w, sample_rng);
        const int nearest = (z - mu[0]).squaredNorm() < (z - mu[1]).squaredNorm() ? 0 : 1;
        correct += nearest == c;
      }
    }
    return correct / (2.0 * per_component);
  };
  MixtureResult out;
  out.rate_w0 = rate(0.0);
  out.rate_w2 = rate(2.0);
  out.seconds = seconds_since(t0);
  return out;
}

// ---- metric goldens -------------------------------------------------------

void metric_goldens() {
  Vocab vocab;
  auto ids = [&](const std::string& text) {
    for (const auto& w : tokenize(text)) {
      if (!vocab.contains(w)) vocab.add(w);
    }
    return vocab.encode(text);
  };
  const double p1 = bleu({ids("the the the the the the the")}, {{ids("the cat is on the mat")}}, 1).precisions[0];
  const double d1 = distinct_n({ids("a a b")}, 1);
  const double e1 = entropy_n(ids("a b c d"), 1);
  const double sim = pairwise_similarity({ids("a b"), ids("a c")});
  const bool pass = std::abs(p1 - 2.0 / 7.0) < 1e-12 && std::abs(d1 - 2.0 / 3.0) < 1e-12 &&
                    std::abs(e1 - std::log(4.0)) < 1e-9 && std::abs(sim - 0.5) < 1e-9;
  verdict("metric golden values", pass,
          "BLEU p1 = " + fmt(p1, 10) + " (2/7), Distinct-1 = " + fmt(d1, 10) + " (2/3), Entropy-1 = " + fmt(e1, 10) +
              " (ln 4), similarity = " + fmt(sim, 10) + " (0.5)");
}

// ---- trained models -------------------------------------------------------

struct Setup {
  ModelConfig model;
  PriorConfig prior;
  TrainConfig train;
  int contexts = 600;
};

Setup acceptance_setup() {
  Setup s;
  s.model.layers = 4;
  s.model.width = 64;
  s.model.heads = 4;
  s.model.latent_dim = 16;
  s.model.max_len = 64;
  s.prior.steps = 50;
  s.prior.beta_first = 1e-4;
  s.prior.beta_last = 0.2;
  s.train.total_steps = 10000;
  s.train.warmup_steps = 500;
  s.train.anneal_steps = 500;
  return s;
}

struct Corpus {
  Vocab vocab;
  std::vector<TrainPair> train;
  std::vector<DialogExample> eval;
};

Corpus make_corpus(std::uint64_t seed, int contexts, int max_len) {
  SynthOptions options;
  options.seed = seed;
  options.contexts = contexts;
  const SynthCorpus synth = synth_corpus(options);
  Corpus c;
  extend_vocab(c.vocab, synth.train);
  extend_vocab(c.vocab, synth.eval);
  c.train = to_train_pairs(to_examples(synth.train, c.vocab), max_len);
  c.eval = to_examples(synth.eval, c.vocab);
  return c;
}

struct Variant {
  DiorCvae<float> model;
  double train_seconds = 0.0;
  bool cached = false;
};

Variant trained(const Setup& setup, const Corpus& corpus, PriorMode mode, double memdrop, std::uint64_t seed,
                const fs::path& cache) {
  ModelConfig cfg = setup.model;
  cfg.vocab_size = corpus.vocab.size();
  PriorConfig prior = setup.prior;
  prior.mode = mode;
  TrainConfig tc = setup.train;
  tc.seed = seed;
  tc.memdrop_rate = memdrop;

  std::ostringstream key;
  key << to_string(mode) << "_md" << memdrop << "_s" << seed;
  Manifest describe_run = describe(cfg, prior);
  describe_run["acceptance.steps"] = std::to_string(tc.total_steps);
  describe_run["acceptance.contexts"] = std::to_string(setup.contexts);
  const fs::path path = cache.empty() ? fs::path() : cache / (key.str() + ".ckpt");

  if (!path.empty() && fs::exists(path)) {
    LoadedCheckpoint<float> loaded = load_checkpoint<float>(path);
    bool same = true;
    for (const auto& [k, v] : describe_run) same = same && loaded.manifest.count(k) && loaded.manifest.at(k) == v;
    if (same) {
      info("loaded " + key.str() + " from " + path.string());
      return {std::move(loaded.model), std::stod(loaded.manifest.at("acceptance.train_seconds")), true};
    }
  }

  const auto t0 = Clock::now();
  Trainer<float> trainer(DiorCvae<float>(cfg, prior, seed), tc);
  int aborted = 0;
  StepReport last;
  for (int s = 0; s < tc.total_steps; ++s) {
    last = trainer.step(corpus.train);
    aborted += last.aborted;
  }
  const double secs = seconds_since(t0);
  info("trained " + key.str() + " in " + fmt(secs, 4) + " s; final rc " + fmt(last.reconstruction) + ", prior term " +
       fmt(last.prior_term) + ", aborted steps " + std::to_string(aborted));
  if (!path.empty()) {
    fs::create_directories(cache);
    Manifest extra = describe_run;
    extra["acceptance.train_seconds"] = fmt(secs, 10);
    save_checkpoint(path, trainer.model(), extra);
  }
  return {trainer.model(), secs, false};
}

EvalResult run_eval(const DiorCvae<float>& model, const Corpus& corpus, std::uint64_t seed) {
  EvalOptions options;
  options.samples = 5;
  options.seed = seed;
  options.generation.strategy = DecodeStrategy::kGreedy;
  return evaluate(model, corpus.eval, options);
}

/// Share of contexts whose greedy response changes when unit Gaussian noise
/// is added to every coordinate of a prior-sampled z.
double latent_probe(const DiorCvae<float>& model, const Corpus& corpus, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x9b);
  std::normal_distribution<double> normal;
  GenerationParams params;
  params.num_samples = 1;
  int changed = 0;
  for (const auto& ex : corpus.eval) {
    const std::vector<int> ids = format_context(ex, model.config().max_len).ids;
    const auto enc = encode_context(model, std::span<const int>(ids));
    const auto z = sample_latents(model, enc, 0.0, 0, rng);
    auto moved = z;
    for (auto& layer : moved) {
      for (Eigen::Index i = 0; i < layer.size(); ++i) layer(i) += static_cast<float>(normal(rng));
    }
    const auto base = generate(model.params(), model.config(), z, enc.memory, params, rng);
    const auto other = generate(model.params(), model.config(), moved, enc.memory, params, rng);
    changed += base != other;
  }
  return static_cast<double>(changed) / static_cast<double>(corpus.eval.size());
}

std::string join(const std::vector<double>& xs, int precision = 4) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + fmt(xs[i], precision);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("acceptance suite");
  std::string cache;
  int steps = 0;
  app.add_option("--cache", cache, "directory for trained checkpoints, reused when the setup matches");
  app.add_option("--steps", steps, "override training steps (exploration only; the criteria assume the default)");
  CLI11_PARSE(app, argc, argv);

  const Setup setup = [&] {
    Setup s = acceptance_setup();
    if (steps > 0) s.train.total_steps = steps;
    return s;
  }();
  const NoiseSchedule schedule = build_schedule(setup.prior.steps, setup.prior.beta_first, setup.prior.beta_last,
                                                SamplerNoise::kDeterministic, setup.prior.cond_drop);
  std::cout << "acceptance setup: L = " << setup.model.layers << ", d = " << setup.model.width
            << ", d_z = " << setup.model.latent_dim << ", T = " << schedule.steps << ", beta " << setup.prior.beta_first
            << " .. " << setup.prior.beta_last << " (terminal alpha_bar " << fmt(schedule.alpha_bar.back()) << "), "
            << setup.train.total_steps << " steps, " << setup.contexts << " synthetic contexts" << std::endl;

  gradient_integrity();
  diffusion_correctness(schedule);

  const MixtureResult mix = mixture_recovery(schedule, 2000);
  verdict("mixture recovery", mix.rate_w0 >= 0.95 && mix.rate_w2 >= mix.rate_w0 && mix.seconds < 300.0,
          "correct component " + fmt(mix.rate_w0) + " at w = 0 (>= 0.95), " + fmt(mix.rate_w2) + " at w = 2, " +
              fmt(mix.seconds, 3) + " s (limit 300 s)");
  const NoiseSchedule weak = build_schedule(50, 5e-6, 1e-3);
  const MixtureResult weak_mix = mixture_recovery(weak, 2000);
  info("for reference, beta 5e-6 .. 1e-3 (terminal alpha_bar " + fmt(weak.alpha_bar.back()) + ") recovers " +
       fmt(weak_mix.rate_w0) + " at w = 0 and " + fmt(weak_mix.rate_w2) + " at w = 2");

  metric_goldens();

  const std::vector<std::uint64_t> seeds{1, 2, 3};
  struct Row {
    EvalResult diffusion, gaussian, low_drop;
    double probe = 0.0;
  };
  std::vector<Row> rows;
  std::vector<double> times;
  Variant first;
  std::vector<std::vector<int>> throughput_contexts;
  for (std::uint64_t seed : seeds) {
    const Corpus corpus = make_corpus(seed, setup.contexts, setup.model.max_len);
    Row row;
    Variant diff = trained(setup, corpus, PriorMode::kDiffusion, 0.7, seed, cache);
    row.diffusion = run_eval(diff.model, corpus, seed);
    row.probe = latent_probe(diff.model, corpus, seed);
    Variant gauss = trained(setup, corpus, PriorMode::kGaussian, 0.7, seed, cache);
    row.gaussian = run_eval(gauss.model, corpus, seed);
    Variant low = trained(setup, corpus, PriorMode::kDiffusion, 0.1, seed, cache);
    row.low_drop = run_eval(low.model, corpus, seed);
    times.insert(times.end(), {diff.train_seconds, gauss.train_seconds, low.train_seconds});
    if (seed == seeds.front()) {
      first = std::move(diff);
      for (const auto& ex : corpus.eval) throughput_contexts.push_back(format_context(ex, setup.model.max_len).ids);
    }
    rows.push_back(std::move(row));
  }
  const double slowest = *std::max_element(times.begin(), times.end());

  {
    bool pass = slowest <= 1800.0;
    std::vector<double> d, g;
    for (const Row& r : rows) {
      d.push_back(r.diffusion.report.distinct2);
      g.push_back(r.gaussian.report.distinct2);
      pass = pass && d.back() > g.back();
    }
    verdict("one-to-many direction", pass,
            "Distinct-2 diffusion [" + join(d) + "] vs gaussian [" + join(g) + "] on seeds 1, 2, 3 (" +
                std::to_string(rows.front().diffusion.samples.size()) + " held-out contexts, 5 samples); slowest variant " +
                fmt(slowest, 4) + " s (limit 1800 s)");
  }
  {
    bool pass = true;
    std::vector<double> hi, lo;
    for (const Row& r : rows) {
      hi.push_back(r.diffusion.report.similarity);
      lo.push_back(r.low_drop.report.similarity);
      pass = pass && hi.back() < lo.back();
    }
    verdict("memory-dropout direction", pass,
            "pairwise similarity at rate 0.7 [" + join(hi) + "] vs rate 0.1 [" + join(lo) + "]");
  }
  {
    int wins = 0;
    std::cout << "     perplexity by reference count (refs 1..5)" << std::endl;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& d = rows[i].diffusion.report.perplexity_by_refs;
      const auto& g = rows[i].gaussian.report.perplexity_by_refs;
      info("seed " + std::to_string(seeds[i]) + " diffusion: " + join(d));
      info("seed " + std::to_string(seeds[i]) + " gaussian:  " + join(g));
      wins += !d.empty() && !g.empty() && d.back() <= g.back();
    }
    verdict("multi-reference perplexity", wins >= 2,
            "diffusion <= gaussian at 5 references on " + std::to_string(wins) + " of 3 seeds (need 2)");
  }
  {
    GenerationParams params;
    params.strategy = DecodeStrategy::kGreedy;
    params.num_samples = 1;
    params.steps = 50;
    const Throughput full = measure_throughput(first.model, throughput_contexts, params, 4000);
    params.steps = 1;
    const Throughput one = measure_throughput(first.model, throughput_contexts, params, 4000);
    verdict("throughput", full.tokens_per_sec * 2.0 >= one.tokens_per_sec,
            fmt(full.tokens_per_sec) + " tokens/s at T = 50 vs " + fmt(one.tokens_per_sec) +
                " at T = 1 (ratio " + fmt(one.tokens_per_sec / full.tokens_per_sec, 3) + ", limit 2)");
  }
  {
    bool pass = true;
    std::vector<double> shares;
    for (const Row& r : rows) {
      shares.push_back(r.probe);
      pass = pass && r.probe >= 0.5;
    }
    verdict("posterior-collapse probe", pass,
            "share of contexts whose response changes under a unit perturbation of z: [" + join(shares) +
                "] on seeds 1, 2, 3 (need >= 0.5 each)");
  }

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
