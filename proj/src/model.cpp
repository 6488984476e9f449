#include "dior/model.hpp"

#include "dior/tokens.hpp"

namespace dior {

std::string to_string(PriorMode m) { return m == PriorMode::kDiffusion ? "diffusion" : "gaussian"; }

PriorMode parse_prior_mode(const std::string& name) {
  if (name == "diffusion") return PriorMode::kDiffusion;
  if (name == "gaussian") return PriorMode::kGaussian;
  throw std::invalid_argument("unknown prior mode '" + name + "'");
}

template <typename S>
DiorCvae<S>::DiorCvae(ModelConfig model, PriorConfig prior, std::uint64_t seed)
    : config_(model), prior_(prior) {
  validate(config_);
  schedule_ = build_schedule(prior_.steps, prior_.beta_first, prior_.beta_last, prior_.noise, prior_.cond_drop);
  Rng rng = make_rng(seed, 0x1d);
  init_backbone(params_, config_, rng);
  init_latent(params_, config_, rng);
  // The denoiser exists in both prior modes so parameter sets always match.
  init_denoiser(params_, denoiser_shape(), rng);
}

template <typename S>
DiorCvae<S> DiorCvae<S>::from_parameters(ModelConfig model, PriorConfig prior, ParameterStore<S> params) {
  validate(model);
  DiorCvae<S> out;
  out.config_ = model;
  out.prior_ = prior;
  out.schedule_ = build_schedule(prior.steps, prior.beta_first, prior.beta_last, prior.noise, prior.cond_drop);
  out.params_ = std::move(params);
  return out;
}

template <typename S>
DenoiserShape DiorCvae<S>::denoiser_shape() const {
  return {config_.condition_dim(), config_.diffusion_dim(),
          prior_.denoiser_hidden > 0 ? prior_.denoiser_hidden : config_.condition_dim()};
}

namespace {

std::vector<int> with_eos(std::span<const int> ids) {
  std::vector<int> out(ids.begin(), ids.end());
  out.push_back(tokens::kEos);
  return out;
}

std::vector<int> with_bos(std::span<const int> ids) {
  std::vector<int> out{tokens::kBos};
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

}  // namespace

template <typename S>
TrainTerms<S> forward_train(Tape<S>& tape, const DiorCvae<S>& model, std::span<const int> context,
                            std::span<const int> response, const TrainOptions& options, Rng& rng,
                            Rng& prior_rng) {
  const ModelConfig& cfg = model.config();
  const ParameterStore<S>& params = model.params();
  const std::vector<int> response_in = with_eos(response);

  // Context and response go through the same encoder stack.
  EncoderOutputs<S> enc_c = encode(tape, params, cfg, context);
  EncoderOutputs<S> enc_r = encode(tape, params, cfg, std::span<const int>(response_in));

  std::vector<Var<S>> zs, means, log_sigmas, summaries;
  Var<S> carry = tape.constant(Mat<S>::Zero(1, cfg.latent_dim));
  for (int l = 0; l < cfg.layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    Var<S> e_c = attn_pool(tape, params, l, enc_c.layers[li], std::span<const std::uint8_t>(enc_c.non_pad));
    Var<S> e_r = attn_pool(tape, params, l, enc_r.layers[li], std::span<const std::uint8_t>(enc_r.non_pad));
    if (l > 0) carry = aggregate_lower(tape, params, l, carry, zs.back());
    Posterior<S> post = posterior_params(tape, params, cfg, l, carry, e_c, e_r);
    zs.push_back(reparameterize(post.mean, post.log_sigma, rng));
    means.push_back(post.mean);
    log_sigmas.push_back(post.log_sigma);
    summaries.push_back(e_c);
  }

  const std::vector<int> decoder_in = with_bos(response);
  Var<S> logits = decode(tape, params, cfg, zs, enc_c.memory(), std::span<const int>(decoder_in),
                         DecodeMode::kTrain, options.memdrop_rate, &rng);

  TrainTerms<S> terms;
  terms.target_tokens = static_cast<int>(response_in.size());
  terms.reconstruction = cross_entropy(logits, std::span<const int>(response_in),
                                       static_cast<S>(options.label_smoothing));
  Var<S> log_sigma_all = cfg.layers == 1 ? log_sigmas.front() : concat_cols(log_sigmas);
  terms.neg_entropy = neg_entropy(log_sigma_all);

  if (model.prior().mode == PriorMode::kDiffusion) {
    Var<S> z = cfg.layers == 1 ? zs.front() : concat_cols(zs);
    if (options.detach_prior_input) z = tape.constant(z.value());
    Var<S> cond = cfg.layers == 1 ? summaries.front() : concat_cols(summaries);
    RegLoss<S> reg = reg_loss(tape, params, model.denoiser_shape(), z, cond, model.schedule(),
                              options.reg_weight, prior_rng);
    terms.prior_term = model.prior().terminal_kl ? add(reg.loss, terminal_kl(z, model.schedule())) : reg.loss;
    terms.timestep = reg.t;
    terms.condition_dropped = reg.condition_dropped;
  } else {
    Var<S> mean_all = cfg.layers == 1 ? means.front() : concat_cols(means);
    terms.prior_term = gaussian_cross_entropy(mean_all, log_sigma_all);
  }
  terms.total = add(terms.reconstruction,
                    scale(add(terms.neg_entropy, terms.prior_term), static_cast<S>(options.anneal)));
  return terms;
}

template <typename S>
ContextEncoding<S> encode_context(const DiorCvae<S>& model, std::span<const int> context) {
  const ModelConfig& cfg = model.config();
  Tape<S> tape(false);
  EncoderOutputs<S> enc = encode(tape, model.params(), cfg, context);
  ContextEncoding<S> out;
  out.condition.resize(cfg.condition_dim());
  for (int l = 0; l < cfg.layers; ++l) {
    Var<S> e = attn_pool(tape, model.params(), l, enc.layers[static_cast<std::size_t>(l)],
                         std::span<const std::uint8_t>(enc.non_pad));
    out.condition.segment(l * cfg.width, cfg.width) = e.value().row(0).template cast<double>();
  }
  out.memory.states = enc.layers.back().value();
  out.memory.keep = enc.non_pad;
  return out;
}

template <typename S>
std::vector<RowVec<S>> split_latent(const DiorCvae<S>& model, const Eigen::RowVectorXd& z) {
  const ModelConfig& cfg = model.config();
  if (z.size() != cfg.diffusion_dim()) {
    throw ShapeError("split_latent: latent of width " + std::to_string(z.size()) + " where " +
                     std::to_string(cfg.diffusion_dim()) + " is required");
  }
  std::vector<RowVec<S>> out;
  for (int l = 0; l < cfg.layers; ++l) {
    out.push_back(z.segment(l * cfg.latent_dim, cfg.latent_dim).template cast<S>());
  }
  return out;
}

template <typename S>
std::vector<RowVec<S>> sample_latents(const DiorCvae<S>& model, const ContextEncoding<S>& encoding,
                                      double guidance, int steps, Rng& rng) {
  const int dim = model.config().diffusion_dim();
  Eigen::RowVectorXd z;
  if (model.prior().mode == PriorMode::kDiffusion) {
    z = sample_prior(denoiser_fn(model.params(), model.denoiser_shape()), encoding.condition, dim,
                     model.schedule(), guidance, rng, steps);
  } else {
    z = randn_matrix<double>(1, dim, rng);
  }
  return split_latent(model, z);
}

template <typename S>
std::vector<std::vector<int>> respond(const DiorCvae<S>& model, std::span<const int> context,
                                      const GenerationParams& params, Rng& rng) {
  validate(params);
  const ContextEncoding<S> encoding = encode_context(model, context);
  GenerationParams single = params;
  single.num_samples = 1;
  std::vector<std::vector<int>> out;
  for (int s = 0; s < params.num_samples; ++s) {
    const auto latents = sample_latents(model, encoding, params.guidance, params.steps, rng);
    auto seqs = generate(model.params(), model.config(), latents, encoding.memory, single, rng);
    out.push_back(std::move(seqs.front()));
  }
  return out;
}

template <typename S>
double response_log_likelihood(const DiorCvae<S>& model, const ContextEncoding<S>& encoding,
                               const std::vector<RowVec<S>>& latents, std::span<const int> response) {
  Tape<S> tape(false);
  std::vector<Var<S>> zs;
  for (const auto& z : latents) zs.push_back(tape.constant(z));
  Memory<S> mem{tape.constant(encoding.memory.states), encoding.memory.keep};
  const std::vector<int> input = with_bos(response);
  const std::vector<int> target = with_eos(response);
  Var<S> logp = log_softmax(decode(tape, model.params(), model.config(), zs, mem, std::span<const int>(input)));
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    total += static_cast<double>(logp.value()(static_cast<Eigen::Index>(i), target[i]));
  }
  return total;
}

#define DIOR_INSTANTIATE_MODEL(S)                                                                   \
  template class DiorCvae<S>;                                                                       \
  template TrainTerms<S> forward_train(Tape<S>&, const DiorCvae<S>&, std::span<const int>,          \
                                       std::span<const int>, const TrainOptions&, Rng&, Rng&);      \
  template ContextEncoding<S> encode_context(const DiorCvae<S>&, std::span<const int>);             \
  template std::vector<RowVec<S>> split_latent(const DiorCvae<S>&, const Eigen::RowVectorXd&);      \
  template std::vector<RowVec<S>> sample_latents(const DiorCvae<S>&, const ContextEncoding<S>&,     \
                                                 double, int, Rng&);                                \
  template std::vector<std::vector<int>> respond(const DiorCvae<S>&, std::span<const int>,          \
                                                 const GenerationParams&, Rng&);                    \
  template double response_log_likelihood(const DiorCvae<S>&, const ContextEncoding<S>&,            \
                                          const std::vector<RowVec<S>>&, std::span<const int>);

DIOR_INSTANTIATE_MODEL(float)
DIOR_INSTANTIATE_MODEL(double)

#undef DIOR_INSTANTIATE_MODEL

}  // namespace dior
