#include "dior/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dior {

void validate(const TrainConfig& cfg) {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (!(cfg.lr > 0.0)) fail("lr must be positive");
  if (cfg.warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (cfg.total_steps < 0) fail("total_steps must be >= 0");
  if (cfg.anneal_steps < 0) fail("anneal_steps must be >= 0");
  if (!(cfg.label_smoothing >= 0.0 && cfg.label_smoothing < 1.0)) fail("label_smoothing must lie in [0, 1)");
  if (!(cfg.memdrop_rate >= 0.0 && cfg.memdrop_rate <= 1.0)) fail("memdrop must lie in [0, 1]");
  if (cfg.batch_size < 1) fail("batch_size must be >= 1");
  if (!(cfg.clip_norm > 0.0)) fail("clip_norm must be positive");
  if (cfg.checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

double anneal_weight(int step, int anneal_steps) {
  if (anneal_steps <= 0) return 1.0;
  return std::clamp(static_cast<double>(step) / anneal_steps, 0.0, 1.0);
}

double learning_rate(int step, const TrainConfig& cfg) {
  if (cfg.warmup_steps <= 0) return cfg.lr;
  const double s = step + 1.0;
  return cfg.lr * std::min(s / cfg.warmup_steps, std::sqrt(cfg.warmup_steps / s));
}

std::string StepReport::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["prior"] = to_string(mode);
  j["rc"] = reconstruction;
  j["neg_xent"] = neg_entropy;
  if (mode == PriorMode::kDiffusion) {
    j["reg"] = prior_term;
  } else {
    j["xent"] = prior_term;
    j["kl"] = neg_entropy + prior_term;
  }
  j["total"] = total;
  j["anneal"] = anneal;
  j["grad_norm"] = grad_norm;
  j["lr"] = lr;
  j["tokens"] = tokens;
  j["tokens_per_sec"] = tokens_per_sec;
  if (aborted) j["aborted"] = true;
  return j.dump();
}

template <typename S>
void adam_update(ParameterStore<S>& params, AdamState<S>& adam, double lr, double grad_scale) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ++adam.t;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam.t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam.t));
  for (auto& [name, p] : params.all()) {
    auto m_it = adam.m.try_emplace(name, Mat<S>::Zero(p->value.rows(), p->value.cols())).first;
    auto v_it = adam.v.try_emplace(name, Mat<S>::Zero(p->value.rows(), p->value.cols())).first;
    Mat<S>& m = m_it->second;
    Mat<S>& v = v_it->second;
    const Mat<S> g = p->grad * static_cast<S>(grad_scale);
    m = static_cast<S>(kBeta1) * m + static_cast<S>(1 - kBeta1) * g;
    v = static_cast<S>(kBeta2) * v + static_cast<S>(1 - kBeta2) * g.cwiseProduct(g);
    p->value.array() -= static_cast<S>(lr) * (m.array() / static_cast<S>(c1)) /
                        ((v.array() / static_cast<S>(c2)).sqrt() + static_cast<S>(kEps));
  }
}

template <typename S>
Trainer<S>::Trainer(DiorCvae<S> model, TrainConfig config)
    : model_(std::move(model)),
      config_(config),
      rng_(make_rng(config.seed, 1)),
      prior_rng_(make_rng(config.seed, 2)),
      data_rng_(make_rng(config.seed, 3)) {
  validate(config_);
  for (const auto& [name, p] : model_.params().all()) {
    adam_.m[name] = Mat<S>::Zero(p->value.rows(), p->value.cols());
    adam_.v[name] = Mat<S>::Zero(p->value.rows(), p->value.cols());
  }
}

template <typename S>
StepReport Trainer<S>::step(const std::vector<TrainPair>& data) {
  if (data.empty()) throw std::invalid_argument("train: empty training set");
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<TrainPair> batch;
  for (int i = 0; i < config_.batch_size; ++i) batch.push_back(data[pick(data_rng_)]);
  return step(std::span<const TrainPair>(batch));
}

template <typename S>
StepReport Trainer<S>::step(std::span<const TrainPair> batch) {
  if (batch.empty()) throw std::invalid_argument("train: empty batch");
  const auto start = std::chrono::steady_clock::now();
  StepReport report;
  report.step = step_;
  report.mode = model_.prior().mode;
  report.anneal = anneal_weight(step_, config_.anneal_steps);
  report.lr = learning_rate(step_, config_);

  TrainOptions options;
  options.memdrop_rate = config_.memdrop_rate;
  options.label_smoothing = config_.label_smoothing;
  options.anneal = report.anneal;
  options.reg_weight = config_.reg_weight;
  options.detach_prior_input = config_.detach_prior_input;

  auto& params = model_.params();
  params.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const TrainPair& ex : batch) {
    Tape<S> tape;
    TrainTerms<S> terms = forward_train(tape, model_, std::span<const int>(ex.context),
                                        std::span<const int>(ex.response), options, rng_, prior_rng_);
    tape.backward(scale(terms.total, static_cast<S>(inv_b)));
    params.accumulate(tape);
    report.reconstruction += inv_b * static_cast<double>(terms.reconstruction.value()(0, 0));
    report.neg_entropy += inv_b * static_cast<double>(terms.neg_entropy.value()(0, 0));
    report.prior_term += inv_b * static_cast<double>(terms.prior_term.value()(0, 0));
    report.total += inv_b * static_cast<double>(terms.total.value()(0, 0));
    report.tokens += terms.target_tokens;
  }

  double sq = 0.0;
  for (const auto& [_, p] : params.all()) sq += p->grad.template cast<double>().squaredNorm();
  report.grad_norm = std::sqrt(sq);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.tokens_per_sec = elapsed > 0.0 ? static_cast<double>(report.tokens) / elapsed : 0.0;

  if (!std::isfinite(report.total) || !std::isfinite(report.grad_norm)) {
    report.aborted = true;
    params.zero_grad();
    return report;
  }

  const double clip = report.grad_norm > config_.clip_norm ? config_.clip_norm / report.grad_norm : 1.0;
  adam_update(params, adam_, report.lr, clip);
  ++step_;
  return report;
}

namespace {

std::string rng_text(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void rng_restore(Rng& rng, const std::string& text) {
  std::istringstream in(text);
  in >> rng;
  if (!in) throw std::runtime_error("checkpoint: corrupt random-generator state");
}

}  // namespace

template <typename S>
std::map<std::string, std::string> Trainer<S>::state() const {
  return {{"trainer.step", std::to_string(step_)},
          {"trainer.rng", rng_text(rng_)},
          {"trainer.prior_rng", rng_text(prior_rng_)},
          {"trainer.data_rng", rng_text(data_rng_)}};
}

template <typename S>
void Trainer<S>::restore(const std::map<std::string, std::string>& state) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = state.find(key);
    if (it == state.end()) throw std::runtime_error("checkpoint: missing trainer field '" + key + "'");
    return it->second;
  };
  step_ = std::stoi(get("trainer.step"));
  rng_restore(rng_, get("trainer.rng"));
  rng_restore(prior_rng_, get("trainer.prior_rng"));
  rng_restore(data_rng_, get("trainer.data_rng"));
}

template class Trainer<float>;
template class Trainer<double>;
template void adam_update(ParameterStore<float>&, AdamState<float>&, double, double);
template void adam_update(ParameterStore<double>&, AdamState<double>&, double, double);

}  // namespace dior
