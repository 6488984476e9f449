#include "dior/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace dior {

NoiseSchedule build_schedule(int steps, double beta_first, double beta_last, SamplerNoise noise,
                             double cond_drop) {
  if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
  if (!(beta_first > 0.0 && beta_first <= beta_last && beta_last < 1.0)) {
    throw std::invalid_argument("schedule: need 0 < beta_first <= beta_last < 1");
  }
  if (!(cond_drop >= 0.0 && cond_drop <= 1.0)) {
    throw std::invalid_argument("schedule: condition-drop probability must lie in [0, 1]");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.noise = noise;
  s.cond_drop = cond_drop;
  s.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  s.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  s.sigma.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    s.beta[t] = beta_first + frac * (beta_last - beta_first);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
  }
  for (int t = 1; t <= steps; ++t) s.sigma[t] = s.transition_sigma(t, t - 1);
  // The first step's posterior variance is zero; its variance falls back to beta_1.
  if (noise == SamplerNoise::kStochastic) s.sigma[1] = std::sqrt(s.beta[1]);
  return s;
}

double NoiseSchedule::transition_sigma(int t, int t_prev) const {
  if (t < 1 || t > steps || t_prev < 0 || t_prev >= t) {
    throw std::out_of_range("schedule: invalid transition " + std::to_string(t) + " -> " +
                            std::to_string(t_prev));
  }
  if (noise == SamplerNoise::kDeterministic) return 0.0;
  const double a = alpha_bar[static_cast<std::size_t>(t)];
  const double a_prev = alpha_bar[static_cast<std::size_t>(t_prev)];
  const double var = (1.0 - a_prev) / (1.0 - a) * (1.0 - a / a_prev);
  if (var > 1.0 - a_prev + 1e-15) {
    throw std::invalid_argument("schedule: sampler variance exceeds 1 - alpha_bar_{t-1}");
  }
  return std::sqrt(std::max(var, 0.0));
}

double NoiseSchedule::terminal_snr() const {
  const double a = alpha_bar[static_cast<std::size_t>(steps)];
  return a / (1.0 - a);
}

namespace {

void check_timestep(int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.steps) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.steps) + "]");
  }
}

}  // namespace

Eigen::RowVectorXd forward_noise(const Eigen::RowVectorXd& z0, int t, const NoiseSchedule& schedule,
                                 Rng& rng) {
  check_timestep(t, schedule);
  const double a = schedule.alpha_bar[static_cast<std::size_t>(t)];
  Eigen::RowVectorXd eps = randn_matrix<double>(1, z0.size(), rng);
  return std::sqrt(a) * z0 + std::sqrt(1.0 - a) * eps;
}

template <typename S>
Var<S> forward_noise(Var<S> z0, int t, const NoiseSchedule& schedule, Rng& rng) {
  check_timestep(t, schedule);
  const double a = schedule.alpha_bar[static_cast<std::size_t>(t)];
  Var<S> eps = randn(z0.tape(), z0.rows(), z0.cols(), rng);
  return add(scale(z0, static_cast<S>(std::sqrt(a))), scale(eps, static_cast<S>(std::sqrt(1.0 - a))));
}

Eigen::RowVectorXd time_embedding(int t, int width) {
  Eigen::RowVectorXd pe(width);
  for (int i = 0; i < width; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / width);
    pe(i) = std::sin(t * freq);
    if (i + 1 < width) pe(i + 1) = std::cos(t * freq);
  }
  return pe;
}

template <typename S>
void init_denoiser(ParameterStore<S>& store, const DenoiserShape& shape, Rng& rng, const std::string& prefix) {
  if (shape.condition_dim < 1 || shape.latent_dim < 1 || shape.hidden < 1) {
    throw std::invalid_argument("denoiser: dimensions must be positive");
  }
  add_linear(store, prefix + ".in", shape.condition_dim + shape.latent_dim, shape.hidden, rng);
  add_linear(store, prefix + ".fc1", shape.hidden, shape.hidden, rng);
  add_linear(store, prefix + ".fc2", shape.hidden, shape.latent_dim, rng);
}

template <typename S>
Var<S> denoise(Tape<S>& tape, const ParameterStore<S>& store, const DenoiserShape& shape, Var<S> cond,
               int t, Var<S> z_t, const std::string& prefix) {
  if (cond.rows() != 1 || cond.cols() != shape.condition_dim) {
    throw ShapeError("denoise: condition " + shape_string(cond.rows(), cond.cols()) + " where " +
                     shape_string(1, shape.condition_dim) + " is required");
  }
  if (z_t.rows() != 1 || z_t.cols() != shape.latent_dim) {
    throw ShapeError("denoise: latent " + shape_string(z_t.rows(), z_t.cols()) + " where " +
                     shape_string(1, shape.latent_dim) + " is required");
  }
  Var<S> pe = tape.constant(time_embedding(t, shape.condition_dim).template cast<S>());
  Var<S> h = linear(tape, store, prefix + ".in", concat_cols<S>({add(pe, cond), z_t}));
  h = gelu(linear(tape, store, prefix + ".fc1", gelu(h)));
  return linear(tape, store, prefix + ".fc2", h);
}

template <typename S>
DenoiseFn denoiser_fn(const ParameterStore<S>& store, const DenoiserShape& shape, const std::string& prefix) {
  return [&store, shape, prefix](const Eigen::RowVectorXd& cond, int t,
                                 const Eigen::RowVectorXd& z_t) -> Eigen::RowVectorXd {
    Tape<S> tape(false);
    Var<S> out = denoise(tape, store, shape, tape.constant(cond.cast<S>()), t,
                         tape.constant(z_t.cast<S>()), prefix);
    return out.value().row(0).template cast<double>();
  };
}

Eigen::RowVectorXd cfg_predict(const DenoiseFn& f, const Eigen::RowVectorXd& cond, int t,
                               const Eigen::RowVectorXd& z_t, double w) {
  if (w < 0.0) throw std::invalid_argument("guidance weight w must be >= 0");
  Eigen::RowVectorXd conditional = f(cond, t, z_t);
  if (w == 0.0) return conditional;
  Eigen::RowVectorXd unconditional = f(Eigen::RowVectorXd::Zero(cond.size()), t, z_t);
  return (1.0 + w) * conditional - w * unconditional;
}

std::vector<int> sampling_timesteps(int schedule_steps, int steps) {
  if (steps <= 0 || steps > schedule_steps) steps = schedule_steps;
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(steps));
  for (int i = 1; i <= steps; ++i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(i) * schedule_steps / steps));
    ts.push_back(std::max(t, ts.empty() ? 1 : ts.back() + 1));
  }
  return ts;
}

Eigen::RowVectorXd sample_prior(const DenoiseFn& f, const Eigen::RowVectorXd& cond, int latent_dim,
                                const NoiseSchedule& schedule, double w, Rng& rng, int steps,
                                std::optional<Eigen::RowVectorXd> z_start) {
  const std::vector<int> ts = sampling_timesteps(schedule.steps, steps);
  Eigen::RowVectorXd z;
  if (z_start) {
    z = *z_start;
  } else {
    z = randn_matrix<double>(1, latent_dim, rng);
  }
  for (std::size_t i = ts.size(); i-- > 0;) {
    const int t = ts[i];
    Eigen::RowVectorXd z0_hat = cfg_predict(f, cond, t, z, w);
    if (i == 0) return z0_hat;
    const int t_prev = ts[i - 1];
    const double a = schedule.alpha_bar[static_cast<std::size_t>(t)];
    const double a_prev = schedule.alpha_bar[static_cast<std::size_t>(t_prev)];
    const double sigma = schedule.transition_sigma(t, t_prev);
    const Eigen::RowVectorXd eps_hat = (z - std::sqrt(a) * z0_hat) / std::sqrt(1.0 - a);
    z = std::sqrt(a_prev) * z0_hat + std::sqrt(std::max(1.0 - a_prev - sigma * sigma, 0.0)) * eps_hat;
    if (sigma > 0.0) z += sigma * randn_matrix<double>(1, z.size(), rng);
  }
  return z;
}

std::string to_string(RegWeight w) { return w == RegWeight::kUnit ? "unit" : "literal"; }

RegWeight parse_reg_weight(const std::string& name) {
  if (name == "unit") return RegWeight::kUnit;
  if (name == "literal") return RegWeight::kLiteral;
  throw std::invalid_argument("unknown regression weight mode '" + name + "'");
}

template <typename S>
RegLoss<S> reg_loss(Tape<S>& tape, const ParameterStore<S>& store, const DenoiserShape& shape, Var<S> z0,
                    Var<S> cond, const NoiseSchedule& schedule, RegWeight weight, Rng& rng,
                    const std::string& prefix) {
  RegLoss<S> out;
  out.t = std::uniform_int_distribution<int>(1, schedule.steps)(rng);
  double factor = 1.0;
  if (weight == RegWeight::kLiteral) {
    const double sigma = schedule.sigma[static_cast<std::size_t>(out.t)];
    if (sigma <= 0.0) {
      throw std::invalid_argument("reg_loss: literal weighting needs sigma_t > 0 (t = " +
                                  std::to_string(out.t) + ")");
    }
    factor = 1.0 / (2.0 * sigma * sigma);
  }
  Var<S> z_t = forward_noise(z0, out.t, schedule, rng);
  out.condition_dropped = uniform01(rng) < schedule.cond_drop;
  Var<S> c = out.condition_dropped ? tape.constant(Mat<S>::Zero(cond.rows(), cond.cols())) : cond;
  Var<S> z0_hat = denoise(tape, store, shape, c, out.t, z_t, prefix);
  out.loss = scale(sum_squares(sub(z0_hat, z0)), static_cast<S>(factor));
  return out;
}

template <typename S>
Var<S> terminal_kl(Var<S> z0, const NoiseSchedule& schedule) {
  const double a = schedule.alpha_bar[static_cast<std::size_t>(schedule.steps)];
  const double per_dim = 0.5 * ((1.0 - a) - 1.0 - std::log(1.0 - a));
  return add_scalar(scale(sum_squares(z0), static_cast<S>(0.5 * a)), static_cast<S>(per_dim * static_cast<double>(z0.size())));
}

#define DIOR_INSTANTIATE_DIFFUSION(S)                                                            \
  template Var<S> forward_noise(Var<S>, int, const NoiseSchedule&, Rng&);                        \
  template void init_denoiser(ParameterStore<S>&, const DenoiserShape&, Rng&, const std::string&); \
  template Var<S> denoise(Tape<S>&, const ParameterStore<S>&, const DenoiserShape&, Var<S>, int, \
                          Var<S>, const std::string&);                                           \
  template DenoiseFn denoiser_fn(const ParameterStore<S>&, const DenoiserShape&,                 \
                                 const std::string&);                                            \
  template RegLoss<S> reg_loss(Tape<S>&, const ParameterStore<S>&, const DenoiserShape&, Var<S>, \
                               Var<S>, const NoiseSchedule&, RegWeight, Rng&, const std::string&); \
  template Var<S> terminal_kl(Var<S>, const NoiseSchedule&);

DIOR_INSTANTIATE_DIFFUSION(float)
DIOR_INSTANTIATE_DIFFUSION(double)

#undef DIOR_INSTANTIATE_DIFFUSION

}  // namespace dior
