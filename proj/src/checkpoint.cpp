#include "dior/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace dior {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'I', 'O', 'R', 'C', 'K', 'P', 'T'};

std::string num(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

const std::string& field(const Manifest& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw std::runtime_error("checkpoint manifest lacks '" + key + "'");
  return it->second;
}

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("checkpoint truncated");
  return v;
}

template <typename S, typename Stored>
void put_matrix(std::ostream& out, const std::string& name, const Mat<S>& m) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  const Mat<Stored> data = m.template cast<Stored>();
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(Stored)));
}

template <typename Stored, typename S>
Mat<S> get_matrix(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  Mat<Stored> data(rows, cols);
  if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(Stored)))) {
    throw std::runtime_error("checkpoint truncated");
  }
  return data.template cast<S>();
}

}  // namespace

Manifest describe(const ModelConfig& model, const PriorConfig& prior) {
  return {
      {"model.layers", std::to_string(model.layers)},
      {"model.width", std::to_string(model.width)},
      {"model.heads", std::to_string(model.heads)},
      {"model.latent_dim", std::to_string(model.latent_dim)},
      {"model.vocab_size", std::to_string(model.vocab_size)},
      {"model.max_len", std::to_string(model.max_len)},
      {"model.ffn_mult", std::to_string(model.ffn_mult)},
      {"prior.mode", to_string(prior.mode)},
      {"prior.steps", std::to_string(prior.steps)},
      {"prior.beta_first", num(prior.beta_first)},
      {"prior.beta_last", num(prior.beta_last)},
      {"prior.cond_drop", num(prior.cond_drop)},
      {"prior.sampler", prior.noise == SamplerNoise::kDeterministic ? "deterministic" : "stochastic"},
      {"prior.denoiser_hidden", std::to_string(prior.denoiser_hidden)},
      {"prior.terminal_kl", prior.terminal_kl ? "true" : "false"},
  };
}

ModelConfig model_config_from(const Manifest& m) {
  ModelConfig c;
  c.layers = std::stoi(field(m, "model.layers"));
  c.width = std::stoi(field(m, "model.width"));
  c.heads = std::stoi(field(m, "model.heads"));
  c.latent_dim = std::stoi(field(m, "model.latent_dim"));
  c.vocab_size = std::stoi(field(m, "model.vocab_size"));
  c.max_len = std::stoi(field(m, "model.max_len"));
  c.ffn_mult = std::stoi(field(m, "model.ffn_mult"));
  return c;
}

PriorConfig prior_config_from(const Manifest& m) {
  PriorConfig p;
  p.mode = parse_prior_mode(field(m, "prior.mode"));
  p.steps = std::stoi(field(m, "prior.steps"));
  p.beta_first = std::stod(field(m, "prior.beta_first"));
  p.beta_last = std::stod(field(m, "prior.beta_last"));
  p.cond_drop = std::stod(field(m, "prior.cond_drop"));
  const std::string& sampler = field(m, "prior.sampler");
  if (sampler != "deterministic" && sampler != "stochastic") {
    throw std::runtime_error("checkpoint: unknown sampler '" + sampler + "'");
  }
  p.noise = sampler == "deterministic" ? SamplerNoise::kDeterministic : SamplerNoise::kStochastic;
  p.denoiser_hidden = std::stoi(field(m, "prior.denoiser_hidden"));
  p.terminal_kl = field(m, "prior.terminal_kl") == "true";
  return p;
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const DiorCvae<S>& model, const Manifest& extra,
                     const AdamState<S>* adam) {
  Manifest manifest = describe(model.config(), model.prior());
  for (const auto& [k, v] : extra) manifest[k] = v;
  manifest["precision"] = sizeof(S) == 4 ? "f32" : "f64";
  if (adam) manifest["adam.t"] = std::to_string(adam->t);
  std::string text;
  for (const auto& [k, v] : manifest) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint manifest entry '" + k + "' cannot be encoded");
    }
    text += k + "=" + v + "\n";
  }

  // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto& params = model.params().all();
    put_u32(out, static_cast<std::uint32_t>(params.size() * (adam ? 3 : 1)));
    for (const auto& [name, p] : params) put_matrix<S, S>(out, name, p->value);
    if (adam) {
      for (const auto& [name, m] : adam->m) put_matrix<S, S>(out, "adam.m/" + name, m);
      for (const auto& [name, v] : adam->v) put_matrix<S, S>(out, "adam.v/" + name, v);
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint not found: " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(get_u32(in), '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(text.size()))) throw std::runtime_error("checkpoint truncated");
  Manifest manifest;
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("corrupt checkpoint manifest line '" + line + "'");
    manifest[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::string& precision = field(manifest, "precision");
  if (precision != "f32" && precision != "f64") throw std::runtime_error("unknown precision " + precision);

  ParameterStore<S> params;
  AdamState<S> adam;
  bool has_adam = false;
  const std::uint32_t entries = get_u32(in);
  for (std::uint32_t i = 0; i < entries; ++i) {
    std::string name(get_u32(in), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw std::runtime_error("checkpoint truncated");
    const Eigen::Index rows = get_u32(in), cols = get_u32(in);
    Mat<S> value = precision == "f32" ? get_matrix<float, S>(in, rows, cols) : get_matrix<double, S>(in, rows, cols);
    if (name.rfind("adam.m/", 0) == 0) {
      adam.m[name.substr(7)] = std::move(value);
      has_adam = true;
    } else if (name.rfind("adam.v/", 0) == 0) {
      adam.v[name.substr(7)] = std::move(value);
      has_adam = true;
    } else {
      params.add(name, std::move(value));
    }
  }
  LoadedCheckpoint<S> out;
  out.model = DiorCvae<S>::from_parameters(model_config_from(manifest), prior_config_from(manifest), std::move(params));
  if (has_adam) {
    adam.t = std::stol(field(manifest, "adam.t"));
    out.adam = std::move(adam);
  }
  out.manifest = std::move(manifest);
  return out;
}

#define DIOR_INSTANTIATE_CKPT(S)                                                                     \
  template void save_checkpoint(const std::filesystem::path&, const DiorCvae<S>&, const Manifest&,  \
                                const AdamState<S>*);                                                \
  template LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path&);

DIOR_INSTANTIATE_CKPT(float)
DIOR_INSTANTIATE_CKPT(double)

#undef DIOR_INSTANTIATE_CKPT

}  // namespace dior
