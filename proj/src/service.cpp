#include "dior/service.hpp"

#include <chrono>
#include <random>
#include <set>

#include <httplib.h>
#include <json.hpp>

namespace dior {

using nlohmann::json;

namespace {

struct FieldError {
  int status;
  std::string field;
  std::string message;
};

ServiceResult error_result(const FieldError& e) {
  return {e.status, json{{"error", e.message}, {"field", e.field}}.dump()};
}

[[noreturn]] void reject(const std::string& field, const std::string& message, int status = 400) {
  throw FieldError{status, field, message};
}

long long integer(const json& body, const std::string& field, long long fallback, long long lo, long long hi) {
  if (!body.contains(field)) return fallback;
  const json& v = body[field];
  if (!v.is_number_integer()) reject(field, field + " must be an integer");
  const auto x = v.get<long long>();
  if (x < lo || x > hi) {
    reject(field, field + " must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return x;
}

double number(const json& body, const std::string& field, double fallback) {
  if (!body.contains(field)) return fallback;
  const json& v = body[field];
  if (!v.is_number()) reject(field, field + " must be a number");
  return v.get<double>();
}

}  // namespace

GenerationService::GenerationService(DiorCvae<float> model, Vocab vocab)
    : model_(std::move(model)), vocab_(std::move(vocab)) {
  if (vocab_.size() != model_.config().vocab_size) {
    throw std::invalid_argument("vocabulary has " + std::to_string(vocab_.size()) + " tokens but the model expects " +
                                std::to_string(model_.config().vocab_size));
  }
}

ServiceResult GenerationService::generate(const std::string& text) const {
  const auto start = std::chrono::steady_clock::now();
  try {
    json body;
    try {
      body = json::parse(text);
    } catch (const json::parse_error&) {
      reject("body", "request body is not valid JSON");
    }
    if (!body.is_object()) reject("body", "request body must be a JSON object");
    static const std::set<std::string> kKnown = {"context", "num_samples", "w", "steps", "strategy", "top_k",
                                                 "top_p", "beam_width", "max_new_tokens", "seed"};
    for (const auto& [key, _] : body.items()) {
      if (!kKnown.count(key)) reject(key, "unknown field '" + key + "'");
    }

    if (!body.contains("context")) reject("context", "context is required");
    const json& ctx = body["context"];
    if (!ctx.is_array() || ctx.empty()) reject("context", "context must be a non-empty list of strings");
    DialogExample example;
    for (const auto& u : ctx) {
      if (!u.is_string()) reject("context", "context must be a non-empty list of strings");
      example.context.push_back(vocab_.encode(u.get<std::string>()));
    }

    const ModelConfig& cfg = model_.config();
    GenerationParams params;
    params.num_samples = static_cast<int>(integer(body, "num_samples", 1, 1, kMaxSamples));
    params.guidance = number(body, "w", 0.0);
    if (!(params.guidance >= 0.0)) reject("w", "w must be >= 0");
    params.steps = static_cast<int>(integer(body, "steps", 0, 0, model_.schedule().steps));
    if (body.contains("strategy")) {
      if (!body["strategy"].is_string()) reject("strategy", "strategy must be a string");
      try {
        params.strategy = parse_strategy(body["strategy"].get<std::string>());
      } catch (const std::invalid_argument& e) {
        reject("strategy", e.what());
      }
    }
    params.top_k = static_cast<int>(integer(body, "top_k", params.top_k, 1, cfg.vocab_size));
    params.top_p = number(body, "top_p", params.top_p);
    if (!(params.top_p > 0.0 && params.top_p <= 1.0)) reject("top_p", "top_p must lie in (0, 1]");
    params.beam_width = static_cast<int>(integer(body, "beam_width", params.beam_width, 1, 64));
    params.max_new_tokens = static_cast<int>(integer(body, "max_new_tokens", params.max_new_tokens, 1, cfg.max_len - 1));
    if (body.contains("seed")) {
      if (!body["seed"].is_number_unsigned()) reject("seed", "seed must be a non-negative integer");
      params.seed = body["seed"].get<std::uint64_t>();
    } else {
      params.seed = std::random_device{}();
    }

    const std::vector<int> ids = format_context(example, 1 << 30).ids;
    if (static_cast<int>(ids.size()) > cfg.max_len) {
      reject("context", "context has " + std::to_string(ids.size()) + " tokens; the limit is " +
                            std::to_string(cfg.max_len), 413);
    }

    Rng rng = make_rng(params.seed, 0x5e);
    const auto sequences = respond(model_, std::span<const int>(ids), params, rng);
    json responses = json::array();
    for (const auto& s : sequences) responses.push_back(vocab_.decode(s));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return {200, json{{"responses", responses}, {"seed", params.seed}, {"timing_ms", ms}}.dump()};
  } catch (const FieldError& e) {
    return error_result(e);
  }
}

std::string GenerationService::config() const {
  const ModelConfig& m = model_.config();
  const PriorConfig& p = model_.prior();
  const NoiseSchedule& s = model_.schedule();
  json j;
  j["model"] = {{"layers", m.layers},         {"width", m.width},       {"heads", m.heads},
                {"latent_dim", m.latent_dim}, {"vocab_size", m.vocab_size}, {"max_len", m.max_len}};
  j["prior"] = {{"mode", to_string(p.mode)},
                {"steps", s.steps},
                {"beta_first", p.beta_first},
                {"beta_last", p.beta_last},
                {"cond_drop", p.cond_drop},
                {"sampler", p.noise == SamplerNoise::kDeterministic ? "deterministic" : "stochastic"},
                {"terminal_alpha_bar", s.alpha_bar.back()},
                {"terminal_snr", s.terminal_snr()}};
  j["limits"] = {{"max_samples", kMaxSamples}, {"max_new_tokens", m.max_len - 1}};
  return j.dump();
}

std::string GenerationService::openapi_lite() {
  return R"(POST /generate
  body: {"context": [string, ...],        required, oldest turn first
         "num_samples": int = 1,           1..16
         "w": number = 0,                  guidance weight, >= 0
         "steps": int = 0,                 sampler steps, 0 = schedule T
         "strategy": "greedy"|"beam"|"nucleus" = "greedy",
         "top_k": int = 50, "top_p": number = 0.9, "beam_width": int = 5,
         "max_new_tokens": int = 32,
         "seed": uint64}                   optional; drawn at random and echoed when absent
  200: {"responses": [string, ...], "seed": uint64, "timing_ms": number}
  400: {"error": string, "field": string}  malformed body or invalid field
  413: {"error": string, "field": "context"}  context longer than max_len tokens
GET /config        model, prior, and schedule summary (JSON)
GET /health        "ok"
GET /openapi-lite  this text
)";
}

void register_routes(httplib::Server& server, const GenerationService& service, int threads) {
  const auto pool = static_cast<std::size_t>(std::max(1, threads));
  server.new_task_queue = [pool] { return new httplib::ThreadPool(pool); };
  server.set_payload_max_length(1 << 20);
  server.Post("/generate", [&service](const httplib::Request& req, httplib::Response& res) {
    const ServiceResult r = service.generate(req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
  server.Get("/config", [&service](const httplib::Request&, httplib::Response& res) {
    res.set_content(service.config(), "application/json");
  });
  server.Get("/health", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
  server.Get("/openapi-lite", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(GenerationService::openapi_lite(), "text/plain");
  });
  // Browsers serving the playground from another origin need CORS headers.
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  server.Options("/generate", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

}  // namespace dior
