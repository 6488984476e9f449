#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <future>
#include <thread>

#include <json.hpp>

#include "dior/service.hpp"

// After the Eigen-based headers: httplib pulls in <resolv.h>, whose `_res`
// macro collides with Eigen identifiers.
#include <httplib.h>

using namespace dior;
using nlohmann::json;

namespace {

GenerationService make_service() {
  Vocab vocab;
  for (const char* w : {"hi", "there", "how", "are", "you", "fine", "thanks", "what", "is", "up", "ok"}) vocab.add(w);
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.latent_dim = 4;
  cfg.vocab_size = vocab.size();
  cfg.max_len = 12;
  PriorConfig prior;
  prior.steps = 10;
  return GenerationService(DiorCvae<float>(cfg, prior, 3), vocab);
}

json ok_body(const ServiceResult& r) {
  REQUIRE(r.status == 200);
  return json::parse(r.body);
}

void expect_error(const ServiceResult& r, int status, const std::string& field) {
  CHECK(r.status == status);
  const json j = json::parse(r.body);
  CHECK(j["field"] == field);
  CHECK_FALSE(j["error"].get<std::string>().empty());
}

}  // namespace

TEST_CASE("generate handler") {
  const GenerationService service = make_service();
  SUBCASE("returns the requested number of responses") {
    const json j = ok_body(service.generate(R"({"context": ["hi there", "how are you"], "num_samples": 3})"));
    CHECK(j["responses"].size() == 3);
    CHECK(j["seed"].is_number_unsigned());
    CHECK(j["timing_ms"].get<double>() >= 0.0);
    CHECK(ok_body(service.generate(R"({"context": ["hi"]})"))["responses"].size() == 1);
  }
  SUBCASE("a fixed seed reproduces the responses") {
    for (const char* strategy : {"greedy", "nucleus", "beam"}) {
      const std::string body = std::string(R"({"context": ["hi"], "num_samples": 4, "seed": 77, "w": 1.5, "strategy": ")") +
                               strategy + R"("})";
      INFO(strategy);
      const json a = ok_body(service.generate(body)), b = ok_body(service.generate(body));
      CHECK(a["responses"] == b["responses"]);
      CHECK(a["seed"] == 77);
    }
  }
  SUBCASE("an omitted seed is drawn and echoed, and replays") {
    const json a = ok_body(service.generate(R"({"context": ["hi"], "num_samples": 2, "strategy": "nucleus"})"));
    const std::uint64_t seed = a["seed"].get<std::uint64_t>();
    const json b = ok_body(service.generate(json{{"context", {"hi"}}, {"num_samples", 2}, {"strategy", "nucleus"},
                                                 {"seed", seed}}.dump()));
    CHECK(a["responses"] == b["responses"]);
  }
  SUBCASE("generation does not change the weights") {
    const ParameterStore<float> before = service.model().params();
    service.generate(R"({"context": ["hi"], "num_samples": 5, "strategy": "nucleus", "seed": 1})");
    for (const auto& [name, p] : service.model().params().all()) {
      CHECK((p->value.array() == before.at(name).value.array()).all());
    }
  }
  SUBCASE("invalid requests name the field") {
    expect_error(service.generate("not json"), 400, "body");
    expect_error(service.generate("[1, 2]"), 400, "body");
    expect_error(service.generate(R"({})"), 400, "context");
    expect_error(service.generate(R"({"context": []})"), 400, "context");
    expect_error(service.generate(R"({"context": "hi"})"), 400, "context");
    expect_error(service.generate(R"({"context": ["hi", 3]})"), 400, "context");
    expect_error(service.generate(R"({"context": ["hi"], "num_samples": 0})"), 400, "num_samples");
    expect_error(service.generate(R"({"context": ["hi"], "num_samples": 17})"), 400, "num_samples");
    expect_error(service.generate(R"({"context": ["hi"], "num_samples": 2.5})"), 400, "num_samples");
    expect_error(service.generate(R"({"context": ["hi"], "w": -1})"), 400, "w");
    expect_error(service.generate(R"({"context": ["hi"], "w": "big"})"), 400, "w");
    expect_error(service.generate(R"({"context": ["hi"], "steps": 11})"), 400, "steps");
    expect_error(service.generate(R"({"context": ["hi"], "strategy": "topk"})"), 400, "strategy");
    expect_error(service.generate(R"({"context": ["hi"], "top_k": 0})"), 400, "top_k");
    expect_error(service.generate(R"({"context": ["hi"], "top_p": 0})"), 400, "top_p");
    expect_error(service.generate(R"({"context": ["hi"], "top_p": 1.5})"), 400, "top_p");
    expect_error(service.generate(R"({"context": ["hi"], "beam_width": 0})"), 400, "beam_width");
    expect_error(service.generate(R"({"context": ["hi"], "max_new_tokens": 12})"), 400, "max_new_tokens");
    expect_error(service.generate(R"({"context": ["hi"], "seed": -4})"), 400, "seed");
    expect_error(service.generate(R"({"context": ["hi"], "temperature": 0.7})"), 400, "temperature");
  }
  SUBCASE("over-length context") {
    // Formatted length: 1 speaker token + 11 words = 12 fits; one more word does not.
    CHECK(service.generate(R"({"context": ["hi there how are you fine thanks what is up ok"]})").status == 200);
    expect_error(service.generate(R"({"context": ["hi there how are you fine thanks what is up ok hi"]})"), 413, "context");
    expect_error(service.generate(R"({"context": ["hi there how are you", "fine thanks what is up"]})"), 413, "context");
  }
  SUBCASE("config summary") {
    const json c = json::parse(service.config());
    CHECK(c["model"]["max_len"] == 12);
    CHECK(c["prior"]["steps"] == 10);
    CHECK(c["prior"]["terminal_alpha_bar"].get<double>() == doctest::Approx(service.model().schedule().alpha_bar.back()));
    CHECK(c["limits"]["max_samples"] == GenerationService::kMaxSamples);
    CHECK(GenerationService::openapi_lite().find("POST /generate") != std::string::npos);
  }
  SUBCASE("vocabulary must match the model") {
    Vocab small;
    CHECK_THROWS_AS(GenerationService(service.model(), small), std::invalid_argument);
  }
}

TEST_CASE("HTTP server") {
  const GenerationService service = make_service();
  httplib::Server server;
  register_routes(server, service, 4);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread listener([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  SUBCASE("health, config, and description") {
    auto health = client.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(health->body == "ok");
    auto cfg = client.Get("/config");
    REQUIRE(cfg);
    CHECK(json::parse(cfg->body)["model"]["layers"] == 2);
    auto doc = client.Get("/openapi-lite");
    REQUIRE(doc);
    CHECK(doc->body == GenerationService::openapi_lite());
  }
  SUBCASE("generate over the wire") {
    auto res = client.Post("/generate", R"({"context": ["hi there"], "num_samples": 3, "seed": 5})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    const json j = json::parse(res->body);
    CHECK(j["responses"].size() == 3);
    CHECK(j["responses"] == json::parse(service.generate(R"({"context": ["hi there"], "num_samples": 3, "seed": 5})").body)["responses"]);

    auto bad = client.Post("/generate", R"({"context": ["hi"], "num_samples": 99})", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    CHECK(json::parse(bad->body)["field"] == "num_samples");
    auto big = client.Post("/generate", R"({"context": ["hi hi hi hi hi hi hi hi hi hi hi hi"]})", "application/json");
    REQUIRE(big);
    CHECK(big->status == 413);
    auto pre = client.Options("/generate");
    REQUIRE(pre);
    CHECK(pre->status == 204);
  }
  SUBCASE("concurrent requests are isolated") {
    std::vector<std::string> expected;
    for (int s = 0; s < 8; ++s) {
      expected.push_back(json::parse(service.generate(json{{"context", {"how are you"}}, {"num_samples", 2},
                                                           {"strategy", "nucleus"}, {"seed", s}}.dump()).body)["responses"].dump());
    }
    std::vector<std::future<std::string>> futures;
    for (int s = 0; s < 8; ++s) {
      futures.push_back(std::async(std::launch::async, [port, s] {
        httplib::Client c("127.0.0.1", port);
        auto r = c.Post("/generate", json{{"context", {"how are you"}}, {"num_samples", 2}, {"strategy", "nucleus"},
                                          {"seed", s}}.dump(), "application/json");
        return r ? json::parse(r->body)["responses"].dump() : std::string("request failed");
      }));
    }
    for (int s = 0; s < 8; ++s) CHECK(futures[static_cast<std::size_t>(s)].get() == expected[static_cast<std::size_t>(s)]);
  }

  server.stop();
  listener.join();
}
