#pragma once

// HTTP generation service. Request handling is plain functions over JSON
// text so it can be exercised without sockets; register_routes wires them
// into an httplib server.

#include <cstdint>
#include <string>

#include "dior/corpus.hpp"
#include "dior/model.hpp"

namespace httplib {
class Server;
}

namespace dior {

struct ServiceResult {
  int status = 200;
  std::string body;  // JSON
};

class GenerationService {
 public:
  static constexpr int kMaxSamples = 16;

  GenerationService(DiorCvae<float> model, Vocab vocab);

  /// POST /generate. 400 names the offending field; 413 for over-length contexts.
  ServiceResult generate(const std::string& body) const;
  /// GET /config.
  std::string config() const;
  /// GET /openapi-lite: plain-text endpoint description.
  static std::string openapi_lite();

  const DiorCvae<float>& model() const { return model_; }
  const Vocab& vocab() const { return vocab_; }

 private:
  DiorCvae<float> model_;
  Vocab vocab_;
};

/// Installs /generate, /config, /health and /openapi-lite, and a worker pool
/// of `threads` threads.
void register_routes(httplib::Server& server, const GenerationService& service, int threads);

}  // namespace dior
