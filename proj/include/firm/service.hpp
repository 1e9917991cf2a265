#pragma once

// In-memory HTTP session service for the interactive annotate -> segment ->
// remove loop. Model states are shared and immutable; each session is
// serialised by its own mutex.

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>

#include "json.hpp"

#include "firm/guidance.hpp"
#include "firm/removal.hpp"

namespace firm::service {

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: pick a free port
  int ttl_seconds = 3600;
  std::size_t max_upload_bytes = 16u << 20;
  bool auto_segment = true;
  std::string cors_origin = "*";
  ConvertOptions convert;
};

using Clock = std::chrono::steady_clock;

class Service {
 public:
  Service(ServiceOptions opts, SegmenterRegistry segmenters, std::shared_ptr<const removal::RemovalModel> removal);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds the listening socket and returns the port.
  int bind();
  // Serves until stop(); bind() first.
  void listen();
  void start();  // bind + listen on a background thread
  void stop();

  std::size_t session_count() const;
  // Test hook: replaces the clock used for TTL eviction.
  void set_clock(std::function<Clock::time_point()> now);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// JSON schemas served under /schema.
nlohmann::json schemas();

}  // namespace firm::service
