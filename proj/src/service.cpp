#include "firm/service.hpp"

#include <atomic>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <thread>

#include "httplib.h"

#include "firm/errors.hpp"
#include "firm/pipeline.hpp"
#include "firm/png_io.hpp"

namespace firm::service {

using nlohmann::json;

namespace {

struct Session {
  std::mutex mu;
  std::string id;
  ImagePlane image;
  std::vector<Guidance> guidance;
  std::uint64_t revision = 0;
  std::optional<ContrastiveMask> mask;
  std::optional<removal::RemovalOutput> output;
  Clock::time_point created, touched;
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  send_json(res, status, extra);
}

std::string to_body(const std::vector<std::uint8_t>& bytes) { return std::string(bytes.begin(), bytes.end()); }

json areas_json(const ContrastiveMask& m) {
  return json{{"0", m.area(ContrastiveMask::Level::none)},
              {"0.5", m.area(ContrastiveMask::Level::transmission)},
              {"1", m.area(ContrastiveMask::Level::reflection)}};
}

ImagePlane as_rgb(const ImagePlane& img) {
  if (img.channels() == 3) return img;
  ImagePlane out(img.height(), img.width(), 3);
  for (int ch = 0; ch < 3; ++ch)
    for (int r = 0; r < img.height(); ++r)
      for (int c = 0; c < img.width(); ++c) out.at(r, c, ch) = img.at(r, c, 0);
  return out;
}

}  // namespace

struct Service::Impl {
  ServiceOptions opts;
  SegmenterRegistry segmenters;
  std::shared_ptr<const removal::RemovalModel> removal;
  httplib::Server server;
  std::thread thread;
  int port = -1;

  mutable std::mutex store_mu;
  std::map<std::string, std::shared_ptr<Session>> sessions;
  std::function<Clock::time_point()> now = [] { return Clock::now(); };
  std::mt19937_64 id_rng{std::random_device{}()};

  void evict() {
    const auto t = now();
    const auto ttl = std::chrono::seconds(opts.ttl_seconds);
    for (auto it = sessions.begin(); it != sessions.end();) {
      if (t - it->second->touched > ttl) it = sessions.erase(it);
      else ++it;
    }
  }

  std::shared_ptr<Session> find(const std::string& id) {
    std::lock_guard lock(store_mu);
    evict();
    const auto it = sessions.find(id);
    if (it == sessions.end()) return nullptr;
    it->second->touched = now();
    return it->second;
  }

  std::string new_id() {
    static const char* hex = "0123456789abcdef";
    std::string id;
    do {
      std::uint64_t v = id_rng();
      id.clear();
      for (int i = 0; i < 16; ++i, v >>= 4) id.push_back(hex[v & 15]);
    } while (sessions.count(id));
    return id;
  }

  std::string result_url(const Session& s, const char* which) const {
    return "/sessions/" + s.id + "/result/" + which;
  }

  // Caller holds the session lock.
  const ContrastiveMask& segment(Session& s) {
    if (!s.mask) s.mask = convert(s.image, s.guidance, segmenters, opts.convert);
    return *s.mask;
  }

  void routes();
};

void Service::Impl::routes() {
  server.set_payload_max_length(opts.max_upload_bytes);
  server.set_default_headers({{"Access-Control-Allow-Origin", opts.cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    } catch (...) {
      send_error(res, 500, "unknown error");
    }
  });

  server.Get("/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"status", "ok"}}); });

  server.Get("/schema", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, schemas()); });
  server.Get(R"(/schema/([\w-]+))", [](const httplib::Request& req, httplib::Response& res) {
    const auto all = schemas();
    const std::string name = req.matches[1];
    if (!all.contains(name)) return send_error(res, 404, "unknown schema '" + name + "'");
    send_json(res, 200, all[name]);
  });

  server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    std::string body = req.body;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) return send_error(res, 400, "multipart upload needs an 'image' field");
      body = req.get_file_value("image").content;
    }
    if (body.empty()) return send_error(res, 400, "empty upload; send PNG bytes");
    ImagePlane img;
    try {
      img = as_rgb(decode_png(std::vector<std::uint8_t>(body.begin(), body.end())));
    } catch (const std::exception& e) {
      return send_error(res, 400, std::string("cannot decode image: ") + e.what());
    }
    auto s = std::make_shared<Session>();
    s->image = std::move(img);
    s->created = s->touched = now();
    {
      std::lock_guard lock(store_mu);
      evict();
      s->id = new_id();
      sessions[s->id] = s;
    }
    send_json(res, 201, {{"id", s->id}, {"height", s->image.height()}, {"width", s->image.width()}});
  });

  server.Post(R"(/sessions/(\w+)/guidance)", [this](const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    if (!s) return send_error(res, 404, "unknown session");
    std::vector<Guidance> list;
    try {
      json j = parse_json_with_lines(req.body, "request body");
      if (j.is_object() && j.contains("guidance")) j = j["guidance"];
      list = guidance_list_from_json(j);
    } catch (const DataError& e) {
      return send_error(res, 400, e.what());
    }
    std::lock_guard lock(s->mu);
    try {
      validate_guidance(list, s->image.height(), s->image.width());
      if (!segmenters.text)
        for (const auto& g : list)
          if (g.kind() == GuidanceKind::text)
            throw UnsupportedGuidance("text", "text guidance needs a text segmenter; none is configured");
    } catch (const ArgumentError& e) {
      return send_error(res, 422, e.what());
    } catch (const UnsupportedGuidance& e) {
      return send_error(res, 422, e.what(), {{"kind", e.kind()}});
    }
    s->guidance = std::move(list);
    ++s->revision;
    s->mask.reset();
    s->output.reset();
    send_json(res, 200, {{"count", s->guidance.size()}, {"revision", s->revision}});
  });

  server.Post(R"(/sessions/(\w+)/segment)", [this](const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    if (!s) return send_error(res, 404, "unknown session");
    std::lock_guard lock(s->mu);
    try {
      const auto& m = segment(*s);
      const auto png = encode_gray_png(m.height(), m.width(), m.gray_levels());
      if (req.get_header_value("Accept") == "image/png") {
        res.set_header("X-Firm-Areas", areas_json(m).dump());
        res.set_content(to_body(png), "image/png");
        return;
      }
      send_json(res, 200,
                {{"areas", areas_json(m)},
                 {"mask_url", result_url(*s, "mask")},
                 {"mask_png", httplib::detail::base64_encode(to_body(png))},
                 {"revision", s->revision}});
    } catch (const UnsupportedGuidance& e) {
      send_error(res, 422, e.what(), {{"kind", e.kind()}});
    } catch (const ArgumentError& e) {
      send_error(res, 422, e.what());
    }
  });

  server.Post(R"(/sessions/(\w+)/remove)", [this](const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    if (!s) return send_error(res, 404, "unknown session");
    std::lock_guard lock(s->mu);
    if (!s->mask && !opts.auto_segment) return send_error(res, 409, "segment the session before removal");
    const auto t0 = Clock::now();
    try {
      const auto& m = segment(*s);
      if (!s->output) s->output = removal->remove(s->image, pipeline::removal_guide(removal->config(), m, s->guidance));
    } catch (const UnsupportedGuidance& e) {
      return send_error(res, 422, e.what(), {{"kind", e.kind()}});
    } catch (const ArgumentError& e) {
      return send_error(res, 422, e.what());
    }
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    send_json(res, 200,
              {{"t_url", result_url(*s, "t")},
               {"r_url", result_url(*s, "r")},
               {"mask_url", result_url(*s, "mask")},
               {"elapsed_ms", ms},
               {"revision", s->revision}});
  });

  server.Get(R"(/sessions/(\w+)/result/(t|r|mask))", [this](const httplib::Request& req, httplib::Response& res) {
    auto s = find(req.matches[1]);
    if (!s) return send_error(res, 404, "unknown session");
    const std::string which = req.matches[2];
    std::lock_guard lock(s->mu);
    if (which == "mask") {
      if (!s->mask) return send_error(res, 404, "no mask yet; call segment");
      return res.set_content(to_body(encode_gray_png(s->mask->height(), s->mask->width(), s->mask->gray_levels())),
                             "image/png");
    }
    if (!s->output) return send_error(res, 404, "no removal result yet; call remove");
    res.set_content(to_body(encode_png(which == "t" ? s->output->T : s->output->R)), "image/png");
  });

  server.Delete(R"(/sessions/(\w+))", [this](const httplib::Request& req, httplib::Response& res) {
    std::lock_guard lock(store_mu);
    evict();
    if (sessions.erase(req.matches[1]) == 0) return send_error(res, 404, "unknown session");
    res.status = 204;
  });
}

Service::Service(ServiceOptions opts, SegmenterRegistry segmenters, std::shared_ptr<const removal::RemovalModel> removal)
    : impl_(std::make_unique<Impl>()) {
  if (!segmenters.visual) throw ArgumentError("service: a visual segmenter is required");
  if (!removal) throw ArgumentError("service: a removal model is required");
  if (opts.ttl_seconds < 1) throw ArgumentError("service: ttl must be at least one second");
  impl_->opts = std::move(opts);
  impl_->segmenters = std::move(segmenters);
  impl_->removal = std::move(removal);
  impl_->routes();
}

Service::~Service() { stop(); }

int Service::bind() {
  auto& I = *impl_;
  if (I.port > 0) return I.port;
  if (I.opts.port == 0) {
    I.port = I.server.bind_to_any_port(I.opts.host);
  } else if (I.server.bind_to_port(I.opts.host, I.opts.port)) {
    I.port = I.opts.port;
  }
  if (I.port <= 0) throw DataError("cannot bind " + I.opts.host + ":" + std::to_string(I.opts.port));
  return I.port;
}

void Service::listen() {
  bind();
  impl_->server.listen_after_bind();
}

void Service::start() {
  bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::size_t Service::session_count() const {
  std::lock_guard lock(impl_->store_mu);
  impl_->evict();
  return impl_->sessions.size();
}

void Service::set_clock(std::function<Clock::time_point()> now) {
  std::lock_guard lock(impl_->store_mu);
  impl_->now = std::move(now);
}

json schemas() {
  const json point = {{"type", "array"}, {"items", {{"type", "integer"}, {"minimum", 0}}}, {"minItems", 2}, {"maxItems", 2}};
  const json polarity = {{"type", "string"}, {"enum", {"reflection", "transmission"}}};
  auto variant = [&](const char* kind, const char* field, json schema) {
    return json{{"type", "object"},
                {"required", {"kind", "polarity", field}},
                {"properties", {{"kind", {{"const", kind}}}, {"polarity", polarity}, {field, std::move(schema)}}}};
  };
  const json guidance = {
      {"$schema", "http://json-schema.org/draft-07/schema#"},
      {"$id", "firm/guidance"},
      {"title", "Guidance"},
      {"description", "Point [row, col], box [r0, c0, r1, c1] with r0<=r1 and c0<=c1, stroke polyline, or text. "
                      "Unknown fields are preserved."},
      {"oneOf",
       {variant("point", "point", point),
        variant("box", "box",
                {{"type", "array"}, {"items", {{"type", "integer"}, {"minimum", 0}}}, {"minItems", 4}, {"maxItems", 4}}),
        variant("stroke", "points", {{"type", "array"}, {"items", point}, {"minItems", 2}}),
        variant("text", "text", {{"type", "string"}, {"minLength", 1}})}}};
  const json guidance_list = {{"$schema", "http://json-schema.org/draft-07/schema#"},
                              {"$id", "firm/guidance-list"},
                              {"type", "array"},
                              {"items", {{"$ref", "firm/guidance"}}}};
  const json session = {{"$id", "firm/session"},
                        {"type", "object"},
                        {"required", {"id", "height", "width"}},
                        {"properties",
                         {{"id", {{"type", "string"}}},
                          {"height", {{"type", "integer"}}},
                          {"width", {{"type", "integer"}}}}}};
  const json guidance_reply = {{"$id", "firm/guidance-reply"},
                               {"type", "object"},
                               {"required", {"count", "revision"}},
                               {"properties", {{"count", {{"type", "integer"}}}, {"revision", {{"type", "integer"}}}}}};
  const json areas = {{"type", "object"},
                      {"required", {"0", "0.5", "1"}},
                      {"properties",
                       {{"0", {{"type", "integer"}}}, {"0.5", {{"type", "integer"}}}, {"1", {{"type", "integer"}}}}}};
  const json segment_reply = {{"$id", "firm/segment-reply"},
                              {"type", "object"},
                              {"required", {"areas", "mask_url", "mask_png"}},
                              {"properties",
                               {{"areas", areas},
                                {"mask_url", {{"type", "string"}}},
                                {"mask_png", {{"type", "string"}, {"contentEncoding", "base64"}}},
                                {"revision", {{"type", "integer"}}}}}};
  const json remove_reply = {{"$id", "firm/remove-reply"},
                             {"type", "object"},
                             {"required", {"t_url", "r_url", "mask_url", "elapsed_ms"}},
                             {"properties",
                              {{"t_url", {{"type", "string"}}},
                               {"r_url", {{"type", "string"}}},
                               {"mask_url", {{"type", "string"}}},
                               {"elapsed_ms", {{"type", "number"}}},
                               {"revision", {{"type", "integer"}}}}}};
  const json error = {{"$id", "firm/error"},
                      {"type", "object"},
                      {"required", {"error"}},
                      {"properties", {{"error", {{"type", "string"}}}, {"kind", {{"type", "string"}}}}}};
  return json{{"guidance", guidance},       {"guidance-list", guidance_list}, {"session", session},
              {"guidance-reply", guidance_reply}, {"segment-reply", segment_reply}, {"remove-reply", remove_reply},
              {"error", error}};
}

}  // namespace firm::service
