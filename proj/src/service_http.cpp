#include "pimap/service_http.hpp"

#include <httplib.h>
#include <json.hpp>

#include <iostream>

namespace pimap {
namespace {

using nlohmann::json;

void send_json(httplib::Response& res, int status, const std::string& body) {
  res.status = status;
  res.set_content(body, "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, json{{"error", message}, {"status", status}}.dump());
}

// Runs `fn`, turning service exceptions into error responses.
template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    send_error(res, status_for(e), e.what());
  }
}

std::vector<UploadedFile> files_named(const httplib::Request& req, std::initializer_list<const char*> keys) {
  std::vector<UploadedFile> out;
  for (const char* key : keys) {
    for (const auto& f : req.get_file_values(key)) {
      if (!f.filename.empty()) out.push_back({f.filename, f.content_type, f.content});
    }
  }
  return out;
}

std::optional<std::string> field(const httplib::Request& req, const char* key) {
  if (!req.has_file(key)) return std::nullopt;
  return req.get_file_value(key).content;
}

bool truthy(const std::string& v) { return v == "1" || v == "true" || v == "yes"; }

}  // namespace

int status_for(const std::exception& e) {
  if (dynamic_cast<const ConflictError*>(&e)) return 409;
  if (dynamic_cast<const PayloadTooLargeError*>(&e)) return 413;
  if (dynamic_cast<const UnboundMentionError*>(&e)) return 422;
  if (dynamic_cast<const NotFoundError*>(&e)) return 404;
  if (dynamic_cast<const CapacityError*>(&e)) return 429;
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const UsageError*>(&e) ||
      dynamic_cast<const DecodeError*>(&e) || dynamic_cast<const VocabularyError*>(&e) ||
      dynamic_cast<const nlohmann::json::exception*>(&e)) {
    return 400;
  }
  return 500;
}

void mount_routes(httplib::Server& server, PimapService& service) {
  server.set_payload_max_length(service.config().max_upload_bytes + (1u << 20));

  server.set_post_routing_handler([&service](const httplib::Request&, httplib::Response& res) {
    res.set_header("X-Encoder-Id", service.encoder_id());
    res.set_header("X-Config-Hash", service.config_hash());
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      send_error(res, res.status, res.status == 413 ? "upload too large" : httplib::status_message(res.status));
    }
  });

  server.Post("/personas", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.is_multipart_form_data()) throw ValidationError("expected multipart/form-data");
      const auto name = field(req, "name");
      const auto category = field(req, "category");
      if (!name || name->empty()) throw ValidationError("missing field `name`");
      if (!category || category->empty()) throw ValidationError("missing field `category`");
      const auto templates = files_named(req, {"templates", "templates[]"});
      if (templates.empty()) throw ValidationError("missing field `templates`: upload at least one image");
      const auto p = service.create_persona(*name, *category, templates, field(req, "caption"));
      send_json(res, 201, to_json_text(p));
    });
  });

  server.Get("/personas", [&service](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, to_json_text(service.list_personas())); });
  });

  server.Get(R"(/personas/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, to_json_text(service.persona(req.matches[1]))); });
  });

  server.Post(R"(/personas/([^/]+)/train)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const bool retrain = req.has_param("retrain") && truthy(req.get_param_value("retrain"));
      const auto id = service.train(req.matches[1], retrain);
      send_json(res, 202, json{{"job_id", id}}.dump());
    });
  });

  server.Get(R"(/jobs/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, to_json_text(service.job(req.matches[1]))); });
  });

  server.Post("/search", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = json::parse(req.body);
      if (!body.contains("query") || !body["query"].is_string()) throw ValidationError("missing string field `query`");
      const auto k = body.value("k", 10);
      if (k < 1) throw ValidationError("k must be >= 1");
      const auto result = service.search(body["query"].get<std::string>(), static_cast<std::size_t>(k));
      send_json(res, 200, to_json_text(result));
    });
  });

  server.Post("/index", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::string id;
      if (req.is_multipart_form_data()) {
        id = service.ingest_files(files_named(req, {"media", "media[]"}));
      } else if (req.get_header_value("Content-Type").rfind("application/json", 0) == 0) {
        const auto body = json::parse(req.body);
        if (!body.contains("manifest") || !body["manifest"].is_string()) {
          throw ValidationError("missing string field `manifest`");
        }
        id = service.ingest_manifest(body["manifest"].get<std::string>());
      } else {
        id = service.ingest_manifest(req.body);
      }
      send_json(res, 202, json{{"job_id", id}}.dump());
    });
  });

  server.Get(R"(/media/(.+)/thumbnail)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      res.status = 200;
      res.set_content(service.thumbnail(req.matches[1]), "image/x-portable-pixmap");
    });
  });
}

void serve_http(PimapService& service, const std::string& host, int port) {
  httplib::Server server;
  mount_routes(server, service);
  std::cerr << "pimap service on http://" << host << ":" << port << " (encoder " << service.encoder_id()
            << ", config " << service.config_hash() << ")\n";
  if (!server.listen(host, port)) throw ExternalToolError("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace pimap
