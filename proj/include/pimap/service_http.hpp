#pragma once

#include "pimap/service.hpp"

#include <string>

namespace httplib {
class Server;
}

namespace pimap {

// Routes:
//   POST /personas               multipart: name, category, templates (1+ files), caption
//   GET  /personas
//   GET  /personas/{id}
//   POST /personas/{id}/train    ?retrain=true to train a trained persona again
//   GET  /jobs/{id}
//   POST /search                 JSON {"query": "...@name...", "k": 5}
//   POST /index                  JSONL manifest body, JSON {"manifest": "..."}, or multipart `media` files
//   GET  /media/{id}/thumbnail
// Responses are JSON (thumbnails are PPM) and carry X-Encoder-Id and
// X-Config-Hash. Errors are {"error": message, "status": code}.
void mount_routes(httplib::Server& server, PimapService& service);

// Blocks serving on host:port until the server is stopped.
void serve_http(PimapService& service, const std::string& host, int port);

// HTTP status for an exception thrown by the service.
int status_for(const std::exception& e);

}  // namespace pimap
