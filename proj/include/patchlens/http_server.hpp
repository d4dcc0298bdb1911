#pragma once

#include <memory>
#include <string>

#include "patchlens/service.hpp"

namespace httplib {
class Server;
}

namespace patchlens {

// JSON-over-HTTP front end for a Service.
//   POST /analyze   application/json (image as image_base64) or multipart/form-data
//                   (file part "image", other fields as text parts)
//   POST /probe     application/json
//   GET  /heatmaps/<file>
//   GET  /healthz
// Errors are {"schema": "error-v1", "error": {code, message, field?}} with
// status 400 (malformed), 404 (unknown model or session), 410 (expired
// session), 422 (undecodable image, missing capability), 503 (queue full).
class HttpServer {
public:
    explicit HttpServer(std::shared_ptr<Service> service);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // Port 0 picks a free port. Returns the bound port; throws InputError on failure.
    int bind(const std::string& host, int port);
    // Blocks until stop().
    void listen();
    // Blocks until a concurrent listen() accepts connections.
    void wait_until_ready() const;
    void stop();

private:
    std::shared_ptr<Service> service_;
    std::unique_ptr<httplib::Server> server_;
};

}  // namespace patchlens
